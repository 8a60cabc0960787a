use std::io::{ErrorKind, Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"PLRR";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 21;
/// `layer` value for frames not tied to a decoder layer.
pub const NO_LAYER: u16 = 0xFFFF;
/// Upper bound on a single payload; anything larger is treated as corruption.
pub const MAX_PAYLOAD: u32 = 1 << 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Direction {
    /// Device to cloud.
    D2C,
    /// Cloud to device.
    C2D,
}

impl Direction {
    pub fn reverse(self) -> Direction {
        match self {
            Direction::D2C => Direction::C2D,
            Direction::C2D => Direction::D2C,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[repr(u8)]
pub enum MessageType {
    Hello = 1,
    HelloAck = 2,
    TokenEmbeds = 3,
    DownAct = 4,
    /// The q, k and v products of one layer, three tensors in one frame.
    UpActs = 5,
    LastHidden = 6,
    FinalHiddenPos = 7,
    GradLastHidden = 8,
    GradDown = 9,
    GradUp = 10,
    GradEmbeds = 11,
    Close = 12,
    ErrorMsg = 13,
}

impl MessageType {
    pub const ALL: [MessageType; 13] = [
        MessageType::Hello,
        MessageType::HelloAck,
        MessageType::TokenEmbeds,
        MessageType::DownAct,
        MessageType::UpActs,
        MessageType::LastHidden,
        MessageType::FinalHiddenPos,
        MessageType::GradLastHidden,
        MessageType::GradDown,
        MessageType::GradUp,
        MessageType::GradEmbeds,
        MessageType::Close,
        MessageType::ErrorMsg,
    ];

    pub fn from_u8(b: u8) -> Option<MessageType> {
        MessageType::ALL.get(b.wrapping_sub(1) as usize).copied()
    }

    /// Whether this message may travel in `dir`.
    pub fn allowed(self, dir: Direction) -> bool {
        use MessageType::*;
        match dir {
            Direction::D2C => matches!(self, Hello | TokenEmbeds | UpActs | GradLastHidden | GradUp | Close),
            Direction::C2D => matches!(
                self,
                HelloAck | DownAct | LastHidden | FinalHiddenPos | GradDown | GradEmbeds | Close | ErrorMsg
            ),
        }
    }

    /// Whether the payload is a sequence of tensors (as opposed to control data).
    pub fn carries_tensors(self) -> bool {
        use MessageType::*;
        !matches!(self, Hello | HelloAck | Close | ErrorMsg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum ModuleTag {
    Shared = 0,
    Q = 1,
    K = 2,
    V = 3,
    QkvBundle = 4,
}

impl ModuleTag {
    pub fn from_u8(b: u8) -> Option<ModuleTag> {
        Some(match b {
            0 => ModuleTag::Shared,
            1 => ModuleTag::Q,
            2 => ModuleTag::K,
            3 => ModuleTag::V,
            4 => ModuleTag::QkvBundle,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub msg_type: MessageType,
    pub session_id: u32,
    pub seq: u32,
    pub layer: u16,
    pub module_tag: ModuleTag,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn encoded_len(&self) -> usize {
        HEADER_LEN + self.payload.len()
    }
}

/// Serializes a frame: 21-byte little-endian header followed by the payload.
pub fn encode_frame(frame: &Frame) -> Vec<u8> {
    let mut out = Vec::with_capacity(frame.encoded_len());
    encode_frame_into(frame, &mut out);
    out
}

pub fn encode_frame_into(frame: &Frame, out: &mut Vec<u8>) {
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(frame.msg_type as u8);
    out.extend_from_slice(&frame.session_id.to_le_bytes());
    out.extend_from_slice(&frame.seq.to_le_bytes());
    out.extend_from_slice(&frame.layer.to_le_bytes());
    out.push(frame.module_tag as u8);
    out.extend_from_slice(&(frame.payload.len() as u32).to_le_bytes());
    out.extend_from_slice(&frame.payload);
}

struct Header {
    msg_type: MessageType,
    session_id: u32,
    seq: u32,
    layer: u16,
    module_tag: ModuleTag,
    payload_len: u32,
}

fn parse_header(h: &[u8; HEADER_LEN]) -> Result<Header> {
    if h[..4] != MAGIC {
        return Err(Error::Protocol(format!("bad magic {:02x?}", &h[..4])));
    }
    if h[4] != VERSION {
        return Err(Error::Protocol(format!("unsupported protocol version {}", h[4])));
    }
    let msg_type = MessageType::from_u8(h[5]).ok_or_else(|| Error::Protocol(format!("unknown message type {}", h[5])))?;
    let module_tag = ModuleTag::from_u8(h[16]).ok_or_else(|| Error::Protocol(format!("unknown module tag {}", h[16])))?;
    let u32_at = |i: usize| u32::from_le_bytes([h[i], h[i + 1], h[i + 2], h[i + 3]]);
    let payload_len = u32_at(17);
    if payload_len > MAX_PAYLOAD {
        return Err(Error::Framing(format!("payload length {payload_len} exceeds limit")));
    }
    Ok(Header {
        msg_type,
        session_id: u32_at(6),
        seq: u32_at(10),
        layer: u16::from_le_bytes([h[14], h[15]]),
        module_tag,
        payload_len,
    })
}

/// Decodes one frame from the front of `bytes`, returning it and the number of
/// bytes consumed.
pub fn decode_frame(bytes: &[u8]) -> Result<(Frame, usize)> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Framing(format!(
            "truncated header: {} of {HEADER_LEN} bytes",
            bytes.len()
        )));
    }
    let header: &[u8; HEADER_LEN] = bytes[..HEADER_LEN].try_into().expect("length checked");
    let h = parse_header(header)?;
    let end = HEADER_LEN + h.payload_len as usize;
    if bytes.len() < end {
        return Err(Error::Framing(format!(
            "truncated payload: {} of {} bytes",
            bytes.len() - HEADER_LEN,
            h.payload_len
        )));
    }
    Ok((
        Frame {
            msg_type: h.msg_type,
            session_id: h.session_id,
            seq: h.seq,
            layer: h.layer,
            module_tag: h.module_tag,
            payload: bytes[HEADER_LEN..end].to_vec(),
        },
        end,
    ))
}

pub fn write_frame(w: &mut impl Write, frame: &Frame) -> Result<()> {
    w.write_all(&encode_frame(frame))?;
    Ok(())
}

fn read_exact_or_framing(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        ErrorKind::UnexpectedEof => Error::Framing(format!("stream ended inside {what}")),
        _ => Error::Io(e),
    })
}

/// Reads one frame from a byte stream. A clean end of stream before the first
/// header byte is reported as `Ok(None)`.
pub fn read_frame(r: &mut impl Read) -> Result<Option<Frame>> {
    let mut header = [0u8; HEADER_LEN];
    let mut got = 0;
    while got == 0 {
        match r.read(&mut header) {
            Ok(0) => return Ok(None),
            Ok(n) => got = n,
            Err(e) if e.kind() == ErrorKind::Interrupted => continue,
            Err(e) => return Err(Error::Io(e)),
        }
    }
    read_exact_or_framing(r, &mut header[got..], "frame header")?;
    let h = parse_header(&header)?;
    let mut payload = vec![0u8; h.payload_len as usize];
    read_exact_or_framing(r, &mut payload, "frame payload")?;
    Ok(Some(Frame {
        msg_type: h.msg_type,
        session_id: h.session_id,
        seq: h.seq,
        layer: h.layer,
        module_tag: h.module_tag,
        payload,
    }))
}
