use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapters::AdapterConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::tensor::Matrix;
use crate::wire::{
    decode_tensors, encode_matrix, encode_tensor, Direction, Frame, MessageType, ModuleTag, Tensor, TrafficLedger,
    Transport, WireDType, NO_LAYER,
};

/// Version of the session choreography carried in `Hello`.
pub const PROTOCOL_VERSION: u32 = 1;

/// Hex SHA-256 over everything both nodes must agree on.
pub fn config_digest(model: &ModelConfig, adapter: &AdapterConfig) -> String {
    #[derive(Serialize)]
    struct Agreed<'a> {
        model: &'a ModelConfig,
        r_c2d: usize,
        r_d2c: usize,
        scale: f32,
        adapted_layers: &'a [usize],
        trainable_embedding: bool,
        init_seed: u64,
    }
    let json = serde_json::to_vec(&Agreed {
        model,
        r_c2d: adapter.r_c2d,
        r_d2c: adapter.r_d2c,
        scale: adapter.scale,
        adapted_layers: &adapter.adapted_layers,
        trainable_embedding: adapter.trainable_embedding,
        init_seed: adapter.init_seed,
    })
    .expect("config serializes");
    Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub(crate) struct Hello {
    pub protocol: u32,
    pub digest: String,
    pub nonce: u64,
    pub wire_dtype: WireDType,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub(crate) struct HelloAck {
    pub session_id: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub(crate) enum ErrorKind {
    Handshake,
    Protocol,
    Capacity,
    Input,
    Internal,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub(crate) struct ErrorBody {
    pub kind: ErrorKind,
    pub message: String,
}

impl ErrorBody {
    pub fn from_error(e: &Error) -> Self {
        let kind = match e {
            Error::Handshake(_) | Error::Config(_) => ErrorKind::Handshake,
            Error::Protocol(_) | Error::Framing(_) => ErrorKind::Protocol,
            Error::Capacity(_) => ErrorKind::Capacity,
            Error::Input(_) => ErrorKind::Input,
            _ => ErrorKind::Internal,
        };
        ErrorBody {
            kind,
            message: e.to_string(),
        }
    }

    pub fn into_error(self) -> Error {
        let msg = format!("cloud: {}", self.message);
        match self.kind {
            ErrorKind::Handshake => Error::Handshake(msg),
            ErrorKind::Protocol => Error::Protocol(msg),
            ErrorKind::Capacity => Error::Capacity(msg),
            ErrorKind::Input => Error::Input(msg),
            ErrorKind::Internal => Error::Internal(msg),
        }
    }
}

pub(crate) fn to_json<T: Serialize>(v: &T) -> Vec<u8> {
    serde_json::to_vec(v).expect("control message serializes")
}

pub(crate) fn from_json<'a, T: Deserialize<'a>>(bytes: &'a [u8], what: &str) -> Result<T> {
    serde_json::from_slice(bytes).map_err(|e| Error::Protocol(format!("malformed {what}: {e}")))
}

/// One side of a session: whitelists, sequence numbers and the traffic ledger
/// wrapped around a transport.
pub(crate) struct Channel<T> {
    transport: T,
    outbound: Direction,
    pub session_id: u32,
    next_seq: u32,
    last_recv: Option<u32>,
    pub ledger: TrafficLedger,
    pub dtype: WireDType,
}

impl<T: Transport> Channel<T> {
    pub fn new(transport: T, outbound: Direction, dtype: WireDType) -> Self {
        Channel {
            transport,
            outbound,
            session_id: 0,
            next_seq: 0,
            last_recv: None,
            ledger: TrafficLedger::default(),
            dtype,
        }
    }

    pub fn send(&mut self, msg_type: MessageType, layer: u16, module_tag: ModuleTag, payload: Vec<u8>) -> Result<()> {
        if !msg_type.allowed(self.outbound) {
            return Err(Error::Protocol(format!(
                "refusing to send {msg_type:?} {:?}",
                self.outbound
            )));
        }
        let frame = Frame {
            msg_type,
            session_id: self.session_id,
            seq: self.next_seq,
            layer,
            module_tag,
            payload,
        };
        self.next_seq = self
            .next_seq
            .checked_add(1)
            .ok_or_else(|| Error::Protocol("sequence number space exhausted".into()))?;
        self.ledger.record(self.outbound, &frame)?;
        self.transport.send(&frame)
    }

    pub fn send_matrices(&mut self, msg_type: MessageType, layer: u16, tag: ModuleTag, ms: &[&Matrix]) -> Result<()> {
        let mut payload = Vec::new();
        for m in ms {
            encode_matrix(m, self.dtype, &mut payload)?;
        }
        self.send(msg_type, layer, tag, payload)
    }

    pub fn send_tensor(&mut self, msg_type: MessageType, dims: &[u32], data: &[f32]) -> Result<()> {
        let mut payload = Vec::new();
        encode_tensor(dims, data, self.dtype, &mut payload)?;
        self.send(msg_type, NO_LAYER, ModuleTag::Shared, payload)
    }

    pub fn send_error(&mut self, e: &Error) -> Result<()> {
        self.send(
            MessageType::ErrorMsg,
            NO_LAYER,
            ModuleTag::Shared,
            to_json(&ErrorBody::from_error(e)),
        )
    }

    pub fn recv(&mut self) -> Result<Frame> {
        let frame = self.transport.recv()?;
        let inbound = self.outbound.reverse();
        if !frame.msg_type.allowed(inbound) {
            return Err(Error::Protocol(format!(
                "{:?} is not allowed {inbound:?}",
                frame.msg_type
            )));
        }
        if self.session_id != 0 && frame.session_id != self.session_id {
            return Err(Error::Protocol(format!(
                "frame for session {} on session {}",
                frame.session_id, self.session_id
            )));
        }
        if let Some(prev) = self.last_recv {
            if frame.seq <= prev {
                return Err(Error::Protocol(format!("sequence number {} after {prev}", frame.seq)));
            }
        }
        self.last_recv = Some(frame.seq);
        self.ledger.record(inbound, &frame)?;
        Ok(frame)
    }

    /// Receives a tensor-carrying frame of the given type and layer, mapping a
    /// peer `ErrorMsg` to the matching error.
    pub fn recv_tensors(&mut self, msg_type: MessageType, layer: u16) -> Result<Vec<Tensor>> {
        let frame = self.recv()?;
        expect_tensors(frame, msg_type, layer)
    }
}

pub(crate) fn expect_tensors(frame: Frame, msg_type: MessageType, layer: u16) -> Result<Vec<Tensor>> {
    if frame.msg_type == MessageType::ErrorMsg {
        return Err(from_json::<ErrorBody>(&frame.payload, "error message")?.into_error());
    }
    if frame.msg_type != msg_type || frame.layer != layer {
        return Err(Error::Protocol(format!(
            "expected {msg_type:?} for layer {layer}, got {:?} for layer {}",
            frame.msg_type, frame.layer
        )));
    }
    decode_tensors(&frame.payload)
}

/// Converts received tensors into matrices of the given shapes.
pub(crate) fn matrices(tensors: Vec<Tensor>, shape: (usize, usize), count: usize) -> Result<Vec<Matrix>> {
    if tensors.len() != count {
        return Err(Error::Protocol(format!("expected {count} tensors, got {}", tensors.len())));
    }
    tensors
        .into_iter()
        .map(|t| {
            let m = t.into_matrix()?;
            if m.shape() != shape {
                return Err(Error::Protocol(format!("tensor shape {:?}, expected {shape:?}", m.shape())));
            }
            Ok(m)
        })
        .collect()
}

pub(crate) fn layer_id(layer: usize) -> u16 {
    layer as u16
}
