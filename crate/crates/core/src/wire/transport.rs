use std::io::{BufReader, BufWriter, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::sync::mpsc::{channel, Receiver, Sender};
use std::sync::{Arc, Mutex};

use crate::error::{Error, Result};

use super::frame::{decode_frame, encode_frame, read_frame, write_frame, Direction, Frame};

/// An ordered, reliable frame channel to one peer.
pub trait Transport: Send {
    fn send(&mut self, frame: &Frame) -> Result<()>;
    fn recv(&mut self) -> Result<Frame>;
}

impl<T: Transport + ?Sized> Transport for Box<T> {
    fn send(&mut self, frame: &Frame) -> Result<()> {
        (**self).send(frame)
    }

    fn recv(&mut self) -> Result<Frame> {
        (**self).recv()
    }
}

/// In-process transport. Frames cross as encoded bytes so the codec is
/// exercised exactly as on a socket.
pub struct LoopbackTransport {
    tx: Sender<Vec<u8>>,
    rx: Receiver<Vec<u8>>,
}

pub fn loopback_pair() -> (LoopbackTransport, LoopbackTransport) {
    let (a_tx, b_rx) = channel();
    let (b_tx, a_rx) = channel();
    (
        LoopbackTransport { tx: a_tx, rx: a_rx },
        LoopbackTransport { tx: b_tx, rx: b_rx },
    )
}

impl Transport for LoopbackTransport {
    fn send(&mut self, frame: &Frame) -> Result<()> {
        self.tx
            .send(encode_frame(frame))
            .map_err(|_| Error::Transport("loopback peer disconnected".into()))
    }

    fn recv(&mut self) -> Result<Frame> {
        let bytes = self
            .rx
            .recv()
            .map_err(|_| Error::Transport("loopback peer disconnected".into()))?;
        let (frame, used) = decode_frame(&bytes)?;
        if used != bytes.len() {
            return Err(Error::Framing(format!("{} trailing bytes after frame", bytes.len() - used)));
        }
        Ok(frame)
    }
}

pub struct TcpTransport {
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
}

impl TcpTransport {
    pub fn connect(addr: impl ToSocketAddrs) -> Result<Self> {
        let stream = TcpStream::connect(addr).map_err(|e| Error::Transport(format!("connect failed: {e}")))?;
        Self::from_stream(stream)
    }

    pub fn from_stream(stream: TcpStream) -> Result<Self> {
        stream.set_nodelay(true)?;
        Ok(TcpTransport {
            reader: BufReader::new(stream.try_clone()?),
            writer: BufWriter::new(stream),
        })
    }
}

impl Transport for TcpTransport {
    fn send(&mut self, frame: &Frame) -> Result<()> {
        write_frame(&mut self.writer, frame)?;
        self.writer.flush()?;
        Ok(())
    }

    fn recv(&mut self) -> Result<Frame> {
        read_frame(&mut self.reader)?.ok_or_else(|| Error::Transport("peer closed the connection".into()))
    }
}

/// One frame observed by a [`Tap`].
#[derive(Debug, Clone, PartialEq)]
pub struct TapRecord {
    pub direction: Direction,
    pub bytes: Vec<u8>,
}

pub type TapLog = Arc<Mutex<Vec<TapRecord>>>;

/// Records every encoded frame passing through the wrapped transport.
/// `outbound` is the direction of frames this endpoint sends.
pub struct Tap<T> {
    inner: T,
    outbound: Direction,
    log: TapLog,
}

impl<T: Transport> Tap<T> {
    pub fn new(inner: T, outbound: Direction) -> (Self, TapLog) {
        let log = TapLog::default();
        (
            Tap {
                inner,
                outbound,
                log: log.clone(),
            },
            log,
        )
    }

    pub fn with_log(inner: T, outbound: Direction, log: TapLog) -> Self {
        Tap { inner, outbound, log }
    }

    fn push(&self, direction: Direction, frame: &Frame) {
        self.log.lock().expect("tap log poisoned").push(TapRecord {
            direction,
            bytes: encode_frame(frame),
        });
    }
}

impl<T: Transport> Transport for Tap<T> {
    fn send(&mut self, frame: &Frame) -> Result<()> {
        self.push(self.outbound, frame);
        self.inner.send(frame)
    }

    fn recv(&mut self) -> Result<Frame> {
        let frame = self.inner.recv()?;
        self.push(self.outbound.reverse(), &frame);
        Ok(frame)
    }
}

/// Fails permanently once a given number of sends or receives has succeeded.
pub struct FaultyTransport<T> {
    inner: Option<T>,
    sends_left: Option<usize>,
    recvs_left: Option<usize>,
}

impl<T: Transport> FaultyTransport<T> {
    pub fn new(inner: T, fail_after_sends: Option<usize>, fail_after_recvs: Option<usize>) -> Self {
        FaultyTransport {
            inner: Some(inner),
            sends_left: fail_after_sends,
            recvs_left: fail_after_recvs,
        }
    }

    fn trip(budget: &mut Option<usize>, inner: &mut Option<T>) -> Result<()> {
        if let Some(n) = budget {
            if *n == 0 {
                // dropping the inner transport disconnects the peer as well
                *inner = None;
            } else {
                *n -= 1;
            }
        }
        if inner.is_none() {
            return Err(Error::Transport("injected fault".into()));
        }
        Ok(())
    }
}

impl<T: Transport> Transport for FaultyTransport<T> {
    fn send(&mut self, frame: &Frame) -> Result<()> {
        Self::trip(&mut self.sends_left, &mut self.inner)?;
        self.inner.as_mut().expect("checked by trip").send(frame)
    }

    fn recv(&mut self) -> Result<Frame> {
        Self::trip(&mut self.recvs_left, &mut self.inner)?;
        self.inner.as_mut().expect("checked by trip").recv()
    }
}
