use std::collections::HashSet;
use std::net::TcpListener;
use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;

use serde::{Deserialize, Serialize};

use crate::adapters::{AdapterConfig, AdapterPort, CloudAdapterWeights, TrainableFlags};
use crate::error::{Error, Result};
use crate::model::{
    decoder_backward, decoder_forward, decoder_forward_train, init_layers, KvCache, LayerWeights, ModelConfig,
};
use crate::tensor::Matrix;
use crate::wire::{Direction, Frame, MessageType, ModuleTag, TcpTransport, TrafficLedger, Transport, WireDType, NO_LAYER};

use super::channel::{
    config_digest, from_json, layer_id, matrices, to_json, Channel, Hello, HelloAck, PROTOCOL_VERSION,
};

/// The cloud node: frozen decoder stack and frozen `A`, `B`. Serves any number
/// of sessions concurrently; each session is handled sequentially.
pub struct CloudNode {
    cfg: ModelConfig,
    acfg: AdapterConfig,
    layers: Vec<LayerWeights>,
    adapters: CloudAdapterWeights,
    digest: String,
    nonces: Mutex<HashSet<u64>>,
    next_session: AtomicU32,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionSummary {
    pub session_id: u32,
    pub forward_passes: u64,
    pub train_steps: u64,
    pub ledger: TrafficLedger,
    /// The device ended the session with `Close`.
    pub closed: bool,
}

impl CloudNode {
    pub fn new(cfg: ModelConfig, acfg: AdapterConfig) -> Result<Self> {
        cfg.validate()?;
        let layers = init_layers(&cfg)?;
        let adapters = CloudAdapterWeights::init(&acfg, cfg.d);
        Self::with_weights(cfg, acfg, layers, adapters)
    }

    pub fn with_weights(
        cfg: ModelConfig,
        acfg: AdapterConfig,
        layers: Vec<LayerWeights>,
        adapters: CloudAdapterWeights,
    ) -> Result<Self> {
        for w in acfg.validate(cfg.n_layers, cfg.d)? {
            log::warn!("{w}");
        }
        if acfg.trainable_a || acfg.trainable_b {
            return Err(Error::Config(
                "the split runtime keeps A and B frozen; train them with the monolithic trainer".into(),
            ));
        }
        if cfg.n_layers >= NO_LAYER as usize {
            return Err(Error::Config(format!("{} layers exceed the frame layer field", cfg.n_layers)));
        }
        let digest = config_digest(&cfg, &acfg);
        Ok(CloudNode {
            cfg,
            acfg,
            layers,
            adapters,
            digest,
            nonces: Mutex::new(HashSet::new()),
            next_session: AtomicU32::new(1),
        })
    }

    pub fn digest(&self) -> &str {
        &self.digest
    }

    pub fn adapters(&self) -> &CloudAdapterWeights {
        &self.adapters
    }

    pub fn layers(&self) -> &[LayerWeights] {
        &self.layers
    }

    fn handshake<T: Transport>(&self, chan: &mut Channel<T>) -> Result<()> {
        let frame = chan.recv()?;
        if frame.msg_type != MessageType::Hello {
            return Err(Error::Protocol(format!("expected Hello, got {:?}", frame.msg_type)));
        }
        let hello: Hello = from_json(&frame.payload, "hello")?;
        if hello.protocol != PROTOCOL_VERSION {
            return Err(Error::Protocol(format!(
                "protocol version {} not supported (expected {PROTOCOL_VERSION})",
                hello.protocol
            )));
        }
        if hello.digest != self.digest {
            return Err(Error::Handshake(format!(
                "handshake digest mismatch: device {}, cloud {}",
                hello.digest, self.digest
            )));
        }
        if !self.nonces.lock().expect("nonce set poisoned").insert(hello.nonce) {
            return Err(Error::Handshake(format!("replayed hello nonce {}", hello.nonce)));
        }
        chan.dtype = hello.wire_dtype;
        let id = self.next_session.fetch_add(1, Ordering::Relaxed);
        chan.session_id = id;
        chan.send(
            MessageType::HelloAck,
            NO_LAYER,
            ModuleTag::Shared,
            to_json(&HelloAck { session_id: id }),
        )
    }

    /// Runs one session to completion over `transport`.
    pub fn serve_session<T: Transport>(&self, transport: T) -> Result<SessionSummary> {
        let mut chan = Channel::new(transport, Direction::C2D, WireDType::F32);
        if let Err(e) = self.handshake(&mut chan) {
            log::info!("handshake refused: {e}");
            // best effort: the device may already be gone
            let _ = chan.send_error(&e);
            return Err(e);
        }
        let mut summary = SessionSummary {
            session_id: chan.session_id,
            ..Default::default()
        };
        log::info!("session {} opened", chan.session_id);
        let mut cache = KvCache::new(self.cfg.n_layers, self.cfg.d, self.cfg.max_seq);
        let result = loop {
            let frame = match chan.recv() {
                Ok(f) => f,
                Err(e) => break Err(e),
            };
            let step = match frame.msg_type {
                MessageType::TokenEmbeds => self.handle_embeds(&mut chan, frame, &mut cache, &mut summary),
                MessageType::Close => {
                    summary.closed = true;
                    break chan.send(MessageType::Close, NO_LAYER, ModuleTag::Shared, Vec::new());
                }
                other => Err(Error::Protocol(format!("unexpected {other:?} between requests"))),
            };
            match step {
                Ok(()) => {}
                Err(e @ Error::Capacity(_)) => chan.send_error(&e)?,
                Err(e) => {
                    let _ = chan.send_error(&e);
                    break Err(e);
                }
            }
        };
        summary.ledger = chan.ledger.clone();
        match result {
            Ok(()) => {
                log::info!("session {} closed", summary.session_id);
                Ok(summary)
            }
            Err(e) => {
                log::info!("session {} aborted: {e}", summary.session_id);
                Err(e)
            }
        }
    }

    fn handle_embeds<T: Transport>(
        &self,
        chan: &mut Channel<T>,
        frame: Frame,
        cache: &mut KvCache,
        summary: &mut SessionSummary,
    ) -> Result<()> {
        let mut tensors = crate::wire::decode_tensors(&frame.payload)?;
        if tensors.len() != 1 {
            return Err(Error::Protocol(format!("TokenEmbeds carries {} tensors", tensors.len())));
        }
        let t = tensors.remove(0);
        let d = self.cfg.d;
        match t.dims.as_slice() {
            &[_, cols] if cols as usize == d => {
                let acts = t.into_matrix()?;
                cache.ensure_room(acts.rows())?;
                let mut port = RemotePort { chan: &mut *chan, r_c2d: self.acfg.r_c2d, r_d2c: self.acfg.r_d2c };
                let hidden = decoder_forward(&self.cfg, &self.layers, &self.adapters, &acts, cache, &mut port)?;
                let last = hidden.slice_rows(hidden.rows() - 1, hidden.rows());
                chan.send_matrices(MessageType::FinalHiddenPos, NO_LAYER, ModuleTag::Shared, &[&last])?;
                summary.forward_passes += 1;
                Ok(())
            }
            &[bs, l, cols] if cols as usize == d && bs > 0 && l > 0 => {
                let acts = t.into_matrix()?;
                let rows = acts.rows();
                let mut port = RemotePort { chan: &mut *chan, r_c2d: self.acfg.r_c2d, r_d2c: self.acfg.r_d2c };
                let (hidden, stash) =
                    decoder_forward_train(&self.cfg, &self.layers, &self.adapters, &acts, l as usize, &mut port)?;
                chan.send_matrices(MessageType::LastHidden, NO_LAYER, ModuleTag::Shared, &[&hidden])?;
                let grad = matrices(chan.recv_tensors(MessageType::GradLastHidden, NO_LAYER)?, (rows, d), 1)?.remove(0);
                let mut port = RemotePort { chan: &mut *chan, r_c2d: self.acfg.r_c2d, r_d2c: self.acfg.r_d2c };
                let frozen = TrainableFlags::default();
                let grads = decoder_backward(&self.cfg, &self.layers, &self.adapters, &stash, &grad, &mut port, frozen)?;
                if self.acfg.trainable_embedding {
                    chan.send_matrices(MessageType::GradEmbeds, NO_LAYER, ModuleTag::Shared, &[&grads.input])?;
                }
                summary.train_steps += 1;
                Ok(())
            }
            dims => Err(Error::Protocol(format!("TokenEmbeds with dims {dims:?} for width {d}"))),
        }
    }

    /// Accepts connections and serves each on its own thread. Stops after
    /// `max_sessions` connections when given.
    pub fn serve_tcp(self: Arc<Self>, listener: TcpListener, max_sessions: Option<usize>) -> Result<()> {
        let mut handles = Vec::new();
        for (i, stream) in listener.incoming().enumerate() {
            let stream = stream?;
            let node = Arc::clone(&self);
            handles.push(thread::spawn(move || {
                let peer = stream.peer_addr().ok();
                match TcpTransport::from_stream(stream).and_then(|t| node.serve_session(t)) {
                    Ok(s) => log::info!("session {} from {peer:?}: {} passes, {} steps", s.session_id, s.forward_passes, s.train_steps),
                    Err(e) => log::warn!("session from {peer:?} failed: {e}"),
                }
            }));
            if max_sessions.is_some_and(|m| i + 1 >= m) {
                break;
            }
        }
        for h in handles {
            let _ = h.join();
        }
        Ok(())
    }
}

/// The cloud's view of the device's `M`: every call is one request/response.
struct RemotePort<'c, T> {
    chan: &'c mut Channel<T>,
    r_c2d: usize,
    r_d2c: usize,
}

impl<T: Transport> AdapterPort for RemotePort<'_, T> {
    fn forward(&mut self, layer: usize, down: &Matrix) -> Result<[Matrix; 3]> {
        self.chan
            .send_matrices(MessageType::DownAct, layer_id(layer), ModuleTag::Shared, &[down])?;
        let tensors = self.chan.recv_tensors(MessageType::UpActs, layer_id(layer))?;
        let z = matrices(tensors, (down.rows(), self.r_d2c), 3)?;
        Ok(z.try_into().expect("three tensors checked"))
    }

    fn backward(&mut self, layer: usize, grad_up: &[Matrix; 3]) -> Result<Matrix> {
        self.chan.send_matrices(
            MessageType::GradDown,
            layer_id(layer),
            ModuleTag::QkvBundle,
            &[&grad_up[0], &grad_up[1], &grad_up[2]],
        )?;
        let rows = grad_up[0].rows();
        let tensors = self.chan.recv_tensors(MessageType::GradUp, layer_id(layer))?;
        Ok(matrices(tensors, (rows, self.r_c2d), 1)?.remove(0))
    }
}
