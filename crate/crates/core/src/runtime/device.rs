use std::collections::BTreeMap;

use crate::adapters::{private_backward, AdapterConfig, DeviceAdapterWeights, PrivateCheckpoint};
use crate::error::{Error, Result};
use crate::model::{
    embed, embed_backward, lm_head, lm_head_backward, lm_head_train, masked_cross_entropy, Gradients, HeadWeights,
    ModelConfig, TokenId, TrainingBatch,
};
use crate::tensor::Matrix;
use crate::wire::{Direction, MessageType, ModuleTag, TrafficLedger, Transport, WireDType, NO_LAYER};

use super::channel::{
    config_digest, expect_tensors, from_json, layer_id, matrices, to_json, Channel, ErrorBody, Hello, HelloAck,
    PROTOCOL_VERSION,
};
use super::optim::{AdamWConfig, DeviceOptimizer};

/// The device node: tied embedding / LM head, private `M`, optimizer state,
/// and the private data. Drives one session at a time.
pub struct DeviceNode<T: Transport> {
    cfg: ModelConfig,
    acfg: AdapterConfig,
    head: HeadWeights,
    weights: DeviceAdapterWeights,
    optimizer: DeviceOptimizer,
    dtype: WireDType,
    digest: String,
    chan: Option<Channel<T>>,
    /// Ledger of the most recent session, kept after it ends.
    last_ledger: TrafficLedger,
    positions: usize,
    pending: Option<TokenId>,
    last_logits: Option<Matrix>,
    steps: u64,
}

impl<T: Transport> DeviceNode<T> {
    /// A device with freshly initialized head and zero `M`.
    pub fn new(cfg: ModelConfig, acfg: AdapterConfig, dtype: WireDType) -> Result<Self> {
        cfg.validate()?;
        acfg.validate(cfg.n_layers, cfg.d)?;
        let head = HeadWeights::init(&cfg)?;
        let weights = DeviceAdapterWeights::zeros(&acfg);
        Ok(Self::with_weights(cfg, acfg, head, weights, dtype))
    }

    pub fn with_weights(
        cfg: ModelConfig,
        acfg: AdapterConfig,
        head: HeadWeights,
        weights: DeviceAdapterWeights,
        dtype: WireDType,
    ) -> Self {
        let digest = config_digest(&cfg, &acfg);
        DeviceNode {
            cfg,
            acfg,
            head,
            weights,
            optimizer: DeviceOptimizer::new(AdamWConfig::default()),
            dtype,
            digest,
            chan: None,
            last_ledger: TrafficLedger::default(),
            positions: 0,
            pending: None,
            last_logits: None,
            steps: 0,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn adapter_config(&self) -> &AdapterConfig {
        &self.acfg
    }

    pub fn head(&self) -> &HeadWeights {
        &self.head
    }

    pub fn weights(&self) -> &DeviceAdapterWeights {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut DeviceAdapterWeights {
        &mut self.weights
    }

    pub fn optimizer(&self) -> &DeviceOptimizer {
        &self.optimizer
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn digest(&self) -> &str {
        &self.digest
    }

    pub fn checkpoint(&self) -> PrivateCheckpoint {
        PrivateCheckpoint {
            config: self.acfg.clone(),
            weights: self.weights.clone(),
            embedding: self.acfg.trainable_embedding.then(|| self.head.embedding.clone()),
        }
    }

    pub fn session_id(&self) -> Option<u32> {
        self.chan.as_ref().map(|c| c.session_id)
    }

    /// Traffic of the current session, or of the last one if none is open.
    pub fn ledger(&self) -> &TrafficLedger {
        self.chan.as_ref().map_or(&self.last_ledger, |c| &c.ledger)
    }

    /// Logits row behind the most recently produced token.
    pub fn last_logits(&self) -> Option<&Matrix> {
        self.last_logits.as_ref()
    }

    /// Opens a session over `transport`. `nonce` must never repeat towards the
    /// same cloud.
    pub fn connect(&mut self, transport: T, nonce: u64) -> Result<u32> {
        self.end_session();
        let mut chan = Channel::new(transport, Direction::D2C, self.dtype);
        let hello = Hello {
            protocol: PROTOCOL_VERSION,
            digest: self.digest.clone(),
            nonce,
            wire_dtype: self.dtype,
        };
        chan.send(MessageType::Hello, NO_LAYER, ModuleTag::Shared, to_json(&hello))?;
        let frame = chan.recv()?;
        match frame.msg_type {
            MessageType::HelloAck => {
                let ack: HelloAck = from_json(&frame.payload, "hello ack")?;
                if ack.session_id == 0 || frame.session_id != ack.session_id {
                    return Err(Error::Protocol("hello ack carries an invalid session id".into()));
                }
                chan.session_id = ack.session_id;
                log::debug!("session {} established", ack.session_id);
                self.chan = Some(chan);
                self.positions = 0;
                self.pending = None;
                self.last_logits = None;
                Ok(ack.session_id)
            }
            MessageType::ErrorMsg => Err(from_json::<ErrorBody>(&frame.payload, "error message")?.into_error()),
            other => Err(Error::Protocol(format!("expected HelloAck, got {other:?}"))),
        }
    }

    /// Sends `Close` and ends the session.
    pub fn close(&mut self) -> Result<()> {
        let Some(chan) = self.chan.as_mut() else {
            return Ok(());
        };
        let sent = chan.send(MessageType::Close, NO_LAYER, ModuleTag::Shared, Vec::new());
        let reply = sent.and_then(|_| chan.recv());
        self.end_session();
        match reply?.msg_type {
            MessageType::Close => Ok(()),
            other => Err(Error::Protocol(format!("expected Close, got {other:?}"))),
        }
    }

    fn end_session(&mut self) {
        if let Some(chan) = self.chan.take() {
            self.last_ledger = chan.ledger;
        }
    }

    /// Runs `f` against the open session. Any failure except a capacity
    /// refusal (which the cloud reports before doing any work) aborts it.
    fn exchange<R>(&mut self, f: impl FnOnce(&mut Self) -> Result<R>) -> Result<R> {
        if self.chan.is_none() {
            return Err(Error::Transport("no open session".into()));
        }
        let out = f(self);
        if let Err(e) = &out {
            if !matches!(e, Error::Capacity(_)) {
                log::debug!("session aborted: {e}");
                self.end_session();
            }
        }
        out
    }

    fn chan(&mut self) -> &mut Channel<T> {
        self.chan.as_mut().expect("session checked by exchange")
    }

    /// Answers `DownAct` requests until the frame of type `until` arrives and
    /// returns its matrix. When `stash` is given every received `u` is kept.
    fn serve_forward(&mut self, until: MessageType, mut stash: Option<&mut BTreeMap<usize, Matrix>>) -> Result<Matrix> {
        let (r_c2d, r_d2c, d) = (self.acfg.r_c2d, self.acfg.r_d2c, self.cfg.d);
        let adapted = self.acfg.adapted_layers.clone();
        let mut next_adapted = adapted.iter();
        loop {
            let frame = self.chan().recv()?;
            match frame.msg_type {
                MessageType::DownAct => {
                    let layer = frame.layer as usize;
                    if next_adapted.next() != Some(&layer) {
                        return Err(Error::Protocol(format!("unexpected DownAct for layer {layer}")));
                    }
                    let tensors = expect_tensors(frame, MessageType::DownAct, layer_id(layer))?;
                    let rows = tensors.first().map_or(0, |t| t.numel() / r_c2d.max(1));
                    let u = matrices(tensors, (rows, r_c2d), 1)?.remove(0);
                    let m = self.weights.layer(layer)?;
                    let z = [u.matmul(&m[0])?, u.matmul(&m[1])?, u.matmul(&m[2])?];
                    debug_assert_eq!(z[0].cols(), r_d2c);
                    if let Some(s) = stash.as_deref_mut() {
                        s.insert(layer, u);
                    }
                    self.chan()
                        .send_matrices(MessageType::UpActs, layer_id(layer), ModuleTag::QkvBundle, &[&z[0], &z[1], &z[2]])?;
                }
                t if t == until => {
                    if next_adapted.next().is_some() {
                        return Err(Error::Protocol(format!("{t:?} before every adapted layer was served")));
                    }
                    let tensors = expect_tensors(frame, until, NO_LAYER)?;
                    let rows = tensors.first().map_or(0, |t| t.numel() / d);
                    return Ok(matrices(tensors, (rows, d), 1)?.remove(0));
                }
                _ => {
                    return match expect_tensors(frame, until, NO_LAYER) {
                        Err(e) => Err(e),
                        Ok(_) => Err(Error::internal("frame type check disagrees with dispatch")),
                    }
                }
            }
        }
    }

    fn forward_tokens(&mut self, tokens: &[TokenId]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::input("cannot feed an empty token sequence"));
        }
        if self.positions + tokens.len() > self.cfg.max_seq {
            return Err(Error::Capacity(format!(
                "session holds {} of {} positions, cannot append {}",
                self.positions,
                self.cfg.max_seq,
                tokens.len()
            )));
        }
        let acts = embed(tokens, &self.head)?;
        self.exchange(|dev| {
            let chan = dev.chan();
            chan.send_tensor(MessageType::TokenEmbeds, &[acts.rows() as u32, acts.cols() as u32], acts.data())?;
            let hidden = dev.serve_forward(MessageType::FinalHiddenPos, None)?;
            if hidden.rows() != 1 {
                return Err(Error::Protocol(format!("final hidden state has {} rows", hidden.rows())));
            }
            dev.positions += tokens.len();
            let logits = lm_head(&hidden, &dev.head)?;
            let next = logits.argmax_row(0) as TokenId;
            dev.pending = Some(next);
            dev.last_logits = Some(logits);
            Ok(())
        })
    }

    /// Prefills the prompt and returns the first greedy token.
    pub fn prefill(&mut self, tokens: &[TokenId]) -> Result<TokenId> {
        if self.positions != 0 {
            return Err(Error::input("prefill on a session that already holds positions"));
        }
        self.forward_tokens(tokens)?;
        Ok(self.pending.expect("set by forward"))
    }

    /// Feeds the previously produced token and returns the next one.
    pub fn decode_step(&mut self) -> Result<TokenId> {
        let prev = self.pending.ok_or_else(|| Error::input("decode_step before prefill"))?;
        self.forward_tokens(&[prev])?;
        Ok(self.pending.expect("set by forward"))
    }

    /// Greedy generation of `n_new` tokens; returns the tokens and the logits
    /// row behind each.
    pub fn generate(&mut self, prompt: &[TokenId], n_new: usize) -> Result<(Vec<TokenId>, Vec<Matrix>)> {
        let mut out = Vec::with_capacity(n_new);
        let mut logits = Vec::with_capacity(n_new);
        if n_new == 0 {
            return Ok((out, logits));
        }
        out.push(self.prefill(prompt)?);
        logits.push(self.last_logits.clone().expect("set by prefill"));
        while out.len() < n_new {
            out.push(self.decode_step()?);
            logits.push(self.last_logits.clone().expect("set by decode"));
        }
        Ok((out, logits))
    }

    /// Runs the split forward and backward for one batch without updating
    /// anything. Returns the loss and the device-side gradients.
    pub fn compute_gradients(&mut self, batch: &TrainingBatch) -> Result<(f32, Gradients)> {
        if !batch.mask.iter().any(|&m| m) {
            return Err(Error::input("batch has no supervised positions"));
        }
        let acts = embed(&batch.inputs, &self.head)?;
        let rows = acts.rows();
        self.exchange(|dev| {
            let (bs, l, d) = (batch.bs as u32, batch.seq_len as u32, dev.cfg.d as u32);
            dev.chan().send_tensor(MessageType::TokenEmbeds, &[bs, l, d], acts.data())?;
            let mut stash = BTreeMap::new();
            let hidden = dev.serve_forward(MessageType::LastHidden, Some(&mut stash))?;
            if hidden.rows() != rows {
                return Err(Error::Protocol(format!("last hidden has {} rows, expected {rows}", hidden.rows())));
            }
            let want_emb = dev.acfg.trainable_embedding;
            let (logits, head_stash) = lm_head_train(&hidden, &dev.head)?;
            let (loss, grad_logits) = masked_cross_entropy(&logits, &batch.targets, &batch.mask)?;
            let (grad_hidden, emb_head) = lm_head_backward(&head_stash, &dev.head, &grad_logits, want_emb)?;
            dev.chan().send_matrices(MessageType::GradLastHidden, NO_LAYER, ModuleTag::Shared, &[&grad_hidden])?;

            let mut grads = Gradients::default();
            let r_d2c = dev.acfg.r_d2c;
            for &layer in dev.acfg.adapted_layers.clone().iter().rev() {
                let tensors = dev.chan().recv_tensors(MessageType::GradDown, layer_id(layer))?;
                let gz: [Matrix; 3] = matrices(tensors, (rows, r_d2c), 3)?
                    .try_into()
                    .expect("three tensors checked");
                let u = stash
                    .get(&layer)
                    .ok_or_else(|| Error::internal(format!("no stashed down-projection for layer {layer}")))?;
                let (grad_m, grad_u) = private_backward(u, dev.weights.layer(layer)?, &gz)?;
                dev.chan()
                    .send_matrices(MessageType::GradUp, layer_id(layer), ModuleTag::Shared, &[&grad_u])?;
                if dev.acfg.trainable_m {
                    grads.m.insert(layer, grad_m);
                }
            }
            if let Some(mut g) = emb_head {
                let tensors = dev.chan().recv_tensors(MessageType::GradEmbeds, NO_LAYER)?;
                let grad_in = matrices(tensors, (rows, dev.cfg.d), 1)?.remove(0);
                g.add_assign(&embed_backward(&batch.inputs, &grad_in, dev.cfg.vocab))?;
                grads.embedding = Some(g);
            }
            Ok((loss, grads))
        })
    }

    /// One atomic training step: parameters and optimizer state change only if
    /// the whole exchange succeeded.
    pub fn train_step(&mut self, batch: &TrainingBatch, lr: f32) -> Result<f32> {
        let (loss, grads) = self.compute_gradients(batch)?;
        let emb = grads.embedding.is_some().then_some(&mut self.head.embedding);
        self.optimizer.apply(&mut self.weights, emb, &grads, lr)?;
        self.steps += 1;
        Ok(loss)
    }
}
