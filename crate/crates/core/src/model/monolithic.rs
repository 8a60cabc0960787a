//! The whole adapted model in one process. This is the reference the split
//! runtime is checked against, and the trainer used by the ablation harness.

use std::collections::BTreeMap;

use crate::adapters::{AdapterPort, CloudAdapterWeights, DeviceAdapterWeights, LocalPort, TrainableFlags};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

use super::batch::TrainingBatch;
use super::config::{ModelConfig, TokenId};
use super::decoder::{decoder_backward, decoder_forward, decoder_forward_train, DecoderStash};
use super::head::{embed, embed_backward, lm_head, lm_head_backward, lm_head_train, masked_cross_entropy, HeadStash};
use super::kv::KvCache;
use super::weights::BaseWeights;

/// Which tensors receive gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GradFlags {
    pub m: bool,
    pub a: bool,
    pub b: bool,
    pub embedding: bool,
}

impl Default for GradFlags {
    fn default() -> Self {
        GradFlags {
            m: true,
            a: false,
            b: false,
            embedding: false,
        }
    }
}

impl GradFlags {
    pub fn adapters(&self) -> TrainableFlags {
        TrainableFlags {
            m: self.m,
            a: self.a,
            b: self.b,
        }
    }
}

impl From<&crate::adapters::AdapterConfig> for GradFlags {
    fn from(cfg: &crate::adapters::AdapterConfig) -> Self {
        GradFlags {
            m: cfg.trainable_m,
            a: cfg.trainable_a,
            b: cfg.trainable_b,
            embedding: cfg.trainable_embedding,
        }
    }
}

/// Gradients of the trainable tensors; frozen ones are absent.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients {
    pub m: BTreeMap<usize, [Matrix; 3]>,
    pub embedding: Option<Matrix>,
    pub a: BTreeMap<usize, Matrix>,
    pub b: BTreeMap<usize, [Matrix; 3]>,
}

impl Gradients {
    pub fn is_all_zero(&self) -> bool {
        self.m.values().flatten().all(Matrix::is_all_zero)
            && self.embedding.as_ref().is_none_or(Matrix::is_all_zero)
            && self.a.values().all(Matrix::is_all_zero)
            && self.b.values().flatten().all(Matrix::is_all_zero)
    }
}

/// Logits for every position of `tokens`, computed from an empty cache.
pub fn forward_monolithic(
    cfg: &ModelConfig,
    base: &BaseWeights,
    cloud: &CloudAdapterWeights,
    device: &DeviceAdapterWeights,
    tokens: &[TokenId],
) -> Result<Matrix> {
    let mut cache = KvCache::new(cfg.n_layers, cfg.d, cfg.max_seq);
    let mut port = LocalPort::new(device);
    let acts = embed(tokens, &base.head)?;
    let hidden = decoder_forward(cfg, &base.layers, cloud, &acts, &mut cache, &mut port)?;
    lm_head(&hidden, &base.head)
}

/// Incremental greedy decoder over a local port.
pub struct MonolithicSession<'a> {
    cfg: &'a ModelConfig,
    base: &'a BaseWeights,
    cloud: &'a CloudAdapterWeights,
    port: LocalPort<'a>,
    cache: KvCache,
}

impl<'a> MonolithicSession<'a> {
    pub fn new(
        cfg: &'a ModelConfig,
        base: &'a BaseWeights,
        cloud: &'a CloudAdapterWeights,
        device: &'a DeviceAdapterWeights,
    ) -> Self {
        MonolithicSession {
            cfg,
            base,
            cloud,
            port: LocalPort::new(device),
            cache: KvCache::new(cfg.n_layers, cfg.d, cfg.max_seq),
        }
    }

    /// Runs `tokens` through the stack and returns the last position's logits.
    pub fn feed(&mut self, tokens: &[TokenId]) -> Result<Matrix> {
        if tokens.is_empty() {
            return Err(Error::input("cannot feed an empty token sequence"));
        }
        let acts = embed(tokens, &self.base.head)?;
        let hidden = decoder_forward(self.cfg, &self.base.layers, self.cloud, &acts, &mut self.cache, &mut self.port)?;
        let last = hidden.slice_rows(hidden.rows() - 1, hidden.rows());
        lm_head(&last, &self.base.head)
    }

    pub fn cache(&self) -> &KvCache {
        &self.cache
    }
}

/// Greedy generation of `n_new` tokens after `prompt`, reusing the KV cache.
/// Returns the generated tokens and the logits row that produced each.
pub fn generate_monolithic(
    cfg: &ModelConfig,
    base: &BaseWeights,
    cloud: &CloudAdapterWeights,
    device: &DeviceAdapterWeights,
    prompt: &[TokenId],
    n_new: usize,
) -> Result<(Vec<TokenId>, Vec<Matrix>)> {
    let mut session = MonolithicSession::new(cfg, base, cloud, device);
    let mut out = Vec::with_capacity(n_new);
    let mut logits_seen = Vec::with_capacity(n_new);
    if n_new == 0 {
        return Ok((out, logits_seen));
    }
    let mut logits = session.feed(prompt)?;
    loop {
        let next = logits.argmax_row(0) as TokenId;
        out.push(next);
        logits_seen.push(logits);
        if out.len() == n_new {
            break;
        }
        logits = session.feed(&[next])?;
    }
    Ok((out, logits_seen))
}

/// Everything a training forward pass leaves behind for [`backward_full`].
pub struct ForwardStash<'a> {
    inputs: Vec<TokenId>,
    head: HeadStash,
    decoder: DecoderStash,
    port: LocalPort<'a>,
}

pub fn forward_train<'a>(
    cfg: &ModelConfig,
    base: &BaseWeights,
    cloud: &CloudAdapterWeights,
    device: &'a DeviceAdapterWeights,
    batch: &TrainingBatch,
) -> Result<(Matrix, ForwardStash<'a>)> {
    let mut port = LocalPort::with_stash(device);
    let acts = embed(&batch.inputs, &base.head)?;
    let (hidden, decoder) = decoder_forward_train(cfg, &base.layers, cloud, &acts, batch.seq_len, &mut port)?;
    let (logits, head) = lm_head_train(&hidden, &base.head)?;
    Ok((
        logits,
        ForwardStash {
            inputs: batch.inputs.clone(),
            head,
            decoder,
            port,
        },
    ))
}

/// Exact reverse-mode gradients of the training forward pass.
pub fn backward_full(
    cfg: &ModelConfig,
    base: &BaseWeights,
    cloud: &CloudAdapterWeights,
    mut stash: ForwardStash<'_>,
    grad_logits: &Matrix,
    flags: GradFlags,
) -> Result<Gradients> {
    let (grad_hidden, emb_from_head) = lm_head_backward(&stash.head, &base.head, grad_logits, flags.embedding)?;
    let dec = decoder_backward(
        cfg,
        &base.layers,
        cloud,
        &stash.decoder,
        &grad_hidden,
        &mut stash.port as &mut dyn AdapterPort,
        flags.adapters(),
    )?;
    let embedding = match emb_from_head {
        Some(mut g) => {
            g.add_assign(&embed_backward(&stash.inputs, &dec.input, base.vocab()))?;
            Some(g)
        }
        None => None,
    };
    let m = if flags.m { stash.port.into_grads() } else { BTreeMap::new() };
    Ok(Gradients {
        m,
        embedding,
        a: dec.a,
        b: dec.b,
    })
}

/// Loss and gradients for one batch.
pub fn loss_and_grads(
    cfg: &ModelConfig,
    base: &BaseWeights,
    cloud: &CloudAdapterWeights,
    device: &DeviceAdapterWeights,
    batch: &TrainingBatch,
    flags: GradFlags,
) -> Result<(f32, Gradients)> {
    let (logits, stash) = forward_train(cfg, base, cloud, device, batch)?;
    let (loss, grad_logits) = masked_cross_entropy(&logits, &batch.targets, &batch.mask)?;
    let grads = backward_full(cfg, base, cloud, stash, &grad_logits, flags)?;
    Ok((loss, grads))
}

/// Masked loss and target-token accuracy without gradients.
pub fn evaluate(
    cfg: &ModelConfig,
    base: &BaseWeights,
    cloud: &CloudAdapterWeights,
    device: &DeviceAdapterWeights,
    batch: &TrainingBatch,
) -> Result<(f32, f32)> {
    let (logits, _) = forward_train(cfg, base, cloud, device, batch)?;
    let (loss, _) = masked_cross_entropy(&logits, &batch.targets, &batch.mask)?;
    let mut hit = 0usize;
    let mut total = 0usize;
    for r in 0..logits.rows() {
        if batch.mask[r] {
            total += 1;
            if logits.argmax_row(r) == batch.targets[r] as usize {
                hit += 1;
            }
        }
    }
    Ok((loss, hit as f32 / total as f32))
}
