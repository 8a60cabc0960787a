//! The decoder stack: pre-norm causal self-attention with rotary positions and a
//! SiLU MLP, with low-rank residuals on q/k/v fetched through an [`AdapterPort`].
//!
//! Two forward modes share one layer implementation:
//! * cached: one sequence, extending a [`KvCache`] (prefill and decode);
//! * segmented: `bs` independent sequences of length `l` stacked row-wise, no
//!   cache, everything the backward pass needs kept in a [`DecoderStash`].

use std::collections::BTreeMap;

use crate::adapters::{public_backward_down, public_backward_up, AdapterPort, CloudAdapterWeights, TrainableFlags};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

use super::config::ModelConfig;
use super::kv::KvCache;
use super::ops::{rmsnorm, rmsnorm_backward, rope, silu, silu_backward, softmax_into};
use super::weights::LayerWeights;

#[derive(Debug, Clone)]
struct LayerStash {
    h_in: Matrix,
    inv1: Vec<f32>,
    n1: Matrix,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    /// Attention rows, head-major: `probs[h * T + i]` spans the keys of query `i`.
    probs: Vec<Vec<f32>>,
    h1: Matrix,
    inv2: Vec<f32>,
    a1: Matrix,
    /// `u·M` as received from the port, for `grad(B)`.
    z: Option<[Matrix; 3]>,
}

/// Forward activations of a segmented pass.
#[derive(Debug, Clone)]
pub struct DecoderStash {
    seq_len: usize,
    layers: Vec<LayerStash>,
}

impl DecoderStash {
    pub fn seq_len(&self) -> usize {
        self.seq_len
    }
}

#[derive(Debug, Clone)]
pub struct DecoderGrads {
    /// Gradient w.r.t. the token embeddings fed into the stack.
    pub input: Matrix,
    pub a: BTreeMap<usize, Matrix>,
    pub b: BTreeMap<usize, [Matrix; 3]>,
}

enum Attn<'c> {
    Cached { cache: &'c mut KvCache, pos0: usize },
    Segmented { seq_len: usize },
}

impl Attn<'_> {
    fn position(&self, row: usize) -> usize {
        match self {
            Attn::Cached { pos0, .. } => pos0 + row,
            Attn::Segmented { seq_len } => row % seq_len,
        }
    }
}

fn check_acts(cfg: &ModelConfig, acts: &Matrix) -> Result<()> {
    if acts.cols() != cfg.d {
        return Err(Error::input(format!(
            "activations have {} columns, model width is {}",
            acts.cols(),
            cfg.d
        )));
    }
    Ok(())
}

fn check_layers(cfg: &ModelConfig, layers: &[LayerWeights], adapters: &CloudAdapterWeights) -> Result<()> {
    if layers.len() != cfg.n_layers {
        return Err(Error::input(format!(
            "{} layer weights for a {}-layer config",
            layers.len(),
            cfg.n_layers
        )));
    }
    if let Some((&l, _)) = adapters.layers.iter().find(|(&l, _)| l >= cfg.n_layers) {
        return Err(Error::input(format!("adapter for nonexistent layer {l}")));
    }
    Ok(())
}

/// Inference forward: appends `acts.rows()` positions to `cache` and returns the
/// final-layer hidden states for those positions. On error the cache is left at
/// its previous length.
pub fn decoder_forward(
    cfg: &ModelConfig,
    layers: &[LayerWeights],
    adapters: &CloudAdapterWeights,
    acts: &Matrix,
    cache: &mut KvCache,
    port: &mut dyn AdapterPort,
) -> Result<Matrix> {
    check_acts(cfg, acts)?;
    check_layers(cfg, layers, adapters)?;
    cache.ensure_room(acts.rows())?;
    let pos0 = cache.seq_len();
    let mut h = acts.clone();
    for (idx, lw) in layers.iter().enumerate() {
        let mut attn = Attn::Cached {
            cache: &mut *cache,
            pos0,
        };
        match layer_forward(cfg, idx, lw, adapters, &h, &mut attn, port, false) {
            Ok((out, _)) => h = out,
            Err(e) => {
                cache.rollback();
                return Err(e);
            }
        }
    }
    cache.advance(acts.rows());
    Ok(h)
}

/// Training forward over `acts.rows() / seq_len` stacked sequences.
pub fn decoder_forward_train(
    cfg: &ModelConfig,
    layers: &[LayerWeights],
    adapters: &CloudAdapterWeights,
    acts: &Matrix,
    seq_len: usize,
    port: &mut dyn AdapterPort,
) -> Result<(Matrix, DecoderStash)> {
    check_acts(cfg, acts)?;
    check_layers(cfg, layers, adapters)?;
    if seq_len == 0 || acts.rows() % seq_len != 0 {
        return Err(Error::input(format!(
            "{} rows do not split into sequences of length {seq_len}",
            acts.rows()
        )));
    }
    if seq_len > cfg.max_seq {
        return Err(Error::Capacity(format!(
            "sequence length {seq_len} exceeds max_seq {}",
            cfg.max_seq
        )));
    }
    let mut h = acts.clone();
    let mut stash = DecoderStash {
        seq_len,
        layers: Vec::with_capacity(layers.len()),
    };
    for (idx, lw) in layers.iter().enumerate() {
        let mut attn = Attn::Segmented { seq_len };
        let (out, st) = layer_forward(cfg, idx, lw, adapters, &h, &mut attn, port, true)?;
        stash.layers.push(st.expect("stash requested"));
        h = out;
    }
    Ok((h, stash))
}

#[allow(clippy::too_many_arguments)]
fn layer_forward(
    cfg: &ModelConfig,
    idx: usize,
    lw: &LayerWeights,
    adapters: &CloudAdapterWeights,
    h_in: &Matrix,
    attn: &mut Attn<'_>,
    port: &mut dyn AdapterPort,
    keep: bool,
) -> Result<(Matrix, Option<LayerStash>)> {
    let rows = h_in.rows();
    let (n1, inv1) = rmsnorm(h_in, &lw.norm1);

    let mut q = n1.matmul(&lw.wq)?;
    let mut k = n1.matmul(&lw.wk)?;
    let mut v = n1.matmul(&lw.wv)?;
    let mut z_kept = None;
    if let Some(public) = adapters.layer(idx) {
        let down = n1.matmul(&public.a)?;
        let z = port.forward(idx, &down)?;
        for (p, zp) in z.iter().enumerate() {
            if zp.shape() != (rows, public.b[p].rows()) {
                return Err(Error::Protocol(format!(
                    "layer {idx}: adapter port returned shape {:?}, expected {:?}",
                    zp.shape(),
                    (rows, public.b[p].rows())
                )));
            }
        }
        let s = adapters.scale;
        q.add_assign(&z[0].matmul(&public.b[0])?.scaled(s))?;
        k.add_assign(&z[1].matmul(&public.b[1])?.scaled(s))?;
        v.add_assign(&z[2].matmul(&public.b[2])?.scaled(s))?;
        if keep {
            z_kept = Some(z);
        }
    }

    let positions: Vec<usize> = (0..rows).map(|r| attn.position(r)).collect();
    rope(&mut q, &positions, cfg.n_heads, cfg.rope_base, false);
    rope(&mut k, &positions, cfg.n_heads, cfg.rope_base, false);

    let (ctx, probs) = match attn {
        Attn::Cached { cache, pos0 } => {
            cache.append(idx, &k, &v);
            let (ks, vs) = cache.layer(idx);
            let pos0 = *pos0;
            attention(cfg, &q, ks, vs, |i| (0, pos0 + i), keep)
        }
        Attn::Segmented { seq_len } => {
            let l = *seq_len;
            attention(cfg, &q, k.data(), v.data(), |i| ((i / l) * l, i), keep)
        }
    };

    let mut h1 = ctx.matmul(&lw.wo)?;
    h1.add_assign(h_in)?;
    let (n2, inv2) = rmsnorm(&h1, &lw.norm2);
    let a1 = n2.matmul(&lw.w1)?;
    let mut out = silu(&a1).matmul(&lw.w2)?;
    out.add_assign(&h1)?;

    let stash = keep.then(|| LayerStash {
        h_in: h_in.clone(),
        inv1,
        n1,
        q,
        k,
        v,
        probs,
        h1,
        inv2,
        a1,
        z: z_kept,
    });
    Ok((out, stash))
}

/// Multi-head attention of `q` against row-major key/value slices. Query `i`
/// attends to key rows `range(i).0 ..= range(i).1`.
fn attention(
    cfg: &ModelConfig,
    q: &Matrix,
    keys: &[f32],
    values: &[f32],
    range: impl Fn(usize) -> (usize, usize),
    keep_probs: bool,
) -> (Matrix, Vec<Vec<f32>>) {
    let d = cfg.d;
    let hd = cfg.head_dim();
    let scale = 1.0 / (hd as f32).sqrt();
    let rows = q.rows();
    let mut out = Matrix::zeros(rows, d);
    let mut probs = Vec::new();
    let mut scores = Vec::new();
    let mut p = Vec::new();
    for h in 0..cfg.n_heads {
        let off = h * hd;
        for i in 0..rows {
            let (lo, hi) = range(i);
            let qi = &q.row(i)[off..off + hd];
            scores.clear();
            for j in lo..=hi {
                let kj = &keys[j * d + off..j * d + off + hd];
                scores.push(crate::tensor::dot(qi, kj) * scale);
            }
            p.resize(scores.len(), 0.0);
            softmax_into(&scores, &mut p);
            let o = &mut out.row_mut(i)[off..off + hd];
            for (w, j) in p.iter().zip(lo..=hi) {
                let vj = &values[j * d + off..j * d + off + hd];
                for (oe, ve) in o.iter_mut().zip(vj) {
                    *oe += w * ve;
                }
            }
            if keep_probs {
                probs.push(p.clone());
            }
        }
    }
    (out, probs)
}

/// Reverse pass through a segmented forward. Gradients at the three `B` inputs of
/// each adapted layer are handed to `port.backward` in reverse layer order; the
/// port answers with the gradient at the down-projection.
pub fn decoder_backward(
    cfg: &ModelConfig,
    layers: &[LayerWeights],
    adapters: &CloudAdapterWeights,
    stash: &DecoderStash,
    grad_out: &Matrix,
    port: &mut dyn AdapterPort,
    flags: TrainableFlags,
) -> Result<DecoderGrads> {
    if stash.layers.len() != layers.len() {
        return Err(Error::internal(format!(
            "stash holds {} layers, model has {}",
            stash.layers.len(),
            layers.len()
        )));
    }
    let d = cfg.d;
    let hd = cfg.head_dim();
    let sc = 1.0 / (hd as f32).sqrt();
    let l = stash.seq_len;
    let mut dh = grad_out.clone();
    let mut grads_a = BTreeMap::new();
    let mut grads_b = BTreeMap::new();

    for (idx, (lw, st)) in layers.iter().zip(&stash.layers).enumerate().rev() {
        let rows = st.h_in.rows();
        if dh.shape() != (rows, d) {
            return Err(Error::input(format!(
                "upstream gradient has shape {:?}, expected {:?}",
                dh.shape(),
                (rows, d)
            )));
        }
        // MLP
        let dg = dh.matmul_t(&lw.w2)?;
        let da1 = silu_backward(&st.a1, &dg);
        let dn2 = da1.matmul_t(&lw.w1)?;
        let mut dh1 = dh.clone();
        dh1.add_assign(&rmsnorm_backward(&st.h1, &lw.norm2, &st.inv2, &dn2))?;

        // attention
        let dctx = dh1.matmul_t(&lw.wo)?;
        let mut dq = Matrix::zeros(rows, d);
        let mut dk = Matrix::zeros(rows, d);
        let mut dv = Matrix::zeros(rows, d);
        let mut dp = Vec::new();
        for h in 0..cfg.n_heads {
            let off = h * hd;
            for i in 0..rows {
                let lo = (i / l) * l;
                let p = &st.probs[h * rows + i];
                let doi = &dctx.row(i)[off..off + hd];
                dp.clear();
                for (w, j) in p.iter().zip(lo..=i) {
                    dp.push(crate::tensor::dot(doi, &st.v.row(j)[off..off + hd]));
                    let dvj = &mut dv.row_mut(j)[off..off + hd];
                    for (a, &g) in dvj.iter_mut().zip(doi) {
                        *a += w * g;
                    }
                }
                let inner: f32 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                for ((&w, &dpj), j) in p.iter().zip(&dp).zip(lo..=i) {
                    let ds = w * (dpj - inner) * sc;
                    if ds == 0.0 {
                        continue;
                    }
                    let kj = &st.k.row(j)[off..off + hd];
                    let qi = &st.q.row(i)[off..off + hd];
                    for (a, kv) in dq.row_mut(i)[off..off + hd].iter_mut().zip(kj) {
                        *a += ds * kv;
                    }
                    for (a, qv) in dk.row_mut(j)[off..off + hd].iter_mut().zip(qi) {
                        *a += ds * qv;
                    }
                }
            }
        }
        let positions: Vec<usize> = (0..rows).map(|r| r % l).collect();
        rope(&mut dq, &positions, cfg.n_heads, cfg.rope_base, true);
        rope(&mut dk, &positions, cfg.n_heads, cfg.rope_base, true);

        let mut dn1 = dq.matmul_t(&lw.wq)?;
        dn1.add_assign(&dk.matmul_t(&lw.wk)?)?;
        dn1.add_assign(&dv.matmul_t(&lw.wv)?)?;

        if let Some(public) = adapters.layer(idx) {
            let z = if flags.b {
                Some(st.z.as_ref().ok_or_else(|| Error::internal(format!("missing stashed u·M for layer {idx}")))?)
            } else {
                None
            };
            let grad_proj = [dq, dk, dv];
            let (grad_z, grad_b) = public_backward_up(&grad_proj, &public.b, z, adapters.scale)?;
            let grad_u = port.backward(idx, &grad_z)?;
            if grad_u.shape() != (rows, public.a.cols()) {
                return Err(Error::Protocol(format!(
                    "layer {idx}: gradient at A output has shape {:?}, expected {:?}",
                    grad_u.shape(),
                    (rows, public.a.cols())
                )));
            }
            let (grad_x, grad_a) = public_backward_down(&grad_u, &public.a, flags.a.then_some(&st.n1))?;
            dn1.add_assign(&grad_x)?;
            if let Some(g) = grad_a {
                grads_a.insert(idx, g);
            }
            if let Some(g) = grad_b {
                grads_b.insert(idx, g);
            }
        }

        let mut next = dh1;
        next.add_assign(&rmsnorm_backward(&st.h_in, &lw.norm1, &st.inv1, &dn1))?;
        dh = next;
    }

    Ok(DecoderGrads {
        input: dh,
        a: grads_a,
        b: grads_b,
    })
}
