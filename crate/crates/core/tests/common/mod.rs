//! Shared fixtures and an independent straight-line reference model.
//!
//! `Oracle` re-implements the forward pass in f64 with per-token loops, no
//! caching and no shared code with the library kernels. Finite differences are
//! taken on it, so gradient checks do not depend on the code under test.

#![allow(dead_code)]

use plrr_core::adapters::{init_adapters, AdapterConfig, CloudAdapterWeights, DeviceAdapterWeights};
use plrr_core::model::{BaseWeights, ModelConfig, TokenId, TrainingBatch};
use plrr_core::rng::normal_matrix;
use plrr_core::Matrix;
use rand::rngs::StdRng;
use rand::Rng;

pub struct Toy {
    pub cfg: ModelConfig,
    pub base: BaseWeights,
    pub acfg: AdapterConfig,
    pub cloud: CloudAdapterWeights,
    pub device: DeviceAdapterWeights,
}

pub fn toy(d: usize, n_layers: usize, n_heads: usize, vocab: usize, seed: u64, rank: usize) -> Toy {
    let cfg = ModelConfig::toy(d, n_layers, n_heads, vocab, seed);
    let base = BaseWeights::init(&cfg).unwrap();
    let acfg = AdapterConfig::all_layers(n_layers, rank, seed ^ 0xA5A5);
    let (cloud, device, _) = init_adapters(&acfg, n_layers, d).unwrap();
    Toy {
        cfg,
        base,
        acfg,
        cloud,
        device,
    }
}

/// Fills every `M` with `Normal(0, std²)` so the residual path is active.
pub fn randomize_m(device: &mut DeviceAdapterWeights, seed: u64, std: f32) {
    for (l, ms) in device.layers.iter_mut() {
        for (p, m) in ms.iter_mut().enumerate() {
            *m = normal_matrix(seed, &format!("test.m.{l}.{p}"), m.rows(), m.cols(), std);
        }
    }
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs());
    if denom == 0.0 {
        0.0
    } else {
        (a - b).abs() / denom
    }
}

type M64 = Vec<Vec<f64>>;

fn to64(m: &Matrix) -> M64 {
    (0..m.rows()).map(|r| m.row(r).iter().map(|&v| v as f64).collect()).collect()
}

fn vec_mat(x: &[f64], w: &M64) -> Vec<f64> {
    let cols = w.first().map(|r| r.len()).unwrap_or(0);
    let mut out = vec![0.0; cols];
    for (xi, row) in x.iter().zip(w) {
        for (o, wv) in out.iter_mut().zip(row) {
            *o += xi * wv;
        }
    }
    out
}

fn rms(x: &[f64], w: &[f64]) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / (ms + 1e-5).sqrt();
    x.iter().zip(w).map(|(v, g)| v * inv * g).collect()
}

fn rotate(x: &mut [f64], pos: usize, n_heads: usize, base: f64) {
    let hd = x.len() / n_heads;
    for h in 0..n_heads {
        for i in 0..hd / 2 {
            let theta = pos as f64 * base.powf(-(2.0 * i as f64) / hd as f64);
            let (a, b) = (x[h * hd + 2 * i], x[h * hd + 2 * i + 1]);
            x[h * hd + 2 * i] = a * theta.cos() - b * theta.sin();
            x[h * hd + 2 * i + 1] = a * theta.sin() + b * theta.cos();
        }
    }
}

pub struct OracleLayer {
    pub wq: M64,
    pub wk: M64,
    pub wv: M64,
    pub wo: M64,
    pub w1: M64,
    pub w2: M64,
    pub norm1: Vec<f64>,
    pub norm2: Vec<f64>,
    /// (A, [B_q, B_k, B_v], [M_q, M_k, M_v])
    pub adapter: Option<(M64, [M64; 3], [M64; 3])>,
}

pub struct Oracle {
    pub n_heads: usize,
    pub rope_base: f64,
    pub scale: f64,
    pub embedding: M64,
    pub final_norm: Vec<f64>,
    pub layers: Vec<OracleLayer>,
}

impl Oracle {
    pub fn new(cfg: &ModelConfig, base: &BaseWeights, cloud: &CloudAdapterWeights, device: &DeviceAdapterWeights) -> Self {
        let layers = base
            .layers
            .iter()
            .enumerate()
            .map(|(i, lw)| OracleLayer {
                wq: to64(&lw.wq),
                wk: to64(&lw.wk),
                wv: to64(&lw.wv),
                wo: to64(&lw.wo),
                w1: to64(&lw.w1),
                w2: to64(&lw.w2),
                norm1: lw.norm1.iter().map(|&v| v as f64).collect(),
                norm2: lw.norm2.iter().map(|&v| v as f64).collect(),
                adapter: cloud.layers.get(&i).map(|p| {
                    let m = &device.layers[&i];
                    (
                        to64(&p.a),
                        [to64(&p.b[0]), to64(&p.b[1]), to64(&p.b[2])],
                        [to64(&m[0]), to64(&m[1]), to64(&m[2])],
                    )
                }),
            })
            .collect();
        Oracle {
            n_heads: cfg.n_heads,
            rope_base: cfg.rope_base as f64,
            scale: cloud.scale as f64,
            embedding: to64(&base.head.embedding),
            final_norm: base.head.final_norm.iter().map(|&v| v as f64).collect(),
            layers,
        }
    }

    /// Final-layer hidden states of one sequence, positions starting at 0.
    pub fn hidden(&self, tokens: &[TokenId]) -> M64 {
        let mut h: M64 = tokens.iter().map(|&t| self.embedding[t as usize].clone()).collect();
        let d = self.final_norm.len();
        let hd = d / self.n_heads;
        for layer in &self.layers {
            let n1: M64 = h.iter().map(|x| rms(x, &layer.norm1)).collect();
            let mut q = Vec::new();
            let mut k = Vec::new();
            let mut v = Vec::new();
            for (t, x) in n1.iter().enumerate() {
                let mut qt = vec_mat(x, &layer.wq);
                let mut kt = vec_mat(x, &layer.wk);
                let mut vt = vec_mat(x, &layer.wv);
                if let Some((a, b, m)) = &layer.adapter {
                    let u = vec_mat(x, a);
                    for (p, dst) in [&mut qt, &mut kt, &mut vt].into_iter().enumerate() {
                        let r = vec_mat(&vec_mat(&u, &m[p]), &b[p]);
                        for (o, rv) in dst.iter_mut().zip(r) {
                            *o += self.scale * rv;
                        }
                    }
                }
                rotate(&mut qt, t, self.n_heads, self.rope_base);
                rotate(&mut kt, t, self.n_heads, self.rope_base);
                q.push(qt);
                k.push(kt);
                v.push(vt);
            }
            let mut next = Vec::new();
            for t in 0..h.len() {
                let mut ctx = vec![0.0; d];
                for head in 0..self.n_heads {
                    let r = head * hd..(head + 1) * hd;
                    let scores: Vec<f64> = (0..=t)
                        .map(|j| {
                            q[t][r.clone()].iter().zip(&k[j][r.clone()]).map(|(a, b)| a * b).sum::<f64>()
                                / (hd as f64).sqrt()
                        })
                        .collect();
                    let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
                    let z: f64 = e.iter().sum();
                    for j in 0..=t {
                        for c in r.clone() {
                            ctx[c] += e[j] / z * v[j][c];
                        }
                    }
                }
                let attn = vec_mat(&ctx, &layer.wo);
                let h1: Vec<f64> = h[t].iter().zip(&attn).map(|(a, b)| a + b).collect();
                let n2 = rms(&h1, &layer.norm2);
                let act: Vec<f64> = vec_mat(&n2, &layer.w1)
                    .into_iter()
                    .map(|a| a / (1.0 + (-a).exp()))
                    .collect();
                let mlp = vec_mat(&act, &layer.w2);
                next.push(h1.iter().zip(&mlp).map(|(a, b)| a + b).collect());
            }
            h = next;
        }
        h
    }

    pub fn logits(&self, tokens: &[TokenId]) -> M64 {
        self.hidden(tokens)
            .iter()
            .map(|x| {
                let n = rms(x, &self.final_norm);
                self.embedding
                    .iter()
                    .map(|e| e.iter().zip(&n).map(|(a, b)| a * b).sum())
                    .collect()
            })
            .collect()
    }

    /// Mean masked next-token NLL over a batch.
    pub fn loss(&self, batch: &TrainingBatch) -> f64 {
        let mut total = 0.0;
        let mut count = 0usize;
        for s in 0..batch.bs {
            let rows = s * batch.seq_len..(s + 1) * batch.seq_len;
            let logits = self.logits(&batch.inputs[rows.clone()]);
            for (i, r) in rows.enumerate() {
                if !batch.mask[r] {
                    continue;
                }
                let row = &logits[i];
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
                total += lse - row[batch.targets[r] as usize];
                count += 1;
            }
        }
        total / count as f64
    }
}

impl Oracle {
    /// Central difference of the batch loss in the parameter selected by `at`.
    pub fn loss_slope(&mut self, batch: &TrainingBatch, eps: f64, at: impl Fn(&mut Oracle) -> &mut f64) -> f64 {
        let orig = *at(self);
        *at(self) = orig + eps;
        let plus = self.loss(batch);
        *at(self) = orig - eps;
        let minus = self.loss(batch);
        *at(self) = orig;
        (plus - minus) / (2.0 * eps)
    }
}

/// A small deterministic batch: `bs` prompts of length 3 with 2-token targets.
pub fn toy_batch(vocab: usize, bs: usize, seed: u64) -> TrainingBatch {
    use plrr_core::model::Example;
    let mut x = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    let mut next = || {
        x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((x >> 33) % vocab as u64) as TokenId
    };
    let examples: Vec<Example> = (0..bs)
        .map(|_| Example::new(vec![next(), next(), next()], vec![next(), next()]))
        .collect();
    TrainingBatch::from_examples(&examples, 5).unwrap()
}

/// Samples `n` coordinates of `grad`, preferring ones that are not negligible.
pub fn pick(grad: &Matrix, n: usize, rng: &mut StdRng) -> Vec<(usize, usize)> {
    let max = grad.data().iter().fold(0.0f32, |m, v| m.max(v.abs()));
    let mut out = Vec::new();
    let mut tries = 0;
    while out.len() < n {
        let r = rng.random_range(0..grad.rows());
        let c = rng.random_range(0..grad.cols());
        tries += 1;
        if grad.get(r, c).abs() >= 1e-2 * max || tries > 10_000 {
            out.push((r, c));
        }
    }
    out
}
