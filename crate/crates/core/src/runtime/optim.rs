use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::adapters::DeviceAdapterWeights;
use crate::error::{Error, Result};
use crate::model::Gradients;
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// First and second moments for one parameter tensor.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

impl AdamState {
    pub fn zeros(n: usize) -> Self {
        AdamState {
            step: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

/// One bias-corrected AdamW update with decoupled weight decay.
pub fn adamw_step(params: &mut [f32], grads: &[f32], state: &mut AdamState, lr: f32, cfg: &AdamWConfig) {
    assert_eq!(params.len(), grads.len(), "adamw: parameter/gradient length mismatch");
    if state.m.len() != params.len() {
        *state = AdamState::zeros(params.len());
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= lr * (m_hat / (v_hat.sqrt() + cfg.eps) + cfg.weight_decay * *p);
    }
}

/// Linear ramp from 0 to `base_lr` over the first `warmup_ratio` of the steps,
/// then linear decay to 0 at `total`.
pub fn linear_warmup_schedule(step: usize, total: usize, base_lr: f32, warmup_ratio: f32) -> f32 {
    if total == 0 || step >= total {
        return 0.0;
    }
    let warmup = (total as f64 * warmup_ratio as f64).round() as usize;
    if step < warmup {
        return base_lr * step as f32 / warmup as f32;
    }
    base_lr * (total - step) as f32 / (total - warmup) as f32
}

/// Optimizer state for everything the device trains.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DeviceOptimizer {
    pub cfg: AdamWConfig,
    /// Keyed by (layer, projection).
    pub m: BTreeMap<(usize, usize), AdamState>,
    pub embedding: AdamState,
}

impl DeviceOptimizer {
    pub fn new(cfg: AdamWConfig) -> Self {
        DeviceOptimizer {
            cfg,
            ..Default::default()
        }
    }

    /// Applies whichever gradients are present. Shapes are checked before any
    /// parameter is touched.
    pub fn apply(
        &mut self,
        weights: &mut DeviceAdapterWeights,
        embedding: Option<&mut Matrix>,
        grads: &Gradients,
        lr: f32,
    ) -> Result<()> {
        for (l, g) in &grads.m {
            let m = weights.layer(*l)?;
            if (0..3).any(|p| m[p].shape() != g[p].shape()) {
                return Err(Error::internal(format!("grad(M) shape mismatch at layer {l}")));
            }
        }
        if let (Some(e), Some(g)) = (&embedding, &grads.embedding) {
            if e.shape() != g.shape() {
                return Err(Error::internal("embedding gradient shape mismatch"));
            }
        }
        for (l, g) in &grads.m {
            let ms = weights.layers.get_mut(l).expect("checked above");
            for p in 0..3 {
                let state = self.m.entry((*l, p)).or_default();
                adamw_step(ms[p].data_mut(), g[p].data(), state, lr, &self.cfg);
            }
        }
        if let (Some(e), Some(g)) = (embedding, &grads.embedding) {
            adamw_step(e.data_mut(), g.data(), &mut self.embedding, lr, &self.cfg);
        }
        Ok(())
    }
}
