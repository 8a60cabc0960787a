use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::{init_adapters, reinit_public, AdapterConfig, CloudAdapterWeights, DeviceAdapterWeights};
use crate::error::{Error, Result};
use crate::model::{evaluate, loss_and_grads, BaseWeights, Example, GradFlags, ModelConfig, TokenId, TrainingBatch};
use crate::rng::tensor_rng;

use super::optim::{adamw_step, linear_warmup_schedule, AdamState, AdamWConfig, DeviceOptimizer};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f32,
    pub steps: usize,
    pub warmup_ratio: f32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 3e-2,
            steps: 300,
            warmup_ratio: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn lr_at(&self, step: usize) -> f32 {
        linear_warmup_schedule(step, self.steps, self.lr, self.warmup_ratio)
    }
}

/// Full-batch training of the whole adapted model in one process. Updates
/// whatever `flags` marks trainable and returns the per-step loss.
pub fn train_monolithic(
    cfg: &ModelConfig,
    base: &mut BaseWeights,
    cloud: &mut CloudAdapterWeights,
    device: &mut DeviceAdapterWeights,
    batch: &TrainingBatch,
    train: &TrainConfig,
    flags: GradFlags,
) -> Result<Vec<f32>> {
    let mut opt = DeviceOptimizer::new(AdamWConfig::default());
    let mut a_state: BTreeMap<usize, AdamState> = BTreeMap::new();
    let mut b_state: BTreeMap<(usize, usize), AdamState> = BTreeMap::new();
    let mut losses = Vec::with_capacity(train.steps);
    for step in 0..train.steps {
        let lr = train.lr_at(step);
        let (loss, grads) = loss_and_grads(cfg, base, cloud, device, batch, flags)?;
        losses.push(loss);
        let emb = grads.embedding.is_some().then_some(&mut base.head.embedding);
        opt.apply(device, emb, &grads, lr)?;
        for (l, g) in &grads.a {
            let layer = cloud.layers.get_mut(l).ok_or_else(|| Error::internal("grad(A) for missing layer"))?;
            adamw_step(layer.a.data_mut(), g.data(), a_state.entry(*l).or_default(), lr, &opt.cfg);
        }
        for (l, g) in &grads.b {
            let layer = cloud.layers.get_mut(l).ok_or_else(|| Error::internal("grad(B) for missing layer"))?;
            for p in 0..3 {
                adamw_step(layer.b[p].data_mut(), g[p].data(), b_state.entry((*l, p)).or_default(), lr, &opt.cfg);
            }
        }
    }
    Ok(losses)
}

/// `n_pairs` random prompt → target pairs over `vocab` ids.
pub fn memorization_examples(n_pairs: usize, vocab: usize, prompt_len: usize, target_len: usize, seed: u64) -> Vec<Example> {
    let mut rng = tensor_rng(seed, "task.memorize");
    let mut prompts: Vec<Vec<TokenId>> = Vec::with_capacity(n_pairs);
    while prompts.len() < n_pairs {
        let p: Vec<TokenId> = (0..prompt_len).map(|_| rng.random_range(0..vocab as TokenId)).collect();
        // distinct prompts, otherwise the task is not learnable
        if !prompts.contains(&p) {
            prompts.push(p);
        }
    }
    prompts.shuffle(&mut rng);
    prompts
        .into_iter()
        .map(|p| {
            let t = (0..target_len).map(|_| rng.random_range(0..vocab as TokenId)).collect();
            Example::new(p, t)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntegrityConfig {
    pub model: ModelConfig,
    pub adapter: AdapterConfig,
    pub train: TrainConfig,
    pub n_pairs: usize,
    pub prompt_len: usize,
    pub target_len: usize,
    pub task_seed: u64,
    pub n_perturbations: usize,
}

impl Default for IntegrityConfig {
    fn default() -> Self {
        let model = ModelConfig::toy(64, 2, 4, 256, 2024);
        let adapter = AdapterConfig::all_layers(2, 32, 7);
        IntegrityConfig {
            model,
            adapter,
            train: TrainConfig::default(),
            n_pairs: 32,
            prompt_len: 4,
            target_len: 4,
            task_seed: 99,
            n_perturbations: 20,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub loss: f32,
    pub accuracy: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntegrityReport {
    pub final_train_loss: f32,
    pub loss_curve: Vec<f32>,
    pub untrained: EvalPoint,
    pub matched: EvalPoint,
    pub perturbed: Vec<EvalPoint>,
    pub perturbed_mean_loss: f64,
    pub perturbed_sd_loss: f64,
    pub perturbed_mean_accuracy: f64,
    pub perturbed_sd_accuracy: f64,
}

fn mean_sd(xs: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = xs.clone().count() as f64;
    let mean = xs.clone().sum::<f64>() / n;
    let var = if n > 1.0 {
        xs.map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// Trains `M` on the memorization task, then evaluates it with its own `A`, `B`
/// and with `n_perturbations` freshly drawn pairs.
pub fn run_integrity_experiment(ic: &IntegrityConfig) -> Result<IntegrityReport> {
    let cfg = &ic.model;
    if ic.n_perturbations == 0 {
        return Err(Error::Config("integrity experiment needs at least one perturbation".into()));
    }
    let mut base = BaseWeights::init(cfg)?;
    let (mut cloud, mut device, _) = init_adapters(&ic.adapter, cfg.n_layers, cfg.d)?;
    let examples = memorization_examples(ic.n_pairs, cfg.vocab, ic.prompt_len, ic.target_len, ic.task_seed);
    let batch = TrainingBatch::from_examples(&examples, TrainingBatch::fitting_len(&examples))?;

    let (loss, acc) = evaluate(cfg, &base, &cloud, &device, &batch)?;
    let untrained = EvalPoint { loss, accuracy: acc };
    let flags = GradFlags {
        m: true,
        a: false,
        b: false,
        embedding: false,
    };
    let curve = train_monolithic(cfg, &mut base, &mut cloud, &mut device, &batch, &ic.train, flags)?;
    let (loss, acc) = evaluate(cfg, &base, &cloud, &device, &batch)?;
    let matched = EvalPoint { loss, accuracy: acc };

    let mut perturbed = Vec::with_capacity(ic.n_perturbations);
    for i in 0..ic.n_perturbations {
        let seed = ic.adapter.init_seed.wrapping_add(1 + i as u64);
        let fresh = reinit_public(&cloud, seed);
        let (loss, acc) = evaluate(cfg, &base, &fresh, &device, &batch)?;
        perturbed.push(EvalPoint { loss, accuracy: acc });
    }
    let (perturbed_mean_loss, perturbed_sd_loss) = mean_sd(perturbed.iter().map(|p| p.loss as f64));
    let (perturbed_mean_accuracy, perturbed_sd_accuracy) = mean_sd(perturbed.iter().map(|p| p.accuracy as f64));
    Ok(IntegrityReport {
        final_train_loss: matched.loss,
        loss_curve: curve,
        untrained,
        matched,
        perturbed,
        perturbed_mean_loss,
        perturbed_sd_loss,
        perturbed_mean_accuracy,
        perturbed_sd_accuracy,
    })
}
