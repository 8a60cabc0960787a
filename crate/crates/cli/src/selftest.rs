//! Quick end-to-end checks over loopback: split vs monolithic generation,
//! split vs monolithic gradients, and exact traffic accounting.

use std::sync::Arc;

use plrr_core::adapters::{AdapterConfig, DeviceAdapterWeights};
use plrr_core::model::{generate_monolithic, loss_and_grads, BaseWeights, Example, GradFlags, ModelConfig, TrainingBatch};
use plrr_core::rng::tensor_rng;
use plrr_core::runtime::{spawn_loopback_session, CloudNode, DeviceNode};
use plrr_core::wire::{ledger_check, LoopbackTransport, Phase, TrafficParams, WireDType};
use plrr_core::Result;
use rand::Rng;
use serde::Serialize;

#[derive(Debug, Clone, Serialize)]
pub struct SuiteResult {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct SelftestReport {
    pub pass: bool,
    pub suites: Vec<SuiteResult>,
}

struct Case {
    cfg: ModelConfig,
    acfg: AdapterConfig,
}

const CASES: [(usize, usize, usize); 5] = [(16, 2, 2), (16, 4, 4), (32, 2, 8), (32, 4, 2), (16, 2, 8)];

fn case(i: usize) -> Case {
    let (d, n, r) = CASES[i];
    Case {
        cfg: ModelConfig::toy(d, n, 2, 48, 100 + i as u64),
        acfg: AdapterConfig::all_layers(n, r, 200 + i as u64),
    }
}

fn random_m(acfg: &AdapterConfig, seed: u64) -> DeviceAdapterWeights {
    let mut w = DeviceAdapterWeights::zeros(acfg);
    let mut rng = tensor_rng(seed, "selftest.m");
    for ms in w.layers.values_mut() {
        for m in ms.iter_mut() {
            for v in m.data_mut() {
                *v = rng.random_range(-0.3..0.3);
            }
        }
    }
    w
}

fn params(c: &Case) -> TrafficParams {
    TrafficParams {
        d: c.cfg.d as u64,
        r_c2d: c.acfg.r_c2d as u64,
        r_d2c: c.acfg.r_d2c as u64,
        adapted_layers: c.acfg.adapted_layers.iter().map(|&l| l as u16).collect(),
        wire_bits: 32,
    }
}

fn device(c: &Case, seed: u64) -> Result<DeviceNode<LoopbackTransport>> {
    let mut dev = DeviceNode::new(c.cfg.clone(), c.acfg.clone(), WireDType::F32)?;
    *dev.weights_mut() = random_m(&c.acfg, seed);
    Ok(dev)
}

fn equivalence() -> Result<(bool, String, bool, String)> {
    let mut worst = 0.0f32;
    let mut mismatched = Vec::new();
    let mut ledger_fail = Vec::new();
    for i in 0..CASES.len() {
        let c = case(i);
        let cloud = Arc::new(CloudNode::new(c.cfg.clone(), c.acfg.clone())?);
        let mut dev = device(&c, i as u64)?;
        let (t, h) = spawn_loopback_session(cloud.clone());
        dev.connect(t, 1)?;
        let prompt = [1, 2, 3, 4];
        let (split, split_logits) = dev.generate(&prompt, 16)?;
        let ledger = dev.ledger().clone();
        dev.close()?;
        h.join().expect("cloud thread")?;
        let base = BaseWeights::init(&c.cfg)?;
        let (mono, mono_logits) = generate_monolithic(&c.cfg, &base, cloud.adapters(), dev.weights(), &prompt, 16)?;
        if split != mono {
            mismatched.push(i);
        }
        for (a, b) in split_logits.iter().zip(&mono_logits) {
            worst = worst.max(a.max_abs_diff(b));
        }
        let check = ledger_check(&ledger, &params(&c), &[Phase::Inference { tokens: 4 + 15, passes: 16 }]);
        if !check.pass {
            ledger_fail.push(format!("case {i}: {}", check.mismatches.join("; ")));
        }
    }
    let eq_pass = mismatched.is_empty() && worst <= 1e-5;
    let eq_detail = format!("{} configs, token mismatches {:?}, max logit diff {worst:e}", CASES.len(), mismatched);
    let ledger_pass = ledger_fail.is_empty();
    let ledger_detail = if ledger_pass {
        "generation ledgers equal the closed form".to_string()
    } else {
        ledger_fail.join(" | ")
    };
    Ok((eq_pass, eq_detail, ledger_pass, ledger_detail))
}

fn gradients() -> Result<(bool, String, bool, String)> {
    let mut worst = 0.0f32;
    let mut ledger_fail = Vec::new();
    for i in 0..CASES.len() {
        let c = case(i);
        let cloud = Arc::new(CloudNode::new(c.cfg.clone(), c.acfg.clone())?);
        let mut dev = device(&c, 50 + i as u64)?;
        let examples = vec![Example::new(vec![3, 1, 4], vec![1, 5]), Example::new(vec![9, 2], vec![6, 5, 3])];
        let batch = TrainingBatch::from_examples(&examples, TrainingBatch::fitting_len(&examples))?;
        let (t, h) = spawn_loopback_session(cloud.clone());
        dev.connect(t, 1)?;
        let (_, grads) = dev.compute_gradients(&batch)?;
        let ledger = dev.ledger().clone();
        dev.close()?;
        h.join().expect("cloud thread")?;
        let base = BaseWeights::init(&c.cfg)?;
        let (_, mono) = loss_and_grads(&c.cfg, &base, cloud.adapters(), dev.weights(), &batch, GradFlags::default())?;
        for (l, g) in &mono.m {
            for q in 0..3 {
                let scale = g[q].data().iter().fold(f32::MIN_POSITIVE, |m, v| m.max(v.abs()));
                worst = worst.max(grads.m[l][q].max_abs_diff(&g[q]) / scale);
            }
        }
        let phase = Phase::Train { rows: batch.rows() as u64, embedding_grad: false };
        let check = ledger_check(&ledger, &params(&c), &[phase]);
        if !check.pass {
            ledger_fail.push(format!("case {i}: {}", check.mismatches.join("; ")));
        }
    }
    let pass = worst <= 1e-5;
    let ledger_pass = ledger_fail.is_empty();
    let ledger_detail = if ledger_pass {
        "training ledgers equal the closed form".to_string()
    } else {
        ledger_fail.join(" | ")
    };
    Ok((pass, format!("max relative grad(M) diff {worst:e}"), ledger_pass, ledger_detail))
}

pub fn run() -> Result<SelftestReport> {
    let (eq, eq_detail, gen_ledger, gen_detail) = equivalence()?;
    let (gr, gr_detail, tr_ledger, tr_detail) = gradients()?;
    let suites = vec![
        SuiteResult {
            name: "oracle_equivalence".into(),
            pass: eq,
            detail: eq_detail,
        },
        SuiteResult {
            name: "gradient".into(),
            pass: gr,
            detail: gr_detail,
        },
        SuiteResult {
            name: "ledger".into(),
            pass: gen_ledger && tr_ledger,
            detail: format!("{gen_detail}; {tr_detail}"),
        },
    ];
    Ok(SelftestReport {
        pass: suites.iter().all(|s| s.pass),
        suites,
    })
}
