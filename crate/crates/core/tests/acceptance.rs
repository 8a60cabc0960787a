//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Run with `cargo test --test acceptance`.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;
use std::time::Instant;

use common::{pick, randomize_m, rel_err, toy_batch, Oracle};
use plrr_core::adapters::{AdapterConfig, CloudAdapterWeights, DeviceAdapterWeights};
use plrr_core::model::{generate_monolithic, loss_and_grads, BaseWeights, GradFlags, ModelConfig, TokenId};
use plrr_core::perf::*;
use plrr_core::runtime::{run_integrity_experiment, spawn_loopback_session, CloudNode, DeviceNode, IntegrityConfig};
use plrr_core::wire::{
    decode_tensors, encode_frame, ledger_check, read_frame, verify_frames, Direction, LoopbackTransport, Phase, Tap,
    TrafficParams, WireDType,
};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn round_to(x: f64, digits: i32) -> f64 {
    let s = 10f64.powi(digits);
    (x * s).round() / s
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

struct Pair {
    cfg: ModelConfig,
    acfg: AdapterConfig,
    cloud: Arc<CloudNode>,
}

impl Pair {
    fn new(cfg: ModelConfig, acfg: AdapterConfig) -> Self {
        let cloud = Arc::new(CloudNode::new(cfg.clone(), acfg.clone()).unwrap());
        Pair { cfg, acfg, cloud }
    }

    fn device(&self, dtype: WireDType) -> DeviceNode<LoopbackTransport> {
        DeviceNode::new(self.cfg.clone(), self.acfg.clone(), dtype).unwrap()
    }

    fn params(&self, bits: u64) -> TrafficParams {
        TrafficParams {
            d: self.cfg.d as u64,
            r_c2d: self.acfg.r_c2d as u64,
            r_d2c: self.acfg.r_d2c as u64,
            adapted_layers: self.acfg.adapted_layers.iter().map(|&l| l as u16).collect(),
            wire_bits: bits,
        }
    }
}

fn memory_table() -> Outcome {
    let mut printed = Vec::new();
    for (name, mb) in [("llama7", 265.3), ("llama13", 331.6), ("llama30", 431.9)] {
        let p = preset(name).unwrap();
        let got = device_memory_bytes(&p, &LrrtConfig::all_layers(&p, 128), DeviceMode::Split) / MEGABYTE;
        ensure!(round_to(got, 1) == mb, "{name} split row {got:.3} MB, expected {mb}");
        printed.push(format!("{got:.1}"));
    }
    let mut worst: f64 = 0.0;
    for (name, bits, mb) in [
        ("llama7", 3, 2477.7),
        ("llama7", 4, 3303.5),
        ("llama13", 3, 4819.4),
        ("llama13", 4, 6425.8),
        ("llama30", 3, 12118.2),
        ("llama30", 4, 16157.7),
        ("small1b", 3, 491.9),
        ("small3b", 3, 999.0),
    ] {
        let p = preset(name).unwrap();
        let got = device_memory_bytes(&p, &LrrtConfig::all_layers(&p, 128), DeviceMode::FullDevice { bits }) / MEGABYTE;
        let e = rel(got, mb);
        ensure!(e <= 5e-3, "{name} {bits}-bit row {got:.1} MB vs {mb} ({:.3}%)", 100.0 * e);
        worst = worst.max(e);
    }
    Ok(format!("split rows {} MB; full-device rows within {:.3}%", printed.join(" / "), 100.0 * worst))
}

fn flops_table() -> Outcome {
    let mut out = Vec::new();
    for (name, pl, full) in [("llama7", 0.27, 13.2), ("llama13", 0.33, 25.7), ("llama30", 0.43, 64.6)] {
        let p = preset(name).unwrap();
        let lrrt = LrrtConfig::all_layers(&p, 128);
        let g_pl = device_flops_per_token(&p, &lrrt, DeviceMode::Split) / 1e9;
        let g_full = device_flops_per_token(&p, &lrrt, DeviceMode::FullDevice { bits: 3 }) / 1e9;
        ensure!(round_to(g_pl, 2) == pl, "{name} split {g_pl:.4} G, expected {pl}");
        ensure!(round_to(g_full, 1) == full, "{name} full {g_full:.3} G, expected {full}");
        out.push(format!("{g_pl:.2}/{g_full:.1}"));
    }
    let p = preset("llama7").unwrap();
    let lrrt = LrrtConfig::all_layers(&p, 64);
    let full = DeviceMode::FullDevice { bits: 3 };
    let mem = 100.0 * device_memory_bytes(&p, &lrrt, DeviceMode::Split) / device_memory_bytes(&p, &lrrt, full);
    let flops =
        100.0 * device_flops_per_token(&p, &lrrt, DeviceMode::Split) / device_flops_per_token(&p, &lrrt, full);
    ensure!(round_to(mem, 1) == 10.6, "memory ratio {mem:.2}%");
    ensure!(round_to(flops, 1) == 2.0, "FLOPs ratio {flops:.2}%");
    Ok(format!("G split/full {}; ratios {mem:.1}% memory, {flops:.1}% FLOPs (r=64)", out.join(", ")))
}

/// Payload bits that one adapted layer adds to a single-token forward pass,
/// measured on a live loopback session against an identical unadapted one.
fn live_layer_bits(d: usize, r: usize) -> u64 {
    let cfg = ModelConfig::toy(d, 1, 2, 32, 31);
    let run = |layers: Vec<usize>| {
        let pair = Pair::new(cfg.clone(), AdapterConfig::new(r, r, layers, 32));
        let mut dev = pair.device(WireDType::F16);
        let (t, h) = spawn_loopback_session(pair.cloud.clone());
        dev.connect(t, 1).unwrap();
        dev.prefill(&[3]).unwrap();
        let ledger = dev.ledger().clone();
        dev.close().unwrap();
        h.join().unwrap().unwrap();
        let check = ledger_check(&ledger, &pair.params(16), &[Phase::Inference { tokens: 1, passes: 1 }]);
        assert!(check.pass, "{:?}", check.mismatches);
        ledger.payload_bits()
    };
    run(vec![0]) - run(vec![])
}

fn traffic_constants() -> Outcome {
    let analytic = layer_bits_per_token(&LrrtConfig::uniform(128, 1), 16);
    let hidden = layer_bits_per_token(&LrrtConfig::uniform(4096, 1), 16);
    ensure!(analytic == 8192, "analytic layer bits {analytic}");
    ensure!(hidden == 262_144, "analytic hidden-state bits {hidden}");
    let live = live_layer_bits(256, 128);
    ensure!(live == analytic, "live session measured {live} bits per layer, analytic {analytic}");
    let live_hidden = live_layer_bits(16, 4096);
    ensure!(live_hidden == hidden, "live session measured {live_hidden} bits at r=4096, analytic {hidden}");
    Ok(format!(
        "{analytic} bits ({:.1} Kb) and {hidden} bits ({:.1} Kb), analytic and live ledger agree",
        analytic as f64 / KILOBIT,
        hidden as f64 / KILOBIT
    ))
}

fn reduction() -> Outcome {
    let r = reduction_ratio(128, 4096);
    ensure!(r == 1.0 - 128.0 / 4096.0, "ratio {r}");
    ensure!(round_to(100.0 * r, 2) == 96.88, "ratio {r}");
    Ok(format!("{:.2}%", 100.0 * r))
}

fn overhead() -> Outcome {
    let net = NetworkSpec::default();
    let mut got = Vec::new();
    for (name, expected) in [("llama7", 5.1), ("llama13", 6.4), ("llama30", 9.3)] {
        let p = preset(name).unwrap();
        let t = 1e3 * unit_comm_time(&net, p.d, &LrrtConfig::all_layers(&p, 128), 16, EmbPolicy::UpOnly);
        ensure!(rel(t, expected) <= 0.15, "{name}: {t:.3} ms vs {expected} ms");
        got.push(format!("{t:.2}"));
    }
    Ok(format!("{} ms (expected 5.1 / 6.4 / 9.3)", got.join(" / ")))
}

fn budget() -> Outcome {
    let b = lora_layer_budget(0.70, 37.2, &NetworkSpec::default(), 4096, 16, EmbPolicy::UpOnly).map_err(|e| e.to_string())?;
    ensure!(b.layers == 2, "budget {} layers", b.layers);
    Ok(format!("{} layers within {:.3} ms", b.layers, b.t_budget_s * 1e3))
}

fn oracle_equivalence() -> Outcome {
    let start = Instant::now();
    let configs = [(16, 2, 2), (16, 4, 4), (32, 2, 8), (32, 4, 2), (16, 2, 8), (32, 4, 4)];
    let mut worst = 0.0f32;
    for (i, &(d, n, r)) in configs.iter().enumerate() {
        let pair = Pair::new(
            ModelConfig::toy(d, n, 2, 48, 500 + i as u64),
            AdapterConfig::all_layers(n, r, 600 + i as u64),
        );
        let mut dev = pair.device(WireDType::F32);
        randomize_m(dev.weights_mut(), 700 + i as u64, 0.3);
        let (t, h) = spawn_loopback_session(pair.cloud.clone());
        dev.connect(t, 1).unwrap();
        let prompt: Vec<TokenId> = vec![(i % 48) as TokenId, 7, 19, 2];
        let (split, split_logits) = dev.generate(&prompt, 16).unwrap();
        dev.close().unwrap();
        h.join().unwrap().unwrap();
        let base = BaseWeights::init(&pair.cfg).unwrap();
        let (mono, mono_logits) =
            generate_monolithic(&pair.cfg, &base, pair.cloud.adapters(), dev.weights(), &prompt, 16).unwrap();
        ensure!(split == mono, "config {i} (d={d}, N={n}, r={r}): {split:?} vs {mono:?}");
        for (a, b) in split_logits.iter().zip(&mono_logits) {
            worst = worst.max(a.max_abs_diff(b));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure!(worst <= 1e-5, "max logit diff {worst:e}");
    ensure!(secs < 30.0, "took {secs:.1} s");
    Ok(format!("{} configs x 16 steps, max logit diff {worst:e}, {secs:.2} s", configs.len()))
}

fn gradient_fidelity() -> Outcome {
    let start = Instant::now();
    let pair = Pair::new(ModelConfig::toy(16, 2, 2, 32, 41), AdapterConfig::all_layers(2, 4, 42));
    let mut dev = pair.device(WireDType::F32);
    randomize_m(dev.weights_mut(), 43, 0.3);
    let (t, h) = spawn_loopback_session(pair.cloud.clone());
    dev.connect(t, 1).unwrap();
    let batch = toy_batch(32, 3, 44);
    let (_, split) = dev.compute_gradients(&batch).unwrap();
    dev.close().unwrap();
    h.join().unwrap().unwrap();

    let base = BaseWeights::init(&pair.cfg).unwrap();
    let (_, mono) =
        loss_and_grads(&pair.cfg, &base, pair.cloud.adapters(), dev.weights(), &batch, GradFlags::default()).unwrap();
    let mut worst_split = 0.0f32;
    for (l, g) in &mono.m {
        for q in 0..3 {
            let scale = g[q].data().iter().fold(f32::MIN_POSITIVE, |m, v| m.max(v.abs()));
            worst_split = worst_split.max(split.m[l][q].max_abs_diff(&g[q]) / scale);
        }
    }
    ensure!(worst_split <= 1e-5, "split vs monolithic relative diff {worst_split:e}");

    let mut oracle = Oracle::new(&pair.cfg, &base, pair.cloud.adapters(), dev.weights());
    let mut rng = StdRng::seed_from_u64(45);
    let mut worst_fd: f64 = 0.0;
    let mut checked = 0;
    for (&layer, g) in &split.m {
        for (p, gm) in g.iter().enumerate() {
            for (r, c) in pick(gm, 5, &mut rng) {
                let num = oracle.loss_slope(&batch, 1e-3, |o| &mut o.layers[layer].adapter.as_mut().unwrap().2[p][r][c]);
                let e_split = rel_err(gm.get(r, c) as f64, num);
                let e_mono = rel_err(mono.m[&layer][p].get(r, c) as f64, num);
                ensure!(e_split <= 1e-3 && e_mono <= 1e-3, "M[{layer}][{p}][{r},{c}] vs finite difference {num}");
                worst_fd = worst_fd.max(e_split).max(e_mono);
                checked += 1;
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure!(secs < 60.0, "took {secs:.1} s");
    Ok(format!(
        "split vs monolithic {worst_split:e}; {checked} coordinates vs finite differences, worst {worst_fd:e}"
    ))
}

fn integrity() -> Outcome {
    let start = Instant::now();
    let r = run_integrity_experiment(&IntegrityConfig::default()).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let matched = r.matched.loss as f64;
    let untrained = r.untrained.loss as f64;
    ensure!(r.perturbed.len() == 20, "{} perturbations", r.perturbed.len());
    ensure!(matched < 0.05, "matched loss {matched}");
    ensure!(r.perturbed_mean_loss > matched, "perturbed {} <= matched {matched}", r.perturbed_mean_loss);
    ensure!(
        r.perturbed_mean_loss >= 0.5 * untrained,
        "perturbed {} below half of untrained {untrained}",
        r.perturbed_mean_loss
    );
    ensure!(secs < 300.0, "took {secs:.1} s");
    Ok(format!(
        "matched {matched:.4}, perturbed mean {:.3} ({:.2}x untrained {untrained:.3}), {secs:.1} s",
        r.perturbed_mean_loss,
        r.perturbed_mean_loss / untrained
    ))
}

fn zero_init() -> Outcome {
    let pair = Pair::new(ModelConfig::toy(32, 2, 4, 48, 51), AdapterConfig::all_layers(2, 8, 52));
    let mut dev = pair.device(WireDType::F32);
    let (t, h) = spawn_loopback_session(pair.cloud.clone());
    dev.connect(t, 1).unwrap();
    let prompt = [9, 1, 40, 3];
    let (split, split_logits) = dev.generate(&prompt, 12).unwrap();
    dev.close().unwrap();
    h.join().unwrap().unwrap();
    ensure!(dev.weights().layers.values().flatten().all(|m| m.is_all_zero()), "M is not zero");

    let base = BaseWeights::init(&pair.cfg).unwrap();
    let (mono, mono_logits) =
        generate_monolithic(&pair.cfg, &base, pair.cloud.adapters(), dev.weights(), &prompt, 12).unwrap();
    let none = DeviceAdapterWeights::zeros(&AdapterConfig::new(8, 8, vec![], 0));
    let (plain, plain_logits) =
        generate_monolithic(&pair.cfg, &base, &CloudAdapterWeights::none(), &none, &prompt, 12).unwrap();
    ensure!(split == plain && mono == plain, "tokens differ from the unadapted model");
    let bits = |ls: &[plrr_core::Matrix]| -> Vec<u32> { ls.iter().flat_map(|m| m.data().iter().map(|v| v.to_bits())).collect() };
    ensure!(bits(&split_logits) == bits(&plain_logits), "split logits are not bit-identical to the base model");
    ensure!(bits(&mono_logits) == bits(&plain_logits), "monolithic logits are not bit-identical to the base model");
    Ok(format!("{} logit vectors bit-identical (split, monolithic, base)", plain_logits.len()))
}

fn tps_properties() -> Outcome {
    let mut rng = StdRng::seed_from_u64(61);
    let draw = |rng: &mut StdRng| ThroughputInputs {
        tps_decoder_cloud: rng.random_range(1.0..200.0),
        tps_lrrt_device: rng.random_range(50.0..5000.0),
        tps_lrrt_cloud: rng.random_range(50.0..5000.0),
        tps_lmhead_device: rng.random_range(20.0..2000.0),
    };
    let cases = 2000;
    for _ in 0..cases {
        let x = draw(&mut rng);
        let t = rng.random_range(1e-4..5e-2);
        let tp = rng.random_range(1e-4..5e-2);
        let base = infer_tps(&x, t);
        let min = x
            .tps_decoder_cloud
            .min(x.tps_lrrt_device)
            .min(x.tps_lrrt_cloud)
            .min(x.tps_lmhead_device)
            .min(1.0 / t);
        ensure!(base <= min, "infer_tps {base} above slowest stage {min}");
        ensure!(infer_tps(&x, t * 1.1) < base, "not decreasing in t");
        for k in 0..4 {
            let mut y = x;
            match k {
                0 => y.tps_decoder_cloud *= 1.1,
                1 => y.tps_lrrt_device *= 1.1,
                2 => y.tps_lrrt_cloud *= 1.1,
                _ => y.tps_lmhead_device *= 1.1,
            }
            ensure!(infer_tps(&y, t) > base, "not increasing in stage {k}");
            ensure!(train_tps(&y, t, tp) > train_tps(&x, t, tp), "train_tps not increasing in stage {k}");
        }
        ensure!(train_tps(&x, t, tp) < base, "train_tps not below infer_tps");
        ensure!(train_tps(&x, t, tp * 1.1) < train_tps(&x, t, tp), "train_tps not decreasing in t'");
    }

    let cloud_only = ThroughputInputs {
        tps_decoder_cloud: 37.2,
        tps_lrrt_device: f64::INFINITY,
        tps_lrrt_cloud: f64::INFINITY,
        tps_lmhead_device: f64::INFINITY,
    };
    ensure!(infer_tps(&cloud_only, 0.0) == 37.2, "limit is not cloud-bound");
    ensure!(train_tps(&cloud_only, 0.0, 0.0) == 37.2, "training limit is not cloud-bound");

    let net = NetworkSpec::default();
    let mut slopes = 0;
    for d in [2048u64, 4096, 6656] {
        for n in [1u64, 7, 32] {
            let t = |r: u64, n: u64| unit_comm_time(&net, d, &LrrtConfig::uniform(r, n), 16, EmbPolicy::UpOnly);
            let bits = |r: u64, n: u64| layer_bits_per_token(&LrrtConfig::uniform(r, n), 16);
            let slope_r = 16.0 * n as f64 * (3.0 / net.b_d2c + 1.0 / net.b_c2d);
            ensure!(rel(t(129, n) - t(128, n), slope_r) < 1e-9, "t slope in rank at d={d}, N'={n}");
            ensure!(rel(t(64, n + 1) - t(64, n), slope_r * 64.0 / n as f64) < 1e-9, "t slope in N' at d={d}");
            ensure!(bits(129, n) - bits(128, n) == 64 * n, "bit slope in rank");
            ensure!(bits(128, n + 1) - bits(128, n) == 8192, "bit slope in N'");
            slopes += 4;
        }
    }
    Ok(format!("{cases} random inputs, limiting cases, {slopes} exact slopes"))
}

fn data_locality() -> Outcome {
    let pair = Pair::new(ModelConfig::toy(16, 2, 2, 32, 71), AdapterConfig::all_layers(2, 4, 72));
    let mut dev: DeviceNode<Tap<LoopbackTransport>> =
        DeviceNode::new(pair.cfg.clone(), pair.acfg.clone(), WireDType::F32).unwrap();
    let marker = f32::from_bits(0x3E1D_C0DE);
    for ms in dev.weights_mut().layers.values_mut() {
        for m in ms.iter_mut() {
            m.set(0, 0, marker);
        }
    }
    let (t, h) = spawn_loopback_session(pair.cloud.clone());
    let (tap, log) = Tap::new(t, Direction::D2C);
    dev.connect(tap, 1).unwrap();
    let prompt: Vec<TokenId> = vec![29, 3, 17, 31];
    dev.generate(&prompt, 6).unwrap();
    let batch = toy_batch(32, 2, 73);
    for _ in 0..3 {
        dev.train_step(&batch, 1e-3).unwrap();
    }
    dev.close().unwrap();
    h.join().unwrap().unwrap();

    let records = log.lock().unwrap().clone();
    let frames: Vec<_> = records
        .iter()
        .map(|r| (r.direction, read_frame(&mut r.bytes.as_slice()).unwrap().unwrap()))
        .collect();
    let report = verify_frames(&frames);
    ensure!(report.pass(), "whitelist violations: {:?}", report.violations);
    // the marker only survives the optimizer if M[0][0] never moved; check the live values too
    let live: Vec<u32> = dev.weights().layers.values().flatten().map(|m| m.get(0, 0).to_bits()).collect();
    let needles: Vec<[u8; 4]> = std::iter::once(marker.to_le_bytes())
        .chain(live.iter().map(|b| b.to_le_bytes()))
        .collect();
    let ids: Vec<u8> = prompt.iter().flat_map(|t| t.to_le_bytes()).collect();
    let ids_u8: Vec<u8> = prompt.iter().map(|&t| t as u8).collect();
    let labels: Vec<u8> = batch.targets[..4].iter().flat_map(|t| t.to_le_bytes()).collect();
    for (dir, f) in &frames {
        let bytes = encode_frame(f);
        for n in &needles {
            ensure!(!bytes.windows(4).any(|w| w == n), "M entry in a {:?} frame", f.msg_type);
        }
        if *dir == Direction::D2C {
            ensure!(!bytes.windows(ids.len()).any(|w| w == ids), "prompt ids in a {:?} frame", f.msg_type);
            ensure!(!f.payload.windows(ids_u8.len()).any(|w| w == ids_u8), "prompt bytes in a {:?} frame", f.msg_type);
            ensure!(!bytes.windows(labels.len()).any(|w| w == labels), "labels in a {:?} frame", f.msg_type);
        }
        if f.msg_type.carries_tensors() {
            for t in decode_tensors(&f.payload).unwrap() {
                ensure!(!t.data.contains(&marker), "M marker decoded from a {:?} frame", f.msg_type);
            }
        }
    }
    Ok(format!("{} frames over generate + 3 train steps, 0 violations", report.frames))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 12] = [
        ("memory table", memory_table),
        ("FLOPs table", flops_table),
        ("traffic constants", traffic_constants),
        ("reduction ratio", reduction),
        ("network overhead", overhead),
        ("layer budget", budget),
        ("oracle equivalence", oracle_equivalence),
        ("gradient fidelity", gradient_fidelity),
        ("training efficacy and integrity", integrity),
        ("zero-init neutrality", zero_init),
        ("throughput properties", tps_properties),
        ("data locality", data_locality),
    ];
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("PASS criterion {}: {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {}: {name}: {detail}", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
