use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context};
use plrr_core::adapters::{read_checkpoint, write_checkpoint};
use plrr_core::model::{HeadWeights, TokenId, TrainingBatch};
use plrr_core::perf::{
    estimate_rows, lora_layer_budget, overhead_decomposition, preset, unit_comm_time, unit_grad_time, EstimateConfig,
    LrrtConfig, ModelPreset,
};
use plrr_core::runtime::{
    parse_dataset, run_integrity_experiment, spawn_loopback_session, CloudNode, DeviceNode, IntegrityConfig,
    SessionSummary,
};
use plrr_core::wire::{
    ledger_check, read_capture, verify_frames, write_capture, Direction, Phase, Tap, TapLog, TcpTransport,
    TrafficParams, Transport,
};
use serde::Serialize;
use serde_json::json;

use crate::config::{RunConfig, TransportKind};
use crate::report::Report;

fn traffic_params(cfg: &RunConfig) -> anyhow::Result<TrafficParams> {
    let acfg = cfg.adapter()?;
    Ok(TrafficParams {
        d: cfg.model.d as u64,
        r_c2d: acfg.r_c2d as u64,
        r_d2c: acfg.r_d2c as u64,
        adapted_layers: acfg.adapted_layers.iter().map(|&l| l as u16).collect(),
        wire_bits: cfg.wire.dtype_bits as u64,
    })
}

/// Different on every run; the cloud refuses replayed nonces.
fn fresh_nonce() -> u64 {
    let t = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .unwrap_or_default();
    t.as_nanos() as u64 ^ ((std::process::id() as u64) << 32)
}

fn device_from(cfg: &RunConfig, checkpoint: Option<&Path>) -> anyhow::Result<DeviceNode<Tap<Box<dyn Transport>>>> {
    let model = cfg.model()?;
    let acfg = cfg.adapter()?;
    let dtype = cfg.dtype()?;
    let Some(path) = checkpoint else {
        return Ok(DeviceNode::new(model, acfg, dtype)?);
    };
    let mut r = BufReader::new(File::open(path).with_context(|| format!("opening checkpoint {}", path.display()))?);
    let ckpt = read_checkpoint(&mut r)?;
    if !ckpt.pairs_with(acfg.init_seed) {
        log::warn!(
            "checkpoint was trained against public seed {}, config uses {}",
            ckpt.weights.init_seed,
            acfg.init_seed
        );
    }
    let mut head = HeadWeights::init(&model)?;
    if let Some(e) = ckpt.embedding {
        head.embedding = e;
    }
    Ok(DeviceNode::with_weights(model, acfg, head, ckpt.weights, dtype))
}

/// Opens the configured transport; loopback also starts an in-process cloud.
fn open_transport(
    cfg: &RunConfig,
    log: &TapLog,
) -> anyhow::Result<(Tap<Box<dyn Transport>>, Option<std::thread::JoinHandle<plrr_core::Result<SessionSummary>>>)> {
    let (inner, handle): (Box<dyn Transport>, _) = match cfg.wire.transport {
        TransportKind::Loopback => {
            let cloud = Arc::new(CloudNode::new(cfg.model()?, cfg.adapter()?)?);
            let (t, h) = spawn_loopback_session(cloud);
            (Box::new(t), Some(h))
        }
        TransportKind::Tcp => {
            let t = TcpTransport::connect(cfg.wire.connect_addr.as_str())
                .with_context(|| format!("connecting to {}", cfg.wire.connect_addr))?;
            (Box::new(t), None)
        }
    };
    Ok((Tap::with_log(inner, Direction::D2C, log.clone()), handle))
}

fn finish(handle: Option<std::thread::JoinHandle<plrr_core::Result<SessionSummary>>>) -> anyhow::Result<()> {
    if let Some(h) = handle {
        h.join().map_err(|_| anyhow::anyhow!("cloud thread panicked"))??;
    }
    Ok(())
}

fn save_capture(path: Option<&Path>, log: &TapLog) -> anyhow::Result<()> {
    if let Some(p) = path {
        let records = log.lock().map_err(|_| anyhow::anyhow!("tap log poisoned"))?.clone();
        let mut w = BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?);
        write_capture(&mut w, &records)?;
    }
    Ok(())
}

pub fn serve_cloud(cfg: &RunConfig, listen: Option<&str>, max_sessions: Option<usize>) -> anyhow::Result<()> {
    let cloud = Arc::new(CloudNode::new(cfg.model()?, cfg.adapter()?)?);
    let addr = listen.unwrap_or(&cfg.wire.listen_addr);
    let listener = TcpListener::bind(addr).with_context(|| format!("binding {addr}"))?;
    println!("listening on {}", listener.local_addr()?);
    log::info!("config digest {}", cloud.digest());
    cloud.serve_tcp(listener, max_sessions)?;
    Ok(())
}

pub struct DeviceArgs<'a> {
    pub prompt: &'a [TokenId],
    pub n_tokens: usize,
    pub checkpoint: Option<&'a Path>,
    pub capture: Option<&'a Path>,
    pub report: Option<&'a Path>,
}

pub fn run_device(cfg: &RunConfig, args: &DeviceArgs) -> anyhow::Result<()> {
    if args.prompt.is_empty() || args.n_tokens == 0 {
        bail!(plrr_core::Error::Input("need a non-empty prompt and at least one new token".into()));
    }
    let mut dev = device_from(cfg, args.checkpoint)?;
    let log = TapLog::default();
    let (transport, handle) = open_transport(cfg, &log)?;
    let session = dev.connect(transport, fresh_nonce())?;
    let (tokens, _) = dev.generate(args.prompt, args.n_tokens)?;
    dev.close()?;
    finish(handle)?;
    save_capture(args.capture, &log)?;

    let ledger = dev.ledger().clone();
    let phase = Phase::Inference {
        tokens: (args.prompt.len() + args.n_tokens - 1) as u64,
        passes: args.n_tokens as u64,
    };
    let check = ledger_check(&ledger, &traffic_params(cfg)?, &[phase]);
    println!("{}", tokens.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" "));
    let results = json!({
        "session_id": session,
        "generated": tokens,
        "ledger": ledger,
        "ledger_check": check,
    });
    let inputs = json!({ "config": cfg, "prompt": args.prompt, "n_tokens": args.n_tokens });
    if let Some(p) = args.report {
        Report::new("run-device", inputs, results)?.emit(Some(p))?;
    }
    if !check.pass {
        bail!("traffic ledger disagrees with the closed form: {}", check.mismatches.join("; "));
    }
    Ok(())
}

pub struct TrainArgs<'a> {
    pub dataset: &'a Path,
    pub checkpoint_out: &'a Path,
    pub loss_csv: Option<&'a Path>,
    pub capture: Option<&'a Path>,
    pub report: Option<&'a Path>,
}

#[derive(Serialize)]
struct LossRow {
    step: usize,
    lr: f32,
    loss: f32,
}

pub fn train(cfg: &RunConfig, args: &TrainArgs) -> anyhow::Result<()> {
    let model = cfg.model()?;
    let text = std::fs::read_to_string(args.dataset)
        .map_err(|e| plrr_core::Error::Input(format!("reading dataset {}: {e}", args.dataset.display())))?;
    let examples = parse_dataset(&text, model.vocab)?;
    let seq_len = match cfg.train.seq_len {
        0 => TrainingBatch::fitting_len(&examples),
        n => n,
    };
    let bs = cfg.train.batch_size.max(1);
    let batches = examples
        .chunks(bs)
        .map(|c| TrainingBatch::from_examples(c, seq_len))
        .collect::<plrr_core::Result<Vec<_>>>()?;

    let mut dev = device_from(cfg, None)?;
    let log = TapLog::default();
    let (transport, handle) = open_transport(cfg, &log)?;
    dev.connect(transport, fresh_nonce())?;
    let tc = cfg.train_config();
    let mut curve = Vec::with_capacity(tc.steps);
    let mut phases = Vec::with_capacity(tc.steps);
    for step in 0..tc.steps {
        let batch = &batches[step % batches.len()];
        let lr = tc.lr_at(step);
        let loss = dev.train_step(batch, lr)?;
        log::debug!("step {step} lr {lr:e} loss {loss}");
        curve.push(LossRow { step, lr, loss });
        phases.push(Phase::Train {
            rows: batch.rows() as u64,
            embedding_grad: cfg.adapter.trainable_embedding,
        });
    }
    dev.close()?;
    finish(handle)?;
    save_capture(args.capture, &log)?;

    let mut w = BufWriter::new(
        File::create(args.checkpoint_out).with_context(|| format!("creating {}", args.checkpoint_out.display()))?,
    );
    write_checkpoint(&mut w, &dev.checkpoint())?;
    if let Some(p) = args.loss_csv {
        let mut csv = csv::Writer::from_path(p).with_context(|| format!("creating {}", p.display()))?;
        for row in &curve {
            csv.serialize(row)?;
        }
        csv.flush()?;
    }
    let ledger = dev.ledger().clone();
    let check = ledger_check(&ledger, &traffic_params(cfg)?, &phases);
    let final_loss = curve.last().map(|r| r.loss);
    println!("final loss {}", final_loss.map_or("n/a".to_string(), |l| format!("{l:.6}")));
    let results = json!({
        "final_loss": final_loss,
        "losses": curve.iter().map(|r| r.loss).collect::<Vec<_>>(),
        "ledger": ledger,
        "ledger_check": check,
        "checkpoint": args.checkpoint_out,
    });
    let inputs = json!({ "config": cfg, "dataset": args.dataset, "examples": examples.len() });
    if let Some(p) = args.report {
        Report::new("train", inputs, results)?.emit(Some(p))?;
    }
    if !check.pass {
        bail!("traffic ledger disagrees with the closed form: {}", check.mismatches.join("; "));
    }
    Ok(())
}

pub struct EstimateArgs {
    pub presets: Vec<String>,
    pub preset_files: Vec<PathBuf>,
    pub rank: Option<u64>,
    pub r_c2d: Option<u64>,
    pub r_d2c: Option<u64>,
    pub n_adapted: Option<u64>,
    pub wire_bits: u64,
    pub overhead: bool,
    pub lora_budget: bool,
    pub target: f64,
    pub tps_cloud: Option<f64>,
    pub csv: Option<PathBuf>,
    pub report: Option<PathBuf>,
}

fn presets_for(cfg: &RunConfig, args: &EstimateArgs) -> anyhow::Result<Vec<ModelPreset>> {
    let mut out = Vec::new();
    for name in &args.presets {
        out.push(preset(name).map_err(|e| plrr_core::Error::Input(e.to_string()))?);
    }
    for path in &args.preset_files {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading preset {}", path.display()))?;
        out.push(plrr_core::perf::parse_preset(&text)?);
    }
    if out.is_empty() {
        out.push(preset(&cfg.perf.preset)?);
    }
    Ok(out)
}

pub fn estimate(cfg: &RunConfig, args: &EstimateArgs) -> anyhow::Result<()> {
    let presets = presets_for(cfg, args)?;
    let r = args.rank.unwrap_or(128);
    let ec = EstimateConfig {
        r_c2d: args.r_c2d.unwrap_or(r),
        r_d2c: args.r_d2c.unwrap_or(r),
        n_adapted: args.n_adapted,
        wire_bits: args.wire_bits,
        network: cfg.perf.network,
        emb_policy: cfg.perf.emb_policy,
        ..EstimateConfig::default()
    };
    let rows = estimate_rows(&presets, &ec)?;
    let mut results = serde_json::Map::new();
    results.insert("rows".into(), serde_json::to_value(&rows)?);
    if args.overhead {
        let mut items = serde_json::Map::new();
        for p in &presets {
            let lrrt = LrrtConfig::new(ec.r_c2d, ec.r_d2c, ec.n_adapted.unwrap_or(p.n_layers));
            let o = overhead_decomposition(p, &lrrt, &ec.network, ec.wire_bits, ec.emb_policy);
            items.insert(
                p.name.clone(),
                json!({
                    "layer_d2c_ms": o.layer_d2c_s * 1e3,
                    "layer_c2d_ms": o.layer_c2d_s * 1e3,
                    "emb_up_ms": o.emb_up_s * 1e3,
                    "emb_down_ms": o.emb_down_s * 1e3,
                    "t_ms": o.total_s * 1e3,
                    "tprime_ms": unit_grad_time(&ec.network, p.d, &lrrt, ec.wire_bits, false) * 1e3,
                }),
            );
            println!("{}: t = {:.3} ms", p.name, o.total_s * 1e3);
        }
        results.insert("overhead".into(), items.into());
    }
    if args.lora_budget {
        let mut items = serde_json::Map::new();
        for p in &presets {
            let tps = args
                .tps_cloud
                .or(p.tps_decoder_cloud)
                .ok_or_else(|| plrr_core::Error::Input(format!("{}: no cloud throughput; pass --tps-cloud", p.name)))?;
            let b = lora_layer_budget(args.target, tps, &ec.network, p.d, ec.wire_bits, ec.emb_policy)?;
            let t_at = unit_comm_time(&ec.network, p.d, &LrrtConfig::uniform(p.d, b.layers), ec.wire_bits, ec.emb_policy);
            println!("{}: {} layers", p.name, b.layers);
            if let Some(d) = &b.diagnostic {
                log::warn!("{}: {d}", p.name);
            }
            items.insert(p.name.clone(), json!({ "budget": b, "tps_cloud": tps, "t_ms_at_budget": t_at * 1e3 }));
        }
        results.insert("lora_budget".into(), items.into());
    }
    if !args.overhead && !args.lora_budget {
        for r in &rows {
            println!(
                "{:<8} {:<12} {:>2} bit  {:>10.1} MB  {:>7.2} GFLOPs",
                r.preset, r.mode, r.bits, r.memory_mb, r.flops_g
            );
        }
    }
    if let Some(p) = &args.csv {
        let mut w = csv::Writer::from_path(p).with_context(|| format!("creating {}", p.display()))?;
        for r in &rows {
            w.serialize(r)?;
        }
        w.flush()?;
    }
    let inputs = json!({
        "presets": presets,
        "estimate": ec,
        "target": args.target,
        "tps_cloud": args.tps_cloud,
    });
    if let Some(p) = &args.report {
        Report::new("estimate", inputs, results)?.emit(Some(p))?;
    }
    Ok(())
}

pub struct IntegrityArgs {
    pub pairs: usize,
    pub prompt_len: usize,
    pub target_len: usize,
    pub task_seed: u64,
    pub perturbations: usize,
    pub report: Option<PathBuf>,
}

pub fn ablate_integrity(cfg: &RunConfig, args: &IntegrityArgs) -> anyhow::Result<()> {
    let ic = IntegrityConfig {
        model: cfg.model()?,
        adapter: cfg.adapter()?,
        train: cfg.train_config(),
        n_pairs: args.pairs,
        prompt_len: args.prompt_len,
        target_len: args.target_len,
        task_seed: args.task_seed,
        n_perturbations: args.perturbations,
    };
    let r = run_integrity_experiment(&ic)?;
    println!("{:<10} {:>10} {:>10}", "row", "loss", "accuracy");
    println!("{:<10} {:>10.4} {:>10.4}", "untrained", r.untrained.loss, r.untrained.accuracy);
    println!("{:<10} {:>10.4} {:>10.4}", "matched", r.matched.loss, r.matched.accuracy);
    println!(
        "{:<10} {:>10.4} {:>10.4}  (sd {:.4} / {:.4} over {})",
        "perturbed",
        r.perturbed_mean_loss,
        r.perturbed_mean_accuracy,
        r.perturbed_sd_loss,
        r.perturbed_sd_accuracy,
        r.perturbed.len()
    );
    let inputs = json!({ "integrity": ic });
    Report::new("ablate-integrity", inputs, &r)?.emit(args.report.as_deref())?;
    Ok(())
}

pub fn verify_capture(path: &Path, report: Option<&Path>) -> anyhow::Result<bool> {
    let mut r = BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?);
    let frames = read_capture(&mut r)?;
    let v = verify_frames(&frames);
    println!("{} frames, {} violations", v.frames, v.violations.len());
    for line in &v.violations {
        println!("  {line}");
    }
    if let Some(p) = report {
        Report::new("verify-capture", json!({ "capture": path }), &v)?.emit(Some(p))?;
    }
    Ok(v.pass())
}
