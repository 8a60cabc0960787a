//! Closed-form model of device memory, device FLOPs, per-token network time and
//! throughput for the split deployment and its baselines.
//!
//! Units: bytes, bits, seconds, bits per second, tokens per second. A megabyte
//! is 10⁶ bytes and a kilobit 10³ bits.

mod presets;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use presets::{builtin_presets, parse_preset, preset, ModelPreset};

pub const MEGABYTE: f64 = 1e6;
pub const KILOBIT: f64 = 1e3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HardwareSpec {
    /// operations per second
    pub flops: f64,
    /// bytes per second
    pub mem_bw: f64,
}

impl HardwareSpec {
    pub fn device_default() -> Self {
        HardwareSpec {
            flops: 15.8e12,
            mem_bw: 42.7e9,
        }
    }

    pub fn cloud_default() -> Self {
        HardwareSpec {
            flops: 312e12,
            mem_bw: 1935e9,
        }
    }

    /// Single-token roofline throughput for a stage touching `params` weights
    /// stored at `bytes_per_param`.
    pub fn roofline_tps(&self, params: f64, bytes_per_param: f64) -> f64 {
        let t = (2.0 * params / self.flops).max(params * bytes_per_param / self.mem_bw);
        if t > 0.0 {
            1.0 / t
        } else {
            f64::INFINITY
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    /// device → cloud bits per second
    pub b_d2c: f64,
    /// cloud → device bits per second
    pub b_c2d: f64,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        NetworkSpec {
            b_d2c: 60e6,
            b_c2d: 100e6,
        }
    }
}

impl NetworkSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.b_d2c > 0.0 && self.b_c2d > 0.0) {
            return Err(Error::Config("network bandwidths must be positive".into()));
        }
        Ok(())
    }

    pub fn scaled(&self, factor: f64) -> Self {
        NetworkSpec {
            b_d2c: self.b_d2c * factor,
            b_c2d: self.b_c2d * factor,
        }
    }
}

/// Adapter geometry as seen by the analytical model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LrrtConfig {
    pub r_c2d: u64,
    pub r_d2c: u64,
    /// number of adapted layers N′
    pub n_adapted: u64,
}

impl LrrtConfig {
    pub fn new(r_c2d: u64, r_d2c: u64, n_adapted: u64) -> Self {
        LrrtConfig { r_c2d, r_d2c, n_adapted }
    }

    pub fn uniform(r: u64, n_adapted: u64) -> Self {
        LrrtConfig::new(r, r, n_adapted)
    }

    /// Rank `r` on every layer of `preset`.
    pub fn all_layers(preset: &ModelPreset, r: u64) -> Self {
        LrrtConfig::uniform(r, preset.n_layers)
    }

    pub fn device_params(&self) -> u64 {
        self.n_adapted * 3 * self.r_c2d * self.r_d2c
    }

    pub fn cloud_params(&self, d: u64) -> u64 {
        self.n_adapted * (d * self.r_c2d + 3 * self.r_d2c * d)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeviceMode {
    /// The whole model quantized to `bits` on the device.
    FullDevice { bits: u32 },
    /// Tied embedding plus `M`, 16-bit parameters.
    Split,
}

impl DeviceMode {
    pub fn label(&self) -> String {
        match self {
            DeviceMode::FullDevice { .. } => "full_device".into(),
            DeviceMode::Split => "split".into(),
        }
    }

    pub fn bits(&self) -> u32 {
        match self {
            DeviceMode::FullDevice { bits } => *bits,
            DeviceMode::Split => 16,
        }
    }
}

/// Which hidden states `T^TokenEmb` bills per token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbPolicy {
    /// Token embeddings up only.
    #[default]
    UpOnly,
    /// Token embeddings up and the final hidden state down.
    UpAndDown,
}

impl std::str::FromStr for EmbPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "up_only" => Ok(EmbPolicy::UpOnly),
            "up_and_down" => Ok(EmbPolicy::UpAndDown),
            _ => Err(Error::Config(format!("unknown emb_policy `{s}` (up_only | up_and_down)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrafficPhase {
    Forward,
    Train { embedding_grad: bool },
}

/// Parameters resident on the device in `mode`.
pub fn device_params(preset: &ModelPreset, lrrt: &LrrtConfig, mode: DeviceMode) -> f64 {
    match mode {
        DeviceMode::FullDevice { .. } => preset.p_quantizable,
        DeviceMode::Split => (preset.p_device_embed() + lrrt.device_params()) as f64,
    }
}

pub fn device_memory_bytes(preset: &ModelPreset, lrrt: &LrrtConfig, mode: DeviceMode) -> f64 {
    device_params(preset, lrrt, mode) * mode.bits() as f64 / 8.0
}

/// Roughly two operations per resident parameter.
pub fn device_flops_per_token(preset: &ModelPreset, lrrt: &LrrtConfig, mode: DeviceMode) -> f64 {
    2.0 * device_params(preset, lrrt, mode)
}

/// Payload bits per token as `(d2c, c2d)`.
pub fn comm_bits_per_token(d: u64, lrrt: &LrrtConfig, wire_bits: u64, phase: TrafficPhase) -> (u64, u64) {
    let n = lrrt.n_adapted;
    let mut d2c = wire_bits * (n * 3 * lrrt.r_d2c + d);
    let mut c2d = wire_bits * (n * lrrt.r_c2d + d);
    if let TrafficPhase::Train { embedding_grad } = phase {
        d2c += wire_bits * (n * lrrt.r_c2d + d);
        c2d += wire_bits * (n * 3 * lrrt.r_d2c + if embedding_grad { d } else { 0 });
    }
    (d2c, c2d)
}

/// Adapted-layer payload bits per token, both directions, no embedding terms.
pub fn layer_bits_per_token(lrrt: &LrrtConfig, wire_bits: u64) -> u64 {
    wire_bits * lrrt.n_adapted * (3 * lrrt.r_d2c + lrrt.r_c2d)
}

/// Fraction of per-layer traffic saved by sending rank-`r` instead of
/// `d`-dimensional activations.
pub fn reduction_ratio(r: u64, d: u64) -> f64 {
    1.0 - r as f64 / d as f64
}

/// Itemized per-token forward network time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverheadReport {
    pub layer_d2c_s: f64,
    pub layer_c2d_s: f64,
    pub emb_up_s: f64,
    pub emb_down_s: f64,
    pub total_s: f64,
}

fn forward_items(net: &NetworkSpec, d: u64, lrrt: &LrrtConfig, wire_bits: u64, policy: EmbPolicy) -> OverheadReport {
    let wb = wire_bits as f64;
    let n = lrrt.n_adapted as f64;
    let layer_d2c_s = wb * n * 3.0 * lrrt.r_d2c as f64 / net.b_d2c;
    let layer_c2d_s = wb * n * lrrt.r_c2d as f64 / net.b_c2d;
    let emb_up_s = wb * d as f64 / net.b_d2c;
    let emb_down_s = match policy {
        EmbPolicy::UpOnly => 0.0,
        EmbPolicy::UpAndDown => wb * d as f64 / net.b_c2d,
    };
    OverheadReport {
        layer_d2c_s,
        layer_c2d_s,
        emb_up_s,
        emb_down_s,
        total_s: layer_d2c_s + layer_c2d_s + emb_up_s + emb_down_s,
    }
}

/// Per-token forward transmission time `t`.
pub fn unit_comm_time(net: &NetworkSpec, d: u64, lrrt: &LrrtConfig, wire_bits: u64, policy: EmbPolicy) -> f64 {
    forward_items(net, d, lrrt, wire_bits, policy).total_s
}

/// Per-token gradient transmission time `t′`: the forward exchange mirrored,
/// so the `3·r_d2c` bulk rides the C2D link, plus the last-hidden gradient
/// going up and, when the embedding trains, the embedding gradient coming down.
pub fn unit_grad_time(net: &NetworkSpec, d: u64, lrrt: &LrrtConfig, wire_bits: u64, embedding_grad: bool) -> f64 {
    let wb = wire_bits as f64;
    let n = lrrt.n_adapted as f64;
    let layers = wb * n * (3.0 * lrrt.r_d2c as f64 / net.b_c2d + lrrt.r_c2d as f64 / net.b_d2c);
    let hidden = wb * d as f64 / net.b_d2c;
    let emb = if embedding_grad { wb * d as f64 / net.b_c2d } else { 0.0 };
    layers + hidden + emb
}

pub fn overhead_decomposition(
    preset: &ModelPreset,
    lrrt: &LrrtConfig,
    net: &NetworkSpec,
    wire_bits: u64,
    policy: EmbPolicy,
) -> OverheadReport {
    forward_items(net, preset.d, lrrt, wire_bits, policy)
}

/// Stage throughputs in tokens per second; `f64::INFINITY` removes a stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThroughputInputs {
    pub tps_decoder_cloud: f64,
    pub tps_lrrt_device: f64,
    pub tps_lrrt_cloud: f64,
    pub tps_lmhead_device: f64,
}

impl ThroughputInputs {
    /// Combined throughput of the adapter work on both nodes.
    pub fn tps_lrrt(&self) -> f64 {
        1.0 / (1.0 / self.tps_lrrt_device + 1.0 / self.tps_lrrt_cloud)
    }

    fn compute_time(&self) -> f64 {
        1.0 / self.tps_decoder_cloud + 1.0 / self.tps_lrrt_device + 1.0 / self.tps_lrrt_cloud + 1.0 / self.tps_lmhead_device
    }
}

pub fn infer_tps(inputs: &ThroughputInputs, t: f64) -> f64 {
    1.0 / (inputs.compute_time() + t)
}

pub fn train_tps(inputs: &ThroughputInputs, t: f64, t_prime: f64) -> f64 {
    1.0 / (inputs.compute_time() + t + t_prime)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerBudget {
    pub layers: u64,
    /// network time per token left after the cloud's own decode time
    pub t_budget_s: f64,
    pub diagnostic: Option<String>,
}

/// Most layers plain LoRA on a split deployment can adapt (q, k, v sharing one
/// `d`-dimensional download, three `d`-dimensional uploads) while keeping
/// `target_fraction` of the cloud-only decode speed. Device compute is ignored.
pub fn lora_layer_budget(
    target_fraction: f64,
    tps_cloud: f64,
    net: &NetworkSpec,
    d: u64,
    wire_bits: u64,
    policy: EmbPolicy,
) -> Result<LayerBudget> {
    if !(target_fraction > 0.0 && target_fraction <= 1.0) || !(tps_cloud > 0.0) {
        return Err(Error::Config("target fraction must be in (0, 1] and cloud throughput positive".into()));
    }
    net.validate()?;
    let t_budget_s = 1.0 / (target_fraction * tps_cloud) - 1.0 / tps_cloud;
    let fits = |n: u64| {
        let t = unit_comm_time(net, d, &LrrtConfig::uniform(d, n), wire_bits, policy);
        1.0 / (1.0 / tps_cloud + t) >= target_fraction * tps_cloud
    };
    if !fits(0) {
        return Ok(LayerBudget {
            layers: 0,
            t_budget_s,
            diagnostic: Some(format!(
                "token embedding transfer alone exceeds the {:.3} ms budget; no layer can be adapted",
                t_budget_s * 1e3
            )),
        });
    }
    let mut layers = 0;
    while fits(layers + 1) {
        layers += 1;
    }
    let diagnostic = (layers == 0).then(|| "budget admits no adapted layer".to_string());
    Ok(LayerBudget {
        layers,
        t_budget_s,
        diagnostic,
    })
}

/// Speed-weighted improvement `TPS / TPS_C · (M − M_NT)`.
pub fn m_s_score(tps: f64, tps_cloud: f64, avg_score: f64, no_tuning_score: f64) -> Result<f64> {
    if !(tps_cloud > 0.0) {
        return Err(Error::Config("cloud throughput must be positive".into()));
    }
    Ok(tps / tps_cloud * (avg_score - no_tuning_score))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamFractions {
    /// `A` and `B` relative to the base model
    pub cloud_adapter: f64,
    /// `M` relative to the base model
    pub device_adapter: f64,
}

pub fn adapter_param_fractions(preset: &ModelPreset, lrrt: &LrrtConfig) -> ParamFractions {
    ParamFractions {
        cloud_adapter: lrrt.cloud_params(preset.d) as f64 / preset.p_total,
        device_adapter: lrrt.device_params() as f64 / preset.p_total,
    }
}

/// One row of an estimate table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateRow {
    pub preset: String,
    pub mode: String,
    pub bits: u32,
    pub memory_mb: f64,
    pub flops_g: f64,
    pub t_ms: Option<f64>,
    pub tprime_ms: Option<f64>,
    pub tps: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateConfig {
    pub r_c2d: u64,
    pub r_d2c: u64,
    /// adapted layers; `None` adapts every layer
    pub n_adapted: Option<u64>,
    pub wire_bits: u64,
    pub network: NetworkSpec,
    pub emb_policy: EmbPolicy,
    pub full_device_bits: Vec<u32>,
    pub device: HardwareSpec,
    pub cloud: HardwareSpec,
}

impl Default for EstimateConfig {
    fn default() -> Self {
        EstimateConfig {
            r_c2d: 128,
            r_d2c: 128,
            n_adapted: None,
            wire_bits: 16,
            network: NetworkSpec::default(),
            emb_policy: EmbPolicy::UpOnly,
            full_device_bits: vec![3, 4],
            device: HardwareSpec::device_default(),
            cloud: HardwareSpec::cloud_default(),
        }
    }
}

/// Stage throughputs for `preset`: the calibrated cloud decode speed, the
/// remaining stages from 16-bit roofline estimates.
pub fn throughput_inputs(preset: &ModelPreset, lrrt: &LrrtConfig, ec: &EstimateConfig) -> Option<ThroughputInputs> {
    let tps_decoder_cloud = preset.tps_decoder_cloud?;
    Some(ThroughputInputs {
        tps_decoder_cloud,
        tps_lrrt_device: ec.device.roofline_tps(lrrt.device_params() as f64, 2.0),
        tps_lrrt_cloud: ec.cloud.roofline_tps(lrrt.cloud_params(preset.d) as f64, 2.0),
        tps_lmhead_device: ec.device.roofline_tps(preset.p_device_embed() as f64, 2.0),
    })
}

pub fn estimate_rows(presets: &[ModelPreset], ec: &EstimateConfig) -> Result<Vec<EstimateRow>> {
    ec.network.validate()?;
    let mut rows = Vec::new();
    for p in presets {
        let lrrt = LrrtConfig::new(ec.r_c2d, ec.r_d2c, ec.n_adapted.unwrap_or(p.n_layers));
        if lrrt.n_adapted > p.n_layers {
            return Err(Error::Config(format!("{}: {} adapted layers > {}", p.name, lrrt.n_adapted, p.n_layers)));
        }
        for &bits in &ec.full_device_bits {
            let mode = DeviceMode::FullDevice { bits };
            rows.push(EstimateRow {
                preset: p.name.clone(),
                mode: mode.label(),
                bits,
                memory_mb: device_memory_bytes(p, &lrrt, mode) / MEGABYTE,
                flops_g: device_flops_per_token(p, &lrrt, mode) / 1e9,
                t_ms: None,
                tprime_ms: None,
                tps: None,
            });
        }
        {
            let mode = DeviceMode::Split;
            let t = unit_comm_time(&ec.network, p.d, &lrrt, ec.wire_bits, ec.emb_policy);
            let t_prime = unit_grad_time(&ec.network, p.d, &lrrt, ec.wire_bits, false);
            rows.push(EstimateRow {
                preset: p.name.clone(),
                mode: mode.label(),
                bits: mode.bits(),
                memory_mb: device_memory_bytes(p, &lrrt, mode) / MEGABYTE,
                flops_g: device_flops_per_token(p, &lrrt, mode) / 1e9,
                t_ms: Some(t * 1e3),
                tprime_ms: Some(t_prime * 1e3),
                tps: throughput_inputs(p, &lrrt, ec).map(|i| infer_tps(&i, t)),
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tps_arithmetic_example() {
        let inputs = ThroughputInputs {
            tps_decoder_cloud: 100.0,
            tps_lrrt_device: 2000.0,
            tps_lrrt_cloud: 2000.0,
            tps_lmhead_device: 500.0,
        };
        assert!((inputs.tps_lrrt() - 1000.0).abs() < 1e-9);
        assert!((infer_tps(&inputs, 7e-3) - 50.0).abs() < 1e-9);
    }

    #[test]
    fn emb_policy_parses() {
        assert_eq!("up_only".parse::<EmbPolicy>().unwrap(), EmbPolicy::UpOnly);
        assert!("both".parse::<EmbPolicy>().is_err());
    }
}
