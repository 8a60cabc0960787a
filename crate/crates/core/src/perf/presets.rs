use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape and parameter counts of a reference model. `p_quantizable` is what a
/// quantized device-only deployment stores; `tps_decoder_cloud` is a measured
/// cloud decode speed when one is known.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelPreset {
    pub name: String,
    pub d: u64,
    pub n_layers: u64,
    pub vocab: u64,
    pub p_total: f64,
    pub p_quantizable: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tps_decoder_cloud: Option<f64>,
}

impl ModelPreset {
    /// Parameters of the tied embedding / LM head.
    pub fn p_device_embed(&self) -> u64 {
        self.vocab * self.d
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.n_layers == 0 || self.vocab == 0 {
            return Err(Error::Config(format!("preset {}: dimensions must be positive", self.name)));
        }
        if !(self.p_quantizable > 0.0 && self.p_quantizable <= self.p_total) {
            return Err(Error::Config(format!("preset {}: need 0 < p_quantizable <= p_total", self.name)));
        }
        if matches!(self.tps_decoder_cloud, Some(t) if !(t > 0.0)) {
            return Err(Error::Config(format!("preset {}: tps_decoder_cloud must be positive", self.name)));
        }
        Ok(())
    }
}

fn make(name: &str, d: u64, n_layers: u64, p_total: f64, p_quantizable: f64, tps: Option<f64>) -> ModelPreset {
    ModelPreset {
        name: name.into(),
        d,
        n_layers,
        vocab: 32000,
        p_total,
        p_quantizable,
        tps_decoder_cloud: tps,
    }
}

pub fn builtin_presets() -> Vec<ModelPreset> {
    vec![
        make("small1b", 2048, 24, 1.3117e9, 1.3117e9, None),
        make("small3b", 2560, 32, 2.664e9, 2.664e9, None),
        make("llama7", 4096, 32, 6.738e9, 6.607e9, Some(37.2)),
        make("llama13", 5120, 40, 13.016e9, 12.852e9, Some(27.8)),
        make("llama30", 6656, 60, 32.529e9, 32.316e9, Some(16.7)),
    ]
}

pub fn preset(name: &str) -> Result<ModelPreset> {
    builtin_presets().into_iter().find(|p| p.name == name).ok_or_else(|| {
        let names: Vec<_> = builtin_presets().into_iter().map(|p| p.name).collect();
        Error::Config(format!("unknown preset `{name}` (known: {})", names.join(", ")))
    })
}

/// Reads a preset file: `key = value` lines, `#` comments.
pub fn parse_preset(text: &str) -> Result<ModelPreset> {
    let p: ModelPreset = toml::from_str(text).map_err(|e| Error::Config(format!("preset file: {e}")))?;
    p.validate()?;
    Ok(p)
}
