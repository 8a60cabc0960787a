//! Run configuration: UTF-8 `section.key = value` lines with `#` comments.
//! Values may be bare (`wire.transport = tcp`) or TOML literals
//! (`adapter.adapted_layers = [0, 1]`).

use std::path::Path;

use anyhow::Context;
use plrr_core::adapters::AdapterConfig;
use plrr_core::model::ModelConfig;
use plrr_core::perf::{EmbPolicy, NetworkSpec};
use plrr_core::runtime::TrainConfig;
use plrr_core::wire::WireDType;
use plrr_core::{Error, Result};
use serde::{Deserialize, Serialize};

macro_rules! default_config {
    () => {
        "\
model.d = 64
model.n_layers = 2
model.n_heads = 4
model.mlp_hidden = 256
model.vocab = 256
model.max_seq = 64
model.seed = 2024
adapter.r_c2d = 32
adapter.r_d2c = 32
adapter.scale = 1.0
adapter.adapted_layers = all
adapter.trainable_a = false
adapter.trainable_b = false
adapter.trainable_embedding = false
adapter.seed = 7
wire.dtype_bits = 32
wire.transport = loopback
wire.listen_addr = 127.0.0.1:7878
wire.connect_addr = 127.0.0.1:7878
train.lr = 0.03
train.steps = 300
train.warmup_ratio = 0.1
train.batch_size = 32
train.seq_len = 0
perf.preset = llama7
perf.emb_policy = up_only
perf.network.b_d2c = 60000000
perf.network.b_c2d = 100000000
"
    };
}
pub(crate) use default_config;

#[cfg(test)]
pub const DEFAULT_CONFIG: &str = default_config!();

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub d: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub mlp_hidden: usize,
    pub vocab: usize,
    pub max_seq: usize,
    pub seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            d: 64,
            n_layers: 2,
            n_heads: 4,
            mlp_hidden: 256,
            vocab: 256,
            max_seq: 64,
            seed: 2024,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LayerSelection {
    /// `all`
    Named(String),
    List(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterSection {
    pub r_c2d: usize,
    pub r_d2c: usize,
    pub scale: f32,
    pub adapted_layers: LayerSelection,
    pub trainable_a: bool,
    pub trainable_b: bool,
    pub trainable_embedding: bool,
    pub seed: u64,
}

impl Default for AdapterSection {
    fn default() -> Self {
        AdapterSection {
            r_c2d: 32,
            r_d2c: 32,
            scale: 1.0,
            adapted_layers: LayerSelection::Named("all".into()),
            trainable_a: false,
            trainable_b: false,
            trainable_embedding: false,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransportKind {
    Loopback,
    Tcp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WireSection {
    pub dtype_bits: u32,
    pub transport: TransportKind,
    pub listen_addr: String,
    pub connect_addr: String,
}

impl Default for WireSection {
    fn default() -> Self {
        WireSection {
            dtype_bits: 32,
            transport: TransportKind::Loopback,
            listen_addr: "127.0.0.1:7878".into(),
            connect_addr: "127.0.0.1:7878".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub lr: f32,
    pub steps: usize,
    pub warmup_ratio: f32,
    pub batch_size: usize,
    /// padded input length; 0 fits the longest example
    pub seq_len: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            lr: 0.03,
            steps: 300,
            warmup_ratio: 0.1,
            batch_size: 32,
            seq_len: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PerfSection {
    pub preset: String,
    pub emb_policy: EmbPolicy,
    pub network: NetworkSpec,
}

impl Default for PerfSection {
    fn default() -> Self {
        PerfSection {
            preset: "llama7".into(),
            emb_policy: EmbPolicy::UpOnly,
            network: NetworkSpec::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelSection,
    pub adapter: AdapterSection,
    pub wire: WireSection,
    pub train: TrainSection,
    pub perf: PerfSection,
}

fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut root = toml::Table::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `section.key = value`", i + 1)))?;
            let path: Vec<&str> = key.trim().split('.').map(str::trim).collect();
            if path.len() < 2 || path.iter().any(|p| p.is_empty()) {
                return Err(Error::Config(format!("line {}: key `{}` needs a section", i + 1, key.trim())));
            }
            let mut table = &mut root;
            for part in &path[..path.len() - 1] {
                let entry = table
                    .entry(part.to_string())
                    .or_insert_with(|| toml::Value::Table(toml::Table::new()));
                table = entry
                    .as_table_mut()
                    .ok_or_else(|| Error::Config(format!("line {}: `{part}` is not a section", i + 1)))?;
            }
            let leaf = path[path.len() - 1].to_string();
            if table.insert(leaf, parse_value(value.trim())).is_some() {
                return Err(Error::Config(format!("line {}: `{}` set twice", i + 1, key.trim())));
            }
        }
        let cfg: RunConfig = toml::Value::Table(root)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.model()?;
        cfg.adapter()?;
        cfg.dtype()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                Ok(RunConfig::parse(&text)?)
            }
        }
    }

    pub fn model(&self) -> Result<ModelConfig> {
        let m = &self.model;
        let cfg = ModelConfig {
            d: m.d,
            n_layers: m.n_layers,
            n_heads: m.n_heads,
            mlp_hidden: m.mlp_hidden,
            vocab: m.vocab,
            max_seq: m.max_seq,
            rope_base: 10_000.0,
            seed: m.seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn adapter(&self) -> Result<AdapterConfig> {
        let a = &self.adapter;
        let layers = match &a.adapted_layers {
            LayerSelection::Named(s) if s == "all" => (0..self.model.n_layers).collect(),
            LayerSelection::Named(s) if s == "none" => Vec::new(),
            LayerSelection::Named(s) => {
                return Err(Error::Config(format!("adapter.adapted_layers: expected all, none or a list, got `{s}`")))
            }
            LayerSelection::List(l) => l.clone(),
        };
        let mut cfg = AdapterConfig::new(a.r_c2d, a.r_d2c, layers, a.seed);
        cfg.scale = a.scale;
        cfg.trainable_a = a.trainable_a;
        cfg.trainable_b = a.trainable_b;
        cfg.trainable_embedding = a.trainable_embedding;
        for w in cfg.validate(self.model.n_layers, self.model.d)? {
            log::warn!("{w}");
        }
        Ok(cfg)
    }

    pub fn dtype(&self) -> Result<WireDType> {
        WireDType::from_bits(self.wire.dtype_bits)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.train.lr,
            steps: self.train.steps,
            warmup_ratio: self.train.warmup_ratio,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn documented_defaults_are_the_defaults() {
        assert_eq!(RunConfig::parse(DEFAULT_CONFIG).unwrap(), RunConfig::default());
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
    }

    #[test]
    fn bare_and_literal_values() {
        let c = RunConfig::parse("wire.transport = tcp\nadapter.adapted_layers = [1]  # one\nmodel.n_layers = 3\n").unwrap();
        assert_eq!(c.wire.transport, TransportKind::Tcp);
        assert_eq!(c.adapter().unwrap().adapted_layers, vec![1]);
        let c = RunConfig::parse("wire.transport = \"tcp\"\nperf.emb_policy = up_and_down\n").unwrap();
        assert_eq!(c.wire.transport, TransportKind::Tcp);
        assert_eq!(c.perf.emb_policy, EmbPolicy::UpAndDown);
    }

    #[test]
    fn rejects_unknown_and_malformed_keys() {
        assert!(RunConfig::parse("model.width = 3").is_err());
        assert!(RunConfig::parse("colour.x = 3").is_err());
        assert!(RunConfig::parse("d = 3").is_err());
        assert!(RunConfig::parse("model.d 3").is_err());
        assert!(RunConfig::parse("model.d = 3\nmodel.d = 4").is_err());
        assert!(RunConfig::parse("wire.dtype_bits = 8").is_err());
        assert!(RunConfig::parse("model.d = 30").is_err());
        assert!(RunConfig::parse("adapter.adapted_layers = some").is_err());
    }
}
