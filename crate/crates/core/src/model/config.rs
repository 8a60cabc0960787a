use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

/// Architecture of the toy decoder-only transformer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub mlp_hidden: usize,
    pub vocab: usize,
    pub max_seq: usize,
    pub rope_base: f32,
    pub seed: u64,
}

impl ModelConfig {
    /// A config with `mlp_hidden = 4d`, `max_seq = 64` and the usual rotary base.
    pub fn toy(d: usize, n_layers: usize, n_heads: usize, vocab: usize, seed: u64) -> Self {
        ModelConfig {
            d,
            n_layers,
            n_heads,
            mlp_hidden: 4 * d,
            vocab,
            max_seq: 64,
            rope_base: 10_000.0,
            seed,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("d", self.d),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("mlp_hidden", self.mlp_hidden),
            ("vocab", self.vocab),
            ("max_seq", self.max_seq),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be >= 1")));
            }
        }
        if self.d % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d={} is not divisible by n_heads={}",
                self.d, self.n_heads
            )));
        }
        // rotary encoding rotates coordinate pairs within a head
        if self.head_dim() % 2 != 0 {
            return Err(Error::Config(format!(
                "head dimension {} must be even",
                self.head_dim()
            )));
        }
        if !(self.rope_base.is_finite() && self.rope_base > 1.0) {
            return Err(Error::Config("rope_base must be finite and > 1".into()));
        }
        if self.vocab > u32::MAX as usize {
            return Err(Error::Config("vocab too large".into()));
        }
        Ok(())
    }
}
