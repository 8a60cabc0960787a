use crate::error::Result;
use crate::rng::normal_matrix;
use crate::tensor::Matrix;

use super::config::ModelConfig;

const EMBEDDING_STD: f32 = 1.0;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    /// d × mlp_hidden
    pub w1: Matrix,
    /// mlp_hidden × d
    pub w2: Matrix,
    pub norm1: Vec<f32>,
    pub norm2: Vec<f32>,
}

/// The part of the base model that lives on the device: the token embedding,
/// which doubles as the LM-head projection, and the final norm feeding it.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadWeights {
    /// vocab × d
    pub embedding: Matrix,
    pub final_norm: Vec<f32>,
}

impl HeadWeights {
    pub fn init(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(HeadWeights {
            embedding: normal_matrix(cfg.seed, "embedding", cfg.vocab, cfg.d, EMBEDDING_STD),
            final_norm: vec![1.0; cfg.d],
        })
    }

    pub fn d(&self) -> usize {
        self.embedding.cols()
    }

    pub fn vocab(&self) -> usize {
        self.embedding.rows()
    }
}

/// Decoder-stack weights only; this is what the cloud node materializes.
pub fn init_layers(cfg: &ModelConfig) -> Result<Vec<LayerWeights>> {
    cfg.validate()?;
    let d = cfg.d;
    let h = cfg.mlp_hidden;
    let seed = cfg.seed;
    let std_d = 1.0 / (d as f32).sqrt();
    let std_h = 1.0 / (h as f32).sqrt();
    Ok((0..cfg.n_layers)
        .map(|l| LayerWeights {
            wq: normal_matrix(seed, &format!("layers.{l}.wq"), d, d, std_d),
            wk: normal_matrix(seed, &format!("layers.{l}.wk"), d, d, std_d),
            wv: normal_matrix(seed, &format!("layers.{l}.wv"), d, d, std_d),
            wo: normal_matrix(seed, &format!("layers.{l}.wo"), d, d, std_d),
            w1: normal_matrix(seed, &format!("layers.{l}.w1"), d, h, std_d),
            w2: normal_matrix(seed, &format!("layers.{l}.w2"), h, d, std_h),
            norm1: vec![1.0; d],
            norm2: vec![1.0; d],
        })
        .collect())
}

/// Frozen base parameters of the whole model.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseWeights {
    pub head: HeadWeights,
    pub layers: Vec<LayerWeights>,
}

impl BaseWeights {
    pub fn init(cfg: &ModelConfig) -> Result<Self> {
        Ok(BaseWeights {
            head: HeadWeights::init(cfg)?,
            layers: init_layers(cfg)?,
        })
    }

    pub fn d(&self) -> usize {
        self.head.d()
    }

    pub fn vocab(&self) -> usize {
        self.head.vocab()
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_and_split_init_agree() {
        let cfg = ModelConfig::toy(16, 2, 2, 32, 7);
        let w = BaseWeights::init(&cfg).unwrap();
        assert_eq!(w.head.embedding.shape(), (32, 16));
        assert_eq!(w.layers[1].w1.shape(), (16, 64));
        assert_eq!(w.layers[1].w2.shape(), (64, 16));
        // the two nodes build their halves independently and must agree
        assert_eq!(HeadWeights::init(&cfg).unwrap(), w.head);
        assert_eq!(init_layers(&cfg).unwrap(), w.layers);
    }
}
