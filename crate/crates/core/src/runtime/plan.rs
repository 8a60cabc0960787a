use serde::{Deserialize, Serialize};

use crate::adapters::{AdapterConfig, Proj};
use crate::model::ModelConfig;

/// Which tensors live on which node.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionPlan {
    pub device: Vec<String>,
    pub cloud: Vec<String>,
    pub device_params: usize,
    pub cloud_params: usize,
}

impl PartitionPlan {
    pub fn new(cfg: &ModelConfig, acfg: &AdapterConfig) -> Self {
        let d = cfg.d;
        let mut device = vec!["embedding".to_string(), "final_norm".to_string()];
        let mut cloud = Vec::new();
        for l in 0..cfg.n_layers {
            for n in ["wq", "wk", "wv", "wo", "w1", "w2", "norm1", "norm2"] {
                cloud.push(format!("layers.{l}.{n}"));
            }
        }
        for &l in &acfg.adapted_layers {
            cloud.push(format!("adapter.{l}.a"));
            for p in Proj::ALL {
                cloud.push(format!("adapter.{l}.b.{}", p.name()));
                device.push(format!("adapter.{l}.m.{}", p.name()));
            }
        }
        device.push("optimizer".to_string());
        cloud.push("kv_cache".to_string());
        let per_layer = 4 * d * d + 2 * d * cfg.mlp_hidden + 2 * d;
        PartitionPlan {
            device_params: cfg.vocab * d + d + acfg.device_param_count(),
            cloud_params: cfg.n_layers * per_layer + acfg.cloud_param_count(d),
            device,
            cloud,
        }
    }
}
