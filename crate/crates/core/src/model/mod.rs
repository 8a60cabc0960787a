//! Minimal decoder-only transformer with a hand-written backward pass.

mod batch;
mod config;
mod decoder;
mod head;
mod kv;
mod monolithic;
pub mod ops;
mod weights;

pub use batch::{Example, TrainingBatch};
pub use config::{ModelConfig, TokenId};
pub use decoder::{decoder_backward, decoder_forward, decoder_forward_train, DecoderGrads, DecoderStash};
pub use head::{
    embed, embed_backward, lm_head, lm_head_backward, lm_head_train, masked_cross_entropy, HeadStash,
};
pub use kv::KvCache;
pub use monolithic::{
    backward_full, evaluate, forward_monolithic, forward_train, generate_monolithic, loss_and_grads,
    ForwardStash, GradFlags, Gradients, MonolithicSession,
};
pub use weights::{init_layers, BaseWeights, HeadWeights, LayerWeights};
