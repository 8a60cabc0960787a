//! Split device/cloud transformer runtime built on low-rank residual transmission.
//!
//! The cloud holds the frozen decoder stack together with frozen random low-rank
//! encoder/decoder matrices `A` and `B`; the device holds the tied embedding /
//! LM head and the private trainable matrices `M`. Only `r`-dimensional
//! activations and their gradients cross the network.
//!
//! * [`model`]: numerical kernels and the monolithic reference model
//! * [`adapters`]: the `A·M·B` triplets, ports and private checkpoints
//! * [`wire`]: frame format, transports and traffic accounting
//! * [`runtime`]: device and cloud nodes, sessions, training
//! * [`perf`]: closed-form memory, FLOPs, latency and throughput model

pub mod adapters;
pub mod error;
pub mod model;
pub mod perf;
pub mod rng;
pub mod runtime;
pub mod tensor;
pub mod wire;

pub use error::{Error, Result};
pub use tensor::Matrix;
