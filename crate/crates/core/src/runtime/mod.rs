//! Device and cloud nodes running one adapted model cooperatively.
//!
//! Per forward pass the device uploads token embeddings; for each adapted
//! layer the cloud sends `x·A` down and the device answers with `x·A·M` for q,
//! k and v; the cloud finally returns the last hidden state. Training mirrors
//! this: gradients at the `B` inputs travel down, gradients at the `A` outputs
//! travel up, and the optimizer runs on the device.

mod channel;
mod cloud;
mod dataset;
mod device;
mod optim;
mod plan;
mod trainer;

use std::sync::Arc;
use std::thread::JoinHandle;

pub use channel::{config_digest, PROTOCOL_VERSION};
pub use cloud::{CloudNode, SessionSummary};
pub use dataset::{format_dataset, parse_dataset};
pub use device::DeviceNode;
pub use optim::{adamw_step, linear_warmup_schedule, AdamState, AdamWConfig, DeviceOptimizer};
pub use plan::PartitionPlan;
pub use trainer::{
    memorization_examples, run_integrity_experiment, train_monolithic, EvalPoint, IntegrityConfig, IntegrityReport,
    TrainConfig,
};

use crate::error::Result;
use crate::wire::{loopback_pair, LoopbackTransport};

/// Serves one session on a background thread and returns the device end.
pub fn spawn_loopback_session(cloud: Arc<CloudNode>) -> (LoopbackTransport, JoinHandle<Result<SessionSummary>>) {
    let (device_end, cloud_end) = loopback_pair();
    let handle = std::thread::spawn(move || cloud.serve_session(cloud_end));
    (device_end, handle)
}
