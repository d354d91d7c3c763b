//! Soft-prior diffusion bridge for paired source-to-target translation.
//!
//! The forward process mixes a target `x0` and a source `y` with a noise
//! variance that grows to `gamma` at the end-point, so the bridge ends at a
//! noise-added copy of the source. The reverse process starts from that
//! end-point and, at every step, refines a target estimate by feeding the
//! generator its own output until the estimate stops changing, then draws
//! the previous state from the analytic Gaussian posterior.

pub mod autodiff;
pub mod config;
pub mod data;
pub mod error;
pub mod forward;
pub mod io;
pub mod metrics;
pub mod nets;
pub mod parallel;
pub mod posterior;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod tensor;
pub mod training;
pub mod verify;

pub use config::{ExperimentConfig, TrainConfig};
pub use error::{Error, Result};
pub use rng::Noise;
pub use schedule::{build_schedule, ScheduleConfig, ScheduleTable, Variant};
pub use tensor::{Tensor, TensorBatch};
