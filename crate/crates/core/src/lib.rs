//! Feasibility, training-time and hardware-cost planning for pre-training
//! models on small GPU clusters.
//!
//! The planner predicts how long a model takes to train on a given machine,
//! searches efficient-training configurations (compilation, custom kernels,
//! TF32, activation checkpointing, sharding, offloading) for the fastest one
//! that fits in memory, and turns training days into hardware cost.

pub mod analytic;
pub mod calibrate;
pub mod catalog;
pub mod cost;
pub mod error;
pub mod memory;
pub mod params;
pub mod record;
pub mod report;
pub mod search;
pub mod spec;
pub mod steptime;
pub mod validate;

pub use catalog::Catalog;
pub use error::{Error, Result};
pub use params::PerfParams;
pub use record::MeasurementRecord;
pub use report::{CellKey, CellValue, GridLabel, ResultGrid};
pub use search::{optimize, SearchOutcome};
pub use spec::{Family, GpuSpec, MachineSpec, ModelSpec, Precision, Sharding, TrainConfig};
