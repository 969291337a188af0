//! Constraint checks for a (model, machine, config) triple.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::spec::{MachineSpec, ModelSpec, TrainConfig};

/// Machine-readable constraint violation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Violation {
    OffloadRequiresSharding,
    ShardingNoopOn1gpu,
    CompileWithZero,
    CompileUnsupported,
    CustomKernelsUnsupported,
    Tf32Unsupported,
    MicroBatchZero,
    BatchMismatch,
}

impl Violation {
    pub fn code(self) -> &'static str {
        match self {
            Violation::OffloadRequiresSharding => "offload-requires-sharding",
            Violation::ShardingNoopOn1gpu => "sharding-noop-on-1gpu",
            Violation::CompileWithZero => "compile-with-zero",
            Violation::CompileUnsupported => "compile-unsupported",
            Violation::CustomKernelsUnsupported => "custom-kernels-unsupported",
            Violation::Tf32Unsupported => "tf32-unsupported",
            Violation::MicroBatchZero => "micro-batch-zero",
            Violation::BatchMismatch => "batch-mismatch",
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

/// Every violated constraint, in a fixed order. Empty means valid.
pub fn validate(model: &ModelSpec, machine: &MachineSpec, config: &TrainConfig) -> Vec<Violation> {
    let mut out = validate_methods(model, machine, config);
    if config.micro_batch == 0 {
        out.push(Violation::MicroBatchZero);
    } else if config.micro_batch * config.grad_accum_steps * machine.n_gpus as u64
        != model.global_batch_size
    {
        out.push(Violation::BatchMismatch);
    }
    out
}

/// Like [`validate`] but ignores the micro-batch / accumulation fields.
pub fn validate_methods(
    model: &ModelSpec,
    machine: &MachineSpec,
    config: &TrainConfig,
) -> Vec<Violation> {
    let mut out = Vec::new();
    if config.offload && !config.sharding.is_enabled() {
        out.push(Violation::OffloadRequiresSharding);
    }
    if machine.n_gpus == 1 && config.sharding.is_enabled() && !config.offload {
        out.push(Violation::ShardingNoopOn1gpu);
    }
    if config.compile && config.sharding.is_zero() {
        out.push(Violation::CompileWithZero);
    }
    if config.compile && !model.supports_compile {
        out.push(Violation::CompileUnsupported);
    }
    if config.custom_kernels && !model.supports_custom_kernels {
        out.push(Violation::CustomKernelsUnsupported);
    }
    if config.tf32 && !machine.gpu.generation.supports_tf32() {
        out.push(Violation::Tf32Unsupported);
    }
    out
}
