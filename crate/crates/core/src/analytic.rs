//! Idealized training-time inference from total FLOPs and peak throughput.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spec::{MachineSpec, ModelSpec};

pub const SECONDS_PER_DAY: f64 = 86_400.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnalyticEstimate {
    pub total_flops: f64,
    /// FLOPs/sec summed over all GPUs.
    pub aggregate_throughput: f64,
    pub days: f64,
}

/// Tokens seen over the whole run: batch x sequence length x steps.
pub fn tokens_processed(model: &ModelSpec) -> Result<f64> {
    if !model.is_token_model() {
        return Err(Error::NotATokenModel(model.id.clone()));
    }
    Ok(model.global_batch_size as f64 * model.seq_len as f64 * model.training_steps as f64)
}

/// Forward (2PT) plus backward (4PT) matmul FLOPs of a token model.
pub fn six_pt_flops(model: &ModelSpec) -> Result<f64> {
    Ok(6.0 * model.param_count as f64 * tokens_processed(model)?)
}

/// Total training FLOPs: the reported total when the catalog carries one,
/// otherwise 6PT for token models.
pub fn training_flops(model: &ModelSpec) -> Result<f64> {
    if let Some(f) = model.total_training_flops_override {
        return Ok(f);
    }
    match six_pt_flops(model) {
        Ok(f) => Ok(f),
        Err(Error::NotATokenModel(id)) => Err(Error::NoEstimatorAvailable(id)),
        Err(e) => Err(e),
    }
}

/// Training FLOPs attributed to one sample of one step.
pub fn flops_per_sample(model: &ModelSpec) -> Result<f64> {
    Ok(training_flops(model)? / (model.training_steps as f64 * model.global_batch_size as f64))
}

/// FLOPs of one training sample as the step-time model counts them:
/// `6 * P * seq_len` for token models, otherwise the total spread evenly over
/// samples.
pub fn sample_flops(model: &ModelSpec) -> Result<f64> {
    if model.is_token_model() {
        return Ok(6.0 * model.param_count as f64 * model.seq_len as f64);
    }
    flops_per_sample(model)
}

/// Days at 100% utilization of every GPU's 16-bit peak.
pub fn analytic_days(model: &ModelSpec, machine: &MachineSpec) -> Result<AnalyticEstimate> {
    let total_flops = training_flops(model)?;
    let aggregate_throughput = machine.aggregate_peak_flops();
    Ok(AnalyticEstimate {
        total_flops,
        aggregate_throughput,
        days: total_flops / aggregate_throughput / SECONDS_PER_DAY,
    })
}
