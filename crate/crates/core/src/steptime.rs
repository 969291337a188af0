//! Step-time model: micro-batch passes, communication and the optimizer
//! update, extrapolated linearly over the run.

use serde::{Deserialize, Serialize};

use crate::analytic::{sample_flops, SECONDS_PER_DAY};
use crate::error::{Error, Result};
use crate::memory::{self, model_state_bytes};
use crate::params::PerfParams;
use crate::spec::{MachineSpec, ModelSpec, Precision, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepEstimate {
    /// One forward/backward pass at the micro-batch size.
    pub pass_seconds: f64,
    pub update_seconds: f64,
    /// Communication per optimizer step.
    pub comm_seconds: f64,
    /// `grad_accum_steps * pass + update + comm`.
    pub step_seconds: f64,
    pub days: f64,
}

/// Throughput saturation in per-GPU micro-batch tokens.
pub fn saturation(tokens: f64, halfsat_tokens: f64) -> f64 {
    if halfsat_tokens <= 0.0 {
        return 1.0;
    }
    tokens / (tokens + halfsat_tokens)
}

/// Product of the enabled free-lunch multipliers.
pub fn free_lunch_multiplier(model: &ModelSpec, config: &TrainConfig, params: &PerfParams) -> f64 {
    let mut m = 1.0;
    if config.compile {
        m *= params.mult_compile;
    }
    if config.custom_kernels {
        m *= params.mult_kernels;
    }
    if config.tf32 && model.precision == Precision::Fp32 {
        m *= params.mult_tf32;
    }
    m
}

/// FLOPs of one forward/backward pass, including recomputation.
pub fn pass_flops(model: &ModelSpec, config: &TrainConfig, params: &PerfParams) -> Result<f64> {
    let mut flops = sample_flops(model)? * config.micro_batch as f64;
    if config.act_checkpointing {
        flops *= 1.0 + params.ckpt_recompute_frac;
    }
    Ok(flops)
}

/// Achieved FLOPs/sec of one GPU at this configuration.
pub fn effective_rate(
    model: &ModelSpec,
    config: &TrainConfig,
    machine: &MachineSpec,
    params: &PerfParams,
) -> f64 {
    let tokens = config.micro_batch as f64 * model.sample_tokens();
    machine.gpu.peak_half_flops
        * params.mfu(&machine.gpu.id, model.family)
        * saturation(tokens, params.batch_halfsat_tokens)
        * free_lunch_multiplier(model, config, params)
}

pub fn pass_time(
    model: &ModelSpec,
    config: &TrainConfig,
    machine: &MachineSpec,
    params: &PerfParams,
) -> Result<f64> {
    if config.micro_batch == 0 {
        return Ok(0.0);
    }
    Ok(pass_flops(model, config, params)? / effective_rate(model, config, machine, params))
}

/// Communication split by when it happens.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CommBreakdown {
    /// Gradient reduction and host transfers, once per optimizer step.
    pub per_step_seconds: f64,
    /// Stage-3 parameter gather, once per accumulation pass.
    pub per_pass_seconds: f64,
}

impl CommBreakdown {
    pub fn total(&self, grad_accum_steps: u64) -> f64 {
        self.per_step_seconds + self.per_pass_seconds * grad_accum_steps as f64
    }
}

pub fn comm_breakdown(
    model: &ModelSpec,
    config: &TrainConfig,
    machine: &MachineSpec,
    params: &PerfParams,
) -> CommBreakdown {
    let mut out = CommBreakdown::default();
    let n = machine.n_gpus as f64;
    let p = model.param_count as f64;
    let (w, g, _) = memory::state_bytes_per_param(model);
    if machine.n_gpus > 1 {
        let link = params.comm_efficiency * machine.intra_node_bw_bytes;
        let spread = (n - 1.0) / n;
        out.per_step_seconds += 2.0 * g * p * spread / link;
        if config.sharding.stage() == 3 {
            out.per_pass_seconds += w * p * spread / link;
        }
    }
    if config.offload {
        let host = model_state_bytes(model, config, machine.n_gpus).host_offloaded_bytes;
        out.per_step_seconds +=
            2.0 * host / (params.host_efficiency * machine.host_device_bw_bytes);
    }
    out
}

/// Communication seconds per optimizer step.
pub fn comm_time(
    model: &ModelSpec,
    config: &TrainConfig,
    machine: &MachineSpec,
    params: &PerfParams,
) -> f64 {
    comm_breakdown(model, config, machine, params).total(config.grad_accum_steps)
}

/// Optimizer update: a memory-bound sweep over this GPU's optimizer share.
pub fn update_time(
    model: &ModelSpec,
    config: &TrainConfig,
    machine: &MachineSpec,
    params: &PerfParams,
) -> f64 {
    let mut bytes = params.update_bytes_per_param * model.param_count as f64;
    if config.sharding.stage() >= 1 {
        bytes /= machine.n_gpus as f64;
    }
    let bandwidth = if config.offload {
        params.host_efficiency * machine.host_device_bw_bytes
    } else {
        machine.gpu.mem_bandwidth_bytes
    };
    bytes / bandwidth
}

/// Step and run duration without checking memory feasibility.
pub fn step_estimate(
    model: &ModelSpec,
    config: &TrainConfig,
    machine: &MachineSpec,
    params: &PerfParams,
) -> Result<StepEstimate> {
    let pass_seconds = pass_time(model, config, machine, params)?;
    let update_seconds = update_time(model, config, machine, params);
    let comm_seconds = comm_time(model, config, machine, params);
    let step_seconds =
        config.grad_accum_steps as f64 * pass_seconds + update_seconds + comm_seconds;
    Ok(StepEstimate {
        pass_seconds,
        update_seconds,
        comm_seconds,
        step_seconds,
        days: step_seconds * model.training_steps as f64 / SECONDS_PER_DAY,
    })
}

/// Predicted run duration of a configuration that fits in memory.
pub fn training_days(
    model: &ModelSpec,
    config: &TrainConfig,
    machine: &MachineSpec,
    params: &PerfParams,
) -> Result<StepEstimate> {
    let fit = memory::fits(model, config, machine, params);
    if !fit.fits {
        return Err(Error::InfeasibleConfig {
            limiting: fit.limiting,
        });
    }
    step_estimate(model, config, machine, params)
}
