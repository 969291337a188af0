//! Configuration search over memory-saving method combinations.
//!
//! Free-lunch methods (compilation, custom kernels, TF32) are always enabled
//! where the model and GPU allow them; the search space is the set of
//! memory-saving combinations: activation checkpointing x sharding strategy
//! x offloading. Offloading requires sharding, and sharding without
//! offloading is dropped on a single GPU, leaving 12 combinations on one GPU
//! and 22 on more.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::memory::{self, Limiting};
use crate::params::PerfParams;
use crate::spec::{Generation, MachineSpec, ModelSpec, Sharding, TrainConfig};
use crate::steptime::{step_estimate, StepEstimate};

/// Canonical enumeration of the search space; batch fields are unset.
pub fn enumerate_configs(
    n_gpus: u32,
    generation: Generation,
    model: &ModelSpec,
) -> Vec<TrainConfig> {
    let mut out = Vec::with_capacity(22);
    for act_checkpointing in [false, true] {
        for sharding in Sharding::ALL {
            for offload in [false, true] {
                if offload && !sharding.is_enabled() {
                    continue;
                }
                if n_gpus == 1 && sharding.is_enabled() && !offload {
                    continue;
                }
                out.push(TrainConfig {
                    compile: model.supports_compile && !sharding.is_zero(),
                    custom_kernels: model.supports_custom_kernels,
                    tf32: generation.supports_tf32(),
                    act_checkpointing,
                    sharding,
                    offload,
                    micro_batch: 0,
                    grad_accum_steps: 0,
                });
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum ConfigResult {
    Feasible {
        estimate: StepEstimate,
    },
    /// `limiting` is `none` when memory fits but the global batch cannot be
    /// split evenly across GPUs.
    Infeasible {
        limiting: Limiting,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchEntry {
    pub config: TrainConfig,
    pub result: ConfigResult,
}

impl SearchEntry {
    pub fn estimate(&self) -> Option<&StepEstimate> {
        match &self.result {
            ConfigResult::Feasible { estimate } => Some(estimate),
            ConfigResult::Infeasible { .. } => None,
        }
    }

    pub fn days(&self) -> Option<f64> {
        self.estimate().map(|e| e.days)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Choice {
    pub config: TrainConfig,
    pub estimate: StepEstimate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchOutcome {
    pub model_id: String,
    pub machine_id: String,
    pub best: Option<Choice>,
    pub table: Vec<SearchEntry>,
    pub naive: Option<Choice>,
}

/// Largest power of two not above `micro_batch` that splits the global batch
/// evenly over `n_gpus`.
pub fn divisible_micro_batch(global_batch: u64, n_gpus: u64, micro_batch: u64) -> Option<u64> {
    if micro_batch == 0 || n_gpus == 0 || !global_batch.is_multiple_of(n_gpus) {
        return None;
    }
    let mut b = 1u64 << (63 - micro_batch.leading_zeros());
    while b >= 1 {
        if global_batch.is_multiple_of(b * n_gpus) {
            return Some(b);
        }
        b /= 2;
    }
    None
}

/// Fix the micro-batch and accumulation of one configuration, or report why
/// it cannot run.
pub fn size_config(
    model: &ModelSpec,
    config: &TrainConfig,
    machine: &MachineSpec,
    params: &PerfParams,
) -> std::result::Result<TrainConfig, Limiting> {
    let b = memory::max_micro_batch(model, config, machine, params);
    if b == 0 {
        let probe = config.with_batch(1, 0);
        let fit = memory::fits(model, &probe, machine, params);
        return Err(if fit.fits {
            Limiting::None
        } else {
            fit.limiting
        });
    }
    let n = machine.n_gpus as u64;
    let b = divisible_micro_batch(model.global_batch_size, n, b).ok_or(Limiting::None)?;
    Ok(config.with_batch(b, model.global_batch_size / (b * n)))
}

pub fn evaluate_config(
    model: &ModelSpec,
    config: &TrainConfig,
    machine: &MachineSpec,
    params: &PerfParams,
) -> Result<SearchEntry> {
    Ok(match size_config(model, config, machine, params) {
        Ok(sized) => SearchEntry {
            config: sized,
            result: ConfigResult::Feasible {
                estimate: step_estimate(model, &sized, machine, params)?,
            },
        },
        Err(limiting) => SearchEntry {
            config: *config,
            result: ConfigResult::Infeasible { limiting },
        },
    })
}

/// Index of the fastest feasible entry; ties go to fewer memory-saving
/// methods, then to the earlier entry.
pub fn best_index(table: &[SearchEntry]) -> Option<usize> {
    let mut best: Option<(usize, f64, u32)> = None;
    for (i, e) in table.iter().enumerate() {
        let Some(days) = e.days() else { continue };
        let methods = e.config.memory_saving_count();
        let better = match best {
            None => true,
            Some((_, d, m)) => days < d || (days == d && methods < m),
        };
        if better {
            best = Some((i, days, methods));
        }
    }
    best.map(|(i, _, _)| i)
}

pub fn naive_estimate(
    model: &ModelSpec,
    machine: &MachineSpec,
    params: &PerfParams,
) -> Result<std::result::Result<Choice, Limiting>> {
    let entry = evaluate_config(model, &TrainConfig::naive(), machine, params)?;
    Ok(match entry.result {
        ConfigResult::Feasible { estimate } => Ok(Choice {
            config: entry.config,
            estimate,
        }),
        ConfigResult::Infeasible { limiting } => Err(limiting),
    })
}

/// Evaluate every configuration and pick the fastest.
pub fn optimize(
    model: &ModelSpec,
    machine: &MachineSpec,
    params: &PerfParams,
) -> Result<SearchOutcome> {
    let table = enumerate_configs(machine.n_gpus, machine.gpu.generation, model)
        .iter()
        .map(|c| evaluate_config(model, c, machine, params))
        .collect::<Result<Vec<_>>>()?;
    let best = best_index(&table).map(|i| Choice {
        config: table[i].config,
        estimate: *table[i].estimate().unwrap(),
    });
    let naive = naive_estimate(model, machine, params)?.ok();
    Ok(SearchOutcome {
        model_id: model.id.clone(),
        machine_id: machine.id.clone(),
        best,
        table,
        naive,
    })
}

impl SearchOutcome {
    /// The entry with no memory-saving method enabled.
    pub fn free_lunch(&self) -> Option<&SearchEntry> {
        self.table
            .iter()
            .find(|e| e.config.memory_saving_count() == 0)
    }

    pub const CSV_HEADER: &'static str =
        "compile,custom_kernels,tf32,act_checkpointing,sharding,offload,micro_batch,gas,days,reason";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for e in &self.table {
            let c = &e.config;
            let (days, reason) = match e.result {
                ConfigResult::Feasible { estimate } => {
                    (format!("{:.3}", estimate.days), String::new())
                }
                ConfigResult::Infeasible { limiting } => {
                    (String::new(), format!("infeasible:{limiting}"))
                }
            };
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                c.compile,
                c.custom_kernels,
                c.tf32,
                c.act_checkpointing,
                c.sharding,
                c.offload,
                c.micro_batch,
                c.grad_accum_steps,
                days,
                reason
            );
        }
        out
    }

    pub fn to_text(&self) -> String {
        let yn = |b: bool| if b { "y" } else { "-" };
        let mut out = String::new();
        let _ = writeln!(out, "model {} on {}", self.model_id, self.machine_id);
        let _ = writeln!(
            out,
            "{:>7} {:>7} {:>4} {:>4} {:>6} {:>7} {:>5} {:>5} {:>10}",
            "compile", "kernels", "tf32", "ckpt", "shard", "offload", "mb", "gas", "days"
        );
        for e in &self.table {
            let c = &e.config;
            let days = match e.result {
                ConfigResult::Feasible { estimate } => format!("{:.1}", estimate.days),
                ConfigResult::Infeasible { limiting } => format!("--- ({limiting})"),
            };
            let (mb, gas) = match e.result {
                ConfigResult::Feasible { .. } => {
                    (c.micro_batch.to_string(), c.grad_accum_steps.to_string())
                }
                ConfigResult::Infeasible { .. } => ("-".into(), "-".into()),
            };
            let _ = writeln!(
                out,
                "{:>7} {:>7} {:>4} {:>4} {:>6} {:>7} {:>5} {:>5} {:>10}",
                yn(c.compile),
                yn(c.custom_kernels),
                yn(c.tf32),
                yn(c.act_checkpointing),
                c.sharding.as_str(),
                yn(c.offload),
                mb,
                gas,
                days
            );
        }
        match &self.best {
            Some(b) => {
                let _ = writeln!(out, "best: {} -> {:.1} days", b.config, b.estimate.days);
            }
            None => {
                let _ = writeln!(out, "best: infeasible");
            }
        }
        match &self.naive {
            Some(n) => {
                let _ = writeln!(out, "naive: {} -> {:.1} days", n.config, n.estimate.days);
            }
            None => {
                let _ = writeln!(out, "naive: infeasible");
            }
        }
        out
    }
}
