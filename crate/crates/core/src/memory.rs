//! Per-GPU and host memory accounting.
//!
//! Model states follow the usual Adam accounting: mixed precision keeps
//! 16-bit weights and gradients (2 + 2 bytes/param) plus an fp32 master copy
//! and two moments (12 bytes/param); fp32 training keeps 4 + 4 + 8.
//! Sharding divides optimizer states (stage 1), gradients (stage 2) and
//! weights (stage 3) by the GPU count. Offloading moves the optimizer share
//! (stages 1-2) or optimizer and weight shares (stage 3) into host RAM.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::params::PerfParams;
use crate::spec::{Family, MachineSpec, ModelSpec, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MemoryBreakdown {
    pub weights_bytes: f64,
    pub grads_bytes: f64,
    pub optimizer_bytes: f64,
    pub activation_bytes: f64,
    pub overhead_bytes: f64,
    /// This GPU's share of states living in host RAM.
    pub host_offloaded_bytes: f64,
}

impl MemoryBreakdown {
    pub fn model_state_bytes(&self) -> f64 {
        self.weights_bytes + self.grads_bytes + self.optimizer_bytes
    }

    /// Bytes resident on one GPU.
    pub fn total(&self) -> f64 {
        self.model_state_bytes() + self.activation_bytes + self.overhead_bytes
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Limiting {
    Gpu,
    Host,
    None,
}

impl fmt::Display for Limiting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Limiting::Gpu => "gpu",
            Limiting::Host => "host",
            Limiting::None => "none",
        })
    }
}

/// Full-replica bytes per parameter: (weights, gradients, optimizer).
pub fn state_bytes_per_param(model: &ModelSpec) -> (f64, f64, f64) {
    if model.precision.is_mixed() {
        (2.0, 2.0, 12.0)
    } else {
        (4.0, 4.0, 8.0)
    }
}

/// Model-state bytes held by one GPU (activation fields are zero).
pub fn model_state_bytes(model: &ModelSpec, config: &TrainConfig, n_gpus: u32) -> MemoryBreakdown {
    let p = model.param_count as f64;
    let n = n_gpus.max(1) as f64;
    let (w, g, o) = state_bytes_per_param(model);
    let (mut weights, mut grads, mut optimizer) = (w * p, g * p, o * p);
    let stage = config.sharding.stage();
    if stage >= 1 {
        optimizer /= n;
    }
    if stage >= 2 {
        grads /= n;
    }
    if stage >= 3 {
        weights /= n;
    }
    let mut host = 0.0;
    if config.offload && stage >= 1 {
        host += optimizer;
        optimizer = 0.0;
        if stage == 3 {
            host += weights;
            weights = 0.0;
        }
    }
    MemoryBreakdown {
        weights_bytes: weights,
        grads_bytes: grads,
        optimizer_bytes: optimizer,
        host_offloaded_bytes: host,
        ..Default::default()
    }
}

/// Activation elements one layer stores per sample.
fn layer_elements(model: &ModelSpec) -> f64 {
    match model.family {
        Family::Conv => (model.image_size * model.image_size) as f64,
        Family::Vit => model.sample_tokens() * model.hidden_size as f64,
        _ => model.seq_len as f64 * model.hidden_size as f64,
    }
}

/// Stored activations for one micro-batch.
///
/// Without checkpointing every layer keeps `act_coeff` elements per
/// layer element. With checkpointing only each layer's input is kept, plus
/// the working set of the one layer being recomputed. Fused attention
/// kernels drop the attention-score share of the coefficient.
pub fn activation_bytes(
    model: &ModelSpec,
    micro_batch: u64,
    act_checkpointing: bool,
    fused_attention: bool,
    params: &PerfParams,
) -> f64 {
    let mut coeff = params.act_coeff(model.family);
    if fused_attention {
        coeff *= 1.0 - params.attn_share(model.family);
    }
    let elem = model.precision.activation_bytes();
    let per_layer = micro_batch as f64 * layer_elements(model) * elem;
    let layers = model.num_layers as f64;
    if act_checkpointing {
        layers * per_layer + coeff * per_layer
    } else {
        coeff * layers * per_layer
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub fits: bool,
    pub breakdown: MemoryBreakdown,
    pub limiting: Limiting,
}

/// GPU capacity usable by the training process.
pub fn usable_gpu_bytes(machine: &MachineSpec, params: &PerfParams) -> f64 {
    machine.gpu.memory_bytes as f64 * (1.0 - params.mem_headroom_frac)
}

pub fn fits(
    model: &ModelSpec,
    config: &TrainConfig,
    machine: &MachineSpec,
    params: &PerfParams,
) -> FitReport {
    let mut breakdown = model_state_bytes(model, config, machine.n_gpus);
    breakdown.activation_bytes = activation_bytes(
        model,
        config.micro_batch,
        config.act_checkpointing,
        config.custom_kernels,
        params,
    );
    breakdown.overhead_bytes = params.framework_overhead_bytes;
    let gpu_ok = breakdown.total() <= usable_gpu_bytes(machine, params);
    let host_ok =
        breakdown.host_offloaded_bytes * machine.n_gpus as f64 <= machine.host_ram_bytes as f64;
    let limiting = if !gpu_ok {
        Limiting::Gpu
    } else if !host_ok {
        Limiting::Host
    } else {
        Limiting::None
    };
    FitReport {
        fits: gpu_ok && host_ok,
        breakdown,
        limiting,
    }
}

/// Largest power-of-two micro-batch that fits, capped at the per-GPU share
/// of the global batch. 0 when even one sample does not fit.
pub fn max_micro_batch(
    model: &ModelSpec,
    config: &TrainConfig,
    machine: &MachineSpec,
    params: &PerfParams,
) -> u64 {
    let cap = model.global_batch_size / machine.n_gpus as u64;
    let probe = |b: u64| {
        let c = TrainConfig {
            compile: false,
            micro_batch: b,
            ..*config
        };
        fits(model, &c, machine, params).fits
    };
    if cap == 0 || !probe(1) {
        return 0;
    }
    let mut b = 1;
    while b * 2 <= cap && probe(b * 2) {
        b *= 2;
    }
    b
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::Catalog;
    use crate::spec::Sharding;

    fn cfg(sharding: Sharding, offload: bool) -> TrainConfig {
        TrainConfig {
            sharding,
            offload,
            ..TrainConfig::naive()
        }
    }

    #[test]
    fn pythia_1b_state_bytes() {
        let cat = Catalog::bundled();
        let m = cat.model("pythia-1b").unwrap();
        let plain = model_state_bytes(m, &cfg(Sharding::None, false), 4);
        assert_eq!(plain.model_state_bytes(), 16e9);
        let z3 = model_state_bytes(m, &cfg(Sharding::Zero3, false), 4);
        assert_eq!(z3.model_state_bytes(), 4e9);
        let z1 = model_state_bytes(m, &cfg(Sharding::Zero1, false), 4);
        assert_eq!(z1.optimizer_bytes, 3e9);
        assert_eq!(z1.grads_bytes, 2e9);
    }

    #[test]
    fn one_gpu_sharding_is_arithmetic_noop() {
        let cat = Catalog::bundled();
        let m = cat.model("pythia-410m").unwrap();
        let plain = model_state_bytes(m, &cfg(Sharding::None, false), 1);
        for s in Sharding::ALL {
            assert_eq!(model_state_bytes(m, &cfg(s, false), 1), plain);
        }
    }

    #[test]
    fn offload_relocates_optimizer_then_weights() {
        let cat = Catalog::bundled();
        let m = cat.model("pythia-1b").unwrap();
        let z2 = model_state_bytes(m, &cfg(Sharding::Zero2, true), 2);
        assert_eq!(z2.optimizer_bytes, 0.0);
        assert_eq!(z2.host_offloaded_bytes, 6e9);
        let z3 = model_state_bytes(m, &cfg(Sharding::Fsdp3, true), 2);
        assert_eq!(z3.weights_bytes, 0.0);
        assert_eq!(z3.host_offloaded_bytes, 7e9);
        assert_eq!(z3.grads_bytes, 1e9);
    }

    #[test]
    fn activations_zero_linear_and_checkpointed() {
        let cat = Catalog::bundled();
        let p = PerfParams::default();
        for m in cat.models() {
            assert_eq!(activation_bytes(m, 0, false, false, &p), 0.0);
            for fused in [false, true] {
                let one = activation_bytes(m, 1, false, fused, &p);
                assert_eq!(activation_bytes(m, 2, false, fused, &p), 2.0 * one);
                for b in [1, 3, 64] {
                    assert!(
                        activation_bytes(m, b, true, fused, &p)
                            < activation_bytes(m, b, false, fused, &p),
                        "{} b={b}",
                        m.id
                    );
                }
            }
        }
    }

    #[test]
    fn feasibility_examples() {
        let cat = Catalog::bundled();
        let p = PerfParams::default();
        let small = cat.model("pythia-160m").unwrap();
        let c = TrainConfig::naive().with_batch(1, 1024);
        assert!(fits(small, &c, cat.machine("a100", 1).unwrap(), &p).fits);

        let big = cat.model("pythia-6.9b").unwrap();
        for gpu in ["rtx3090", "a6000", "a100", "h100"] {
            let machine = cat.machine(gpu, 1).unwrap();
            for c in crate::search::enumerate_configs(1, machine.gpu.generation, big) {
                let r = fits(big, &c.with_batch(1, 1024), machine, &p);
                assert!(!r.fits, "{gpu} {c}");
            }
        }
    }

    #[test]
    fn host_ram_binds_for_offload() {
        let cat = Catalog::bundled();
        let p = PerfParams::default();
        let big = cat.model("pythia-6.9b").unwrap();
        let c = TrainConfig {
            act_checkpointing: true,
            ..cfg(Sharding::Zero3, true)
        }
        .with_batch(1, 1024);
        let r = fits(big, &c, cat.machine("h100", 1).unwrap(), &p);
        assert_eq!(r.limiting, Limiting::Host);
        let r = fits(big, &c, cat.machine("h100", 2).unwrap(), &p);
        assert!(r.fits);
    }

    #[test]
    fn max_batch_cap_and_empty() {
        let cat = Catalog::bundled();
        let p = PerfParams::default();
        let mut m = cat.model("pythia-160m").unwrap().clone();
        m.global_batch_size = 256;
        let machine = cat.machine("h100", 1).unwrap();
        let mut roomy = p.clone();
        roomy.act_coeff.insert(Family::Decoder, 1e-3);
        assert_eq!(
            max_micro_batch(&m, &TrainConfig::naive(), machine, &roomy),
            256
        );

        let big = cat.model("pythia-6.9b").unwrap();
        assert_eq!(max_micro_batch(big, &TrainConfig::naive(), machine, &p), 0);
    }

    #[test]
    fn max_batch_is_maximal() {
        let cat = Catalog::bundled();
        let p = PerfParams::default();
        for m in cat.models() {
            for machine in cat.machines() {
                let c = TrainConfig::naive();
                let b = max_micro_batch(m, &c, machine, &p);
                if b == 0 {
                    continue;
                }
                assert!(b.is_power_of_two());
                assert!(fits(m, &c.with_batch(b, 0), machine, &p).fits);
                let capped = b * 2 > m.global_batch_size / machine.n_gpus as u64;
                assert!(capped || !fits(m, &c.with_batch(2 * b, 0), machine, &p).fits);
            }
        }
    }
}
