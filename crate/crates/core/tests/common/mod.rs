#![allow(dead_code)]

use proptest::prelude::*;
use proptest::test_runner::{Config, RngSeed};

use planner_core::memory::{fits, max_micro_batch, model_state_bytes};
use planner_core::record::MeasurementRecord;
use planner_core::spec::{Generation, Optimizer};
use planner_core::steptime::{comm_breakdown, pass_time, update_time};
use planner_core::{
    Catalog, Family, GpuSpec, MachineSpec, ModelSpec, PerfParams, Precision, Sharding, TrainConfig,
};

pub const GIB: u64 = 1 << 30;

pub fn config() -> Config {
    Config {
        cases: 1000,
        rng_seed: RngSeed::Fixed(0x5eed),
        failure_persistence: None,
        ..Config::default()
    }
}

prop_compose! {
    pub fn model()(
        family in prop::sample::select(vec![Family::Decoder, Family::Encoder, Family::Ssm]),
        param_count in 10_000_000u64..12_000_000_000,
        seq_len in 64u64..4096,
        hidden_size in 64u64..8192,
        num_layers in 1u64..64,
        batch_pow in 0u32..13,
        mixed in any::<bool>(),
    ) -> ModelSpec {
        ModelSpec {
            id: "m".into(),
            family,
            param_count,
            seq_len,
            vocab_size: 50_000,
            image_size: 0,
            num_classes: 0,
            hidden_size,
            num_layers,
            num_heads: 8,
            global_batch_size: 1 << batch_pow,
            training_steps: 1000,
            precision: if mixed { Precision::Bf16Mixed } else { Precision::Fp32 },
            optimizer: Optimizer::Adam,
            supports_compile: true,
            supports_custom_kernels: true,
            total_training_flops_override: None,
        }
    }
}

prop_compose! {
    pub fn machine()(
        mem_gib in 8u64..=80,
        n_pow in 0u32..4,
    ) -> MachineSpec {
        let n = 1u32 << n_pow;
        MachineSpec {
            id: "x".into(),
            gpu: GpuSpec {
                id: "g".into(),
                memory_bytes: mem_gib * GIB,
                peak_half_flops: 1e14,
                generation: Generation::Ampere,
                unit_price_usd: 1000.0,
                mem_bandwidth_bytes: 1e12,
            },
            n_gpus: n,
            system_price_usd: 1000.0,
            host_ram_bytes: n as u64 * 64 * GIB,
            intra_node_bw_bytes: 5e10,
            host_device_bw_bytes: 2.5e10,
        }
    }
}

pub fn sharding() -> impl Strategy<Value = Sharding> {
    prop::sample::select(Sharding::ALL.to_vec())
}

pub fn train_config() -> impl Strategy<Value = TrainConfig> {
    (any::<bool>(), any::<bool>(), sharding(), any::<bool>()).prop_map(
        |(kernels, ckpt, sharding, offload)| TrainConfig {
            custom_kernels: kernels,
            act_checkpointing: ckpt,
            sharding,
            offload: offload && sharding.is_enabled(),
            ..TrainConfig::naive()
        },
    )
}

pub fn stage_order(s: Sharding) -> [Sharding; 4] {
    if matches!(s, Sharding::Fsdp2 | Sharding::Fsdp3) {
        [
            Sharding::None,
            Sharding::Zero1,
            Sharding::Fsdp2,
            Sharding::Fsdp3,
        ]
    } else {
        [
            Sharding::None,
            Sharding::Zero1,
            Sharding::Zero2,
            Sharding::Zero3,
        ]
    }
}

pub fn stage_monotone(
    m: &ModelSpec,
    n: u32,
    s: Sharding,
    offload: bool,
) -> Result<(), TestCaseError> {
    let mut prev = f64::INFINITY;
    for stage in stage_order(s) {
        let c = TrainConfig {
            sharding: stage,
            offload: offload && stage.is_enabled(),
            ..TrainConfig::naive()
        };
        let b = model_state_bytes(m, &c, n).model_state_bytes();
        prop_assert!(b <= prev, "{stage:?}: {b} > {prev}");
        prev = b;
    }
    Ok(())
}

pub fn one_gpu_noop(m: &ModelSpec, s: Sharding) -> Result<(), TestCaseError> {
    let plain = model_state_bytes(m, &TrainConfig::naive(), 1);
    let c = TrainConfig {
        sharding: s,
        ..TrainConfig::naive()
    };
    prop_assert_eq!(model_state_bytes(m, &c, 1), plain);
    Ok(())
}

pub fn offload_conserves(m: &ModelSpec, n: u32, s: Sharding) -> Result<(), TestCaseError> {
    let on_gpu = TrainConfig {
        sharding: s,
        ..TrainConfig::naive()
    };
    let off = TrainConfig {
        offload: s.is_enabled(),
        ..on_gpu
    };
    let a = model_state_bytes(m, &on_gpu, n);
    let b = model_state_bytes(m, &off, n);
    let total = b.model_state_bytes() + b.host_offloaded_bytes;
    prop_assert!((total - a.model_state_bytes()).abs() <= 1e-9 * total.max(1.0));
    prop_assert!(b.model_state_bytes() <= a.model_state_bytes());
    Ok(())
}

pub fn micro_batch_monotone(
    m: &ModelSpec,
    machine: &MachineSpec,
    c: TrainConfig,
    b: u64,
) -> Result<(), TestCaseError> {
    let p = PerfParams::default();
    if fits(m, &c.with_batch(b + 1, 0), machine, &p).fits {
        prop_assert!(fits(m, &c.with_batch(b, 0), machine, &p).fits);
    }
    Ok(())
}

pub fn max_batch_memory_monotone(
    m: &ModelSpec,
    machine: &MachineSpec,
    c: TrainConfig,
    extra_gib: u64,
) -> Result<(), TestCaseError> {
    let p = PerfParams::default();
    let mut bigger = machine.clone();
    bigger.gpu.memory_bytes += extra_gib * GIB;
    prop_assert!(max_micro_batch(m, &c, &bigger, &p) >= max_micro_batch(m, &c, machine, &p));
    Ok(())
}

pub fn max_batch_saving_monotone(
    m: &ModelSpec,
    machine: &MachineSpec,
    c: TrainConfig,
    which: usize,
) -> Result<(), TestCaseError> {
    let p = PerfParams::default();
    // host limit out of the picture
    let machine = MachineSpec {
        host_ram_bytes: 1 << 50,
        ..machine.clone()
    };
    let more = match which {
        0 => TrainConfig {
            act_checkpointing: true,
            ..c
        },
        1 => match c.sharding {
            Sharding::None => TrainConfig {
                sharding: Sharding::Zero1,
                ..c
            },
            Sharding::Zero1 => TrainConfig {
                sharding: Sharding::Zero2,
                ..c
            },
            Sharding::Zero2 => TrainConfig {
                sharding: Sharding::Zero3,
                ..c
            },
            Sharding::Fsdp2 => TrainConfig {
                sharding: Sharding::Fsdp3,
                ..c
            },
            _ => c,
        },
        _ => TrainConfig {
            offload: c.sharding.is_enabled(),
            ..c
        },
    };
    prop_assert!(max_micro_batch(m, &more, &machine, &p) >= max_micro_batch(m, &c, &machine, &p));
    Ok(())
}

pub fn truth() -> PerfParams {
    let mut p = PerfParams::default();
    p.set_mfu("a100", Family::Decoder, 0.35);
    p.set_mfu("h100", Family::Decoder, 0.28);
    p.set_mfu("a100", Family::Vit, 0.22);
    p.mult_compile = 1.2;
    p.mult_kernels = 1.4;
    p.mult_tf32 = 1.6;
    p.ckpt_recompute_frac = 0.4;
    p.batch_halfsat_tokens = 3000.0;
    p.comm_efficiency = 0.6;
    p.host_efficiency = 0.35;
    p.update_bytes_per_param = 24.0;
    p
}

pub fn synthetic_records(p: &PerfParams) -> Vec<MeasurementRecord> {
    let cat = Catalog::bundled();
    let mut out = Vec::new();
    let settings = [
        ("pythia-160m", "a100"),
        ("pythia-410m", "a100"),
        ("pythia-160m", "h100"),
        ("vit-large", "a100"),
    ];
    for (model_id, gpu) in settings {
        let model = cat.model(model_id).unwrap();
        for n in [1, 2, 4] {
            let machine = cat.machine(gpu, n).unwrap();
            for (i, sharding) in [Sharding::None, Sharding::Zero2, Sharding::Fsdp3]
                .into_iter()
                .enumerate()
            {
                for offload in [false, true] {
                    if offload && sharding == Sharding::None {
                        continue;
                    }
                    let mb = 1u64 << (i + offload as usize);
                    let config = TrainConfig {
                        compile: i % 2 == 0,
                        custom_kernels: n != 2,
                        tf32: n != 4,
                        act_checkpointing: offload || n == 4,
                        sharding,
                        offload,
                        micro_batch: mb,
                        grad_accum_steps: 4,
                    };
                    let comm = comm_breakdown(model, &config, machine, p);
                    out.push(MeasurementRecord {
                        model_id: model_id.into(),
                        gpu_id: gpu.into(),
                        n_gpus: n,
                        config,
                        pass_seconds: Some(
                            pass_time(model, &config, machine, p).unwrap() + comm.per_pass_seconds,
                        ),
                        update_seconds: Some(
                            update_time(model, &config, machine, p) + comm.per_step_seconds,
                        ),
                        oom: false,
                        timestamp: format!("2024-01-01T00:00:{:02}Z", out.len() % 60),
                    });
                }
            }
        }
    }
    out
}
