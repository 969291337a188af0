use planner_core::memory::fits;
use planner_core::search::{enumerate_configs, optimize};
use planner_core::steptime::training_days;
use planner_core::validate::validate;
use planner_core::{Catalog, CellKey, PerfParams, ResultGrid};

fn days(model: &str, gpu: &str, n: u32) -> Option<f64> {
    let cat = Catalog::bundled();
    optimize(
        cat.model(model).unwrap(),
        cat.machine(gpu, n).unwrap(),
        &PerfParams::shipped(),
    )
    .unwrap()
    .best
    .map(|b| b.estimate.days)
}

#[test]
fn enumerated_configs_are_valid_and_distinct() {
    let cat = Catalog::bundled();
    for m in cat.models() {
        for machine in cat.machines() {
            let configs = enumerate_configs(machine.n_gpus, machine.gpu.generation, m);
            let mut unique = configs.clone();
            unique.sort();
            unique.dedup();
            assert_eq!(unique.len(), configs.len());
            for c in configs {
                let c = c.with_batch(1, m.global_batch_size / machine.n_gpus as u64);
                assert!(
                    validate(m, machine, &c).is_empty(),
                    "{} {} {c:?}",
                    m.id,
                    machine.id
                );
            }
        }
    }
}

#[test]
fn chosen_config_fits_and_covers_global_batch() {
    let cat = Catalog::bundled();
    let p = PerfParams::shipped();
    for m in cat.models() {
        for machine in cat.machines() {
            let Some(best) = optimize(m, machine, &p).unwrap().best else {
                continue;
            };
            let c = best.config;
            assert!(fits(m, &c, machine, &p).fits, "{} {}", m.id, machine.id);
            assert_eq!(
                c.micro_batch * c.grad_accum_steps * machine.n_gpus as u64,
                m.global_batch_size
            );
            let again = training_days(m, &c, machine, &p).unwrap();
            assert_eq!(again.days, best.estimate.days);
        }
    }
}

#[test]
fn large_models_need_several_gpus() {
    assert!(days("pythia-6.9b", "rtx3090", 1).is_none());
    for gpu in ["rtx3090", "a6000", "a100", "h100"] {
        for n in [2, 4, 8] {
            assert!(days("pythia-2.8b", gpu, n).is_some(), "{gpu} x{n}");
        }
    }
}

#[test]
fn more_gpus_train_faster() {
    for gpu in ["a100", "h100"] {
        let mut prev = f64::INFINITY;
        for n in [1, 2, 4, 8] {
            let d = days("pythia-1b", gpu, n).unwrap();
            assert!(d < prev, "{gpu} x{n}: {d} >= {prev}");
            prev = d;
        }
    }
}

#[test]
fn pythia_1b_within_thirty_percent_on_a100() {
    let table = ResultGrid::bundled_optimal();
    for n in [1, 4] {
        let observed = table
            .get(&CellKey::new("pythia-1b", "a100", n))
            .and_then(|v| v.days())
            .unwrap();
        let predicted = days("pythia-1b", "a100", n).unwrap();
        assert!(
            (predicted / observed - 1.0).abs() <= 0.3,
            "x{n}: {predicted} vs {observed}"
        );
    }
}
