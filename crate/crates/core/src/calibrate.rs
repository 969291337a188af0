//! Fitting performance parameters to measurement records and day-level
//! result tables.
//!
//! The fit minimizes the sum of squared log-ratios between predicted and
//! observed values by deterministic coordinate descent in log space. Only
//! time parameters are fitted; memory parameters stay at their initial
//! values, so feasibility and micro-batch sizes are fixed up front.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::catalog::Catalog;
use crate::error::{Error, Result};
use crate::params::PerfParams;
use crate::record::MeasurementRecord;
use crate::report::{CellKey, GridLabel, ResultGrid};
use crate::search::{enumerate_configs, size_config};
use crate::spec::{Family, MachineSpec, ModelSpec, Precision, TrainConfig};
use crate::steptime::{comm_breakdown, pass_time, step_estimate, update_time};

/// A fitted coefficient of [`PerfParams`].
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitParam {
    Mfu { gpu_id: String, family: Family },
    MultCompile,
    MultKernels,
    MultTf32,
    CkptRecomputeFrac,
    BatchHalfsatTokens,
    CommEfficiency,
    HostEfficiency,
    UpdateBytesPerParam,
}

impl fmt::Display for FitParam {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FitParam::Mfu { gpu_id, family } => write!(f, "mfu_base.{gpu_id}.{family}"),
            FitParam::MultCompile => f.write_str("mult_compile"),
            FitParam::MultKernels => f.write_str("mult_kernels"),
            FitParam::MultTf32 => f.write_str("mult_tf32"),
            FitParam::CkptRecomputeFrac => f.write_str("ckpt_recompute_frac"),
            FitParam::BatchHalfsatTokens => f.write_str("batch_halfsat_tokens"),
            FitParam::CommEfficiency => f.write_str("comm_efficiency"),
            FitParam::HostEfficiency => f.write_str("host_efficiency"),
            FitParam::UpdateBytesPerParam => f.write_str("update_bytes_per_param"),
        }
    }
}

impl FitParam {
    /// Search bounds, inclusive.
    pub fn bounds(&self) -> (f64, f64) {
        match self {
            FitParam::Mfu { .. } => (1e-3, 1.0),
            FitParam::MultCompile | FitParam::MultKernels | FitParam::MultTf32 => (1.0, 8.0),
            FitParam::CkptRecomputeFrac => (0.05, 1.0),
            FitParam::BatchHalfsatTokens => (1.0, 1e7),
            FitParam::CommEfficiency | FitParam::HostEfficiency => (0.01, 1.0),
            FitParam::UpdateBytesPerParam => (4.0, 64.0),
        }
    }

    pub fn get(&self, p: &PerfParams) -> f64 {
        match self {
            FitParam::Mfu { gpu_id, family } => p.mfu(gpu_id, *family),
            FitParam::MultCompile => p.mult_compile,
            FitParam::MultKernels => p.mult_kernels,
            FitParam::MultTf32 => p.mult_tf32,
            FitParam::CkptRecomputeFrac => p.ckpt_recompute_frac,
            FitParam::BatchHalfsatTokens => p.batch_halfsat_tokens,
            FitParam::CommEfficiency => p.comm_efficiency,
            FitParam::HostEfficiency => p.host_efficiency,
            FitParam::UpdateBytesPerParam => p.update_bytes_per_param,
        }
    }

    pub fn set(&self, p: &mut PerfParams, v: f64) {
        match self {
            FitParam::Mfu { gpu_id, family } => p.set_mfu(gpu_id, *family, v),
            FitParam::MultCompile => p.mult_compile = v,
            FitParam::MultKernels => p.mult_kernels = v,
            FitParam::MultTf32 => p.mult_tf32 = v,
            FitParam::CkptRecomputeFrac => p.ckpt_recompute_frac = v,
            FitParam::BatchHalfsatTokens => p.batch_halfsat_tokens = v,
            FitParam::CommEfficiency => p.comm_efficiency = v,
            FitParam::HostEfficiency => p.host_efficiency = v,
            FitParam::UpdateBytesPerParam => p.update_bytes_per_param = v,
        }
    }

    fn all_global() -> [FitParam; 8] {
        [
            FitParam::MultCompile,
            FitParam::MultKernels,
            FitParam::MultTf32,
            FitParam::CkptRecomputeFrac,
            FitParam::BatchHalfsatTokens,
            FitParam::CommEfficiency,
            FitParam::HostEfficiency,
            FitParam::UpdateBytesPerParam,
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrationOptions {
    /// Give (gpu, family) pairs without observations the geometric mean of
    /// the fitted utilizations on the same GPU.
    pub impute_unobserved: bool,
    /// Coordinate descent stops once the log-space step falls below this.
    pub tolerance: f64,
    pub max_sweeps: usize,
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        Self {
            impute_unobserved: false,
            tolerance: 1e-5,
            max_sweeps: 2000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quantity {
    Days,
    PassSeconds,
    UpdateSeconds,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Residual {
    pub model_id: String,
    pub gpu_id: String,
    pub n_gpus: u32,
    pub config_hash: String,
    pub quantity: Quantity,
    pub observed: f64,
    pub predicted: f64,
    /// `ln(predicted / observed)`.
    pub log_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub params: PerfParams,
    pub free: Vec<FitParam>,
    /// Parameters the observations cannot pin down, left at initial values.
    pub frozen: Vec<FitParam>,
    pub imputed: Vec<FitParam>,
    pub residuals: Vec<Residual>,
    /// Observed-feasible cells the memory model predicts cannot run.
    pub unmatched: Vec<CellKey>,
    pub rms: f64,
}

impl Calibration {
    pub const RESIDUAL_HEADER: &'static str =
        "model_id,gpu_id,n_gpus,config_hash,observed,predicted,log_ratio";

    pub fn residuals_csv(&self) -> String {
        let mut out = String::from(Self::RESIDUAL_HEADER);
        out.push('\n');
        for r in &self.residuals {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.model_id, r.gpu_id, r.n_gpus, r.config_hash, r.observed, r.predicted, r.log_ratio
            );
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Days,
    Pass,
    Update,
}

struct Obs<'a> {
    model: &'a ModelSpec,
    machine: &'a MachineSpec,
    kind: Kind,
    /// Sized configurations; days observations take the fastest.
    candidates: Vec<TrainConfig>,
    observed: f64,
}

impl Obs<'_> {
    fn mfu_key(&self) -> (String, Family) {
        (self.machine.gpu.id.clone(), self.model.family)
    }

    fn predict(&self, p: &PerfParams) -> (f64, usize) {
        let (model, machine) = (self.model, self.machine);
        match self.kind {
            Kind::Days => {
                let mut best = (f64::INFINITY, 0);
                for (i, c) in self.candidates.iter().enumerate() {
                    // flops are validated when observations are built
                    let d = step_estimate(model, c, machine, p).unwrap().days;
                    if d < best.0 {
                        best = (d, i);
                    }
                }
                best
            }
            Kind::Pass => {
                let c = &self.candidates[0];
                let t = pass_time(model, c, machine, p).unwrap()
                    + comm_breakdown(model, c, machine, p).per_pass_seconds;
                (t, 0)
            }
            Kind::Update => {
                let c = &self.candidates[0];
                let t = update_time(model, c, machine, p)
                    + comm_breakdown(model, c, machine, p).per_step_seconds;
                (t, 0)
            }
        }
    }

    fn loss(&self, p: &PerfParams) -> f64 {
        let r = (self.predict(p).0 / self.observed).ln();
        r * r
    }

    fn any(&self, f: impl Fn(&TrainConfig) -> bool) -> bool {
        self.candidates.iter().any(f)
    }
}

fn fixture_candidates(
    label: GridLabel,
    model: &ModelSpec,
    machine: &MachineSpec,
    params: &PerfParams,
) -> Result<Vec<TrainConfig>> {
    let configs = match label {
        GridLabel::Naive => vec![TrainConfig::naive()],
        GridLabel::Optimal => enumerate_configs(machine.n_gpus, machine.gpu.generation, model),
        GridLabel::FreeLunchOnly => {
            enumerate_configs(machine.n_gpus, machine.gpu.generation, model)
                .into_iter()
                .filter(|c| c.memory_saving_count() == 0)
                .collect()
        }
        GridLabel::Analytic => {
            return Err(Error::invalid(
                "calibration fixtures",
                "analytic tables carry no measured behaviour",
            ))
        }
    };
    Ok(configs
        .iter()
        .filter_map(|c| size_config(model, c, machine, params).ok())
        .collect())
}

fn build_observations<'a>(
    catalog: &'a Catalog,
    records: &[MeasurementRecord],
    fixtures: &[ResultGrid],
    params: &PerfParams,
) -> Result<(Vec<Obs<'a>>, Vec<CellKey>)> {
    let mut obs = Vec::new();
    let mut unmatched = Vec::new();
    let mut sorted: Vec<&MeasurementRecord> = records.iter().filter(|r| !r.oom).collect();
    sorted.sort_by_key(|r| r.canonical_key());
    for r in sorted {
        r.check()?;
        let model = catalog.model(&r.model_id)?;
        let machine = catalog.machine(&r.gpu_id, r.n_gpus)?;
        if r.config.micro_batch == 0 {
            return Err(Error::invalid("record", "micro_batch must be positive"));
        }
        crate::steptime::pass_flops(model, &r.config, params)?;
        for (kind, observed) in [
            (Kind::Pass, r.pass_seconds.unwrap()),
            (Kind::Update, r.update_seconds.unwrap()),
        ] {
            obs.push(Obs {
                model,
                machine,
                kind,
                candidates: vec![r.config],
                observed,
            });
        }
    }
    for grid in fixtures {
        for (key, value) in grid.cells() {
            let Some(days) = value.days() else { continue };
            if days <= 0.0 {
                continue;
            }
            let model = catalog.model(&key.model_id)?;
            let machine = catalog.machine(&key.gpu_id, key.n_gpus)?;
            crate::analytic::sample_flops(model)?;
            let candidates = fixture_candidates(grid.label, model, machine, params)?;
            if candidates.is_empty() {
                unmatched.push(key.clone());
                continue;
            }
            obs.push(Obs {
                model,
                machine,
                kind: Kind::Days,
                candidates,
                observed: days,
            });
        }
    }
    Ok((obs, unmatched))
}

/// Parameters the observations can identify, in a fixed order.
fn identifiable(obs: &[Obs]) -> (Vec<FitParam>, Vec<FitParam>) {
    let mut by_key: BTreeMap<(String, Family), Vec<&Obs>> = BTreeMap::new();
    for o in obs {
        by_key.entry(o.mfu_key()).or_default().push(o);
    }
    let mut free = Vec::new();
    for (gpu_id, family) in by_key.keys() {
        free.push(FitParam::Mfu {
            gpu_id: gpu_id.clone(),
            family: *family,
        });
    }
    // A flag is identifiable when some key is seen both with and without it.
    let contrast = |flag: &dyn Fn(&TrainConfig) -> bool, only: &dyn Fn(&Obs) -> bool| {
        by_key.values().any(|os| {
            let os: Vec<_> = os
                .iter()
                .filter(|o| o.kind != Kind::Update && only(o))
                .collect();
            os.iter().any(|o| o.any(flag)) && os.iter().any(|o| o.any(|c| !flag(c)))
        })
    };
    let mut globals = BTreeSet::new();
    if contrast(&|c| c.compile, &|_| true) {
        globals.insert(FitParam::MultCompile);
    }
    if contrast(&|c| c.custom_kernels, &|_| true) {
        globals.insert(FitParam::MultKernels);
    }
    if contrast(&|c| c.tf32, &|o| o.model.precision == Precision::Fp32) {
        globals.insert(FitParam::MultTf32);
    }
    if contrast(&|c| c.act_checkpointing, &|_| true) {
        globals.insert(FitParam::CkptRecomputeFrac);
    }
    if contrast(&|c| c.offload, &|_| true) {
        globals.insert(FitParam::HostEfficiency);
    }
    let halfsat = by_key.values().any(|os| {
        let tokens: BTreeSet<u64> = os
            .iter()
            .filter(|o| o.kind != Kind::Update)
            .flat_map(|o| {
                o.candidates
                    .iter()
                    .map(|c| c.micro_batch * o.model.sample_tokens() as u64)
            })
            .collect();
        tokens.len() >= 2
    });
    if halfsat {
        globals.insert(FitParam::BatchHalfsatTokens);
    }
    let comm = by_key
        .values()
        .any(|os| os.len() >= 2 && os.iter().any(|o| o.machine.n_gpus > 1));
    if comm {
        globals.insert(FitParam::CommEfficiency);
    }
    if obs.iter().filter(|o| o.kind == Kind::Update).count() >= 2 {
        globals.insert(FitParam::UpdateBytesPerParam);
    }
    let mut frozen = Vec::new();
    for g in FitParam::all_global() {
        if globals.contains(&g) {
            free.push(g);
        } else {
            frozen.push(g);
        }
    }
    (free, frozen)
}

fn clamp_into_bounds(params: &mut PerfParams, free: &[FitParam]) {
    for f in free {
        let (lo, hi) = f.bounds();
        let v = f.get(params).clamp(lo, hi);
        f.set(params, v);
    }
}

/// Deterministic pattern search: each coordinate tries a step up and down in
/// log space and keeps moving while the loss drops; the step halves after a
/// sweep without progress.
fn descend(obs: &[Obs], free: &[FitParam], params: &mut PerfParams, options: &CalibrationOptions) {
    let affected: Vec<Vec<usize>> = free
        .iter()
        .map(|f| match f {
            FitParam::Mfu { gpu_id, family } => obs
                .iter()
                .enumerate()
                .filter(|(_, o)| o.machine.gpu.id == *gpu_id && o.model.family == *family)
                .map(|(i, _)| i)
                .collect(),
            _ => (0..obs.len()).collect(),
        })
        .collect();
    let mut losses: Vec<f64> = obs.iter().map(|o| o.loss(params)).collect();
    let mut step = 0.5f64;
    let mut sweeps = 0;
    while step >= options.tolerance && sweeps < options.max_sweeps {
        sweeps += 1;
        let mut moved = false;
        for (f, idx) in free.iter().zip(&affected) {
            let (lo, hi) = f.bounds();
            let (lo, hi) = (lo.ln(), hi.ln());
            let current: f64 = idx.iter().map(|&i| losses[i]).sum();
            let mut best = current;
            let mut x = f.get(params).ln();
            for dir in [1.0, -1.0] {
                loop {
                    let cand = (x + dir * step).clamp(lo, hi);
                    if cand == x {
                        break;
                    }
                    f.set(params, cand.exp());
                    let trial: Vec<f64> = idx.iter().map(|&i| obs[i].loss(params)).collect();
                    let total: f64 = trial.iter().sum();
                    if total < best {
                        best = total;
                        x = cand;
                        for (&i, l) in idx.iter().zip(trial) {
                            losses[i] = l;
                        }
                        moved = true;
                    } else {
                        break;
                    }
                }
                f.set(params, x.exp());
            }
        }
        if !moved {
            step /= 2.0;
        }
    }
}

fn impute(params: &mut PerfParams, catalog: &Catalog, free: &[FitParam]) -> Vec<FitParam> {
    let fitted: BTreeSet<(String, Family)> = free
        .iter()
        .filter_map(|f| match f {
            FitParam::Mfu { gpu_id, family } => Some((gpu_id.clone(), *family)),
            _ => None,
        })
        .collect();
    let mut imputed = Vec::new();
    for gpu in catalog.gpus() {
        let logs: Vec<f64> = fitted
            .iter()
            .filter(|(g, _)| *g == gpu.id)
            .map(|(g, fam)| params.mfu(g, *fam).ln())
            .collect();
        if logs.is_empty() {
            continue;
        }
        let geo = (logs.iter().sum::<f64>() / logs.len() as f64).exp();
        for fam in Family::ALL {
            if !fitted.contains(&(gpu.id.clone(), fam)) {
                params.set_mfu(&gpu.id, fam, geo);
                imputed.push(FitParam::Mfu {
                    gpu_id: gpu.id.clone(),
                    family: fam,
                });
            }
        }
    }
    imputed
}

fn residuals(obs: &[Obs], params: &PerfParams) -> Vec<Residual> {
    obs.iter()
        .map(|o| {
            let (predicted, i) = o.predict(params);
            Residual {
                model_id: o.model.id.clone(),
                gpu_id: o.machine.gpu.id.clone(),
                n_gpus: o.machine.n_gpus,
                config_hash: o.candidates[i].hash(),
                quantity: match o.kind {
                    Kind::Days => Quantity::Days,
                    Kind::Pass => Quantity::PassSeconds,
                    Kind::Update => Quantity::UpdateSeconds,
                },
                observed: o.observed,
                predicted,
                log_ratio: (predicted / o.observed).ln(),
            }
        })
        .collect()
}

fn fit(
    catalog: &Catalog,
    obs: &[Obs],
    unmatched: Vec<CellKey>,
    initial: &PerfParams,
    free: Vec<FitParam>,
    frozen: Vec<FitParam>,
    options: &CalibrationOptions,
) -> Calibration {
    let mut params = initial.clone();
    clamp_into_bounds(&mut params, &free);
    descend(obs, &free, &mut params, options);
    let imputed = if options.impute_unobserved {
        impute(&mut params, catalog, &free)
    } else {
        Vec::new()
    };
    let residuals = residuals(obs, &params);
    let rms = (residuals
        .iter()
        .map(|r| r.log_ratio * r.log_ratio)
        .sum::<f64>()
        / residuals.len() as f64)
        .sqrt();
    Calibration {
        params,
        free,
        frozen,
        imputed,
        residuals,
        unmatched,
        rms,
    }
}

/// Fit `initial` to records and/or day-level tables.
///
/// OOM records and infeasible cells are ignored. When more parameters are
/// identifiable than there are observations, returns
/// [`Error::DegenerateFit`] carrying a fit of the utilizations alone.
pub fn calibrate(
    catalog: &Catalog,
    records: &[MeasurementRecord],
    fixtures: &[ResultGrid],
    initial: &PerfParams,
    options: &CalibrationOptions,
) -> Result<Calibration> {
    initial.check()?;
    let (obs, unmatched) = build_observations(catalog, records, fixtures, initial)?;
    if obs.is_empty() {
        return Err(Error::NoObservations);
    }
    let (free, mut frozen) = identifiable(&obs);
    if free.len() > obs.len() {
        let (mfu, rest): (Vec<_>, Vec<_>) = free
            .iter()
            .cloned()
            .partition(|f| matches!(f, FitParam::Mfu { .. }));
        frozen.extend(rest);
        frozen.sort();
        let free_count = free.len();
        let fallback = fit(catalog, &obs, unmatched, initial, mfu, frozen, options);
        return Err(Error::DegenerateFit {
            free: free_count,
            observations: obs.len(),
            fallback: Box::new(fallback),
        });
    }
    Ok(fit(
        catalog, &obs, unmatched, initial, free, frozen, options,
    ))
}
