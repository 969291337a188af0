//! Aggregate statistics over result tables: speedups, combination spreads,
//! GPU-day comparisons and feasibility matrices.

use std::collections::BTreeMap;
use std::fmt;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analytic::analytic_days;
use crate::catalog::{bundled_file, Catalog};
use crate::error::{Error, Result};
use crate::params::PerfParams;
use crate::search::{optimize, SearchOutcome};

pub const BOOTSTRAP_RESAMPLES: usize = 10_000;
pub const BOOTSTRAP_SEED: u64 = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridLabel {
    Naive,
    FreeLunchOnly,
    Optimal,
    Analytic,
}

impl fmt::Display for GridLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GridLabel::Naive => "naive",
            GridLabel::FreeLunchOnly => "free_lunch_only",
            GridLabel::Optimal => "optimal",
            GridLabel::Analytic => "analytic",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CellKey {
    pub model_id: String,
    pub gpu_id: String,
    pub n_gpus: u32,
}

impl CellKey {
    pub fn new(model_id: &str, gpu_id: &str, n_gpus: u32) -> Self {
        Self {
            model_id: model_id.to_string(),
            gpu_id: gpu_id.to_string(),
            n_gpus,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellValue {
    Days(f64),
    Infeasible,
}

impl CellValue {
    pub fn days(&self) -> Option<f64> {
        match self {
            CellValue::Days(d) => Some(*d),
            CellValue::Infeasible => None,
        }
    }

    fn to_field(self) -> String {
        match self {
            CellValue::Days(d) => format!("{d}"),
            CellValue::Infeasible => "inf".to_string(),
        }
    }
}

/// Training days per (model, gpu, count) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "GridDoc", from = "GridDoc")]
pub struct ResultGrid {
    pub label: GridLabel,
    cells: BTreeMap<CellKey, CellValue>,
}

#[derive(Serialize, Deserialize)]
struct GridDoc {
    label: GridLabel,
    cells: Vec<GridCell>,
}

#[derive(Serialize, Deserialize)]
struct GridCell {
    #[serde(flatten)]
    key: CellKey,
    /// `None` when infeasible.
    days: Option<f64>,
}

impl From<ResultGrid> for GridDoc {
    fn from(g: ResultGrid) -> Self {
        let cells = g
            .cells
            .into_iter()
            .map(|(key, v)| GridCell {
                key,
                days: v.days(),
            })
            .collect();
        Self {
            label: g.label,
            cells,
        }
    }
}

impl From<GridDoc> for ResultGrid {
    fn from(d: GridDoc) -> Self {
        let cells = d
            .cells
            .into_iter()
            .map(|c| (c.key, c.days.map_or(CellValue::Infeasible, CellValue::Days)))
            .collect();
        Self {
            label: d.label,
            cells,
        }
    }
}

#[derive(Debug, Deserialize)]
struct GridRow {
    model_id: String,
    gpu_id: String,
    n_gpus: u32,
    days: String,
}

impl ResultGrid {
    pub fn new(label: GridLabel) -> Self {
        Self {
            label,
            cells: BTreeMap::new(),
        }
    }

    /// Optimal-settings table shipped with the crate.
    pub fn bundled_optimal() -> Self {
        Self::from_csv(
            GridLabel::Optimal,
            bundled_file("fixtures/table_optimal.csv").unwrap(),
        )
        .expect("bundled table")
    }

    /// Naive-settings table shipped with the crate.
    pub fn bundled_naive() -> Self {
        Self::from_csv(
            GridLabel::Naive,
            bundled_file("fixtures/table_naive.csv").unwrap(),
        )
        .expect("bundled table")
    }

    /// Parse `model_id,gpu_id,n_gpus,days` rows; `inf` marks infeasible.
    pub fn from_csv(label: GridLabel, text: &str) -> Result<Self> {
        let mut grid = Self::new(label);
        let mut reader = csv::Reader::from_reader(text.as_bytes());
        for row in reader.deserialize::<GridRow>() {
            let row = row.map_err(|e| Error::parse("result grid", e))?;
            let value = match row.days.trim() {
                "inf" | "---" => CellValue::Infeasible,
                s => {
                    let d: f64 = s
                        .parse()
                        .map_err(|_| Error::parse("result grid", format!("bad days `{s}`")))?;
                    if !(d >= 0.0 && d.is_finite()) {
                        return Err(Error::parse("result grid", format!("bad days `{s}`")));
                    }
                    CellValue::Days(d)
                }
            };
            let key = CellKey::new(&row.model_id, &row.gpu_id, row.n_gpus);
            if grid.cells.insert(key, value).is_some() {
                return Err(Error::parse("result grid", "duplicate cell"));
            }
        }
        Ok(grid)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("model_id,gpu_id,n_gpus,days\n");
        for (k, v) in &self.cells {
            let _ = writeln!(
                out,
                "{},{},{},{}",
                k.model_id,
                k.gpu_id,
                k.n_gpus,
                v.to_field()
            );
        }
        out
    }

    pub fn insert(&mut self, key: CellKey, value: CellValue) {
        self.cells.insert(key, value);
    }

    pub fn get(&self, key: &CellKey) -> Option<CellValue> {
        self.cells.get(key).copied()
    }

    pub fn cells(&self) -> impl Iterator<Item = (&CellKey, &CellValue)> {
        self.cells.iter()
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn retain(&mut self, mut f: impl FnMut(&CellKey) -> bool) {
        self.cells.retain(|k, _| f(k));
    }
}

/// Plot-ready rows `label,model_id,gpu_id,n_gpus,days` for several grids.
pub fn long_format(grids: &[&ResultGrid]) -> String {
    let mut out = String::from("label,model_id,gpu_id,n_gpus,days\n");
    for g in grids {
        for (k, v) in &g.cells {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                g.label,
                k.model_id,
                k.gpu_id,
                k.n_gpus,
                v.to_field()
            );
        }
    }
    out
}

/// Search outcomes for every catalog cell.
pub fn search_all(catalog: &Catalog, params: &PerfParams) -> Result<Vec<(CellKey, SearchOutcome)>> {
    let mut out = Vec::new();
    for m in catalog.models() {
        for machine in catalog.machines() {
            let key = CellKey::new(&m.id, &machine.gpu.id, machine.n_gpus);
            out.push((key, optimize(m, machine, params)?));
        }
    }
    Ok(out)
}

/// Predicted naive, free-lunch-only and optimal grids from search outcomes,
/// plus the analytic grid.
pub fn predicted_grids(
    catalog: &Catalog,
    outcomes: &[(CellKey, SearchOutcome)],
) -> Result<[ResultGrid; 4]> {
    let mut naive = ResultGrid::new(GridLabel::Naive);
    let mut free = ResultGrid::new(GridLabel::FreeLunchOnly);
    let mut optimal = ResultGrid::new(GridLabel::Optimal);
    let mut analytic = ResultGrid::new(GridLabel::Analytic);
    let value = |d: Option<f64>| d.map_or(CellValue::Infeasible, CellValue::Days);
    for (key, o) in outcomes {
        naive.insert(key.clone(), value(o.naive.map(|c| c.estimate.days)));
        free.insert(key.clone(), value(o.free_lunch().and_then(|e| e.days())));
        optimal.insert(key.clone(), value(o.best.map(|c| c.estimate.days)));
        let m = catalog.model(&key.model_id)?;
        let machine = catalog.machine(&key.gpu_id, key.n_gpus)?;
        analytic.insert(
            key.clone(),
            CellValue::Days(analytic_days(m, machine)?.days),
        );
    }
    Ok([naive, free, optimal, analytic])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpeedupSummary {
    pub mean: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n: usize,
}

/// Mean of `base / better` over cells feasible in both grids and accepted
/// by `filter`, with a 95% percentile-bootstrap interval.
pub fn speedup_summary(
    base: &ResultGrid,
    better: &ResultGrid,
    filter: impl Fn(&CellKey) -> bool,
) -> Result<SpeedupSummary> {
    let ratios: Vec<f64> = base
        .cells()
        .filter(|(k, _)| filter(k))
        .filter_map(|(k, v)| {
            let b = v.days()?;
            let g = better.get(k)?.days()?;
            (g > 0.0).then_some(b / g)
        })
        .collect();
    if ratios.is_empty() {
        return Err(Error::EmptySelection(
            "no cell is feasible in both grids".into(),
        ));
    }
    let mean = mean(&ratios);
    let (ci_low, ci_high) = bootstrap_ci(&ratios, BOOTSTRAP_RESAMPLES, BOOTSTRAP_SEED);
    Ok(SpeedupSummary {
        mean,
        ci_low,
        ci_high,
        n: ratios.len(),
    })
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// 95% percentile bootstrap interval of the mean.
pub fn bootstrap_ci(xs: &[f64], resamples: usize, seed: u64) -> (f64, f64) {
    let n = xs.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| (0..n).map(|_| xs[rng.gen_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let lo = ((resamples as f64) * 0.025).floor() as usize;
    let hi = ((resamples as f64) * 0.975).ceil() as usize - 1;
    (means[lo], means[hi.min(resamples - 1)])
}

/// Feasible days of every combination evaluated for one setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComboGroup {
    pub days: Vec<f64>,
    /// Days with no memory-saving method, when feasible.
    pub free_lunch: Option<f64>,
}

impl ComboGroup {
    pub fn from_outcome(outcome: &SearchOutcome) -> Self {
        Self {
            days: outcome.table.iter().filter_map(|e| e.days()).collect(),
            free_lunch: outcome.free_lunch().and_then(|e| e.days()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComboSpread {
    pub best_vs_median: f64,
    pub best_vs_worst: f64,
    /// Absent when no group has a feasible free-lunch setting.
    pub median_vs_freelunch: Option<f64>,
    pub groups: usize,
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    }
}

/// Per-setting median/best, worst/best and median/free-lunch ratios,
/// averaged over settings.
pub fn combo_spread(groups: &[ComboGroup]) -> Result<ComboSpread> {
    if groups.is_empty() {
        return Err(Error::EmptySelection("no settings".into()));
    }
    let (mut vs_median, mut vs_worst, mut vs_free) = (Vec::new(), Vec::new(), Vec::new());
    for g in groups {
        let mut d = g.days.clone();
        if d.is_empty() {
            return Err(Error::EmptySelection(
                "a setting has no feasible combination".into(),
            ));
        }
        d.sort_by(f64::total_cmp);
        let best = d[0];
        let med = median(&d);
        vs_median.push(med / best);
        vs_worst.push(d[d.len() - 1] / best);
        if let Some(f) = g.free_lunch {
            vs_free.push(med / f);
        }
    }
    Ok(ComboSpread {
        best_vs_median: mean(&vs_median),
        best_vs_worst: mean(&vs_worst),
        median_vs_freelunch: (!vs_free.is_empty()).then(|| mean(&vs_free)),
        groups: groups.len(),
    })
}

/// Hardware and duration of an original training run, when known.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OriginalRun {
    pub model_id: String,
    pub n_gpus: Option<u32>,
    pub days: Option<f64>,
    pub hardware: String,
}

impl OriginalRun {
    pub fn gpu_days(&self) -> Option<f64> {
        Some(self.n_gpus? as f64 * self.days?)
    }
}

#[derive(Debug, Deserialize)]
struct OriginalRow {
    model_id: String,
    n_gpus: String,
    days: String,
    hardware: String,
}

pub fn parse_original_runs(text: &str) -> Result<Vec<OriginalRun>> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let mut out = Vec::new();
    for row in reader.deserialize::<OriginalRow>() {
        let row = row.map_err(|e| Error::parse("original runs", e))?;
        out.push(OriginalRun {
            model_id: row.model_id,
            n_gpus: row.n_gpus.trim().parse().ok(),
            days: row.days.trim().parse().ok(),
            hardware: row.hardware,
        });
    }
    Ok(out)
}

pub fn bundled_original_runs() -> Vec<OriginalRun> {
    parse_original_runs(bundled_file("fixtures/original_resources.csv").unwrap())
        .expect("bundled original runs")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpuDaysRow {
    pub model_id: String,
    pub original_gpu_days: f64,
    pub ours_gpu_days: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpuDaysComparison {
    pub rows: Vec<GpuDaysRow>,
    pub mean: f64,
}

/// Original GPU-days over ours on `n_gpus` x `gpu_id`, per model with a
/// known original run.
pub fn gpu_days_comparison(
    original: &[OriginalRun],
    ours: &ResultGrid,
    gpu_id: &str,
    n_gpus: u32,
) -> Result<GpuDaysComparison> {
    let mut rows = Vec::new();
    for run in original {
        let Some(orig) = run.gpu_days() else { continue };
        let key = CellKey::new(&run.model_id, gpu_id, n_gpus);
        let Some(days) = ours.get(&key).and_then(|v| v.days()) else {
            continue;
        };
        let ours_gpu_days = n_gpus as f64 * days;
        rows.push(GpuDaysRow {
            model_id: run.model_id.clone(),
            original_gpu_days: orig,
            ours_gpu_days,
            ratio: orig / ours_gpu_days,
        });
    }
    if rows.is_empty() {
        return Err(Error::EmptySelection(
            "no model present in both tables".into(),
        ));
    }
    let mean = mean(&rows.iter().map(|r| r.ratio).collect::<Vec<_>>());
    Ok(GpuDaysComparison { rows, mean })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Feasibility {
    NaiveFeasible,
    OptimalOnly,
    Infeasible,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityRow {
    pub model_id: String,
    pub gpu_id: String,
    /// `None` for rows aggregated over GPU counts.
    pub n_gpus: Option<u32>,
    pub class: Feasibility,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FeasibilityCounts {
    pub total: usize,
    pub naive_infeasible: usize,
    pub optimal_feasible: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityMatrix {
    pub cells: Vec<FeasibilityRow>,
    pub cell_counts: FeasibilityCounts,
    /// One row per (model, gpu): feasible if any selected GPU count is.
    pub combos: Vec<FeasibilityRow>,
    pub combo_counts: FeasibilityCounts,
}

fn classify(naive: bool, optimal: bool) -> Feasibility {
    if naive {
        Feasibility::NaiveFeasible
    } else if optimal {
        Feasibility::OptimalOnly
    } else {
        Feasibility::Infeasible
    }
}

fn count(rows: &[FeasibilityRow]) -> FeasibilityCounts {
    FeasibilityCounts {
        total: rows.len(),
        naive_infeasible: rows
            .iter()
            .filter(|r| r.class != Feasibility::NaiveFeasible)
            .count(),
        optimal_feasible: rows
            .iter()
            .filter(|r| r.class != Feasibility::Infeasible)
            .count(),
    }
}

/// Classify cells by which settings make them feasible.
pub fn feasibility_matrix(
    naive: &ResultGrid,
    optimal: &ResultGrid,
    filter: impl Fn(&CellKey) -> bool,
) -> FeasibilityMatrix {
    let mut cells = Vec::new();
    let mut combos: BTreeMap<(String, String), (bool, bool)> = BTreeMap::new();
    for (k, v) in optimal.cells().filter(|(k, _)| filter(k)) {
        let opt = v.days().is_some();
        let nai = naive.get(k).and_then(|v| v.days()).is_some();
        // a setting that runs naively also runs with the search
        let opt = opt || nai;
        cells.push(FeasibilityRow {
            model_id: k.model_id.clone(),
            gpu_id: k.gpu_id.clone(),
            n_gpus: Some(k.n_gpus),
            class: classify(nai, opt),
        });
        let e = combos
            .entry((k.model_id.clone(), k.gpu_id.clone()))
            .or_default();
        e.0 |= nai;
        e.1 |= opt;
    }
    let combos: Vec<FeasibilityRow> = combos
        .into_iter()
        .map(|((model_id, gpu_id), (n, o))| FeasibilityRow {
            model_id,
            gpu_id,
            n_gpus: None,
            class: classify(n, o),
        })
        .collect();
    FeasibilityMatrix {
        cell_counts: count(&cells),
        combo_counts: count(&combos),
        cells,
        combos,
    }
}

pub fn is_pythia(key: &CellKey) -> bool {
    key.model_id.starts_with("pythia-")
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn grid(label: GridLabel, cells: &[(&str, f64)]) -> ResultGrid {
        let mut g = ResultGrid::new(label);
        for (m, d) in cells {
            let v = if d.is_finite() {
                CellValue::Days(*d)
            } else {
                CellValue::Infeasible
            };
            g.insert(CellKey::new(m, "a100", 1), v);
        }
        g
    }

    #[test]
    fn identity_speedup() {
        let g = ResultGrid::bundled_optimal();
        let s = speedup_summary(&g, &g, |_| true).unwrap();
        assert_eq!(s.mean, 1.0);
        assert_eq!((s.ci_low, s.ci_high), (1.0, 1.0));
    }

    #[test]
    fn hand_speedup() {
        let base = grid(
            GridLabel::Naive,
            &[("a", 2.0), ("b", 8.0), ("c", f64::INFINITY)],
        );
        let better = grid(GridLabel::Optimal, &[("a", 1.0), ("b", 4.0), ("c", 1.0)]);
        let s = speedup_summary(&base, &better, |_| true).unwrap();
        assert_eq!(s.mean, 2.0);
        assert_eq!(s.n, 2);
        assert!(matches!(
            speedup_summary(&base, &better, |_| false),
            Err(Error::EmptySelection(_))
        ));
    }

    #[test]
    fn bootstrap_is_deterministic_and_brackets_mean() {
        let xs = [1.0, 2.0, 3.0, 10.0, 4.0];
        let a = bootstrap_ci(&xs, 2000, 0);
        assert_eq!(a, bootstrap_ci(&xs, 2000, 0));
        assert!(a.0 < 4.0 && 4.0 < a.1);
    }

    #[test]
    fn combo_arithmetic() {
        let s = combo_spread(&[ComboGroup {
            days: vec![47.0, 10.0, 20.0],
            free_lunch: Some(12.0),
        }])
        .unwrap();
        assert_eq!(s.best_vs_median, 2.0);
        assert_eq!(s.best_vs_worst, 4.7);
        assert_relative_eq!(s.median_vs_freelunch.unwrap(), 20.0 / 12.0);

        let one = combo_spread(&[ComboGroup {
            days: vec![5.0],
            free_lunch: Some(5.0),
        }])
        .unwrap();
        assert_eq!((one.best_vs_median, one.best_vs_worst), (1.0, 1.0));
        assert_eq!(one.median_vs_freelunch, Some(1.0));

        let none = combo_spread(&[ComboGroup {
            days: vec![5.0, 7.0],
            free_lunch: None,
        }])
        .unwrap();
        assert_eq!(none.median_vs_freelunch, None);
        assert_eq!(none.best_vs_median, 1.2);
    }

    #[test]
    fn gpu_days_examples() {
        let ours = ResultGrid::bundled_optimal();
        let cmp = gpu_days_comparison(&bundled_original_runs(), &ours, "a100", 8).unwrap();
        let pythia = cmp.rows.iter().find(|r| r.model_id == "pythia-1b").unwrap();
        assert_relative_eq!(pythia.ratio, 192.0 / 72.0);
        assert_eq!(cmp.rows.len(), 8);
        assert!(cmp.rows.iter().all(|r| r.model_id != "mamba-2.8b"));

        let equal = [OriginalRun {
            model_id: "pythia-1b".into(),
            n_gpus: Some(8),
            days: Some(9.0),
            hardware: String::new(),
        }];
        assert_eq!(
            gpu_days_comparison(&equal, &ours, "a100", 8).unwrap().mean,
            1.0
        );
    }

    #[test]
    fn feasibility_counts() {
        let naive = ResultGrid::bundled_naive();
        let optimal = ResultGrid::bundled_optimal();
        let m = feasibility_matrix(&naive, &optimal, |k| is_pythia(k) && k.n_gpus > 1);
        assert_eq!(m.combo_counts.total, 20);
        assert_eq!(m.combo_counts.naive_infeasible, 9);
        assert_eq!(m.combo_counts.optimal_feasible, 20);

        let empty = feasibility_matrix(
            &ResultGrid::new(GridLabel::Naive),
            &ResultGrid::new(GridLabel::Optimal),
            |_| true,
        );
        assert!(empty.cells.is_empty() && empty.combos.is_empty());
    }

    #[test]
    fn grid_csv_round_trip() {
        let g = ResultGrid::bundled_naive();
        let back = ResultGrid::from_csv(GridLabel::Naive, &g.to_csv()).unwrap();
        assert_eq!(back, g);
        let json: ResultGrid = serde_json::from_str(&serde_json::to_string(&g).unwrap()).unwrap();
        assert_eq!(json, g);
        assert!(
            ResultGrid::from_csv(GridLabel::Naive, "model_id,gpu_id,n_gpus,days\na,b,1,-3\n")
                .is_err()
        );
    }
}
