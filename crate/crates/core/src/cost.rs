//! Hardware cost-benefit analysis.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::PerfParams;
use crate::report::{CellKey, ResultGrid};
use crate::search::optimize;
use crate::spec::{MachineSpec, ModelSpec};

/// Five years.
pub const DEFAULT_LIFESPAN_DAYS: u32 = 1825;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriceCatalog {
    pub gpu_prices: BTreeMap<String, f64>,
    /// Keyed by GPU count the system supports.
    pub system_prices: BTreeMap<u32, f64>,
    pub lifespan_days: u32,
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct PriceDoc {
    version: u32,
    #[serde(default = "default_lifespan")]
    lifespan_days: u32,
    gpu_prices: BTreeMap<String, f64>,
    system_prices: BTreeMap<String, f64>,
}

fn default_lifespan() -> u32 {
    DEFAULT_LIFESPAN_DAYS
}

impl PriceCatalog {
    pub fn parse(what: &str, text: &str) -> Result<Self> {
        let doc: PriceDoc = toml::from_str(text).map_err(|e| Error::parse(what, e))?;
        if doc.version != crate::catalog::CATALOG_VERSION {
            return Err(Error::Version {
                what: what.to_string(),
                found: doc.version,
                expected: crate::catalog::CATALOG_VERSION,
            });
        }
        let mut system_prices = BTreeMap::new();
        for (k, v) in doc.system_prices {
            let n: u32 = k.parse().map_err(|_| {
                Error::invalid(what, format!("system tier `{k}` is not a GPU count"))
            })?;
            system_prices.insert(n, v);
        }
        let cat = Self {
            gpu_prices: doc.gpu_prices,
            system_prices,
            lifespan_days: doc.lifespan_days,
        };
        let all_positive = cat
            .gpu_prices
            .values()
            .chain(cat.system_prices.values())
            .all(|p| p.is_finite() && *p > 0.0);
        if !all_positive || cat.lifespan_days == 0 {
            return Err(Error::invalid(what, "prices and lifespan must be positive"));
        }
        Ok(cat)
    }
}

/// GPUs plus the system that hosts them.
pub fn machine_cost(machine: &MachineSpec, catalog: &PriceCatalog) -> Result<f64> {
    let gpu = catalog
        .gpu_prices
        .get(&machine.gpu.id)
        .ok_or_else(|| Error::UnknownGpu(machine.gpu.id.clone()))?;
    let system = catalog
        .system_prices
        .get(&machine.n_gpus)
        .ok_or(Error::UnknownTier(machine.n_gpus))?;
    Ok(machine.n_gpus as f64 * gpu + system)
}

/// Machine cost amortized over the hardware lifespan.
pub fn experiment_cost(machine: &MachineSpec, days: f64, catalog: &PriceCatalog) -> Result<f64> {
    if days.is_nan() || days < 0.0 {
        return Err(Error::invalid("days", "must be non-negative"));
    }
    Ok(machine_cost(machine, catalog)? * days / catalog.lifespan_days as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MachineOption {
    pub machine_id: String,
    pub gpu_id: String,
    pub n_gpus: u32,
    pub cost_usd: f64,
    pub days: f64,
}

/// Cost and training days of every machine where the run is feasible.
pub fn machine_options<F>(
    catalog: &PriceCatalog,
    machines: &[MachineSpec],
    mut days_of: F,
) -> Result<Vec<MachineOption>>
where
    F: FnMut(&MachineSpec) -> Result<Option<f64>>,
{
    let mut out = Vec::new();
    for m in machines {
        let Some(days) = days_of(m)? else { continue };
        out.push(MachineOption {
            machine_id: m.id.clone(),
            gpu_id: m.gpu.id.clone(),
            n_gpus: m.n_gpus,
            cost_usd: machine_cost(m, catalog)?,
            days,
        });
    }
    Ok(out)
}

/// Fastest affordable machine under an arbitrary source of training days.
/// Ties on days go to the cheaper machine.
pub fn best_under_budget_with<F>(
    budget: f64,
    catalog: &PriceCatalog,
    machines: &[MachineSpec],
    days_of: F,
) -> Result<Option<MachineOption>>
where
    F: FnMut(&MachineSpec) -> Result<Option<f64>>,
{
    if budget.is_nan() || budget <= 0.0 {
        return Err(Error::invalid("budget", "must be positive"));
    }
    let options = machine_options(catalog, machines, days_of)?;
    Ok(options
        .into_iter()
        .filter(|o| o.cost_usd <= budget)
        .min_by(|a, b| {
            a.days
                .total_cmp(&b.days)
                .then(a.cost_usd.total_cmp(&b.cost_usd))
        }))
}

/// Fastest affordable machine by predicted optimal training days.
pub fn best_under_budget(
    model: &ModelSpec,
    budget: f64,
    catalog: &PriceCatalog,
    machines: &[MachineSpec],
    params: &PerfParams,
) -> Result<Option<MachineOption>> {
    best_under_budget_with(budget, catalog, machines, predicted_days(model, params))
}

/// Days source backed by the configuration search.
pub fn predicted_days<'a>(
    model: &'a ModelSpec,
    params: &'a PerfParams,
) -> impl FnMut(&MachineSpec) -> Result<Option<f64>> + 'a {
    move |m| Ok(optimize(model, m, params)?.best.map(|b| b.estimate.days))
}

/// Days source backed by a result table.
pub fn grid_days<'a>(
    grid: &'a ResultGrid,
    model_id: &'a str,
) -> impl FnMut(&MachineSpec) -> Result<Option<f64>> + 'a {
    move |m| {
        let key = CellKey::new(model_id, &m.gpu.id, m.n_gpus);
        Ok(grid.get(&key).and_then(|v| v.days()))
    }
}

/// Points not dominated in both coordinates, sorted by the first.
///
/// A point is dominated when another has both coordinates no greater and at
/// least one strictly smaller.
pub fn pareto_frontier<T: PartialOrd + Copy>(points: &[(T, T)]) -> Vec<(T, T)> {
    pareto_frontier_by(points, |p| *p)
        .into_iter()
        .copied()
        .collect()
}

pub fn pareto_frontier_by<I, T, F>(items: &[I], key: F) -> Vec<&I>
where
    T: PartialOrd + Copy,
    F: Fn(&I) -> (T, T),
{
    let dominates = |a: (T, T), b: (T, T)| a.0 <= b.0 && a.1 <= b.1 && (a.0 < b.0 || a.1 < b.1);
    let mut front: Vec<&I> = items
        .iter()
        .filter(|x| !items.iter().any(|y| dominates(key(y), key(x))))
        .collect();
    front.sort_by(|a, b| {
        let (ka, kb) = (key(a), key(b));
        ka.0.partial_cmp(&kb.0)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(ka.1.partial_cmp(&kb.1).unwrap_or(std::cmp::Ordering::Equal))
    });
    front
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::Catalog;
    use approx::assert_abs_diff_eq;

    #[test]
    fn machine_costs() {
        let cat = Catalog::bundled();
        let p = cat.prices();
        let cost = |g, n| machine_cost(cat.machine(g, n).unwrap(), p).unwrap();
        assert_abs_diff_eq!(cost("rtx3090", 2), 4056.29, epsilon = 1e-9);
        assert_abs_diff_eq!(cost("h100", 4), 127_482.0, epsilon = 1e-9);
        assert_abs_diff_eq!(cost("a100", 8), 162_673.0, epsilon = 1e-9);
        assert_abs_diff_eq!(cost("h100", 8), 250_673.0, epsilon = 1e-9);
    }

    #[test]
    fn unknown_gpu_and_tier() {
        let cat = Catalog::bundled();
        let mut m = cat.machine("a100", 4).unwrap().clone();
        m.n_gpus = 16;
        assert!(matches!(
            machine_cost(&m, cat.prices()),
            Err(Error::UnknownTier(16))
        ));
        m.gpu.id = "v100".into();
        assert!(matches!(
            machine_cost(&m, cat.prices()),
            Err(Error::UnknownGpu(_))
        ));
    }

    #[test]
    fn experiment_costs() {
        let cat = Catalog::bundled();
        let p = cat.prices();
        let a100 = cat.machine("a100", 8).unwrap();
        assert_abs_diff_eq!(
            experiment_cost(a100, 9.0, p).unwrap(),
            802.22,
            epsilon = 0.01
        );
        let h100 = cat.machine("h100", 4).unwrap();
        assert_abs_diff_eq!(
            experiment_cost(h100, 8.0, p).unwrap(),
            558.83,
            epsilon = 0.01
        );
        assert_eq!(experiment_cost(h100, 0.0, p).unwrap(), 0.0);
        assert!(experiment_cost(h100, -1.0, p).is_err());
    }

    #[test]
    fn frontier_examples() {
        assert_eq!(
            pareto_frontier(&[(3.0, 6.0), (1.0, 10.0), (2.0, 5.0)]),
            vec![(1.0, 10.0), (2.0, 5.0)]
        );
        assert_eq!(pareto_frontier(&[(4, 4)]), vec![(4, 4)]);
        assert!(pareto_frontier::<f64>(&[]).is_empty());
        // equal points do not dominate each other
        assert_eq!(pareto_frontier(&[(1, 1), (1, 1)]).len(), 2);
    }

    #[test]
    fn budget_over_fixture_grid() {
        let cat = Catalog::bundled();
        let grid = ResultGrid::bundled_optimal();
        let pick = |budget| {
            best_under_budget_with(
                budget,
                cat.prices(),
                cat.machines(),
                grid_days(&grid, "pythia-1b"),
            )
            .unwrap()
        };
        let b = pick(40_000.0).unwrap();
        assert_eq!((b.gpu_id.as_str(), b.n_gpus, b.days), ("rtx3090", 8, 30.0));
        let b = pick(f64::MAX).unwrap();
        assert_eq!((b.gpu_id.as_str(), b.n_gpus, b.days), ("h100", 8, 4.0));
        assert!(pick(1000.0).is_none());
        assert!(
            best_under_budget_with(0.0, cat.prices(), cat.machines(), grid_days(&grid, "x"))
                .is_err()
        );
    }
}
