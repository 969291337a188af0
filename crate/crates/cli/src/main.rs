use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use planner_core::analytic::analytic_days;
use planner_core::calibrate::{calibrate, CalibrationOptions};
use planner_core::catalog::{export_bundled, Catalog, CATALOG_DIR_ENV, CATALOG_VERSION};
use planner_core::cost::{
    best_under_budget_with, experiment_cost, grid_days, machine_options, pareto_frontier_by,
    predicted_days, MachineOption,
};
use planner_core::record::parse_jsonl;
use planner_core::report::{
    bundled_original_runs, combo_spread, feasibility_matrix, gpu_days_comparison, long_format,
    predicted_grids, search_all, speedup_summary, ComboGroup, GridLabel, ResultGrid,
};
use planner_core::search::{naive_estimate, optimize};
use planner_core::{Error, PerfParams};

mod manifest;

use manifest::RunManifest;

const EXIT_INFEASIBLE: u8 = 2;
const EXIT_INVALID: u8 = 3;
const EXIT_DEGENERATE: u8 = 4;

/// Feasibility, training-time and hardware-cost planner for pre-training
/// models on small GPU clusters.
#[derive(Parser, Debug)]
#[command(name = "planner", version)]
struct Cli {
    /// Performance parameter file (defaults to the shipped calibration).
    #[arg(long, global = true, env = "PLANNER_PARAMS")]
    params: Option<PathBuf>,

    /// Also write JSON and text results plus a run manifest here.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Print JSON instead of text.
    #[arg(long, global = true)]
    json: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Setting {
    #[arg(long)]
    model: String,
    #[arg(long)]
    gpu: String,
    #[arg(long, default_value_t = 1)]
    n: u32,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Days at full utilization of every GPU's peak throughput.
    Analytic(Setting),
    /// Search efficient-training configurations for the fastest feasible one.
    Search {
        #[command(flatten)]
        setting: Setting,
        /// Print the table as CSV.
        #[arg(long)]
        csv: bool,
    },
    /// Estimate the run with no efficiency method enabled.
    Naive(Setting),
    /// Fit performance parameters to measurements and/or result tables.
    Calibrate {
        /// JSONL measurement records.
        #[arg(long)]
        records: Vec<PathBuf>,
        /// Include the bundled naive and optimal tables.
        #[arg(long)]
        fixtures: bool,
        /// Extra result table as `label=path` (label: naive, optimal, free_lunch_only).
        #[arg(long, value_parser = parse_table_arg)]
        table: Vec<(GridLabel, PathBuf)>,
        /// Start from these parameters instead of the built-in defaults.
        #[arg(long)]
        initial: Option<PathBuf>,
        /// Fill unobserved (gpu, family) utilizations from the same GPU.
        #[arg(long)]
        impute: bool,
        /// Write the fitted parameter file here.
        #[arg(long)]
        output: Option<PathBuf>,
        /// Write per-observation residuals as CSV here.
        #[arg(long)]
        residuals: Option<PathBuf>,
    },
    /// Hardware cost analysis.
    #[command(subcommand)]
    Cost(CostCommand),
    /// Aggregate statistics over result tables.
    #[command(subcommand)]
    Report(ReportCommand),
    /// Bundled data files.
    #[command(subcommand)]
    Fixtures(FixturesCommand),
}

#[derive(Clone, Copy, Debug, Default, ValueEnum)]
enum Source {
    /// Tables shipped with the planner.
    Fixtures,
    /// Tables predicted with the current parameters.
    #[default]
    Predicted,
}

#[derive(Subcommand, Debug)]
enum CostCommand {
    /// Fastest machine whose price fits the budget.
    Budget {
        #[arg(long)]
        model: String,
        #[arg(long)]
        budget: f64,
        #[arg(long, value_enum, default_value_t = Source::Predicted)]
        source: Source,
    },
    /// Machines not beaten on both price and training days.
    Pareto {
        #[arg(long)]
        model: String,
        #[arg(long, value_enum, default_value_t = Source::Predicted)]
        source: Source,
    },
    /// Hardware cost of one run amortized over the hardware lifespan.
    Experiment {
        #[arg(long)]
        gpu: String,
        #[arg(long)]
        n: u32,
        #[arg(long)]
        days: f64,
    },
}

#[derive(Args, Debug)]
struct Selection {
    #[arg(long, value_enum, default_value_t = Source::Predicted)]
    source: Source,
    /// Keep only models whose id starts with this prefix.
    #[arg(long)]
    model_prefix: Option<String>,
    /// Keep only settings with at least this many GPUs.
    #[arg(long, default_value_t = 1)]
    min_gpus: u32,
}

#[derive(Subcommand, Debug)]
enum ReportCommand {
    /// Mean naive-over-optimal speedup with a bootstrap interval.
    Speedups(Selection),
    /// Spread of training days across method combinations (predicted only).
    Combos {
        #[arg(long)]
        model_prefix: Option<String>,
        #[arg(long, default_value_t = 1)]
        min_gpus: u32,
    },
    /// Original GPU-days over ours on one machine.
    Gpudays {
        #[arg(long, value_enum, default_value_t = Source::Predicted)]
        source: Source,
        #[arg(long, default_value = "a100")]
        gpu: String,
        #[arg(long, default_value_t = 8)]
        n: u32,
    },
    /// Which settings are feasible naively, only with the search, or never.
    Feasibility(Selection),
    /// Long-format CSV of every grid for plotting.
    PlotData {
        #[arg(long, value_enum, default_value_t = Source::Predicted)]
        source: Source,
    },
}

#[derive(Subcommand, Debug)]
enum FixturesCommand {
    /// Write the bundled catalog, tables and parameters to a directory.
    Export {
        #[arg(long)]
        dir: PathBuf,
    },
}

fn parse_table_arg(s: &str) -> Result<(GridLabel, PathBuf), String> {
    let (label, path) = s.split_once('=').ok_or("expected label=path")?;
    let label = match label {
        "naive" => GridLabel::Naive,
        "optimal" => GridLabel::Optimal,
        "free_lunch_only" => GridLabel::FreeLunchOnly,
        other => return Err(format!("unknown table label `{other}`")),
    };
    Ok((label, PathBuf::from(path)))
}

/// A command's result: JSON and text renderings plus extra files for `--out`.
struct Output {
    name: &'static str,
    json: serde_json::Value,
    text: String,
    files: Vec<(String, String)>,
    infeasible: bool,
}

impl Output {
    fn new(name: &'static str, value: &impl Serialize, text: String) -> Self {
        Self {
            name,
            json: serde_json::to_value(value).expect("result serializes"),
            text,
            files: Vec::new(),
            infeasible: false,
        }
    }
}

struct Env {
    catalog: Catalog,
    params: PerfParams,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INVALID } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = match e.downcast_ref::<Error>() {
                Some(Error::DegenerateFit { .. }) => EXIT_DEGENERATE,
                _ => EXIT_INVALID,
            };
            ExitCode::from(code)
        }
    }
}

fn load_context(cli: &Cli) -> anyhow::Result<Env> {
    let catalog = Catalog::from_env()
        .with_context(|| format!("loading catalog (set {CATALOG_DIR_ENV} to override)"))?;
    let params = match &cli.params {
        Some(p) => PerfParams::load(p)?,
        None => PerfParams::shipped(),
    };
    Ok(Env { catalog, params })
}

fn run(cli: &Cli) -> anyhow::Result<u8> {
    let ctx = load_context(cli)?;
    let output = match &cli.command {
        Command::Analytic(s) => cmd_analytic(&ctx, s)?,
        Command::Search { setting, csv } => cmd_search(&ctx, setting, *csv)?,
        Command::Naive(s) => cmd_naive(&ctx, s)?,
        Command::Calibrate {
            records,
            fixtures,
            table,
            initial,
            impute,
            output,
            residuals,
        } => {
            let initial = match initial {
                Some(p) => PerfParams::load(p)?,
                None => PerfParams::default(),
            };
            let args = CalibrateArgs {
                records,
                fixtures: *fixtures,
                tables: table,
                initial,
                impute: *impute,
                output: output.as_deref(),
                residuals: residuals.as_deref(),
            };
            match cmd_calibrate(&ctx, args) {
                Ok(out) => out,
                Err(e) => return finish_degenerate(cli, e),
            }
        }
        Command::Cost(c) => cmd_cost(&ctx, c)?,
        Command::Report(r) => cmd_report(&ctx, r)?,
        Command::Fixtures(FixturesCommand::Export { dir }) => {
            let paths = export_bundled(dir)?;
            let text = paths.iter().fold(String::new(), |mut s, p| {
                let _ = writeln!(s, "{}", p.display());
                s
            });
            Output::new("fixtures", &paths, text)
        }
    };
    emit(cli, &ctx, &output)?;
    Ok(if output.infeasible {
        EXIT_INFEASIBLE
    } else {
        0
    })
}

fn finish_degenerate(_cli: &Cli, e: anyhow::Error) -> anyhow::Result<u8> {
    if let Some(Error::DegenerateFit { fallback, .. }) = e.downcast_ref::<Error>() {
        eprintln!("error: {e:#}");
        eprintln!("utilization-only fit:");
        eprint!("{}", fallback.params.to_toml());
        return Ok(EXIT_DEGENERATE);
    }
    Err(e)
}

fn emit(cli: &Cli, ctx: &Env, output: &Output) -> anyhow::Result<()> {
    if cli.json {
        println!("{}", serde_json::to_string_pretty(&output.json)?);
    } else {
        print!("{}", output.text);
    }
    let Some(dir) = &cli.out else { return Ok(()) };
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut files = vec![
        (
            format!("{}.json", output.name),
            serde_json::to_string_pretty(&output.json)? + "\n",
        ),
        (format!("{}.txt", output.name), output.text.clone()),
    ];
    files.extend(output.files.iter().cloned());
    let mut written = Vec::new();
    for (name, contents) in &files {
        let path = dir.join(name);
        fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
        written.push(path);
    }
    let manifest = RunManifest::new(
        std::env::args().collect::<Vec<_>>().join(" "),
        CATALOG_VERSION,
        ctx.params.hash(),
        written,
    );
    manifest.write(&dir.join("manifest.json"))?;
    Ok(())
}

fn cmd_analytic(ctx: &Env, s: &Setting) -> anyhow::Result<Output> {
    let model = ctx.catalog.model(&s.model)?;
    let machine = ctx.catalog.machine(&s.gpu, s.n)?;
    let est = analytic_days(model, machine)?;
    let text = format!(
        "{} on {}: {:.3e} FLOPs at {:.3e} FLOP/s -> {:.1} days\n",
        model.id, machine.id, est.total_flops, est.aggregate_throughput, est.days
    );
    Ok(Output::new("analytic", &est, text))
}

fn cmd_search(ctx: &Env, s: &Setting, csv: bool) -> anyhow::Result<Output> {
    let model = ctx.catalog.model(&s.model)?;
    let machine = ctx.catalog.machine(&s.gpu, s.n)?;
    let outcome = optimize(model, machine, &ctx.params)?;
    let text = if csv {
        outcome.to_csv()
    } else {
        outcome.to_text()
    };
    let mut out = Output::new("search", &outcome, text);
    out.files.push(("search.csv".into(), outcome.to_csv()));
    out.infeasible = outcome.best.is_none();
    Ok(out)
}

fn cmd_naive(ctx: &Env, s: &Setting) -> anyhow::Result<Output> {
    let model = ctx.catalog.model(&s.model)?;
    let machine = ctx.catalog.machine(&s.gpu, s.n)?;
    Ok(match naive_estimate(model, machine, &ctx.params)? {
        Ok(choice) => {
            let text = format!(
                "{} on {} (naive): {} -> {:.1} days\n",
                model.id, machine.id, choice.config, choice.estimate.days
            );
            Output::new("naive", &choice, text)
        }
        Err(limiting) => {
            let text = format!(
                "{} on {} (naive): infeasible ({limiting})\n",
                model.id, machine.id
            );
            let mut out = Output::new("naive", &json!({ "infeasible": limiting }), text);
            out.infeasible = true;
            out
        }
    })
}

struct CalibrateArgs<'a> {
    records: &'a [PathBuf],
    fixtures: bool,
    tables: &'a [(GridLabel, PathBuf)],
    initial: PerfParams,
    impute: bool,
    output: Option<&'a Path>,
    residuals: Option<&'a Path>,
}

fn read(path: &Path) -> anyhow::Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn cmd_calibrate(ctx: &Env, args: CalibrateArgs) -> anyhow::Result<Output> {
    let mut records = Vec::new();
    for p in args.records {
        records.extend(parse_jsonl(&read(p)?)?);
    }
    let mut grids = Vec::new();
    if args.fixtures {
        grids.push(ResultGrid::bundled_naive());
        grids.push(ResultGrid::bundled_optimal());
    }
    for (label, p) in args.tables {
        grids.push(ResultGrid::from_csv(*label, &read(p)?)?);
    }
    if records.is_empty() && grids.is_empty() {
        bail!("nothing to calibrate against: pass --records, --fixtures or --table");
    }
    let options = CalibrationOptions {
        impute_unobserved: args.impute,
        ..Default::default()
    };
    let fit = calibrate(&ctx.catalog, &records, &grids, &args.initial, &options)?;
    let toml = fit.params.to_toml();
    let residuals = fit.residuals_csv();
    if let Some(p) = args.output {
        fs::write(p, &toml).with_context(|| format!("writing {}", p.display()))?;
    }
    if let Some(p) = args.residuals {
        fs::write(p, &residuals).with_context(|| format!("writing {}", p.display()))?;
    }
    let mut text = String::new();
    let _ = writeln!(text, "observations: {}", fit.residuals.len());
    let _ = writeln!(text, "residual log-ratio rms: {:.4}", fit.rms);
    for f in &fit.free {
        let _ = writeln!(text, "  {f} = {:.6}", f.get(&fit.params));
    }
    if !fit.frozen.is_empty() {
        let names: Vec<String> = fit.frozen.iter().map(|f| f.to_string()).collect();
        let _ = writeln!(text, "frozen: {}", names.join(", "));
    }
    if !fit.unmatched.is_empty() {
        let _ = writeln!(
            text,
            "cells the memory model rejects: {}",
            fit.unmatched.len()
        );
    }
    if args.output.is_none() {
        text.push('\n');
        text.push_str(&toml);
    }
    let mut out = Output::new("calibration", &fit, text);
    out.files.push(("perf_params.toml".into(), toml));
    out.files.push(("residuals.csv".into(), residuals));
    Ok(out)
}

fn grid_for(ctx: &Env, source: Source, label: GridLabel) -> anyhow::Result<ResultGrid> {
    Ok(match (source, label) {
        (Source::Fixtures, GridLabel::Naive) => ResultGrid::bundled_naive(),
        (Source::Fixtures, GridLabel::Optimal) => ResultGrid::bundled_optimal(),
        (Source::Fixtures, l) => bail!("no bundled {l} table"),
        (Source::Predicted, l) => {
            let outcomes = search_all(&ctx.catalog, &ctx.params)?;
            predicted_grids(&ctx.catalog, &outcomes)?
                .into_iter()
                .find(|g| g.label == l)
                .expect("every label is predicted")
        }
    })
}

fn options_text(options: &[MachineOption], marks: &[bool]) -> String {
    let mut text = format!("{:<14} {:>12} {:>10}\n", "machine", "cost_usd", "days");
    for (o, m) in options.iter().zip(marks) {
        let _ = writeln!(
            text,
            "{:<14} {:>12.2} {:>10.1}{}",
            o.machine_id,
            o.cost_usd,
            o.days,
            if *m { "  *" } else { "" }
        );
    }
    text
}

fn cmd_cost(ctx: &Env, c: &CostCommand) -> anyhow::Result<Output> {
    let prices = ctx.catalog.prices();
    let machines = ctx.catalog.machines();
    match c {
        CostCommand::Experiment { gpu, n, days } => {
            let machine = ctx.catalog.machine(gpu, *n)?;
            let usd = experiment_cost(machine, *days, prices)?;
            let text = format!("{} for {days} days: ${usd:.2}\n", machine.id);
            Ok(Output::new(
                "experiment_cost",
                &json!({ "machine_id": machine.id, "days": days, "cost_usd": usd }),
                text,
            ))
        }
        CostCommand::Budget {
            model,
            budget,
            source,
        } => {
            let m = ctx.catalog.model(model)?;
            let pick = match source {
                Source::Predicted => best_under_budget_with(
                    *budget,
                    prices,
                    machines,
                    predicted_days(m, &ctx.params),
                )?,
                Source::Fixtures => {
                    let grid = ResultGrid::bundled_optimal();
                    best_under_budget_with(*budget, prices, machines, grid_days(&grid, &m.id))?
                }
            };
            Ok(match pick {
                Some(o) => {
                    let text = format!(
                        "{} under ${budget}: {} (${:.2}) -> {:.1} days\n",
                        m.id, o.machine_id, o.cost_usd, o.days
                    );
                    Output::new("budget", &o, text)
                }
                None => {
                    let text = format!("{} under ${budget}: no feasible machine\n", m.id);
                    let mut out = Output::new("budget", &serde_json::Value::Null, text);
                    out.infeasible = true;
                    out
                }
            })
        }
        CostCommand::Pareto { model, source } => {
            let m = ctx.catalog.model(model)?;
            let options = match source {
                Source::Predicted => {
                    machine_options(prices, machines, predicted_days(m, &ctx.params))?
                }
                Source::Fixtures => {
                    let grid = ResultGrid::bundled_optimal();
                    machine_options(prices, machines, grid_days(&grid, &m.id))?
                }
            };
            let front: Vec<MachineOption> = pareto_frontier_by(&options, |o| (o.cost_usd, o.days))
                .into_iter()
                .cloned()
                .collect();
            let marks = vec![true; front.len()];
            let text = options_text(&front, &marks);
            let mut out = Output::new(
                "pareto",
                &json!({ "frontier": front, "all": options }),
                text,
            );
            out.infeasible = options.is_empty();
            Ok(out)
        }
    }
}

fn selection_filter(
    prefix: Option<&str>,
    min_gpus: u32,
) -> impl Fn(&planner_core::CellKey) -> bool + '_ {
    move |k| prefix.is_none_or(|p| k.model_id.starts_with(p)) && k.n_gpus >= min_gpus
}

fn cmd_report(ctx: &Env, r: &ReportCommand) -> anyhow::Result<Output> {
    match r {
        ReportCommand::Speedups(sel) => {
            let naive = grid_for(ctx, sel.source, GridLabel::Naive)?;
            let optimal = grid_for(ctx, sel.source, GridLabel::Optimal)?;
            let s = speedup_summary(
                &naive,
                &optimal,
                selection_filter(sel.model_prefix.as_deref(), sel.min_gpus),
            )?;
            let text = format!(
                "mean naive/optimal speedup over {} cells: {:.2}x (95% CI {:.2}-{:.2})\n",
                s.n, s.mean, s.ci_low, s.ci_high
            );
            Ok(Output::new("speedups", &s, text))
        }
        ReportCommand::Combos {
            model_prefix,
            min_gpus,
        } => {
            let filter = selection_filter(model_prefix.as_deref(), *min_gpus);
            let outcomes = search_all(&ctx.catalog, &ctx.params)?;
            let groups: Vec<ComboGroup> = outcomes
                .iter()
                .filter(|(k, o)| filter(k) && o.best.is_some())
                .map(|(_, o)| ComboGroup::from_outcome(o))
                .collect();
            let s = combo_spread(&groups)?;
            let mut text = format!(
                "over {} settings: median/best {:.2}x, worst/best {:.2}x",
                s.groups, s.best_vs_median, s.best_vs_worst
            );
            match s.median_vs_freelunch {
                Some(v) => {
                    let _ = writeln!(text, ", median/free-lunch {v:.2}x");
                }
                None => text.push('\n'),
            }
            Ok(Output::new("combos", &s, text))
        }
        ReportCommand::Gpudays { source, gpu, n } => {
            let ours = grid_for(ctx, *source, GridLabel::Optimal)?;
            let cmp = gpu_days_comparison(&bundled_original_runs(), &ours, gpu, *n)?;
            let mut text = format!(
                "{:<16} {:>10} {:>10} {:>7}\n",
                "model", "original", "ours", "ratio"
            );
            for row in &cmp.rows {
                let _ = writeln!(
                    text,
                    "{:<16} {:>10.0} {:>10.0} {:>7.2}",
                    row.model_id, row.original_gpu_days, row.ours_gpu_days, row.ratio
                );
            }
            let _ = writeln!(text, "mean ratio: {:.2}", cmp.mean);
            Ok(Output::new("gpudays", &cmp, text))
        }
        ReportCommand::Feasibility(sel) => {
            let naive = grid_for(ctx, sel.source, GridLabel::Naive)?;
            let optimal = grid_for(ctx, sel.source, GridLabel::Optimal)?;
            let m = feasibility_matrix(
                &naive,
                &optimal,
                selection_filter(sel.model_prefix.as_deref(), sel.min_gpus),
            );
            let mut text = String::new();
            for row in &m.combos {
                let _ = writeln!(
                    text,
                    "{:<16} {:<8} {:?}",
                    row.model_id, row.gpu_id, row.class
                );
            }
            let c = m.combo_counts;
            let _ = writeln!(
                text,
                "model-gpu pairs: {}; infeasible naively: {}; feasible with search: {}",
                c.total, c.naive_infeasible, c.optimal_feasible
            );
            Ok(Output::new("feasibility", &m, text))
        }
        ReportCommand::PlotData { source } => {
            let grids: Vec<ResultGrid> = match source {
                Source::Fixtures => {
                    vec![ResultGrid::bundled_naive(), ResultGrid::bundled_optimal()]
                }
                Source::Predicted => {
                    let outcomes = search_all(&ctx.catalog, &ctx.params)?;
                    predicted_grids(&ctx.catalog, &outcomes)?.into()
                }
            };
            let refs: Vec<&ResultGrid> = grids.iter().collect();
            let csv = long_format(&refs);
            let mut out = Output::new("plot_data", &grids, csv.clone());
            out.files.push(("plot_data.csv".into(), csv));
            Ok(out)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn table_args() {
        let (label, path) = parse_table_arg("naive=t.csv").unwrap();
        assert_eq!(label, GridLabel::Naive);
        assert_eq!(path, PathBuf::from("t.csv"));
        assert!(parse_table_arg("analytic=t.csv").is_err());
        assert!(parse_table_arg("t.csv").is_err());
    }

    #[test]
    fn selection() {
        let f = selection_filter(Some("pythia-"), 2);
        assert!(f(&planner_core::CellKey::new("pythia-1b", "a100", 2)));
        assert!(!f(&planner_core::CellKey::new("pythia-1b", "a100", 1)));
        assert!(!f(&planner_core::CellKey::new("vit-large", "a100", 8)));
    }
}
