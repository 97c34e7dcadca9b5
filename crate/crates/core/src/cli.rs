//! Command-line commands. Each `cmd_*` function is a pure function of the
//! configuration, its input files and the seed; it writes its outputs into a
//! directory and returns a summary for the terminal.
//!
//! # Configuration schema
//!
//! ```toml
//! [market]
//! horizon = 1.0
//! coefficient_scale = 0.01          # default 1
//! indexation = "risk-source"        # or "price"
//! reflect = [2]                     # sources whose driver is negated on load
//! control_box = { epsilon = 0.01, upper = 10.0 }
//! correlation = [[1.0, 0.2], [0.2, 1.0]]   # (green…, conventional…, index)
//! green = [{ name = "G", maturity = 19.73, rate = { a = -0.07, b = 0.66 },
//!            premium = { a = 0.38, b = 0.13 }, vol = { a = 0.41, b = 0.31 } }]
//! conventional = []
//! index = { maturity = 18.29, drift = { a = -0.01, b = 0.53 }, vol = { a = 0.01, b = 0.92 } }
//!
//! [investor]
//! alpha = [...]                      # one per source
//! beta = [...]
//! gamma = 1.0
//!
//! [government]
//! targets = [0.0]                    # one per green bond
//! kappa = 0.0
//! nu = 1.0
//! kappa_in_h = true
//!
//! [run]                              # all optional
//! seed = 42
//! n_paths = 10000
//! n_steps = 100
//! grid_m = 10
//! antithetic = false
//! output_dir = "out"
//! incentive_cap = 10.0
//! random_starts = 2
//! optimizer_seed = 7
//!
//! [hjb]                              # required by `hjb` only
//! rate = "ou"                        # or "curve"
//! theta = 0.4
//! m = 0.04
//! sigma_r = 0.02
//! frozen_rate = false
//! steps = { time = 10, x = 40, w_g = 20, r = 10, w_i = 20 }
//! ```
//!
//! Affine coefficients read `a + b (T − t)` with `T` the instrument maturity.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use clap::{Args, Parser, Subcommand};
use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::calibration::{assemble_series, build_index, fit_affine, fit_ou, read_metadata, read_prices, AffineFit, PriceSeries, DAYS_PER_YEAR};
use crate::config::{HjbSection, LoadedConfig, RateKind, RunConfig, RunSection};
use crate::contract::{accumulate_contract, replication_positions, ContractPlan, QvMode};
use crate::error::{Error, Result};
use crate::hjb::{extract_policy, solve_hjb, write_slice_csv, write_solution, GridSteps, HjbGrid};
use crate::linalg::mean_stderr;
use crate::mc::{
    calibrate_tax_rate, compare_policies, estimate_agent_value, estimate_principal_value, simulate_market_with,
    simulate_portfolio, write_bundle, SimulationOptions,
};
use crate::model::{AffineCoeff, GovPrefs, InvestorPrefs, MarketModel};
use crate::principal::{
    average_schedule, certainty_equivalent, principal_utility, read_schedule_csv, solve_schedule, write_schedule_csv,
    IncentiveSchedule,
};

/// Environment variable holding the worker thread count.
pub const THREADS_ENV: &str = "GREEN_CONTRACT_THREADS";

#[derive(Debug, Parser)]
#[command(name = "green-contract", version, about = "Incentive contracts for green bond portfolios")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone)]
pub struct ConfigArgs {
    /// TOML run configuration.
    #[arg(long)]
    pub config: PathBuf,
    /// Override a value, e.g. `--set government.kappa=0.8`.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    pub set: Vec<String>,
    /// Output directory (defaults to `run.output_dir`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Clone)]
pub struct ScheduleArg {
    /// Schedule CSV written by `optimize` under the same configuration;
    /// solved afresh when absent.
    #[arg(long)]
    pub schedule: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a market section from daily prices and write a full configuration.
    Calibrate(CalibrateArgs),
    /// Solve the optimal incentive schedule.
    Optimize(ConfigArgs),
    /// Monte Carlo evaluation of the optimal contract.
    Simulate {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        schedule: ScheduleArg,
        /// Also write the simulated scenarios as a binary bundle.
        #[arg(long)]
        write_bundle: bool,
    },
    /// Optimal contract against a calibrated green tax rebate.
    CompareTax {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        schedule: ScheduleArg,
    },
    /// Static replication of the time-averaged contract.
    Replicate {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        schedule: ScheduleArg,
    },
    /// Solve the stochastic-rate HJB equation.
    Hjb {
        #[command(flatten)]
        config: ConfigArgs,
        /// Time layer of the CSV slice.
        #[arg(long, default_value_t = 0)]
        layer: usize,
    },
}

#[derive(Debug, Args, Clone)]
pub struct CalibrateArgs {
    /// `date,ticker,price` CSV.
    #[arg(long)]
    pub prices: PathBuf,
    /// `ticker,maturity_years,amount_issued` CSV.
    #[arg(long)]
    pub metadata: PathBuf,
    /// Comma-separated green tickers; every other metadata ticker is
    /// conventional and enters the index.
    #[arg(long, value_delimiter = ',', required = true)]
    pub green: Vec<String>,
    /// Risk premium per ticker as `TICKER=a,b` (default zero).
    #[arg(long = "premium", value_name = "TICKER=A,B")]
    pub premium: Vec<String>,
    #[arg(long, default_value_t = 1.0)]
    pub horizon: f64,
    /// Configuration supplying the investor, government and run sections.
    #[arg(long)]
    pub template: Option<PathBuf>,
    /// `date,rate` CSV of the green short rate; adds an `[hjb]` section with
    /// fitted OU parameters.
    #[arg(long)]
    pub short_rate: Option<PathBuf>,
    /// Output configuration file.
    #[arg(long)]
    pub out: PathBuf,
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| {
        Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
    })
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| {
        Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut out = create(path)?;
    serde_json::to_writer_pretty(&mut out, value).map_err(|e| Error::Io(e.into()))?;
    writeln!(out)?;
    out.flush()?;
    Ok(())
}

/// Loaded configuration plus everything derived from it.
pub struct Context {
    pub loaded: LoadedConfig,
    pub model: MarketModel,
    pub prefs: InvestorPrefs,
    pub gov: GovPrefs,
    pub out_dir: PathBuf,
    command: &'static str,
}

impl Context {
    pub fn new(args: &ConfigArgs, command: &'static str) -> Result<Self> {
        let loaded = RunConfig::load(&args.config, &args.set)?;
        Self::from_loaded(loaded, args.out.clone(), command)
    }

    pub fn from_loaded(loaded: LoadedConfig, out: Option<PathBuf>, command: &'static str) -> Result<Self> {
        let c = &loaded.config;
        let model = c.model()?;
        let prefs = c.investor();
        let gov = c.government();
        let out_dir = out.unwrap_or_else(|| PathBuf::from(&c.run.output_dir));
        std::fs::create_dir_all(&out_dir)?;
        Ok(Context { loaded, model, prefs, gov, out_dir, command })
    }

    pub fn run(&self) -> &RunSection {
        &self.loaded.config.run
    }

    pub fn provenance(&self) -> String {
        format!("{} command={}", self.loaded.provenance(), self.command)
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    /// Reads a schedule produced under this configuration, or solves one.
    pub fn schedule(&self, input: Option<&Path>) -> Result<IncentiveSchedule> {
        match input {
            Some(p) => {
                let (schedule, provenance) = read_schedule_csv(&self.model, open(p)?)?;
                self.loaded.check_provenance(&provenance)?;
                Ok(schedule)
            }
            None => solve_schedule(&self.model, &self.prefs, &self.gov, self.run().grid_m, &self.loaded.config.principal_settings()),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct NodeSummary {
    pub t: f64,
    pub z: Vec<f64>,
    pub pi: Vec<f64>,
    pub script_h: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct OptimizeSummary {
    pub config_hash: String,
    pub seed: u64,
    pub y0: f64,
    pub certainty_equivalent: f64,
    pub principal_utility: f64,
    pub nodes: Vec<NodeSummary>,
}

/// Writes `schedule.csv` and `summary.json`.
pub fn cmd_optimize(ctx: &Context) -> Result<OptimizeSummary> {
    let schedule = ctx.schedule(None)?;
    let mut out = create(&ctx.path("schedule.csv"))?;
    write_schedule_csv(&ctx.model, &schedule, &ctx.provenance(), &mut out)?;
    out.flush()?;
    let ce = certainty_equivalent(&schedule);
    let summary = OptimizeSummary {
        config_hash: ctx.loaded.hash.clone(),
        seed: ctx.run().seed,
        y0: 0.0,
        certainty_equivalent: ce,
        principal_utility: principal_utility(ce, &ctx.gov),
        nodes: schedule
            .nodes
            .iter()
            .map(|n| NodeSummary {
                t: n.t,
                z: n.incentives.z.iter().copied().collect(),
                pi: n.p.iter().copied().collect(),
                script_h: n.script_h,
            })
            .collect(),
    };
    write_json(&ctx.path("summary.json"), &summary)?;
    Ok(summary)
}

#[derive(Clone, Debug, Serialize)]
pub struct ValueEstimate {
    pub mean: f64,
    pub std_err: f64,
    pub target: f64,
    pub z_score: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct SimulateSummary {
    pub config_hash: String,
    pub seed: u64,
    pub n_paths: usize,
    pub n_steps: usize,
    pub agent_value: ValueEstimate,
    pub principal_value: ValueEstimate,
    pub mean_terminal_portfolio: f64,
    pub mean_terminal_contract: f64,
}

fn bundle_for(ctx: &Context, n_steps: usize) -> Result<crate::mc::PathBundle> {
    let r = ctx.run();
    simulate_market_with(&ctx.model, r.n_paths, n_steps, r.seed, SimulationOptions { antithetic: r.antithetic }, None)
}

/// Writes `paths.csv` (mean portfolio and contract per time) and
/// `simulate.json`; with `write_bundle` also `bundle.bin`.
pub fn cmd_simulate(ctx: &Context, schedule: Option<&Path>, write_bundle_file: bool) -> Result<SimulateSummary> {
    let schedule = ctx.schedule(schedule)?;
    let bundle = bundle_for(ctx, ctx.run().n_steps)?;
    if write_bundle_file {
        let mut out = create(&ctx.path("bundle.bin"))?;
        write_bundle(&bundle, &mut out)?;
        out.flush()?;
    }
    let plan = ContractPlan::new(&ctx.model, &ctx.prefs, &schedule, &bundle)?;
    let x = simulate_portfolio(&ctx.model, &bundle, &plan.policy())?;
    let y = accumulate_contract(&plan, &bundle, 0.0, QvMode::Analytic)?;

    let mut out = create(&ctx.path("paths.csv"))?;
    writeln!(out, "# {}", ctx.provenance())?;
    writeln!(out, "t,mean_x,std_err_x,mean_y,std_err_y")?;
    let nodes = bundle.n_steps + 1;
    let mut last = (0.0, 0.0);
    for k in 0..nodes {
        let xs: Vec<f64> = (0..bundle.n_paths).map(|p| x.at(p, k)).collect();
        let ys: Vec<f64> = (0..bundle.n_paths).map(|p| y.at(p, k)).collect();
        let (mx, sx) = mean_stderr(&xs);
        let (my, sy) = mean_stderr(&ys);
        writeln!(out, "{:.17e},{mx:.17e},{sx:.17e},{my:.17e},{sy:.17e}", bundle.times[k])?;
        last = (mx, my);
    }
    out.flush()?;

    let agent = estimate_agent_value(&ctx.model, &ctx.prefs, &schedule, &bundle)?;
    let principal = estimate_principal_value(&ctx.model, &ctx.prefs, &ctx.gov, &schedule, &bundle)?;
    let target_p = principal_utility(plan.script_h_integral(&ctx.prefs, &ctx.gov), &ctx.gov);
    let est = |e: crate::mc::Estimate, target: f64| ValueEstimate { mean: e.mean, std_err: e.std_err, target, z_score: e.z_score(target) };
    let summary = SimulateSummary {
        config_hash: ctx.loaded.hash.clone(),
        seed: ctx.run().seed,
        n_paths: bundle.n_paths,
        n_steps: bundle.n_steps,
        agent_value: est(agent, -1.0),
        principal_value: est(principal, target_p),
        mean_terminal_portfolio: last.0,
        mean_terminal_contract: last.1,
    };
    write_json(&ctx.path("simulate.json"), &summary)?;
    Ok(summary)
}

#[derive(Clone, Debug, Serialize)]
pub struct CompareSummary {
    pub config_hash: String,
    pub seed: u64,
    pub tax_rate: f64,
    pub mean_green_contract: f64,
    pub terminal_mean_diff: f64,
    pub terminal_std_err: f64,
    pub terminal_rel_diff_pct: f64,
}

/// Writes `compare_tax.csv` with the columns `t,mean_diff,rel_diff_pct,std_err`.
pub fn cmd_compare_tax(ctx: &Context, schedule: Option<&Path>) -> Result<CompareSummary> {
    let schedule = ctx.schedule(schedule)?;
    let d_g = ctx.model.d_g();
    let green = schedule.trapezoid(|n| n.p.rows(0, d_g).sum()) / (schedule.horizon() - schedule.nodes[0].t);
    let c = calibrate_tax_rate(&ctx.model, &ctx.prefs, green)?;
    let bundle = bundle_for(ctx, ctx.run().n_steps)?;
    let report = compare_policies(&ctx.model, &ctx.prefs, &schedule, c, &bundle)?;
    let mut out = create(&ctx.path("compare_tax.csv"))?;
    report.write_csv(&ctx.provenance(), &mut out)?;
    out.flush()?;
    let last = report.times.len() - 1;
    Ok(CompareSummary {
        config_hash: ctx.loaded.hash.clone(),
        seed: ctx.run().seed,
        tax_rate: c,
        mean_green_contract: green,
        terminal_mean_diff: report.mean_diff[last],
        terminal_std_err: report.std_err[last],
        terminal_rel_diff_pct: report.rel_diff_pct[last],
    })
}

/// Writes `replication.json`: the replication report with the configuration
/// hash and seed.
pub fn cmd_replicate(ctx: &Context, schedule: Option<&Path>) -> Result<serde_json::Value> {
    let schedule = ctx.schedule(schedule)?;
    let avg = average_schedule(&ctx.model, &ctx.prefs, &schedule)?;
    let report = replication_positions(&ctx.model, &avg, &avg.mean_response(), ctx.prefs.gamma);
    let mut value = serde_json::to_value(&report).map_err(|e| Error::Io(e.into()))?;
    let obj = value.as_object_mut().expect("report serializes to an object");
    obj.insert("config_hash".into(), ctx.loaded.hash.clone().into());
    obj.insert("seed".into(), ctx.run().seed.into());
    write_json(&ctx.path("replication.json"), &value)?;
    Ok(value)
}

#[derive(Clone, Debug, Serialize)]
pub struct PolicyDiagnostic {
    pub n_paths: usize,
    pub worst_relative_error: f64,
    pub tolerance: f64,
    pub clamped_steps: usize,
    pub pass: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct HjbSummary {
    pub config_hash: String,
    pub seed: u64,
    pub shape: [usize; 4],
    pub n_nodes: usize,
    pub time_steps: usize,
    pub certainty_equivalent: f64,
    /// Left-endpoint integral of the deterministic optimum on the same time
    /// grid.
    pub deterministic_certainty_equivalent: f64,
    pub max_iterations: usize,
    /// Present when the rate is deterministic.
    pub policy_match: Option<PolicyDiagnostic>,
}

fn hjb_section(ctx: &Context) -> Result<&HjbSection> {
    ctx.loaded.config.hjb.as_ref().ok_or_else(|| Error::Config("the hjb command needs an [hjb] section".into()))
}

/// Writes `hjb.bin`, `hjb_slice.csv` (the `(X, r)` plane of `layer`) and
/// `hjb.json`. With a deterministic rate, the feedback policy is run along
/// simulated paths and compared with the deterministic schedule.
pub fn cmd_hjb(ctx: &Context, layer: usize) -> Result<HjbSummary> {
    let h = hjb_section(ctx)?;
    let cfg = &ctx.loaded.config;
    let rate = cfg.rate_model().expect("hjb section present");
    let mut steps = h.steps;
    if h.frozen_rate {
        steps.r = 0;
    }
    let schedule = solve_schedule(&ctx.model, &ctx.prefs, &ctx.gov, steps.time, &cfg.principal_settings())?;
    let policy: Vec<(f64, DVector<f64>)> = schedule.nodes.iter().map(|n| (n.t, n.p.clone())).collect();
    let grid = HjbGrid::from_steps(&ctx.model, &policy, &rate, steps)?;
    let sol = solve_hjb(&ctx.model, &ctx.prefs, &ctx.gov, &rate, &grid, &cfg.hjb_settings())?;
    if layer >= sol.layers.len() {
        return Err(Error::InvalidParameter(format!("layer {layer} outside 0..={}", sol.layers.len() - 1)));
    }

    let mut out = create(&ctx.path("hjb.bin"))?;
    write_solution(&sol, &mut out)?;
    out.flush()?;
    let mut out = create(&ctx.path("hjb_slice.csv"))?;
    write_slice_csv(&sol, layer, &ctx.provenance(), &mut out)?;
    out.flush()?;

    let det_ce = schedule.nodes[..steps.time].iter().map(|n| n.script_h).sum::<f64>() * ctx.model.horizon / steps.time as f64;
    let policy_match = if h.frozen_rate || h.sigma_r == 0.0 {
        let live_rate = (!grid.rate_frozen()).then_some(&rate);
        let bundle = simulate_market_with(&ctx.model, h.n_paths, 5 * steps.time, ctx.run().seed, SimulationOptions::default(), live_rate)?;
        let fp = extract_policy(&sol, &bundle)?;
        let mut worst: f64 = 0.0;
        for path in 0..fp.n_paths {
            for s in 0..fp.n_steps {
                let node = schedule.node_for_step(s, fp.n_steps)?;
                for (a, b) in fp.holding(path, s).iter().zip(node.p.iter()) {
                    worst = worst.max((a - b).abs() / b.abs());
                }
            }
        }
        Some(PolicyDiagnostic {
            n_paths: fp.n_paths,
            worst_relative_error: worst,
            tolerance: h.policy_tolerance,
            clamped_steps: fp.clamped,
            pass: worst <= h.policy_tolerance,
        })
    } else {
        None
    };
    let summary = HjbSummary {
        config_hash: ctx.loaded.hash.clone(),
        seed: ctx.run().seed,
        shape: grid.shape(),
        n_nodes: grid.n_nodes(),
        time_steps: grid.n_t,
        certainty_equivalent: sol.certainty_equivalent(),
        deterministic_certainty_equivalent: det_ce,
        max_iterations: sol.layers.iter().map(|l| l.iterations).max().unwrap_or(0),
        policy_match,
    };
    write_json(&ctx.path("hjb.json"), &summary)?;
    Ok(summary)
}

/// Fit diagnostics of one instrument.
#[derive(Clone, Debug, Serialize)]
pub struct InstrumentFit {
    pub ticker: String,
    pub observations: usize,
    pub maturity: f64,
    pub rate: AffineCoeff,
    pub premium: AffineCoeff,
    pub vol: AffineCoeff,
    /// Standard deviation of the standardized residuals (1 for a good fit).
    pub residual_sd: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct CalibrationSummary {
    pub instruments: Vec<InstrumentFit>,
    pub correlation: Vec<Vec<f64>>,
    pub short_rate: Option<[f64; 3]>,
}

fn parse_premium(spec: &str) -> Result<(String, AffineCoeff)> {
    let bad = || Error::Config(format!("premium '{spec}' is not of the form TICKER=a,b"));
    let (ticker, rest) = spec.split_once('=').ok_or_else(bad)?;
    let (a, b) = rest.split_once(',').ok_or_else(bad)?;
    let a: f64 = a.trim().parse().map_err(|_| bad())?;
    let b: f64 = b.trim().parse().map_err(|_| bad())?;
    Ok((ticker.trim().to_string(), AffineCoeff::new(a, b)))
}

/// Log-returns on consecutive `dates`, standardized by the fitted model.
fn standardized_residuals(s: &PriceSeries, fit: &AffineFit, dates: &[NaiveDate]) -> Vec<f64> {
    let lookup: BTreeMap<NaiveDate, f64> = s.dates.iter().copied().zip(s.prices.iter().copied()).collect();
    let d0 = s.dates[0];
    let year = |d: NaiveDate| (d - d0).num_days() as f64 / DAYS_PER_YEAR;
    dates
        .windows(2)
        .map(|w| {
            let (t0, t1) = (year(w[0]), year(w[1]));
            let dt = t1 - t0;
            let sig = fit.vol.eval(s.maturity, t0).abs().max(1e-4);
            let m = fit.rate.eval(s.maturity, t0) + fit.premium.eval(s.maturity, t0) * sig;
            let r = (lookup[&w[1]] / lookup[&w[0]]).ln();
            (r - (m - 0.5 * sig * sig) * dt) / (sig * dt.sqrt())
        })
        .collect()
}

fn correlation_of(cols: &[Vec<f64>]) -> DMatrix<f64> {
    let n = cols.len();
    let len = cols[0].len() as f64;
    let centered: Vec<Vec<f64>> = cols
        .iter()
        .map(|c| {
            let m = c.iter().sum::<f64>() / len;
            c.iter().map(|v| v - m).collect()
        })
        .collect();
    let norm: Vec<f64> = centered.iter().map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            1.0
        } else {
            centered[i].iter().zip(&centered[j]).map(|(a, b)| a * b).sum::<f64>() / (norm[i] * norm[j])
        }
    })
}

fn read_short_rate<R: BufRead>(input: R) -> Result<(Vec<f64>, f64)> {
    let mut rows: Vec<(NaiveDate, f64)> = Vec::new();
    for (k, line) in input.lines().enumerate() {
        let line = line?;
        let lineno = k + 1;
        let text = line.trim();
        if text.is_empty() || text.starts_with('#') {
            continue;
        }
        if rows.is_empty() && text.eq_ignore_ascii_case("date,rate") {
            continue;
        }
        let (d, r) = text
            .split_once(',')
            .ok_or_else(|| Error::Parse { line: lineno, message: format!("expected date,rate, got '{text}'") })?;
        let date = NaiveDate::parse_from_str(d.trim(), "%Y-%m-%d")
            .map_err(|e| Error::Parse { line: lineno, message: format!("bad date '{}': {e}", d.trim()) })?;
        let rate: f64 = r.trim().parse().map_err(|_| Error::Parse { line: lineno, message: format!("bad rate '{}'", r.trim()) })?;
        rows.push((date, rate));
    }
    if rows.len() < 2 {
        return Err(Error::InsufficientData { needed: 2, got: rows.len() });
    }
    let span = (rows[rows.len() - 1].0 - rows[0].0).num_days() as f64 / DAYS_PER_YEAR;
    let dt = span / (rows.len() - 1) as f64;
    Ok((rows.into_iter().map(|r| r.1).collect(), dt))
}

/// Fits every instrument, the index of the conventional bonds and the
/// correlation of standardized residuals on common dates; writes a complete
/// configuration to `args.out`.
pub fn cmd_calibrate(args: &CalibrateArgs) -> Result<CalibrationSummary> {
    let prices = read_prices(open(&args.prices)?)?;
    let meta = read_metadata(open(&args.metadata)?)?;
    if prices.is_empty() {
        return Err(Error::Parse { line: 1, message: format!("{} holds no price rows", args.prices.display()) });
    }
    for g in &args.green {
        if !meta.iter().any(|m| &m.ticker == g) {
            return Err(Error::MissingTicker(g.clone()));
        }
    }
    let premia: BTreeMap<String, AffineCoeff> = args.premium.iter().map(|s| parse_premium(s)).collect::<Result<_>>()?;
    if let Some(t) = premia.keys().find(|t| !meta.iter().any(|m| &m.ticker == *t)) {
        return Err(Error::MissingTicker(t.clone()));
    }
    let series = assemble_series(&prices, &meta)?;
    let (green, conventional): (Vec<PriceSeries>, Vec<PriceSeries>) =
        series.into_iter().partition(|s| args.green.contains(&s.ticker));
    if conventional.is_empty() {
        return Err(Error::InvalidParameter("the index needs at least one conventional bond".into()));
    }
    let index = build_index(&conventional)?;

    let mut all: Vec<&PriceSeries> = green.iter().chain(&conventional).collect();
    all.push(&index);
    let fits: Vec<AffineFit> = all
        .iter()
        .map(|s| fit_affine(s, premia.get(&s.ticker).copied().unwrap_or(AffineCoeff::ZERO)))
        .collect::<Result<_>>()?;

    let common: Vec<NaiveDate> = index.dates.clone();
    let resid: Vec<Vec<f64>> = all.iter().zip(&fits).map(|(s, f)| standardized_residuals(s, f, &common)).collect();
    if resid[0].len() < 2 {
        return Err(Error::InsufficientData { needed: 3, got: common.len() });
    }
    let corr = correlation_of(&resid);
    let correlation: Vec<Vec<f64>> = (0..corr.nrows()).map(|i| (0..corr.ncols()).map(|j| corr[(i, j)]).collect()).collect();

    let instruments: Vec<InstrumentFit> = all
        .iter()
        .zip(&fits)
        .zip(&resid)
        .map(|((s, f), r)| InstrumentFit {
            ticker: s.ticker.clone(),
            observations: s.len(),
            maturity: s.maturity,
            rate: f.rate,
            premium: f.premium,
            vol: f.vol,
            residual_sd: {
                let (m, _) = mean_stderr(r);
                (r.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (r.len() - 1) as f64).sqrt()
            },
        })
        .collect();

    let bond = |i: usize| crate::config::BondSection {
        name: all[i].ticker.clone(),
        maturity: all[i].maturity,
        rate: fits[i].rate,
        premium: fits[i].premium,
        vol: fits[i].vol,
    };
    let d_g = green.len();
    let n = all.len();
    let market = crate::config::MarketSection {
        horizon: args.horizon,
        coefficient_scale: 1.0,
        indexation: Default::default(),
        reflect: Vec::new(),
        control_box: Default::default(),
        correlation: correlation.clone(),
        green: (0..d_g).map(bond).collect(),
        conventional: (d_g..n - 1).map(bond).collect(),
        index: crate::config::IndexSection { maturity: index.maturity, drift: fits[n - 1].rate, vol: fits[n - 1].vol },
    };

    let mut config = match &args.template {
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            let tree: toml::Value = toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
            let mut c: RunConfig = tree.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
            c.market = market;
            c
        }
        None => RunConfig {
            market,
            investor: crate::config::InvestorSection { alpha: vec![0.2; n], beta: vec![0.4; n], gamma: 1.0 },
            government: crate::config::GovernmentSection { targets: vec![0.0; d_g], kappa: 0.0, nu: 1.0, kappa_in_h: true },
            run: RunSection::default(),
            hjb: None,
        },
    };

    let short_rate = match &args.short_rate {
        Some(p) => {
            let (values, dt) = read_short_rate(open(p)?)?;
            let ou = fit_ou(&values, dt)?;
            config.hjb = Some(HjbSection {
                rate: RateKind::Ou,
                theta: ou.theta,
                m: ou.m,
                sigma_r: ou.sigma,
                frozen_rate: false,
                steps: GridSteps::FOOTNOTE,
                tolerance: 1e-6,
                max_iterations: 20,
                n_paths: 200,
                policy_tolerance: 0.10,
            });
            Some([ou.theta, ou.m, ou.sigma])
        }
        None => None,
    };

    let text = config.to_toml()?;
    RunConfig::parse(&text, &[])?;
    let mut out = create(&args.out)?;
    out.write_all(text.as_bytes())?;
    out.flush()?;
    Ok(CalibrationSummary { instruments, correlation, short_rate })
}

/// Configures the global thread pool from [`THREADS_ENV`].
pub fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("{THREADS_ENV} must be a positive integer, got '{v}'")))?;
        if n == 0 {
            return Err(Error::Config(format!("{THREADS_ENV} must be positive")));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    Ok(())
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    let s = serde_json::to_string_pretty(value).map_err(|e| Error::Io(e.into()))?;
    println!("{s}");
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    init_threads()?;
    match cli.command {
        Command::Calibrate(args) => {
            let s = cmd_calibrate(&args)?;
            for f in &s.instruments {
                println!(
                    "{:<24} n={:<5} rate=({:+.5}, {:+.5}) vol=({:+.5}, {:+.5}) resid_sd={:.3}",
                    f.ticker, f.observations, f.rate.a, f.rate.b, f.vol.a, f.vol.b, f.residual_sd
                );
            }
            if let Some([theta, m, sigma]) = s.short_rate {
                println!("short rate: theta={theta:.5} m={m:.5} sigma={sigma:.5}");
            }
            println!("wrote {}", args.out.display());
        }
        Command::Optimize(c) => {
            let ctx = Context::new(&c, "optimize")?;
            let s = cmd_optimize(&ctx)?;
            let first = &s.nodes[0];
            println!("certainty equivalent {:.10}", s.certainty_equivalent);
            println!("z at t=0: {:?}", first.z);
            println!("holdings at t=0: {:?}", first.pi);
            println!("wrote {}", ctx.out_dir.display());
        }
        Command::Simulate { config, schedule, write_bundle } => {
            let ctx = Context::new(&config, "simulate")?;
            print_json(&cmd_simulate(&ctx, schedule.schedule.as_deref(), write_bundle)?)?;
        }
        Command::CompareTax { config, schedule } => {
            let ctx = Context::new(&config, "compare-tax")?;
            print_json(&cmd_compare_tax(&ctx, schedule.schedule.as_deref())?)?;
        }
        Command::Replicate { config, schedule } => {
            let ctx = Context::new(&config, "replicate")?;
            print_json(&cmd_replicate(&ctx, schedule.schedule.as_deref())?)?;
        }
        Command::Hjb { config, layer } => {
            let ctx = Context::new(&config, "hjb")?;
            let s = cmd_hjb(&ctx, layer)?;
            println!(
                "grid {:?} ({} nodes, {} time steps): certainty equivalent {:.8} (deterministic {:.8})",
                s.shape, s.n_nodes, s.time_steps, s.certainty_equivalent, s.deterministic_certainty_equivalent
            );
            if let Some(d) = &s.policy_match {
                println!(
                    "policy match: worst relative error {:.3e} over {} paths, tolerance {:.3e}, clamped steps {}: {}",
                    d.worst_relative_error,
                    d.n_paths,
                    d.tolerance,
                    d.clamped_steps,
                    if d.pass { "PASS" } else { "FAIL" }
                );
            }
        }
    }
    Ok(())
}

/// Parses the process arguments, runs the command and returns the exit code.
pub fn main_exit_code() -> i32 {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            e.exit_code()
        }
    }
}
