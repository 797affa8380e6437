//! Command-line entry points. Each subcommand loads a run config, calls one
//! driver and writes a result bundle. Exit codes: 0 success, 1 infeasible
//! (a report is still written), 2 input error. Failures print a JSON error
//! object on stdout and the human message on stderr.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use crate::error::{Error, Result};
use crate::io::{self, ResultBundle, RunConfig};
use crate::mpc::{self, SimulationResult, SimulationScenario, StepRecord};
use crate::signal::{self, FrequencySignal, SignalKind};
use crate::solver::ClarabelSolver;

/// Environment variable selecting the conic solver.
pub const SOLVER_ENV: &str = "GRIDCC_SOLVER";

#[derive(Debug, Parser)]
#[command(name = "gridcc", version, about = "Chance-constrained rolling-horizon dispatch of distribution feeders")]
struct Cli {
    /// Seed of the Monte-Carlo and forecast draws (overrides the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Violation probability of the chance constraints (overrides the config).
    #[arg(long, global = true)]
    epsilon: Option<f64>,
    /// Spot-market lead time of signal replays, hours (overrides the config).
    #[arg(long, global = true)]
    lead_time: Option<usize>,
    /// Bundle directory; defaults to `<output_dir>/<subcommand>`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Validate every input file and print a summary.
    CheckData {
        #[arg(long)]
        config: PathBuf,
    },
    /// Simulate the rolling-horizon controller.
    RunMpc {
        #[arg(long)]
        config: PathBuf,
    },
    /// Smallest storage capacity keeping islanding feasible at every step.
    SizeBess {
        #[arg(long)]
        config: PathBuf,
    },
    /// Disconnect at several instants of the first horizon.
    SweepIslanding {
        #[arg(long)]
        config: PathBuf,
    },
    /// Replay a secondary-control signal against a simulated schedule.
    ReplaySfc {
        #[arg(long)]
        config: PathBuf,
        /// Signal CSV; falls back to the config, then to a synthetic month.
        #[arg(long)]
        signal: Option<PathBuf>,
    },
    /// Worst-case activation table of a signal.
    AnalyzeSignal {
        #[arg(long)]
        signal: PathBuf,
        #[arg(long, default_value_t = 4)]
        window_hours: usize,
        #[arg(long, value_enum, default_value_t = KindArg::Activation)]
        kind: KindArg,
    },
    /// Minimum substation rating per storage capacity.
    RateTransformer {
        #[arg(long)]
        config: PathBuf,
    },
    /// Empirical violation rate of the chance-constrained plan.
    ValidateCc {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        samples: Option<usize>,
        /// Absolute step; defaults to the horizon start.
        #[arg(long)]
        step: Option<usize>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum KindArg {
    Activation,
    Frequency,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::CheckData { .. } => "check-data",
            Command::RunMpc { .. } => "run-mpc",
            Command::SizeBess { .. } => "size-bess",
            Command::SweepIslanding { .. } => "sweep-islanding",
            Command::ReplaySfc { .. } => "replay-sfc",
            Command::AnalyzeSignal { .. } => "analyze-signal",
            Command::RateTransformer { .. } => "rate-transformer",
            Command::ValidateCc { .. } => "validate-cc",
        }
    }

    fn config(&self) -> Option<&Path> {
        match self {
            Command::CheckData { config }
            | Command::RunMpc { config }
            | Command::SizeBess { config }
            | Command::SweepIslanding { config }
            | Command::ReplaySfc { config, .. }
            | Command::RateTransformer { config }
            | Command::ValidateCc { config, .. } => Some(config),
            Command::AnalyzeSignal { .. } => None,
        }
    }
}

/// How a command ended when it did not fail outright.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Ok,
    Infeasible,
}

pub const EXIT_OK: i32 = 0;
pub const EXIT_INFEASIBLE: i32 = 1;
pub const EXIT_INPUT: i32 = 2;

/// Machine-readable form of an error.
pub fn error_json(e: &Error) -> serde_json::Value {
    let kind = match e {
        Error::Topology(_) => "topology",
        Error::Input(_) => "input",
        Error::Schema { .. } => "schema",
        Error::ZeroVoltage(_) => "zero_voltage",
        Error::TapOutOfRange { .. } => "tap_out_of_range",
        Error::PowerFlowDivergence { .. } => "power_flow_divergence",
        Error::Infeasible(_) => "infeasible",
        Error::Solver(_) => "solver",
        Error::NonConvergence(_) => "non_convergence",
        Error::Io(_) => "io",
        Error::Json(_) => "json",
        Error::Csv(_) => "csv",
    };
    let mut v = json!({ "error": { "kind": kind, "message": e.to_string() } });
    if let Error::Schema { file, line, .. } = e {
        v["error"]["file"] = json!(file);
        v["error"]["line"] = json!(line);
    }
    v
}

fn report_failure(e: &Error) -> i32 {
    eprintln!("error: {e}");
    println!("{}", error_json(e));
    if e.is_input_error() {
        EXIT_INPUT
    } else {
        EXIT_INFEASIBLE
    }
}

/// Parse `args` (program name first) and run the subcommand.
pub fn dispatch<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return EXIT_OK;
            }
            eprint!("{e}");
            let msg = e.render().to_string();
            println!("{}", json!({ "error": { "kind": "usage", "message": msg.trim() } }));
            return EXIT_INPUT;
        }
    };
    match run(&cli) {
        Ok(Outcome::Ok) => EXIT_OK,
        Ok(Outcome::Infeasible) => EXIT_INFEASIBLE,
        Err(e) => report_failure(&e),
    }
}

fn solver_from_env() -> Result<(ClarabelSolver, String)> {
    let name = std::env::var(SOLVER_ENV).unwrap_or_else(|_| "clarabel".into());
    match name.as_str() {
        "clarabel" => Ok((ClarabelSolver::default(), name)),
        "clarabel-precise" => Ok((ClarabelSolver::precise(), name)),
        other => Err(Error::Input(format!(
            "{SOLVER_ENV}={other}: known solvers are clarabel and clarabel-precise"
        ))),
    }
}

/// Seed of the fresh validation draws, kept apart from the margin draws.
pub fn validation_seed(mc_seed: u64) -> u64 {
    mc_seed.wrapping_add(1_000_003)
}

fn apply_overrides(cli: &Cli, cfg: &mut RunConfig) -> Result<()> {
    if let Some(seed) = cli.seed {
        cfg.mc.seed = seed;
        cfg.forecast_seed = seed;
        cfg.study.validation_seed = validation_seed(seed);
    }
    if let Some(eps) = cli.epsilon {
        cfg.mc.epsilon = eps;
    }
    if let Some(l) = cli.lead_time {
        cfg.study.lead_time_h = l;
    }
    cfg.mc.validate()
}

fn seeds(cfg: &RunConfig) -> BTreeMap<String, u64> {
    BTreeMap::from([
        ("mc".to_string(), cfg.mc.seed),
        ("forecast".to_string(), cfg.forecast_seed),
        ("validation".to_string(), cfg.study.validation_seed),
    ])
}

fn run(cli: &Cli) -> Result<Outcome> {
    let (solver, solver_name) = solver_from_env()?;
    let name = cli.cmd.name();
    if let Command::AnalyzeSignal {
        signal,
        window_hours,
        kind,
    } = &cli.cmd
    {
        let kind = match kind {
            KindArg::Activation => SignalKind::Activation,
            KindArg::Frequency => SignalKind::FrequencyDeviation,
        };
        let sig = io::load_signal(signal, kind)?;
        let out = cli.out.clone().unwrap_or_else(|| PathBuf::from(name));
        let bundle = ResultBundle::create(&out, name, None, BTreeMap::new(), &solver_name)?;
        return analyze_signal(bundle, &sig, *window_hours);
    }
    let Some(path) = cli.cmd.config() else {
        unreachable!("every other subcommand takes a config")
    };
    let mut cfg = RunConfig::load(path)?;
    apply_overrides(cli, &mut cfg)?;
    let inputs = cfg.load_scenario()?;
    let s = inputs.scenario;
    if let Command::CheckData { .. } = cli.cmd {
        print_summary(&cfg, &s, &inputs.series);
        return Ok(Outcome::Ok);
    }
    let out = cli.out.clone().unwrap_or_else(|| cfg.resolve(&cfg.output_dir).join(name));
    let bundle = ResultBundle::create(&out, name, Some(cfg.hash()?), seeds(&cfg), &solver_name)?;
    match &cli.cmd {
        Command::RunMpc { .. } => run_mpc(bundle, &s, &solver),
        Command::SizeBess { .. } => size_bess(bundle, &s, &cfg, &solver),
        Command::SweepIslanding { .. } => sweep_islanding(bundle, &s, &cfg, &solver),
        Command::ReplaySfc { signal, .. } => {
            let sig = match (signal, cfg.load_signal()?) {
                (Some(p), _) => io::load_signal(p, SignalKind::Activation)?,
                (None, Some(sig)) => sig,
                (None, None) => crate::reference::sfc_signal(),
            };
            replay_sfc(bundle, &s, &sig, cfg.study.lead_time_h, &solver)
        }
        Command::RateTransformer { .. } => rate_transformer(bundle, &s, &cfg, &solver),
        Command::ValidateCc { samples, step, .. } => {
            let n = samples.unwrap_or(cfg.study.validation_samples);
            validate_cc(bundle, &s, step.unwrap_or(s.start), n, cfg.study.validation_seed, &solver)
        }
        Command::CheckData { .. } | Command::AnalyzeSignal { .. } => unreachable!(),
    }
}

fn print_summary(cfg: &RunConfig, s: &SimulationScenario, series: &io::TimeSeries) {
    let g = &s.grid;
    println!("{:<14} {} buses, {} branches", "topology", g.n_buses(), g.n_branches());
    println!(
        "{:<14} {} pv, {} bess, {} load, {} flexible",
        "fleet",
        s.fleet.pv.len(),
        s.fleet.bess.len(),
        s.fleet.load.len(),
        s.fleet.flexload.len()
    );
    println!("{:<14} {} rows x {} columns, dt {} h", "series", series.len(), series.columns.len(), series.dt_h);
    println!("{:<14} {} rows", "prices", s.prices.c_buy.len());
    println!("{:<14} {:?}", "product", s.product.kind);
    println!(
        "{:<14} steps {}..{}, horizon {}",
        "simulation", cfg.horizon.start, cfg.horizon.end, cfg.horizon.horizon
    );
    println!("{:<14} eps {}, {} samples, seed {}", "uncertainty", s.mc.epsilon, s.mc.n_samples, s.mc.seed);
}

/// Flat per-step row for CSV output; no timings.
#[derive(Debug, Serialize)]
pub struct StepRow {
    pub t: usize,
    pub feasible: bool,
    pub tap: f64,
    pub pv_avail_kw: f64,
    pub pv_p_kw: f64,
    pub ch_kw: f64,
    pub dis_kw: f64,
    pub e_start_kwh: f64,
    pub e_end_kwh: f64,
    pub bid_kw: f64,
    pub p_buy_kw: f64,
    pub p_sell_kw: f64,
    pub s_slack_kva: f64,
    pub losses_kw: f64,
    pub v_min: f64,
    pub v_max: f64,
    pub max_loading: f64,
    pub cost_eur: f64,
    pub band_low_kwh: Option<f64>,
    pub band_high_kwh: Option<f64>,
    pub island_feasible: Option<bool>,
    pub island_min_alpha: Option<f64>,
    pub max_margin_v: f64,
    pub max_margin_i: f64,
}

impl From<&StepRecord> for StepRow {
    fn from(r: &StepRecord) -> Self {
        let sum = |v: &[f64]| v.iter().sum::<f64>();
        StepRow {
            t: r.t,
            feasible: r.feasible,
            tap: r.tap + 0.0,
            pv_avail_kw: sum(&r.pv_avail_kw),
            pv_p_kw: sum(&r.pv_p_kw),
            ch_kw: sum(&r.ch_kw),
            dis_kw: sum(&r.dis_kw),
            e_start_kwh: sum(&r.e_start_kwh),
            e_end_kwh: sum(&r.e_end_kwh),
            bid_kw: r.bid_kw,
            p_buy_kw: r.p_buy_kw,
            p_sell_kw: r.p_sell_kw,
            s_slack_kva: r.s_slack_kva,
            losses_kw: r.losses_kw,
            v_min: r.v_min,
            v_max: r.v_max,
            max_loading: r.max_loading,
            cost_eur: r.cost,
            band_low_kwh: r.reserve_band_kwh.map(|b| b.0),
            band_high_kwh: r.reserve_band_kwh.map(|b| b.1),
            island_feasible: r.island_feasible,
            island_min_alpha: r.island_min_alpha,
            max_margin_v: r.max_margin_v,
            max_margin_i: r.max_margin_i,
        }
    }
}

fn run_stats(r: &SimulationResult) -> serde_json::Value {
    let times: Vec<f64> = r.steps.iter().map(|s| s.solve_time_s).collect();
    json!({
        "steps": r.steps.len(),
        "fallbacks": r.n_fallbacks(),
        "islanding_failures": r.steps.iter().filter(|s| s.island_feasible == Some(false)).count(),
        "inner_iterations": r.steps.iter().map(|s| s.inner_iterations).sum::<usize>(),
        "outer_iterations": r.steps.iter().map(|s| s.outer_iterations).sum::<usize>(),
        "solve_time_s": times.iter().sum::<f64>(),
        "max_step_time_s": times.iter().copied().fold(0.0, f64::max),
    })
}

/// Step records with timings zeroed, so the file is reproducible.
fn timeless(r: &SimulationResult) -> Vec<StepRecord> {
    r.steps
        .iter()
        .cloned()
        .map(|mut s| {
            s.solve_time_s = 0.0;
            s
        })
        .collect()
}

fn write_run(bundle: &mut ResultBundle, r: &SimulationResult) -> Result<()> {
    let rows: Vec<StepRow> = r.steps.iter().map(StepRow::from).collect();
    bundle.write_csv("steps.csv", &rows)?;
    bundle.write_json("steps.json", &timeless(r))?;
    bundle.write_json("bids.json", &r.bids)?;
    Ok(())
}

fn run_mpc(mut bundle: ResultBundle, s: &SimulationScenario, solver: &ClarabelSolver) -> Result<Outcome> {
    let r = mpc::run_mpc(s, solver)?;
    write_run(&mut bundle, &r)?;
    let ok = r.n_fallbacks() == 0 && r.all_islanding_feasible();
    println!(
        "{} steps, {} fallback(s), total cost {:.2} EUR, bundle {}",
        r.steps.len(),
        r.n_fallbacks(),
        r.total_cost(),
        bundle.dir.display()
    );
    finish(bundle, ok, run_stats(&r))
}

fn finish(bundle: ResultBundle, ok: bool, stats: serde_json::Value) -> Result<Outcome> {
    bundle.finalize(if ok { "ok" } else { "infeasible" }, stats)?;
    Ok(if ok { Outcome::Ok } else { Outcome::Infeasible })
}

fn size_bess(
    mut bundle: ResultBundle,
    s: &SimulationScenario,
    cfg: &RunConfig,
    solver: &ClarabelSolver,
) -> Result<Outcome> {
    match mpc::min_bess_search(s, &cfg.study.capacity_grid, solver) {
        Ok(res) => {
            #[derive(Serialize)]
            struct Row {
                capacity_kwh: f64,
                feasible: bool,
            }
            let rows: Vec<Row> = res
                .evaluated
                .iter()
                .map(|&(c, f)| Row {
                    capacity_kwh: c,
                    feasible: f,
                })
                .collect();
            bundle.write_csv("sizing.csv", &rows)?;
            bundle.write_json("sizing.json", &res)?;
            println!("minimum storage capacity {} kWh", res.capacity_kwh);
            finish(bundle, true, json!({ "probes": res.evaluated.len() }))
        }
        Err(e @ Error::Infeasible(_)) => {
            bundle.write_json("error.json", &error_json(&e))?;
            eprintln!("{e}");
            finish(bundle, false, serde_json::Value::Null)
        }
        Err(e) => Err(e),
    }
}

fn sweep_islanding(
    mut bundle: ResultBundle,
    s: &SimulationScenario,
    cfg: &RunConfig,
    solver: &ClarabelSolver,
) -> Result<Outcome> {
    let entries = mpc::islanding_sweep(s, &cfg.study.island_offsets, solver)?;
    #[derive(Serialize)]
    struct Row {
        t_island: usize,
        step: usize,
        e_kwh: f64,
        served: Option<f64>,
        pv_curtailed_kw: Option<f64>,
    }
    let mut rows = Vec::new();
    for e in &entries {
        let steps = e.soc_kwh.first().map_or(0, Vec::len);
        for k in 0..steps {
            rows.push(Row {
                t_island: e.t,
                step: k,
                e_kwh: e.soc_kwh.iter().map(|u| u[k]).sum(),
                served: e.served.get(k).copied(),
                pv_curtailed_kw: e.pv_curtailed_kw.get(k).copied(),
            });
        }
    }
    bundle.write_csv("islanding.csv", &rows)?;
    bundle.write_json("islanding.json", &entries)?;
    let failed = entries.iter().filter(|e| !e.feasible).count();
    println!("{} islanding instants, {failed} infeasible", entries.len());
    finish(bundle, failed == 0, json!({ "instants": entries.len(), "infeasible": failed }))
}

fn replay_sfc(
    mut bundle: ResultBundle,
    s: &SimulationScenario,
    sig: &FrequencySignal,
    lead_time_h: usize,
    solver: &ClarabelSolver,
) -> Result<Outcome> {
    let r = mpc::run_mpc(s, solver)?;
    write_run(&mut bundle, &r)?;
    let rep = mpc::sfc_replay(s, &r, sig, lead_time_h)?;
    #[derive(Serialize)]
    struct Hour {
        hour: usize,
        e_kwh: f64,
        e_planned_kwh: f64,
        delivered_up_kwh: Option<f64>,
        delivered_down_kwh: Option<f64>,
    }
    let hours: Vec<Hour> = (0..rep.e_hour_kwh.len())
        .map(|h| Hour {
            hour: h,
            e_kwh: rep.e_hour_kwh[h],
            e_planned_kwh: rep.e_hour_planned_kwh[h],
            delivered_up_kwh: rep.delivered_up_kwh.get(h).copied(),
            delivered_down_kwh: rep.delivered_down_kwh.get(h).copied(),
        })
        .collect();
    bundle.write_csv("replay_hourly.csv", &hours)?;
    #[derive(Serialize)]
    struct Minute {
        minute: usize,
        e_kwh: f64,
    }
    let minutes: Vec<Minute> = rep
        .e_minute_kwh
        .iter()
        .enumerate()
        .map(|(m, &e)| Minute { minute: m, e_kwh: e })
        .collect();
    bundle.write_csv("replay_minute.csv", &minutes)?;
    bundle.write_csv("trades.csv", &rep.trades)?;
    bundle.write_csv("failures.csv", &rep.failures)?;
    println!(
        "{} purchase(s), {} sale(s), {} delivery failure(s), envelope ratio {:.3}",
        rep.n_purchases(),
        rep.trades.len() - rep.n_purchases(),
        rep.failures.len(),
        rep.envelope_ratio
    );
    let mut stats = run_stats(&r);
    stats["purchases"] = json!(rep.n_purchases());
    stats["conservation_residual_kwh"] = json!(rep.conservation_residual_kwh);
    finish(bundle, rep.failures.is_empty() && r.n_fallbacks() == 0, stats)
}

fn analyze_signal(mut bundle: ResultBundle, sig: &FrequencySignal, window_hours: usize) -> Result<Outcome> {
    let w = signal::analyze_sfc_signal(sig, window_hours)?;
    #[derive(Serialize)]
    struct Row {
        call_hour: usize,
        up: f64,
        down: f64,
    }
    let rows: Vec<Row> = (0..w.up.len())
        .map(|i| Row {
            call_hour: i + 1,
            up: w.up[i],
            down: w.down[i],
        })
        .collect();
    bundle.write_csv("worst_case.csv", &rows)?;
    bundle.write_json("worst_case.json", &w)?;
    for r in &rows {
        println!("hour {:>2}: up {:.4} h, down {:.4} h", r.call_hour, r.up, r.down);
    }
    finish(bundle, true, json!({ "missing_samples": w.missing_samples }))
}

fn rate_transformer(
    mut bundle: ResultBundle,
    s: &SimulationScenario,
    cfg: &RunConfig,
    solver: &ClarabelSolver,
) -> Result<Outcome> {
    let study = match mpc::transformer_rating_study(s, &cfg.study.capacity_grid, cfg.study.rating_tol_kva, solver) {
        Err(e @ Error::Infeasible(_)) => {
            bundle.write_json("error.json", &error_json(&e))?;
            eprintln!("{e}");
            return finish(bundle, false, serde_json::Value::Null);
        }
        other => other?,
    };
    bundle.write_csv("rating.csv", &study.points)?;
    bundle.write_json("rating.json", &study)?;
    for p in &study.points {
        println!("{:>8.1} kWh: {:>8.1} kVA", p.capacity_kwh, p.rating_kva);
    }
    finish(bundle, true, json!({ "uncontrolled_peak_kva": study.uncontrolled_peak_kva }))
}

fn validate_cc(
    mut bundle: ResultBundle,
    s: &SimulationScenario,
    t: usize,
    n: usize,
    seed: u64,
    solver: &ClarabelSolver,
) -> Result<Outcome> {
    let v = mpc::validate_cc_at(s, t, n, seed, solver)?;
    #[derive(Serialize)]
    struct Row {
        step: usize,
        max_rate_v_upper: f64,
        max_rate_v_lower: f64,
        max_rate_current: f64,
    }
    let max = |r: &Vec<f64>| r.iter().copied().fold(0.0, f64::max);
    let rows: Vec<Row> = (0..v.report.v_upper.len())
        .map(|k| Row {
            step: k,
            max_rate_v_upper: max(&v.report.v_upper[k]),
            max_rate_v_lower: max(&v.report.v_lower[k]),
            max_rate_current: max(&v.report.current[k]),
        })
        .collect();
    bundle.write_csv("violations.csv", &rows)?;
    bundle.write_json("validation.json", &v)?;
    println!(
        "max violation rate {:.4} over {} samples (epsilon {}), outer loop {}",
        v.report.max_rate,
        v.report.n_samples,
        v.epsilon,
        if v.converged { "converged" } else { "not converged" }
    );
    finish(bundle, v.converged, json!({ "outer_iterations": v.outer_iterations }))
}
