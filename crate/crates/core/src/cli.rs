//! The `ddc` command line.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::config::{Problem, RankMode, RunConfig};
use crate::error::{DdcError, Result};
use crate::ident::{build_operators, ident_report};
use crate::io;
use crate::metrics::StepCdf;
use crate::mixture::{estimate, pooled_cdf};
use crate::model::{Horizon, StateGrid};
use crate::montecarlo;
use crate::rank::{build_ratio_matrix, estimate_rank, population_joint, sample_joint};
use crate::rng::{derive_seed, TAG_PANEL, TAG_TYPES};
use crate::simulator::{draw_types, simulate_panel, Panel};
use crate::solver::{ccp, solve_finite, solve_infinite};

#[derive(Debug, Parser)]
#[command(name = "ddc", version, about = "Dynamic discrete choice with random coefficients")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON run configuration.
    #[arg(long, value_name = "PATH")]
    pub config: PathBuf,
    /// Overrides the configured seed.
    #[arg(long, value_name = "N")]
    pub seed: Option<u64>,
    /// Output directory, created if missing.
    #[arg(long, value_name = "DIR", default_value = ".")]
    pub out: PathBuf,
    /// Worker threads; 0 uses every core.
    #[arg(long, value_name = "N", default_value_t = 0)]
    pub threads: usize,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Value function and CCPs of one type.
    Solve(Common),
    /// Simulated panel from the configured type distribution.
    Simulate(Common),
    /// Sieve estimate of the type distribution and γ from a panel.
    Estimate {
        #[command(flatten)]
        common: Common,
        /// Panel CSV; overrides the config's `panel`.
        #[arg(long, value_name = "PATH")]
        panel: Option<PathBuf>,
    },
    /// Monte Carlo study over the configured sample sizes.
    Montecarlo(Common),
    /// Singular values and rank of the transition-adjusted ratio matrix.
    Rank {
        #[command(flatten)]
        common: Common,
        /// Panel CSV for sample mode; overrides the config's `panel`.
        #[arg(long, value_name = "PATH")]
        panel: Option<PathBuf>,
    },
    /// Factorization residuals, injectivity and spectral recovery of type CCPs.
    IdentCheck(Common),
    /// Checks the configuration and reports every problem.
    Validate(Common),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Solve(_) => "solve",
            Command::Simulate(_) => "simulate",
            Command::Estimate { .. } => "estimate",
            Command::Montecarlo(_) => "montecarlo",
            Command::Rank { .. } => "rank",
            Command::IdentCheck(_) => "ident-check",
            Command::Validate(_) => "validate",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::Solve(c)
            | Command::Simulate(c)
            | Command::Montecarlo(c)
            | Command::IdentCheck(c)
            | Command::Validate(c) => c,
            Command::Estimate { common, .. } | Command::Rank { common, .. } => common,
        }
    }

    fn panel(&self) -> Option<&Path> {
        match self {
            Command::Estimate { panel, .. } | Command::Rank { panel, .. } => panel.as_deref(),
            _ => None,
        }
    }
}

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_NUMERIC: i32 = 2;

/// How a command finished when it did not fail outright.
enum Outcome {
    Ok,
    /// Artifacts were written but report a problem.
    Flagged(i32, String),
}

/// Parses `args` (including the program name), runs the command and returns
/// the exit code.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&cli.command) {
        Ok(Outcome::Ok) => EXIT_OK,
        Ok(Outcome::Flagged(code, msg)) => {
            eprintln!("ddc {}: {msg}", cli.command.name());
            code
        }
        Err(e) => {
            eprintln!("ddc {}: {e}", cli.command.name());
            if e.is_numeric() {
                EXIT_NUMERIC
            } else {
                EXIT_USAGE
            }
        }
    }
}

fn dispatch(cmd: &Command) -> Result<Outcome> {
    let common = cmd.common();
    let mut cfg = RunConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    std::fs::create_dir_all(&common.out)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(common.threads)
        .build()
        .map_err(|e| DdcError::Config(format!("thread pool: {e}")))?;
    let out = common.out.as_path();
    io::write_json(&out.join("metadata.json"), &Metadata::new(cmd.name(), &cfg))?;
    pool.install(|| match cmd {
        Command::Solve(_) => run_solve(&cfg, out),
        Command::Simulate(_) => run_simulate(&cfg, out),
        Command::Estimate { .. } => run_estimate(&cfg, cmd.panel(), out),
        Command::Montecarlo(_) => run_montecarlo(&cfg, out),
        Command::Rank { .. } => run_rank(&cfg, cmd.panel(), out),
        Command::IdentCheck(_) => run_ident(&cfg, out),
        Command::Validate(_) => run_validate(&cfg, out),
    })
}

/// Resolved configuration (defaults included) and the program version.
#[derive(Serialize)]
struct Metadata<'a> {
    command: &'a str,
    version: &'a str,
    seed: u64,
    config: &'a RunConfig,
}

impl<'a> Metadata<'a> {
    fn new(command: &'a str, config: &'a RunConfig) -> Self {
        Self {
            command,
            version: env!("CARGO_PKG_VERSION"),
            seed: config.seed,
            config,
        }
    }
}

#[derive(Serialize)]
struct Timing {
    elapsed_secs: f64,
}

fn write_timing(out: &Path, start: Instant) -> Result<()> {
    io::write_json(
        &out.join("timing.json"),
        &Timing {
            elapsed_secs: start.elapsed().as_secs_f64(),
        },
    )
}

#[derive(Serialize)]
struct SolveReport {
    horizon: Option<usize>,
    iterations: Option<usize>,
    residual_bound: Option<f64>,
    num_states: usize,
    num_actions: usize,
}

fn run_solve(cfg: &RunConfig, out: &Path) -> Result<Outcome> {
    let start = Instant::now();
    let spec = cfg.spec()?;
    let grid = cfg.state_grid()?;
    let kernel = cfg.checked_kernel(&spec, &grid)?;
    let params = cfg.payoff_params()?;
    let (report, value, ccps, stationary) = match spec.horizon {
        Horizon::Infinite => {
            let sol = solve_infinite(&spec, &grid, &params, &kernel, cfg.solver_options())?;
            let table = ccp(&spec, &grid, &params, &kernel, &sol.value)?;
            let report = SolveReport {
                horizon: None,
                iterations: Some(sol.iterations),
                residual_bound: Some(sol.residual_bound(spec.discount)),
                num_states: grid.len(),
                num_actions: spec.num_actions,
            };
            (report, sol.value, vec![table], true)
        }
        Horizon::Finite(t) => {
            let per_period = (1..=t).map(|p| params.for_period(&spec, p)).collect::<Result<Vec<_>>>()?;
            let sol = solve_finite(&spec, &grid, &per_period, &vec![kernel.clone(); t], t)?;
            let report = SolveReport {
                horizon: Some(t),
                iterations: None,
                residual_bound: None,
                num_states: grid.len(),
                num_actions: spec.num_actions,
            };
            (report, sol.value, sol.ccps, false)
        }
    };
    io::write_values_csv(&out.join("values.csv"), &value, &grid)?;
    io::write_ccp_csv(&out.join("ccp.csv"), &ccps, stationary, &grid)?;
    io::write_json(&out.join("solve.json"), &report)?;
    write_timing(out, start)?;
    Ok(Outcome::Ok)
}

#[derive(Serialize)]
struct SimulateReport {
    n: usize,
    periods: usize,
    types_seed: u64,
    panel_seed: u64,
    /// Share of person-periods choosing each action.
    action_shares: Vec<f64>,
}

fn action_shares(panel: &Panel, num_actions: usize) -> Vec<f64> {
    let mut counts = vec![0usize; num_actions];
    for i in 0..panel.n() {
        for t in 0..panel.periods() {
            counts[panel.action(i, t)] += 1;
        }
    }
    let total = (panel.n() * panel.periods()) as f64;
    counts.iter().map(|&c| c as f64 / total).collect()
}

fn run_simulate(cfg: &RunConfig, out: &Path) -> Result<Outcome> {
    let start = Instant::now();
    let spec = cfg.spec()?;
    let grid = cfg.state_grid()?;
    let kernel = cfg.checked_kernel(&spec, &grid)?;
    let mixture = cfg.mixture()?;
    mixture.check()?;
    let gamma = &cfg.params()?.gamma;
    let sim = &cfg.simulation;
    let init = cfg.init(grid.len())?;
    let types_seed = derive_seed(cfg.seed, &[TAG_TYPES]);
    let panel_seed = derive_seed(cfg.seed, &[TAG_PANEL]);
    let betas = draw_types(mixture, sim.n, types_seed)?;
    let panel = simulate_panel(&spec, &grid, gamma, &kernel, &betas, sim.periods, &init, panel_seed, cfg.solver_options())?;
    io::write_panel_csv(&out.join("panel.csv"), &panel, &grid)?;
    io::write_betas_csv(&out.join("betas.csv"), &betas)?;
    io::write_json(
        &out.join("simulate.json"),
        &SimulateReport {
            n: panel.n(),
            periods: panel.periods(),
            types_seed,
            panel_seed,
            action_shares: action_shares(&panel, spec.num_actions),
        },
    )?;
    write_timing(out, start)?;
    Ok(Outcome::Ok)
}

fn load_panel(cfg: &RunConfig, flag: Option<&Path>, grid: &StateGrid<f64>) -> Result<Panel> {
    let path = match (flag, &cfg.panel) {
        (Some(p), _) => p.to_path_buf(),
        (None, Some(p)) => cfg.resolve(p),
        (None, None) => return Err(DdcError::Config("no panel: pass --panel or set `panel` in the config".into())),
    };
    io::read_panel_csv(&path, grid)
}

fn run_estimate(cfg: &RunConfig, panel_flag: Option<&Path>, out: &Path) -> Result<Outcome> {
    let start = Instant::now();
    let spec = cfg.spec()?;
    let grid = cfg.state_grid()?;
    let est = cfg.estimator()?;
    let panel = load_panel(cfg, panel_flag, &grid)?;
    let known = match &cfg.kernel {
        Some(_) => Some(cfg.checked_kernel(&spec, &grid)?),
        None => None,
    };
    let kernel = cfg.kernel_estimation.kernel(&panel, &grid, spec.num_actions, known.as_ref())?;
    let result = estimate(&panel, &spec, &grid, &kernel, est)?;
    io::write_json(&out.join("estimate.json"), &result)?;
    io::write_cdf_csv(&out.join("cdf.csv"), &pooled_cdf(&result.sieve))?;
    for d in 1..spec.random_coef_count {
        let cdf = StepCdf::from_atoms(
            (0..result.sieve.grid.len())
                .map(|j| (result.sieve.grid[j][d], result.sieve.pooled_weight(j)))
                .collect(),
        );
        io::write_cdf_csv(&out.join(format!("cdf_b{}.csv", d + 1)), &cdf)?;
    }
    io::write_kernel_csv(&out.join("kernel.csv"), &kernel)?;
    write_timing(out, start)?;
    if result.converged {
        Ok(Outcome::Ok)
    } else {
        Ok(Outcome::Flagged(EXIT_NUMERIC, "gamma search did not converge; results written".into()))
    }
}

fn run_montecarlo(cfg: &RunConfig, out: &Path) -> Result<Outcome> {
    let start = Instant::now();
    let dgp = cfg.mc_dgp()?;
    let mc = cfg.montecarlo.as_ref().ok_or_else(|| DdcError::Config("config section `montecarlo` is required".into()))?;
    let summary = montecarlo::run(&dgp, mc, cfg.estimator()?, cfg.seed)?;
    io::write_json(&out.join("summary.json"), &summary)?;
    let sizes: Vec<usize> = summary.sizes.iter().map(|s| s.n).collect();
    io::write_table_csv(&out.join("table.csv"), &sizes, &summary.table())?;
    #[derive(Serialize)]
    struct McTimingFile {
        elapsed_secs: f64,
        #[serde(flatten)]
        per_size: montecarlo::McTiming,
    }
    io::write_json(
        &out.join("timing.json"),
        &McTimingFile {
            elapsed_secs: start.elapsed().as_secs_f64(),
            per_size: summary.timing(),
        },
    )?;
    if summary.failures.is_empty() {
        Ok(Outcome::Ok)
    } else {
        Ok(Outcome::Flagged(EXIT_NUMERIC, format!("{} replications failed; see summary.json", summary.failures.len())))
    }
}

#[derive(Serialize)]
struct RankReport {
    mode: RankMode,
    rows: Vec<usize>,
    cols: Vec<usize>,
    rank: usize,
    singular_values: Vec<f64>,
    rule: crate::rank::RankRule,
    base: Option<usize>,
}

fn run_rank(cfg: &RunConfig, panel_flag: Option<&Path>, out: &Path) -> Result<Outcome> {
    let start = Instant::now();
    let rc = cfg.rank.ok_or_else(|| DdcError::Config("config section `rank` is required".into()))?;
    let spec = cfg.spec()?;
    let grid = cfg.state_grid()?;
    let (joint, kernel) = match rc.mode {
        RankMode::Population => {
            let kernel = cfg.checked_kernel(&spec, &grid)?;
            let gamma = &cfg.params()?.gamma;
            let joint = population_joint(&spec, &grid, gamma, &kernel, cfg.types()?, rc.conditioning, cfg.solver_options())?;
            (joint, kernel)
        }
        RankMode::Sample => {
            let panel = load_panel(cfg, panel_flag, &grid)?;
            let known = match &cfg.kernel {
                Some(_) => Some(cfg.checked_kernel(&spec, &grid)?),
                None => None,
            };
            let kernel = cfg.kernel_estimation.kernel(&panel, &grid, spec.num_actions, known.as_ref())?;
            (sample_joint(&panel, grid.len(), spec.num_actions, rc.conditioning)?, kernel)
        }
    };
    let ratio = build_ratio_matrix(&joint, &kernel, rc.ratio)?;
    let est = estimate_rank(&ratio, rc.rule);
    io::write_json(
        &out.join("rank.json"),
        &RankReport {
            mode: rc.mode,
            rows: ratio.x3.clone(),
            cols: ratio.x2.clone(),
            rank: est.rank,
            singular_values: est.singular_values,
            rule: est.rule,
            base: joint.base,
        },
    )?;
    write_timing(out, start)?;
    Ok(Outcome::Ok)
}

fn run_ident(cfg: &RunConfig, out: &Path) -> Result<Outcome> {
    let start = Instant::now();
    let ic = cfg.ident.ok_or_else(|| DdcError::Config("config section `ident` is required".into()))?;
    let spec = cfg.spec()?;
    let grid = cfg.state_grid()?;
    let kernel = cfg.checked_kernel(&spec, &grid)?;
    let gamma = &cfg.params()?.gamma;
    let bundle = build_operators(&spec, &grid, gamma, &kernel, cfg.types()?, ic.conditioning, cfg.solver_options(), ic.options)?;
    let report = ident_report(&bundle, ic.options);
    io::write_json(&out.join("ident.json"), &report)?;
    write_timing(out, start)?;
    match &report.failure {
        None => Ok(Outcome::Ok),
        Some(f) => Ok(Outcome::Flagged(EXIT_NUMERIC, format!("identification check failed: {f}"))),
    }
}

#[derive(Serialize)]
struct Validation<'a> {
    ok: bool,
    problems: &'a [Problem],
}

fn run_validate(cfg: &RunConfig, out: &Path) -> Result<Outcome> {
    let problems = cfg.problems();
    io::write_json(
        &out.join("validation.json"),
        &Validation {
            ok: problems.is_empty(),
            problems: &problems,
        },
    )?;
    if problems.is_empty() {
        Ok(Outcome::Ok)
    } else {
        Ok(Outcome::Flagged(EXIT_USAGE, format!("{} problem(s); see validation.json", problems.len())))
    }
}
