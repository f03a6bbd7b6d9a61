//! Run configuration: one JSON document describing the model, its inputs and
//! every command's settings. Unknown keys are rejected; parse errors name the
//! offending path.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dgp::ArKernel;
use crate::error::{DdcError, Result};
use crate::ident::{IdentConditioning, IdentOptions};
use crate::io::{read_json, read_kernel_csv, KernelJson};
use crate::mixture::EstimatorConfig;
use crate::model::{validate, Horizon, ModelSpec, PayoffParams, StateGrid, TransitionKernel, Violation};
use crate::montecarlo::{McConfig, McDgp};
use crate::rank::{check_types, RankConditioning, RankRule, RatioOptions, TypePoint};
use crate::simulator::{uniform_init, MixtureSpec};
use crate::solver::SolverOptions;
use crate::transition::KernelSource;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub model: ModelConfig,
    pub grid: GridConfig,
    /// True transition process; required by `solve`, `simulate`, `rank`,
    /// `ident-check` and `montecarlo`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel: Option<KernelConfig>,
    /// First-step estimator used by `estimate`.
    #[serde(default)]
    pub kernel_estimation: KernelSource,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params: Option<ParamsConfig>,
    /// Type distribution used by `simulate` and `montecarlo`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mixture: Option<MixtureSpec>,
    /// Discrete types used by `rank` and `ident-check`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub types: Option<Vec<TypePoint>>,
    #[serde(default)]
    pub simulation: SimulationConfig,
    /// Panel CSV read by `estimate` and sample-mode `rank`, relative to the
    /// config file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub panel: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub estimator: Option<EstimatorConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub montecarlo: Option<McConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rank: Option<RankConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ident: Option<IdentConfig>,
    /// Directory relative paths resolve against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub num_actions: usize,
    pub state_dim: usize,
    pub random_slope_dim: usize,
    pub discount: f64,
    #[serde(default)]
    pub horizon: HorizonConfig,
    #[serde(default)]
    pub intercept: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HorizonConfig {
    #[default]
    Infinite,
    Finite(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridConfig {
    /// Cartesian product of per-coordinate values; the last coordinate varies fastest.
    Product(Vec<Vec<f64>>),
    Points(Vec<Vec<f64>>),
    /// Product of equally spaced axes.
    Linspace(Vec<Axis>),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Axis {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelConfig {
    Ar(ArKernel),
    Csv(PathBuf),
    Json(PathBuf),
    /// `[action][from][to]`.
    Dense(Vec<Vec<Vec<f64>>>),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    #[serde(default = "default_solver_tol")]
    pub tol: f64,
    #[serde(default = "default_solver_iter")]
    pub max_iter: usize,
}

fn default_solver_tol() -> f64 {
    1e-10
}
fn default_solver_iter() -> usize {
    10_000
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            tol: default_solver_tol(),
            max_iter: default_solver_iter(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamsConfig {
    /// Homogeneous coefficients (period-stacked for finite horizons).
    pub gamma: Vec<f64>,
    /// Random coefficients of a single type, used by `solve`.
    #[serde(default)]
    pub beta: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    #[serde(default = "default_n")]
    pub n: usize,
    #[serde(default = "default_periods")]
    pub periods: usize,
    #[serde(default)]
    pub init: InitConfig,
}

fn default_n() -> usize {
    1000
}
fn default_periods() -> usize {
    8
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            n: default_n(),
            periods: default_periods(),
            init: InitConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitConfig {
    #[default]
    Uniform,
    /// Probability of each grid state.
    Probs(Vec<f64>),
    /// Every individual starts at this state index.
    State(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankMode {
    #[default]
    Population,
    Sample,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RankConfig {
    pub conditioning: RankConditioning,
    #[serde(default)]
    pub ratio: RatioOptions,
    #[serde(default)]
    pub rule: RankRule,
    #[serde(default)]
    pub mode: RankMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdentConfig {
    pub conditioning: IdentConditioning,
    #[serde(default)]
    pub options: IdentOptions,
}

/// One problem `validate` found.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(untagged)]
pub enum Problem {
    Model(Violation),
    Section { section: &'static str, message: String },
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg: RunConfig = read_json(path)?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| DdcError::Parse(format!("at `{}`: {}", e.path(), e.inner())))
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn spec(&self) -> Result<ModelSpec<f64>> {
        let m = &self.model;
        let horizon = match m.horizon {
            HorizonConfig::Infinite => Horizon::Infinite,
            HorizonConfig::Finite(t) => Horizon::Finite(t),
        };
        ModelSpec::new(m.num_actions, m.state_dim, m.random_slope_dim, m.discount, horizon, m.intercept)
    }

    pub fn state_grid(&self) -> Result<StateGrid<f64>> {
        match &self.grid {
            GridConfig::Product(axes) => StateGrid::product(axes),
            GridConfig::Points(points) => StateGrid::new(points.clone()),
            GridConfig::Linspace(axes) => StateGrid::product(
                &axes
                    .iter()
                    .map(|a| StateGrid::linspace(a.lo, a.hi, a.count))
                    .collect::<Vec<_>>(),
            ),
        }
    }

    /// The configured kernel without validation.
    pub fn true_kernel(&self, grid: &StateGrid<f64>) -> Result<TransitionKernel<f64>> {
        let na = self.model.num_actions;
        match self.kernel.as_ref().ok_or_else(|| missing("kernel"))? {
            KernelConfig::Ar(ar) => ar.build(grid),
            KernelConfig::Csv(p) => read_kernel_csv(&self.resolve(p), na, grid.len()),
            KernelConfig::Json(p) => read_json::<KernelJson>(&self.resolve(p))?.into_kernel(),
            KernelConfig::Dense(probs) => KernelJson {
                num_actions: probs.len(),
                num_states: probs.first().map_or(0, Vec::len),
                probs: probs.clone(),
            }
            .into_kernel(),
        }
    }

    pub fn solver_options(&self) -> SolverOptions {
        SolverOptions {
            tol: self.solver.tol,
            max_iter: self.solver.max_iter,
        }
    }

    pub fn params(&self) -> Result<&ParamsConfig> {
        self.params.as_ref().ok_or_else(|| missing("params"))
    }

    pub fn payoff_params(&self) -> Result<PayoffParams<f64>> {
        let p = self.params()?;
        Ok(PayoffParams::new(p.gamma.clone(), p.beta.clone()))
    }

    pub fn mixture(&self) -> Result<&MixtureSpec> {
        self.mixture.as_ref().ok_or_else(|| missing("mixture"))
    }

    pub fn types(&self) -> Result<&[TypePoint]> {
        self.types.as_deref().ok_or_else(|| missing("types"))
    }

    pub fn estimator(&self) -> Result<&EstimatorConfig> {
        self.estimator.as_ref().ok_or_else(|| missing("estimator"))
    }

    pub fn init(&self, num_states: usize) -> Result<Vec<f64>> {
        match &self.simulation.init {
            InitConfig::Uniform => Ok(uniform_init(num_states)),
            InitConfig::Probs(p) => {
                if p.len() != num_states {
                    return Err(DdcError::Dimension {
                        context: "simulation.init.probs",
                        expected: num_states,
                        got: p.len(),
                    });
                }
                let total: f64 = p.iter().sum();
                if p.iter().any(|&x| !(x >= 0.0)) || (total - 1.0).abs() > 1e-9 {
                    return Err(DdcError::Config("simulation.init.probs must be a probability vector".into()));
                }
                Ok(p.clone())
            }
            InitConfig::State(s) => {
                if *s >= num_states {
                    return Err(DdcError::Config(format!("simulation.init.state {s} out of range")));
                }
                let mut p = vec![0.0; num_states];
                p[*s] = 1.0;
                Ok(p)
            }
        }
    }

    pub fn mc_dgp(&self) -> Result<McDgp> {
        let spec = self.spec()?;
        let grid = self.state_grid()?;
        let kernel = self.checked_kernel(&spec, &grid)?;
        let init = self.init(grid.len())?;
        Ok(McDgp {
            spec,
            grid,
            kernel,
            mixture: self.mixture()?.clone(),
            gamma: self.params()?.gamma.clone(),
            init,
            periods: self.simulation.periods,
        })
    }

    /// The configured kernel, rejected if it violates any model invariant.
    pub fn checked_kernel(&self, spec: &ModelSpec<f64>, grid: &StateGrid<f64>) -> Result<TransitionKernel<f64>> {
        let kernel = self.true_kernel(grid)?;
        if let Some(v) = validate(spec, grid, &kernel).first() {
            return Err(DdcError::Config(format!("invalid model: {v:?}")));
        }
        Ok(kernel)
    }

    /// Every problem with the configuration; empty when it is usable.
    pub fn problems(&self) -> Vec<Problem> {
        let mut out = Vec::new();
        let (spec, grid) = match (self.spec(), self.state_grid()) {
            (Ok(s), Ok(g)) => (s, g),
            (s, g) => {
                if let Err(e) = s {
                    push(&mut out, "model", Err(e));
                }
                if let Err(e) = g {
                    push(&mut out, "grid", Err(e));
                }
                return out;
            }
        };
        let kernel = match &self.kernel {
            None => Some(TransitionKernel::identity(spec.num_actions, grid.len())),
            Some(_) => match self.true_kernel(&grid) {
                Ok(k) => Some(k),
                Err(e) => {
                    push(&mut out, "kernel", Err(e));
                    None
                }
            },
        };
        if let Some(k) = kernel {
            out.extend(validate(&spec, &grid, &k).into_iter().map(Problem::Model));
        }
        let coef = spec.random_coef_count;
        if let Some(p) = &self.params {
            push(&mut out, "params", dim("params.gamma", spec.gamma_len(), p.gamma.len()));
            if !p.beta.is_empty() {
                push(&mut out, "params", dim("params.beta", coef, p.beta.len()));
            }
        }
        if let Some(m) = &self.mixture {
            push(&mut out, "mixture", m.check().and_then(|_| dim("mixture dimension", coef, m.dim())));
        }
        if let Some(t) = &self.types {
            push(&mut out, "types", check_types(t, coef));
        }
        push(&mut out, "simulation", self.init(grid.len()).map(|_| ()));
        if self.simulation.periods == 0 || self.simulation.n == 0 {
            push(&mut out, "simulation", Err(DdcError::Config("n and periods must be positive".into())));
        }
        if let Some(e) = &self.estimator {
            let grid_dim = e.beta_grid_for(self.simulation.n).map(|g| g.points[0].len());
            push(&mut out, "estimator", grid_dim.and_then(|d| dim("estimator beta grid", coef, d)));
            push(&mut out, "estimator", dim("estimator.gamma_search", spec.gamma_len(), e.gamma_search.lo.len()));
        }
        if let Some(m) = &self.montecarlo {
            push(&mut out, "montecarlo", m.check());
        }
        if !(self.solver.tol > 0.0) || self.solver.max_iter == 0 {
            push(&mut out, "solver", Err(DdcError::Config("tol and max_iter must be positive".into())));
        }
        out
    }
}

fn push(out: &mut Vec<Problem>, section: &'static str, r: Result<()>) {
    if let Err(e) = r {
        out.push(Problem::Section {
            section,
            message: e.to_string(),
        });
    }
}

fn dim(context: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(DdcError::Dimension { context, expected, got })
    }
}

fn missing(section: &str) -> DdcError {
    DdcError::Config(format!("config section `{section}` is required for this command"))
}
