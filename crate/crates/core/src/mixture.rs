//! Second estimation step: fixed-grid sieve maximum likelihood for the type
//! distribution, profiled over the homogeneous coefficients `γ`.
//!
//! For fixed `γ` the weights solve a concave problem over one simplex per
//! initial-state cell,
//!
//! ```text
//! max_P  Σ_i log Σ_j P_{j,k(i)} L_ij,     L_ij = Π_t P_t(a_it; x_it, b_j),
//! ```
//!
//! solved here by the EM fixed point. The outer search over `γ` is
//! derivative-free.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{DdcError, Result};
use crate::metrics::StepCdf;
use crate::model::{ModelSpec, PayoffParams, StateGrid, TransitionKernel};
use crate::scalar::Scalar;
use crate::search::{maximize, SearchConfig, SearchOutcome};
use crate::simulator::Panel;
use crate::solver::{solve_type, SolverOptions, TypeSolution};

/// Number of sieve grid points for a sample of `n` individuals: `⌈4 n^{1/4}⌉`.
pub fn grid_rule(n: usize) -> usize {
    let x = 4.0 * (n.max(1) as f64).sqrt().sqrt();
    (x - 1e-9).ceil() as usize
}

/// Support points `b_j` of the sieve.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BetaGrid {
    pub points: Vec<Vec<f64>>,
}

impl BetaGrid {
    pub fn from_points(points: Vec<Vec<f64>>) -> Result<Self> {
        let dim = points.first().map_or(0, Vec::len);
        if points.is_empty() || dim == 0 || points.iter().any(|p| p.len() != dim) {
            return Err(DdcError::Config("beta grid needs equal-length, nonempty points".into()));
        }
        Ok(Self { points })
    }

    /// `count` equally spaced points on `[lo, hi]` for scalar `β`. For vector
    /// `β` each coordinate gets `⌈count^{1/d}⌉` points and the grid is their product.
    pub fn equally_spaced(lo: &[f64], hi: &[f64], count: usize) -> Result<Self> {
        if lo.len() != hi.len() || lo.is_empty() || lo.iter().zip(hi).any(|(l, h)| !(l <= h)) || count == 0 {
            return Err(DdcError::Config("beta support box needs lo <= hi and count >= 1".into()));
        }
        let per = if lo.len() == 1 {
            count
        } else {
            ((count as f64).powf(1.0 / lo.len() as f64) - 1e-9).ceil() as usize
        };
        let axes: Vec<Vec<f64>> = lo.iter().zip(hi).map(|(&l, &h)| StateGrid::linspace(l, h, per)).collect();
        Ok(Self {
            points: StateGrid::product(&axes)?.points().to_vec(),
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Partition of the state grid into initial-state cells.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct X1Cells {
    pub cells: Vec<Vec<usize>>,
    state_cell: Vec<usize>,
}

impl X1Cells {
    pub fn single(num_states: usize) -> Self {
        Self {
            cells: vec![(0..num_states).collect()],
            state_cell: vec![0; num_states],
        }
    }

    pub fn from_partition(cells: Vec<Vec<usize>>, num_states: usize) -> Result<Self> {
        let mut state_cell = vec![usize::MAX; num_states];
        for (k, cell) in cells.iter().enumerate() {
            for &s in cell {
                if s >= num_states || state_cell[s] != usize::MAX {
                    return Err(DdcError::Config(format!("x1 cells are not a partition (state {s})")));
                }
                state_cell[s] = k;
            }
        }
        if state_cell.contains(&usize::MAX) || cells.iter().any(Vec::is_empty) {
            return Err(DdcError::Config("x1 cells must cover every state with nonempty cells".into()));
        }
        Ok(Self { cells, state_cell })
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn cell_of(&self, state: usize) -> usize {
        self.state_cell[state]
    }

    /// Cell of each individual's first-period state.
    pub fn assign(&self, panel: &Panel) -> Vec<usize> {
        (0..panel.n()).map(|i| self.cell_of(panel.state(i, 0))).collect()
    }
}

/// The estimated type distribution: jumps `P_{j,k}` at `b_j` within cell `k`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SieveDistribution {
    pub grid: Vec<Vec<f64>>,
    pub x1_cells: Vec<Vec<usize>>,
    /// `[j][k]`.
    pub weights: Vec<Vec<f64>>,
    /// Share of individuals whose first state falls in each cell.
    pub cell_mass: Vec<f64>,
}

impl SieveDistribution {
    /// Population weight of grid point `j`, `Σ_k P_{j,k} · mass_k`.
    pub fn pooled_weight(&self, j: usize) -> f64 {
        self.weights[j].iter().zip(&self.cell_mass).map(|(p, m)| p * m).sum()
    }
}

/// Per-type sequence likelihoods `L_ij`, stored row-scaled: `scaled[i][j] =
/// exp(log L_ij − shift_i)` with `shift_i = max_j log L_ij`.
#[derive(Debug, Clone, PartialEq)]
pub struct LikelihoodMatrix<T> {
    n: usize,
    b: usize,
    scaled: Vec<T>,
    shift: Vec<T>,
}

impl<T: Scalar> LikelihoodMatrix<T> {
    /// From `log L_ij` laid out `[i][j]`.
    pub fn from_log(n: usize, b: usize, logs: Vec<T>) -> Result<Self> {
        if logs.len() != n * b || b == 0 {
            return Err(DdcError::Dimension {
                context: "likelihood matrix",
                expected: n * b,
                got: logs.len(),
            });
        }
        let mut scaled = vec![T::zero(); n * b];
        let mut shift = vec![T::zero(); n];
        for i in 0..n {
            let row = &logs[i * b..(i + 1) * b];
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            if !m.is_finite() {
                return Err(DdcError::Numeric(format!("likelihood row {i} has no finite entry")));
            }
            shift[i] = m;
            for (o, &l) in scaled[i * b..(i + 1) * b].iter_mut().zip(row) {
                *o = (l - m).exp().max(T::min_positive_value());
            }
        }
        Ok(Self { n, b, scaled, shift })
    }

    /// From strictly positive raw likelihoods.
    pub fn from_values(n: usize, b: usize, values: Vec<T>) -> Result<Self> {
        if values.iter().any(|v| !(*v > T::zero())) {
            return Err(DdcError::Numeric("likelihood entries must be strictly positive".into()));
        }
        Self::from_log(n, b, values.into_iter().map(T::ln).collect())
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn b(&self) -> usize {
        self.b
    }

    pub fn scaled(&self, i: usize, j: usize) -> T {
        self.scaled[i * self.b + j]
    }

    pub fn shift(&self, i: usize) -> T {
        self.shift[i]
    }

    pub fn log_value(&self, i: usize, j: usize) -> T {
        self.scaled(i, j).ln() + self.shift[i]
    }

    /// `L_ij` itself (may underflow for long panels).
    pub fn value(&self, i: usize, j: usize) -> T {
        self.log_value(i, j).exp()
    }

    /// Columns `order[0], order[1], …` in that order.
    pub fn permute_columns(&self, order: &[usize]) -> Self {
        let mut scaled = Vec::with_capacity(self.scaled.len());
        for i in 0..self.n {
            scaled.extend(order.iter().map(|&j| self.scaled(i, j)));
        }
        Self {
            n: self.n,
            b: order.len(),
            scaled,
            shift: self.shift.clone(),
        }
    }
}

/// `L_ij` from solved types, in log space.
pub fn likelihood_from_solutions<T: Scalar>(panel: &Panel, solutions: &[&TypeSolution<T>]) -> Result<LikelihoodMatrix<T>> {
    let (n, b, periods) = (panel.n(), solutions.len(), panel.periods());
    let columns: Vec<Vec<T>> = solutions
        .par_iter()
        .map(|sol| {
            (0..n)
                .map(|i| (0..periods).map(|t| sol.at(t + 1).prob(panel.state(i, t), panel.action(i, t)).ln()).sum())
                .collect()
        })
        .collect();
    let mut logs = vec![T::zero(); n * b];
    for (j, col) in columns.iter().enumerate() {
        for (i, &v) in col.iter().enumerate() {
            logs[i * b + j] = v;
        }
    }
    LikelihoodMatrix::from_log(n, b, logs)
}

/// Solves every grid point at `γ` and returns `L_ij`.
pub fn type_likelihood_matrix<T: Scalar>(
    panel: &Panel,
    spec: &ModelSpec<T>,
    states: &StateGrid<T>,
    kernel: &TransitionKernel<T>,
    gamma: &[T],
    grid: &[Vec<T>],
    opts: SolverOptions,
) -> Result<LikelihoodMatrix<T>> {
    panel.check(states.len(), spec.num_actions)?;
    let solutions = grid
        .par_iter()
        .enumerate()
        .map(|(j, b)| {
            solve_type(spec, states, &PayoffParams::new(gamma.to_vec(), b.clone()), kernel, opts).map_err(|e| {
                DdcError::GridPoint {
                    index: j,
                    point: b.iter().map(|x| x.as_f64()).collect(),
                    source: Box::new(e),
                }
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&TypeSolution<T>> = solutions.iter().collect();
    likelihood_from_solutions(panel, &refs)
}

#[derive(Debug, Clone, PartialEq)]
pub struct InnerSolution<T> {
    /// `[j][k]`.
    pub weights: Vec<Vec<T>>,
    pub loglik: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Log-likelihood before the first and after every EM step.
    pub history: Vec<f64>,
}

/// EM settings for the inner weight problem.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmOptions {
    /// Stop once the relative log-likelihood gain falls below this.
    pub tol: f64,
    pub max_iter: usize,
    /// Squared extrapolation between EM steps, kept only when it does not
    /// lower the likelihood.
    pub accelerate: bool,
}

impl Default for EmOptions {
    fn default() -> Self {
        Self {
            tol: 1e-9,
            max_iter: 5000,
            accelerate: true,
        }
    }
}

impl EmOptions {
    pub fn plain(tol: f64, max_iter: usize) -> Self {
        Self {
            tol,
            max_iter,
            accelerate: false,
        }
    }
}

/// Compensated running sum; keeps million-term EM sums accurate to a few ulps.
#[derive(Clone, Copy)]
struct Neumaier<T> {
    sum: T,
    comp: T,
}

impl<T: Scalar> Neumaier<T> {
    fn new() -> Self {
        Self { sum: T::zero(), comp: T::zero() }
    }

    fn add(&mut self, x: T) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp = self.comp + ((self.sum - t) + x);
        } else {
            self.comp = self.comp + ((x - t) + self.sum);
        }
        self.sum = t;
    }

    fn value(&self) -> T {
        self.sum + self.comp
    }
}

struct EmProblem<'a, T> {
    l: &'a LikelihoodMatrix<T>,
    cells: &'a [usize],
    counts: Vec<usize>,
    drift_tol: f64,
}

impl<T: Scalar> EmProblem<'_, T> {
    fn loglik(&self, weights: &[Vec<T>], denom: &mut [T]) -> Result<f64> {
        let l = self.l;
        let mut total = Neumaier::new();
        for i in 0..l.n() {
            let k = self.cells[i];
            let d: T = (0..l.b()).map(|j| weights[j][k] * l.scaled(i, j)).sum();
            if !(d > T::zero()) || !d.is_finite() {
                return Err(DdcError::Numeric(format!("mixture likelihood of individual {i} is {d}")));
            }
            denom[i] = d;
            total.add((d.ln() + l.shift(i)).as_f64());
        }
        Ok(total.value())
    }

    /// One EM update given the denominators of `weights`.
    fn step(&self, weights: &[Vec<T>], denom: &[T], next: &mut [Vec<T>]) -> Result<()> {
        let l = self.l;
        let num_cells = self.counts.len();
        let mut acc = vec![Neumaier::<T>::new(); l.b() * num_cells];
        for i in 0..l.n() {
            let k = self.cells[i];
            for (j, w) in weights.iter().enumerate() {
                acc[j * num_cells + k].add(w[k] * l.scaled(i, j) / denom[i]);
            }
        }
        for (j, row) in next.iter_mut().enumerate() {
            for (k, r) in row.iter_mut().enumerate() {
                *r = acc[j * num_cells + k].value();
            }
        }
        for (k, &count) in self.counts.iter().enumerate() {
            if count == 0 {
                for (row, w) in next.iter_mut().zip(weights) {
                    row[k] = w[k];
                }
                continue;
            }
            let nk = T::from_usize_lossy(count);
            let mut total = T::zero();
            for row in next.iter_mut() {
                row[k] = row[k] / nk;
                if !row[k].is_finite() {
                    return Err(DdcError::Numeric("NaN in EM weight update".into()));
                }
                total = total + row[k];
            }
            // the raw update sums to one up to rounding; anything larger is a bug
            if (total.as_f64() - 1.0).abs() > self.drift_tol {
                return Err(DdcError::Numeric(format!("EM step left the simplex (sum {total})")));
            }
            for row in next.iter_mut() {
                row[k] = row[k] / total;
            }
        }
        Ok(())
    }
}

fn ensure_monotone(prev: f64, cur: f64, n: usize, slack: f64) -> Result<()> {
    if cur < prev - slack * (prev.abs() + n as f64) {
        return Err(DdcError::Numeric(format!("EM log-likelihood decreased from {prev} to {cur}")));
    }
    Ok(())
}

/// Squared extrapolation `θ0 − 2αr + α²v` pulled back toward `θ2` until every
/// weight stays strictly positive.
fn extrapolate<T: Scalar>(t0: &[Vec<T>], t1: &[Vec<T>], t2: &[Vec<T>], counts: &[usize]) -> Option<Vec<Vec<T>>> {
    let (mut rr, mut vv) = (0.0, 0.0);
    for j in 0..t0.len() {
        for k in 0..counts.len() {
            let r = (t1[j][k] - t0[j][k]).as_f64();
            let v = (t2[j][k] - t1[j][k]).as_f64() - r;
            rr += r * r;
            vv += v * v;
        }
    }
    if !(vv > 0.0) || !(rr > 0.0) {
        return None;
    }
    let mut alpha = -(rr / vv).sqrt();
    if alpha > -1.0 {
        return None;
    }
    for _ in 0..40 {
        let a = T::lit(alpha);
        let two = T::lit(2.0);
        let cand: Vec<Vec<T>> = (0..t0.len())
            .map(|j| {
                (0..counts.len())
                    .map(|k| {
                        let r = t1[j][k] - t0[j][k];
                        let v = t2[j][k] - t1[j][k] - r;
                        t0[j][k] - two * a * r + a * a * v
                    })
                    .collect()
            })
            .collect();
        if cand.iter().all(|row| row.iter().all(|w| *w > T::zero() && w.is_finite())) {
            let mut cand = cand;
            for k in 0..counts.len() {
                let total: T = cand.iter().map(|row| row[k]).sum();
                for row in cand.iter_mut() {
                    row[k] = row[k] / total;
                }
            }
            return Some(cand);
        }
        alpha = 0.5 * (alpha - 1.0);
        if alpha > -1.0 - 1e-9 {
            return None;
        }
    }
    None
}

/// EM for the sieve weights, one simplex per cell. Starts from `init` (uniform
/// when `None`) and stops once the relative log-likelihood gain drops below
/// `opts.tol`. The log-likelihood is checked to be non-decreasing at every step.
pub fn inner_weight_solve<T: Scalar>(
    l: &LikelihoodMatrix<T>,
    cells: &[usize],
    num_cells: usize,
    init: Option<&[Vec<T>]>,
    opts: EmOptions,
) -> Result<InnerSolution<T>> {
    let (n, b) = (l.n(), l.b());
    if cells.len() != n || cells.iter().any(|&k| k >= num_cells) {
        return Err(DdcError::Config("cell assignment does not match the likelihood matrix".into()));
    }
    let mut weights: Vec<Vec<T>> = match init {
        Some(w) => {
            if w.len() != b || w.iter().any(|r| r.len() != num_cells) {
                return Err(DdcError::Dimension {
                    context: "initial weights",
                    expected: b,
                    got: w.len(),
                });
            }
            w.to_vec()
        }
        None => vec![vec![T::one() / T::from_usize_lossy(b); num_cells]; b],
    };
    let mut counts = vec![0usize; num_cells];
    for &k in cells {
        counts[k] += 1;
    }
    let problem = EmProblem {
        l,
        cells,
        counts,
        drift_tol: (1e-12f64).max(8.0 * (n + b) as f64 * T::epsilon().as_f64()),
    };
    let slack = 64.0 * T::epsilon().as_f64();
    let mut denom = vec![T::zero(); n];
    let mut ll = problem.loglik(&weights, &mut denom)?;
    let mut history = vec![ll];
    let mut t1 = vec![vec![T::zero(); num_cells]; b];
    let mut t2 = t1.clone();
    for it in 1..=opts.max_iter {
        let prev = ll;
        problem.step(&weights, &denom, &mut t1)?;
        let ll1 = problem.loglik(&t1, &mut denom)?;
        ensure_monotone(prev, ll1, n, slack)?;
        if opts.accelerate {
            problem.step(&t1, &denom, &mut t2)?;
            let ll2 = problem.loglik(&t2, &mut denom)?;
            ensure_monotone(ll1, ll2, n, slack)?;
            let mut accepted = false;
            if let Some(cand) = extrapolate(&weights, &t1, &t2, &problem.counts) {
                let mut cand_denom = vec![T::zero(); n];
                if let Ok(llc) = problem.loglik(&cand, &mut cand_denom) {
                    let mut stabilized = vec![vec![T::zero(); num_cells]; b];
                    problem.step(&cand, &cand_denom, &mut stabilized)?;
                    let lls = problem.loglik(&stabilized, &mut cand_denom)?;
                    if lls >= ll2 && lls >= llc - slack * (llc.abs() + n as f64) {
                        weights = stabilized;
                        denom = cand_denom;
                        ll = lls;
                        accepted = true;
                    }
                }
            }
            if !accepted {
                problem.loglik(&t2, &mut denom)?;
                std::mem::swap(&mut weights, &mut t2);
                ll = ll2;
            }
        } else {
            std::mem::swap(&mut weights, &mut t1);
            ll = ll1;
        }
        ensure_monotone(prev, ll, n, slack)?;
        history.push(ll);
        if ll - prev <= opts.tol * prev.abs().max(f64::MIN_POSITIVE) {
            return Ok(InnerSolution {
                weights,
                loglik: ll,
                iterations: it,
                converged: true,
                history,
            });
        }
    }
    Ok(InnerSolution {
        weights,
        loglik: ll,
        iterations: opts.max_iter,
        converged: false,
        history,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorConfig {
    /// Overrides the `⌈4 n^{1/4}⌉` rule.
    #[serde(default)]
    pub grid_points: Option<usize>,
    /// Explicit grid; overrides `grid_points` and the support box.
    #[serde(default)]
    pub beta_grid: Option<Vec<Vec<f64>>>,
    pub beta_lo: Vec<f64>,
    pub beta_hi: Vec<f64>,
    /// Partition of state indices; one cell when absent.
    #[serde(default)]
    pub x1_cells: Option<Vec<Vec<usize>>>,
    pub gamma_search: SearchConfig,
    #[serde(default = "default_em_tol")]
    pub em_tol: f64,
    #[serde(default = "default_em_iter")]
    pub em_max_iter: usize,
    #[serde(default = "default_accel")]
    pub em_accelerate: bool,
    #[serde(default = "default_active")]
    pub active_threshold: f64,
    #[serde(default = "default_solver_tol")]
    pub solver_tol: f64,
    #[serde(default = "default_solver_iter")]
    pub solver_max_iter: usize,
}

fn default_em_tol() -> f64 {
    1e-9
}
fn default_em_iter() -> usize {
    5000
}
fn default_accel() -> bool {
    true
}
fn default_active() -> f64 {
    1e-3
}
fn default_solver_tol() -> f64 {
    1e-10
}
fn default_solver_iter() -> usize {
    10_000
}

impl EstimatorConfig {
    /// `β` grid on `[0, 6]`, `γ` searched on `[-3, 2]`.
    pub fn labor_supply_default() -> Self {
        Self {
            grid_points: None,
            beta_grid: None,
            beta_lo: vec![0.0],
            beta_hi: vec![6.0],
            x1_cells: None,
            gamma_search: SearchConfig::interval(-3.0, 2.0),
            em_tol: default_em_tol(),
            em_max_iter: default_em_iter(),
            em_accelerate: default_accel(),
            active_threshold: default_active(),
            solver_tol: default_solver_tol(),
            solver_max_iter: default_solver_iter(),
        }
    }

    pub fn solver(&self) -> SolverOptions {
        SolverOptions {
            tol: self.solver_tol,
            max_iter: self.solver_max_iter,
        }
    }

    pub fn em(&self) -> EmOptions {
        EmOptions {
            tol: self.em_tol,
            max_iter: self.em_max_iter,
            accelerate: self.em_accelerate,
        }
    }

    pub fn beta_grid_for(&self, n: usize) -> Result<BetaGrid> {
        match &self.beta_grid {
            Some(points) => BetaGrid::from_points(points.clone()),
            None => BetaGrid::equally_spaced(&self.beta_lo, &self.beta_hi, self.grid_points.unwrap_or_else(|| grid_rule(n))),
        }
    }
}

type CacheKey = (Vec<u64>, Vec<u64>);

/// Everything the profile objective needs at a given `γ`, plus the memoized
/// per-`(γ, b_j)` solutions.
pub struct ProfileContext<'a> {
    spec: &'a ModelSpec<f64>,
    states: &'a StateGrid<f64>,
    kernel: &'a TransitionKernel<f64>,
    panel: &'a Panel,
    grid: BetaGrid,
    cells: X1Cells,
    assignment: Vec<usize>,
    cfg: &'a EstimatorConfig,
    cache: Mutex<HashMap<CacheKey, Arc<TypeSolution<f64>>>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProfilePoint {
    pub gamma: Vec<f64>,
    pub loglik: f64,
    pub weights: Vec<Vec<f64>>,
    pub em_iterations: usize,
    pub em_converged: bool,
    pub max_solver_residual: f64,
    pub max_solver_iterations: usize,
}

impl<'a> ProfileContext<'a> {
    pub fn new(
        spec: &'a ModelSpec<f64>,
        states: &'a StateGrid<f64>,
        kernel: &'a TransitionKernel<f64>,
        panel: &'a Panel,
        cfg: &'a EstimatorConfig,
    ) -> Result<Self> {
        panel.check(states.len(), spec.num_actions)?;
        let grid = cfg.beta_grid_for(panel.n())?;
        if grid.points[0].len() != spec.random_coef_count {
            return Err(DdcError::Dimension {
                context: "beta grid point",
                expected: spec.random_coef_count,
                got: grid.points[0].len(),
            });
        }
        let cells = match &cfg.x1_cells {
            Some(c) => X1Cells::from_partition(c.clone(), states.len())?,
            None => X1Cells::single(states.len()),
        };
        let assignment = cells.assign(panel);
        Ok(Self {
            spec,
            states,
            kernel,
            panel,
            grid,
            cells,
            assignment,
            cfg,
            cache: Mutex::new(HashMap::new()),
        })
    }

    pub fn grid(&self) -> &BetaGrid {
        &self.grid
    }

    fn solutions(&self, gamma: &[f64]) -> Result<Vec<Arc<TypeSolution<f64>>>> {
        let gkey: Vec<u64> = gamma.iter().map(|g| g.to_bits()).collect();
        let keys: Vec<CacheKey> = self
            .grid
            .points
            .iter()
            .map(|b| (gkey.clone(), b.iter().map(|x| x.to_bits()).collect()))
            .collect();
        let missing: Vec<usize> = {
            let cache = self.cache.lock().expect("cache lock");
            (0..keys.len()).filter(|&j| !cache.contains_key(&keys[j])).collect()
        };
        let solved = missing
            .par_iter()
            .map(|&j| {
                let b = &self.grid.points[j];
                solve_type(self.spec, self.states, &PayoffParams::new(gamma.to_vec(), b.clone()), self.kernel, self.cfg.solver())
                    .map(|s| (j, Arc::new(s)))
                    .map_err(|e| DdcError::GridPoint {
                        index: j,
                        point: b.clone(),
                        source: Box::new(e),
                    })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut cache = self.cache.lock().expect("cache lock");
        for (j, s) in solved {
            cache.insert(keys[j].clone(), s);
        }
        Ok(keys.iter().map(|k| Arc::clone(&cache[k])).collect())
    }

    pub fn likelihood(&self, gamma: &[f64]) -> Result<(LikelihoodMatrix<f64>, f64, usize)> {
        if gamma.len() != self.spec.gamma_len() {
            return Err(DdcError::Dimension {
                context: "gamma",
                expected: self.spec.gamma_len(),
                got: gamma.len(),
            });
        }
        let sols = self.solutions(gamma)?;
        let refs: Vec<&TypeSolution<f64>> = sols.iter().map(AsRef::as_ref).collect();
        let residual = refs.iter().map(|s| s.residual).fold(0.0, f64::max);
        let iters = refs.iter().map(|s| s.iterations).max().unwrap_or(0);
        Ok((likelihood_from_solutions(self.panel, &refs)?, residual, iters))
    }

    /// Maximum over the sieve weights of the log-likelihood at `γ`.
    pub fn evaluate(&self, gamma: &[f64]) -> Result<ProfilePoint> {
        let (l, residual, iters) = self.likelihood(gamma)?;
        let inner = inner_weight_solve(&l, &self.assignment, self.cells.len(), None, self.cfg.em())?;
        Ok(ProfilePoint {
            gamma: gamma.to_vec(),
            loglik: inner.loglik,
            weights: inner.weights,
            em_iterations: inner.iterations,
            em_converged: inner.converged,
            max_solver_residual: residual,
            max_solver_iterations: iters,
        })
    }

    pub fn sieve(&self, weights: Vec<Vec<f64>>) -> SieveDistribution {
        let mut mass = vec![0.0; self.cells.len()];
        for &k in &self.assignment {
            mass[k] += 1.0;
        }
        let n = self.assignment.len().max(1) as f64;
        SieveDistribution {
            grid: self.grid.points.clone(),
            x1_cells: self.cells.cells.clone(),
            weights,
            cell_mass: mass.into_iter().map(|m| m / n).collect(),
        }
    }
}

/// `(max_P loglik, argmax P)` at `γ`.
pub fn profile_objective(ctx: &ProfileContext<'_>, gamma: &[f64]) -> Result<(f64, Vec<Vec<f64>>)> {
    let p = ctx.evaluate(gamma)?;
    Ok((p.loglik, p.weights))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimateDiagnostics {
    pub evaluations: usize,
    /// `(γ, profile log-likelihood)` per probe.
    pub trace: Vec<(Vec<f64>, f64)>,
    pub em_iterations: Vec<usize>,
    pub em_unconverged: usize,
    pub max_solver_residual: f64,
    pub max_solver_iterations: usize,
    /// Wall time; excluded from deterministic outputs.
    #[serde(skip)]
    pub elapsed_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimateResult {
    pub gamma_hat: Vec<f64>,
    pub sieve: SieveDistribution,
    pub loglik: f64,
    pub active_types: usize,
    pub converged: bool,
    pub diagnostics: EstimateDiagnostics,
}

/// Profile estimator: searches `γ` and returns the best probe with its weights.
pub fn estimate(
    panel: &Panel,
    spec: &ModelSpec<f64>,
    states: &StateGrid<f64>,
    kernel: &TransitionKernel<f64>,
    cfg: &EstimatorConfig,
) -> Result<EstimateResult> {
    let start = Instant::now();
    let ctx = ProfileContext::new(spec, states, kernel, panel, cfg)?;
    if cfg.gamma_search.lo.len() != spec.gamma_len() {
        return Err(DdcError::Dimension {
            context: "gamma search box",
            expected: spec.gamma_len(),
            got: cfg.gamma_search.lo.len(),
        });
    }
    let mut points: Vec<ProfilePoint> = Vec::new();
    let outcome: SearchOutcome = maximize(&cfg.gamma_search, |g| {
        let p = ctx.evaluate(g)?;
        let v = p.loglik;
        points.push(p);
        Ok(v)
    })?;
    let best = points
        .iter()
        .find(|p| p.gamma == outcome.best)
        .cloned()
        .ok_or_else(|| DdcError::Numeric("search returned an unprobed point".into()))?;
    if points.iter().any(|p| p.loglik > best.loglik) {
        return Err(DdcError::Numeric("returned gamma is not the best probe".into()));
    }
    let sieve = ctx.sieve(best.weights.clone());
    let active_types = count_active_types(&sieve, cfg.active_threshold);
    Ok(EstimateResult {
        gamma_hat: best.gamma.clone(),
        loglik: best.loglik,
        active_types,
        converged: outcome.converged,
        diagnostics: EstimateDiagnostics {
            evaluations: points.len(),
            trace: outcome.trace,
            em_iterations: points.iter().map(|p| p.em_iterations).collect(),
            em_unconverged: points.iter().filter(|p| !p.em_converged).count(),
            max_solver_residual: points.iter().map(|p| p.max_solver_residual).fold(0.0, f64::max),
            max_solver_iterations: points.iter().map(|p| p.max_solver_iterations).max().unwrap_or(0),
            elapsed_secs: start.elapsed().as_secs_f64(),
        },
        sieve,
    })
}

/// Step CDF in coordinate `d` of `β` within cell `k`.
pub fn estimated_cdf_coord(sieve: &SieveDistribution, cell: usize, d: usize) -> StepCdf {
    StepCdf::from_atoms(sieve.grid.iter().zip(&sieve.weights).map(|(b, w)| (b[d], w[cell])).collect())
}

/// Step CDF of scalar `β` within cell `k`.
pub fn estimated_cdf(sieve: &SieveDistribution, cell: usize) -> StepCdf {
    estimated_cdf_coord(sieve, cell, 0)
}

/// Step CDF of scalar `β` pooled over cells by their mass.
pub fn pooled_cdf(sieve: &SieveDistribution) -> StepCdf {
    StepCdf::from_atoms(
        sieve
            .grid
            .iter()
            .enumerate()
            .map(|(j, b)| (b[0], sieve.pooled_weight(j)))
            .collect(),
    )
}

/// Grid points whose pooled weight exceeds `threshold`.
pub fn count_active_types(sieve: &SieveDistribution, threshold: f64) -> usize {
    (0..sieve.grid.len()).filter(|&j| sieve.pooled_weight(j) > threshold).count()
}
