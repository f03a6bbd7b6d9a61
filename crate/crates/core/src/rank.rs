//! Number of support points of a discrete type distribution, read off as the
//! rank of the ratio matrix
//!
//! ```text
//! M[x3][x2] = f(a3, a2, a1, x3, x2 | x1) / (F(x3 | x2, a2) F(x2 | x1, a1))
//!           = Σ_r P(a3; x3, b_r) P(a2; x2, b_r) P(a1; x1, b_r) f_r.
//! ```

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{DdcError, Result};
use crate::model::{ModelSpec, PayoffParams, StateGrid, TransitionKernel};
use crate::simulator::Panel;
use crate::solver::{solve_type, SolverOptions, TypeSolution};

/// One support point of a discrete type distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TypePoint {
    pub beta: Vec<f64>,
    pub weight: f64,
}

pub fn check_types(types: &[TypePoint], coef_count: usize) -> Result<()> {
    if types.is_empty() {
        return Err(DdcError::Config("need at least one type".into()));
    }
    if types.iter().any(|t| t.beta.len() != coef_count) {
        return Err(DdcError::Dimension {
            context: "type coefficient vector",
            expected: coef_count,
            got: types.iter().find(|t| t.beta.len() != coef_count).map_or(0, |t| t.beta.len()),
        });
    }
    if types.iter().any(|t| !(t.weight > 0.0) || !t.weight.is_finite()) {
        return Err(DdcError::Config("type weights must be positive".into()));
    }
    let total: f64 = types.iter().map(|t| t.weight).sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(DdcError::Config(format!("type weights sum to {total}, not 1")));
    }
    Ok(())
}

/// Solves every type in parallel.
pub fn solve_types(
    spec: &ModelSpec<f64>,
    grid: &StateGrid<f64>,
    gamma: &[f64],
    kernel: &TransitionKernel<f64>,
    types: &[TypePoint],
    opts: SolverOptions,
) -> Result<Vec<TypeSolution<f64>>> {
    check_types(types, spec.random_coef_count)?;
    types
        .par_iter()
        .enumerate()
        .map(|(r, t)| {
            solve_type(spec, grid, &PayoffParams::new(gamma.to_vec(), t.beta.clone()), kernel, opts).map_err(|e| {
                DdcError::GridPoint {
                    index: r,
                    point: t.beta.clone(),
                    source: Box::new(e),
                }
            })
        })
        .collect()
}

/// Actions in periods 1–3 and the initial state held fixed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RankConditioning {
    pub a1: usize,
    pub a2: usize,
    pub a3: usize,
    pub x1: usize,
}

/// `f(a3, a2, a1, x3, x2 | x1)` over all `(x3, x2)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JointTable {
    pub conditioning: RankConditioning,
    /// `[x3][x2]`.
    pub probs: Vec<Vec<f64>>,
    /// Cell counts when estimated from a panel.
    pub counts: Option<Vec<Vec<usize>>>,
    /// Individuals starting at `x1` (sample mode).
    pub base: Option<usize>,
}

fn check_conditioning(c: &RankConditioning, num_states: usize, num_actions: usize) -> Result<()> {
    if c.x1 >= num_states || [c.a1, c.a2, c.a3].iter().any(|&a| a >= num_actions) {
        return Err(DdcError::Config(format!("conditioning {c:?} out of range")));
    }
    Ok(())
}

/// Exact joint probabilities from solved types (population mode).
pub fn population_joint(
    spec: &ModelSpec<f64>,
    grid: &StateGrid<f64>,
    gamma: &[f64],
    kernel: &TransitionKernel<f64>,
    types: &[TypePoint],
    cond: RankConditioning,
    opts: SolverOptions,
) -> Result<JointTable> {
    check_conditioning(&cond, grid.len(), spec.num_actions)?;
    let sols = solve_types(spec, grid, gamma, kernel, types, opts)?;
    let s = grid.len();
    let mut probs = vec![vec![0.0; s]; s];
    for (t, sol) in types.iter().zip(&sols) {
        let p1 = sol.at(1).prob(cond.x1, cond.a1);
        for x2 in 0..s {
            let f2 = kernel.prob(cond.a1, cond.x1, x2);
            let p2 = sol.at(2).prob(x2, cond.a2);
            for (x3, row) in probs.iter_mut().enumerate() {
                let f3 = kernel.prob(cond.a2, x2, x3);
                let p3 = sol.at(3).prob(x3, cond.a3);
                row[x2] += t.weight * p1 * f2 * p2 * f3 * p3;
            }
        }
    }
    Ok(JointTable {
        conditioning: cond,
        probs,
        counts: None,
        base: None,
    })
}

/// Cell frequencies over the first three periods of a panel (sample mode).
pub fn sample_joint(panel: &Panel, num_states: usize, num_actions: usize, cond: RankConditioning) -> Result<JointTable> {
    check_conditioning(&cond, num_states, num_actions)?;
    panel.check(num_states, num_actions)?;
    if panel.periods() < 3 {
        return Err(DdcError::Config("rank estimation needs at least three periods".into()));
    }
    let mut counts = vec![vec![0usize; num_states]; num_states];
    let mut base = 0usize;
    for i in 0..panel.n() {
        if panel.state(i, 0) != cond.x1 {
            continue;
        }
        base += 1;
        if panel.action(i, 0) == cond.a1 && panel.action(i, 1) == cond.a2 && panel.action(i, 2) == cond.a3 {
            counts[panel.state(i, 2)][panel.state(i, 1)] += 1;
        }
    }
    if base == 0 {
        return Err(DdcError::Config(format!("no individual starts in state {}", cond.x1)));
    }
    let probs = counts
        .iter()
        .map(|row| row.iter().map(|&c| c as f64 / base as f64).collect())
        .collect();
    Ok(JointTable {
        conditioning: cond,
        probs,
        counts: Some(counts),
        base: Some(base),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RatioMatrix {
    pub conditioning: RankConditioning,
    /// Retained `x3` states (rows) and `x2` states (columns).
    pub x3: Vec<usize>,
    pub x2: Vec<usize>,
    /// `[row][col]`.
    pub values: Vec<Vec<f64>>,
}

impl RatioMatrix {
    pub fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.x3.len(), self.x2.len(), |r, c| self.values[r][c])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RatioOptions {
    /// Minimum transition probability in a denominator.
    #[serde(default = "default_floor")]
    pub floor: f64,
    /// Sample mode: rows and columns with fewer observations are dropped.
    #[serde(default = "default_min_count")]
    pub min_count: usize,
}

fn default_floor() -> f64 {
    1e-8
}

fn default_min_count() -> usize {
    5
}

impl Default for RatioOptions {
    fn default() -> Self {
        Self {
            floor: default_floor(),
            min_count: default_min_count(),
        }
    }
}

/// Divides the joint by `F(x3|x2,a2) F(x2|x1,a1)`. Columns with
/// `F(x2|x1,a1) ≤ floor` and rows with any `F(x3|x2,a2) ≤ floor` are dropped,
/// as are sparse rows and columns in sample mode.
pub fn build_ratio_matrix(joint: &JointTable, kernel: &TransitionKernel<f64>, opts: RatioOptions) -> Result<RatioMatrix> {
    let c = joint.conditioning;
    let s = joint.probs.len();
    if kernel.num_states() != s {
        return Err(DdcError::Dimension {
            context: "ratio matrix kernel",
            expected: s,
            got: kernel.num_states(),
        });
    }
    let mut x2: Vec<usize> = (0..s).filter(|&x| kernel.prob(c.a1, c.x1, x) > opts.floor).collect();
    let mut x3: Vec<usize> = (0..s)
        .filter(|&y| x2.iter().all(|&x| kernel.prob(c.a2, x, y) > opts.floor))
        .collect();
    if let Some(counts) = &joint.counts {
        let col_total = |x: usize, rows: &[usize]| -> usize { rows.iter().map(|&y| counts[y][x]).sum() };
        let row_total = |y: usize, cols: &[usize]| -> usize { cols.iter().map(|&x| counts[y][x]).sum() };
        x2.retain(|&x| col_total(x, &x3) >= opts.min_count);
        x3.retain(|&y| row_total(y, &x2) >= opts.min_count);
    }
    if x2.is_empty() || x3.is_empty() {
        return Err(DdcError::EmptyMatrix { floor: opts.floor });
    }
    let values = x3
        .iter()
        .map(|&y| {
            x2.iter()
                .map(|&x| joint.probs[y][x] / (kernel.prob(c.a2, x, y) * kernel.prob(c.a1, c.x1, x)))
                .collect()
        })
        .collect();
    Ok(RatioMatrix {
        conditioning: c,
        x3,
        x2,
        values,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum RankRule {
    /// Count `σ_r / σ_1 > threshold`.
    Relative { threshold: f64 },
    /// Count `σ_r > threshold`.
    Absolute { threshold: f64 },
}

impl Default for RankRule {
    fn default() -> Self {
        RankRule::Relative { threshold: 1e-6 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankEstimate {
    pub rank: usize,
    /// Descending.
    pub singular_values: Vec<f64>,
    pub rule: RankRule,
}

/// Descending singular values.
pub fn singular_values(m: &DMatrix<f64>) -> Vec<f64> {
    if m.is_empty() {
        return Vec::new();
    }
    let mut sv: Vec<f64> = m.singular_values().iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv
}

pub fn estimate_rank(m: &RatioMatrix, rule: RankRule) -> RankEstimate {
    rank_of(&m.to_matrix(), rule)
}

pub fn rank_of(m: &DMatrix<f64>, rule: RankRule) -> RankEstimate {
    let sv = singular_values(m);
    let top = sv.first().copied().unwrap_or(0.0);
    let rank = match rule {
        _ if !(top > 0.0) => 0,
        RankRule::Relative { threshold } => sv.iter().filter(|&&s| s / top > threshold).count(),
        RankRule::Absolute { threshold } => sv.iter().filter(|&&s| s > threshold).count(),
    };
    RankEstimate {
        rank,
        singular_values: sv,
        rule,
    }
}
