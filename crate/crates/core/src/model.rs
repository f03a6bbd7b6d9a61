//! Structural model definition: actions, discretized states, linear payoffs with
//! random coefficients, and the state transition.
//!
//! Action `0` is the outside good and always pays zero. For an action `a >= 1`
//! the payoff is
//!
//! ```text
//! u(x, a) = [β_a0] + x[..p]·β_a + x[p..]·γ_a
//! ```
//!
//! where `p` is the number of state coordinates with random slopes and the
//! bracketed intercept exists only in intercept mode. Within `β` each action's
//! block is `(intercept?, slopes)`, blocks ordered by action. `γ` stacks
//! `(γ_1, …, γ_{|A|-1})`, and in a finite-horizon model it additionally stacks
//! one such vector per period.

use serde::Serialize;

use crate::error::{DdcError, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Horizon {
    Infinite,
    Finite(usize),
}

impl Horizon {
    pub fn periods(self) -> Option<usize> {
        match self {
            Horizon::Infinite => None,
            Horizon::Finite(t) => Some(t),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec<T> {
    /// Total number of actions including the outside good.
    pub num_actions: usize,
    pub state_dim: usize,
    /// Number of leading state coordinates carrying a random slope.
    pub random_slope_dim: usize,
    pub discount: T,
    pub random_coef_count: usize,
    pub horizon: Horizon,
    pub intercept_mode: bool,
}

impl<T: Scalar> ModelSpec<T> {
    /// Builds a spec with `random_coef_count` derived from the layout.
    pub fn new(
        num_actions: usize,
        state_dim: usize,
        random_slope_dim: usize,
        discount: T,
        horizon: Horizon,
        intercept_mode: bool,
    ) -> Result<Self> {
        let spec = Self {
            num_actions,
            state_dim,
            random_slope_dim,
            discount,
            random_coef_count: (num_actions.saturating_sub(1))
                * (random_slope_dim + usize::from(intercept_mode)),
            horizon,
            intercept_mode,
        };
        let problems = spec.violations();
        if let Some(v) = problems.first() {
            return Err(DdcError::Config(format!("{v:?}")));
        }
        Ok(spec)
    }

    /// Binary choice, `x = (x1, x2)`, random slope on `x1`, homogeneous `γ` on `x2`.
    pub fn binary_two_state(discount: T) -> Self {
        Self::new(2, 2, 1, discount, Horizon::Infinite, false).expect("valid layout")
    }

    pub fn inside_actions(&self) -> usize {
        self.num_actions - 1
    }

    /// Length of one action's random-coefficient block.
    pub fn beta_block(&self) -> usize {
        self.random_slope_dim + usize::from(self.intercept_mode)
    }

    pub fn gamma_block(&self) -> usize {
        self.state_dim - self.random_slope_dim
    }

    pub fn gamma_per_period(&self) -> usize {
        self.inside_actions() * self.gamma_block()
    }

    /// Length of the full (possibly period-stacked) `γ` vector.
    pub fn gamma_len(&self) -> usize {
        self.gamma_per_period() * self.horizon.periods().unwrap_or(1)
    }

    fn violations(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let rho = self.discount.as_f64();
        if !(0.0..1.0).contains(&rho) {
            out.push(Violation::Discount { value: rho });
        }
        if self.num_actions < 2 {
            out.push(Violation::TooFewActions {
                got: self.num_actions,
            });
        }
        if self.state_dim == 0 || self.random_slope_dim > self.state_dim {
            out.push(Violation::SlopeLayout {
                state_dim: self.state_dim,
                random_slope_dim: self.random_slope_dim,
            });
        }
        let expected =
            self.num_actions.saturating_sub(1) * (self.random_slope_dim + usize::from(self.intercept_mode));
        if expected == 0 || expected != self.random_coef_count {
            out.push(Violation::CoefCount {
                expected,
                got: self.random_coef_count,
            });
        }
        if self.horizon == Horizon::Finite(0) {
            out.push(Violation::Horizon);
        }
        out
    }
}

/// Ordered list of distinct state vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct StateGrid<T> {
    points: Vec<Vec<T>>,
    dim: usize,
}

impl<T: Scalar> StateGrid<T> {
    pub fn new(points: Vec<Vec<T>>) -> Result<Self> {
        let dim = points.first().map_or(0, Vec::len);
        if let Some(bad) = points.iter().find(|p| p.len() != dim) {
            return Err(DdcError::Dimension {
                context: "state grid point",
                expected: dim,
                got: bad.len(),
            });
        }
        Ok(Self { points, dim })
    }

    /// Cartesian product of per-axis coordinates; the last axis varies fastest.
    pub fn product(axes: &[Vec<T>]) -> Result<Self> {
        let mut points: Vec<Vec<T>> = vec![Vec::new()];
        for axis in axes {
            points = points
                .into_iter()
                .flat_map(|prefix| {
                    axis.iter().map(move |&c| {
                        let mut p = prefix.clone();
                        p.push(c);
                        p
                    })
                })
                .collect();
        }
        Self::new(points)
    }

    /// `count` equally spaced coordinates on `[lo, hi]`.
    pub fn linspace(lo: T, hi: T, count: usize) -> Vec<T> {
        match count {
            0 => Vec::new(),
            1 => vec![lo],
            _ => {
                let step = (hi - lo) / T::from_usize_lossy(count - 1);
                (0..count).map(|i| lo + step * T::from_usize_lossy(i)).collect()
            }
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn point(&self, i: usize) -> &[T] {
        &self.points[i]
    }

    pub fn points(&self) -> &[Vec<T>] {
        &self.points
    }

    /// Exact match lookup.
    pub fn index_of(&self, x: &[T]) -> Option<usize> {
        self.points.iter().position(|p| p.as_slice() == x)
    }

    /// Nearest grid point in Euclidean distance (first wins on ties).
    pub fn nearest(&self, x: &[T]) -> usize {
        let mut best = (0, T::infinity());
        for (i, p) in self.points.iter().enumerate() {
            let d: T = p.iter().zip(x).map(|(&a, &b)| (a - b) * (a - b)).sum();
            if d < best.1 {
                best = (i, d);
            }
        }
        best.0
    }
}

/// Per-action row-stochastic transition `F(x' | x, a)` on a state grid.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionKernel<T> {
    num_actions: usize,
    num_states: usize,
    probs: Vec<T>,
    sparse: Vec<Vec<(usize, T)>>,
}

impl<T: Scalar> TransitionKernel<T> {
    /// `probs` is laid out `[action][from][to]`.
    pub fn new(num_actions: usize, num_states: usize, probs: Vec<T>) -> Result<Self> {
        let expected = num_actions * num_states * num_states;
        if probs.len() != expected {
            return Err(DdcError::Dimension {
                context: "transition kernel",
                expected,
                got: probs.len(),
            });
        }
        let sparse = probs
            .chunks(num_states.max(1))
            .map(|row| {
                row.iter()
                    .enumerate()
                    .filter(|(_, &p)| p != T::zero())
                    .map(|(j, &p)| (j, p))
                    .collect()
            })
            .collect();
        Ok(Self {
            num_actions,
            num_states,
            probs,
            sparse,
        })
    }

    pub fn from_fn(
        num_actions: usize,
        num_states: usize,
        mut f: impl FnMut(usize, usize, usize) -> T,
    ) -> Self {
        let mut probs = Vec::with_capacity(num_actions * num_states * num_states);
        for a in 0..num_actions {
            for i in 0..num_states {
                for j in 0..num_states {
                    probs.push(f(a, i, j));
                }
            }
        }
        Self::new(num_actions, num_states, probs).expect("sized by construction")
    }

    /// Same transition for every action.
    pub fn action_invariant(num_actions: usize, rows: &[Vec<T>]) -> Result<Self> {
        let s = rows.len();
        let mut probs = Vec::with_capacity(num_actions * s * s);
        for _ in 0..num_actions {
            for r in rows {
                if r.len() != s {
                    return Err(DdcError::Dimension {
                        context: "transition row",
                        expected: s,
                        got: r.len(),
                    });
                }
                probs.extend_from_slice(r);
            }
        }
        Self::new(num_actions, s, probs)
    }

    pub fn identity(num_actions: usize, num_states: usize) -> Self {
        Self::from_fn(num_actions, num_states, |_, i, j| {
            if i == j {
                T::one()
            } else {
                T::zero()
            }
        })
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn prob(&self, a: usize, from: usize, to: usize) -> T {
        self.probs[(a * self.num_states + from) * self.num_states + to]
    }

    pub fn row(&self, a: usize, from: usize) -> &[T] {
        let start = (a * self.num_states + from) * self.num_states;
        &self.probs[start..start + self.num_states]
    }

    pub fn probs(&self) -> &[T] {
        &self.probs
    }

    /// `Σ_{x'} v(x') F(x' | from, a)` over the nonzero entries of the row.
    pub fn expect(&self, a: usize, from: usize, v: &[T]) -> T {
        self.sparse[a * self.num_states + from]
            .iter()
            .map(|&(j, p)| p * v[j])
            .sum()
    }

    pub fn cast<U: Scalar>(&self) -> TransitionKernel<U> {
        TransitionKernel::new(
            self.num_actions,
            self.num_states,
            self.probs.iter().map(|p| U::lit(p.as_f64())).collect(),
        )
        .expect("same shape")
    }
}

/// One type's payoff coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct PayoffParams<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

impl<T: Scalar> PayoffParams<T> {
    pub fn new(gamma: Vec<T>, beta: Vec<T>) -> Self {
        Self { gamma, beta }
    }

    /// Slice of a period-stacked `γ` for period `t` (1-based). Infinite-horizon
    /// params are returned unchanged.
    pub fn for_period(&self, spec: &ModelSpec<T>, t: usize) -> Result<Self> {
        let per = spec.gamma_per_period();
        match spec.horizon {
            Horizon::Infinite => Ok(self.clone()),
            Horizon::Finite(periods) => {
                if self.gamma.len() == per {
                    return Ok(self.clone());
                }
                if self.gamma.len() != per * periods {
                    return Err(DdcError::Dimension {
                        context: "period-stacked gamma",
                        expected: per * periods,
                        got: self.gamma.len(),
                    });
                }
                if t == 0 || t > periods {
                    return Err(DdcError::Config(format!(
                        "period {t} outside 1..={periods}"
                    )));
                }
                Ok(Self {
                    gamma: self.gamma[(t - 1) * per..t * per].to_vec(),
                    beta: self.beta.clone(),
                })
            }
        }
    }

    fn check(&self, spec: &ModelSpec<T>) -> Result<()> {
        if self.beta.len() != spec.random_coef_count {
            return Err(DdcError::Dimension {
                context: "beta",
                expected: spec.random_coef_count,
                got: self.beta.len(),
            });
        }
        if self.gamma.len() != spec.gamma_per_period() {
            return Err(DdcError::Dimension {
                context: "gamma (per period)",
                expected: spec.gamma_per_period(),
                got: self.gamma.len(),
            });
        }
        Ok(())
    }
}

/// Period payoff `u(x, a)`; exactly zero for the outside good.
pub fn period_payoff<T: Scalar>(
    spec: &ModelSpec<T>,
    params: &PayoffParams<T>,
    x: &[T],
    a: usize,
) -> Result<T> {
    if x.len() != spec.state_dim {
        return Err(DdcError::Dimension {
            context: "state vector",
            expected: spec.state_dim,
            got: x.len(),
        });
    }
    if a >= spec.num_actions {
        return Err(DdcError::Config(format!(
            "action {a} outside 0..{}",
            spec.num_actions
        )));
    }
    params.check(spec)?;
    if a == 0 {
        return Ok(T::zero());
    }
    Ok(payoff_unchecked(spec, params, x, a))
}

fn payoff_unchecked<T: Scalar>(spec: &ModelSpec<T>, params: &PayoffParams<T>, x: &[T], a: usize) -> T {
    let p = spec.random_slope_dim;
    let bb = spec.beta_block();
    let gb = spec.gamma_block();
    let beta = &params.beta[(a - 1) * bb..a * bb];
    let gamma = &params.gamma[(a - 1) * gb..a * gb];
    let (intercept, slopes) = if spec.intercept_mode {
        (beta[0], &beta[1..])
    } else {
        (T::zero(), beta)
    };
    let random: T = x[..p].iter().zip(slopes).map(|(&xi, &b)| xi * b).sum();
    let fixed: T = x[p..].iter().zip(gamma).map(|(&xi, &g)| xi * g).sum();
    intercept + random + fixed
}

/// `u(x, a)` on every grid state, laid out `[state][action]`.
pub fn payoff_table<T: Scalar>(
    spec: &ModelSpec<T>,
    params: &PayoffParams<T>,
    grid: &StateGrid<T>,
) -> Result<Vec<T>> {
    params.check(spec)?;
    if grid.dim() != spec.state_dim {
        return Err(DdcError::Dimension {
            context: "state grid",
            expected: spec.state_dim,
            got: grid.dim(),
        });
    }
    let na = spec.num_actions;
    let mut out = vec![T::zero(); grid.len() * na];
    for (s, x) in grid.points().iter().enumerate() {
        for a in 1..na {
            out[s * na + a] = payoff_unchecked(spec, params, x, a);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind")]
pub enum Violation {
    Discount { value: f64 },
    TooFewActions { got: usize },
    SlopeLayout { state_dim: usize, random_slope_dim: usize },
    CoefCount { expected: usize, got: usize },
    Horizon,
    GridTooSmall { size: usize },
    StateDim { index: usize, expected: usize, got: usize },
    DuplicateState { i: usize, j: usize },
    KernelShape { actions: usize, states: usize },
    NegativeProb { action: usize, from: usize, to: usize },
    NonFiniteProb { action: usize, from: usize, to: usize },
    RowSum { action: usize, from: usize, sum: f64 },
}

/// Row-sum tolerance for kernels: `1e-12`, widened to a few ulps for `f32`.
pub fn row_sum_tolerance<T: Scalar>() -> f64 {
    (64.0 * T::epsilon().as_f64()).max(1e-12)
}

/// Every invariant violation among the model, grid and kernel.
pub fn validate<T: Scalar>(
    spec: &ModelSpec<T>,
    grid: &StateGrid<T>,
    kernel: &TransitionKernel<T>,
) -> Vec<Violation> {
    let mut out = spec.violations();
    if grid.len() < 2 {
        out.push(Violation::GridTooSmall { size: grid.len() });
    }
    for (i, p) in grid.points().iter().enumerate() {
        if p.len() != spec.state_dim {
            out.push(Violation::StateDim {
                index: i,
                expected: spec.state_dim,
                got: p.len(),
            });
        }
    }
    for i in 0..grid.len() {
        for j in i + 1..grid.len() {
            if grid.point(i) == grid.point(j) {
                out.push(Violation::DuplicateState { i, j });
            }
        }
    }
    if kernel.num_actions() != spec.num_actions || kernel.num_states() != grid.len() {
        out.push(Violation::KernelShape {
            actions: kernel.num_actions(),
            states: kernel.num_states(),
        });
        return out;
    }
    let tol = row_sum_tolerance::<T>();
    for a in 0..kernel.num_actions() {
        for from in 0..kernel.num_states() {
            let row = kernel.row(a, from);
            for (to, &p) in row.iter().enumerate() {
                if !p.is_finite() {
                    out.push(Violation::NonFiniteProb { action: a, from, to });
                } else if p < T::zero() {
                    out.push(Violation::NegativeProb { action: a, from, to });
                }
            }
            let sum: f64 = row.iter().map(|p| p.as_f64()).sum();
            if (sum - 1.0).abs() > tol {
                out.push(Violation::RowSum { action: a, from, sum });
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spec2() -> ModelSpec<f64> {
        ModelSpec::binary_two_state(0.9)
    }

    #[test]
    fn outside_good_pays_zero() {
        let p = PayoffParams::new(vec![7.0], vec![-3.0]);
        assert_eq!(period_payoff(&spec2(), &p, &[1.0, 3.0], 0).unwrap(), 0.0);
    }

    #[test]
    fn linear_payoff_by_hand() {
        let p = PayoffParams::new(vec![0.5], vec![2.0]);
        assert_eq!(period_payoff(&spec2(), &p, &[1.0, 3.0], 1).unwrap(), 3.5);
    }

    #[test]
    fn pure_intercept() {
        let spec = ModelSpec::<f64>::new(2, 2, 1, 0.5, Horizon::Infinite, true).unwrap();
        assert_eq!(spec.random_coef_count, 2);
        let p = PayoffParams::new(vec![0.0], vec![1.0, 0.0]);
        assert_eq!(period_payoff(&spec, &p, &[4.0, -2.0], 1).unwrap(), 1.0);
    }

    #[test]
    fn dimension_mismatch_is_config_error() {
        let p = PayoffParams::new(vec![0.5], vec![2.0]);
        assert!(matches!(
            period_payoff(&spec2(), &p, &[1.0], 1),
            Err(DdcError::Dimension { .. })
        ));
        let bad = PayoffParams::new(vec![0.5, 1.0], vec![2.0]);
        assert!(period_payoff(&spec2(), &bad, &[1.0, 2.0], 1).is_err());
    }

    #[test]
    fn spec_rejects_unit_discount() {
        assert!(ModelSpec::<f64>::new(2, 2, 1, 1.0, Horizon::Infinite, false).is_err());
        assert!(ModelSpec::<f64>::new(1, 2, 1, 0.5, Horizon::Infinite, false).is_err());
    }

    #[test]
    fn validate_reports_each_violation() {
        let spec = spec2();
        let grid = StateGrid::new(vec![vec![0.0, 0.0], vec![1.0, 0.0]]).unwrap();
        let good = TransitionKernel::from_fn(2, 2, |_, _, _| 0.5);
        assert!(validate(&spec, &grid, &good).is_empty());

        let bad = TransitionKernel::from_fn(2, 2, |a, i, j| {
            if a == 1 && i == 0 && j == 1 {
                0.4
            } else {
                0.5
            }
        });
        let v = validate(&spec, &grid, &bad);
        assert_eq!(v.len(), 1);
        assert!(matches!(v[0], Violation::RowSum { action: 1, from: 0, .. }));

        let dup = StateGrid::new(vec![vec![0.0, 0.0], vec![0.0, 0.0]]).unwrap();
        assert_eq!(
            validate(&spec, &dup, &good),
            vec![Violation::DuplicateState { i: 0, j: 1 }]
        );
    }

    #[test]
    fn product_grid_order_and_nearest() {
        let g = StateGrid::product(&[vec![0.0, 1.0], vec![0.0, 2.0, 4.0]]).unwrap();
        assert_eq!(g.len(), 6);
        assert_eq!(g.point(1), &[0.0, 2.0]);
        assert_eq!(g.nearest(&[0.9, 3.2]), 5);
        assert_eq!(g.nearest(&[0.2, 1.2]), 1);
        assert_eq!(g.index_of(&[1.0, 4.0]), Some(5));
    }

    #[test]
    fn stacked_gamma_slices_by_period() {
        let spec = ModelSpec::<f64>::new(2, 2, 1, 0.9, Horizon::Finite(3), false).unwrap();
        assert_eq!(spec.gamma_len(), 3);
        let p = PayoffParams::new(vec![1.0, 2.0, 3.0], vec![0.0]);
        assert_eq!(p.for_period(&spec, 2).unwrap().gamma, vec![2.0]);
        assert!(p.for_period(&spec, 4).is_err());
    }

    proptest! {
        #[test]
        fn payoff_is_affine_in_state(
            beta in -5.0..5.0f64, gamma in -5.0..5.0f64,
            x in prop::array::uniform2(-10.0..10.0f64),
            y in prop::array::uniform2(-10.0..10.0f64),
            alpha in 0.0..1.0f64,
        ) {
            let spec = spec2();
            let p = PayoffParams::new(vec![gamma], vec![beta]);
            for a in 0..2 {
                let mix = [alpha * x[0] + (1.0 - alpha) * y[0], alpha * x[1] + (1.0 - alpha) * y[1]];
                let lhs = period_payoff(&spec, &p, &mix, a).unwrap();
                let rhs = alpha * period_payoff(&spec, &p, &x, a).unwrap()
                    + (1.0 - alpha) * period_payoff(&spec, &p, &y, a).unwrap();
                prop_assert!((lhs - rhs).abs() < 1e-9);
            }
        }

        #[test]
        fn outside_payoff_zero_over_grid(beta in -5.0..5.0f64, gamma in -5.0..5.0f64) {
            let spec = spec2();
            let axis = StateGrid::linspace(0.0, 4.0, 5);
            let grid = StateGrid::product(&[axis.clone(), axis]).unwrap();
            let table = payoff_table(&spec, &PayoffParams::new(vec![gamma], vec![beta]), &grid).unwrap();
            for s in 0..grid.len() {
                prop_assert_eq!(table[s * 2], 0.0);
            }
        }
    }
}
