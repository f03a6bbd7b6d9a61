//! Integrated value functions and conditional choice probabilities for one
//! type: infinite-horizon fixed point by plain successive approximation and
//! finite-horizon backward recursion.
//!
//! With i.i.d. type-I extreme value shocks the expected maximum has the closed
//! form `log Σ_a exp(w_a(x)) + γ_EM`, where
//! `w_a(x) = u(x, a) + ρ Σ_{x'} v(x') F(x' | x, a)`.

use crate::error::{DdcError, Result};
use crate::model::{payoff_table, Horizon, ModelSpec, PayoffParams, StateGrid, TransitionKernel};
use crate::scalar::{log_sum_exp, softmax_into, Scalar};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: 10_000,
        }
    }
}

/// `u(x, a)` laid out `[state][action]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PayoffTable<T> {
    num_states: usize,
    num_actions: usize,
    values: Vec<T>,
}

impl<T: Scalar> PayoffTable<T> {
    pub fn from_params(spec: &ModelSpec<T>, grid: &StateGrid<T>, params: &PayoffParams<T>) -> Result<Self> {
        Ok(Self {
            num_states: grid.len(),
            num_actions: spec.num_actions,
            values: payoff_table(spec, params, grid)?,
        })
    }

    pub fn from_values(num_states: usize, num_actions: usize, values: Vec<T>) -> Result<Self> {
        if values.len() != num_states * num_actions {
            return Err(DdcError::Dimension {
                context: "payoff table",
                expected: num_states * num_actions,
                got: values.len(),
            });
        }
        Ok(Self {
            num_states,
            num_actions,
            values,
        })
    }

    pub fn get(&self, s: usize, a: usize) -> T {
        self.values[s * self.num_actions + a]
    }

    pub fn set(&mut self, s: usize, a: usize, value: T) {
        self.values[s * self.num_actions + a] = value;
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    fn row(&self, s: usize) -> &[T] {
        &self.values[s * self.num_actions..(s + 1) * self.num_actions]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValueFunction<T> {
    pub horizon: Horizon,
    /// One vector for an infinite horizon; `v_1..v_T` for a finite one.
    pub periods: Vec<Vec<T>>,
}

impl<T: Scalar> ValueFunction<T> {
    pub fn stationary(values: Vec<T>) -> Self {
        Self {
            horizon: Horizon::Infinite,
            periods: vec![values],
        }
    }

    /// The first-period (or stationary) values.
    pub fn values(&self) -> &[T] {
        &self.periods[0]
    }

    pub fn period(&self, t: usize) -> &[T] {
        &self.periods[t - 1]
    }
}

/// `P(a; x, b)` laid out `[state][action]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CcpTable<T> {
    num_states: usize,
    num_actions: usize,
    probs: Vec<T>,
}

impl<T: Scalar> CcpTable<T> {
    pub fn from_probs(num_states: usize, num_actions: usize, probs: Vec<T>) -> Result<Self> {
        if probs.len() != num_states * num_actions {
            return Err(DdcError::Dimension {
                context: "ccp table",
                expected: num_states * num_actions,
                got: probs.len(),
            });
        }
        Ok(Self {
            num_states,
            num_actions,
            probs,
        })
    }

    pub fn prob(&self, s: usize, a: usize) -> T {
        self.probs[s * self.num_actions + a]
    }

    pub fn row(&self, s: usize) -> &[T] {
        &self.probs[s * self.num_actions..(s + 1) * self.num_actions]
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }
}

#[derive(Debug, Clone)]
pub struct InfiniteSolution<T> {
    pub value: ValueFunction<T>,
    pub iterations: usize,
    /// `‖v_k − v_{k−1}‖_∞` for every iteration.
    pub residuals: Vec<f64>,
}

impl<T: Scalar> InfiniteSolution<T> {
    /// Upper bound on `‖T(v) − v‖_∞` for the returned `v`.
    pub fn residual_bound(&self, discount: T) -> f64 {
        self.residuals.last().copied().unwrap_or(f64::INFINITY) * discount.as_f64()
    }
}

fn check_shapes<T: Scalar>(
    spec: &ModelSpec<T>,
    payoffs: &PayoffTable<T>,
    kernel: &TransitionKernel<T>,
    v: &[T],
) -> Result<()> {
    let s = payoffs.num_states();
    if kernel.num_states() != s || kernel.num_actions() != spec.num_actions {
        return Err(DdcError::Dimension {
            context: "kernel states",
            expected: s,
            got: kernel.num_states(),
        });
    }
    if payoffs.num_actions() != spec.num_actions {
        return Err(DdcError::Dimension {
            context: "payoff actions",
            expected: spec.num_actions,
            got: payoffs.num_actions(),
        });
    }
    if v.len() != s {
        return Err(DdcError::Dimension {
            context: "value function",
            expected: s,
            got: v.len(),
        });
    }
    Ok(())
}

/// Choice-specific values `w_a(x)` at state `s` written into `w`.
fn choice_values<T: Scalar>(
    spec: &ModelSpec<T>,
    payoffs: &PayoffTable<T>,
    kernel: &TransitionKernel<T>,
    v: &[T],
    s: usize,
    w: &mut [T],
) {
    let rho = spec.discount;
    for (a, (wa, &u)) in w.iter_mut().zip(payoffs.row(s)).enumerate() {
        *wa = if rho == T::zero() {
            u
        } else {
            u + rho * kernel.expect(a, s, v)
        };
    }
}

fn bellman_into<T: Scalar>(
    spec: &ModelSpec<T>,
    payoffs: &PayoffTable<T>,
    kernel: &TransitionKernel<T>,
    v: &[T],
    out: &mut [T],
    w: &mut [T],
) -> Result<()> {
    for (s, o) in out.iter_mut().enumerate() {
        choice_values(spec, payoffs, kernel, v, s, w);
        let next = log_sum_exp(w) + T::EULER_GAMMA;
        if !next.is_finite() {
            return Err(DdcError::NonFinite {
                context: "bellman operator",
                state: s,
            });
        }
        *o = next;
    }
    Ok(())
}

/// One application of the Bellman operator on a precomputed payoff table.
pub fn bellman_apply_table<T: Scalar>(
    spec: &ModelSpec<T>,
    payoffs: &PayoffTable<T>,
    kernel: &TransitionKernel<T>,
    v: &ValueFunction<T>,
) -> Result<ValueFunction<T>> {
    let v = v.values();
    check_shapes(spec, payoffs, kernel, v)?;
    let mut out = vec![T::zero(); v.len()];
    let mut w = vec![T::zero(); spec.num_actions];
    bellman_into(spec, payoffs, kernel, v, &mut out, &mut w)?;
    Ok(ValueFunction::stationary(out))
}

pub fn bellman_apply<T: Scalar>(
    spec: &ModelSpec<T>,
    grid: &StateGrid<T>,
    params: &PayoffParams<T>,
    kernel: &TransitionKernel<T>,
    v: &ValueFunction<T>,
) -> Result<ValueFunction<T>> {
    bellman_apply_table(spec, &PayoffTable::from_params(spec, grid, params)?, kernel, v)
}

fn sup_diff<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y).abs().as_f64())
        .fold(0.0, f64::max)
}

/// Successive approximation from `v ≡ 0`.
///
/// Stops once `ρ‖v_k − v_{k−1}‖_∞ ≤ tol`, which bounds `‖T(v_k) − v_k‖_∞` by
/// the contraction property.
pub fn solve_infinite_table<T: Scalar>(
    spec: &ModelSpec<T>,
    payoffs: &PayoffTable<T>,
    kernel: &TransitionKernel<T>,
    opts: SolverOptions,
) -> Result<InfiniteSolution<T>> {
    if !(opts.tol > 0.0) {
        return Err(DdcError::Config("solver tolerance must be positive".into()));
    }
    let n = payoffs.num_states();
    let mut v = vec![T::zero(); n];
    check_shapes(spec, payoffs, kernel, &v)?;
    let mut next = vec![T::zero(); n];
    let mut w = vec![T::zero(); spec.num_actions];
    let rho = spec.discount.as_f64();
    let mut residuals = Vec::new();
    for k in 1..=opts.max_iter {
        bellman_into(spec, payoffs, kernel, &v, &mut next, &mut w)?;
        let r = sup_diff(&next, &v);
        residuals.push(r);
        std::mem::swap(&mut v, &mut next);
        if rho * r <= opts.tol {
            return Ok(InfiniteSolution {
                value: ValueFunction::stationary(v),
                iterations: k,
                residuals,
            });
        }
    }
    Err(DdcError::Convergence {
        iterations: opts.max_iter,
        residual: residuals.last().copied().unwrap_or(f64::NAN) * rho,
    })
}

pub fn solve_infinite<T: Scalar>(
    spec: &ModelSpec<T>,
    grid: &StateGrid<T>,
    params: &PayoffParams<T>,
    kernel: &TransitionKernel<T>,
    opts: SolverOptions,
) -> Result<InfiniteSolution<T>> {
    solve_infinite_table(spec, &PayoffTable::from_params(spec, grid, params)?, kernel, opts)
}

/// Logit CCPs of the choice-specific values implied by `v`.
pub fn ccp_table<T: Scalar>(
    spec: &ModelSpec<T>,
    payoffs: &PayoffTable<T>,
    kernel: &TransitionKernel<T>,
    v: &[T],
) -> Result<CcpTable<T>> {
    check_shapes(spec, payoffs, kernel, v)?;
    let na = spec.num_actions;
    let mut probs = vec![T::zero(); payoffs.num_states() * na];
    let mut w = vec![T::zero(); na];
    for s in 0..payoffs.num_states() {
        choice_values(spec, payoffs, kernel, v, s, &mut w);
        if w.iter().any(|x| !x.is_finite()) {
            return Err(DdcError::NonFinite {
                context: "choice-specific value",
                state: s,
            });
        }
        softmax_into(&w, &mut probs[s * na..(s + 1) * na]);
    }
    CcpTable::from_probs(payoffs.num_states(), na, probs)
}

pub fn ccp<T: Scalar>(
    spec: &ModelSpec<T>,
    grid: &StateGrid<T>,
    params: &PayoffParams<T>,
    kernel: &TransitionKernel<T>,
    v: &ValueFunction<T>,
) -> Result<CcpTable<T>> {
    ccp_table(spec, &PayoffTable::from_params(spec, grid, params)?, kernel, v.values())
}

#[derive(Debug, Clone)]
pub struct FiniteSolution<T> {
    /// `v_1..v_T`; `v_{T+1} ≡ 0` is implicit.
    pub value: ValueFunction<T>,
    /// `P_1..P_T`.
    pub ccps: Vec<CcpTable<T>>,
}

/// Backward recursion over per-period payoff tables and kernels (`kernels[t]`
/// moves the state from period `t+1` to `t+2`, zero-based).
pub fn solve_finite_tables<T: Scalar>(
    spec: &ModelSpec<T>,
    payoffs: &[PayoffTable<T>],
    kernels: &[&TransitionKernel<T>],
) -> Result<FiniteSolution<T>> {
    let periods = payoffs.len();
    if periods == 0 || kernels.len() != periods {
        return Err(DdcError::Dimension {
            context: "per-period kernels",
            expected: periods,
            got: kernels.len(),
        });
    }
    let n = payoffs[0].num_states();
    let mut next = vec![T::zero(); n];
    let mut values = vec![Vec::new(); periods];
    let mut ccps = Vec::with_capacity(periods);
    let mut w = vec![T::zero(); spec.num_actions];
    for t in (0..periods).rev() {
        check_shapes(spec, &payoffs[t], kernels[t], &next)?;
        let mut cur = vec![T::zero(); n];
        bellman_into(spec, &payoffs[t], kernels[t], &next, &mut cur, &mut w)?;
        ccps.push(ccp_table(spec, &payoffs[t], kernels[t], &next)?);
        values[t] = cur.clone();
        next = cur;
    }
    ccps.reverse();
    Ok(FiniteSolution {
        value: ValueFunction {
            horizon: Horizon::Finite(periods),
            periods: values,
        },
        ccps,
    })
}

pub fn solve_finite<T: Scalar>(
    spec: &ModelSpec<T>,
    grid: &StateGrid<T>,
    params_per_period: &[PayoffParams<T>],
    kernel_per_period: &[TransitionKernel<T>],
    periods: usize,
) -> Result<FiniteSolution<T>> {
    if params_per_period.len() != periods {
        return Err(DdcError::Dimension {
            context: "per-period params",
            expected: periods,
            got: params_per_period.len(),
        });
    }
    let tables = params_per_period
        .iter()
        .map(|p| PayoffTable::from_params(spec, grid, p))
        .collect::<Result<Vec<_>>>()?;
    let kernels: Vec<&TransitionKernel<T>> = kernel_per_period.iter().collect();
    solve_finite_tables(spec, &tables, &kernels)
}

/// CCPs of one type, stationary or per period.
#[derive(Debug, Clone)]
pub struct TypeSolution<T> {
    ccps: Vec<CcpTable<T>>,
    pub iterations: usize,
    pub residual: f64,
}

impl<T: Scalar> TypeSolution<T> {
    /// CCPs in panel period `t` (1-based). Stationary solutions ignore `t`.
    pub fn at(&self, t: usize) -> &CcpTable<T> {
        if self.ccps.len() == 1 {
            &self.ccps[0]
        } else {
            &self.ccps[(t - 1).min(self.ccps.len() - 1)]
        }
    }

    pub fn periods(&self) -> usize {
        self.ccps.len()
    }
}

/// Solves one type with the model's horizon. For a finite horizon the same
/// kernel applies in every period and `params.gamma` may be period-stacked.
pub fn solve_type<T: Scalar>(
    spec: &ModelSpec<T>,
    grid: &StateGrid<T>,
    params: &PayoffParams<T>,
    kernel: &TransitionKernel<T>,
    opts: SolverOptions,
) -> Result<TypeSolution<T>> {
    match spec.horizon {
        Horizon::Infinite => {
            let table = PayoffTable::from_params(spec, grid, params)?;
            let sol = solve_infinite_table(spec, &table, kernel, opts)?;
            let ccps = ccp_table(spec, &table, kernel, sol.value.values())?;
            Ok(TypeSolution {
                ccps: vec![ccps],
                iterations: sol.iterations,
                residual: sol.residual_bound(spec.discount),
            })
        }
        Horizon::Finite(periods) => {
            let tables = (1..=periods)
                .map(|t| PayoffTable::from_params(spec, grid, &params.for_period(spec, t)?))
                .collect::<Result<Vec<_>>>()?;
            let kernels = vec![kernel; periods];
            let sol = solve_finite_tables(spec, &tables, &kernels)?;
            Ok(TypeSolution {
                ccps: sol.ccps,
                iterations: periods,
                residual: 0.0,
            })
        }
    }
}
