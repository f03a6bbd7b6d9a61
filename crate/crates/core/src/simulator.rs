//! Type draws from a mixture and panel simulation from solved CCPs.

use std::collections::HashMap;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::error::{DdcError, Result};
use crate::model::{ModelSpec, PayoffParams, StateGrid, TransitionKernel};
use crate::rng::{stream, TAG_PANEL, TAG_TYPES};
use crate::scalar::Scalar;
use crate::solver::{solve_type, SolverOptions, TypeSolution};

/// Independent truncated normals per coordinate of `β`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruncatedNormal {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl TruncatedNormal {
    pub fn scalar(mu: f64, sigma: f64, lo: f64, hi: f64) -> Self {
        Self {
            mu: vec![mu],
            sigma: vec![sigma],
            lo: vec![lo],
            hi: vec![hi],
        }
    }

    /// Bounds `(Φ(α), Φ(β))` of the standardized truncation interval.
    fn mass_bounds(&self, d: usize) -> (f64, f64) {
        let n = Normal::standard();
        let a = (self.lo[d] - self.mu[d]) / self.sigma[d];
        let b = (self.hi[d] - self.mu[d]) / self.sigma[d];
        (n.cdf(a), n.cdf(b))
    }

    /// Inverse-CDF draw of coordinate `d` from a uniform `u`.
    pub fn quantile(&self, d: usize, u: f64) -> f64 {
        let (fa, fb) = self.mass_bounds(d);
        let z = Normal::standard().inverse_cdf(fa + u * (fb - fa));
        (self.mu[d] + self.sigma[d] * z).clamp(self.lo[d], self.hi[d])
    }

    pub fn cdf(&self, d: usize, b: f64) -> f64 {
        if b <= self.lo[d] {
            return 0.0;
        }
        if b >= self.hi[d] {
            return 1.0;
        }
        let (fa, fb) = self.mass_bounds(d);
        let z = (b - self.mu[d]) / self.sigma[d];
        ((Normal::standard().cdf(z) - fa) / (fb - fa)).clamp(0.0, 1.0)
    }

    /// Exact mean of coordinate `d`.
    pub fn mean(&self, d: usize) -> f64 {
        let s = Normal::standard();
        let a = (self.lo[d] - self.mu[d]) / self.sigma[d];
        let b = (self.hi[d] - self.mu[d]) / self.sigma[d];
        let (fa, fb) = self.mass_bounds(d);
        self.mu[d] + self.sigma[d] * (s.pdf(a) - s.pdf(b)) / (fb - fa)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    TruncatedNormal(TruncatedNormal),
    PointMass(Vec<f64>),
}

impl Family {
    pub fn dim(&self) -> usize {
        match self {
            Family::TruncatedNormal(t) => t.mu.len(),
            Family::PointMass(b) => b.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureComponent {
    pub weight: f64,
    pub family: Family,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureSpec {
    pub components: Vec<MixtureComponent>,
}

impl MixtureSpec {
    /// Equal-weight mixture of `N_tr(1.5, 1)`, `N_tr(2.5, 0.25)`, `N_tr(3.5, 1)` on `[0, 50]`.
    pub fn labor_supply_dgp() -> Self {
        let c = |mu, sigma| MixtureComponent {
            weight: 1.0 / 3.0,
            family: Family::TruncatedNormal(TruncatedNormal::scalar(mu, sigma, 0.0, 50.0)),
        };
        Self {
            components: vec![c(1.5, 1.0), c(2.5, 0.25), c(3.5, 1.0)],
        }
    }

    pub fn point_mass(b: Vec<f64>) -> Self {
        Self {
            components: vec![MixtureComponent {
                weight: 1.0,
                family: Family::PointMass(b),
            }],
        }
    }

    /// Discrete types from `(β, weight)` pairs.
    pub fn discrete(types: &[(Vec<f64>, f64)]) -> Self {
        Self {
            components: types
                .iter()
                .map(|(b, w)| MixtureComponent {
                    weight: *w,
                    family: Family::PointMass(b.clone()),
                })
                .collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.components.first().map_or(0, |c| c.family.dim())
    }

    pub fn check(&self) -> Result<()> {
        if self.components.is_empty() {
            return Err(DdcError::Config("mixture has no components".into()));
        }
        let total: f64 = self.components.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > 1e-12 || self.components.iter().any(|c| !(c.weight >= 0.0)) {
            return Err(DdcError::Config(format!(
                "mixture weights must be nonnegative and sum to 1 (sum {total})"
            )));
        }
        let dim = self.dim();
        for (k, c) in self.components.iter().enumerate() {
            if c.family.dim() != dim || dim == 0 {
                return Err(DdcError::Config(format!("mixture component {k} has dimension {}", c.family.dim())));
            }
            if let Family::TruncatedNormal(t) = &c.family {
                let ok = t.sigma.len() == dim
                    && t.lo.len() == dim
                    && t.hi.len() == dim
                    && (0..dim).all(|d| t.lo[d] < t.hi[d] && t.sigma[d] > 0.0);
                if !ok {
                    return Err(DdcError::Config(format!(
                        "mixture component {k}: truncated normal needs lo < hi and sigma > 0"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Marginal CDF of coordinate `d` (right-continuous at point masses).
    pub fn cdf(&self, d: usize, b: f64) -> f64 {
        self.components
            .iter()
            .map(|c| {
                c.weight
                    * match &c.family {
                        Family::TruncatedNormal(t) => t.cdf(d, b),
                        Family::PointMass(p) => f64::from(u8::from(p[d] <= b)),
                    }
            })
            .sum()
    }

    pub fn mean(&self, d: usize) -> f64 {
        self.components
            .iter()
            .map(|c| {
                c.weight
                    * match &c.family {
                        Family::TruncatedNormal(t) => t.mean(d),
                        Family::PointMass(p) => p[d],
                    }
            })
            .sum()
    }

    /// Smallest interval containing all mass of coordinate `d`.
    pub fn support(&self, d: usize) -> (f64, f64) {
        self.components.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), c| match &c.family {
            Family::TruncatedNormal(t) => (lo.min(t.lo[d]), hi.max(t.hi[d])),
            Family::PointMass(p) => (lo.min(p[d]), hi.max(p[d])),
        })
    }

    fn draw(&self, rng: &mut impl Rng) -> Vec<f64> {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut pick = self.components.len() - 1;
        for (k, c) in self.components.iter().enumerate() {
            acc += c.weight;
            if u < acc {
                pick = k;
                break;
            }
        }
        match &self.components[pick].family {
            Family::PointMass(p) => p.clone(),
            Family::TruncatedNormal(t) => (0..t.mu.len()).map(|d| t.quantile(d, rng.random())).collect(),
        }
    }
}

/// `n` i.i.d. type draws; draw `i` uses its own stream of `seed`.
pub fn draw_types(mix: &MixtureSpec, n: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    mix.check()?;
    Ok((0..n)
        .map(|i| mix.draw(&mut stream(seed, TAG_TYPES, i as u64)))
        .collect())
}

/// Rectangular panel of grid-state indices and actions, `n` individuals by `periods`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Panel {
    n: usize,
    periods: usize,
    states: Vec<usize>,
    actions: Vec<usize>,
}

impl Panel {
    /// `states` and `actions` are laid out `[individual][period]`.
    pub fn new(n: usize, periods: usize, states: Vec<usize>, actions: Vec<usize>) -> Result<Self> {
        if states.len() != n * periods || actions.len() != n * periods {
            return Err(DdcError::Dimension {
                context: "panel records",
                expected: n * periods,
                got: states.len().min(actions.len()),
            });
        }
        Ok(Self {
            n,
            periods,
            states,
            actions,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn periods(&self) -> usize {
        self.periods
    }

    /// State of individual `i` in period `t` (both zero-based).
    pub fn state(&self, i: usize, t: usize) -> usize {
        self.states[i * self.periods + t]
    }

    pub fn action(&self, i: usize, t: usize) -> usize {
        self.actions[i * self.periods + t]
    }

    pub fn check(&self, num_states: usize, num_actions: usize) -> Result<()> {
        if let Some(&s) = self.states.iter().find(|&&s| s >= num_states) {
            return Err(DdcError::Parse(format!("state index {s} outside grid of {num_states}")));
        }
        if let Some(&a) = self.actions.iter().find(|&&a| a >= num_actions) {
            return Err(DdcError::Parse(format!("action {a} outside 0..{num_actions}")));
        }
        Ok(())
    }

    /// First `n` individuals.
    pub fn truncate(&self, n: usize) -> Self {
        let n = n.min(self.n);
        Self {
            n,
            periods: self.periods,
            states: self.states[..n * self.periods].to_vec(),
            actions: self.actions[..n * self.periods].to_vec(),
        }
    }
}

fn categorical<T: Scalar>(probs: &[T], u: f64) -> usize {
    let mut acc = 0.0;
    let mut last = 0;
    for (k, p) in probs.iter().enumerate() {
        let p = p.as_f64();
        if p > 0.0 {
            last = k;
        }
        acc += p;
        if u < acc {
            return k;
        }
    }
    last
}

/// Solves each distinct `β` once (keyed by bit pattern), in first-seen order.
pub fn solve_distinct<T: Scalar>(
    spec: &ModelSpec<T>,
    grid: &StateGrid<T>,
    gamma: &[T],
    kernel: &TransitionKernel<T>,
    betas: &[Vec<T>],
    opts: SolverOptions,
) -> Result<(Vec<usize>, Vec<TypeSolution<T>>)> {
    let mut index: HashMap<Vec<u64>, usize> = HashMap::new();
    let mut distinct: Vec<&Vec<T>> = Vec::new();
    let assignment = betas
        .iter()
        .map(|b| {
            let key: Vec<u64> = b.iter().map(|x| x.key_bits()).collect();
            *index.entry(key).or_insert_with(|| {
                distinct.push(b);
                distinct.len() - 1
            })
        })
        .collect();
    let solutions = distinct
        .par_iter()
        .enumerate()
        .map(|(j, b)| {
            let params = PayoffParams::new(gamma.to_vec(), (*b).clone());
            solve_type(spec, grid, &params, kernel, opts).map_err(|e| DdcError::GridPoint {
                index: j,
                point: b.iter().map(|x| x.as_f64()).collect(),
                source: Box::new(e),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((assignment, solutions))
}

/// Simulates `x_1 ~ init`, `a_t ~ P_t(·; x_t, β_i)`, `x_{t+1} ~ F(·| x_t, a_t)`.
#[allow(clippy::too_many_arguments)]
pub fn simulate_panel<T: Scalar>(
    spec: &ModelSpec<T>,
    grid: &StateGrid<T>,
    gamma: &[T],
    kernel: &TransitionKernel<T>,
    betas: &[Vec<T>],
    periods: usize,
    init: &[f64],
    seed: u64,
    opts: SolverOptions,
) -> Result<Panel> {
    if init.len() != grid.len() {
        return Err(DdcError::Dimension {
            context: "initial distribution",
            expected: grid.len(),
            got: init.len(),
        });
    }
    let (assignment, solutions) = solve_distinct(spec, grid, gamma, kernel, betas, opts)?;
    let rows: Vec<(Vec<usize>, Vec<usize>)> = (0..betas.len())
        .into_par_iter()
        .map(|i| {
            let mut rng = stream(seed, TAG_PANEL, i as u64);
            let sol = &solutions[assignment[i]];
            let mut xs = Vec::with_capacity(periods);
            let mut acts = Vec::with_capacity(periods);
            let mut x = categorical(init, rng.random());
            for t in 1..=periods {
                let a = categorical(sol.at(t).row(x), rng.random());
                xs.push(x);
                acts.push(a);
                x = categorical(kernel.row(a, x), rng.random());
            }
            (xs, acts)
        })
        .collect();
    let (states, actions): (Vec<_>, Vec<_>) = rows.into_iter().unzip();
    Panel::new(
        betas.len(),
        periods,
        states.into_iter().flatten().collect(),
        actions.into_iter().flatten().collect(),
    )
}

/// Uniform initial distribution over `n` states.
pub fn uniform_init(n: usize) -> Vec<f64> {
    vec![1.0 / n as f64; n]
}
