//! First estimation step: the state transition `F(x' | x, a)` from the panel.

use serde::{Deserialize, Serialize};

use crate::error::{DdcError, Result};
use crate::model::{StateGrid, TransitionKernel};
use crate::simulator::Panel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "method")]
pub enum EstimationMethod {
    Frequency,
    KernelDensity {
        /// Per-coordinate bandwidth for the next state `x'`.
        next: Vec<f64>,
        /// Per-coordinate bandwidth for the conditioning state `x`.
        current: Vec<f64>,
    },
}

#[derive(Debug, Clone)]
pub struct TransitionEstimate {
    pub kernel: TransitionKernel<f64>,
    /// Number of observed transitions out of each `(action, from)` cell.
    pub cell_counts: Vec<usize>,
    /// `(action, from)` cells whose row was filled with the uniform distribution.
    pub filled: Vec<(usize, usize)>,
    pub method: EstimationMethod,
}

impl TransitionEstimate {
    pub fn count(&self, a: usize, from: usize) -> usize {
        self.cell_counts[a * self.kernel.num_states() + from]
    }
}

/// Cell-frequency MLE on the grid. Empty cells get a uniform row and a flag.
pub fn estimate_frequency(panel: &Panel, grid: &StateGrid<f64>, num_actions: usize) -> Result<TransitionEstimate> {
    let s = grid.len();
    panel.check(s, num_actions)?;
    let mut counts = vec![0usize; num_actions * s * s];
    for i in 0..panel.n() {
        for t in 0..panel.periods().saturating_sub(1) {
            let (x, a, y) = (panel.state(i, t), panel.action(i, t), panel.state(i, t + 1));
            counts[(a * s + x) * s + y] += 1;
        }
    }
    let mut probs = vec![0.0; counts.len()];
    let mut cell_counts = vec![0usize; num_actions * s];
    let mut filled = Vec::new();
    for a in 0..num_actions {
        for x in 0..s {
            let row = &counts[(a * s + x) * s..(a * s + x + 1) * s];
            let total: usize = row.iter().sum();
            cell_counts[a * s + x] = total;
            let out = &mut probs[(a * s + x) * s..(a * s + x + 1) * s];
            if total == 0 {
                filled.push((a, x));
                out.fill(1.0 / s as f64);
            } else {
                for (o, &c) in out.iter_mut().zip(row) {
                    *o = c as f64 / total as f64;
                }
            }
        }
    }
    Ok(TransitionEstimate {
        kernel: TransitionKernel::new(num_actions, s, probs)?,
        cell_counts,
        filled,
        method: EstimationMethod::Frequency,
    })
}

/// Observed transitions `(x_t, a_t, x_{t+1})` with continuous-valued states.
#[derive(Debug, Clone, Default)]
pub struct Transitions {
    pub current: Vec<Vec<f64>>,
    pub actions: Vec<usize>,
    pub next: Vec<Vec<f64>>,
}

impl Transitions {
    pub fn push(&mut self, current: Vec<f64>, action: usize, next: Vec<f64>) {
        self.current.push(current);
        self.actions.push(action);
        self.next.push(next);
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    /// Transitions of a grid panel, states mapped to their coordinates.
    pub fn from_panel(panel: &Panel, grid: &StateGrid<f64>) -> Self {
        let mut out = Self::default();
        for i in 0..panel.n() {
            for t in 0..panel.periods().saturating_sub(1) {
                out.push(
                    grid.point(panel.state(i, t)).to_vec(),
                    panel.action(i, t),
                    grid.point(panel.state(i, t + 1)).to_vec(),
                );
            }
        }
        out
    }
}

fn silverman(samples: &[Vec<f64>], dim: usize) -> Vec<f64> {
    let n = samples.len() as f64;
    (0..dim)
        .map(|d| {
            let mean = samples.iter().map(|x| x[d]).sum::<f64>() / n;
            let var = samples.iter().map(|x| (x[d] - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
            let sd = var.sqrt();
            if sd > 0.0 {
                1.06 * sd * n.powf(-0.2)
            } else {
                1.0
            }
        })
        .collect()
}

/// Silverman's rule per coordinate, `(next, current)`.
pub fn silverman_bandwidths(obs: &Transitions) -> (Vec<f64>, Vec<f64>) {
    let dim = obs.current.first().map_or(0, Vec::len);
    (silverman(&obs.next, dim), silverman(&obs.current, dim))
}

fn gauss(diff: &[f64], h: &[f64]) -> f64 {
    let q: f64 = diff.iter().zip(h).map(|(d, h)| (d / h).powi(2)).sum();
    (-0.5 * q).exp()
}

/// Gaussian product-kernel conditional density estimator evaluated on the grid
/// and row-renormalized. `bandwidths = None` uses Silverman's rule.
pub fn estimate_kernel_density(
    obs: &Transitions,
    grid: &StateGrid<f64>,
    num_actions: usize,
    bandwidths: Option<(Vec<f64>, Vec<f64>)>,
) -> Result<TransitionEstimate> {
    let dim = grid.dim();
    if obs.is_empty() {
        return Err(DdcError::Config("no transitions to estimate from".into()));
    }
    if obs.current.iter().chain(&obs.next).any(|x| x.len() != dim) {
        return Err(DdcError::Dimension {
            context: "transition observation",
            expected: dim,
            got: obs.current[0].len(),
        });
    }
    if let Some(&a) = obs.actions.iter().find(|&&a| a >= num_actions) {
        return Err(DdcError::Parse(format!("action {a} outside 0..{num_actions}")));
    }
    let (h_next, h_cur) = bandwidths.unwrap_or_else(|| silverman_bandwidths(obs));
    if h_next.len() != dim || h_cur.len() != dim || h_next.iter().chain(&h_cur).any(|h| !(*h > 0.0)) {
        return Err(DdcError::Config("bandwidths must be positive, one per state coordinate".into()));
    }
    let s = grid.len();
    // K_{h'}(x'_j − next_o) for every grid point and observation
    let next_weights: Vec<Vec<f64>> = (0..s)
        .map(|j| {
            obs.next
                .iter()
                .map(|y| {
                    let d: Vec<f64> = grid.point(j).iter().zip(y).map(|(g, y)| g - y).collect();
                    gauss(&d, &h_next)
                })
                .collect()
        })
        .collect();
    let mut probs = vec![0.0; num_actions * s * s];
    let mut cell_counts = vec![0usize; num_actions * s];
    let mut filled = Vec::new();
    for (o, &a) in obs.actions.iter().enumerate() {
        cell_counts[a * s + grid.nearest(&obs.current[o])] += 1;
    }
    for a in 0..num_actions {
        for i in 0..s {
            let mut den = 0.0;
            let mut num = vec![0.0; s];
            for (o, x) in obs.current.iter().enumerate() {
                if obs.actions[o] != a {
                    continue;
                }
                let d: Vec<f64> = grid.point(i).iter().zip(x).map(|(g, x)| g - x).collect();
                let w = gauss(&d, &h_cur);
                if w == 0.0 {
                    continue;
                }
                den += w;
                for (j, n) in num.iter_mut().enumerate() {
                    *n += w * next_weights[j][o];
                }
            }
            let out = &mut probs[(a * s + i) * s..(a * s + i + 1) * s];
            let total: f64 = num.iter().sum();
            if den > 0.0 && total > 0.0 && total.is_finite() {
                // F̂ = num / den, then renormalized over the grid
                for (p, n) in out.iter_mut().zip(&num) {
                    *p = (n / den) / (total / den);
                }
            } else {
                filled.push((a, i));
                out.fill(1.0 / s as f64);
            }
        }
    }
    Ok(TransitionEstimate {
        kernel: TransitionKernel::new(num_actions, s, probs)?,
        cell_counts,
        filled,
        method: EstimationMethod::KernelDensity {
            next: h_next,
            current: h_cur,
        },
    })
}

/// Largest row L1 distance between two kernels of the same shape.
pub fn max_row_l1(a: &TransitionKernel<f64>, b: &TransitionKernel<f64>) -> f64 {
    let s = a.num_states();
    let mut worst = 0.0f64;
    for act in 0..a.num_actions() {
        for from in 0..s {
            let l1: f64 = a.row(act, from).iter().zip(b.row(act, from)).map(|(x, y)| (x - y).abs()).sum();
            worst = worst.max(l1);
        }
    }
    worst
}

/// Where the estimator's transition kernel comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "method", deny_unknown_fields)]
#[derive(Default)]
pub enum KernelSource {
    /// The data-generating kernel, treated as known.
    Known,
    #[default]
    Frequency,
    KernelDensity {
        /// `(next, current)` per-coordinate bandwidths; Silverman's rule when absent.
        #[serde(default)]
        bandwidths: Option<(Vec<f64>, Vec<f64>)>,
    },
}


impl KernelSource {
    /// First-step kernel for `panel`. `known` is required for [`KernelSource::Known`].
    pub fn kernel(
        &self,
        panel: &Panel,
        grid: &StateGrid<f64>,
        num_actions: usize,
        known: Option<&TransitionKernel<f64>>,
    ) -> Result<TransitionKernel<f64>> {
        match self {
            KernelSource::Known => known
                .cloned()
                .ok_or_else(|| DdcError::Config("kernel source `known` needs a configured kernel".into())),
            KernelSource::Frequency => Ok(estimate_frequency(panel, grid, num_actions)?.kernel),
            KernelSource::KernelDensity { bandwidths } => {
                let obs = Transitions::from_panel(panel, grid);
                Ok(estimate_kernel_density(&obs, grid, num_actions, bandwidths.clone())?.kernel)
            }
        }
    }
}
