//! Data-generating configurations for simulations.

use serde::{Deserialize, Serialize};

use crate::error::{DdcError, Result};
use crate::model::{StateGrid, TransitionKernel};

/// Discretized mean-reverting transition with action-dependent drift:
///
/// ```text
/// x'_d ~ N(c_d + φ (x_d − c_d) + shift[a][d], sd_d²)
/// ```
///
/// evaluated at the grid points and normalized per row, where `c_d` is the
/// midpoint of coordinate `d` over the grid. Every row has full support.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArKernel {
    pub persistence: f64,
    pub noise_sd: Vec<f64>,
    /// `[action][coordinate]` drift added to the conditional mean.
    pub action_shift: Vec<Vec<f64>>,
}

impl ArKernel {
    /// Persistence 0.6, noise sd `(0.75, 2)`; participating lowers the drift
    /// of `x2` by one.
    pub fn labor_supply_default() -> Self {
        Self {
            persistence: 0.6,
            noise_sd: vec![0.75, 2.0],
            action_shift: vec![vec![0.0, 0.0], vec![0.0, -1.0]],
        }
    }

    pub fn build(&self, grid: &StateGrid<f64>) -> Result<TransitionKernel<f64>> {
        let dim = grid.dim();
        let actions = self.action_shift.len();
        if self.noise_sd.len() != dim || self.action_shift.iter().any(|s| s.len() != dim) {
            return Err(DdcError::Dimension {
                context: "ar kernel coordinates",
                expected: dim,
                got: self.noise_sd.len(),
            });
        }
        if self.noise_sd.iter().any(|s| !(*s > 0.0)) || actions == 0 {
            return Err(DdcError::Config("ar kernel needs positive noise_sd and at least one action".into()));
        }
        let centers: Vec<f64> = (0..dim)
            .map(|d| {
                let (lo, hi) = grid
                    .points()
                    .iter()
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p[d]), hi.max(p[d])));
                0.5 * (lo + hi)
            })
            .collect();
        let s = grid.len();
        let mut probs = Vec::with_capacity(actions * s * s);
        for a in 0..actions {
            for i in 0..s {
                let x = grid.point(i);
                let mean: Vec<f64> = (0..dim)
                    .map(|d| centers[d] + self.persistence * (x[d] - centers[d]) + self.action_shift[a][d])
                    .collect();
                let row: Vec<f64> = (0..s)
                    .map(|j| {
                        let y = grid.point(j);
                        let q: f64 = (0..dim).map(|d| ((y[d] - mean[d]) / self.noise_sd[d]).powi(2)).sum();
                        (-0.5 * q).exp()
                    })
                    .collect();
                let total: f64 = row.iter().sum();
                probs.extend(row.into_iter().map(|p| p / total));
            }
        }
        TransitionKernel::new(actions, s, probs)
    }
}

/// Homogeneous coefficient on `x2` in the simulation study.
pub const LABOR_SUPPLY_GAMMA: f64 = -1.0;
/// Discount factor in the simulation study.
pub const LABOR_SUPPLY_DISCOUNT: f64 = 0.9;

/// The 5 × 3 product grid on `[0, 3] × [0, 8]` used by the simulation study.
pub fn labor_supply_grid() -> StateGrid<f64> {
    StateGrid::product(&[StateGrid::linspace(0.0, 3.0, 5), StateGrid::linspace(0.0, 8.0, 3)])
        .expect("static grid")
}
