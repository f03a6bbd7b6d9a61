//! Replication harness: simulate, estimate both steps, score against the truth,
//! aggregate per sample size.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{DdcError, Result};
use crate::metrics::{error_metrics, ErrorMetrics};
use crate::mixture::{estimate, pooled_cdf, EstimatorConfig};
use crate::model::{ModelSpec, StateGrid, TransitionKernel};
use crate::rng::{derive_seed, TAG_REPLICATION};
use crate::simulator::{draw_types, simulate_panel, MixtureSpec};
use crate::solver::SolverOptions;
use crate::transition::KernelSource;

/// The data-generating process of a study.
#[derive(Debug, Clone)]
pub struct McDgp {
    pub spec: ModelSpec<f64>,
    pub grid: StateGrid<f64>,
    pub kernel: TransitionKernel<f64>,
    pub mixture: MixtureSpec,
    pub gamma: Vec<f64>,
    pub init: Vec<f64>,
    pub periods: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McConfig {
    pub sample_sizes: Vec<usize>,
    #[serde(default = "default_replications")]
    pub replications: usize,
    #[serde(default = "default_kernel_source")]
    pub kernel_source: KernelSource,
}

fn default_replications() -> usize {
    100
}

fn default_kernel_source() -> KernelSource {
    KernelSource::Frequency
}

impl McConfig {
    pub fn check(&self) -> Result<()> {
        if self.replications == 0 {
            return Err(DdcError::Config("replications must be at least 1".into()));
        }
        if self.sample_sizes.is_empty() || self.sample_sizes.iter().any(|&n| n < 10) {
            return Err(DdcError::Config("every sample size must be at least 10".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Replication {
    pub n: usize,
    pub m: usize,
    pub seed: u64,
    pub gamma_hat: Vec<f64>,
    pub iae: f64,
    pub ise: f64,
    pub active_types: usize,
    pub loglik: f64,
    pub converged: bool,
    pub grid_points: usize,
    #[serde(skip)]
    pub elapsed_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Failure {
    pub n: usize,
    pub m: usize,
    pub error: String,
}

/// Per-coordinate `γ̂` statistics. Variance divides by `M`, so `mse = bias² + var`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GammaStats {
    pub bias: Vec<f64>,
    pub var: Vec<f64>,
    pub mse: Vec<f64>,
    /// `√n · bias`, `n · var`, `n · mse`.
    pub bias_scaled: Vec<f64>,
    pub var_scaled: Vec<f64>,
    pub mse_scaled: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SizeSummary {
    pub n: usize,
    pub grid_points: usize,
    pub replications: usize,
    pub failures: usize,
    pub gamma: GammaStats,
    pub mise: f64,
    pub iae_mean: f64,
    pub iae_min: f64,
    pub iae_max: f64,
    pub types_mean: f64,
    pub types_min: usize,
    pub types_max: usize,
    pub unconverged: usize,
    #[serde(skip)]
    pub median_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct McSummary {
    pub seed: u64,
    pub sizes: Vec<SizeSummary>,
    pub replications: Vec<Replication>,
    pub failures: Vec<Failure>,
}

/// Wall-clock figures, kept apart from the deterministic summary.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct McTiming {
    pub n: Vec<usize>,
    pub median_secs: Vec<f64>,
}

impl McSummary {
    pub fn timing(&self) -> McTiming {
        McTiming {
            n: self.sizes.iter().map(|s| s.n).collect(),
            median_secs: self.sizes.iter().map(|s| s.median_secs).collect(),
        }
    }

    /// Table with one row per metric and one column per sample size.
    pub fn table(&self) -> Vec<(String, Vec<f64>)> {
        let mut rows: Vec<(String, Vec<f64>)> = Vec::new();
        let col = |f: &dyn Fn(&SizeSummary) -> f64| -> Vec<f64> { self.sizes.iter().map(f).collect() };
        let dims = self.sizes.first().map_or(0, |s| s.gamma.bias.len());
        for d in 0..dims {
            let tag = if dims == 1 { String::from("gamma") } else { format!("gamma{}", d + 1) };
            rows.push((format!("{tag}_bias"), col(&|s| s.gamma.bias[d])));
            rows.push((format!("{tag}_var"), col(&|s| s.gamma.var[d])));
            rows.push((format!("{tag}_mse"), col(&|s| s.gamma.mse[d])));
            rows.push((format!("{tag}_bias_scaled"), col(&|s| s.gamma.bias_scaled[d])));
            rows.push((format!("{tag}_var_scaled"), col(&|s| s.gamma.var_scaled[d])));
            rows.push((format!("{tag}_mse_scaled"), col(&|s| s.gamma.mse_scaled[d])));
        }
        rows.push(("mise".into(), col(&|s| s.mise)));
        rows.push(("iae_mean".into(), col(&|s| s.iae_mean)));
        rows.push(("iae_min".into(), col(&|s| s.iae_min)));
        rows.push(("iae_max".into(), col(&|s| s.iae_max)));
        rows.push(("grid_points".into(), col(&|s| s.grid_points as f64)));
        rows.push(("types_mean".into(), col(&|s| s.types_mean)));
        rows.push(("types_min".into(), col(&|s| s.types_min as f64)));
        rows.push(("types_max".into(), col(&|s| s.types_max as f64)));
        rows.push(("replications".into(), col(&|s| s.replications as f64)));
        rows.push(("failures".into(), col(&|s| s.failures as f64)));
        rows
    }
}

/// Seed of replication `m` at sample size `n`.
pub fn replication_seed(master: u64, n: usize, m: usize) -> u64 {
    derive_seed(master, &[TAG_REPLICATION, n as u64, m as u64])
}

/// Integration range for CDF errors: the true support joined with the grid.
pub fn metric_range(mixture: &MixtureSpec, grid: &[Vec<f64>]) -> (f64, f64) {
    let (lo, hi) = mixture.support(0);
    grid.iter().fold((lo, hi), |(l, h), b| (l.min(b[0]), h.max(b[0])))
}

/// One replication: simulate, estimate both steps, score.
pub fn run_replication(dgp: &McDgp, mc: &McConfig, est: &EstimatorConfig, n: usize, seed: u64) -> Result<(Replication, ErrorMetrics)> {
    let start = Instant::now();
    let betas = draw_types(&dgp.mixture, n, derive_seed(seed, &[0]))?;
    let panel = simulate_panel(
        &dgp.spec,
        &dgp.grid,
        &dgp.gamma,
        &dgp.kernel,
        &betas,
        dgp.periods,
        &dgp.init,
        derive_seed(seed, &[1]),
        SolverOptions::default(),
    )?;
    let kernel = mc.kernel_source.kernel(&panel, &dgp.grid, dgp.spec.num_actions, Some(&dgp.kernel))?;
    let result = estimate(&panel, &dgp.spec, &dgp.grid, &kernel, est)?;
    let (lo, hi) = metric_range(&dgp.mixture, &result.sieve.grid);
    let metrics = error_metrics(&pooled_cdf(&result.sieve), |b| dgp.mixture.cdf(0, b), lo, hi);
    Ok((
        Replication {
            n,
            m: 0,
            seed,
            gamma_hat: result.gamma_hat.clone(),
            iae: metrics.iae,
            ise: metrics.ise,
            active_types: result.active_types,
            loglik: result.loglik,
            converged: result.converged,
            grid_points: result.sieve.grid.len(),
            elapsed_secs: start.elapsed().as_secs_f64(),
        },
        metrics,
    ))
}

fn gamma_stats(truth: &[f64], reps: &[&Replication], n: usize) -> GammaStats {
    let m = reps.len().max(1) as f64;
    let dims = truth.len();
    let mut out = GammaStats {
        bias: vec![0.0; dims],
        var: vec![0.0; dims],
        mse: vec![0.0; dims],
        bias_scaled: vec![0.0; dims],
        var_scaled: vec![0.0; dims],
        mse_scaled: vec![0.0; dims],
    };
    for d in 0..dims {
        let mean = reps.iter().map(|r| r.gamma_hat[d]).sum::<f64>() / m;
        out.bias[d] = mean - truth[d];
        out.var[d] = reps.iter().map(|r| (r.gamma_hat[d] - mean).powi(2)).sum::<f64>() / m;
        out.mse[d] = reps.iter().map(|r| (r.gamma_hat[d] - truth[d]).powi(2)).sum::<f64>() / m;
        let rn = n as f64;
        out.bias_scaled[d] = rn.sqrt() * out.bias[d];
        out.var_scaled[d] = rn * out.var[d];
        out.mse_scaled[d] = rn * out.mse[d];
    }
    out
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let k = v.len() / 2;
    if v.len() % 2 == 1 {
        v[k]
    } else {
        0.5 * (v[k - 1] + v[k])
    }
}

/// Runs every `(n, m)` replication in parallel and reduces serially in `(n, m)` order.
pub fn run(dgp: &McDgp, mc: &McConfig, est: &EstimatorConfig, seed: u64) -> Result<McSummary> {
    mc.check()?;
    dgp.mixture.check()?;
    let jobs: Vec<(usize, usize)> = mc
        .sample_sizes
        .iter()
        .flat_map(|&n| (0..mc.replications).map(move |m| (n, m)))
        .collect();
    let outcomes: Vec<std::result::Result<Replication, Failure>> = jobs
        .par_iter()
        .map(|&(n, m)| {
            let s = replication_seed(seed, n, m);
            match run_replication(dgp, mc, est, n, s) {
                Ok((mut rep, _)) => {
                    rep.m = m;
                    Ok(rep)
                }
                Err(e) => Err(Failure { n, m, error: e.to_string() }),
            }
        })
        .collect();
    let mut replications = Vec::new();
    let mut failures = Vec::new();
    for o in outcomes {
        match o {
            Ok(r) => replications.push(r),
            Err(f) => failures.push(f),
        }
    }
    let sizes = mc
        .sample_sizes
        .iter()
        .map(|&n| {
            let reps: Vec<&Replication> = replications.iter().filter(|r| r.n == n).collect();
            let k = reps.len();
            let mean = |f: &dyn Fn(&Replication) -> f64| -> f64 {
                if k == 0 {
                    f64::NAN
                } else {
                    reps.iter().map(|r| f(r)).sum::<f64>() / k as f64
                }
            };
            SizeSummary {
                n,
                grid_points: reps.first().map_or(0, |r| r.grid_points),
                replications: k,
                failures: failures.iter().filter(|f| f.n == n).count(),
                gamma: gamma_stats(&dgp.gamma, &reps, n),
                mise: mean(&|r| r.ise),
                iae_mean: mean(&|r| r.iae),
                iae_min: reps.iter().map(|r| r.iae).fold(f64::INFINITY, f64::min),
                iae_max: reps.iter().map(|r| r.iae).fold(f64::NEG_INFINITY, f64::max),
                types_mean: mean(&|r| r.active_types as f64),
                types_min: reps.iter().map(|r| r.active_types).min().unwrap_or(0),
                types_max: reps.iter().map(|r| r.active_types).max().unwrap_or(0),
                unconverged: reps.iter().filter(|r| !r.converged).count(),
                median_secs: median(reps.iter().map(|r| r.elapsed_secs).collect()),
            }
        })
        .collect();
    Ok(McSummary {
        seed,
        sizes,
        replications,
        failures,
    })
}

/// The simulation study: labor-supply DGP, three-component truncated-normal
/// mixture, T = 8, uniform initial states.
pub fn labor_supply_dgp() -> Result<McDgp> {
    let grid = crate::dgp::labor_supply_grid();
    let kernel = crate::dgp::ArKernel::labor_supply_default().build(&grid)?;
    let s = grid.len();
    Ok(McDgp {
        spec: ModelSpec::binary_two_state(crate::dgp::LABOR_SUPPLY_DISCOUNT),
        grid,
        kernel,
        mixture: MixtureSpec::labor_supply_dgp(),
        gamma: vec![crate::dgp::LABOR_SUPPLY_GAMMA],
        init: vec![1.0 / s as f64; s],
        periods: 8,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::StepCdf;

    fn point_mass_dgp() -> McDgp {
        McDgp {
            mixture: MixtureSpec::point_mass(vec![2.0]),
            ..labor_supply_dgp().unwrap()
        }
    }

    fn small() -> McConfig {
        McConfig {
            sample_sizes: vec![50],
            replications: 2,
            kernel_source: KernelSource::Frequency,
        }
    }

    #[test]
    fn two_replications_and_mse_identity() {
        let s = run(&point_mass_dgp(), &small(), &EstimatorConfig::labor_supply_default(), 3).unwrap();
        assert_eq!(s.sizes[0].replications + s.sizes[0].failures, 2);
        assert_eq!(s.sizes[0].replications, 2);
        let g = &s.sizes[0].gamma;
        assert!((g.mse[0] - (g.bias[0].powi(2) + g.var[0])).abs() < 1e-10);
        assert!((g.mse_scaled[0] - 50.0 * g.mse[0]).abs() < 1e-9);
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = small();
        c.replications = 0;
        assert!(c.check().is_err());
        c = small();
        c.sample_sizes = vec![9];
        assert!(c.check().is_err());
    }

    #[test]
    fn replications_are_order_independent() {
        let dgp = point_mass_dgp();
        let est = EstimatorConfig::labor_supply_default();
        let mut cfg = small();
        cfg.sample_sizes = vec![40, 30];
        let all = run(&dgp, &cfg, &est, 11).unwrap();
        let (single, _) = run_replication(&dgp, &cfg, &est, 30, replication_seed(11, 30, 1)).unwrap();
        let stored = all.replications.iter().find(|r| r.n == 30 && r.m == 1).unwrap();
        assert_eq!(stored.gamma_hat, single.gamma_hat);
        assert_eq!(stored.iae, single.iae);
    }

    /// Stored IAE against a dense midpoint sum on the same range.
    #[test]
    fn stored_iae_matches_independent_quadrature() {
        let dgp = labor_supply_dgp().unwrap();
        let cfg = McConfig {
            sample_sizes: vec![60],
            replications: 1,
            kernel_source: KernelSource::Known,
        };
        let est = EstimatorConfig::labor_supply_default();
        let n = 60;
        let seed = replication_seed(5, n, 0);
        let (rep, _) = run_replication(&dgp, &cfg, &est, n, seed).unwrap();
        // rebuild the estimate to get the step function
        let betas = draw_types(&dgp.mixture, n, derive_seed(seed, &[0])).unwrap();
        let panel = simulate_panel(&dgp.spec, &dgp.grid, &dgp.gamma, &dgp.kernel, &betas, 8, &dgp.init, derive_seed(seed, &[1]), SolverOptions::default()).unwrap();
        let result = estimate(&panel, &dgp.spec, &dgp.grid, &dgp.kernel, &est).unwrap();
        let cdf: StepCdf = pooled_cdf(&result.sieve);
        let steps = 4_000_000;
        let h = 50.0 / steps as f64;
        let riemann: f64 = (0..steps)
            .map(|k| {
                let x = (k as f64 + 0.5) * h;
                (cdf.eval(x) - dgp.mixture.cdf(0, x)).abs() * h
            })
            .sum();
        assert!((rep.iae - riemann).abs() < 1e-6, "{} vs {riemann}", rep.iae);
    }

    #[test]
    fn table_has_a_row_per_metric() {
        let s = run(&point_mass_dgp(), &small(), &EstimatorConfig::labor_supply_default(), 3).unwrap();
        let t = s.table();
        assert!(t.iter().any(|(k, v)| k == "mise" && v.len() == 1));
        assert!(t.iter().any(|(k, _)| k == "gamma_bias_scaled"));
        assert_eq!(s.timing().n, vec![50]);
    }
}
