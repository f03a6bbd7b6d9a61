//! Numerical check of operator-based identification for discrete types.
//!
//! With `a2` fixed, the observable operators factor as
//!
//! ```text
//! L_342 = L_3b · D4 · Db · L_b2,      L_32 = L_3b · Db · L_b2,
//! ```
//!
//! where `L_3b[(a3,x3)][r] = P(a3; x3, b_r)`, `D4 = diag P(a4; x4, b_r)`,
//! `Db = diag P(a1; x1, b_r) f_r` and `L_b2[r][x2] = P(a2; x2, b_r)`. Hence
//! `L_342 L_32⁺ = L_3b D4 L_3b⁺`, whose eigenvectors are the type CCPs.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{DdcError, Result};
use crate::model::{ModelSpec, StateGrid, TransitionKernel};
use crate::rank::{singular_values, solve_types, TypePoint};
use crate::solver::SolverOptions;

/// Fixed actions and states of the identifying argument.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdentConditioning {
    pub a1: usize,
    #[serde(default)]
    pub a2: usize,
    pub a4: usize,
    pub x1: usize,
    pub x4: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdentOptions {
    /// Accepted factorization residual.
    #[serde(default = "default_residual_tol")]
    pub residual_tol: f64,
    /// Relative singular-value cutoff of the pseudoinverse and rank.
    #[serde(default = "default_pinv_cutoff")]
    pub pinv_cutoff: f64,
    /// Minimum gap between recovered eigenvalues.
    #[serde(default = "default_gap_tol")]
    pub gap_tol: f64,
}

fn default_residual_tol() -> f64 {
    1e-10
}
fn default_pinv_cutoff() -> f64 {
    1e-12
}
fn default_gap_tol() -> f64 {
    1e-6
}

impl Default for IdentOptions {
    fn default() -> Self {
        Self {
            residual_tol: default_residual_tol(),
            pinv_cutoff: default_pinv_cutoff(),
            gap_tol: default_gap_tol(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Residuals {
    pub l342: f64,
    pub l32: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OperatorBundle {
    pub conditioning: IdentConditioning,
    pub num_actions: usize,
    pub num_states: usize,
    /// Rows `(a3, x3)` at `a3 * num_states + x3`, columns `x2`.
    pub l342: DMatrix<f64>,
    pub l32: DMatrix<f64>,
    /// Rows `(a3, x3)`, columns types.
    pub l3b: DMatrix<f64>,
    pub d4: DVector<f64>,
    pub db: DVector<f64>,
    /// Rows types, columns `x2`.
    pub lb2: DMatrix<f64>,
    pub residuals: Residuals,
}

fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0, |acc, v| acc.max(v.abs()))
}

/// Builds the observable operators from the joint law of `(x, a)` over four
/// periods (dividing out the transitions) and the factors from type CCPs,
/// then checks both factorizations.
#[allow(clippy::too_many_arguments)]
pub fn build_operators(
    spec: &ModelSpec<f64>,
    grid: &StateGrid<f64>,
    gamma: &[f64],
    kernel: &TransitionKernel<f64>,
    types: &[TypePoint],
    cond: IdentConditioning,
    solver: SolverOptions,
    opts: IdentOptions,
) -> Result<OperatorBundle> {
    let (s, na, r) = (grid.len(), spec.num_actions, types.len());
    if cond.x1 >= s || cond.x4 >= s || [cond.a1, cond.a2, cond.a4].iter().any(|&a| a >= na) {
        return Err(DdcError::Config(format!("conditioning {cond:?} out of range")));
    }
    let sols = solve_types(spec, grid, gamma, kernel, types, solver)?;
    let rows = na * s;
    let mut l342 = DMatrix::zeros(rows, s);
    let mut l32 = DMatrix::zeros(rows, s);
    for (t, sol) in types.iter().zip(&sols) {
        let p1 = sol.at(1).prob(cond.x1, cond.a1);
        let p4 = sol.at(4).prob(cond.x4, cond.a4);
        for x2 in 0..s {
            let f2 = kernel.prob(cond.a1, cond.x1, x2);
            let p2 = sol.at(2).prob(x2, cond.a2);
            for a3 in 0..na {
                for x3 in 0..s {
                    let f3 = kernel.prob(cond.a2, x2, x3);
                    let p3 = sol.at(3).prob(x3, a3);
                    let f4 = kernel.prob(a3, x3, cond.x4);
                    let path = t.weight * p1 * f2 * p2 * f3 * p3;
                    l342[(a3 * s + x3, x2)] += path * f4 * p4;
                    l32[(a3 * s + x3, x2)] += path;
                }
            }
        }
    }
    for x2 in 0..s {
        let f2 = kernel.prob(cond.a1, cond.x1, x2);
        for a3 in 0..na {
            for x3 in 0..s {
                let f3 = kernel.prob(cond.a2, x2, x3);
                let f4 = kernel.prob(a3, x3, cond.x4);
                if !(f2 * f3 * f4 > 0.0) {
                    return Err(DdcError::Numeric(format!(
                        "transition into ({a3},{x3}) from x2={x2} has zero probability"
                    )));
                }
                l342[(a3 * s + x3, x2)] /= f2 * f3 * f4;
                l32[(a3 * s + x3, x2)] /= f2 * f3;
            }
        }
    }
    let l3b = DMatrix::from_fn(rows, r, |row, k| sols[k].at(3).prob(row % s, row / s));
    let d4 = DVector::from_fn(r, |k, _| sols[k].at(4).prob(cond.x4, cond.a4));
    let db = DVector::from_fn(r, |k, _| sols[k].at(1).prob(cond.x1, cond.a1) * types[k].weight);
    let lb2 = DMatrix::from_fn(r, s, |k, x2| sols[k].at(2).prob(x2, cond.a2));
    let core = DMatrix::from_diagonal(&db) * &lb2;
    let residuals = Residuals {
        l342: max_abs(&(&l342 - &l3b * DMatrix::from_diagonal(&d4) * &core)),
        l32: max_abs(&(&l32 - &l3b * &core)),
    };
    for (which, res) in [("L_342", residuals.l342), ("L_32", residuals.l32)] {
        if !(res <= opts.residual_tol) {
            return Err(DdcError::Factorization {
                which,
                residual: res,
                tol: opts.residual_tol,
            });
        }
    }
    Ok(OperatorBundle {
        conditioning: cond,
        num_actions: na,
        num_states: s,
        l342,
        l32,
        l3b,
        d4,
        db,
        lb2,
        residuals,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Injectivity {
    pub l3b_min_singular: f64,
    pub lb2t_min_singular: f64,
    pub l3b_singular_values: Vec<f64>,
    pub lb2t_singular_values: Vec<f64>,
}

impl Injectivity {
    pub fn holds(&self, tol: f64) -> bool {
        self.l3b_min_singular > tol && self.lb2t_min_singular > tol
    }
}

/// Smallest singular values of `L_3b` and `L_b2ᵀ`; both positive certifies
/// numerical injectivity on the grid.
pub fn injectivity_diagnostic(bundle: &OperatorBundle) -> Injectivity {
    let a = singular_values(&bundle.l3b);
    let b = singular_values(&bundle.lb2.transpose());
    let tail = |v: &[f64]| -> f64 {
        // fewer singular values than types means rank deficiency by shape
        if v.len() < bundle.d4.len() {
            0.0
        } else {
            v.last().copied().unwrap_or(0.0)
        }
    };
    Injectivity {
        l3b_min_singular: tail(&a),
        lb2t_min_singular: tail(&b),
        l3b_singular_values: a,
        lb2t_singular_values: b,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpectralRecovery {
    /// Recovered eigenvalues, ordered to match the true types.
    pub eigenvalues: Vec<f64>,
    pub true_eigenvalues: Vec<f64>,
    /// `[type][(a3, x3)]`, rescaled so probabilities over `a3` sum to one.
    pub eigenfunctions: Vec<Vec<f64>>,
    /// `matching[k]` is the true type of recovered pair `k`.
    pub matching: Vec<usize>,
    pub min_gap: f64,
    pub max_eigenvalue_error: f64,
    pub max_ccp_error: f64,
    /// Largest deviation of `Σ_{a3}` from one after rescaling.
    pub max_row_sum_error: f64,
    pub l32_singular_values: Vec<f64>,
}

fn pinv_cutoff_rank(sv: &[f64], cutoff: f64) -> usize {
    let top = sv.first().copied().unwrap_or(0.0);
    if !(top > 0.0) {
        return 0;
    }
    sv.iter().filter(|&&s| s > cutoff * top).count()
}

/// Pseudoinverse by SVD with relative cutoff.
pub fn pseudo_inverse(m: &DMatrix<f64>, cutoff: f64) -> DMatrix<f64> {
    let svd = m.clone().svd(true, true);
    let top = svd.singular_values.iter().fold(0.0f64, |a, &b| a.max(b));
    let (u, vt) = (svd.u.expect("requested u"), svd.v_t.expect("requested v_t"));
    let mut out = DMatrix::zeros(m.ncols(), m.nrows());
    for (k, &s) in svd.singular_values.iter().enumerate() {
        if s > cutoff * top && s > 0.0 {
            out += vt.row(k).transpose() * u.column(k).transpose() / s;
        }
    }
    out
}

/// Eigendecomposition of `A = L_342 L_32⁺` restricted to the range of `L_32`,
/// normalization of the eigenvectors, and matching to the true types by
/// nearest eigenvalue.
pub fn spectral_recover(bundle: &OperatorBundle, opts: IdentOptions) -> Result<SpectralRecovery> {
    let types = bundle.d4.len();
    let (s, na) = (bundle.num_states, bundle.num_actions);
    let svd = bundle.l32.clone().svd(true, false);
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let sv: Vec<f64> = order.iter().map(|&k| svd.singular_values[k]).collect();
    let rank = pinv_cutoff_rank(&sv, opts.pinv_cutoff);
    if rank < types {
        return Err(DdcError::NotInjective { rank, types });
    }
    let rank = types;
    let u_full = svd.u.expect("requested u");
    let u = DMatrix::from_fn(u_full.nrows(), rank, |i, k| u_full[(i, order[k])]);
    let a = &bundle.l342 * pseudo_inverse(&bundle.l32, opts.pinv_cutoff);
    let b = u.transpose() * &a * &u;
    let eig = b.clone().complex_eigenvalues();
    let mut lambdas: Vec<f64> = Vec::with_capacity(rank);
    for z in eig.iter() {
        if z.im.abs() > 1e-8 * (1.0 + z.re.abs()) {
            return Err(DdcError::Numeric(format!("complex eigenvalue {z} in reduced operator")));
        }
        lambdas.push(z.re);
    }
    lambdas.sort_by(f64::total_cmp);
    let min_gap = lambdas.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min);
    if min_gap < opts.gap_tol {
        return Err(DdcError::EigenvalueCollision {
            gap: min_gap,
            tol: opts.gap_tol,
        });
    }
    let mut functions: Vec<Vec<f64>> = Vec::with_capacity(rank);
    for &lambda in &lambdas {
        let shifted = &b - DMatrix::identity(rank, rank) * lambda;
        let sv = shifted.svd(false, true);
        let vt = sv.v_t.expect("requested v_t");
        let k = (0..rank)
            .min_by(|&i, &j| sv.singular_values[i].total_cmp(&sv.singular_values[j]))
            .expect("nonempty");
        let w = vt.row(k).transpose();
        let v = &u * w;
        let sums: Vec<f64> = (0..s).map(|x3| (0..na).map(|a3| v[a3 * s + x3]).sum()).collect();
        let scale = sums.iter().sum::<f64>() / s as f64;
        if !(scale.abs() > 0.0) {
            return Err(DdcError::Numeric("eigenvector has zero probability mass".into()));
        }
        functions.push(v.iter().map(|x| x / scale).collect());
    }
    // both sides sorted ascending: pairing in order minimizes total distance
    let mut truth: Vec<usize> = (0..types).collect();
    truth.sort_by(|&i, &j| bundle.d4[i].total_cmp(&bundle.d4[j]));
    let true_eigenvalues: Vec<f64> = truth.iter().map(|&k| bundle.d4[k]).collect();
    let mut max_eigenvalue_error = 0.0f64;
    let mut max_ccp_error = 0.0f64;
    let mut max_row_sum_error = 0.0f64;
    for (k, f) in functions.iter().enumerate() {
        let r = truth[k];
        max_eigenvalue_error = max_eigenvalue_error.max((lambdas[k] - bundle.d4[r]).abs());
        for (row, value) in f.iter().enumerate() {
            max_ccp_error = max_ccp_error.max((value - bundle.l3b[(row, r)]).abs());
        }
        for x3 in 0..s {
            let total: f64 = (0..na).map(|a3| f[a3 * s + x3]).sum();
            max_row_sum_error = max_row_sum_error.max((total - 1.0).abs());
        }
    }
    Ok(SpectralRecovery {
        eigenvalues: lambdas,
        true_eigenvalues,
        eigenfunctions: functions,
        matching: truth,
        min_gap,
        max_eigenvalue_error,
        max_ccp_error,
        max_row_sum_error,
        l32_singular_values: sv,
    })
}

/// Everything `ident-check` reports.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IdentReport {
    pub residuals: Residuals,
    pub injectivity: Injectivity,
    pub recovery: Option<SpectralRecovery>,
    /// Why recovery failed, when it did.
    pub failure: Option<String>,
}

pub fn ident_report(bundle: &OperatorBundle, opts: IdentOptions) -> IdentReport {
    let (recovery, failure) = match spectral_recover(bundle, opts) {
        Ok(r) => (Some(r), None),
        Err(e) => (None, Some(e.to_string())),
    };
    IdentReport {
        residuals: bundle.residuals.clone(),
        injectivity: injectivity_diagnostic(bundle),
        recovery,
        failure,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rank::{build_ratio_matrix, population_joint, RankConditioning, RatioOptions};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const COND: IdentConditioning = IdentConditioning { a1: 1, a2: 0, a4: 1, x1: 2, x4: 3 };

    fn model(rng: &mut ChaCha8Rng, states: usize) -> (ModelSpec<f64>, StateGrid<f64>, TransitionKernel<f64>) {
        let spec = ModelSpec::new(2, 1, 1, 0.85, crate::model::Horizon::Infinite, true).unwrap();
        let grid = StateGrid::new((0..states).map(|i| vec![-1.0 + 2.0 * i as f64 / (states - 1) as f64]).collect()).unwrap();
        let mut probs = Vec::new();
        for _ in 0..2 * states {
            let row: Vec<f64> = (0..states).map(|_| 0.05 + rng.random::<f64>()).collect();
            let t: f64 = row.iter().sum();
            probs.extend(row.into_iter().map(|p| p / t));
        }
        (spec, grid, TransitionKernel::new(2, states, probs).unwrap())
    }

    fn random_types(rng: &mut ChaCha8Rng, r: usize) -> Vec<TypePoint> {
        let raw: Vec<f64> = (0..r).map(|_| 0.2 + rng.random::<f64>()).collect();
        let total: f64 = raw.iter().sum();
        raw.iter()
            .map(|w| TypePoint {
                beta: vec![rng.random_range(-2.0..2.0), rng.random_range(-3.0..3.0)],
                weight: w / total,
            })
            .collect()
    }

    fn bundle(seed: u64, r: usize) -> OperatorBundle {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (spec, grid, kernel) = model(&mut rng, 6);
        let types = random_types(&mut rng, r);
        build_operators(&spec, &grid, &[], &kernel, &types, COND, SolverOptions::default(), IdentOptions::default()).unwrap()
    }

    #[test]
    fn factorizations_hold_on_random_models() {
        for seed in 0..20 {
            let b = bundle(seed, 1 + (seed as usize % 4));
            assert!(b.residuals.l342 < 1e-10 && b.residuals.l32 < 1e-10, "{:?}", b.residuals);
        }
    }

    #[test]
    fn single_type_is_rank_one_with_its_eigenvalue() {
        let b = bundle(3, 1);
        assert!(b.residuals.l32 < 1e-14 && b.residuals.l342 < 1e-14);
        let sv = singular_values(&b.l32);
        assert!(sv[1] / sv[0] < 1e-12);
        let rec = spectral_recover(&b, IdentOptions::default()).unwrap();
        assert!((rec.eigenvalues[0] - b.d4[0]).abs() < 1e-12);
        let inj = injectivity_diagnostic(&b);
        assert!((inj.l3b_min_singular - b.l3b.column(0).norm()).abs() < 1e-12);
    }

    #[test]
    fn spectral_recovery_matches_type_ccps() {
        let mut checked = 0;
        for seed in 100..140 {
            let b = bundle(seed, 2 + (seed as usize % 3));
            let mut d: Vec<f64> = b.d4.iter().copied().collect();
            d.sort_by(f64::total_cmp);
            if d.windows(2).any(|w| w[1] - w[0] < 0.1) {
                continue;
            }
            let rec = spectral_recover(&b, IdentOptions::default()).unwrap();
            assert!(rec.max_eigenvalue_error < 1e-8, "{}", rec.max_eigenvalue_error);
            assert!(rec.max_ccp_error < 1e-8, "seed {seed}: {}", rec.max_ccp_error);
            assert!(rec.max_row_sum_error < 1e-8);
            checked += 1;
        }
        assert!(checked >= 5, "only {checked} well-separated models");
    }

    #[test]
    fn eigenvalues_invariant_to_type_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let (spec, grid, kernel) = model(&mut rng, 6);
        let types = vec![
            TypePoint { beta: vec![-1.5, 2.0], weight: 0.3 },
            TypePoint { beta: vec![0.5, -1.0], weight: 0.5 },
            TypePoint { beta: vec![1.8, 0.4], weight: 0.2 },
        ];
        let mut flipped = types.clone();
        flipped.reverse();
        let run = |t: &[TypePoint]| {
            let b = build_operators(&spec, &grid, &[], &kernel, t, COND, SolverOptions::default(), IdentOptions::default()).unwrap();
            spectral_recover(&b, IdentOptions::default()).unwrap().eigenvalues
        };
        let (x, y) = (run(&types), run(&flipped));
        for (a, b) in x.iter().zip(&y) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn duplicated_type_is_flagged() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let (spec, grid, kernel) = model(&mut rng, 6);
        let types = vec![
            TypePoint { beta: vec![0.7, -1.2], weight: 0.4 },
            TypePoint { beta: vec![0.7, -1.2], weight: 0.6 },
        ];
        let b = build_operators(&spec, &grid, &[], &kernel, &types, COND, SolverOptions::default(), IdentOptions::default()).unwrap();
        let inj = injectivity_diagnostic(&b);
        assert!(inj.l3b_min_singular < 1e-12 && !inj.holds(1e-12));
        assert!(matches!(
            spectral_recover(&b, IdentOptions::default()),
            Err(DdcError::NotInjective { .. } | DdcError::EigenvalueCollision { .. })
        ));
    }

    #[test]
    fn distinct_types_are_injective() {
        let b = bundle(12, 3);
        assert!(injectivity_diagnostic(&b).holds(1e-8));
    }

    #[test]
    fn ratio_matrix_equals_factor_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (spec, grid, kernel) = model(&mut rng, 6);
        let types = random_types(&mut rng, 3);
        let cond = IdentConditioning { a2: 1, ..COND };
        let b = build_operators(&spec, &grid, &[], &kernel, &types, cond, SolverOptions::default(), IdentOptions::default()).unwrap();
        let a3 = 1;
        let joint = population_joint(
            &spec,
            &grid,
            &[],
            &kernel,
            &types,
            RankConditioning { a1: cond.a1, a2: cond.a2, a3, x1: cond.x1 },
            SolverOptions::default(),
        )
        .unwrap();
        let m = build_ratio_matrix(&joint, &kernel, RatioOptions::default()).unwrap();
        let product = &b.l3b * DMatrix::from_diagonal(&b.db) * &b.lb2;
        for (r, &x3) in m.x3.iter().enumerate() {
            for (c, &x2) in m.x2.iter().enumerate() {
                assert!((m.values[r][c] - product[(a3 * 6 + x3, x2)]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pseudo_inverse_of_full_rank_is_inverse() {
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 3.0]);
        let p = pseudo_inverse(&m, 1e-12);
        assert!(((&m * &p) - DMatrix::identity(2, 2)).abs().max() < 1e-14);
    }
}
