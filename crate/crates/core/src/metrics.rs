//! Step CDFs and integrated error between an estimated and a true CDF.

use serde::Serialize;

/// Right-continuous step function with jumps `mass` at sorted `points`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepCdf {
    pub points: Vec<f64>,
    pub masses: Vec<f64>,
}

impl StepCdf {
    /// Sorts atoms by location, merging equal locations.
    pub fn from_atoms(mut atoms: Vec<(f64, f64)>) -> Self {
        atoms.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut points: Vec<f64> = Vec::with_capacity(atoms.len());
        let mut masses: Vec<f64> = Vec::with_capacity(atoms.len());
        for (p, m) in atoms {
            if points.last() == Some(&p) {
                *masses.last_mut().expect("nonempty") += m;
            } else {
                points.push(p);
                masses.push(m);
            }
        }
        Self { points, masses }
    }

    pub fn eval(&self, b: f64) -> f64 {
        let k = self.points.partition_point(|&p| p <= b);
        self.masses[..k].iter().sum()
    }

    /// `(b_j, F(b_j))` at each jump.
    pub fn steps(&self) -> Vec<(f64, f64)> {
        let mut acc = 0.0;
        self.points
            .iter()
            .zip(&self.masses)
            .map(|(&p, &m)| {
                acc += m;
                (p, acc)
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ErrorMetrics {
    /// `∫ |F̂ − F| db`.
    pub iae: f64,
    /// `∫ (F̂ − F)² db`; its Monte Carlo mean is the MISE.
    pub ise: f64,
}

fn simpson(f: &impl Fn(f64) -> f64, a: f64, fa: f64, b: f64, fb: f64) -> (f64, f64, f64) {
    let m = 0.5 * (a + b);
    let fm = f(m);
    (m, fm, (b - a) / 6.0 * (fa + 4.0 * fm + fb))
}

#[allow(clippy::too_many_arguments)]
fn adaptive(f: &impl Fn(f64) -> f64, a: f64, fa: f64, b: f64, fb: f64, m: f64, fm: f64, whole: f64, tol: f64, depth: u32) -> f64 {
    let (lm, flm, left) = simpson(f, a, fa, m, fm);
    let (rm, frm, right) = simpson(f, m, fm, b, fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol {
        return left + right + delta / 15.0;
    }
    adaptive(f, a, fa, m, fm, lm, flm, left, 0.5 * tol, depth - 1) + adaptive(f, m, fm, b, fb, rm, frm, right, 0.5 * tol, depth - 1)
}

/// Adaptive Simpson quadrature of `f` on `[a, b]` to absolute tolerance `tol`.
pub fn integrate(f: impl Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    if b <= a {
        return 0.0;
    }
    let (fa, fb) = (f(a), f(b));
    let (m, fm, whole) = simpson(&f, a, fa, b, fb);
    adaptive(&f, a, fa, b, fb, m, fm, whole, tol, 48)
}

/// IAE and ISE on `[lo, hi]`, integrating piecewise between the jump points of
/// the estimate so each piece sees a constant `F̂`.
pub fn error_metrics(estimated: &StepCdf, truth: impl Fn(f64) -> f64, lo: f64, hi: f64) -> ErrorMetrics {
    const TOL: f64 = 1e-8;
    let mut breaks = vec![lo];
    breaks.extend(estimated.points.iter().copied().filter(|&p| p > lo && p < hi));
    breaks.push(hi);
    let width = (hi - lo).max(f64::MIN_POSITIVE);
    let mut iae = 0.0;
    let mut ise = 0.0;
    for w in breaks.windows(2) {
        let (a, b) = (w[0], w[1]);
        if b <= a {
            continue;
        }
        let level = estimated.eval(a);
        let tol = TOL * (b - a) / width;
        iae += integrate(|x| (level - truth(x)).abs(), a, b, tol);
        ise += integrate(|x| (level - truth(x)).powi(2), a, b, tol);
    }
    ErrorMetrics { iae, ise }
}
