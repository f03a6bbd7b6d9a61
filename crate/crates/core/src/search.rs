//! Derivative-free maximization over a box: golden-section search in one
//! dimension, Nelder-Mead otherwise.

use serde::{Deserialize, Serialize};

use crate::error::{DdcError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchConfig {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    /// Nelder-Mead start; defaults to the box center.
    #[serde(default)]
    pub start: Option<Vec<f64>>,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_evals")]
    pub max_evals: usize,
    /// One-dimensional only: equally spaced probes that pick the bracket for
    /// golden-section search. Fewer than 3 searches the whole interval.
    #[serde(default = "default_scan")]
    pub scan_points: usize,
}

fn default_tol() -> f64 {
    1e-4
}

fn default_evals() -> usize {
    200
}

fn default_scan() -> usize {
    9
}

impl SearchConfig {
    pub fn interval(lo: f64, hi: f64) -> Self {
        Self {
            lo: vec![lo],
            hi: vec![hi],
            start: None,
            tol: default_tol(),
            max_evals: default_evals(),
            scan_points: default_scan(),
        }
    }

    fn check(&self) -> Result<()> {
        if self.lo.is_empty() || self.lo.len() != self.hi.len() || self.lo.iter().zip(&self.hi).any(|(l, h)| !(l <= h)) {
            return Err(DdcError::Config("search box needs lo <= hi in every coordinate".into()));
        }
        if !(self.tol > 0.0) || self.max_evals < 3 {
            return Err(DdcError::Config("search needs tol > 0 and max_evals >= 3".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SearchOutcome {
    pub best: Vec<f64>,
    pub value: f64,
    /// Every probe in evaluation order.
    pub trace: Vec<(Vec<f64>, f64)>,
    pub converged: bool,
}

struct Tracker<F> {
    f: F,
    trace: Vec<(Vec<f64>, f64)>,
}

impl<F: FnMut(&[f64]) -> Result<f64>> Tracker<F> {
    fn eval(&mut self, x: &[f64]) -> Result<f64> {
        let v = (self.f)(x)?;
        let v = if v.is_nan() { f64::NEG_INFINITY } else { v };
        self.trace.push((x.to_vec(), v));
        Ok(v)
    }

    fn finish(self, converged: bool) -> SearchOutcome {
        // first probe attaining the maximum
        let (best, value) = self
            .trace
            .iter()
            .fold(None::<&(Vec<f64>, f64)>, |acc, p| match acc {
                Some(a) if a.1 >= p.1 => Some(a),
                _ => Some(p),
            })
            .map(|(x, v)| (x.clone(), *v))
            .unwrap_or((Vec::new(), f64::NEG_INFINITY));
        SearchOutcome {
            best,
            value,
            trace: self.trace,
            converged,
        }
    }
}

/// Maximizes `f` over the configured box. The returned point is the best probe.
pub fn maximize(cfg: &SearchConfig, f: impl FnMut(&[f64]) -> Result<f64>) -> Result<SearchOutcome> {
    cfg.check()?;
    let mut tr = Tracker { f, trace: Vec::new() };
    let converged = if cfg.lo.len() == 1 {
        golden(cfg, &mut tr)?
    } else {
        nelder_mead(cfg, &mut tr)?
    };
    Ok(tr.finish(converged))
}

fn golden<F: FnMut(&[f64]) -> Result<f64>>(cfg: &SearchConfig, tr: &mut Tracker<F>) -> Result<bool> {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (cfg.lo[0], cfg.hi[0]);
    if cfg.scan_points >= 3 && b - a > cfg.tol {
        let m = cfg.scan_points;
        let xs: Vec<f64> = (0..m).map(|k| a + (b - a) * k as f64 / (m - 1) as f64).collect();
        let mut best = (0, f64::NEG_INFINITY);
        for (k, &x) in xs.iter().enumerate() {
            if tr.trace.len() >= cfg.max_evals {
                return Ok(false);
            }
            let v = tr.eval(&[x])?;
            if v > best.1 {
                best = (k, v);
            }
        }
        a = xs[best.0.saturating_sub(1)];
        b = xs[(best.0 + 1).min(m - 1)];
    }
    if b - a <= cfg.tol {
        tr.eval(&[0.5 * (a + b)])?;
        return Ok(true);
    }
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let mut fc = tr.eval(&[c])?;
    let mut fd = tr.eval(&[d])?;
    while b - a > cfg.tol {
        if tr.trace.len() >= cfg.max_evals {
            return Ok(false);
        }
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = tr.eval(&[c])?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = tr.eval(&[d])?;
        }
    }
    Ok(true)
}

fn nelder_mead<F: FnMut(&[f64]) -> Result<f64>>(cfg: &SearchConfig, tr: &mut Tracker<F>) -> Result<bool> {
    let dim = cfg.lo.len();
    let clamp = |x: Vec<f64>| -> Vec<f64> {
        x.iter()
            .enumerate()
            .map(|(d, v)| v.clamp(cfg.lo[d], cfg.hi[d]))
            .collect()
    };
    let start = cfg
        .start
        .clone()
        .unwrap_or_else(|| cfg.lo.iter().zip(&cfg.hi).map(|(l, h)| 0.5 * (l + h)).collect());
    if start.len() != dim {
        return Err(DdcError::Config("search start has the wrong dimension".into()));
    }
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(dim + 1);
    let x0 = clamp(start);
    let f0 = tr.eval(&x0)?;
    simplex.push((x0.clone(), f0));
    for d in 0..dim {
        let mut x = x0.clone();
        let step = 0.25 * (cfg.hi[d] - cfg.lo[d]).max(cfg.tol);
        x[d] = if x[d] + step <= cfg.hi[d] { x[d] + step } else { x[d] - step };
        let x = clamp(x);
        let f = tr.eval(&x)?;
        simplex.push((x, f));
    }
    loop {
        // descending by value: best first
        simplex.sort_by(|a, b| b.1.total_cmp(&a.1));
        let best = simplex[0].1;
        let worst = simplex[dim].1;
        let diameter = simplex
            .iter()
            .skip(1)
            .map(|(x, _)| x.iter().zip(&simplex[0].0).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
            .fold(0.0, f64::max);
        if diameter <= cfg.tol || (best - worst).abs() <= 1e-12 * (1.0 + best.abs()) {
            return Ok(true);
        }
        if tr.trace.len() >= cfg.max_evals {
            return Ok(false);
        }
        let centroid: Vec<f64> = (0..dim)
            .map(|d| simplex[..dim].iter().map(|(x, _)| x[d]).sum::<f64>() / dim as f64)
            .collect();
        let along = |t: f64| -> Vec<f64> {
            clamp(
                centroid
                    .iter()
                    .zip(&simplex[dim].0)
                    .map(|(c, w)| c + t * (c - w))
                    .collect(),
            )
        };
        let xr = along(1.0);
        let fr = tr.eval(&xr)?;
        if fr > simplex[0].1 {
            let xe = along(2.0);
            let fe = tr.eval(&xe)?;
            simplex[dim] = if fe > fr { (xe, fe) } else { (xr, fr) };
        } else if fr > simplex[dim - 1].1 {
            simplex[dim] = (xr, fr);
        } else {
            let xc = along(if fr > worst { 0.5 } else { -0.5 });
            let fc = tr.eval(&xc)?;
            if fc > worst.max(fr) {
                simplex[dim] = (xc, fc);
            } else {
                let x_best = simplex[0].0.clone();
                for k in 1..=dim {
                    let x = clamp(x_best.iter().zip(&simplex[k].0).map(|(b, x)| b + 0.5 * (x - b)).collect());
                    let f = tr.eval(&x)?;
                    simplex[k] = (x, f);
                }
            }
        }
    }
}
