//! Acceptance criteria, one pass/fail line each. Runs without the libtest
//! harness so the lines are always printed.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use ddc_core::config::RunConfig;
use ddc_core::ident::{build_operators, spectral_recover, IdentConditioning, IdentOptions};
use ddc_core::mixture::{grid_rule, inner_weight_solve, likelihood_from_solutions, EmOptions, LikelihoodMatrix};
use ddc_core::model::{Horizon, ModelSpec, PayoffParams, StateGrid, TransitionKernel};
use ddc_core::montecarlo;
use ddc_core::rank::{build_ratio_matrix, estimate_rank, population_joint, RankConditioning, RankRule, RatioOptions, TypePoint};
use ddc_core::simulator::{simulate_panel, uniform_init, Panel};
use ddc_core::solver::{bellman_apply_table, ccp_table, solve_finite_tables, solve_infinite_table, solve_type, PayoffTable, SolverOptions, ValueFunction};
use ddc_core::transition::{estimate_frequency, estimate_kernel_density, max_row_l1, Transitions};
use ddc_core::DdcError;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

type Outcome = Result<String, String>;

const EULER: f64 = 0.577_215_664_901_532_9;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn sup(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn random_kernel(rng: &mut ChaCha8Rng, actions: usize, states: usize) -> TransitionKernel<f64> {
    let mut probs = Vec::new();
    for _ in 0..actions * states {
        let row: Vec<f64> = (0..states).map(|_| 0.05 + rng.random::<f64>()).collect();
        let t: f64 = row.iter().sum();
        probs.extend(row.into_iter().map(|p| p / t));
    }
    TransitionKernel::new(actions, states, probs).unwrap()
}

/// Arbitrary payoffs with the outside good at zero.
fn random_table(rng: &mut ChaCha8Rng, states: usize, actions: usize) -> PayoffTable<f64> {
    let values = (0..states * actions)
        .map(|k| if k % actions == 0 { 0.0 } else { rng.random_range(-3.0..3.0) })
        .collect();
    PayoffTable::from_values(states, actions, values).unwrap()
}

fn line_grid(states: usize) -> StateGrid<f64> {
    StateGrid::new((0..states).map(|i| vec![-1.0 + 2.0 * i as f64 / (states - 1) as f64]).collect()).unwrap()
}

/// Binary choice, one state coordinate, random intercept and slope.
fn intercept_slope_spec(discount: f64) -> ModelSpec<f64> {
    ModelSpec::new(2, 1, 1, discount, Horizon::Infinite, true).unwrap()
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

/// `P(a | x, β)` of a binary logit with payoff `v1 - v0`, written directly.
fn type_ccps(spec: &ModelSpec<f64>, grid: &StateGrid<f64>, kernel: &TransitionKernel<f64>, beta: &[f64]) -> Vec<[f64; 2]> {
    let sol = solve_type(spec, grid, &PayoffParams::new(vec![], beta.to_vec()), kernel, SolverOptions::default()).unwrap();
    (0..grid.len()).map(|x| [sol.at(1).prob(x, 0), sol.at(1).prob(x, 1)]).collect()
}

fn criterion_1() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let spec = |rho: f64| ModelSpec::<f64>::new(3, 2, 1, rho, Horizon::Infinite, false).unwrap();
    let mut worst_ratio: f64 = 0.0;
    for _ in 0..100 {
        let rho = rng.random_range(0.0..0.99);
        let kernel = random_kernel(&mut rng, 3, 5);
        let table = random_table(&mut rng, 5, 3);
        let u: Vec<f64> = (0..5).map(|_| rng.random_range(-20.0..20.0)).collect();
        let v: Vec<f64> = (0..5).map(|_| rng.random_range(-20.0..20.0)).collect();
        let tu = bellman_apply_table(&spec(rho), &table, &kernel, &ValueFunction::stationary(u.clone())).unwrap();
        let tv = bellman_apply_table(&spec(rho), &table, &kernel, &ValueFunction::stationary(v.clone())).unwrap();
        let (lhs, rhs) = (sup(tu.values(), tv.values()), rho * sup(&u, &v));
        ensure(lhs <= rhs + 1e-12, || format!("contraction violated: {lhs} > {rhs}"))?;
        if rhs > 0.0 {
            worst_ratio = worst_ratio.max(lhs / rhs);
        }
    }

    let kernel = random_kernel(&mut rng, 3, 5);
    let table = random_table(&mut rng, 5, 3);
    let myopic = solve_infinite_table(&spec(0.0), &table, &kernel, SolverOptions::default()).unwrap();
    let ccps = ccp_table(&spec(0.0), &table, &kernel, myopic.value.values()).unwrap();
    let mut myopic_err: f64 = 0.0;
    for s in 0..5 {
        let u: Vec<f64> = (0..3).map(|a| table.get(s, a)).collect();
        let z: f64 = u.iter().map(|x| x.exp()).sum();
        myopic_err = myopic_err.max((myopic.value.values()[s] - (z.ln() + EULER)).abs());
        for a in 0..3 {
            myopic_err = myopic_err.max((ccps.prob(s, a) - u[a].exp() / z).abs());
        }
    }
    ensure(myopic_err <= 1e-12, || format!("myopic closed form off by {myopic_err:e}"))?;

    let rho = 0.9;
    let inf = solve_infinite_table(&spec(rho), &table, &kernel, SolverOptions::default()).unwrap();
    let tables = vec![table.clone(); 600];
    let kernels = vec![&kernel; 600];
    let fin = solve_finite_tables(&spec(rho), &tables, &kernels).unwrap();
    let vinf = inf.value.values();
    let gap = sup(fin.value.period(1), vinf);
    let norm = vinf.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let bound = rho.powi(600) * norm + 1e-8;
    ensure(gap <= bound, || format!("infinite vs 600-step gap {gap:e} > {bound:e}"))?;
    Ok(format!(
        "worst contraction ratio {worst_ratio:.4}, myopic error {myopic_err:.1e}, horizon gap {gap:.1e}"
    ))
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let spec = ModelSpec::<f64>::new(3, 2, 1, 0.9, Horizon::Infinite, false).unwrap();
    let (mut row_err, mut shift_err): (f64, f64) = (0.0, 0.0);
    for _ in 0..100 {
        let kernel = random_kernel(&mut rng, 3, 6);
        let table = random_table(&mut rng, 6, 3);
        let sol = solve_infinite_table(&spec, &table, &kernel, SolverOptions::default()).unwrap();
        let v = sol.value.values().to_vec();
        let c = rng.random_range(-100.0..100.0);
        let moved: Vec<f64> = v.iter().map(|x| x + c).collect();
        let p = ccp_table(&spec, &table, &kernel, &v).unwrap();
        let q = ccp_table(&spec, &table, &kernel, &moved).unwrap();
        for s in 0..6 {
            row_err = row_err.max((p.row(s).iter().sum::<f64>() - 1.0).abs());
            shift_err = shift_err.max(sup(p.row(s), q.row(s)));
        }
    }
    ensure(row_err <= 1e-10, || format!("row sum error {row_err:e}"))?;
    ensure(shift_err <= 1e-12, || format!("shift invariance error {shift_err:e}"))?;

    let states = 5;
    let spec = intercept_slope_spec(0.9);
    let grid = line_grid(states);
    let kernel = random_kernel(&mut rng, 2, states);
    let draws = 80_000;
    let mut sim_err: f64 = 0.0;
    for (k, beta) in [vec![0.5, -1.0], vec![-0.8, 2.0]].into_iter().enumerate() {
        let truth = type_ccps(&spec, &grid, &kernel, &beta);
        let betas = vec![beta; draws];
        let panel = simulate_panel(&spec, &grid, &[], &kernel, &betas, 1, &uniform_init(states), 900 + k as u64, SolverOptions::default()).unwrap();
        let mut counts = vec![[0usize; 2]; states];
        for i in 0..panel.n() {
            counts[panel.state(i, 0)][panel.action(i, 0)] += 1;
        }
        for (x, c) in counts.iter().enumerate() {
            let total = (c[0] + c[1]) as f64;
            sim_err = sim_err.max((c[1] as f64 / total - truth[x][1]).abs());
        }
    }
    ensure(sim_err <= 0.02, || format!("simulated CCPs off by {sim_err}"))?;
    Ok(format!("row sum {row_err:.1e}, shift {shift_err:.1e}, simulated max-abs {sim_err:.4} at {draws} draws/type"))
}

/// Every `(x1, a1, x2, a2)` history repeated in proportion to its exact
/// probability under a two-type mixture.
fn population_panel(
    spec: &ModelSpec<f64>,
    grid: &StateGrid<f64>,
    kernel: &TransitionKernel<f64>,
    gamma: &[f64],
    types: &[(f64, f64)],
    scale: f64,
) -> Panel {
    let s = grid.len();
    let ccps: Vec<_> = types
        .iter()
        .map(|&(b, _)| solve_type(spec, grid, &PayoffParams::new(gamma.to_vec(), vec![b]), kernel, SolverOptions::default()).unwrap())
        .collect();
    let (mut states, mut actions, mut n) = (Vec::new(), Vec::new(), 0);
    for x1 in 0..s {
        for a1 in 0..2 {
            for x2 in 0..s {
                for a2 in 0..2 {
                    let f: f64 = types
                        .iter()
                        .zip(&ccps)
                        .map(|(&(_, w), sol)| w * sol.at(1).prob(x1, a1) * sol.at(2).prob(x2, a2))
                        .sum::<f64>()
                        * kernel.prob(a1, x1, x2)
                        / s as f64;
                    let reps = (f * scale).round() as usize;
                    for _ in 0..reps {
                        states.extend([x1, x2]);
                        actions.extend([a1, a2]);
                    }
                    n += reps;
                }
            }
        }
    }
    Panel::new(n, 2, states, actions).unwrap()
}

fn criterion_3() -> Outcome {
    let dgp = montecarlo::labor_supply_dgp().unwrap();
    let types = [(1.0, 0.7), (4.0, 0.3)];
    let panel = population_panel(&dgp.spec, &dgp.grid, &dgp.kernel, &dgp.gamma, &types, 1e6);
    let sols: Vec<_> = types
        .iter()
        .map(|&(b, _)| solve_type(&dgp.spec, &dgp.grid, &PayoffParams::new(dgp.gamma.clone(), vec![b]), &dgp.kernel, SolverOptions::default()).unwrap())
        .collect();
    let l = likelihood_from_solutions(&panel, &sols.iter().collect::<Vec<_>>()).unwrap();
    let sol = inner_weight_solve(&l, &vec![0; panel.n()], 1, None, EmOptions::default()).unwrap();
    let err = (sol.weights[0][0] - 0.7).abs().max((sol.weights[1][0] - 0.3).abs());
    ensure(err < 1e-3, || format!("weights {:?} vs (0.7, 0.3)", sol.weights))?;

    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut iterations = 0;
    for _ in 0..50 {
        let (n, b) = (rng.random_range(5..300), rng.random_range(2..12));
        let vals: Vec<f64> = (0..n * b).map(|_| rng.random::<f64>().powi(4) + 1e-8).collect();
        let l = LikelihoodMatrix::from_values(n, b, vals).unwrap();
        let cells: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
        for accelerate in [false, true] {
            let opts = EmOptions { tol: 1e-13, max_iter: 3000, accelerate };
            let s = inner_weight_solve(&l, &cells, 3, None, opts).unwrap();
            iterations += s.history.len();
            if let Some(w) = s.history.windows(2).find(|w| w[1] < w[0]) {
                return Err(format!("log-likelihood fell from {} to {}", w[0], w[1]));
            }
        }
    }
    Ok(format!("population weights within {err:.1e} (n = {}); 100 EM runs monotone over {iterations} iterations", panel.n()))
}

fn criterion_4() -> Outcome {
    let rule: Vec<usize> = [100, 500, 1000, 10_000].iter().map(|&n| grid_rule(n)).collect();
    ensure(rule == [13, 19, 23, 40], || format!("grid rule gave {rule:?}"))?;
    let cfg = RunConfig::load(&configs_dir().join("labor_supply.json")).map_err(|e| e.to_string())?;
    let dgp = cfg.mc_dgp().map_err(|e| e.to_string())?;
    let mc = cfg.montecarlo.clone().ok_or("config lacks montecarlo")?;
    ensure(mc.replications == 100 && mc.sample_sizes == [100, 500, 1000], || format!("{mc:?}"))?;
    let summary = montecarlo::run(&dgp, &mc, cfg.estimator().unwrap(), cfg.seed).map_err(|e| e.to_string())?;
    ensure(summary.failures.is_empty(), || format!("{} failed replications", summary.failures.len()))?;
    let mise: Vec<f64> = summary.sizes.iter().map(|s| s.mise).collect();
    let types: Vec<f64> = summary.sizes.iter().map(|s| s.types_mean).collect();
    ensure(mise.windows(2).all(|w| w[1] < w[0]), || format!("MISE not strictly decreasing: {mise:?}"))?;
    ensure(types.iter().all(|t| (2.0..=12.0).contains(t)), || format!("mean active types {types:?}"))?;
    let grids: Vec<usize> = summary.sizes.iter().map(|s| s.grid_points).collect();
    ensure(grids == [13, 19, 23], || format!("grid sizes {grids:?}"))?;
    Ok(format!("grid rule {rule:?}; MISE {mise:.4?}; mean active types {types:.2?}"))
}

/// `M[x3][x2] = Σ_r P(a3|x3,r) w_r P(a1|x1,r) P(a2|x2,r)`.
fn factor_product(ccps: &[Vec<[f64; 2]>], types: &[TypePoint], c: RankConditioning) -> Vec<Vec<f64>> {
    let s = ccps[0].len();
    (0..s)
        .map(|x3| {
            (0..s)
                .map(|x2| {
                    types
                        .iter()
                        .zip(ccps)
                        .map(|(t, p)| p[x3][c.a3] * t.weight * p[c.x1][c.a1] * p[x2][c.a2])
                        .sum()
                })
                .collect()
        })
        .collect()
}

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let states = 6;
    let spec = intercept_slope_spec(0.85);
    let grid = line_grid(states);
    let cond = RankConditioning { a1: 1, a2: 1, a3: 1, x1: 2 };
    let mut details = Vec::new();
    let mut cross: f64 = 0.0;
    for r in 1..=4 {
        let kernel = random_kernel(&mut rng, 2, states);
        let types = random_types(&mut rng, r);
        let joint = population_joint(&spec, &grid, &[], &kernel, &types, cond, SolverOptions::default()).unwrap();
        let m = build_ratio_matrix(&joint, &kernel, RatioOptions::default()).unwrap();
        let est = estimate_rank(&m, RankRule::Relative { threshold: 1e-10 });
        let sv = &est.singular_values;
        ensure(est.rank == r, || format!("R = {r}: rank {} from {sv:?}", est.rank))?;
        let tail = sv.get(r).map_or(0.0, |s| s / sv[0]);
        ensure(tail < 1e-10, || format!("R = {r}: σ_(R+1)/σ_1 = {tail:e}"))?;
        let ccps: Vec<_> = types.iter().map(|t| type_ccps(&spec, &grid, &kernel, &t.beta)).collect();
        let oracle = factor_product(&ccps, &types, cond);
        for (row, &x3) in m.x3.iter().enumerate() {
            for (col, &x2) in m.x2.iter().enumerate() {
                cross = cross.max((m.values[row][col] - oracle[x3][x2]).abs());
            }
        }
        details.push(format!("R={r}: σ_R/σ_1 {:.1e}, tail {tail:.1e}", sv[r - 1] / sv[0]));
    }
    ensure(cross <= 1e-12, || format!("ratio matrix vs factor product {cross:e}"))?;
    Ok(format!("{}; cross-check {cross:.1e}", details.join("; ")))
}

/// Joint law over four periods with the transitions divided out, summed
/// path by path. Rows `(a3, x3)`, columns `x2`.
fn ident_oracle(
    ccps: &[Vec<[f64; 2]>],
    types: &[TypePoint],
    c: IdentConditioning,
) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let s = ccps[0].len();
    let mut l342 = vec![vec![0.0; s]; 2 * s];
    let mut l32 = vec![vec![0.0; s]; 2 * s];
    for (t, p) in types.iter().zip(ccps) {
        for x2 in 0..s {
            for a3 in 0..2 {
                for x3 in 0..s {
                    let path = t.weight * p[c.x1][c.a1] * p[x2][c.a2] * p[x3][a3];
                    l32[a3 * s + x3][x2] += path;
                    l342[a3 * s + x3][x2] += path * p[c.x4][c.a4];
                }
            }
        }
    }
    (l342, l32)
}

fn criterion_6() -> Outcome {
    let states = 6;
    let spec = intercept_slope_spec(0.85);
    let grid = line_grid(states);
    let cond = IdentConditioning { a1: 1, a2: 0, a4: 1, x1: 2, x4: 3 };
    let opts = IdentOptions::default();
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let (mut worst_res, mut worst_oracle): (f64, f64) = (0.0, 0.0);
    for k in 0..20 {
        let kernel = random_kernel(&mut rng, 2, states);
        let types = random_types(&mut rng, 1 + k % 4);
        let b = build_operators(&spec, &grid, &[], &kernel, &types, cond, SolverOptions::default(), opts).map_err(|e| e.to_string())?;
        worst_res = worst_res.max(b.residuals.l342).max(b.residuals.l32);
        let ccps: Vec<_> = types.iter().map(|t| type_ccps(&spec, &grid, &kernel, &t.beta)).collect();
        let (o342, o32) = ident_oracle(&ccps, &types, cond);
        for row in 0..2 * states {
            for x2 in 0..states {
                worst_oracle = worst_oracle.max((b.l342[(row, x2)] - o342[row][x2]).abs()).max((b.l32[(row, x2)] - o32[row][x2]).abs());
            }
        }
    }
    ensure(worst_res < 1e-10, || format!("factorization residual {worst_res:e}"))?;
    ensure(worst_oracle < 1e-10, || format!("operators differ from enumeration by {worst_oracle:e}"))?;

    let mut recovered = 0;
    let mut worst_ccp: f64 = 0.0;
    let mut draws = 0;
    while recovered < 20 {
        draws += 1;
        ensure(draws <= 500, || format!("only {recovered} well-separated models in 500 draws"))?;
        let kernel = random_kernel(&mut rng, 2, states);
        let types = random_types(&mut rng, 2 + recovered % 3);
        let ccps: Vec<_> = types.iter().map(|t| type_ccps(&spec, &grid, &kernel, &t.beta)).collect();
        let mut eig: Vec<f64> = ccps.iter().map(|p| p[cond.x4][cond.a4]).collect();
        eig.sort_by(f64::total_cmp);
        if eig.windows(2).any(|w| w[1] - w[0] < 0.1) {
            continue;
        }
        let b = build_operators(&spec, &grid, &[], &kernel, &types, cond, SolverOptions::default(), opts).map_err(|e| e.to_string())?;
        let rec = spectral_recover(&b, opts).map_err(|e| e.to_string())?;
        for (lambda, f) in rec.eigenvalues.iter().zip(&rec.eigenfunctions) {
            let r = (0..types.len())
                .min_by(|&i, &j| (ccps[i][cond.x4][cond.a4] - lambda).abs().total_cmp(&(ccps[j][cond.x4][cond.a4] - lambda).abs()))
                .unwrap();
            for a3 in 0..2 {
                for x3 in 0..states {
                    worst_ccp = worst_ccp.max((f[a3 * states + x3] - ccps[r][x3][a3]).abs());
                }
            }
        }
        recovered += 1;
    }
    ensure(worst_ccp < 1e-8, || format!("recovered CCPs off by {worst_ccp:e}"))?;

    let kernel = random_kernel(&mut rng, 2, states);
    let twin = vec![
        TypePoint { beta: vec![0.7, -1.2], weight: 0.4 },
        TypePoint { beta: vec![0.7, -1.2], weight: 0.6 },
    ];
    let b = build_operators(&spec, &grid, &[], &kernel, &twin, cond, SolverOptions::default(), opts).map_err(|e| e.to_string())?;
    let flagged = matches!(
        spectral_recover(&b, opts),
        Err(DdcError::NotInjective { .. } | DdcError::EigenvalueCollision { .. })
    );
    ensure(flagged, || "duplicated type was not flagged".into())?;
    Ok(format!("residual {worst_res:.1e}, enumeration {worst_oracle:.1e}, CCP recovery {worst_ccp:.1e} on 20 models, duplicate flagged"))
}

fn ar_transitions(n: usize, seed: u64) -> Transitions {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.6).unwrap();
    let mut out = Transitions::default();
    for _ in 0..n {
        let x: f64 = rng.random_range(-1.0..1.0);
        let a = rng.random_range(0..2usize);
        let y = 0.5 * x + 0.4 * a as f64 - 0.2 + noise.sample(&mut rng);
        out.push(vec![x], a, vec![y]);
    }
    out
}

/// Continuous AR transition restricted to the grid and normalized per row.
fn ar_on_grid(grid: &StateGrid<f64>) -> TransitionKernel<f64> {
    let s = grid.len();
    TransitionKernel::from_fn(2, s, |a, i, j| {
        let mean = 0.5 * grid.point(i)[0] + 0.4 * a as f64 - 0.2;
        let dens = |k: usize| (-0.5 * ((grid.point(k)[0] - mean) / 0.6).powi(2)).exp();
        dens(j) / (0..s).map(dens).sum::<f64>()
    })
}

fn criterion_7() -> Outcome {
    let states = 5;
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let spec = intercept_slope_spec(0.8);
    let grid = line_grid(states);
    let kernel = random_kernel(&mut rng, 2, states);
    let (n, periods) = (5_000, 10);
    let betas: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect();
    let panel = simulate_panel(&spec, &grid, &[], &kernel, &betas, periods, &uniform_init(states), 77, SolverOptions::default()).unwrap();
    let freq = estimate_frequency(&panel, &grid, 2).unwrap();
    let freq_err = max_row_l1(&freq.kernel, &kernel);
    ensure(freq_err < 0.05, || format!("frequency row-L1 error {freq_err}"))?;

    let truth = ar_on_grid(&grid);
    let small = estimate_kernel_density(&ar_transitions(5_000, 1), &grid, 2, None).unwrap();
    let large = estimate_kernel_density(&ar_transitions(50_000, 2), &grid, 2, None).unwrap();
    let (e_small, e_large) = (max_row_l1(&small.kernel, &truth), max_row_l1(&large.kernel, &truth));
    ensure(e_large < e_small, || format!("kernel-density error {e_large} at 50k !< {e_small} at 5k"))?;
    Ok(format!("frequency row-L1 {freq_err:.4} at n·T = {}; kernel density {e_small:.4} -> {e_large:.4}", n * periods))
}

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs")
}

fn run_ddc(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_ddc")).args(args).output().map_err(|e| e.to_string())?;
    ensure(out.status.success(), || format!("ddc {args:?} failed: {}", String::from_utf8_lossy(&out.stderr)))
}

fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut files = BTreeMap::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let name = path.file_name().unwrap().to_string_lossy().into_owned();
        if name != "timing.json" {
            files.insert(name, std::fs::read(&path).unwrap());
        }
    }
    files
}

/// Every subcommand writing into its own directory under `root`.
fn pipeline(root: &Path, threads: usize, small_mc: &Path) -> Result<BTreeMap<String, BTreeMap<String, Vec<u8>>>, String> {
    let labor = configs_dir().join("labor_supply.json");
    let three = configs_dir().join("three_types.json");
    let t = threads.to_string();
    let dir = |name: &str| root.join(name).to_string_lossy().into_owned();
    let sim = dir("simulate");
    let panel = format!("{sim}/panel.csv");
    let labor = labor.to_string_lossy().into_owned();
    let three = three.to_string_lossy().into_owned();
    let small = small_mc.to_string_lossy().into_owned();
    let runs: Vec<(&str, Vec<String>)> = vec![
        ("validate", vec!["validate".into(), "--config".into(), labor.clone(), "--out".into(), dir("validate")]),
        ("solve", vec!["solve".into(), "--config".into(), labor.clone(), "--out".into(), dir("solve")]),
        ("simulate", vec!["simulate".into(), "--config".into(), labor.clone(), "--seed".into(), "31".into(), "--out".into(), sim.clone()]),
        ("estimate", vec!["estimate".into(), "--config".into(), labor.clone(), "--panel".into(), panel, "--out".into(), dir("estimate")]),
        ("rank", vec!["rank".into(), "--config".into(), three.clone(), "--out".into(), dir("rank")]),
        ("ident-check", vec!["ident-check".into(), "--config".into(), three, "--out".into(), dir("ident")]),
        ("montecarlo", vec!["montecarlo".into(), "--config".into(), small, "--out".into(), dir("montecarlo")]),
    ];
    let mut all = BTreeMap::new();
    for (name, mut args) in runs {
        args.extend(["--threads".to_string(), t.clone()]);
        let refs: Vec<&str> = args.iter().map(String::as_str).collect();
        run_ddc(&refs)?;
        let out_dir = PathBuf::from(&args[args.iter().position(|a| a == "--out").unwrap() + 1]);
        all.insert(name.to_string(), snapshot(&out_dir));
    }
    Ok(all)
}

fn criterion_8() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut cfg: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(configs_dir().join("labor_supply.json")).unwrap()).unwrap();
    cfg["montecarlo"] = serde_json::json!({"sample_sizes": [60, 120], "replications": 4});
    let small = tmp.path().join("small_mc.json");
    std::fs::write(&small, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    let reference = pipeline(&tmp.path().join("t1"), 1, &small)?;
    let mut files = 0;
    for threads in [2, 4, 0] {
        let other = pipeline(&tmp.path().join(format!("t{threads}")), threads, &small)?;
        for (cmd, outputs) in &reference {
            let got = &other[cmd];
            ensure(got.keys().eq(outputs.keys()), || format!("{cmd}: different file sets with --threads {threads}"))?;
            for (name, bytes) in outputs {
                ensure(&got[name] == bytes, || format!("{cmd}/{name} differs with --threads {threads}"))?;
            }
        }
        files = reference.values().map(BTreeMap::len).sum();
    }
    Ok(format!("{files} files from 7 commands byte-identical under --threads 1, 2, 4, 0"))
}

struct Criterion {
    id: usize,
    name: &'static str,
    budget: Option<Duration>,
    run: fn() -> Outcome,
}

fn main() {
    let criteria = [
        Criterion { id: 1, name: "solver correctness", budget: Some(Duration::from_secs(5)), run: criterion_1 },
        Criterion { id: 2, name: "CCP invariants", budget: Some(Duration::from_secs(30)), run: criterion_2 },
        Criterion { id: 3, name: "mixture inner solve", budget: Some(Duration::from_secs(10)), run: criterion_3 },
        Criterion { id: 4, name: "end-to-end Monte Carlo", budget: Some(Duration::from_secs(30 * 60)), run: criterion_4 },
        Criterion { id: 5, name: "rank estimator", budget: Some(Duration::from_secs(10)), run: criterion_5 },
        Criterion { id: 6, name: "identification lab", budget: Some(Duration::from_secs(30)), run: criterion_6 },
        Criterion { id: 7, name: "transition estimation", budget: Some(Duration::from_secs(20)), run: criterion_7 },
        Criterion { id: 8, name: "determinism across thread counts", budget: None, run: criterion_8 },
    ];
    let filter: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for c in criteria.iter().filter(|c| filter.is_empty() || filter.contains(&c.id)) {
        let start = Instant::now();
        let result = std::panic::catch_unwind(c.run).unwrap_or_else(|_| Err("panicked".into()));
        let elapsed = start.elapsed();
        let result = match (result, c.budget) {
            (Ok(_), Some(b)) if elapsed > b => Err(format!("took {:.1} s, budget {} s", elapsed.as_secs_f64(), b.as_secs())),
            (r, _) => r,
        };
        let (tag, detail) = match &result {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        println!("criterion {} [{tag}] {} ({:.1} s): {detail}", c.id, c.name, elapsed.as_secs_f64());
        if result.is_err() {
            failed += 1;
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
