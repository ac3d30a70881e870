//! Independent reference computations used by the integration and
//! acceptance tests. Nothing here calls the solver or fitter under test.
#![allow(dead_code)]

use commgame_core::expsim::{probabilities_to_views, Side, Stage, StageDataMatrix};
use commgame_core::qcore::{make_state, Scenario};
use commgame_core::{JointProbabilityTensor, OverlapProblem};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// (4 + sin2θ)/6
pub fn closed_form_33(theta: f64) -> f64 {
    (4.0 + (2.0 * theta).sin()) / 6.0
}

/// (9 + √3(1 + 2 sin2θ))/18
pub fn closed_form_43(theta: f64) -> f64 {
    (9.0 + 3f64.sqrt() * (1.0 + 2.0 * (2.0 * theta).sin())) / 18.0
}

/// Success probability by enumerating every (x, y, a, b); outputs must differ
/// exactly when x + y = max(m, n) + 1 with 1-indexed settings.
pub fn brute_force_success(t: &JointProbabilityTensor, m: usize, n: usize) -> f64 {
    let mut total = 0.0;
    for x in 1..=m {
        for y in 1..=n {
            let differ = x + y == m.max(n) + 1;
            for a in 0..2 {
                for b in 0..2 {
                    if (a != b) == differ {
                        total += t.p(x - 1, y - 1, a, b);
                    }
                }
            }
        }
    }
    total / (m * n) as f64
}

pub fn exact_tensor(theta: f64, scenario: &Scenario) -> JointProbabilityTensor {
    JointProbabilityTensor::exact(&make_state(theta, 0.0).unwrap(), scenario).unwrap()
}

/// Random overlap problem with two settings and scalar contributions. Every
/// row has a column contributing exactly 1/2 and both settings have the same
/// number of rows, so the uniform-on-that-column point is feasible.
pub fn random_toy_overlap<R: Rng>(rng: &mut R) -> OverlapProblem {
    let per_setting = rng.random_range(1..=3);
    let cols = rng.random_range(2..=4);
    let mut row_setting = Vec::new();
    let mut diagonal = Vec::new();
    let mut contributions = Vec::new();
    for s in 0..2 {
        for _ in 0..per_setting {
            row_setting.push(s);
            diagonal.push(rng.random_range(0..cols));
            let half = rng.random_range(0..cols);
            let g: Vec<DVector<f64>> = (0..cols)
                .map(|c| DVector::from_element(1, if c == half { 0.5 } else { rng.random::<f64>() }))
                .collect();
            contributions.push(g);
        }
    }
    OverlapProblem { row_setting, diagonal, contributions }
}

/// Dual function L(μ) = Σ_r max_c ( [c = d_r]/R + μ·sign_r·g[r][c] ).
fn overlap_dual(problem: &OverlapProblem, mu: f64) -> f64 {
    let rows = problem.row_setting.len() as f64;
    problem
        .contributions
        .iter()
        .enumerate()
        .map(|(r, g)| {
            let sign = if problem.row_setting[r] == 1 { 1.0 } else { -1.0 };
            g.iter()
                .enumerate()
                .map(|(c, v)| {
                    let diag = if c == problem.diagonal[r] { 1.0 / rows } else { 0.0 };
                    diag + mu * sign * v[0]
                })
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .sum()
}

/// Optimal overlap of a two-setting scalar problem: grid search (step 1e-3)
/// over the single Lagrange multiplier of the equivalence constraint, then
/// ternary refinement inside the best grid cell. The dual is convex and
/// piecewise linear, so the refined minimum is the LP optimum.
pub fn overlap_oracle(problem: &OverlapProblem) -> f64 {
    assert!(problem.row_setting.iter().all(|&s| s < 2));
    assert!(problem.contributions.iter().flatten().all(|v| v.len() == 1));
    let step = 1e-3;
    let span = 200.0;
    let mut best = (0.0, f64::INFINITY);
    let steps = (2.0 * span / step) as i64;
    for i in 0..=steps {
        let mu = -span + i as f64 * step;
        let v = overlap_dual(problem, mu);
        if v < best.1 {
            best = (mu, v);
        }
    }
    assert!(best.0.abs() < span - step, "dual minimum at the edge of the grid");
    let (mut lo, mut hi) = (best.0 - step, best.0 + step);
    for _ in 0..200 {
        let a = lo + (hi - lo) / 3.0;
        let b = hi - (hi - lo) / 3.0;
        if overlap_dual(problem, a) <= overlap_dual(problem, b) {
            hi = b;
        } else {
            lo = a;
        }
    }
    overlap_dual(problem, 0.5 * (lo + hi)).min(best.1)
}

/// Minimiser of Σ((r−p)/σ)² over p ∈ [0,1]⁴ with c·p = 1, from bisection on
/// the multiplier of p(λ) = clamp(r + λσ²c). None when the plane misses the
/// box.
pub fn box_plane_projection(r: &[f64; 4], sigma: &[f64; 4], c: &[f64; 4]) -> Option<[f64; 4]> {
    let p = |lambda: f64| -> [f64; 4] {
        std::array::from_fn(|i| (r[i] + lambda * sigma[i] * sigma[i] * c[i]).clamp(0.0, 1.0))
    };
    let g = |lambda: f64| -> f64 { p(lambda).iter().zip(c).map(|(a, b)| a * b).sum::<f64>() - 1.0 };
    let (mut lo, mut hi) = (-1.0, 1.0);
    let mut expand = 0;
    while g(lo) > 0.0 {
        lo *= 2.0;
        expand += 1;
        if expand > 200 {
            return None;
        }
    }
    expand = 0;
    while g(hi) < 0.0 {
        hi *= 2.0;
        expand += 1;
        if expand > 200 {
            return None;
        }
    }
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if g(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let out = p(0.5 * (lo + hi));
    let dot: f64 = out.iter().zip(c).map(|(a, b)| a * b).sum();
    ((dot - 1.0).abs() < 1e-9).then_some(out)
}

/// χ² of a view against its best box-constrained projection on plane c.
pub fn profiled_chi2(view: &StageDataMatrix, c: &[f64; 4]) -> f64 {
    let sigma = view.sigma.as_ref().expect("raw view carries uncertainties");
    let mut total = 0.0;
    for j in 0..view.cols() {
        let r: [f64; 4] = std::array::from_fn(|i| view.entries[(i, j)]);
        let s: [f64; 4] = std::array::from_fn(|i| sigma[(i, j)]);
        let Some(p) = box_plane_projection(&r, &s, c) else {
            return f64::INFINITY;
        };
        total += (0..4).map(|i| ((r[i] - p[i]) / s[i]).powi(2)).sum::<f64>();
    }
    total
}

/// Plain Nelder–Mead with standard coefficients.
pub fn nelder_mead<F: Fn(&[f64]) -> f64>(f: F, x0: &[f64], scale: f64, iters: usize) -> (Vec<f64>, f64) {
    let n = x0.len();
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
    simplex.push((x0.to_vec(), f(x0)));
    for i in 0..n {
        let mut x = x0.to_vec();
        x[i] += scale;
        let fx = f(&x);
        simplex.push((x, fx));
    }
    let lerp = |a: &[f64], b: &[f64], t: f64| -> Vec<f64> { a.iter().zip(b).map(|(u, v)| u + t * (v - u)).collect() };
    for _ in 0..iters {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let centroid: Vec<f64> = (0..n).map(|k| simplex[..n].iter().map(|s| s.0[k]).sum::<f64>() / n as f64).collect();
        let worst = simplex[n].clone();
        let reflected = lerp(&centroid, &worst.0, -1.0);
        let fr = f(&reflected);
        if fr < simplex[0].1 {
            let expanded = lerp(&centroid, &worst.0, -2.0);
            let fe = f(&expanded);
            simplex[n] = if fe < fr { (expanded, fe) } else { (reflected, fr) };
        } else if fr < simplex[n - 1].1 {
            simplex[n] = (reflected, fr);
        } else {
            let contracted = if fr < worst.1 { lerp(&centroid, &reflected, 0.5) } else { lerp(&centroid, &worst.0, 0.5) };
            let fc = f(&contracted);
            if fc < worst.1.min(fr) {
                simplex[n] = (contracted, fc);
            } else {
                let best = simplex[0].0.clone();
                for s in simplex.iter_mut().skip(1) {
                    s.0 = lerp(&best, &s.0, 0.5);
                    s.1 = f(&s.0);
                }
            }
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    simplex.swap_remove(0)
}

/// Exact preparation view with N(0, noise) added to every cell and
/// uncertainty `noise` attached.
pub fn perturbed_prep_view<R: Rng>(scenario: &Scenario, theta: f64, noise: f64, rng: &mut R) -> StageDataMatrix {
    let (prep, _) = probabilities_to_views(&exact_tensor(theta, scenario));
    let normal = Normal::new(0.0, noise).unwrap();
    let entries = prep.entries.map(|v| (v + normal.sample(rng)).clamp(0.005, 0.995));
    StageDataMatrix {
        stage: Stage::Raw,
        side: Side::Prep,
        sigma: Some(DMatrix::from_element(entries.nrows(), entries.ncols(), noise)),
        entries,
        marginals: prep.marginals,
        cond_counts: None,
    }
}

/// Best profiled χ² found by Nelder–Mead from several starting planes.
pub fn chi2_oracle(view: &StageDataMatrix, starts: &[[f64; 4]]) -> f64 {
    let f = |x: &[f64]| profiled_chi2(view, &[x[0], x[1], x[2], x[3]]);
    starts
        .iter()
        .map(|s| {
            let (x, _) = nelder_mead(f, s, 0.05, 3000);
            nelder_mead(f, &x, 0.005, 3000).1
        })
        .fold(f64::INFINITY, f64::min)
}
