//! Raw → primary: fit a view matrix to the closest data consistent with a
//! tomographically complete four-measurement GPT.
//!
//! Every column p of the primary matrix must satisfy c·p = 1 for one common
//! coefficient vector c. The fit minimises
//!
//! ```text
//! χ² = Σ_cells ((r − p) / Δr)²
//! ```
//!
//! jointly over c and the columns. For fixed c the column problem separates
//! and has an exact solution ([`project_column`]), so the search runs over c
//! alone: a damped Gauss-Newton step on the profiled χ², accepted only when
//! χ² does not increase, followed by re-projection of all columns.

use nalgebra::{DMatrix, DVector, Matrix4, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expsim::{Stage, StageDataMatrix};

pub const MAX_ITERATIONS: usize = 500;
pub const CHI2_TOL: f64 = 1e-10;

/// c = (α, β, γ, ε) of the affine constraint α p¹ + β p² + γ p³ + ε p⁴ = 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlaneCoefficients {
    pub alpha: f64,
    pub beta_c: f64,
    pub gamma: f64,
    pub epsilon_c: f64,
}

impl PlaneCoefficients {
    pub fn from_array(c: [f64; 4]) -> Self {
        Self { alpha: c[0], beta_c: c[1], gamma: c[2], epsilon_c: c[3] }
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.alpha, self.beta_c, self.gamma, self.epsilon_c]
    }

    pub fn dot(&self, p: &[f64]) -> f64 {
        self.as_array().iter().zip(p).map(|(c, v)| c * v).sum()
    }

    /// |c·p − 1|
    pub fn residual(&self, p: &[f64]) -> f64 {
        (self.dot(p) - 1.0).abs()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlaneFit {
    pub plane: PlaneCoefficients,
    /// Numerical rank of the column set; below 4 the plane is not unique and
    /// the minimum-norm solution is returned.
    pub rank: usize,
    pub degenerate: bool,
}

/// Weighted least-squares plane: minimise Σ wⱼ (c·pⱼ − 1)².
pub fn fit_plane(columns: &[[f64; 4]], weights: &[f64]) -> Result<PlaneFit> {
    if columns.is_empty() {
        return Err(Error::Domain("fit_plane needs at least one column".into()));
    }
    if weights.len() != columns.len() {
        return Err(Error::Shape(format!("{} weights for {} columns", weights.len(), columns.len())));
    }
    if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
        return Err(Error::Domain("plane weights must be finite and non-negative".into()));
    }
    let n = columns.len();
    let a = DMatrix::from_fn(n, 4, |j, i| weights[j].sqrt() * columns[j][i]);
    let b = DVector::from_fn(n, |j, _| weights[j].sqrt());
    let svd = a.svd(true, true);
    let smax = svd.singular_values.max();
    let tol = smax * 1e-10;
    let rank = svd.singular_values.iter().filter(|s| **s > tol).count();
    if rank == 0 {
        return Err(Error::DegeneratePlane("column set is identically zero".into()));
    }
    let c = svd.solve(&b, tol).map_err(|e| Error::DegeneratePlane(e.to_string()))?;
    Ok(PlaneFit {
        plane: PlaneCoefficients::from_array([c[0], c[1], c[2], c[3]]),
        rank,
        degenerate: rank < 4,
    })
}

/// Closest column to `column` (in the σ-weighted norm) on the plane and
/// inside the unit box.
pub fn project_column(column: &[f64; 4], sigma: &[f64; 4], plane: &PlaneCoefficients) -> Result<[f64; 4]> {
    if sigma.iter().any(|s| !(*s > 0.0)) {
        return Err(Error::Domain("projection needs strictly positive uncertainties".into()));
    }
    let c = plane.as_array();
    let s2: [f64; 4] = std::array::from_fn(|i| sigma[i] * sigma[i]);
    let denom: f64 = (0..4).map(|i| c[i] * c[i] * s2[i]).sum();
    if !(denom > 0.0) {
        return Err(Error::DegeneratePlane("c·(σ²∘c) = 0".into()));
    }
    let at = |lambda: f64| -> [f64; 4] { std::array::from_fn(|i| column[i] + lambda * s2[i] * c[i]) };
    let lambda = (1.0 - plane.dot(column)) / denom;
    let free = at(lambda);
    if free.iter().all(|v| (0.0..=1.0).contains(v)) {
        return Ok(free);
    }

    // Box active: p(λ) = clamp(r + λ σ²∘c) and c·p(λ) is non-decreasing and
    // piecewise linear in λ, so the root lies between two breakpoints.
    let clamped = |lambda: f64| -> [f64; 4] { at(lambda).map(|v| v.clamp(0.0, 1.0)) };
    let g = |lambda: f64| -> f64 { plane.dot(&clamped(lambda)) };
    let mut breaks: Vec<f64> = Vec::with_capacity(8);
    for i in 0..4 {
        let k = s2[i] * c[i];
        if k != 0.0 {
            breaks.push(-column[i] / k);
            breaks.push((1.0 - column[i]) / k);
        }
    }
    breaks.sort_by(|a, b| a.partial_cmp(b).expect("finite breakpoints"));
    let lo_val = g(breaks[0] - 1.0);
    let hi_val = g(breaks[breaks.len() - 1] + 1.0);
    if !(lo_val - 1e-12..=hi_val + 1e-12).contains(&1.0) {
        return Err(Error::DegeneratePlane(format!(
            "plane does not meet the unit box (c·p ranges over [{lo_val}, {hi_val}])"
        )));
    }
    let mut prev_l = breaks[0];
    let mut prev_g = g(prev_l);
    if prev_g >= 1.0 {
        return Ok(clamped(prev_l));
    }
    for &l in &breaks[1..] {
        let gv = g(l);
        if gv >= 1.0 {
            let t = if gv > prev_g { (1.0 - prev_g) / (gv - prev_g) } else { 0.0 };
            return Ok(clamped(prev_l + t * (l - prev_l)));
        }
        prev_l = l;
        prev_g = gv;
    }
    Ok(clamped(prev_l))
}

fn require_sigma(raw: &StageDataMatrix) -> Result<&DMatrix<f64>> {
    let sigma = raw
        .sigma
        .as_ref()
        .ok_or_else(|| Error::Data("raw matrix has no uncertainties".into()))?;
    if sigma.iter().any(|s| !(*s > 0.0)) {
        return Err(Error::Data("raw uncertainties must be strictly positive".into()));
    }
    Ok(sigma)
}

/// Σ over all cells of ((r − p)/Δr)².
pub fn chi_squared(raw: &StageDataMatrix, candidate: &DMatrix<f64>) -> Result<f64> {
    if candidate.shape() != raw.entries.shape() {
        return Err(Error::Shape(format!(
            "candidate is {:?}, raw is {:?}",
            candidate.shape(),
            raw.entries.shape()
        )));
    }
    let sigma = require_sigma(raw)?;
    Ok(raw
        .entries
        .iter()
        .zip(candidate.iter())
        .zip(sigma.iter())
        .map(|((r, p), s)| ((r - p) / s).powi(2))
        .sum())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GptFitResult {
    pub primary: StageDataMatrix,
    pub plane: PlaneCoefficients,
    pub chi2: f64,
    pub iterations: usize,
    pub converged: bool,
    /// χ² after initialisation followed by one entry per iteration.
    pub chi2_history: Vec<f64>,
    /// Whether the initial column set failed to pin the plane down uniquely.
    pub degenerate_start: bool,
}

struct Problem<'a> {
    columns: Vec<[f64; 4]>,
    sigmas: Vec<[f64; 4]>,
    raw: &'a StageDataMatrix,
}

impl Problem<'_> {
    fn project_all(&self, plane: &PlaneCoefficients) -> Result<Vec<[f64; 4]>> {
        self.columns
            .iter()
            .zip(&self.sigmas)
            .map(|(r, s)| project_column(r, s, plane))
            .collect()
    }

    /// Standardised residuals (r − p)/σ, or None if the plane is unusable.
    fn residuals(&self, c: &Vector4<f64>) -> Option<Vec<f64>> {
        let plane = PlaneCoefficients::from_array([c[0], c[1], c[2], c[3]]);
        let proj = self.project_all(&plane).ok()?;
        let mut out = Vec::with_capacity(proj.len() * 4);
        for ((p, r), s) in proj.iter().zip(&self.columns).zip(&self.sigmas) {
            for i in 0..4 {
                out.push((r[i] - p[i]) / s[i]);
            }
        }
        Some(out)
    }

    fn chi2(&self, c: &Vector4<f64>) -> Option<f64> {
        self.residuals(c).map(|e| e.iter().map(|v| v * v).sum())
    }

    fn jacobian(&self, c: &Vector4<f64>) -> Option<DMatrix<f64>> {
        let m = self.columns.len() * 4;
        let mut jac = DMatrix::zeros(m, 4);
        for k in 0..4 {
            let h = 1e-7 * c[k].abs().max(1.0);
            let mut plus = *c;
            let mut minus = *c;
            plus[k] += h;
            minus[k] -= h;
            let ep = self.residuals(&plus)?;
            let em = self.residuals(&minus)?;
            for i in 0..m {
                jac[(i, k)] = (ep[i] - em[i]) / (2.0 * h);
            }
        }
        Some(jac)
    }
}

/// Fit a raw four-row view to the nearest GPT-consistent (primary) view.
pub fn fit_gpt(raw: &StageDataMatrix) -> Result<GptFitResult> {
    if raw.rows() != 4 {
        return Err(Error::Shape(format!("GPT fit expects 4 counterpart settings, got {}", raw.rows())));
    }
    let sigma = require_sigma(raw)?;
    let ncols = raw.cols();
    let columns: Vec<[f64; 4]> = (0..ncols)
        .map(|j| std::array::from_fn(|i| raw.entries[(i, j)]))
        .collect();
    let sigmas: Vec<[f64; 4]> = (0..ncols).map(|j| std::array::from_fn(|i| sigma[(i, j)])).collect();
    let problem = Problem { columns, sigmas, raw };

    let init = fit_plane(&problem.columns, &vec![1.0; ncols])?;
    let mut c = Vector4::from(init.plane.as_array());
    let mut chi2 = problem
        .chi2(&c)
        .ok_or_else(|| Error::DegeneratePlane("initial plane admits no feasible projection".into()))?;
    let mut history = vec![chi2];
    let mut damping = 1e-3;
    let mut converged = false;
    let mut iterations = 0;

    while iterations < MAX_ITERATIONS {
        iterations += 1;
        let Some(e) = problem.residuals(&c) else { break };
        let Some(jac) = problem.jacobian(&c) else { break };
        let jtj: Matrix4<f64> = (jac.transpose() * &jac).fixed_view::<4, 4>(0, 0).into();
        let jte: Vector4<f64> = (jac.transpose() * DVector::from_vec(e)).fixed_rows::<4>(0).into();
        let mut accepted = None;
        while damping < 1e12 {
            let mut lhs = jtj;
            for k in 0..4 {
                lhs[(k, k)] += damping * jtj[(k, k)].max(1e-12);
            }
            if let Some(step) = lhs.lu().solve(&(-jte)) {
                let trial = c + step;
                if let Some(trial_chi2) = problem.chi2(&trial) {
                    if trial_chi2 <= chi2 {
                        accepted = Some((trial, trial_chi2));
                        damping = (damping * 0.3).max(1e-12);
                        break;
                    }
                }
            }
            damping *= 10.0;
        }
        match accepted {
            Some((trial, trial_chi2)) => {
                let delta = chi2 - trial_chi2;
                c = trial;
                chi2 = trial_chi2;
                history.push(chi2);
                if delta < CHI2_TOL {
                    converged = true;
                    break;
                }
            }
            None => {
                // no descent direction left at machine precision
                history.push(chi2);
                converged = true;
                break;
            }
        }
    }

    let plane = PlaneCoefficients::from_array([c[0], c[1], c[2], c[3]]);
    let proj = problem.project_all(&plane)?;
    let entries = DMatrix::from_fn(4, ncols, |i, j| proj[j][i]);
    let chi2_final = chi_squared(problem.raw, &entries)?;
    Ok(GptFitResult {
        primary: StageDataMatrix {
            stage: Stage::Primary,
            side: raw.side,
            entries,
            sigma: None,
            marginals: raw.marginals.clone(),
            cond_counts: None,
        },
        plane,
        chi2: chi2_final,
        iterations,
        converged,
        chi2_history: history,
        degenerate_start: init.degenerate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expsim::{probabilities_to_views, Side};
    use crate::gamescore::JointProbabilityTensor;
    use crate::qcore::{make_state, scenario_33, scenario_43};
    use std::f64::consts::FRAC_PI_4;

    fn raw_from(entries: DMatrix<f64>, sigma: f64) -> StageDataMatrix {
        let (r, c) = entries.shape();
        StageDataMatrix {
            stage: Stage::Raw,
            side: Side::Prep,
            entries,
            sigma: Some(DMatrix::from_element(r, c, sigma)),
            marginals: vec![0.5; c],
            cond_counts: None,
        }
    }

    #[test]
    fn chi_squared_examples() {
        let raw = raw_from(DMatrix::from_element(4, 8, 0.5), 0.01);
        assert_eq!(chi_squared(&raw, &raw.entries).unwrap(), 0.0);
        let mut cand = raw.entries.clone();
        cand[(1, 3)] += 0.01;
        assert!((chi_squared(&raw, &cand).unwrap() - 1.0).abs() < 1e-9);
        let mut cand = raw.entries.clone();
        cand[(0, 0)] += 0.02;
        cand[(3, 7)] -= 0.02;
        assert!((chi_squared(&raw, &cand).unwrap() - 8.0).abs() < 1e-9);
        assert!(matches!(chi_squared(&raw, &DMatrix::zeros(3, 8)), Err(Error::Shape(_))));
    }

    fn exact_view(theta: f64, sc: &crate::qcore::Scenario) -> StageDataMatrix {
        let t = JointProbabilityTensor::exact(&make_state(theta, 0.0).unwrap(), sc).unwrap();
        probabilities_to_views(&t).0
    }

    fn columns_of(m: &StageDataMatrix) -> Vec<[f64; 4]> {
        (0..m.cols()).map(|j| std::array::from_fn(|i| m.entries[(i, j)])).collect()
    }

    #[test]
    fn exact_planes() {
        let v33 = exact_view(FRAC_PI_4, &scenario_33());
        let fit = fit_plane(&columns_of(&v33), &[1.0; 8]).unwrap();
        assert!(!fit.degenerate);
        for (got, want) in fit.plane.as_array().iter().zip([2.0 / 3.0, 2.0 / 3.0, 2.0 / 3.0, 0.0]) {
            assert!((got - want).abs() < 1e-10, "{:?}", fit.plane);
        }
        let v43 = exact_view(FRAC_PI_4, &scenario_43());
        let fit = fit_plane(&columns_of(&v43), &[1.0; 8]).unwrap();
        for (got, want) in fit.plane.as_array().iter().zip([0.0, 1.0, 0.0, 1.0]) {
            assert!((got - want).abs() < 1e-10, "{:?}", fit.plane);
        }
    }

    #[test]
    fn plane_fixed_point() {
        let c0 = PlaneCoefficients::from_array([0.3, 0.5, 0.7, 0.9]);
        // columns built on the plane c0·p = 1
        let cols: Vec<[f64; 4]> = (0..6)
            .map(|j| {
                let mut p = [0.2 + 0.05 * j as f64, 0.4 - 0.03 * ((j * j) % 5) as f64, 0.1 + 0.07 * (j % 3) as f64, 0.0];
                p[3] = (1.0 - c0.alpha * p[0] - c0.beta_c * p[1] - c0.gamma * p[2]) / c0.epsilon_c;
                p
            })
            .collect();
        let fit = fit_plane(&cols, &[1.0; 6]).unwrap();
        for (a, b) in fit.plane.as_array().iter().zip(c0.as_array()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn degenerate_columns_are_flagged() {
        let cols = vec![[0.5, 0.5, 0.5, 0.5]; 8];
        let fit = fit_plane(&cols, &[1.0; 8]).unwrap();
        assert!(fit.degenerate);
        assert_eq!(fit.rank, 1);
        assert!(fit.plane.residual(&cols[0]) < 1e-12);
    }

    #[test]
    fn projection_basics() {
        let plane = PlaneCoefficients::from_array([2.0 / 3.0, 2.0 / 3.0, 2.0 / 3.0, 0.0]);
        let on = [0.5, 0.5, 0.5, 0.3];
        assert_eq!(project_column(&on, &[0.1; 4], &plane).unwrap(), on);

        let d = 0.05 / 3f64.sqrt();
        let r = [0.5 + d, 0.5 + d, 0.5 + d, 0.5];
        let p = project_column(&r, &[0.1; 4], &plane).unwrap();
        assert!(plane.residual(&p) < 1e-12);
        for i in 0..3 {
            assert!((p[i] - 0.5).abs() < 1e-12);
        }
        assert_eq!(p[3], 0.5);
    }

    #[test]
    fn projection_matches_grid_minimiser() {
        // dense grid over the plane's two free directions (p₄ fixed by c₄ = 0)
        let plane = PlaneCoefficients::from_array([2.0 / 3.0, 2.0 / 3.0, 2.0 / 3.0, 0.0]);
        let r = [0.61, 0.47, 0.55, 0.4];
        let s = [0.01, 0.02, 0.015, 0.01];
        let p = project_column(&r, &s, &plane).unwrap();
        let obj = |q: &[f64; 4]| -> f64 { (0..4).map(|i| ((r[i] - q[i]) / s[i]).powi(2)).sum() };
        let mut best = f64::INFINITY;
        let n = 2000;
        for i in 0..=n {
            for j in 0..=n {
                let q0 = 0.4 + 0.3 * i as f64 / n as f64;
                let q1 = 0.3 + 0.3 * j as f64 / n as f64;
                let q = [q0, q1, 1.5 - q0 - q1, r[3]];
                best = best.min(obj(&q));
            }
        }
        assert!(obj(&p) <= best + 1e-9);
        assert!(best - obj(&p) < 1e-2);
    }

    #[test]
    fn projection_respects_box() {
        let plane = PlaneCoefficients::from_array([0.0, 1.0, 0.0, 1.0]);
        let r = [0.5, 0.98, 0.3, 0.1];
        let s = [0.01, 0.001, 0.01, 0.05];
        let p = project_column(&r, &s, &plane).unwrap();
        assert!(plane.residual(&p) < 1e-12);
        assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));

        // unconstrained solution would leave the box
        let r = [0.5, 0.999, 0.3, 0.5];
        let s = [0.01, 0.5, 0.01, 0.001];
        let p = project_column(&r, &s, &plane).unwrap();
        assert!(plane.residual(&p) < 1e-12, "{p:?}");
        assert!(p.iter().all(|v| (0.0..=1.0).contains(v)), "{p:?}");
    }

    #[test]
    fn degenerate_plane_projection_errors() {
        let plane = PlaneCoefficients::from_array([0.0, 0.0, 0.0, 0.0]);
        assert!(matches!(project_column(&[0.5; 4], &[0.1; 4], &plane), Err(Error::DegeneratePlane(_))));
    }

    #[test]
    fn noiseless_fit_is_identity() {
        for sc in [scenario_33(), scenario_43()] {
            let raw = exact_view(FRAC_PI_4, &sc);
            let fit = fit_gpt(&raw).unwrap();
            assert!(fit.chi2 <= 1e-12, "{}", fit.chi2);
            assert!((&fit.primary.entries - &raw.entries).abs().max() < 1e-9);
            assert!(fit.converged);
        }
    }

    #[test]
    fn perturbed_fit_descends_and_is_feasible() {
        let exact = exact_view(0.6, &scenario_33());
        let mut raw = exact.clone();
        raw.sigma = Some(DMatrix::from_element(4, 8, 0.01));
        raw.entries[(0, 2)] += 0.03;
        raw.entries[(2, 2)] -= 0.02;
        raw.entries[(3, 5)] += 0.015;
        let fit = fit_gpt(&raw).unwrap();
        let naive = chi_squared(&raw, &exact.entries).unwrap();
        assert!(fit.chi2 < naive, "{} vs {}", fit.chi2, naive);
        for w in fit.chi2_history.windows(2) {
            assert!(w[1] <= w[0] + 1e-12);
        }
        for j in 0..8 {
            assert!(fit.plane.residual(&fit.primary.column(j)) <= 1e-9);
        }
        assert!(fit.primary.entries.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn fit_is_idempotent() {
        let exact = exact_view(0.4, &scenario_43());
        let mut raw = exact.clone();
        raw.sigma = Some(DMatrix::from_element(4, 8, 0.01));
        raw.entries[(1, 1)] += 0.02;
        raw.entries[(0, 6)] -= 0.02;
        let fit = fit_gpt(&raw).unwrap();
        let mut again = fit.primary.clone();
        again.stage = Stage::Raw;
        again.sigma = raw.sigma.clone();
        let refit = fit_gpt(&again).unwrap();
        assert!(refit.chi2 < 1e-12);
        assert!((&refit.primary.entries - &fit.primary.entries).abs().max() < 1e-9);
    }

    #[test]
    fn rejects_missing_sigma() {
        let mut raw = exact_view(0.4, &scenario_43());
        raw.sigma = None;
        assert!(matches!(fit_gpt(&raw), Err(Error::Data(_))));
    }
}
