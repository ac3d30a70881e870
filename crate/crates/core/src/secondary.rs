//! Primary → secondary: convex mixtures of primary procedures that are
//! operationally equivalent by construction.
//!
//! A secondary preparation event (x, a) is a mixture Σ u[(x,a)][c] P_c of the
//! primary columns. Among all mixtures whose outcome-averaged vectors
//! Σ_a ω(a|x) P^s_{x,a} agree across the game settings, the one maximising the
//! overlap C_P = mean of the diagonal weights is chosen by linear
//! programming.
//!
//! Measurements are handled by the same program in the transposed view,
//! where each measurement event (y, b) is represented by the conditional
//! state it leaves on the preparer's side. Secondary event (y, b) mixes all
//! primary events (y′, b′) with weights v[(y,b)][(y′,b′)]. Mixing whole
//! measurements with a single weight per y′ is not enough: the averaged
//! vectors of four noisy measurements are affinely independent, so the only
//! equivalent mixtures would be identical rows. For scoring, the outcome-0
//! effect of secondary measurement y is row (y, 0) of v applied to the primary
//! effects M_{y′,0} and M_{y′,1} = 1 − M_{y′,0}.
//!
//! The outcome weights ω used in the equivalence constraint are also the
//! outcome probabilities assigned to the secondary events.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expsim::{probabilities_to_views, Side, Stage, StageDataMatrix};
use crate::gamescore::{JointProbabilityTensor, Provenance};
use crate::lp::LinearProgram;
use crate::qcore::Scenario;

/// Equivalence residual accepted after the LP.
pub const OE_TOL: f64 = 1e-9;

/// How outcome-averaged vectors are formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OeWeighting {
    /// ω = 1/2 for both outcomes.
    #[default]
    Uniform,
    /// ω = the primary outcome marginals p(o|s).
    Empirical,
}

impl OeWeighting {
    pub fn label(self) -> &'static str {
        match self {
            OeWeighting::Uniform => "uniform",
            OeWeighting::Empirical => "empirical",
        }
    }

    /// Outcome weights for the first `settings` settings of a view.
    pub fn outcome_weights(self, view: &StageDataMatrix, settings: usize) -> Vec<f64> {
        match self {
            OeWeighting::Uniform => vec![0.5; 2 * settings],
            OeWeighting::Empirical => (0..settings)
                .flat_map(|s| {
                    let (w0, w1) = (view.marginals[2 * s], view.marginals[2 * s + 1]);
                    let total = w0 + w1;
                    if total > 0.0 {
                        [w0 / total, w1 / total]
                    } else {
                        [0.5, 0.5]
                    }
                })
                .collect(),
        }
    }
}

impl fmt::Display for OeWeighting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for OeWeighting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "uniform" => Ok(OeWeighting::Uniform),
            "empirical" => Ok(OeWeighting::Empirical),
            other => Err(Error::Domain(format!("unknown OE weighting {other:?} (expected uniform or empirical)"))),
        }
    }
}

/// A generic overlap-maximisation problem.
///
/// Variables are w[r][c] ≥ 0 with Σ_c w[r][c] = 1. Row r belongs to setting
/// `row_setting[r]` and contributes Σ_c w[r][c]·g[r][c] to that setting's
/// averaged vector; the averaged vectors must coincide across settings. The
/// objective is the mean of w[r][diagonal[r]].
#[derive(Debug, Clone)]
pub struct OverlapProblem {
    pub row_setting: Vec<usize>,
    pub diagonal: Vec<usize>,
    /// g[r][c], each of the same length k.
    pub contributions: Vec<Vec<DVector<f64>>>,
}

#[derive(Debug, Clone)]
pub struct OverlapSolution {
    pub weights: DMatrix<f64>,
    pub overlap: f64,
    /// Largest disagreement between averaged vectors at the solution.
    pub residual: f64,
}

impl OverlapProblem {
    fn dims(&self) -> Result<(usize, usize, usize, usize)> {
        let rows = self.row_setting.len();
        if rows == 0 || self.diagonal.len() != rows || self.contributions.len() != rows {
            return Err(Error::Shape("overlap problem rows disagree".into()));
        }
        let cols = self.contributions[0].len();
        if cols == 0 {
            return Err(Error::Shape("overlap problem has no columns".into()));
        }
        let k = self.contributions[0][0].len();
        for (r, g) in self.contributions.iter().enumerate() {
            if g.len() != cols || g.iter().any(|v| v.len() != k) {
                return Err(Error::Shape(format!("row {r} has inconsistent contributions")));
            }
            if self.diagonal[r] >= cols {
                return Err(Error::Shape(format!("row {r} diagonal out of range")));
            }
        }
        let settings = self.row_setting.iter().max().map_or(0, |s| s + 1);
        Ok((rows, cols, k, settings))
    }

    /// Averaged vector of each setting for given weights.
    pub fn averages(&self, weights: &DMatrix<f64>) -> Vec<DVector<f64>> {
        let k = self.contributions[0][0].len();
        let settings = self.row_setting.iter().max().map_or(0, |s| s + 1);
        let mut out = vec![DVector::zeros(k); settings];
        for (r, &s) in self.row_setting.iter().enumerate() {
            for (c, g) in self.contributions[r].iter().enumerate() {
                out[s] += g * weights[(r, c)];
            }
        }
        out
    }

    pub fn residual(&self, weights: &DMatrix<f64>) -> f64 {
        max_spread(&self.averages(weights))
    }

    pub fn overlap(&self, weights: &DMatrix<f64>) -> f64 {
        let rows = self.diagonal.len();
        self.diagonal.iter().enumerate().map(|(r, &d)| weights[(r, d)]).sum::<f64>() / rows as f64
    }

    pub fn to_lp(&self) -> Result<LinearProgram> {
        let (rows, cols, k, settings) = self.dims()?;
        let nvar = rows * cols;
        let neq = rows + settings.saturating_sub(1) * k;
        let mut a = DMatrix::zeros(neq, nvar);
        let mut b = DVector::zeros(neq);
        for r in 0..rows {
            for c in 0..cols {
                a[(r, r * cols + c)] = 1.0;
            }
            b[r] = 1.0;
        }
        // averaged vector of setting s minus that of setting 0
        for s in 1..settings {
            for (r, &rs) in self.row_setting.iter().enumerate() {
                let sign = if rs == s {
                    1.0
                } else if rs == 0 {
                    -1.0
                } else {
                    continue;
                };
                for c in 0..cols {
                    for i in 0..k {
                        a[(rows + (s - 1) * k + i, r * cols + c)] += sign * self.contributions[r][c][i];
                    }
                }
            }
        }
        let mut obj = DVector::zeros(nvar);
        for (r, &d) in self.diagonal.iter().enumerate() {
            obj[r * cols + d] = 1.0 / rows as f64;
        }
        LinearProgram::new(a, b, obj)
    }

    pub fn solve(&self) -> Result<OverlapSolution> {
        let (rows, cols, _, _) = self.dims()?;
        let lp = self.to_lp()?;
        let sol = lp
            .solve()
            .map_err(|e| Error::Lp(format!("overlap LP failed although the barycenter is feasible: {e}")))?;
        let mut weights = DMatrix::from_fn(rows, cols, |r, c| sol.x[r * cols + c].max(0.0));
        for r in 0..rows {
            let s: f64 = weights.row(r).sum();
            weights.row_mut(r).scale_mut(1.0 / s);
        }
        let residual = self.residual(&weights);
        if residual > OE_TOL {
            return Err(Error::Lp(format!("equivalence residual {residual:.3e} after LP")));
        }
        Ok(OverlapSolution { overlap: self.overlap(&weights).clamp(0.0, 1.0), weights, residual })
    }
}

fn max_spread(vectors: &[DVector<f64>]) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..vectors.len() {
        for j in i + 1..vectors.len() {
            worst = worst.max((&vectors[i] - &vectors[j]).abs().max());
        }
    }
    worst
}

/// Convex weights defining the secondary procedures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixingWeights {
    /// Rows: secondary preparation events (x, a) of the game; columns: all
    /// primary preparation events.
    pub u: DMatrix<f64>,
    /// Rows: secondary measurement events (y, b) of the game; columns: all
    /// primary measurement events.
    pub v: DMatrix<f64>,
    /// ω(a|x) of the secondary preparation events.
    pub prep_outcome_weights: Vec<f64>,
    /// ω(b|y) of the secondary measurement events.
    pub meas_outcome_weights: Vec<f64>,
}

impl MixingWeights {
    /// Identity mixing: each secondary procedure is its primary namesake.
    pub fn identity(m: usize, prep_total: usize, n: usize, meas_total: usize, prep_w: Vec<f64>, meas_w: Vec<f64>) -> Self {
        Self {
            u: DMatrix::from_fn(2 * m, 2 * prep_total, |r, c| if r == c { 1.0 } else { 0.0 }),
            v: DMatrix::from_fn(2 * n, 2 * meas_total, |r, c| if r == c { 1.0 } else { 0.0 }),
            prep_outcome_weights: prep_w,
            meas_outcome_weights: meas_w,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("u", &self.u), ("v", &self.v)] {
            if w.iter().any(|x| !(*x >= 0.0)) {
                return Err(Error::Domain(format!("{name} has negative weights")));
            }
            for r in 0..w.nrows() {
                let s = w.row(r).sum();
                if (s - 1.0).abs() > 1e-12 {
                    return Err(Error::Domain(format!("row {r} of {name} sums to {s}")));
                }
            }
        }
        if self.prep_outcome_weights.len() != self.u.nrows() {
            return Err(Error::Shape("one preparation outcome weight per row of u".into()));
        }
        if self.meas_outcome_weights.len() != self.v.nrows() {
            return Err(Error::Shape("one measurement outcome weight per row of v".into()));
        }
        if [self.u.nrows(), self.v.nrows(), self.u.ncols(), self.v.ncols()].iter().any(|d| !d.is_multiple_of(2)) {
            return Err(Error::Shape("weights must act on (setting, outcome) pairs".into()));
        }
        Ok(())
    }

    /// Weight of each primary measurement in secondary measurement y,
    /// averaged over the two outcome events.
    pub fn measurement_level(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.v.nrows() / 2, self.v.ncols() / 2, |y, yp| {
            (0..2)
                .flat_map(|b| (0..2).map(move |bp| (b, bp)))
                .map(|(b, bp)| self.v[(2 * y + b, 2 * yp + bp)])
                .sum::<f64>()
                / 2.0
        })
    }

    /// Secondary outcome-0 effects on secondary preparations, from a primary
    /// preparation view D: row y is Σ v[(y,0)][(y′,b′)] M_{y′,b′}(P^s).
    pub fn score_matrix(&self, prep_view: &DMatrix<f64>) -> DMatrix<f64> {
        let effects = DMatrix::from_fn(2 * prep_view.nrows(), prep_view.ncols(), |r, c| {
            let p = prep_view[(r / 2, c)];
            if r % 2 == 0 {
                p
            } else {
                1.0 - p
            }
        });
        let v0 = DMatrix::from_fn(self.v.nrows() / 2, self.v.ncols(), |y, c| self.v[(2 * y, c)]);
        v0 * effects * self.u.transpose()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SecondaryResult {
    pub weights: MixingWeights,
    /// Secondary measurements on secondary preparations: rows y of the game,
    /// columns (x, a) of the game; entries p(b = 0 | a; x, y).
    pub secondary: StageDataMatrix,
    /// Secondary preparation events in the primary measurement coordinates.
    pub prep_states: StageDataMatrix,
    /// Secondary measurement events in the primary preparation coordinates.
    pub meas_states: StageDataMatrix,
    pub c_p: f64,
    pub c_m: f64,
    pub oe_residual_p: f64,
    pub oe_residual_m: f64,
}

fn require_side(view: &StageDataMatrix, side: Side) -> Result<()> {
    if view.side != side {
        return Err(Error::Domain(format!("expected a {side:?} view, got {:?}", view.side)));
    }
    Ok(())
}

fn view_column(view: &StageDataMatrix, c: usize) -> DVector<f64> {
    view.entries.column(c).into_owned()
}

/// Mixing weights u and overlap C_P for the preparation view.
pub fn build_secondary_preparations(
    primary: &StageDataMatrix,
    scenario: &Scenario,
    weighting: OeWeighting,
) -> Result<(DMatrix<f64>, f64)> {
    require_side(primary, Side::Prep)?;
    let m = scenario.m;
    if primary.num_events_settings() < m {
        return Err(Error::Shape(format!("view has {} preparation settings, game needs {m}", primary.num_events_settings())));
    }
    let omega = weighting.outcome_weights(primary, m);
    let sol = prep_problem(primary, m, &omega).solve()?;
    Ok((sol.weights, sol.overlap))
}

fn prep_problem(primary: &StageDataMatrix, m: usize, omega: &[f64]) -> OverlapProblem {
    let cols: Vec<DVector<f64>> = (0..primary.cols()).map(|c| view_column(primary, c)).collect();
    OverlapProblem {
        row_setting: (0..2 * m).map(|r| r / 2).collect(),
        diagonal: (0..2 * m).collect(),
        contributions: (0..2 * m).map(|r| cols.iter().map(|col| col * omega[r]).collect()).collect(),
    }
}

/// Mixing weights v and overlap C_M for the measurement view.
pub fn build_secondary_measurements(
    primary: &StageDataMatrix,
    scenario: &Scenario,
    weighting: OeWeighting,
) -> Result<(DMatrix<f64>, f64)> {
    require_side(primary, Side::Meas)?;
    let n = scenario.n;
    if primary.num_events_settings() < n {
        return Err(Error::Shape(format!("view has {} measurement settings, game needs {n}", primary.num_events_settings())));
    }
    let omega = weighting.outcome_weights(primary, n);
    let sol = meas_problem(primary, n, &omega).solve()?;
    Ok((sol.weights, sol.overlap))
}

fn meas_problem(primary: &StageDataMatrix, n: usize, omega: &[f64]) -> OverlapProblem {
    prep_problem(primary, n, omega)
}

/// Both LPs plus the resulting secondary matrices.
pub fn build_secondary(
    prep_primary: &StageDataMatrix,
    meas_primary: &StageDataMatrix,
    scenario: &Scenario,
    weighting: OeWeighting,
) -> Result<SecondaryResult> {
    require_side(prep_primary, Side::Prep)?;
    require_side(meas_primary, Side::Meas)?;
    if prep_primary.rows() != meas_primary.num_events_settings() || meas_primary.rows() != prep_primary.num_events_settings() {
        return Err(Error::Shape("preparation and measurement views describe different setting sets".into()));
    }
    let (m, n) = (scenario.m, scenario.n);
    let prep_w = weighting.outcome_weights(prep_primary, m);
    let meas_w = weighting.outcome_weights(meas_primary, n);
    let (sol_p, sol_m) = rayon::join(
        || prep_problem(prep_primary, m, &prep_w).solve(),
        || meas_problem(meas_primary, n, &meas_w).solve(),
    );
    let (sol_p, sol_m) = (sol_p?, sol_m?);
    let weights = MixingWeights {
        u: sol_p.weights,
        v: sol_m.weights,
        prep_outcome_weights: prep_w,
        meas_outcome_weights: meas_w,
    };
    let prep_entries = &prep_primary.entries * weights.u.transpose();
    let meas_entries = &meas_primary.entries * weights.v.transpose();
    let score_entries = weights.score_matrix(&prep_primary.entries);
    let secondary_view = |side, entries: DMatrix<f64>, marginals: &[f64]| StageDataMatrix {
        stage: Stage::Secondary,
        side,
        entries: entries.map(|e| e.clamp(0.0, 1.0)),
        sigma: None,
        marginals: marginals.to_vec(),
        cond_counts: None,
    };
    let prep_states = secondary_view(Side::Prep, prep_entries, &weights.prep_outcome_weights);
    let meas_states = secondary_view(Side::Meas, meas_entries, &weights.meas_outcome_weights);
    let secondary = secondary_view(Side::Prep, score_entries, &weights.prep_outcome_weights);
    Ok(SecondaryResult {
        oe_residual_p: oe_residual(&prep_states, m, OeWeighting::Empirical)?,
        oe_residual_m: oe_residual(&meas_states, n, OeWeighting::Empirical)?,
        c_p: sol_p.overlap,
        c_m: sol_m.overlap,
        weights,
        secondary,
        prep_states,
        meas_states,
    })
}

/// Secondary joint tensor over the game settings:
/// p^s(a, b | x, y) = ω(a|x) · s(b | a; x, y), with s the secondary effects of
/// [`MixingWeights::score_matrix`] on the preparation view of `tensor_primary`.
pub fn apply_secondary(tensor_primary: &JointProbabilityTensor, weights: &MixingWeights) -> Result<JointProbabilityTensor> {
    weights.validate()?;
    let (prep, _) = probabilities_to_views(tensor_primary);
    if weights.u.ncols() != prep.cols() || weights.v.ncols() != 2 * prep.rows() {
        return Err(Error::Shape(format!(
            "weights act on {}x{} primaries, tensor has {}x{} settings",
            weights.u.ncols() / 2,
            weights.v.ncols() / 2,
            prep.num_events_settings(),
            prep.rows()
        )));
    }
    let s = weights.score_matrix(&prep.entries);
    let view = StageDataMatrix {
        stage: Stage::Secondary,
        side: Side::Prep,
        entries: s,
        sigma: None,
        marginals: weights.prep_outcome_weights.clone(),
        cond_counts: None,
    };
    view.to_tensor(Provenance::Processed { stage: Stage::Secondary, run: None })
}

/// Largest coordinate-wise disagreement between outcome-averaged columns of
/// the first `settings` settings. `Empirical` averages with the matrix's own
/// marginals.
pub fn oe_residual(view: &StageDataMatrix, settings: usize, weighting: OeWeighting) -> Result<f64> {
    if settings > view.num_events_settings() {
        return Err(Error::Shape(format!("{settings} settings requested, view has {}", view.num_events_settings())));
    }
    let w = weighting.outcome_weights(view, settings);
    let avgs: Vec<DVector<f64>> = (0..settings)
        .map(|s| view_column(view, 2 * s) * w[2 * s] + view_column(view, 2 * s + 1) * w[2 * s + 1])
        .collect();
    Ok(max_spread(&avgs))
}

/// `oe_residual` of one side of a joint tensor, over the game settings.
pub fn tensor_oe_residual(
    tensor: &JointProbabilityTensor,
    scenario: &Scenario,
    side: Side,
    weighting: OeWeighting,
) -> Result<f64> {
    let (prep, meas) = probabilities_to_views(tensor);
    match side {
        Side::Prep => oe_residual(&prep, scenario.m.min(prep.num_events_settings()), weighting),
        Side::Meas => oe_residual(&meas, scenario.n.min(meas.num_events_settings()), weighting),
    }
}
