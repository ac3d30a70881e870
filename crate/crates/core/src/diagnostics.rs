//! Bloch reconstruction of conditional states, equivalence distances,
//! no-signaling residuals and across-run statistics.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expsim::StageDataMatrix;
use crate::gamescore::JointProbabilityTensor;
use crate::qcore::{BlochVector, Scenario};

/// How the two outcome states of a setting are averaged into its mass center.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MassWeighting {
    /// Weighted by the outcome probabilities carried with the data.
    #[default]
    Probability,
    /// Plain average of the two outcome states.
    Uniform,
}

impl std::fmt::Display for MassWeighting {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MassWeighting::Probability => "probability",
            MassWeighting::Uniform => "uniform",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlochFit {
    pub vector: BlochVector,
    /// Root-mean-square residual of the linear model in probability units.
    pub residual: f64,
}

/// Least-squares Bloch vector r from p_k = (1 + m̂_k·r)/2.
pub fn reconstruct_bloch(probs: &[f64], dirs: &[BlochVector]) -> Result<BlochFit> {
    if probs.len() != dirs.len() {
        return Err(Error::Shape(format!("{} probabilities for {} directions", probs.len(), dirs.len())));
    }
    let k = dirs.len();
    let a = DMatrix::from_fn(k, 3, |i, j| dirs[i].as_array()[j]);
    let rhs = DVector::from_fn(k, |i, _| 2.0 * probs[i] - 1.0);
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    if k < 3 || svd.singular_values.iter().filter(|s| **s > 1e-9 * smax.max(1e-300)).count() < 3 {
        return Err(Error::Domain("measurement directions do not span three dimensions".into()));
    }
    let r = svd.solve(&rhs, 0.0).map_err(|e| Error::Domain(e.to_string()))?;
    let resid = (&a * &r - &rhs) / 2.0;
    Ok(BlochFit {
        vector: BlochVector::new(r[0], r[1], r[2]),
        residual: (resid.norm_squared() / k as f64).sqrt(),
    })
}

/// Distance √Tr[(ρ₁−ρ₂)²] between qubit states, which is |r₁ − r₂|/√2.
pub fn trace_distance(r1: &BlochVector, r2: &BlochVector) -> f64 {
    r1.sub(r2).norm() / std::f64::consts::SQRT_2
}

/// Reconstructed outcome states of each setting and their mass centers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionalStateSet {
    pub states: Vec<[BlochVector; 2]>,
    pub weights: Vec<[f64; 2]>,
    pub residuals: Vec<[f64; 2]>,
    pub mass_centers: Vec<BlochVector>,
}

impl ConditionalStateSet {
    pub fn from_states(states: Vec<[BlochVector; 2]>, weights: Vec<[f64; 2]>) -> Result<Self> {
        if states.len() != weights.len() {
            return Err(Error::Shape("one weight pair per setting".into()));
        }
        let mass_centers = states
            .iter()
            .zip(&weights)
            .map(|(s, w)| s[0].scale(w[0]).add(&s[1].scale(w[1])))
            .collect();
        let residuals = vec![[0.0; 2]; states.len()];
        Ok(Self { states, weights, residuals, mass_centers })
    }

    /// States of the first `settings` settings of a view, reconstructed
    /// against the counterpart's directions (one per view row).
    pub fn from_view(
        view: &StageDataMatrix,
        counterpart_dirs: &[BlochVector],
        settings: usize,
        weighting: MassWeighting,
    ) -> Result<Self> {
        if view.rows() != counterpart_dirs.len() {
            return Err(Error::Shape(format!("view has {} rows, {} directions given", view.rows(), counterpart_dirs.len())));
        }
        if settings > view.num_events_settings() {
            return Err(Error::Shape(format!("{settings} settings requested, view has {}", view.num_events_settings())));
        }
        let mut states = Vec::with_capacity(settings);
        let mut weights = Vec::with_capacity(settings);
        let mut residuals = Vec::with_capacity(settings);
        for s in 0..settings {
            let f0 = reconstruct_bloch(&view.column(2 * s), counterpart_dirs)?;
            let f1 = reconstruct_bloch(&view.column(2 * s + 1), counterpart_dirs)?;
            states.push([f0.vector, f1.vector]);
            residuals.push([f0.residual, f1.residual]);
            weights.push(match weighting {
                MassWeighting::Uniform => [0.5, 0.5],
                MassWeighting::Probability => {
                    let (w0, w1) = (view.marginals[2 * s], view.marginals[2 * s + 1]);
                    if w0 + w1 > 0.0 {
                        [w0 / (w0 + w1), w1 / (w0 + w1)]
                    } else {
                        [0.5, 0.5]
                    }
                }
            });
        }
        let mut set = Self::from_states(states, weights)?;
        set.residuals = residuals;
        Ok(set)
    }

    /// Sum of distances between mass centers over unordered setting pairs.
    pub fn summed_distance(&self) -> f64 {
        let c = &self.mass_centers;
        let mut total = 0.0;
        for i in 0..c.len() {
            for j in i + 1..c.len() {
                total += trace_distance(&c[i], &c[j]);
            }
        }
        total
    }
}

/// ΔP of a set of preparation states.
pub fn delta_p(states: &ConditionalStateSet) -> f64 {
    states.summed_distance()
}

/// ΔM of a set of measurement states.
pub fn delta_m(states: &ConditionalStateSet) -> f64 {
    states.summed_distance()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignalDirection {
    /// Does the preparer's setting change the measurer's marginal?
    PrepToMeas,
    /// Does the measurer's setting change the preparer's marginal?
    MeasToPrep,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoSignalingCell {
    pub direction: SignalDirection,
    /// The setting held fixed (y for prep→meas, x for meas→prep), 0-based.
    pub fixed: usize,
    /// Outcome of the party whose marginal is compared.
    pub outcome: usize,
    pub setting_a: usize,
    pub setting_b: usize,
    pub residual: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ResidualSummary {
    pub max: f64,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoSignalingReport {
    pub prep_to_meas: ResidualSummary,
    pub meas_to_prep: ResidualSummary,
    pub cells: Vec<NoSignalingCell>,
}

impl NoSignalingReport {
    pub fn max(&self) -> f64 {
        self.prep_to_meas.max.max(self.meas_to_prep.max)
    }

    /// Mean over every compared cell of both directions.
    pub fn mean(&self) -> f64 {
        if self.cells.is_empty() {
            0.0
        } else {
            self.cells.iter().map(|c| c.residual).sum::<f64>() / self.cells.len() as f64
        }
    }
}

fn summarize(cells: &[NoSignalingCell], direction: SignalDirection) -> ResidualSummary {
    let vals: Vec<f64> = cells.iter().filter(|c| c.direction == direction).map(|c| c.residual).collect();
    if vals.is_empty() {
        return ResidualSummary::default();
    }
    ResidualSummary {
        max: vals.iter().cloned().fold(0.0, f64::max),
        mean: vals.iter().sum::<f64>() / vals.len() as f64,
    }
}

/// Marginal discrepancies across the other party's settings.
pub fn nosignaling_residuals(tensor: &JointProbabilityTensor) -> NoSignalingReport {
    let (nx, ny) = (tensor.nx(), tensor.ny());
    let mut cells = Vec::new();
    for y in 0..ny {
        for b in 0..2 {
            for x in 0..nx {
                for xp in x + 1..nx {
                    cells.push(NoSignalingCell {
                        direction: SignalDirection::PrepToMeas,
                        fixed: y,
                        outcome: b,
                        setting_a: x,
                        setting_b: xp,
                        residual: (tensor.marginal_b(x, y, b) - tensor.marginal_b(xp, y, b)).abs(),
                    });
                }
            }
        }
    }
    for x in 0..nx {
        for a in 0..2 {
            for y in 0..ny {
                for yp in y + 1..ny {
                    cells.push(NoSignalingCell {
                        direction: SignalDirection::MeasToPrep,
                        fixed: x,
                        outcome: a,
                        setting_a: y,
                        setting_b: yp,
                        residual: (tensor.marginal_a(x, y, a) - tensor.marginal_a(x, yp, a)).abs(),
                    });
                }
            }
        }
    }
    NoSignalingReport {
        prep_to_meas: summarize(&cells, SignalDirection::PrepToMeas),
        meas_to_prep: summarize(&cells, SignalDirection::MeasToPrep),
        cells,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunStatistics {
    pub runs: usize,
    pub mean_p: f64,
    /// Sample standard deviation (n − 1 denominator).
    pub std_p: f64,
    pub mean_beta: f64,
    pub std_beta: f64,
    /// (mean P − non-contextual bound) / std; ±∞ when std is zero.
    #[serde(with = "lossless_f64")]
    pub sigma_violation: f64,
    /// Set when std = 0 made `sigma_violation` infinite.
    pub degenerate_std: bool,
}

pub fn run_statistics(per_run_p: &[f64], scenario: &Scenario) -> Result<RunStatistics> {
    if per_run_p.len() < 2 {
        return Err(Error::Domain(format!("run statistics need at least 2 runs, got {}", per_run_p.len())));
    }
    let bound = scenario
        .bounds
        .ok_or_else(|| Error::Domain("bounds unavailable for a custom scenario".into()))?
        .unc;
    let n = per_run_p.len() as f64;
    let mean = per_run_p.iter().sum::<f64>() / n;
    let var = per_run_p.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let std = var.sqrt();
    let scale = scenario.beta_from_success(1.0) - scenario.beta_from_success(0.0);
    let diff = mean - bound;
    let (sigma_violation, degenerate_std) = if std > 0.0 {
        (diff / std, false)
    } else if diff < 0.0 {
        (f64::NEG_INFINITY, true)
    } else {
        (f64::INFINITY, true)
    };
    Ok(RunStatistics {
        runs: per_run_p.len(),
        mean_p: mean,
        std_p: std,
        mean_beta: scenario.beta_from_success(mean),
        std_beta: std * scale,
        sigma_violation,
        degenerate_std,
    })
}

/// JSON has no infinities; non-finite values travel as strings.
pub mod lossless_f64 {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if v.is_nan() {
            s.serialize_str("nan")
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) => match t.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                other => Err(serde::de::Error::custom(format!("not a number: {other}"))),
            },
        }
    }
}
