//! Scoring the (m,n) communication game from a joint probability tensor.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expsim::Stage;
use crate::qcore::{joint_table, Scenario, TwoQubitState};

/// Required relation between the two outputs for one setting pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Target {
    Equal,
    Differ,
}

/// Outputs must differ iff x + y = max(m, n) + 1 (settings 1-indexed).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WinRule {
    pub m: usize,
    pub n: usize,
}

impl WinRule {
    pub fn new(m: usize, n: usize) -> Self {
        Self { m, n }
    }

    /// Target for 1-indexed game settings.
    pub fn target(&self, x: usize, y: usize) -> Result<Target> {
        if x == 0 || x > self.m || y == 0 || y > self.n {
            return Err(Error::Domain(format!(
                "setting pair ({x},{y}) is not a game pair of the ({},{}) scenario",
                self.m, self.n
            )));
        }
        if x + y == self.m.max(self.n) + 1 {
            Ok(Target::Differ)
        } else {
            Ok(Target::Equal)
        }
    }

    /// Target for 0-indexed settings. Panics outside the game range.
    pub fn target_index(&self, x: usize, y: usize) -> Target {
        self.target(x + 1, y + 1).expect("game setting index out of range")
    }

    pub fn transposed(&self) -> WinRule {
        WinRule::new(self.n, self.m)
    }
}

/// 1-indexed convenience form of [`WinRule::target`].
pub fn win_condition(x: usize, y: usize, m: usize, n: usize) -> Result<Target> {
    WinRule::new(m, n).target(x, y)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Provenance {
    Exact,
    Empirical { run: usize },
    Processed { stage: Stage, run: Option<usize> },
}

/// p(a, b | x, y) over every setting pair, tomography supplements included.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointProbabilityTensor {
    nx: usize,
    ny: usize,
    cells: Vec<[[f64; 2]; 2]>,
    pub provenance: Provenance,
}

impl JointProbabilityTensor {
    /// `cells` is indexed `x * ny + y`, each cell `[a][b]`.
    pub fn new(nx: usize, ny: usize, cells: Vec<[[f64; 2]; 2]>, provenance: Provenance) -> Result<Self> {
        if cells.len() != nx * ny {
            return Err(Error::Shape(format!("expected {} setting pairs, got {}", nx * ny, cells.len())));
        }
        for (i, c) in cells.iter().enumerate() {
            let (x, y) = (i / ny + 1, i % ny + 1);
            let mut total = 0.0;
            for row in c {
                for &v in row {
                    if !(0.0..=1.0).contains(&v) || !v.is_finite() {
                        return Err(Error::Data(format!("probability {v} out of range at pair ({x},{y})")));
                    }
                    total += v;
                }
            }
            if (total - 1.0).abs() > 1e-9 {
                return Err(Error::Data(format!("pair ({x},{y}) sums to {total}, not 1")));
            }
        }
        Ok(Self { nx, ny, cells, provenance })
    }

    /// Born-rule tensor for every direction pair of `scenario`.
    pub fn exact(state: &TwoQubitState, scenario: &Scenario) -> Result<Self> {
        let mut cells = Vec::with_capacity(scenario.prep_dirs.len() * scenario.meas_dirs.len());
        for a_dir in &scenario.prep_dirs {
            for b_dir in &scenario.meas_dirs {
                cells.push(joint_table(state, a_dir, b_dir)?);
            }
        }
        Self::new(scenario.prep_dirs.len(), scenario.meas_dirs.len(), cells, Provenance::Exact)
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    /// 0-indexed cell `[a][b]`.
    pub fn cell(&self, x: usize, y: usize) -> &[[f64; 2]; 2] {
        &self.cells[x * self.ny + y]
    }

    pub fn p(&self, x: usize, y: usize, a: usize, b: usize) -> f64 {
        self.cell(x, y)[a][b]
    }

    /// p(a | x, y)
    pub fn marginal_a(&self, x: usize, y: usize, a: usize) -> f64 {
        let c = self.cell(x, y);
        c[a][0] + c[a][1]
    }

    /// p(b | x, y)
    pub fn marginal_b(&self, x: usize, y: usize, b: usize) -> f64 {
        let c = self.cell(x, y);
        c[0][b] + c[1][b]
    }

    /// Probability that the outputs satisfy `target` for pair (x, y), 0-indexed.
    pub fn win_probability(&self, x: usize, y: usize, target: Target) -> f64 {
        let c = self.cell(x, y);
        let equal = c[0][0] + c[1][1];
        match target {
            Target::Equal => equal,
            Target::Differ => c[0][1] + c[1][0],
        }
    }

    /// Convex combination Σ wᵢ Tᵢ of tensors of equal shape.
    pub fn mixture(parts: &[(f64, &JointProbabilityTensor)]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::Domain("empty mixture".into()))?.1;
        let mut cells = vec![[[0.0; 2]; 2]; first.cells.len()];
        for (w, t) in parts {
            if t.nx != first.nx || t.ny != first.ny {
                return Err(Error::Shape("mixture of tensors with different shapes".into()));
            }
            for (acc, c) in cells.iter_mut().zip(&t.cells) {
                for a in 0..2 {
                    for b in 0..2 {
                        acc[a][b] += w * c[a][b];
                    }
                }
            }
        }
        Self::new(first.nx, first.ny, cells, first.provenance)
    }
}

/// P = (1/mn) Σ over game pairs of the probability of meeting the pair's target.
pub fn success_probability(tensor: &JointProbabilityTensor, rule: &WinRule) -> Result<f64> {
    if tensor.nx < rule.m || tensor.ny < rule.n {
        let (x, y) = if tensor.nx < rule.m { (tensor.nx + 1, 1) } else { (1, tensor.ny + 1) };
        return Err(Error::Data(format!("tensor has no data for game pair ({x},{y})")));
    }
    let mut total = 0.0;
    for x in 0..rule.m {
        for y in 0..rule.n {
            total += tensor.win_probability(x, y, rule.target_index(x, y));
        }
    }
    Ok(total / (rule.m * rule.n) as f64)
}

/// β = 2mn(P − 1/2).
pub fn bell_parameter(tensor: &JointProbabilityTensor, rule: &WinRule) -> Result<f64> {
    let p = success_probability(tensor, rule)?;
    Ok(2.0 * (rule.m * rule.n) as f64 * (p - 0.5))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RegionLabel {
    /// P ≤ universal non-contextual bound.
    LocalAndNoncontextual,
    /// Universal non-contextual bound < P ≤ local bound.
    NonTrivialContextual,
    /// P > local bound.
    TrivialContextual,
}

impl fmt::Display for RegionLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            RegionLabel::LocalAndNoncontextual => "LocalAndNoncontextual",
            RegionLabel::NonTrivialContextual => "NonTrivialContextual",
            RegionLabel::TrivialContextual => "TrivialContextual",
        };
        f.write_str(s)
    }
}

/// Boundaries belong to the lower region.
pub fn classify_region(p: f64, scenario: &Scenario) -> Result<RegionLabel> {
    let bounds = scenario
        .bounds
        .ok_or_else(|| Error::Domain(format!("bounds unavailable for the ({},{}) scenario", scenario.m, scenario.n)))?;
    Ok(if p <= bounds.unc {
        RegionLabel::LocalAndNoncontextual
    } else if p <= bounds.local {
        RegionLabel::NonTrivialContextual
    } else {
        RegionLabel::TrivialContextual
    })
}

/// Exchange the preparer and measurer: p'[y][x][b][a] = p[x][y][a][b].
pub fn swap_roles(tensor: &JointProbabilityTensor) -> JointProbabilityTensor {
    let (nx, ny) = (tensor.ny, tensor.nx);
    let mut cells = Vec::with_capacity(nx * ny);
    for x in 0..nx {
        for y in 0..ny {
            let c = tensor.cell(y, x);
            cells.push([[c[0][0], c[1][0]], [c[0][1], c[1][1]]]);
        }
    }
    JointProbabilityTensor { nx, ny, cells, provenance: tensor.provenance }
}
