//! Two-qubit state family, measurement directions and the closed-form game
//! predictions for the (3,3) and (4,3) scenarios.
//!
//! Party A (the preparer) is the first tensor factor, party B (the measurer)
//! the second. The computational basis is |H⟩ = |0⟩ (σ₃ = +1) and
//! |V⟩ = |1⟩ (σ₃ = −1).

use std::f64::consts::FRAC_PI_2;
use std::fmt;
use std::str::FromStr;

use nalgebra::{Matrix4, SymmetricEigen};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gamescore::WinRule;

/// Tolerance for algebraic identities (unit norms, traces, hermiticity).
pub const ALGEBRAIC_TOL: f64 = 1e-12;
/// Tolerance for comparisons against closed-form predictions.
pub const CLOSED_FORM_TOL: f64 = 1e-9;

const C0: Complex64 = Complex64::new(0.0, 0.0);
const C1: Complex64 = Complex64::new(1.0, 0.0);
const CI: Complex64 = Complex64::new(0.0, 1.0);

type Mat2 = [[Complex64; 2]; 2];
type Mat4 = [[Complex64; 4]; 4];

/// Real three-vector on (or inside) the Bloch sphere.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BlochVector {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl BlochVector {
    pub const ZERO: BlochVector = BlochVector::new(0.0, 0.0, 0.0);

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn x_axis() -> Self {
        Self::new(1.0, 0.0, 0.0)
    }

    pub fn y_axis() -> Self {
        Self::new(0.0, 1.0, 0.0)
    }

    pub fn z_axis() -> Self {
        Self::new(0.0, 0.0, 1.0)
    }

    pub fn dot(&self, other: &BlochVector) -> f64 {
        self.x * other.x + self.y * other.y + self.z * other.z
    }

    pub fn cross(&self, other: &BlochVector) -> BlochVector {
        BlochVector::new(
            self.y * other.z - self.z * other.y,
            self.z * other.x - self.x * other.z,
            self.x * other.y - self.y * other.x,
        )
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn scale(&self, s: f64) -> BlochVector {
        BlochVector::new(self.x * s, self.y * s, self.z * s)
    }

    pub fn add(&self, other: &BlochVector) -> BlochVector {
        BlochVector::new(self.x + other.x, self.y + other.y, self.z + other.z)
    }

    pub fn sub(&self, other: &BlochVector) -> BlochVector {
        BlochVector::new(self.x - other.x, self.y - other.y, self.z - other.z)
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn from_array(v: [f64; 3]) -> Self {
        Self::new(v[0], v[1], v[2])
    }

    /// Unit vector along `self`; zero input is a domain error.
    pub fn normalized(&self) -> Result<BlochVector> {
        let n = self.norm();
        if n == 0.0 || !n.is_finite() {
            return Err(Error::Domain("cannot normalize a zero vector".into()));
        }
        Ok(self.scale(1.0 / n))
    }

    pub fn is_unit(&self) -> bool {
        (self.norm() - 1.0).abs() <= ALGEBRAIC_TOL
    }

    fn require_unit(&self, what: &str) -> Result<()> {
        if self.is_unit() {
            Ok(())
        } else {
            Err(Error::Domain(format!(
                "{what} must be a unit vector, got norm {}",
                self.norm()
            )))
        }
    }

    /// 2×2 operator n·σ.
    fn pauli_dot(&self) -> Mat2 {
        [
            [Complex64::new(self.z, 0.0), Complex64::new(self.x, -self.y)],
            [Complex64::new(self.x, self.y), Complex64::new(-self.z, 0.0)],
        ]
    }
}

impl fmt::Display for BlochVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({:.6}, {:.6}, {:.6})", self.x, self.y, self.z)
    }
}

/// Binary measurement outcome. Label 0 carries sign +1, label 1 sign −1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Outcome {
    Zero,
    One,
}

impl Outcome {
    pub const ALL: [Outcome; 2] = [Outcome::Zero, Outcome::One];

    pub fn index(self) -> usize {
        match self {
            Outcome::Zero => 0,
            Outcome::One => 1,
        }
    }

    /// (−1)^a
    pub fn sign(self) -> f64 {
        match self {
            Outcome::Zero => 1.0,
            Outcome::One => -1.0,
        }
    }

    pub fn from_index(i: usize) -> Result<Outcome> {
        match i {
            0 => Ok(Outcome::Zero),
            1 => Ok(Outcome::One),
            _ => Err(Error::Domain(format!("outcome label must be 0 or 1, got {i}"))),
        }
    }

    pub fn flip(self) -> Outcome {
        match self {
            Outcome::Zero => Outcome::One,
            Outcome::One => Outcome::Zero,
        }
    }
}

/// Density operator of the shared photon pair.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoQubitState {
    rho: Mat4,
    theta: Option<f64>,
}

impl TwoQubitState {
    /// Validates an arbitrary 4×4 density matrix.
    pub fn from_density(rho: [[Complex64; 4]; 4]) -> Result<Self> {
        let state = Self { rho, theta: None };
        state.validate()?;
        Ok(state)
    }

    pub fn rho(&self) -> &[[Complex64; 4]; 4] {
        &self.rho
    }

    pub fn theta(&self) -> Option<f64> {
        self.theta
    }

    pub fn trace(&self) -> Complex64 {
        (0..4).map(|i| self.rho[i][i]).sum()
    }

    pub fn hermiticity_defect(&self) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..4 {
            for j in 0..4 {
                worst = worst.max((self.rho[i][j] - self.rho[j][i].conj()).norm());
            }
        }
        worst
    }

    pub fn min_eigenvalue(&self) -> f64 {
        let m = Matrix4::from_fn(|i, j| self.rho[i][j]);
        let eig = SymmetricEigen::new(m);
        eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    fn validate(&self) -> Result<()> {
        let herm = self.hermiticity_defect();
        if herm > ALGEBRAIC_TOL {
            return Err(Error::Domain(format!("density matrix not Hermitian (defect {herm:e})")));
        }
        let tr = self.trace();
        if (tr.re - 1.0).abs() > ALGEBRAIC_TOL || tr.im.abs() > ALGEBRAIC_TOL {
            return Err(Error::Domain(format!("density matrix trace {tr} ≠ 1")));
        }
        let min_eig = self.min_eigenvalue();
        if min_eig < -1e-10 {
            return Err(Error::Domain(format!("density matrix not PSD (min eigenvalue {min_eig:e})")));
        }
        Ok(())
    }

    /// Tr[ρ (O_A ⊗ O_B)].
    fn expect_product(&self, op_a: &Mat2, op_b: &Mat2) -> Complex64 {
        let op = kron(op_a, op_b);
        let mut acc = C0;
        for i in 0..4 {
            for k in 0..4 {
                acc += self.rho[i][k] * op[k][i];
            }
        }
        acc
    }

    /// Two-point correlator ⟨(a·σ) ⊗ (b·σ)⟩.
    pub fn correlator(&self, a_dir: &BlochVector, b_dir: &BlochVector) -> f64 {
        self.expect_product(&a_dir.pauli_dot(), &b_dir.pauli_dot()).re
    }

    /// Bloch vector of party B's reduced state.
    pub fn reduced_bloch_b(&self) -> BlochVector {
        bloch_of(&self.partial_trace_a(&identity2()))
    }

    /// Bloch vector of party A's reduced state.
    pub fn reduced_bloch_a(&self) -> BlochVector {
        let id = identity2();
        let comps = [BlochVector::x_axis(), BlochVector::y_axis(), BlochVector::z_axis()]
            .map(|axis| self.expect_product(&axis.pauli_dot(), &id).re);
        BlochVector::from_array(comps)
    }

    /// Tr_A[ρ (O_A ⊗ I)] as a 2×2 operator on B.
    fn partial_trace_a(&self, op_a: &Mat2) -> Mat2 {
        let mut out = [[C0; 2]; 2];
        // ρ(O⊗I): indices (a b),(a' b'); trace over a.
        for b in 0..2 {
            for bp in 0..2 {
                let mut acc = C0;
                for a in 0..2 {
                    for k in 0..2 {
                        acc += self.rho[2 * a + b][2 * k + bp] * op_a[k][a];
                    }
                }
                out[b][bp] = acc;
            }
        }
        out
    }

    /// Same state with the two parties exchanged.
    pub fn swapped(&self) -> TwoQubitState {
        let perm = [0usize, 2, 1, 3];
        let mut rho = [[C0; 4]; 4];
        for i in 0..4 {
            for j in 0..4 {
                rho[i][j] = self.rho[perm[i]][perm[j]];
            }
        }
        TwoQubitState { rho, theta: self.theta }
    }
}

fn identity2() -> Mat2 {
    [[C1, C0], [C0, C1]]
}

fn kron(a: &Mat2, b: &Mat2) -> Mat4 {
    let mut out = [[C0; 4]; 4];
    for i in 0..2 {
        for j in 0..2 {
            for k in 0..2 {
                for l in 0..2 {
                    out[2 * i + k][2 * j + l] = a[i][j] * b[k][l];
                }
            }
        }
    }
    out
}

/// Projector (I + s n·σ)/2 for outcome sign s.
fn projector(dir: &BlochVector, outcome: Outcome) -> Mat2 {
    let s = outcome.sign();
    let nd = dir.pauli_dot();
    let mut out = [[C0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            let id = if i == j { 1.0 } else { 0.0 };
            out[i][j] = (Complex64::new(id, 0.0) + nd[i][j] * s) * 0.5;
        }
    }
    out
}

/// Bloch vector of a (possibly subnormalised) 2×2 operator, r_i = Tr[σ_i M].
fn bloch_of(m: &Mat2) -> BlochVector {
    let x = (m[0][1] + m[1][0]).re;
    let y = (CI * (m[0][1] - m[1][0])).re;
    let z = (m[0][0] - m[1][1]).re;
    BlochVector::new(x, y, z)
}

/// (1 − ε)|ψ(θ)⟩⟨ψ(θ)| + ε·I/4 with ψ(θ) = cos θ|HH⟩ + sin θ|VV⟩.
pub fn make_state(theta: f64, white_noise: f64) -> Result<TwoQubitState> {
    if !(0.0..=FRAC_PI_2).contains(&theta) {
        return Err(Error::Domain(format!("theta must lie in [0, π/2], got {theta}")));
    }
    if !(0.0..=1.0).contains(&white_noise) {
        return Err(Error::Domain(format!("white noise must lie in [0, 1], got {white_noise}")));
    }
    let psi = [theta.cos(), 0.0, 0.0, theta.sin()];
    let mut rho = [[C0; 4]; 4];
    for i in 0..4 {
        for j in 0..4 {
            let pure = psi[i] * psi[j];
            let mixed = if i == j { 0.25 } else { 0.0 };
            rho[i][j] = Complex64::new((1.0 - white_noise) * pure + white_noise * mixed, 0.0);
        }
    }
    Ok(TwoQubitState { rho, theta: Some(theta) })
}

/// Born-rule probability p(a, b) for A measuring along `a_dir` and B along `b_dir`.
pub fn joint_probability(
    state: &TwoQubitState,
    a_dir: &BlochVector,
    a: Outcome,
    b_dir: &BlochVector,
    b: Outcome,
) -> Result<f64> {
    a_dir.require_unit("preparation direction")?;
    b_dir.require_unit("measurement direction")?;
    let p = state.expect_product(&projector(a_dir, a), &projector(b_dir, b)).re;
    Ok(p.clamp(0.0, 1.0))
}

/// The 2×2 table p(a, b) for one setting pair, indexed `[a][b]`.
pub fn joint_table(state: &TwoQubitState, a_dir: &BlochVector, b_dir: &BlochVector) -> Result<[[f64; 2]; 2]> {
    let mut t = [[0.0; 2]; 2];
    for a in Outcome::ALL {
        for b in Outcome::ALL {
            t[a.index()][b.index()] = joint_probability(state, a_dir, a, b_dir, b)?;
        }
    }
    Ok(t)
}

/// Probability of A's outcome and the Bloch vector of B's conditional state.
///
/// A null outcome (p = 0) yields the zero vector.
pub fn steered_state(state: &TwoQubitState, a_dir: &BlochVector, a: Outcome) -> Result<(f64, BlochVector)> {
    a_dir.require_unit("preparation direction")?;
    let sub = state.partial_trace_a(&projector(a_dir, a));
    let p = (sub[0][0] + sub[1][1]).re;
    if p <= 0.0 {
        return Ok((0.0, BlochVector::ZERO));
    }
    Ok((p, bloch_of(&sub).scale(1.0 / p)))
}

/// Universal non-contextual and local bounds on the success probability.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub unc: f64,
    pub local: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ScenarioKind {
    /// Three preparations, three measurements.
    S33,
    /// Four preparations, three measurements.
    S43,
    Custom,
}

impl ScenarioKind {
    pub fn label(self) -> &'static str {
        match self {
            ScenarioKind::S33 => "33",
            ScenarioKind::S43 => "43",
            ScenarioKind::Custom => "custom",
        }
    }
}

impl fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for ScenarioKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "33" | "3,3" | "(3,3)" => Ok(ScenarioKind::S33),
            "43" | "4,3" | "(4,3)" => Ok(ScenarioKind::S43),
            other => Err(Error::Domain(format!("unknown scenario '{other}' (expected 33 or 43)"))),
        }
    }
}

/// Game settings of one (m,n) scenario.
///
/// `prep_dirs` and `meas_dirs` list the game settings first, followed by the
/// tomography supplement (if any). Both named scenarios carry exactly four
/// directions per party.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub kind: ScenarioKind,
    pub m: usize,
    pub n: usize,
    pub prep_dirs: Vec<BlochVector>,
    pub meas_dirs: Vec<BlochVector>,
    pub bounds: Option<Bounds>,
}

impl Scenario {
    pub fn from_kind(kind: ScenarioKind) -> Result<Scenario> {
        match kind {
            ScenarioKind::S33 => Ok(scenario_33()),
            ScenarioKind::S43 => Ok(scenario_43()),
            ScenarioKind::Custom => Err(Error::Domain("custom scenarios need explicit settings".into())),
        }
    }

    /// Scenario with caller-supplied directions and no known bounds.
    pub fn custom(m: usize, n: usize, prep_dirs: Vec<BlochVector>, meas_dirs: Vec<BlochVector>) -> Result<Scenario> {
        if m == 0 || n == 0 {
            return Err(Error::Domain("m and n must be positive".into()));
        }
        if prep_dirs.len() < m || meas_dirs.len() < n {
            return Err(Error::Domain("fewer directions than game settings".into()));
        }
        for d in prep_dirs.iter().chain(meas_dirs.iter()) {
            d.require_unit("setting direction")?;
        }
        Ok(Scenario { kind: ScenarioKind::Custom, m, n, prep_dirs, meas_dirs, bounds: None })
    }

    pub fn win_rule(&self) -> WinRule {
        WinRule::new(self.m, self.n)
    }

    pub fn num_prep_settings(&self) -> usize {
        self.prep_dirs.len()
    }

    pub fn num_meas_settings(&self) -> usize {
        self.meas_dirs.len()
    }

    /// Closed-form quantum success probability on ψ(θ) with the optimal settings.
    pub fn predicted_success(&self, theta: f64) -> Result<f64> {
        predicted_success(self, theta)
    }

    pub fn beta_from_success(&self, p: f64) -> f64 {
        beta_from_success(self, p)
    }
}

/// (3,3) settings. The measurement list is ordered so that every pair with
/// x + y = 4 is anti-parallel.
pub fn scenario_33() -> Scenario {
    let h = 3f64.sqrt() / 2.0;
    Scenario {
        kind: ScenarioKind::S33,
        m: 3,
        n: 3,
        prep_dirs: vec![
            BlochVector::new(0.0, 0.0, 1.0),
            BlochVector::new(h, 0.0, -0.5),
            BlochVector::new(-h, 0.0, -0.5),
            BlochVector::y_axis(),
        ],
        meas_dirs: vec![
            BlochVector::new(h, 0.0, 0.5),
            BlochVector::new(-h, 0.0, 0.5),
            BlochVector::new(0.0, 0.0, -1.0),
            BlochVector::y_axis(),
        ],
        bounds: Some(Bounds { unc: 13.0 / 18.0, local: 14.0 / 18.0 }),
    }
}

/// (4,3) settings: tetrahedral preparations, Pauli-axis measurements plus σ₂.
pub fn scenario_43() -> Scenario {
    let s = 1.0 / 3f64.sqrt();
    Scenario {
        kind: ScenarioKind::S43,
        m: 4,
        n: 3,
        prep_dirs: vec![
            BlochVector::new(s, s, s),
            BlochVector::new(s, s, -s),
            BlochVector::new(s, -s, s),
            BlochVector::new(-s, s, s),
        ],
        meas_dirs: vec![
            BlochVector::x_axis(),
            BlochVector::new(0.0, -1.0, 0.0),
            BlochVector::z_axis(),
            BlochVector::y_axis(),
        ],
        bounds: Some(Bounds { unc: 2.0 / 3.0, local: 0.75 }),
    }
}

pub fn predicted_success(scenario: &Scenario, theta: f64) -> Result<f64> {
    if !(0.0..=FRAC_PI_2).contains(&theta) {
        return Err(Error::Domain(format!("theta must lie in [0, π/2], got {theta}")));
    }
    let s2 = (2.0 * theta).sin();
    match scenario.kind {
        ScenarioKind::S33 => Ok((4.0 + s2) / 6.0),
        ScenarioKind::S43 => Ok((9.0 + 3f64.sqrt() * (1.0 + 2.0 * s2)) / 18.0),
        ScenarioKind::Custom => Err(Error::Domain("no closed-form prediction for custom scenarios".into())),
    }
}

/// β = 2mn(P − 1/2).
pub fn beta_from_success(scenario: &Scenario, p: f64) -> f64 {
    2.0 * (scenario.m * scenario.n) as f64 * (p - 0.5)
}

/// Inverse of [`beta_from_success`].
pub fn success_from_beta(scenario: &Scenario, beta: f64) -> f64 {
    0.5 + beta / (2.0 * (scenario.m * scenario.n) as f64)
}
