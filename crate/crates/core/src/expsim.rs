//! Synthetic coincidence-count experiments, conditional-frequency views and
//! the count-file format.
//!
//! A simulated experiment consists of `runs` independent runs. Within one
//! run every setting direction is rotated by a fixed random perturbation
//! (standing in for wave-plate miscalibration); each setting pair then
//! receives `counts_per_pair` multinomially sampled coincidences.
//!
//! Count files are CSV with header `run,x,y,a,b,count`. Runs and settings
//! are 1-indexed (the tomography supplement is setting 4), outcomes are 0/1
//! and lines starting with `#` are comments. The writer emits
//! `# key=value` comments for the scenario and θ, which the reader restores.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gamescore::{JointProbabilityTensor, Provenance};
use crate::qcore::{joint_table, make_state, BlochVector, Scenario, ScenarioKind};

/// Highest setting index accepted in count files.
pub const MAX_SETTINGS: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    /// Standard deviation (radians) of each tangent component of the per-run
    /// direction perturbation.
    pub angle_jitter_sigma: f64,
    /// White-noise admixture ε of the shared state.
    pub white_noise: f64,
    pub counts_per_pair: u64,
    pub runs: usize,
    pub seed: u64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self {
            angle_jitter_sigma: 1f64.to_radians(),
            white_noise: 0.02,
            counts_per_pair: 10_000,
            runs: 30,
            seed: 7,
        }
    }
}

impl NoiseModel {
    pub fn noiseless(counts_per_pair: u64, runs: usize, seed: u64) -> Self {
        Self { angle_jitter_sigma: 0.0, white_noise: 0.0, counts_per_pair, runs, seed }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.angle_jitter_sigma >= 0.0 && self.angle_jitter_sigma.is_finite()) {
            return Err(Error::Domain(format!("angle jitter must be non-negative, got {}", self.angle_jitter_sigma)));
        }
        if !(0.0..=1.0).contains(&self.white_noise) {
            return Err(Error::Domain(format!("white noise must lie in [0, 1], got {}", self.white_noise)));
        }
        if self.counts_per_pair == 0 {
            return Err(Error::Domain("counts_per_pair must be at least 1".into()));
        }
        if self.runs == 0 {
            return Err(Error::Domain("runs must be at least 1".into()));
        }
        Ok(())
    }

    /// Independent generator for one run.
    pub fn run_rng(&self, run: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(run as u64);
        rng
    }
}

/// c[run][x][y][a][b] coincidence counts.
#[derive(Debug, Clone, PartialEq)]
pub struct JointCountTensor {
    runs: usize,
    nx: usize,
    ny: usize,
    counts_per_pair: u64,
    cells: Vec<[[u64; 2]; 2]>,
    pub scenario: Option<ScenarioKind>,
    pub theta: Option<f64>,
}

impl JointCountTensor {
    /// `cells` is indexed `(run * nx + x) * ny + y`.
    pub fn new(runs: usize, nx: usize, ny: usize, cells: Vec<[[u64; 2]; 2]>) -> Result<Self> {
        if runs == 0 || nx == 0 || ny == 0 {
            return Err(Error::Shape("count tensor needs at least one run and setting".into()));
        }
        if cells.len() != runs * nx * ny {
            return Err(Error::Shape(format!("expected {} pairs, got {}", runs * nx * ny, cells.len())));
        }
        let counts_per_pair = pair_total(&cells[0]);
        for (i, c) in cells.iter().enumerate() {
            let total = pair_total(c);
            if total != counts_per_pair {
                let (run, x, y) = (i / (nx * ny), (i / ny) % nx, i % ny);
                return Err(Error::Data(format!(
                    "pair (run {}, x {}, y {}) has {} counts, expected {}",
                    run + 1,
                    x + 1,
                    y + 1,
                    total,
                    counts_per_pair
                )));
            }
        }
        Ok(Self { runs, nx, ny, counts_per_pair, cells, scenario: None, theta: None })
    }

    pub fn runs(&self) -> usize {
        self.runs
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    pub fn counts_per_pair(&self) -> u64 {
        self.counts_per_pair
    }

    /// 0-indexed cell `[a][b]`.
    pub fn cell(&self, run: usize, x: usize, y: usize) -> &[[u64; 2]; 2] {
        &self.cells[(run * self.nx + x) * self.ny + y]
    }

    fn check_run(&self, run: usize) -> Result<()> {
        if run >= self.runs {
            return Err(Error::Domain(format!("run index {run} out of range (tensor has {} runs)", self.runs)));
        }
        Ok(())
    }

    /// Empirical joint frequencies of one run.
    pub fn frequencies(&self, run: usize) -> Result<JointProbabilityTensor> {
        self.check_run(run)?;
        let n = self.counts_per_pair as f64;
        let mut cells = Vec::with_capacity(self.nx * self.ny);
        for x in 0..self.nx {
            for y in 0..self.ny {
                let c = self.cell(run, x, y);
                cells.push([[c[0][0] as f64 / n, c[0][1] as f64 / n], [c[1][0] as f64 / n, c[1][1] as f64 / n]]);
            }
        }
        JointProbabilityTensor::new(self.nx, self.ny, cells, Provenance::Empirical { run })
    }

    /// Exchange the roles of the two parties.
    pub fn swapped(&self) -> JointCountTensor {
        let mut cells = Vec::with_capacity(self.cells.len());
        for run in 0..self.runs {
            for y in 0..self.ny {
                for x in 0..self.nx {
                    let c = self.cell(run, x, y);
                    cells.push([[c[0][0], c[1][0]], [c[0][1], c[1][1]]]);
                }
            }
        }
        JointCountTensor {
            runs: self.runs,
            nx: self.ny,
            ny: self.nx,
            counts_per_pair: self.counts_per_pair,
            cells,
            scenario: self.scenario,
            theta: self.theta,
        }
    }
}

fn pair_total(c: &[[u64; 2]; 2]) -> u64 {
    c[0][0] + c[0][1] + c[1][0] + c[1][1]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Stage {
    Raw,
    Primary,
    Secondary,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::Raw, Stage::Primary, Stage::Secondary];

    pub fn label(self) -> &'static str {
        match self {
            Stage::Raw => "raw",
            Stage::Primary => "primary",
            Stage::Secondary => "secondary",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Which party's events label the columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Side {
    /// Columns are preparation events (x, a); rows are the measurer's settings.
    Prep,
    /// Columns are measurement events (y, b); rows are the preparer's settings.
    Meas,
}

/// Conditional outcome-0 frequencies of the counterpart party.
///
/// Column `2*s + o` holds the event (setting s, outcome o); row `t` the
/// counterpart setting t. For a preparation view the entry is
/// p(b = 0 | a; x, y), for a measurement view p(a = 0 | b; x, y).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageDataMatrix {
    pub stage: Stage,
    pub side: Side,
    pub entries: DMatrix<f64>,
    /// Standard errors of the entries (raw data only).
    pub sigma: Option<DMatrix<f64>>,
    /// Outcome probability of each column event, p(o | s).
    pub marginals: Vec<f64>,
    /// Conditioning counts behind each entry (count data only).
    pub cond_counts: Option<DMatrix<u64>>,
}

impl StageDataMatrix {
    pub fn rows(&self) -> usize {
        self.entries.nrows()
    }

    pub fn cols(&self) -> usize {
        self.entries.ncols()
    }

    /// Number of settings labelling the columns.
    pub fn num_events_settings(&self) -> usize {
        self.entries.ncols() / 2
    }

    pub fn column(&self, col: usize) -> Vec<f64> {
        self.entries.column(col).iter().copied().collect()
    }

    pub fn sigma_column(&self, col: usize) -> Option<Vec<f64>> {
        self.sigma.as_ref().map(|s| s.column(col).iter().copied().collect())
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows()).map(|r| self.entries.row(r).iter().copied().collect()).collect()
    }

    /// Joint tensor p(a,b|x,y) = p(a|x)·p(b|a;x,y) of a preparation view.
    pub fn to_tensor(&self, provenance: Provenance) -> Result<JointProbabilityTensor> {
        if self.side != Side::Prep {
            return Err(Error::Domain("only preparation views map to a joint tensor".into()));
        }
        let nx = self.num_events_settings();
        let ny = self.rows();
        let mut cells = Vec::with_capacity(nx * ny);
        for x in 0..nx {
            for y in 0..ny {
                let mut c = [[0.0; 2]; 2];
                for a in 0..2 {
                    let w = self.marginals[2 * x + a];
                    let r = self.entries[(y, 2 * x + a)].clamp(0.0, 1.0);
                    c[a][0] = w * r;
                    c[a][1] = w * (1.0 - r);
                }
                cells.push(c);
            }
        }
        JointProbabilityTensor::new(nx, ny, cells, provenance)
    }
}

/// Per-run simulation of the coincidence experiment.
pub fn simulate_counts(theta: f64, scenario: &Scenario, noise: &NoiseModel) -> Result<JointCountTensor> {
    noise.validate()?;
    let state = make_state(theta, noise.white_noise)?;
    let nx = scenario.num_prep_settings();
    let ny = scenario.num_meas_settings();

    let per_run: Vec<Vec<[[u64; 2]; 2]>> = (0..noise.runs)
        .into_par_iter()
        .map(|run| {
            let mut rng = noise.run_rng(run);
            let preps: Vec<BlochVector> = scenario
                .prep_dirs
                .iter()
                .map(|d| jitter_direction(d, noise.angle_jitter_sigma, &mut rng))
                .collect();
            let meass: Vec<BlochVector> = scenario
                .meas_dirs
                .iter()
                .map(|d| jitter_direction(d, noise.angle_jitter_sigma, &mut rng))
                .collect();
            let mut cells = Vec::with_capacity(nx * ny);
            for p in &preps {
                for m in &meass {
                    let probs = joint_table(&state, p, m)?;
                    cells.push(sample_pair(&probs, noise.counts_per_pair, &mut rng));
                }
            }
            Ok(cells)
        })
        .collect::<Result<_>>()?;

    let mut t = JointCountTensor::new(noise.runs, nx, ny, per_run.into_iter().flatten().collect())?;
    t.scenario = Some(scenario.kind);
    t.theta = Some(theta);
    Ok(t)
}

/// Rotate `dir` by a random small angle about a random perpendicular axis.
fn jitter_direction<R: Rng>(dir: &BlochVector, sigma: f64, rng: &mut R) -> BlochVector {
    if sigma == 0.0 {
        return *dir;
    }
    let normal = Normal::new(0.0, sigma).expect("sigma is finite and positive");
    let helper = if dir.x.abs() < 0.9 { BlochVector::x_axis() } else { BlochVector::y_axis() };
    let e1 = dir.cross(&helper).normalized().expect("helper is not parallel to dir");
    let e2 = dir.cross(&e1);
    let (g1, g2) = (normal.sample(rng), normal.sample(rng));
    let delta = e1.scale(g1).add(&e2.scale(g2));
    let angle = delta.norm();
    if angle == 0.0 {
        return *dir;
    }
    let rotated = dir.scale(angle.cos()).add(&delta.scale(angle.sin() / angle));
    rotated.normalized().expect("rotation preserves the norm")
}

/// Multinomial draw over the four (a, b) cells via chained binomials.
fn sample_pair<R: Rng>(probs: &[[f64; 2]; 2], n: u64, rng: &mut R) -> [[u64; 2]; 2] {
    let p = [probs[0][0], probs[0][1], probs[1][0], probs[1][1]];
    let mut out = [0u64; 4];
    let mut remaining = n;
    let mut mass = 1.0;
    for i in 0..3 {
        if remaining == 0 {
            break;
        }
        let q = if mass > 0.0 { (p[i] / mass).clamp(0.0, 1.0) } else { 0.0 };
        let k = Binomial::new(remaining, q).expect("q lies in [0, 1]").sample(rng);
        out[i] = k;
        remaining -= k;
        mass -= p[i];
    }
    out[3] = remaining;
    [[out[0], out[1]], [out[2], out[3]]]
}

/// Binomial standard error floored at 1/(2N).
pub fn binomial_sigma(r: f64, n: u64) -> f64 {
    let n = n as f64;
    (r * (1.0 - r) / n).sqrt().max(0.5 / n)
}

/// Preparation and measurement views of one run of count data.
pub fn counts_to_views(tensor: &JointCountTensor, run: usize) -> Result<(StageDataMatrix, StageDataMatrix)> {
    tensor.check_run(run)?;
    let prep = count_view(tensor, run, Side::Prep)?;
    let meas = count_view(tensor, run, Side::Meas)?;
    Ok((prep, meas))
}

fn count_view(tensor: &JointCountTensor, run: usize, side: Side) -> Result<StageDataMatrix> {
    let (ns, nt) = match side {
        Side::Prep => (tensor.nx, tensor.ny),
        Side::Meas => (tensor.ny, tensor.nx),
    };
    // cell for (event setting s, counterpart setting t) with [event outcome][counterpart outcome]
    let cell = |s: usize, t: usize| -> [[u64; 2]; 2] {
        match side {
            Side::Prep => *tensor.cell(run, s, t),
            Side::Meas => {
                let c = tensor.cell(run, t, s);
                [[c[0][0], c[1][0]], [c[0][1], c[1][1]]]
            }
        }
    };
    let mut entries = DMatrix::zeros(nt, 2 * ns);
    let mut sigma = DMatrix::zeros(nt, 2 * ns);
    let mut cond = DMatrix::zeros(nt, 2 * ns);
    let mut marginals = vec![0.0; 2 * ns];
    for s in 0..ns {
        let mut outcome_totals = [0u64; 2];
        for t in 0..nt {
            let c = cell(s, t);
            for o in 0..2 {
                let n_cond = c[o][0] + c[o][1];
                if n_cond == 0 {
                    let (x, y) = match side {
                        Side::Prep => (s + 1, t + 1),
                        Side::Meas => (t + 1, s + 1),
                    };
                    let who = match side {
                        Side::Prep => "a",
                        Side::Meas => "b",
                    };
                    return Err(Error::Data(format!(
                        "zero conditioning count for {who}={o} at (run {}, x {x}, y {y})",
                        run + 1
                    )));
                }
                let r = c[o][0] as f64 / n_cond as f64;
                let col = 2 * s + o;
                entries[(t, col)] = r;
                sigma[(t, col)] = binomial_sigma(r, n_cond);
                cond[(t, col)] = n_cond;
                outcome_totals[o] += n_cond;
            }
        }
        let total = (outcome_totals[0] + outcome_totals[1]) as f64;
        marginals[2 * s] = outcome_totals[0] as f64 / total;
        marginals[2 * s + 1] = outcome_totals[1] as f64 / total;
    }
    Ok(StageDataMatrix {
        stage: Stage::Raw,
        side,
        entries,
        sigma: Some(sigma),
        marginals,
        cond_counts: Some(cond),
    })
}

/// Views of an exact probability tensor, with unit uncertainties.
///
/// A conditioning event of zero probability takes the counterpart's
/// unconditional outcome-0 probability as its column entry.
pub fn probabilities_to_views(tensor: &JointProbabilityTensor) -> (StageDataMatrix, StageDataMatrix) {
    (prob_view(tensor, Side::Prep), prob_view(tensor, Side::Meas))
}

fn prob_view(tensor: &JointProbabilityTensor, side: Side) -> StageDataMatrix {
    let (ns, nt) = match side {
        Side::Prep => (tensor.nx(), tensor.ny()),
        Side::Meas => (tensor.ny(), tensor.nx()),
    };
    let cell = |s: usize, t: usize| -> [[f64; 2]; 2] {
        match side {
            Side::Prep => *tensor.cell(s, t),
            Side::Meas => {
                let c = tensor.cell(t, s);
                [[c[0][0], c[1][0]], [c[0][1], c[1][1]]]
            }
        }
    };
    let mut entries = DMatrix::zeros(nt, 2 * ns);
    let mut marginals = vec![0.0; 2 * ns];
    for s in 0..ns {
        for t in 0..nt {
            let c = cell(s, t);
            for o in 0..2 {
                let mass = c[o][0] + c[o][1];
                entries[(t, 2 * s + o)] = if mass > 1e-15 { c[o][0] / mass } else { c[0][0] + c[1][0] };
                marginals[2 * s + o] += mass / nt as f64;
            }
        }
    }
    StageDataMatrix {
        stage: Stage::Raw,
        side,
        sigma: Some(DMatrix::from_element(nt, 2 * ns, 1.0)),
        entries,
        marginals,
        cond_counts: None,
    }
}

/// Write a count tensor in the CSV schema described in the module docs.
pub fn save_counts(tensor: &JointCountTensor, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_counts(tensor, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn write_counts<W: Write>(tensor: &JointCountTensor, w: &mut W) -> Result<()> {
    if let Some(kind) = tensor.scenario {
        writeln!(w, "# scenario={}", kind.label())?;
    }
    if let Some(theta) = tensor.theta {
        writeln!(w, "# theta={theta}")?;
    }
    writeln!(w, "run,x,y,a,b,count")?;
    for run in 0..tensor.runs {
        for x in 0..tensor.nx {
            for y in 0..tensor.ny {
                let c = tensor.cell(run, x, y);
                for a in 0..2 {
                    for b in 0..2 {
                        writeln!(w, "{},{},{},{},{},{}", run + 1, x + 1, y + 1, a, b, c[a][b])?;
                    }
                }
            }
        }
    }
    Ok(())
}

pub fn load_counts(path: &Path) -> Result<JointCountTensor> {
    let text = std::fs::read_to_string(path)?;
    parse_counts(&text)
}

fn parse_field<T: std::str::FromStr>(raw: &str, name: &str, line: u64) -> Result<T> {
    raw.trim().parse::<T>().map_err(|_| Error::Parse {
        line,
        msg: format!("field '{name}' must be a non-negative integer, got '{}'", raw.trim()),
    })
}

pub fn parse_counts(text: &str) -> Result<JointCountTensor> {
    let mut meta = BTreeMap::new();
    for line in text.lines() {
        if let Some(rest) = line.trim_start().strip_prefix('#') {
            if let Some((k, v)) = rest.split_once('=') {
                meta.insert(k.trim().to_string(), v.trim().to_string());
            }
        }
    }

    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| Error::Parse { line: 1, msg: e.to_string() })?
        .clone();
    let expected = ["run", "x", "y", "a", "b", "count"];
    if headers.len() != expected.len() || headers.iter().zip(expected).any(|(h, e)| h != e) {
        let line = headers.position().map(|p| p.line()).unwrap_or(1);
        return Err(Error::Parse { line, msg: format!("header must be '{}'", expected.join(",")) });
    }

    // (run, x, y) -> (first line, cells, seen mask)
    let mut pairs: BTreeMap<(usize, usize, usize), (u64, [[u64; 2]; 2], [[bool; 2]; 2])> = BTreeMap::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            Error::Parse { line, msg: e.to_string() }
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        if record.len() != 6 {
            return Err(Error::Parse { line, msg: format!("expected 6 fields, got {}", record.len()) });
        }
        let run: usize = parse_field(&record[0], "run", line)?;
        let x: usize = parse_field(&record[1], "x", line)?;
        let y: usize = parse_field(&record[2], "y", line)?;
        let a: usize = parse_field(&record[3], "a", line)?;
        let b: usize = parse_field(&record[4], "b", line)?;
        let count: u64 = parse_field(&record[5], "count", line)?;
        if run == 0 {
            return Err(Error::Parse { line, msg: "run indices start at 1".into() });
        }
        for (name, v) in [("x", x), ("y", y)] {
            if v == 0 || v > MAX_SETTINGS {
                return Err(Error::Parse { line, msg: format!("unknown setting index {name}={v}") });
            }
        }
        if a > 1 || b > 1 {
            return Err(Error::Parse { line, msg: format!("outcomes must be 0 or 1, got a={a}, b={b}") });
        }
        let entry = pairs.entry((run, x, y)).or_insert((line, [[0; 2]; 2], [[false; 2]; 2]));
        if entry.2[a][b] {
            return Err(Error::Parse { line, msg: format!("duplicate row for run {run}, x {x}, y {y}, a {a}, b {b}") });
        }
        entry.2[a][b] = true;
        entry.1[a][b] = count;
    }

    if pairs.is_empty() {
        return Err(Error::Data("count file contains no data rows".into()));
    }
    let runs = pairs.keys().map(|k| k.0).max().unwrap_or(0);
    let nx = pairs.keys().map(|k| k.1).max().unwrap_or(0);
    let ny = pairs.keys().map(|k| k.2).max().unwrap_or(0);

    let mut cells = Vec::with_capacity(runs * nx * ny);
    let mut expected_total: Option<u64> = None;
    for run in 1..=runs {
        for x in 1..=nx {
            for y in 1..=ny {
                let (line, c, seen) = pairs
                    .get(&(run, x, y))
                    .ok_or_else(|| Error::Data(format!("missing setting pair (x {x}, y {y}) in run {run}")))?;
                if seen.iter().flatten().any(|s| !s) {
                    return Err(Error::Parse {
                        line: *line,
                        msg: format!("pair (run {run}, x {x}, y {y}) lacks some (a,b) outcome rows"),
                    });
                }
                let total = pair_total(c);
                match expected_total {
                    None => expected_total = Some(total),
                    Some(t) if t != total => {
                        return Err(Error::Parse {
                            line: *line,
                            msg: format!("pair (run {run}, x {x}, y {y}) totals {total}, other pairs total {t}"),
                        })
                    }
                    _ => {}
                }
                cells.push(*c);
            }
        }
    }
    if expected_total == Some(0) {
        return Err(Error::Data("count file has zero counts per pair".into()));
    }

    let mut t = JointCountTensor::new(runs, nx, ny, cells)?;
    if let Some(s) = meta.get("scenario") {
        t.scenario = Some(s.parse()?);
    }
    if let Some(th) = meta.get("theta") {
        t.theta = Some(th.parse().map_err(|_| Error::Parse { line: 0, msg: format!("bad theta metadata '{th}'") })?);
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gamescore::swap_roles;
    use crate::qcore::{scenario_33, scenario_43};
    use std::f64::consts::FRAC_PI_4;

    fn small_noise(seed: u64) -> NoiseModel {
        NoiseModel { angle_jitter_sigma: 0.01, white_noise: 0.05, counts_per_pair: 2_000, runs: 3, seed }
    }

    #[test]
    fn simulation_is_deterministic() {
        let sc = scenario_33();
        let a = simulate_counts(0.5, &sc, &small_noise(11)).unwrap();
        let b = simulate_counts(0.5, &sc, &small_noise(11)).unwrap();
        assert_eq!(a, b);
        let c = simulate_counts(0.5, &sc, &small_noise(12)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn per_pair_totals_match() {
        let t = simulate_counts(0.3, &scenario_43(), &small_noise(3)).unwrap();
        for run in 0..t.runs() {
            for x in 0..4 {
                for y in 0..4 {
                    assert_eq!(pair_total(t.cell(run, x, y)), 2_000);
                }
            }
        }
    }

    #[test]
    fn large_n_frequencies_match_exact() {
        let sc = scenario_33();
        let noise = NoiseModel::noiseless(1_000_000, 1, 99);
        let t = simulate_counts(FRAC_PI_4, &sc, &noise).unwrap();
        let exact = JointProbabilityTensor::exact(&make_state(FRAC_PI_4, 0.0).unwrap(), &sc).unwrap();
        let f = t.frequencies(0).unwrap();
        let n = 1_000_000f64;
        // 64 cells: allow one 3σ excursion, none beyond 4.5σ
        let mut beyond_3 = 0;
        for x in 0..4 {
            for y in 0..4 {
                for a in 0..2 {
                    for b in 0..2 {
                        let p = exact.p(x, y, a, b);
                        let se = (p * (1.0 - p) / n).sqrt().max(1.0 / n);
                        let dev = (f.p(x, y, a, b) - p).abs();
                        assert!(dev <= 4.5 * se, "cell ({x},{y},{a},{b})");
                        if dev > 3.0 * se {
                            beyond_3 += 1;
                        }
                    }
                }
            }
        }
        assert!(beyond_3 <= 1);
    }

    #[test]
    fn fully_mixed_gives_quarter_frequencies() {
        let noise = NoiseModel { angle_jitter_sigma: 0.0, white_noise: 1.0, counts_per_pair: 100_000, runs: 1, seed: 5 };
        let t = simulate_counts(0.2, &scenario_43(), &noise).unwrap();
        let f = t.frequencies(0).unwrap();
        for x in 0..4 {
            for y in 0..4 {
                for a in 0..2 {
                    for b in 0..2 {
                        assert!((f.p(x, y, a, b) - 0.25).abs() < 0.01);
                    }
                }
            }
        }
    }

    #[test]
    fn jitter_keeps_unit_norm_and_is_small() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for d in scenario_33().prep_dirs.iter().chain(scenario_43().prep_dirs.iter()) {
            let j = jitter_direction(d, 1f64.to_radians(), &mut rng);
            assert!(j.is_unit());
            assert!(j.dot(d) > (10f64.to_radians()).cos());
        }
    }

    #[test]
    fn exact_views_have_expected_entries() {
        let sc = scenario_33();
        let exact = JointProbabilityTensor::exact(&make_state(FRAC_PI_4, 0.0).unwrap(), &sc).unwrap();
        let (prep, meas) = probabilities_to_views(&exact);
        assert_eq!((prep.rows(), prep.cols()), (4, 8));
        assert_eq!((meas.rows(), meas.cols()), (4, 8));
        // ⟨σ₂⊗σ₂⟩ = −1: given a = 0 along ŷ, B never returns 0 along ŷ
        assert!(prep.entries[(3, 6)].abs() < 1e-12);
        for m in prep.marginals.iter().chain(meas.marginals.iter()) {
            assert!((m - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn views_conserve_counts() {
        let t = simulate_counts(0.6, &scenario_33(), &small_noise(21)).unwrap();
        let (prep, meas) = counts_to_views(&t, 1).unwrap();
        let pc = prep.cond_counts.as_ref().unwrap();
        let mc = meas.cond_counts.as_ref().unwrap();
        for x in 0..4 {
            for y in 0..4 {
                let c = t.cell(1, x, y);
                for a in 0..2 {
                    let n = pc[(y, 2 * x + a)];
                    assert_eq!((prep.entries[(y, 2 * x + a)] * n as f64).round() as u64, c[a][0]);
                    assert_eq!(n, c[a][0] + c[a][1]);
                }
                for b in 0..2 {
                    let n = mc[(x, 2 * y + b)];
                    assert_eq!((meas.entries[(x, 2 * y + b)] * n as f64).round() as u64, c[0][b]);
                }
            }
        }
    }

    #[test]
    fn views_interchange_under_swap() {
        let t = simulate_counts(0.4, &scenario_43(), &small_noise(8)).unwrap();
        let (prep, meas) = counts_to_views(&t, 0).unwrap();
        let (sprep, smeas) = counts_to_views(&t.swapped(), 0).unwrap();
        assert_eq!(prep.entries, smeas.entries);
        assert_eq!(meas.entries, sprep.entries);

        let f = t.frequencies(0).unwrap();
        let (fp, fm) = probabilities_to_views(&f);
        let (gp, gm) = probabilities_to_views(&swap_roles(&f));
        assert!((fp.entries - gm.entries).abs().max() < 1e-15);
        assert!((fm.entries - gp.entries).abs().max() < 1e-15);
    }

    #[test]
    fn zero_conditioning_count_is_reported() {
        let noise = NoiseModel::noiseless(1_000, 1, 1);
        let t = simulate_counts(0.0, &scenario_33(), &noise).unwrap();
        let err = counts_to_views(&t, 0).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
        assert!(err.to_string().contains("a=1"), "{err}");
    }

    #[test]
    fn sigma_is_floored() {
        assert_eq!(binomial_sigma(0.0, 100), 0.005);
        assert!((binomial_sigma(0.5, 100) - 0.05).abs() < 1e-15);
    }

    #[test]
    fn roundtrip_through_csv() {
        let t = simulate_counts(0.262, &scenario_33(), &small_noise(4)).unwrap();
        let mut buf = Vec::new();
        write_counts(&t, &mut buf).unwrap();
        let back = parse_counts(std::str::from_utf8(&buf).unwrap()).unwrap();
        assert_eq!(back, t);
    }

    fn minimal_file(rows: &[&str]) -> String {
        let mut s = String::from("run,x,y,a,b,count\n");
        for r in rows {
            s.push_str(r);
            s.push('\n');
        }
        s
    }

    #[test]
    fn negative_count_is_a_parse_error() {
        let text = minimal_file(&["1,1,1,0,0,-5", "1,1,1,0,1,5", "1,1,1,1,0,5", "1,1,1,1,1,5"]);
        match parse_counts(&text) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn missing_pair_is_a_data_error() {
        let mut rows = Vec::new();
        for (x, y) in [(1, 1), (1, 2), (2, 1)] {
            for (a, b) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                rows.push(format!("1,{x},{y},{a},{b},3"));
            }
        }
        let refs: Vec<&str> = rows.iter().map(|s| s.as_str()).collect();
        let err = parse_counts(&minimal_file(&refs)).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
        assert!(err.to_string().contains("x 2, y 2"), "{err}");
    }

    #[test]
    fn unknown_setting_and_inconsistent_totals() {
        let text = minimal_file(&["1,5,1,0,0,1"]);
        assert!(matches!(parse_counts(&text), Err(Error::Parse { line: 2, .. })));

        let mut rows = Vec::new();
        for (y, n) in [(1, 3), (2, 4)] {
            for (a, b) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                rows.push(format!("1,1,{y},{a},{b},{n}"));
            }
        }
        let refs: Vec<&str> = rows.iter().map(|s| s.as_str()).collect();
        assert!(matches!(parse_counts(&minimal_file(&refs)), Err(Error::Parse { line: 6, .. })));
    }

    #[test]
    fn comments_are_skipped() {
        let text = "# hello\nrun,x,y,a,b,count\n# mid\n1,1,1,0,0,1\n1,1,1,0,1,1\n1,1,1,1,0,1\n1,1,1,1,1,1\n";
        let t = parse_counts(text).unwrap();
        assert_eq!((t.runs(), t.nx(), t.ny(), t.counts_per_pair()), (1, 1, 1, 4));
    }
}
