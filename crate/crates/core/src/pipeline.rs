//! End-to-end analysis: counts (simulated, loaded or exact) → views → GPT
//! fit → secondary procedures → diagnostics → game score, for every θ of a
//! sweep and every run.

use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diagnostics::{
    delta_m, delta_p, nosignaling_residuals, run_statistics, ConditionalStateSet, MassWeighting, RunStatistics,
};
use crate::error::{Error, Result};
use crate::expsim::{counts_to_views, probabilities_to_views, simulate_counts, JointCountTensor, NoiseModel, Stage};
use crate::gamescore::{classify_region, success_probability, JointProbabilityTensor, Provenance, RegionLabel};
use crate::gptfit::fit_gpt;
use crate::qcore::{make_state, Bounds, Scenario, ScenarioKind};
use crate::secondary::{build_secondary, OeWeighting};

/// The state-parameter sweep of the experiment, plus θ = 0.
pub const SWEEP_THETAS: [f64; 11] = [0.0, 0.050, 0.100, 0.152, 0.206, 0.262, 0.322, 0.388, 0.464, 0.560, 0.785];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub scenario: ScenarioKind,
    pub theta_list: Vec<f64>,
    pub noise: NoiseModel,
    /// Score exact model probabilities of the noiseless state; no sampling.
    pub exact: bool,
    pub oe_weighting: OeWeighting,
    pub mass_weighting: MassWeighting,
    /// Count file to analyse instead of simulating.
    pub counts: Option<PathBuf>,
    pub out_dir: PathBuf,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            scenario: ScenarioKind::S33,
            theta_list: SWEEP_THETAS.to_vec(),
            noise: NoiseModel::default(),
            exact: false,
            oe_weighting: OeWeighting::Uniform,
            mass_weighting: MassWeighting::Probability,
            counts: None,
            out_dir: PathBuf::from("out"),
        }
    }
}

fn parse_bool(v: &str) -> Option<bool> {
    match v.to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" | "on" => Some(true),
        "false" | "no" | "0" | "off" => Some(false),
        _ => None,
    }
}

pub fn parse_theta_list(v: &str) -> Result<Vec<f64>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<f64>().map_err(|_| Error::Domain(format!("theta '{s}' is not a number"))))
        .collect()
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.theta_list.is_empty() {
            return Err(Error::Domain("theta list is empty".into()));
        }
        if let Some(t) = self.theta_list.iter().find(|t| !(0.0..=std::f64::consts::FRAC_PI_2).contains(*t)) {
            return Err(Error::Domain(format!("theta {t} outside [0, pi/2]")));
        }
        if self.scenario == ScenarioKind::Custom {
            return Err(Error::Domain("the pipeline runs the 33 or 43 scenario".into()));
        }
        self.noise.validate()
    }

    /// Apply one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        let bad = |what: &str| Error::Domain(format!("{key}: {what} expected, got '{value}'"));
        match key.trim().replace('-', "_").as_str() {
            "scenario" => self.scenario = value.parse()?,
            "theta_list" | "thetas" => self.theta_list = parse_theta_list(value)?,
            "exact" => self.exact = parse_bool(value).ok_or_else(|| bad("boolean"))?,
            "seed" => self.noise.seed = value.parse().map_err(|_| bad("integer"))?,
            "runs" => self.noise.runs = value.parse().map_err(|_| bad("integer"))?,
            "shots" | "counts_per_pair" => self.noise.counts_per_pair = value.parse().map_err(|_| bad("integer"))?,
            "jitter_deg" => {
                let d: f64 = value.parse().map_err(|_| bad("number"))?;
                self.noise.angle_jitter_sigma = d.to_radians();
            }
            "white_noise" => self.noise.white_noise = value.parse().map_err(|_| bad("number"))?,
            "oe_weighting" => self.oe_weighting = value.parse()?,
            "mass_weighting" => {
                self.mass_weighting = match value.to_ascii_lowercase().as_str() {
                    "probability" => MassWeighting::Probability,
                    "uniform" => MassWeighting::Uniform,
                    _ => return Err(bad("probability or uniform")),
                }
            }
            "counts" => self.counts = Some(PathBuf::from(value)),
            "out_dir" => self.out_dir = PathBuf::from(value),
            other => return Err(Error::Domain(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    /// Defaults overridden by a flat `key = value` file (`#` starts a comment).
    pub fn from_config_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_config_text(text)?;
        Ok(cfg)
    }

    pub fn apply_config_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let line_no = i as u64 + 1;
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: line_no,
                msg: format!("expected key = value, got '{line}'"),
            })?;
            self.set(k, v).map_err(|e| Error::Parse { line: line_no, msg: e.to_string() })?;
        }
        Ok(())
    }
}

/// Per-run quantities of one stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRun {
    pub p: f64,
    pub delta_p: f64,
    pub delta_m: f64,
    pub ns_max: f64,
    pub ns_mean: f64,
    pub chi2_prep: Option<f64>,
    pub chi2_meas: Option<f64>,
    pub fit_converged: Option<bool>,
    pub c_p: Option<f64>,
    pub c_m: Option<f64>,
    pub oe_residual_p: Option<f64>,
    pub oe_residual_m: Option<f64>,
}

impl StageRun {
    fn new(p: f64, delta_p: f64, delta_m: f64, tensor: &JointProbabilityTensor) -> Self {
        let ns = nosignaling_residuals(tensor);
        Self {
            p,
            delta_p,
            delta_m,
            ns_max: ns.max(),
            ns_mean: ns.mean(),
            chi2_prep: None,
            chi2_meas: None,
            fit_converged: None,
            c_p: None,
            c_m: None,
            oe_residual_p: None,
            oe_residual_m: None,
        }
    }
}

/// All three stages of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunAnalysis {
    pub run: usize,
    pub raw: StageRun,
    pub primary: StageRun,
    pub secondary: StageRun,
    /// Raw preparation view restricted to game rows and columns.
    pub raw_game_matrix: DMatrix<f64>,
    pub secondary_matrix: DMatrix<f64>,
}

impl RunAnalysis {
    pub fn stage(&self, stage: Stage) -> &StageRun {
        match stage {
            Stage::Raw => &self.raw,
            Stage::Primary => &self.primary,
            Stage::Secondary => &self.secondary,
        }
    }

    pub fn max_raw_secondary_discrepancy(&self) -> f64 {
        (&self.raw_game_matrix - &self.secondary_matrix).abs().max()
    }
}

fn stage_err(stage: Stage, theta: f64, run: usize) -> impl Fn(Error) -> Error {
    move |e| Error::Stage { stage: stage.label().into(), theta, run: run + 1, source: Box::new(e) }
}

/// Process one run's raw tensor through every stage.
pub fn analyze_run(
    raw_tensor: &JointProbabilityTensor,
    views: Option<(crate::expsim::StageDataMatrix, crate::expsim::StageDataMatrix)>,
    scenario: &Scenario,
    cfg: &PipelineConfig,
    theta: f64,
    run: usize,
) -> Result<RunAnalysis> {
    let rule = scenario.win_rule();
    let (m, n) = (scenario.m, scenario.n);
    let mw = cfg.mass_weighting;

    let err = stage_err(Stage::Raw, theta, run);
    let (prep_raw, meas_raw) = views.unwrap_or_else(|| probabilities_to_views(raw_tensor));
    let raw = (|| -> Result<StageRun> {
        let p = success_probability(raw_tensor, &rule)?;
        let sp = ConditionalStateSet::from_view(&prep_raw, &scenario.meas_dirs, m, mw)?;
        let sm = ConditionalStateSet::from_view(&meas_raw, &scenario.prep_dirs, n, mw)?;
        Ok(StageRun::new(p, delta_p(&sp), delta_m(&sm), raw_tensor))
    })()
    .map_err(&err)?;

    let err = stage_err(Stage::Primary, theta, run);
    let (fit_p, fit_m) = rayon::join(|| fit_gpt(&prep_raw), || fit_gpt(&meas_raw));
    let (fit_p, fit_m) = (fit_p.map_err(&err)?, fit_m.map_err(&err)?);
    let primary = (|| -> Result<StageRun> {
        let tensor = fit_p
            .primary
            .to_tensor(Provenance::Processed { stage: Stage::Primary, run: Some(run) })?;
        let p = success_probability(&tensor, &rule)?;
        let sp = ConditionalStateSet::from_view(&fit_p.primary, &scenario.meas_dirs, m, mw)?;
        let sm = ConditionalStateSet::from_view(&fit_m.primary, &scenario.prep_dirs, n, mw)?;
        let mut s = StageRun::new(p, delta_p(&sp), delta_m(&sm), &tensor);
        s.chi2_prep = Some(fit_p.chi2);
        s.chi2_meas = Some(fit_m.chi2);
        s.fit_converged = Some(fit_p.converged && fit_m.converged);
        Ok(s)
    })()
    .map_err(&err)?;

    let err = stage_err(Stage::Secondary, theta, run);
    let sec = build_secondary(&fit_p.primary, &fit_m.primary, scenario, cfg.oe_weighting).map_err(&err)?;
    let secondary = (|| -> Result<StageRun> {
        let tensor = sec
            .secondary
            .to_tensor(Provenance::Processed { stage: Stage::Secondary, run: Some(run) })?;
        let p = success_probability(&tensor, &rule)?;
        let sp = ConditionalStateSet::from_view(&sec.prep_states, &scenario.meas_dirs, m, mw)?;
        let sm = ConditionalStateSet::from_view(&sec.meas_states, &scenario.prep_dirs, n, mw)?;
        let mut s = StageRun::new(p, delta_p(&sp), delta_m(&sm), &tensor);
        s.c_p = Some(sec.c_p);
        s.c_m = Some(sec.c_m);
        s.oe_residual_p = Some(sec.oe_residual_p);
        s.oe_residual_m = Some(sec.oe_residual_m);
        Ok(s)
    })()
    .map_err(&err)?;

    Ok(RunAnalysis {
        run,
        raw,
        primary,
        secondary,
        raw_game_matrix: prep_raw.entries.view((0, 0), (n, 2 * m)).into_owned(),
        secondary_matrix: sec.secondary.entries.clone(),
    })
}

/// Run-averaged summary of one stage at one θ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub stage: Stage,
    pub p: f64,
    /// Across-run sample standard deviation of P (0 for a single run).
    pub std: f64,
    pub beta: f64,
    pub region: RegionLabel,
    pub delta_p: f64,
    pub delta_m: f64,
    pub ns_max: f64,
    pub ns_mean: f64,
    pub c_p: Option<f64>,
    pub c_m: Option<f64>,
    pub chi2_prep: Option<f64>,
    pub chi2_meas: Option<f64>,
    pub oe_residual_max: Option<f64>,
    pub run_statistics: Option<RunStatistics>,
    pub per_run_p: Vec<f64>,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

fn mean_opt(runs: &[RunAnalysis], stage: Stage, f: impl Fn(&StageRun) -> Option<f64>) -> Option<f64> {
    let vals: Vec<f64> = runs.iter().filter_map(|r| f(r.stage(stage))).collect();
    (!vals.is_empty()).then(|| mean(vals.into_iter()))
}

fn summarize_stage(runs: &[RunAnalysis], stage: Stage, scenario: &Scenario) -> Result<StageSummary> {
    let per_run_p: Vec<f64> = runs.iter().map(|r| r.stage(stage).p).collect();
    let stats = if per_run_p.len() >= 2 { Some(run_statistics(&per_run_p, scenario)?) } else { None };
    let p = mean(per_run_p.iter().copied());
    let avg = |f: fn(&StageRun) -> f64| mean(runs.iter().map(|r| f(r.stage(stage))));
    let oe_max = runs
        .iter()
        .filter_map(|r| {
            let s = r.stage(stage);
            Some(s.oe_residual_p?.max(s.oe_residual_m?))
        })
        .fold(None, |acc: Option<f64>, v| Some(acc.map_or(v, |a| a.max(v))));
    Ok(StageSummary {
        stage,
        p,
        std: stats.as_ref().map_or(0.0, |s| s.std_p),
        beta: scenario.beta_from_success(p),
        region: classify_region(p, scenario)?,
        delta_p: avg(|s| s.delta_p),
        delta_m: avg(|s| s.delta_m),
        ns_max: runs.iter().map(|r| r.stage(stage).ns_max).fold(0.0, f64::max),
        ns_mean: avg(|s| s.ns_mean),
        c_p: mean_opt(runs, stage, |s| s.c_p),
        c_m: mean_opt(runs, stage, |s| s.c_m),
        chi2_prep: mean_opt(runs, stage, |s| s.chi2_prep),
        chi2_meas: mean_opt(runs, stage, |s| s.chi2_meas),
        oe_residual_max: oe_max,
        run_statistics: stats,
        per_run_p,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThetaReport {
    pub theta: f64,
    /// Closed-form prediction for the noiseless state.
    pub predicted_p: f64,
    pub stages: Vec<StageSummary>,
    /// Largest cell difference between the run-averaged raw and secondary
    /// game matrices.
    pub max_raw_secondary_discrepancy: f64,
    /// Largest single-run cell difference.
    pub max_run_raw_secondary_discrepancy: f64,
    pub runs: Vec<RunAnalysis>,
}

impl ThetaReport {
    pub fn stage(&self, stage: Stage) -> &StageSummary {
        self.stages.iter().find(|s| s.stage == stage).expect("every stage is summarised")
    }
}

/// θ where the exact success probability crosses a bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionCrossing {
    pub from: RegionLabel,
    pub to: RegionLabel,
    pub theta: f64,
    pub sin_2theta: f64,
    pub beta: f64,
}

/// Where the analysed probabilities came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    /// Model probabilities of the noiseless state; nothing sampled.
    Exact,
    Simulated { noise: NoiseModel },
    Loaded { path: PathBuf, runs: usize, counts_per_pair: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub scenario: ScenarioKind,
    pub m: usize,
    pub n: usize,
    pub bounds: Bounds,
    pub bounds_beta: [f64; 2],
    pub exact: bool,
    pub oe_weighting: OeWeighting,
    pub mass_weighting: MassWeighting,
    pub source: DataSource,
    pub points: Vec<ThetaReport>,
    pub crossings: Vec<RegionCrossing>,
}

fn exact_tensor(theta: f64, scenario: &Scenario) -> Result<JointProbabilityTensor> {
    JointProbabilityTensor::exact(&make_state(theta, 0.0)?, scenario)
}

fn analyze_theta(theta: f64, counts: Option<&JointCountTensor>, scenario: &Scenario, cfg: &PipelineConfig) -> Result<ThetaReport> {
    let runs: Vec<RunAnalysis> = if cfg.exact {
        let t = exact_tensor(theta, scenario)?;
        vec![analyze_run(&t, None, scenario, cfg, theta, 0)?]
    } else {
        let owned;
        let counts = match counts {
            Some(c) => c,
            None => {
                owned = simulate_counts(theta, scenario, &cfg.noise)?;
                &owned
            }
        };
        (0..counts.runs())
            .into_par_iter()
            .map(|run| {
                let tensor = counts.frequencies(run).map_err(stage_err(Stage::Raw, theta, run))?;
                let views = counts_to_views(counts, run).map_err(stage_err(Stage::Raw, theta, run))?;
                analyze_run(&tensor, Some(views), scenario, cfg, theta, run)
            })
            .collect::<Result<_>>()?
    };
    let stages = Stage::ALL
        .iter()
        .map(|&s| summarize_stage(&runs, s, scenario))
        .collect::<Result<Vec<_>>>()?;
    let count = runs.len() as f64;
    let avg_raw = runs.iter().fold(DMatrix::zeros(scenario.n, 2 * scenario.m), |acc, r| acc + &r.raw_game_matrix) / count;
    let avg_sec = runs.iter().fold(DMatrix::zeros(scenario.n, 2 * scenario.m), |acc, r| acc + &r.secondary_matrix) / count;
    Ok(ThetaReport {
        theta,
        predicted_p: scenario.predicted_success(theta)?,
        stages,
        max_raw_secondary_discrepancy: (avg_raw - avg_sec).abs().max(),
        max_run_raw_secondary_discrepancy: runs.iter().map(|r| r.max_raw_secondary_discrepancy()).fold(0.0, f64::max),
        runs,
    })
}

/// Locate region boundaries between adjacent sweep points by bisection on
/// the exact success probability.
pub fn find_crossings(thetas: &[f64], scenario: &Scenario) -> Result<Vec<RegionCrossing>> {
    let score = |t: f64| -> Result<(f64, RegionLabel)> {
        let p = success_probability(&exact_tensor(t, scenario)?, &scenario.win_rule())?;
        Ok((p, classify_region(p, scenario)?))
    };
    let mut sorted = thetas.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    let mut out = Vec::new();
    for w in sorted.windows(2) {
        let (mut lo, mut hi) = (w[0], w[1]);
        let (_, r_lo) = score(lo)?;
        let (_, r_hi) = score(hi)?;
        if r_lo == r_hi {
            continue;
        }
        // one crossing per bound between the two points
        let mut region = r_lo;
        while region != r_hi {
            let (mut a, mut b) = (lo, hi);
            for _ in 0..200 {
                let mid = 0.5 * (a + b);
                if score(mid)?.1 == region {
                    a = mid;
                } else {
                    b = mid;
                }
                if b - a < 1e-14 {
                    break;
                }
            }
            let (p, next) = score(b)?;
            out.push(RegionCrossing {
                from: region,
                to: next,
                theta: b,
                sin_2theta: (2.0 * b).sin(),
                beta: scenario.beta_from_success(p),
            });
            region = next;
            lo = b;
            hi = w[1];
        }
    }
    Ok(out)
}

/// Run the whole sweep.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<AnalysisReport> {
    cfg.validate()?;
    let scenario = Scenario::from_kind(cfg.scenario)?;
    let bounds = scenario.bounds.expect("named scenarios carry bounds");
    let loaded = match (&cfg.counts, cfg.exact) {
        (Some(path), false) => Some(load_for(path, &scenario)?),
        _ => None,
    };
    let thetas: Vec<f64> = match &loaded {
        Some(c) => vec![c.theta.unwrap_or(cfg.theta_list[0])],
        None => {
            let mut t = cfg.theta_list.clone();
            t.sort_by(f64::total_cmp);
            t
        }
    };
    let points = thetas
        .par_iter()
        .map(|&t| analyze_theta(t, loaded.as_ref(), &scenario, cfg))
        .collect::<Result<Vec<_>>>()?;
    let source = match (&loaded, &cfg.counts) {
        _ if cfg.exact => DataSource::Exact,
        (Some(c), Some(path)) => DataSource::Loaded { path: path.clone(), runs: c.runs(), counts_per_pair: c.counts_per_pair() },
        _ => DataSource::Simulated { noise: cfg.noise.clone() },
    };
    let crossings = if cfg.exact { find_crossings(&thetas, &scenario)? } else { Vec::new() };
    Ok(AnalysisReport {
        scenario: cfg.scenario,
        m: scenario.m,
        n: scenario.n,
        bounds,
        bounds_beta: [scenario.beta_from_success(bounds.unc), scenario.beta_from_success(bounds.local)],
        exact: cfg.exact,
        oe_weighting: cfg.oe_weighting,
        mass_weighting: cfg.mass_weighting,
        source,
        points,
        crossings,
    })
}

fn load_for(path: &Path, scenario: &Scenario) -> Result<JointCountTensor> {
    let counts = crate::expsim::load_counts(path)?;
    if let Some(kind) = counts.scenario {
        if kind != scenario.kind {
            return Err(Error::Data(format!(
                "count file is for scenario {kind}, pipeline configured for {}",
                scenario.kind
            )));
        }
    }
    if counts.nx() != scenario.num_prep_settings() || counts.ny() != scenario.num_meas_settings() {
        return Err(Error::Data(format!(
            "count file has {}x{} settings, scenario needs {}x{}",
            counts.nx(),
            counts.ny(),
            scenario.num_prep_settings(),
            scenario.num_meas_settings()
        )));
    }
    Ok(counts)
}

pub const SWEEP_HEADER: &str = "theta,stage,P,std,beta,region,deltaP,deltaM,CP,CM";

/// Sweep table, one row per (θ, stage), sorted by θ then stage.
pub fn sweep_csv(report: &AnalysisReport) -> String {
    let mut out = String::from(SWEEP_HEADER);
    out.push('\n');
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for pt in &report.points {
        for s in &pt.stages {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                pt.theta,
                s.stage,
                s.p,
                s.std,
                s.beta,
                s.region,
                s.delta_p,
                s.delta_m,
                opt(s.c_p),
                opt(s.c_m)
            );
        }
    }
    out
}

pub fn report_json(report: &AnalysisReport) -> Result<String> {
    serde_json::to_string_pretty(report).map_err(|e| Error::Data(format!("report serialisation: {e}")))
}

pub fn parse_report(text: &str) -> Result<AnalysisReport> {
    serde_json::from_str(text).map_err(|e| Error::Parse { line: e.line() as u64, msg: e.to_string() })
}

/// Write `report.json` and `sweep.csv` into `dir`; returns both paths.
pub fn write_outputs(report: &AnalysisReport, dir: &Path) -> Result<(PathBuf, PathBuf)> {
    std::fs::create_dir_all(dir)?;
    let json_path = dir.join("report.json");
    let csv_path = dir.join("sweep.csv");
    let mut f = std::fs::File::create(&json_path)?;
    f.write_all(report_json(report)?.as_bytes())?;
    f.write_all(b"\n")?;
    std::fs::write(&csv_path, sweep_csv(report))?;
    Ok((json_path, csv_path))
}
