//! Human-readable rendering of an [`AnalysisReport`].

use std::fmt::Write;

use commgame_core::pipeline::{StageSummary, ThetaReport};
use commgame_core::{AnalysisReport, DataSource, Stage};

/// Up to four decimals, trailing zeros dropped.
fn num(v: f64) -> String {
    let s = format!("{v:.4}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" { "0".into() } else { s.into() }
}

fn strongest(report: &AnalysisReport, stage: Stage) -> Option<(&ThetaReport, &StageSummary)> {
    report
        .points
        .iter()
        .map(|pt| (pt, pt.stage(stage)))
        .max_by(|a, b| a.1.p.total_cmp(&b.1.p))
}

/// Verdict against the UNC bound, e.g. "β=6.9282, exceeds UNC bound (β=4)".
pub fn verdict(beta: f64, unc_beta: f64) -> String {
    if beta > unc_beta {
        format!("β={:.4}, exceeds UNC bound (β={})", beta, num(unc_beta))
    } else {
        format!("β={:.4}, universal non-contextuality not violated", beta)
    }
}

fn max_of(values: impl Iterator<Item = f64>) -> f64 {
    values.fold(0.0, f64::max)
}

pub fn render(report: &AnalysisReport) -> String {
    let mut out = String::new();
    let [unc_beta, local_beta] = report.bounds_beta;
    let _ = writeln!(out, "scenario ({},{}) [{}]", report.m, report.n, report.scenario);
    match &report.source {
        DataSource::Exact => {
            let _ = writeln!(out, "data: exact model probabilities");
        }
        DataSource::Simulated { noise: n } => {
            let _ = writeln!(
                out,
                "data: simulated, {} runs x {} shots per pair, jitter {} deg, white noise {}, seed {}",
                n.runs,
                n.counts_per_pair,
                num(n.angle_jitter_sigma.to_degrees()),
                num(n.white_noise),
                n.seed
            );
        }
        DataSource::Loaded { path, runs, counts_per_pair } => {
            let _ = writeln!(out, "data: {} ({runs} runs x {counts_per_pair} shots per pair)", path.display());
        }
    }
    let _ = writeln!(out, "weighting: OE {}, mass center {}", report.oe_weighting, report.mass_weighting);
    let _ = writeln!(
        out,
        "bounds: UNC P={:.6} (β={}), local P={:.6} (β={})",
        report.bounds.unc,
        num(unc_beta),
        report.bounds.local,
        num(local_beta)
    );

    let _ = writeln!(out, "max violation:");
    for stage in Stage::ALL {
        if let Some((pt, s)) = strongest(report, stage) {
            let _ = writeln!(
                out,
                "  {:<9} theta={} P={:.6} {} [{}]",
                stage.label(),
                num(pt.theta),
                s.p,
                verdict(s.beta, unc_beta),
                s.region
            );
        }
    }

    let _ = writeln!(out, "sigma-violation (mean P minus UNC bound, in across-run std):");
    if report.source == DataSource::Exact {
        let _ = writeln!(out, "  not applicable to exact evaluation");
    } else {
        for stage in Stage::ALL {
            if let Some((pt, s)) = strongest(report, stage) {
                match &s.run_statistics {
                    Some(rs) if rs.degenerate_std => {
                        let _ = writeln!(out, "  {:<9} theta={} {} (zero spread across runs)", stage.label(), num(pt.theta), rs.sigma_violation);
                    }
                    Some(rs) => {
                        let _ = writeln!(
                            out,
                            "  {:<9} theta={} {:.1} sigma (P={:.4} ± {:.4})",
                            stage.label(),
                            num(pt.theta),
                            rs.sigma_violation,
                            rs.mean_p,
                            rs.std_p
                        );
                    }
                    None => {
                        let _ = writeln!(out, "  {:<9} theta={} single run, no spread", stage.label(), num(pt.theta));
                    }
                }
            }
        }
    }

    let _ = writeln!(out, "loophole closure:");
    let sec: Vec<&StageSummary> = report.points.iter().map(|p| p.stage(Stage::Secondary)).collect();
    let oe = max_of(sec.iter().filter_map(|s| s.oe_residual_max));
    let min_of = |f: fn(&StageSummary) -> Option<f64>| sec.iter().filter_map(|s| f(s)).fold(f64::INFINITY, f64::min);
    let _ = writeln!(out, "  OE residual (secondary, max over theta): {oe:.2e}");
    let _ = writeln!(
        out,
        "  overlap: min C_P {:.4}, min C_M {:.4}",
        min_of(|s| s.c_p),
        min_of(|s| s.c_m)
    );
    for stage in Stage::ALL {
        let summaries: Vec<&StageSummary> = report.points.iter().map(|p| p.stage(stage)).collect();
        let _ = writeln!(
            out,
            "  {:<9} deltaP max {:.2e}, deltaM max {:.2e}, no-signaling mean {:.2e} max {:.2e}",
            stage.label(),
            max_of(summaries.iter().map(|s| s.delta_p)),
            max_of(summaries.iter().map(|s| s.delta_m)),
            max_of(summaries.iter().map(|s| s.ns_mean)),
            max_of(summaries.iter().map(|s| s.ns_max))
        );
    }
    let disc = max_of(report.points.iter().map(|p| p.max_raw_secondary_discrepancy));
    let _ = writeln!(out, "  raw vs secondary game matrix, max cell difference: {disc:.4}");

    if !report.crossings.is_empty() {
        let _ = writeln!(out, "region crossings:");
        for c in &report.crossings {
            let _ = writeln!(
                out,
                "  {} -> {} at theta={:.6} (sin2theta={:.6}, β={})",
                c.from,
                c.to,
                c.theta,
                c.sin_2theta,
                num(c.beta)
            );
        }
    }
    out
}
