use std::path::Path;
use std::process::{Command, Output};

use commgame_core::pipeline::parse_report;
use commgame_core::Stage;
use tempfile::TempDir;

fn commgame(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_commgame"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn read(dir: &Path, name: &str) -> String {
    std::fs::read_to_string(dir.join(name)).unwrap()
}

#[test]
fn simulate_is_byte_identical_across_invocations() {
    let tmp = TempDir::new().unwrap();
    for dir in ["a", "b"] {
        ok(&commgame(&["simulate", "--seed", "7", "--theta-list", "0.5", "--shots", "500", "--out-dir", dir], tmp.path()));
    }
    let a = read(&tmp.path().join("a"), "counts_33_theta0.5.csv");
    assert_eq!(a, read(&tmp.path().join("b"), "counts_33_theta0.5.csv"));
    let runs: std::collections::BTreeSet<&str> = a
        .lines()
        .filter(|l| !l.starts_with('#') && !l.starts_with("run"))
        .map(|l| l.split(',').next().unwrap())
        .collect();
    assert_eq!(runs.len(), 30);
}

#[test]
fn usage_errors_exit_2() {
    let tmp = TempDir::new().unwrap();
    assert_eq!(commgame(&["simulate", "--scenario", "34"], tmp.path()).status.code(), Some(2));
    assert_eq!(commgame(&["pipeline", "--theta-list", "2.0", "--exact"], tmp.path()).status.code(), Some(2));
    assert_eq!(commgame(&["report", "nope.json"], tmp.path()).status.code(), Some(2));
    assert_eq!(commgame(&["pipeline", "--counts", "nope.csv"], tmp.path()).status.code(), Some(2));
    std::fs::write(tmp.path().join("bad.cfg"), "scenario = 33\nrunz = 3\n").unwrap();
    let out = commgame(&["pipeline", "--config", "bad.cfg"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));
}

#[test]
fn runtime_errors_exit_1() {
    let tmp = TempDir::new().unwrap();
    std::fs::write(tmp.path().join("broken.json"), "{\"scenario\":").unwrap();
    assert_eq!(commgame(&["report", "broken.json"], tmp.path()).status.code(), Some(1));
    std::fs::write(tmp.path().join("counts.csv"), "run,x,y,a,b,count\n1,1,1,0,0,oops\n").unwrap();
    assert_eq!(commgame(&["pipeline", "--counts", "counts.csv"], tmp.path()).status.code(), Some(1));
}

#[test]
fn exact_pipeline_matches_closed_form() {
    let tmp = TempDir::new().unwrap();
    ok(&commgame(&["pipeline", "--exact", "--out-dir", "out"], tmp.path()));
    let csv = read(&tmp.path().join("out"), "sweep.csv");
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("theta,stage,P,std,beta,region,deltaP,deltaM,CP,CM"));
    let mut raw_rows = 0;
    for line in lines {
        let f: Vec<&str> = line.split(',').collect();
        let theta: f64 = f[0].parse().unwrap();
        let p: f64 = f[2].parse().unwrap();
        let beta: f64 = f[4].parse().unwrap();
        assert!((beta - 18.0 * (p - 0.5)).abs() <= 1e-9);
        if f[1] == "raw" {
            raw_rows += 1;
            assert!((p - (4.0 + (2.0 * theta).sin()) / 6.0).abs() <= 1e-9);
        }
    }
    assert_eq!(raw_rows, 11);

    ok(&commgame(&["pipeline", "--exact", "--theta-list", "0.7853981633974483", "--out-dir", "pi4"], tmp.path()));
    let row = read(&tmp.path().join("pi4"), "sweep.csv").lines().nth(1).unwrap().to_string();
    let f: Vec<&str> = row.split(',').collect();
    assert_eq!(format!("{:.6}", f[2].parse::<f64>().unwrap()), "0.833333");
    assert_eq!(f[5], "TrivialContextual");
}

#[test]
fn noisy_pipeline_repairs_and_is_deterministic() {
    let tmp = TempDir::new().unwrap();
    let args = |dir: &'static str| ["pipeline", "--scenario", "43", "--theta-list", "0.785", "--runs", "5", "--seed", "3", "--out-dir", dir];
    ok(&commgame(&args("a"), tmp.path()));
    ok(&commgame(&args("b"), tmp.path()));
    for file in ["report.json", "sweep.csv"] {
        assert_eq!(read(&tmp.path().join("a"), file), read(&tmp.path().join("b"), file));
    }
    let report = parse_report(&read(&tmp.path().join("a"), "report.json")).unwrap();
    let sec = report.points[0].stage(Stage::Secondary);
    assert!(sec.delta_p <= 1e-8 && sec.delta_m <= 1e-8);
    assert_eq!(report.points[0].runs.len(), 5);
    for pt in &report.points {
        for s in &pt.stages {
            assert!((s.beta - 24.0 * (s.p - 0.5)).abs() <= 1e-9);
        }
    }
}

#[test]
fn simulated_counts_feed_the_pipeline() {
    let tmp = TempDir::new().unwrap();
    ok(&commgame(&["simulate", "--scenario", "43", "--theta-list", "0.6", "--runs", "4", "--out-dir", "sim"], tmp.path()));
    ok(&commgame(&["pipeline", "--scenario", "43", "--counts", "sim/counts_43_theta0.6.csv", "--out-dir", "out"], tmp.path()));
    let report = parse_report(&read(&tmp.path().join("out"), "report.json")).unwrap();
    assert_eq!(report.points.len(), 1);
    assert_eq!(report.points[0].theta, 0.6);
    assert_eq!(report.points[0].runs.len(), 4);
    // the count file names its scenario; a mismatch is a runtime failure
    let out = commgame(&["pipeline", "--scenario", "33", "--counts", "sim/counts_43_theta0.6.csv"], tmp.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn flags_override_config_file() {
    let tmp = TempDir::new().unwrap();
    std::fs::write(tmp.path().join("run.cfg"), "# exact sweep\nscenario = 43\nexact = true\ntheta_list = 0.1, 0.2\nout_dir = from_cfg\n").unwrap();
    ok(&commgame(&["pipeline", "--config", "run.cfg", "--scenario", "33"], tmp.path()));
    let report = parse_report(&read(&tmp.path().join("from_cfg"), "report.json")).unwrap();
    assert_eq!(report.m, 3);
    assert_eq!(report.points.len(), 2);
}

#[test]
fn report_summaries() {
    let tmp = TempDir::new().unwrap();
    ok(&commgame(&["pipeline", "--exact", "--scenario", "43", "--theta-list", "0.7853981633974483", "--out-dir", "max"], tmp.path()));
    let text = ok(&commgame(&["report", "max/report.json"], tmp.path()));
    assert!(text.contains("β=6.9282, exceeds UNC bound (β=4)"), "{text}");
    assert!(text.contains("OE residual"));
    assert!(text.contains("no-signaling"));

    ok(&commgame(&["pipeline", "--exact", "--theta-list", "0.05", "--out-dir", "low"], tmp.path()));
    let text = ok(&commgame(&["report", "low/report.json"], tmp.path()));
    assert!(text.contains("universal non-contextuality not violated"), "{text}");

    ok(&commgame(&["pipeline", "--theta-list", "0.785", "--runs", "4", "--out-dir", "noisy"], tmp.path()));
    let text = ok(&commgame(&["report", "noisy/report.json"], tmp.path()));
    assert!(text.contains("sigma ("), "{text}");
}
