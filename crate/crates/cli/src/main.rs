mod summary;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use commgame_core::expsim::{save_counts, simulate_counts};
use commgame_core::pipeline::{parse_report, run_pipeline, write_outputs};
use commgame_core::{PipelineConfig, Scenario};

/// Simulate and analyse (3,3)/(4,3) communication-game contextuality tests.
#[derive(Parser)]
#[command(name = "commgame", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample coincidence counts; writes one count file per theta.
    Simulate(RunArgs),
    /// Run every stage and write report.json and sweep.csv.
    Pipeline(RunArgs),
    /// Print a human-readable summary of a report.json.
    Report {
        path: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Flat `key = value` file; command-line flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = ["33", "43"])]
    scenario: Option<String>,
    /// Comma-separated state angles in radians.
    #[arg(long, value_name = "THETAS", allow_hyphen_values = true)]
    theta_list: Option<String>,
    /// Score exact model probabilities instead of sampled counts.
    #[arg(long)]
    exact: bool,
    #[arg(long)]
    seed: Option<u64>,
    /// Analyse this count file instead of simulating.
    #[arg(long)]
    counts: Option<PathBuf>,
    #[arg(long)]
    runs: Option<usize>,
    /// Coincidence counts per setting pair and run.
    #[arg(long)]
    shots: Option<u64>,
    /// Per-run angular jitter of every setting direction, in degrees.
    #[arg(long, allow_hyphen_values = true)]
    jitter_deg: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    white_noise: Option<f64>,
    #[arg(long, value_parser = ["uniform", "empirical"])]
    oe_weighting: Option<String>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

fn usage(e: impl std::fmt::Display) -> Failure {
    Failure::Usage(e.to_string())
}

impl RunArgs {
    fn config(&self) -> Result<PipelineConfig, Failure> {
        let mut cfg = PipelineConfig::default();
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path)
                .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
            cfg.apply_config_text(&text)
                .map_err(|e| usage(format!("{}: {e}", path.display())))?;
        }
        let mut flags: Vec<(&str, String)> = Vec::new();
        let mut push = |key, value: Option<String>| {
            if let Some(v) = value {
                flags.push((key, v));
            }
        };
        push("scenario", self.scenario.clone());
        push("theta_list", self.theta_list.clone());
        push("seed", self.seed.map(|v| v.to_string()));
        push("runs", self.runs.map(|v| v.to_string()));
        push("shots", self.shots.map(|v| v.to_string()));
        push("jitter_deg", self.jitter_deg.map(|v| v.to_string()));
        push("white_noise", self.white_noise.map(|v| v.to_string()));
        push("oe_weighting", self.oe_weighting.clone());
        push("counts", self.counts.as_ref().map(|p| p.display().to_string()));
        push("out_dir", self.out_dir.as_ref().map(|p| p.display().to_string()));
        if self.exact {
            flags.push(("exact", "true".into()));
        }
        for (key, value) in flags {
            cfg.set(key, &value).map_err(|e| usage(format!("--{}: {e}", key.replace('_', "-"))))?;
        }
        cfg.validate().map_err(usage)?;
        if cfg.exact && cfg.counts.is_some() {
            return Err(usage("--exact and --counts are mutually exclusive"));
        }
        Ok(cfg)
    }
}

fn cmd_simulate(args: &RunArgs) -> Result<(), Failure> {
    let cfg = args.config()?;
    if cfg.exact {
        return Err(usage("simulate samples counts; --exact does not apply"));
    }
    if cfg.counts.is_some() {
        return Err(usage("simulate writes count files; --counts does not apply"));
    }
    let scenario = Scenario::from_kind(cfg.scenario).map_err(usage)?;
    std::fs::create_dir_all(&cfg.out_dir)
        .with_context(|| format!("creating {}", cfg.out_dir.display()))?;
    for &theta in &cfg.theta_list {
        let counts = simulate_counts(theta, &scenario, &cfg.noise).with_context(|| format!("simulating theta {theta}"))?;
        let path = cfg.out_dir.join(format!("counts_{}_theta{theta}.csv", cfg.scenario));
        save_counts(&counts, &path).with_context(|| format!("writing {}", path.display()))?;
        println!("{}", path.display());
    }
    Ok(())
}

fn cmd_pipeline(args: &RunArgs) -> Result<(), Failure> {
    let cfg = args.config()?;
    if let Some(path) = &cfg.counts {
        if !path.exists() {
            return Err(usage(format!("count file {} does not exist", path.display())));
        }
    }
    let report = run_pipeline(&cfg).context("pipeline failed")?;
    let (json, csv) = write_outputs(&report, &cfg.out_dir).context("writing outputs")?;
    println!("{}", json.display());
    println!("{}", csv.display());
    Ok(())
}

fn cmd_report(path: &Path) -> Result<(), Failure> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(usage(format!("report {} not found", path.display())))
        }
        Err(e) => return Err(Failure::Runtime(anyhow::Error::new(e).context(format!("reading {}", path.display())))),
    };
    let report = parse_report(&text).with_context(|| format!("parsing {}", path.display()))?;
    print!("{}", summary::render(&report));
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Simulate(args) => cmd_simulate(args),
        Command::Pipeline(args) => cmd_pipeline(args),
        Command::Report { path } => cmd_report(path),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
