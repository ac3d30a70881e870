//! Simulation and analysis of bipartite communication-game contextuality
//! tests: quantum predictions, count simulation, GPT fitting, secondary
//! procedures and diagnostics.

pub mod error;
pub mod expsim;
pub mod gamescore;
pub mod qcore;
pub mod gptfit;
pub mod lp;
pub mod secondary;
pub mod diagnostics;
pub mod pipeline;

pub use diagnostics::{MassWeighting, NoSignalingReport, RunStatistics};
pub use error::{Error, Result};
pub use expsim::{JointCountTensor, NoiseModel, Side, Stage, StageDataMatrix};
pub use gamescore::{JointProbabilityTensor, Provenance, RegionLabel, Target, WinRule};
pub use gptfit::{GptFitResult, PlaneCoefficients};
pub use lp::{LinearProgram, LpSolution};
pub use pipeline::{run_pipeline, AnalysisReport, DataSource, PipelineConfig};
pub use qcore::{BlochVector, Bounds, Outcome, Scenario, ScenarioKind, TwoQubitState};
pub use secondary::{MixingWeights, OeWeighting, OverlapProblem, SecondaryResult};
