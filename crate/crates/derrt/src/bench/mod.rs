//! Benchmark reproduction harness: experiment runners, report aggregation,
//! heat-map emission, and the command-line entry point.

pub mod cli;
pub mod heatmap;
pub mod model_io;
pub mod report;
pub mod runners;

pub use heatmap::{accumulate_dumps, emit_pgm, HeatmapSpec};
pub use model_io::{load_model, save_gru, save_hmm, ModelManifest, SteeringModelKind};
pub use report::{BenchmarkReport, PlannerAggregate, TrialRecord};
pub use runners::{
    run_bugtrap, run_passage, run_roundabout, BugtrapBenchConfig, PassageBenchConfig,
    RoundaboutBenchConfig,
};
