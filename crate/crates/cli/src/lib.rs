//! Library behind the `tagrl` binary: run configuration, the run-directory
//! lock, subcommand implementations, and evaluation/reporting.

pub mod commands;
pub mod config;
pub mod error;
pub mod eval;
pub mod lock;

pub use commands::{
    cmd_eval, cmd_pipeline, cmd_report, cmd_score, cmd_train, Artifacts, ResponderKind,
    TrainStage,
};
pub use config::{load_config, EvalSection, PrmuSection, RegistryConfig, RunConfig, SftSection};
pub use error::CliError;
pub use eval::{
    evaluate, render_report, ChainLengthStats, HistogramBin, MetricsTable, OracleTextResponder,
    PolicyResponder, ReportBundle, Responder, RewardMeans, UniformAnswerResponder,
};
pub use lock::RunLock;
