//! Orchestration: config, the learn loop, checkpoints, metrics, evaluation
//! and export.

mod checkpoint;
mod config;
mod metrics;
mod trainer;

pub use checkpoint::{
    write_atomic, Checkpoint, ExportedPolicy, ParamEntry, RngState, CHECKPOINT_MAGIC, EXPORT_MAGIC,
    FORMAT_VERSION,
};
pub use config::{AlgoConfig, ExtensionsConfig, RunConfig};
pub use metrics::{read_metrics, EpisodeSummary, MetricsRecord, MetricsWriter};
pub use trainer::{
    evaluate, evaluate_policy, export_policy, make_expert, policy_from_checkpoint, run_distill,
    run_training, run_training_with, EvalReport, IterationReport, RunOutput, Trainer,
    CHECKSUM_INTERVAL,
};
