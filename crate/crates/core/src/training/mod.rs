//! Optimizer, learning-rate schedule, checkpoints, the pre-training loop,
//! and the linear-probe evaluation.

mod adamw;
mod checkpoint;
mod lr;
mod pretrain;
mod probe;

pub use adamw::{adamw_update, AdamWConfig, OptimState};
pub use checkpoint::{Checkpoint, GroupsFilter, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use lr::LrSchedule;
pub use pretrain::{
    evaluate, metrics_csv, mix_seed, pretrain, write_metrics_csv, StepMetrics, TrainConfig,
    TrainOutcome, METRICS_HEADER,
};
pub use probe::{linear_probe, prepare_strategy, probe_features, ProbeConfig, ProbeReport};
