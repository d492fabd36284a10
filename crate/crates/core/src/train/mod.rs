//! AdamW under a OneCycle schedule, the training loop, and R² metrics.

mod fit;
mod metrics;
mod optim;

pub use fit::{train, LogEntry, TrainConfig, TrainOutcome};
pub use metrics::{
    evaluate_r2, predict_rows, prediction_accuracy, r2_score, targets_of, R2Report,
};
pub use optim::{adamw_step, onecycle_lr, AdamWConfig, OptimState, ScheduleConfig};
