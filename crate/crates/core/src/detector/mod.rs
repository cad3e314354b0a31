//! The assembled detector: forward pass, inference, training and
//! persistence.

pub mod checkpoint;
pub mod head;
mod model;
pub mod objective;
pub mod schedule;
pub mod train;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Progress, MAGIC, VERSION,
};
pub use head::{Head, CLS_PRIOR};
pub use model::{postprocess, Detector, LevelOutput, LevelVars};
pub use objective::{detection_objective, match_batch, Objective};
pub use schedule::PlateauSchedule;
pub use train::{
    optimizer_for, train_step, EpochMetrics, FitReport, MetricsLog, Trainer, BEST_CHECKPOINT, LAST_CHECKPOINT,
    METRICS_FILE, NONFINITE_DUMP,
};
