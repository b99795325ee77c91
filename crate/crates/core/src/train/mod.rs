//! Dataset format, training configuration, the curriculum training loop,
//! checkpoints and evaluation.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod eval;
pub mod trainer;

pub use checkpoint::Checkpoint;
pub use config::{parse_curriculum, Network, ScheduleMode, Segment, TrainConfig};
pub use dataset::Dataset;
pub use eval::{argmax, class_soft_weights, evaluate, oversample_weights, ClassStats, EvalReport};
pub use trainer::{load_datasets, read_metrics, train, EpochSummary, MetricsRow, TrainOutcome, Trainer, METRICS_HEADER};
