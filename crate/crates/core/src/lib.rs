//! A small from-scratch CNN toolkit built around two DenseNet-style classifiers for
//! 64×64 images: channel-concatenating skip connections, receptive-field analysis,
//! seeded augmentation pipelines, cyclical learning rates with range escalation,
//! and a checkpointing training loop.

pub mod augment;
pub mod error;
pub mod graph;
pub mod optim;
pub mod rf;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{GraphSpec, NodeKind, Params, WidthPlan};
pub use tensor::{Shape, Tensor};
pub use train::{Checkpoint, Dataset, TrainConfig, Trainer};
