//! Classification and segmentation networks, their loss, optimizer,
//! training loop and evaluation metrics.

mod check;
mod loss;
mod metrics;
mod model;
mod optim;
mod train;

pub use check::model_gradient_check;
pub use loss::{cross_entropy, cross_entropy_loss};
pub use metrics::{format_metric, ClassCounts, MetricsReport};
pub use model::{ForwardPass, Mode, Model, ModelConfig, Task};
pub use optim::{adam_step, cosine_lr, AdamConfig, AdamState};
pub use train::{batch_gradients, evaluate, targets, train, train_with, EpochRecord, TrainConfig, TrainingLog};
