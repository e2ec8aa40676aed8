//! Multi-head MLP with manual backpropagation.

pub mod checkpoint;
pub mod loss;
pub mod model;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use loss::{ce_loss, kd_loss, softmax};
pub use model::{Architecture, ForwardTrace, HeadSelector, LayerWeights, Model, FORMAT_VERSION};
pub use train::{train_step, train_task, Batch, Gradients, KdMode, LossBreakdown, Sgd, TrainConfig};
