//! The odometry network, its loss, windowed samples, training and
//! sliding-window inference.

pub mod config;
pub mod gradcheck;
pub mod infer;
pub mod loss;
pub mod network;
pub mod samples;
pub mod train;

pub use config::{layer_shapes, LayerShape, LossReduction, ModelConfig, TrainConfig};
pub use infer::infer_sequence;
pub use loss::{loss_parts, weighted_mse_loss, LossParts};
pub use network::{build_model, Model, Network};
pub use samples::{make_samples, make_samples_from_projected, SequenceSample};
pub use train::{train, EpochRecord, TrainSession};
