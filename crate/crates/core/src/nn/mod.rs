//! Minimal reverse-mode differentiation engine and the layers, optimizer
//! and checkpoint format the odometry network needs.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod layers;
pub mod lstm;
pub mod optim;
pub mod params;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use graph::{GradFault, Gradients, Graph, OpKind, Var};
pub use layers::{dropout, BatchNorm2d, Conv2d, Linear};
pub use lstm::BiLstm;
pub use optim::Adagrad;
pub use params::{BufferId, LayerState, Mode, ParamId, TensorStore};
pub use tensor::{lit, DType, Real, Tensor};
