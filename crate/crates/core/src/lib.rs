//! Learned LiDAR odometry from panoramic range images.
//!
//! A scan is projected onto a 5-channel panoramic image (depth, intensity,
//! surface normal), consecutive images are stacked into 10-channel pairs,
//! and a convolutional encoder followed by a deep bidirectional LSTM
//! regresses the 6-DOF relative motion for every pair in a short window.
//!
//! Module map:
//!
//! - [`dataset_io`]: KITTI Velodyne scans, pose files and calibration.
//! - [`projection`]: spherical projection and normal estimation.
//! - [`geometry`]: rigid transforms, Euler angles and trajectory algebra.
//! - [`nn`]: a small reverse-mode differentiation engine with the layers
//!   the network needs, Adagrad, checkpoints and gradient checking.
//! - [`model`]: the network, its loss, windowed samples, training and
//!   sliding-window inference.
//! - [`evaluation`]: KITTI segment errors and instantaneous RMSE.
//! - [`synthetic`]: ray-cast scans of procedural worlds for testing.

pub mod dataset_io;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod model;
pub mod nn;
pub mod projection;
pub mod synthetic;

pub use error::{Error, Result};
pub use geometry::{Pose, RelPose6D};
