use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::network::Model;
use super::samples::stack_windows;
use crate::error::{Error, Result};
use crate::geometry::RelPose6D;
use crate::nn::params::Mode;
use crate::nn::tensor::Real;
use crate::projection::FrameChannels;

/// Windows evaluated per forward pass during inference.
pub const INFERENCE_BATCH: usize = 16;

/// Relative motion for every consecutive frame pair of a sequence.
///
/// Each stride-1 window starts from a zero LSTM state and contributes its
/// last-step prediction. The first window also contributes its earlier
/// steps, so the output has `frames.len() - 1` entries.
pub fn infer_sequence<T: Real>(model: &mut Model<T>, frames: &[Arc<FrameChannels>]) -> Result<Vec<RelPose6D>> {
    let s = model.config().seq_len;
    if frames.len() < s + 1 {
        return Err(Error::Shape(format!(
            "inference needs at least {} frames, got {}",
            s + 1,
            frames.len()
        )));
    }
    let starts: Vec<usize> = (0..frames.len() - s).collect();
    let mut out = Vec::with_capacity(frames.len() - 1);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for chunk in starts.chunks(INFERENCE_BATCH) {
        let windows: Vec<&[Arc<FrameChannels>]> = chunk.iter().map(|t| &frames[*t..=*t + s]).collect();
        let y = model
            .predict(stack_windows::<T>(&windows)?, Mode::Inference, &mut rng)?
            .to_f64_vec();
        for (b, t) in chunk.iter().enumerate() {
            let first = if *t == 0 { 0 } else { s - 1 };
            for k in first..s {
                let o = (b * s + k) * 6;
                out.push(RelPose6D::from_array(y[o..o + 6].try_into().unwrap()));
            }
        }
    }
    Ok(out)
}
