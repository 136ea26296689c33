use std::sync::Arc;

use log::warn;

use crate::error::{Error, Result};
use crate::geometry::{pose_to_6dof, relative_pose, Pose, RelPose6D};
use crate::nn::tensor::{lit, Real, Tensor};
use crate::projection::{FrameChannels, ProjectedFrame, PAIR_CHANNELS};

/// One training window: `S + 1` consecutive frames and the `S` relative
/// motions between them. Frames are shared with neighbouring windows.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceSample {
    pub frames: Vec<Arc<FrameChannels>>,
    pub targets: Vec<RelPose6D>,
}

impl SequenceSample {
    pub fn seq_len(&self) -> usize {
        self.targets.len()
    }
}

/// Stride-1 sliding windows of length `s` over one sequence.
pub fn make_samples(frames: &[Arc<FrameChannels>], poses: &[Pose], s: usize) -> Result<Vec<SequenceSample>> {
    if frames.len() != poses.len() {
        return Err(Error::Shape(format!(
            "{} frames but {} poses",
            frames.len(),
            poses.len()
        )));
    }
    if s == 0 {
        return Err(Error::Config("sequence length must be at least 1".into()));
    }
    if frames.len() < s + 1 {
        warn!(
            "sequence of {} frames is too short for windows of {s} pairs; no samples",
            frames.len()
        );
        return Ok(Vec::new());
    }
    let motions: Vec<RelPose6D> = poses
        .windows(2)
        .map(|w| pose_to_6dof(&relative_pose(&w[0], &w[1])))
        .collect();
    Ok((0..frames.len() - s)
        .map(|t| SequenceSample {
            frames: frames[t..=t + s].to_vec(),
            targets: motions[t..t + s].to_vec(),
        })
        .collect())
}

/// [`make_samples`] over projected frames.
pub fn make_samples_from_projected(frames: &[ProjectedFrame], poses: &[Pose], s: usize) -> Result<Vec<SequenceSample>> {
    let channels: Vec<Arc<FrameChannels>> = frames.iter().map(|f| Arc::new(f.channels())).collect();
    make_samples(&channels, poses, s)
}

/// Stacks windows into the `[B, S, 10, H, W]` network input. Window `b`
/// covers `frames[b]` with pair `k` made of frames `k` and `k + 1`.
pub fn stack_windows<T: Real>(windows: &[&[Arc<FrameChannels>]]) -> Result<Tensor<T>> {
    let first = windows
        .first()
        .and_then(|w| w.first())
        .ok_or_else(|| Error::Shape("cannot stack an empty batch".into()))?;
    let (h, w) = (first.height, first.width);
    let steps = windows[0].len() - 1;
    if steps == 0 {
        return Err(Error::Shape("a window needs at least two frames".into()));
    }
    let frame_len = first.data.len();
    let mut data = Vec::with_capacity(windows.len() * steps * 2 * frame_len);
    for win in windows {
        if win.len() != steps + 1 {
            return Err(Error::Shape("windows in a batch differ in length".into()));
        }
        for pair in win.windows(2) {
            for f in pair {
                if f.height != h || f.width != w {
                    return Err(Error::Shape(format!(
                        "frame {}x{} does not match {h}x{w}",
                        f.height, f.width
                    )));
                }
                data.extend(f.data.iter().map(|v| lit::<T>(*v as f64)));
            }
        }
    }
    Tensor::new(vec![windows.len(), steps, PAIR_CHANNELS, h, w], data)
}

pub fn batch_inputs<T: Real>(samples: &[&SequenceSample]) -> Result<Tensor<T>> {
    let windows: Vec<&[Arc<FrameChannels>]> = samples.iter().map(|s| s.frames.as_slice()).collect();
    stack_windows(&windows)
}

/// Targets of a batch, flattened `[B, S, 6]`.
pub fn batch_targets(samples: &[&SequenceSample]) -> Vec<f64> {
    samples
        .iter()
        .flat_map(|s| s.targets.iter().flat_map(|t| t.to_array()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{euler_to_rotation, Pose};
    use nalgebra::Vector3;

    fn frames(n: usize) -> Vec<Arc<FrameChannels>> {
        (0..n)
            .map(|i| {
                Arc::new(FrameChannels {
                    height: 2,
                    width: 4,
                    data: vec![i as f32; 5 * 8],
                })
            })
            .collect()
    }

    fn line(n: usize) -> Vec<Pose> {
        (0..n).map(|i| Pose::from_translation(i as f64, 0.0, 0.0)).collect()
    }

    #[test]
    fn window_counts() {
        assert_eq!(make_samples(&frames(5), &line(5), 4).unwrap().len(), 1);
        let two = make_samples(&frames(6), &line(6), 4).unwrap();
        assert_eq!(two.len(), 2);
        assert_eq!(two[1].frames[0].data[0], 1.0);
        assert_eq!(two[1].frames[4].data[0], 5.0);
        assert!(make_samples(&frames(4), &line(4), 4).unwrap().is_empty());
    }

    #[test]
    fn targets_are_relative_motions() {
        let poses: Vec<Pose> = (0..5)
            .map(|i| {
                Pose::new(
                    euler_to_rotation(0.0, 0.0, 0.1 * i as f64),
                    Vector3::new(i as f64, 0.5 * i as f64, 0.0),
                )
            })
            .collect();
        let s = make_samples(&frames(5), &poses, 4).unwrap();
        for (k, t) in s[0].targets.iter().enumerate() {
            let expected = pose_to_6dof(&relative_pose(&poses[k], &poses[k + 1]));
            assert_eq!(*t, expected);
            assert!((t.yaw - 0.1).abs() < 1e-12);
        }
    }

    #[test]
    fn stationary_targets_are_zero() {
        let poses = vec![Pose::identity(); 6];
        for s in make_samples(&frames(6), &poses, 4).unwrap() {
            assert!(s.targets.iter().all(|t| t.to_array() == [0.0; 6]));
        }
    }

    #[test]
    fn batch_layout() {
        let s = make_samples(&frames(6), &line(6), 2).unwrap();
        let refs: Vec<&SequenceSample> = s.iter().take(2).collect();
        let x: Tensor<f32> = batch_inputs(&refs).unwrap();
        assert_eq!(x.shape(), &[2, 2, 10, 2, 4]);
        let pair = 10 * 8;
        // Batch 1, step 1 holds frames 2 and 3.
        let o = (2 + 1) * pair;
        assert_eq!(x.data()[o], 2.0);
        assert_eq!(x.data()[o + 40], 3.0);
        assert_eq!(batch_targets(&refs).len(), 2 * 2 * 6);
    }

    #[test]
    fn length_mismatch() {
        assert!(make_samples(&frames(5), &line(4), 2).is_err());
    }
}
