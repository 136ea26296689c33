//! KITTI odometry segment errors and instantaneous per-step RMSE.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset_io::format_kitti_pose;
use crate::error::{Error, Result};
use crate::geometry::{normalize_angle, pose_to_6dof, relative_pose, rotation_angle, Pose, RelPose6D};

/// Segment lengths in meters: 100, 200, ..., 800.
pub fn default_lengths() -> Vec<f64> {
    (1..=8).map(|k| 100.0 * k as f64).collect()
}

/// Cumulative distance travelled along the trajectory.
pub fn path_lengths(poses: &[Pose]) -> Vec<f64> {
    let mut out = Vec::with_capacity(poses.len());
    let mut total = 0.0;
    for (i, p) in poses.iter().enumerate() {
        if i > 0 {
            total += (p.translation - poses[i - 1].translation).norm();
        }
        out.push(total);
    }
    out
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    #[default]
    Mean,
    Rmse,
}

impl Aggregation {
    pub fn name(self) -> &'static str {
        match self {
            Aggregation::Mean => "mean",
            Aggregation::Rmse => "rmse",
        }
    }

    fn reduce(self, values: impl Iterator<Item = f64>) -> (f64, usize) {
        let (mut sum, mut n) = (0.0, 0usize);
        for v in values {
            sum += match self {
                Aggregation::Mean => v,
                Aggregation::Rmse => v * v,
            };
            n += 1;
        }
        if n == 0 {
            return (0.0, 0);
        }
        let m = sum / n as f64;
        match self {
            Aggregation::Mean => (m, n),
            Aggregation::Rmse => (m.sqrt(), n),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Segment lengths in meters.
    pub lengths: Vec<f64>,
    pub aggregation: Aggregation,
    /// Frames between segment start points.
    pub stride: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            lengths: default_lengths(),
            aggregation: Aggregation::Mean,
            stride: 1,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 {
            return Err(Error::Config("eval.stride must be at least 1".into()));
        }
        if self.lengths.is_empty() || self.lengths.iter().any(|l| !(l.is_finite() && *l > 0.0)) {
            return Err(Error::Config("eval.lengths must be positive".into()));
        }
        Ok(())
    }
}

/// Error of one segment: translation as a fraction of its length and
/// rotation in radians per meter.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Segment {
    pub first: usize,
    pub last: usize,
    pub length: f64,
    pub t_err: f64,
    pub r_err: f64,
}

/// Error of the predicted motion over one ground-truth segment.
pub fn segment_error(gt: &[Pose], pred: &[Pose], first: usize, last: usize, length: f64) -> Segment {
    let rel_gt = relative_pose(&gt[first], &gt[last]);
    let rel_pred = relative_pose(&pred[first], &pred[last]);
    let e = relative_pose(&rel_gt, &rel_pred);
    Segment {
        first,
        last,
        length,
        t_err: e.translation.norm() / length,
        r_err: rotation_angle(&e.rotation) / length,
    }
}

fn check_pair(gt: &[Pose], pred: &[Pose]) -> Result<()> {
    if gt.len() != pred.len() {
        return Err(Error::Shape(format!(
            "ground truth has {} poses, prediction has {}",
            gt.len(),
            pred.len()
        )));
    }
    Ok(())
}

/// Every segment of every length, ordered by start frame then length.
pub fn enumerate_segments(gt: &[Pose], pred: &[Pose], lengths: &[f64], stride: usize) -> Result<Vec<Segment>> {
    check_pair(gt, pred)?;
    if stride == 0 {
        return Err(Error::Config("segment stride must be at least 1".into()));
    }
    let dist = path_lengths(gt);
    let starts: Vec<usize> = (0..gt.len()).step_by(stride).collect();
    let per_start: Vec<Vec<Segment>> = starts
        .par_iter()
        .map(|&i| {
            lengths
                .iter()
                .filter_map(|&len| {
                    let target = dist[i] + len;
                    // Path lengths are non-decreasing, so the first frame
                    // reaching the target is a partition point.
                    let j = i + dist[i..].partition_point(|d| *d < target);
                    (j < gt.len()).then(|| segment_error(gt, pred, i, j, len))
                })
                .collect()
        })
        .collect();
    Ok(per_start.into_iter().flatten().collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LengthRecord {
    pub length: f64,
    /// Aggregated translation error, fraction.
    pub t_err: f64,
    /// Aggregated rotation error, radians per meter.
    pub r_err: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SegmentErrorReport {
    pub aggregation: Aggregation,
    pub records: Vec<LengthRecord>,
    /// Translation error over all segments, percent.
    pub t_rel: f64,
    /// Rotation error over all segments, degrees per 100 m.
    pub r_rel: f64,
    pub count: usize,
}

pub fn aggregate(segments: &[Segment], lengths: &[f64], aggregation: Aggregation) -> SegmentErrorReport {
    let records = lengths
        .iter()
        .map(|&len| {
            let of_len = || segments.iter().filter(move |s| s.length == len);
            let (t_err, count) = aggregation.reduce(of_len().map(|s| s.t_err));
            let (r_err, _) = aggregation.reduce(of_len().map(|s| s.r_err));
            LengthRecord {
                length: len,
                t_err,
                r_err,
                count,
            }
        })
        .collect();
    let (t, count) = aggregation.reduce(segments.iter().map(|s| s.t_err));
    let (r, _) = aggregation.reduce(segments.iter().map(|s| s.r_err));
    SegmentErrorReport {
        aggregation,
        records,
        t_rel: t * 100.0,
        r_rel: r.to_degrees() * 100.0,
        count,
    }
}

/// KITTI relative errors over segments of each of `cfg.lengths`.
/// Trajectories shorter than every length yield zero counts.
pub fn segment_errors(gt: &[Pose], pred: &[Pose], cfg: &EvalConfig) -> Result<SegmentErrorReport> {
    cfg.validate()?;
    let segments = enumerate_segments(gt, pred, &cfg.lengths, cfg.stride)?;
    Ok(aggregate(&segments, &cfg.lengths, cfg.aggregation))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct InstantaneousReport {
    /// RMSE of translation residual norms, meters.
    pub translation_rmse: f64,
    /// RMSE of wrapped Euler residual norms, radians.
    pub rotation_rmse: f64,
    /// RMSE per axis: tx, ty, tz, roll, pitch, yaw.
    pub per_axis: [f64; 6],
    pub count: usize,
}

/// Per-step relative-pose RMSE, without accumulation.
pub fn instantaneous_rmse(gt: &[RelPose6D], pred: &[RelPose6D]) -> Result<InstantaneousReport> {
    if gt.len() != pred.len() || gt.is_empty() {
        return Err(Error::Shape(format!(
            "need equal non-empty motion lists, got {} and {}",
            gt.len(),
            pred.len()
        )));
    }
    let mut axis = [0.0; 6];
    let (mut t_sq, mut r_sq) = (0.0, 0.0);
    for (g, p) in gt.iter().zip(pred) {
        let (g, p) = (g.to_array(), p.to_array());
        let mut d = [0.0; 6];
        for k in 0..6 {
            d[k] = p[k] - g[k];
            if k >= 3 {
                d[k] = normalize_angle(d[k]);
            }
            axis[k] += d[k] * d[k];
        }
        t_sq += d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
        r_sq += d[3] * d[3] + d[4] * d[4] + d[5] * d[5];
    }
    let n = gt.len() as f64;
    Ok(InstantaneousReport {
        translation_rmse: (t_sq / n).sqrt(),
        rotation_rmse: (r_sq / n).sqrt(),
        per_axis: axis.map(|v| (v / n).sqrt()),
        count: gt.len(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectoryFormat {
    Kitti,
    Csv,
}

impl FromStr for TrajectoryFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kitti" => Ok(Self::Kitti),
            "csv" => Ok(Self::Csv),
            _ => Err(Error::Config(format!("unknown trajectory format {s:?} (kitti or csv)"))),
        }
    }
}

pub const TRAJECTORY_CSV_HEADER: &str = "frame,tx,ty,tz,roll,pitch,yaw";

pub fn format_trajectory(poses: &[Pose], format: TrajectoryFormat) -> String {
    let mut out = String::new();
    match format {
        TrajectoryFormat::Kitti => {
            for p in poses {
                out.push_str(&format_kitti_pose(p));
                out.push('\n');
            }
        }
        TrajectoryFormat::Csv => {
            out.push_str(TRAJECTORY_CSV_HEADER);
            out.push('\n');
            for (i, p) in poses.iter().enumerate() {
                let v = pose_to_6dof(p).to_array();
                let _ = writeln!(
                    out,
                    "{i},{:e},{:e},{:e},{:e},{:e},{:e}",
                    v[0], v[1], v[2], v[3], v[4], v[5]
                );
            }
        }
    }
    out
}

pub fn export_trajectory(poses: &[Pose], path: impl AsRef<Path>, format: TrajectoryFormat) -> Result<()> {
    let path = path.as_ref();
    if poses.is_empty() {
        return Err(Error::Shape("cannot export an empty trajectory".into()));
    }
    fs::write(path, format_trajectory(poses, format)).map_err(|e| Error::io(path, e))
}

/// Relative motions as CSV, one row per frame transition.
pub fn format_motions_csv(motions: &[RelPose6D]) -> String {
    let mut out = String::from("pair,tx,ty,tz,roll,pitch,yaw\n");
    for (i, m) in motions.iter().enumerate() {
        let v = m.to_array();
        let _ = writeln!(
            out,
            "{i},{:e},{:e},{:e},{:e},{:e},{:e}",
            v[0], v[1], v[2], v[3], v[4], v[5]
        );
    }
    out
}

pub const SEGMENT_CSV_HEADER: &str = "aggregation,length_m,count,t_err_pct,r_err_deg_per_100m";

/// Per-length rows plus an `all` row for each report.
pub fn segment_report_csv(reports: &[&SegmentErrorReport]) -> String {
    let mut out = format!("{SEGMENT_CSV_HEADER}\n");
    for r in reports {
        let mode = r.aggregation.name();
        for rec in &r.records {
            let _ = writeln!(
                out,
                "{mode},{},{},{:.6},{:.6}",
                rec.length,
                rec.count,
                rec.t_err * 100.0,
                rec.r_err.to_degrees() * 100.0
            );
        }
        let _ = writeln!(out, "{mode},all,{},{:.6},{:.6}", r.count, r.t_rel, r.r_rel);
    }
    out
}

pub fn instantaneous_csv(r: &InstantaneousReport) -> String {
    let a = r.per_axis;
    format!(
        "count,translation_rmse_m,rotation_rmse_rad,tx,ty,tz,roll,pitch,yaw\n{},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9}\n",
        r.count, r.translation_rmse, r.rotation_rmse, a[0], a[1], a[2], a[3], a[4], a[5]
    )
}

pub fn summary_line(r: &SegmentErrorReport) -> String {
    format!("t_rel {:.2} % r_rel {:.2} deg/100m", r.t_rel, r.r_rel)
}

/// Human-readable table of a segment report.
pub fn format_table(r: &SegmentErrorReport) -> String {
    let mut out = format!(
        "{:>8} {:>8} {:>10} {:>16}   ({})\n",
        "length",
        "count",
        "t_err %",
        "r_err deg/100m",
        r.aggregation.name()
    );
    for rec in &r.records {
        let _ = writeln!(
            out,
            "{:>8} {:>8} {:>10.4} {:>16.4}",
            rec.length,
            rec.count,
            rec.t_err * 100.0,
            rec.r_err.to_degrees() * 100.0
        );
    }
    let _ = writeln!(out, "{:>8} {:>8} {:>10.4} {:>16.4}", "all", r.count, r.t_rel, r.r_rel);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{euler_to_rotation, sixdof_to_pose};
    use nalgebra::Vector3;
    use proptest::prelude::*;

    fn line(n: usize, step: f64) -> Vec<Pose> {
        (0..n)
            .map(|i| Pose::from_translation(i as f64 * step, 0.0, 0.0))
            .collect()
    }

    #[test]
    fn path_length_examples() {
        assert_eq!(path_lengths(&[Pose::identity()]), vec![0.0]);
        assert_eq!(path_lengths(&line(4, 1.0)), vec![0.0, 1.0, 2.0, 3.0]);
        let square = [(0., 0.), (1., 0.), (1., 1.), (0., 1.), (0., 0.)].map(|(x, y)| Pose::from_translation(x, y, 0.0));
        assert_eq!(path_lengths(&square), vec![0.0, 1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn identical_trajectories_have_zero_error() {
        let gt = line(300, 1.0);
        let r = segment_errors(&gt, &gt, &EvalConfig::default()).unwrap();
        assert_eq!((r.t_rel, r.r_rel), (0.0, 0.0));
        assert!(r.count > 0);
    }

    #[test]
    fn drift_gives_one_percent() {
        let gt = line(900, 1.0);
        let pred = line(900, 1.01);
        for aggregation in [Aggregation::Mean, Aggregation::Rmse] {
            let cfg = EvalConfig {
                aggregation,
                ..EvalConfig::default()
            };
            let r = segment_errors(&gt, &pred, &cfg).unwrap();
            assert!((r.t_rel - 1.0).abs() < 1e-6, "{r:?}");
            assert_eq!(r.r_rel, 0.0);
            assert_eq!(r.records[7].count, 900 - 800);
        }
    }

    #[test]
    fn short_trajectory_reports_zero_counts() {
        let gt = line(50, 1.0);
        let r = segment_errors(&gt, &gt, &EvalConfig::default()).unwrap();
        assert_eq!(r.count, 0);
        assert!(r.records.iter().all(|rec| rec.count == 0));
    }

    #[test]
    fn stride_thins_start_frames() {
        let gt = line(300, 1.0);
        let cfg = EvalConfig {
            stride: 10,
            ..EvalConfig::default()
        };
        let r = segment_errors(&gt, &gt, &cfg).unwrap();
        // Starts 0, 10, ..., 190 reach 100 m.
        assert_eq!(r.records[0].count, 20);
    }

    #[test]
    fn length_mismatch_is_an_error() {
        assert!(segment_errors(&line(3, 1.0), &line(4, 1.0), &EvalConfig::default()).is_err());
    }

    #[test]
    fn instantaneous_examples() {
        let gt = vec![RelPose6D::zero(); 5];
        let r = instantaneous_rmse(&gt, &gt).unwrap();
        assert_eq!(r.translation_rmse, 0.0);
        let pred = vec![RelPose6D::new(0.1, 0.0, 0.0, 0.0, 0.0, 0.0); 5];
        assert!((instantaneous_rmse(&gt, &pred).unwrap().translation_rmse - 0.1).abs() < 1e-15);
        let alt: Vec<RelPose6D> = (0..6)
            .map(|i| RelPose6D::new(0.0, 0.0, 0.0, 0.0, 0.0, if i % 2 == 0 { 0.02 } else { -0.02 }))
            .collect();
        let r = instantaneous_rmse(&vec![RelPose6D::zero(); 6], &alt).unwrap();
        assert!((r.rotation_rmse - 0.02).abs() < 1e-15);
        assert!((r.per_axis[5] - 0.02).abs() < 1e-15);
        assert!(instantaneous_rmse(&gt, &pred[..3]).is_err());
    }

    #[test]
    fn euler_residuals_wrap() {
        let gt = vec![RelPose6D::new(0.0, 0.0, 0.0, 0.0, 0.0, 3.1)];
        let pred = vec![RelPose6D::new(0.0, 0.0, 0.0, 0.0, 0.0, -3.1)];
        let r = instantaneous_rmse(&gt, &pred).unwrap();
        assert!((r.rotation_rmse - (2.0 * std::f64::consts::PI - 6.2)).abs() < 1e-12);
    }

    #[test]
    fn kitti_export_format() {
        let text = format_trajectory(&[Pose::identity()], TrajectoryFormat::Kitti);
        let values: Vec<f64> = text.split_whitespace().map(|v| v.parse().unwrap()).collect();
        assert_eq!(values, vec![1., 0., 0., 0., 0., 1., 0., 0., 0., 0., 1., 0.]);
        let csv = format_trajectory(&line(3, 1.0), TrajectoryFormat::Csv);
        assert_eq!(csv.matches(TRAJECTORY_CSV_HEADER).count(), 1);
        assert_eq!(csv.lines().count(), 4);
    }

    #[test]
    fn summary_of_perfect_prediction() {
        let gt = line(300, 1.0);
        let r = segment_errors(&gt, &gt, &EvalConfig::default()).unwrap();
        assert_eq!(summary_line(&r), "t_rel 0.00 % r_rel 0.00 deg/100m");
        let csv = segment_report_csv(&[&r]);
        assert_eq!(csv.lines().count(), 1 + 8 + 1);
    }

    fn wiggly(n: usize, seed: u64) -> Vec<Pose> {
        let mut p = Pose::identity();
        let mut out = vec![p];
        for i in 1..n {
            let a = ((i as u64 * 7 + seed) % 13) as f64 / 13.0 - 0.5;
            let step = sixdof_to_pose(&RelPose6D::new(3.0, 0.2 * a, 0.05 * a, 0.01 * a, -0.02 * a, 0.05 * a));
            p = p * step;
            out.push(p);
        }
        out
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn invariant_under_common_rigid_transform(
            yaw in -3.0f64..3.0, pitch in -1.0f64..1.0, roll in -3.0f64..3.0,
            tx in -50.0f64..50.0, ty in -50.0f64..50.0, seed in 0u64..100
        ) {
            let t = Pose::new(euler_to_rotation(roll, pitch, yaw), Vector3::new(tx, ty, 1.0));
            let gt = wiggly(120, seed);
            let pred = wiggly(120, seed + 1);
            let cfg = EvalConfig { lengths: vec![100.0, 200.0], ..EvalConfig::default() };
            let a = segment_errors(&gt, &pred, &cfg).unwrap();
            let tg: Vec<Pose> = gt.iter().map(|p| t * *p).collect();
            let tp: Vec<Pose> = pred.iter().map(|p| t * *p).collect();
            let b = segment_errors(&tg, &tp, &cfg).unwrap();
            prop_assert_eq!(a.count, b.count);
            prop_assert!((a.t_rel - b.t_rel).abs() < 1e-9);
            prop_assert!((a.r_rel - b.r_rel).abs() < 1e-9);
        }

        #[test]
        fn rotation_error_is_symmetric(seed in 0u64..1000) {
            let gt = wiggly(100, seed);
            let pred = wiggly(100, seed + 3);
            for s in enumerate_segments(&gt, &pred, &[100.0], 1).unwrap() {
                let swapped = segment_error(&pred, &gt, s.first, s.last, s.length);
                prop_assert!((swapped.r_err - s.r_err).abs() < 1e-12);
            }
        }
    }
}
