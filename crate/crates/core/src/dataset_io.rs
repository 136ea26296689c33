//! KITTI odometry on-disk formats.
//!
//! Layout under a dataset root:
//!
//! ```text
//! sequences/<id>/velodyne/<frame:06>.bin
//! sequences/<id>/calib.txt
//! poses/<id>.txt
//! ```

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Pose, REORTHONORMALIZE_TOLERANCE};

pub const BYTES_PER_POINT: usize = 16;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Point {
    pub x: f32,
    pub y: f32,
    pub z: f32,
    pub intensity: f32,
}

impl Point {
    pub fn new(x: f32, y: f32, z: f32, intensity: f32) -> Self {
        Self { x, y, z, intensity }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite() && self.intensity.is_finite()
    }
}

/// One LiDAR revolution.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point>,
    pub frame_index: usize,
}

impl PointCloud {
    pub fn new(points: Vec<Point>, frame_index: usize) -> Self {
        Self { points, frame_index }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Sanitation counters gathered while parsing a scan.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ScanStats {
    pub dropped_non_finite: usize,
    pub clamped_intensity: usize,
}

/// Parses little-endian `(x, y, z, intensity)` float quadruples.
///
/// Non-finite points are dropped and intensities are clamped to `[0, 1]`.
pub fn parse_velodyne_bytes(bytes: &[u8], frame_index: usize, path: &Path) -> Result<(PointCloud, ScanStats)> {
    if !bytes.len().is_multiple_of(BYTES_PER_POINT) {
        let offset = bytes.len() - bytes.len() % BYTES_PER_POINT;
        return Err(Error::format(
            path,
            format!(
                "length {} is not a multiple of {BYTES_PER_POINT}; trailing partial point at byte offset {offset}",
                bytes.len()
            ),
        ));
    }
    let mut stats = ScanStats::default();
    let mut points = Vec::with_capacity(bytes.len() / BYTES_PER_POINT);
    for chunk in bytes.chunks_exact(BYTES_PER_POINT) {
        let f = |i: usize| f32::from_le_bytes(chunk[i * 4..i * 4 + 4].try_into().unwrap());
        let mut p = Point::new(f(0), f(1), f(2), f(3));
        if !p.is_finite() {
            stats.dropped_non_finite += 1;
            continue;
        }
        if !(0.0..=1.0).contains(&p.intensity) {
            stats.clamped_intensity += 1;
            p.intensity = p.intensity.clamp(0.0, 1.0);
        }
        points.push(p);
    }
    Ok((PointCloud::new(points, frame_index), stats))
}

/// Reads a Velodyne `.bin` scan. The frame index is taken from a numeric
/// file stem (`000042.bin` -> 42) and is 0 otherwise.
pub fn read_velodyne_bin(path: impl AsRef<Path>) -> Result<(PointCloud, ScanStats)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let frame_index = path
        .file_stem()
        .and_then(|s| s.to_str())
        .and_then(|s| s.parse().ok())
        .unwrap_or(0);
    let (cloud, stats) = parse_velodyne_bytes(&bytes, frame_index, path)?;
    if stats.dropped_non_finite > 0 || stats.clamped_intensity > 0 {
        warn!(
            "{}: dropped {} non-finite points, clamped {} intensities",
            path.display(),
            stats.dropped_non_finite,
            stats.clamped_intensity
        );
    }
    Ok((cloud, stats))
}

pub fn encode_velodyne(cloud: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(cloud.len() * BYTES_PER_POINT);
    for p in &cloud.points {
        for v in [p.x, p.y, p.z, p.intensity] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn write_velodyne_bin(path: impl AsRef<Path>, cloud: &PointCloud) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_velodyne(cloud)).map_err(|e| Error::io(path, e))
}

fn parse_reals(text: &str) -> std::result::Result<Vec<f64>, String> {
    text.split_whitespace()
        .map(|tok| tok.parse::<f64>().map_err(|_| format!("unparseable number {tok:?}")))
        .collect()
}

fn pose_from_reals(values: &[f64]) -> Pose {
    let arr: [f64; 12] = values.try_into().expect("caller checked length");
    let pose = Pose::from_row_major_3x4(&arr);
    if pose.orthonormality_error() > REORTHONORMALIZE_TOLERANCE {
        pose.orthonormalized()
    } else {
        pose
    }
}

/// Parses KITTI pose text: one row-major 3x4 matrix per non-empty line.
pub fn parse_kitti_poses(text: &str, path: &Path) -> Result<Vec<Pose>> {
    let mut poses = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let values = parse_reals(line).map_err(|m| Error::format(path, format!("line {}: {m}", lineno + 1)))?;
        if values.len() != 12 {
            return Err(Error::format(
                path,
                format!("line {}: expected 12 values, found {}", lineno + 1, values.len()),
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::format(path, format!("line {}: non-finite value", lineno + 1)));
        }
        poses.push(pose_from_reals(&values));
    }
    Ok(poses)
}

pub fn read_kitti_poses(path: impl AsRef<Path>) -> Result<Vec<Pose>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_kitti_poses(&text, path)
}

pub fn format_kitti_pose(pose: &Pose) -> String {
    pose.to_row_major_3x4()
        .iter()
        .map(|v| format!("{v:e}"))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn write_kitti_poses(path: impl AsRef<Path>, poses: &[Pose]) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::new();
    for pose in poses {
        text.push_str(&format_kitti_pose(pose));
        text.push('\n');
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Extracts the `Tr:` LiDAR-to-camera extrinsic from calibration text.
pub fn parse_calibration(text: &str, path: &Path) -> Result<Pose> {
    for line in text.lines() {
        let Some((key, rest)) = line.split_once(':') else {
            continue;
        };
        if key.trim() != "Tr" {
            continue;
        }
        let values = parse_reals(rest).map_err(|m| Error::format(path, format!("Tr: {m}")))?;
        if values.len() != 12 {
            return Err(Error::format(
                path,
                format!("Tr: expected 12 values, found {}", values.len()),
            ));
        }
        return Ok(pose_from_reals(&values));
    }
    Err(Error::format(path, "missing \"Tr:\" entry"))
}

pub fn read_calibration(path: impl AsRef<Path>) -> Result<Pose> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_calibration(&text, path)
}

/// Re-expresses camera-frame poses in the LiDAR frame: `Tr⁻¹ · P · Tr`.
pub fn poses_to_lidar_frame(poses: &[Pose], tr: &Pose) -> Vec<Pose> {
    let tr_inv = tr.inverse();
    poses.iter().map(|p| tr_inv * *p * *tr).collect()
}

/// Two-digit KITTI sequence identifier.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SequenceId(pub u8);

impl fmt::Display for SequenceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:02}", self.0)
    }
}

impl std::str::FromStr for SequenceId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        s.trim()
            .parse::<u8>()
            .ok()
            .filter(|v| *v < 100)
            .map(SequenceId)
            .ok_or_else(|| Error::Config(format!("invalid sequence id {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    pub train: Vec<SequenceId>,
    pub test: Vec<SequenceId>,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            train: (0..=8).map(SequenceId).collect(),
            test: vec![SequenceId(9), SequenceId(10)],
        }
    }
}

/// Validates a train/test split and returns it sorted and de-duplicated.
pub fn sequence_split(cfg: &SplitConfig) -> Result<(Vec<SequenceId>, Vec<SequenceId>)> {
    let mut train = cfg.train.clone();
    let mut test = cfg.test.clone();
    train.sort();
    train.dedup();
    test.sort();
    test.dedup();
    if let Some(id) = train.iter().find(|id| test.contains(id)) {
        return Err(Error::Config(format!("sequence {id} is listed in both train and test")));
    }
    if let Some(id) = train.iter().chain(&test).find(|id| id.0 > 99) {
        return Err(Error::Config(format!("sequence id {} out of range", id.0)));
    }
    Ok((train, test))
}

/// Paths inside a KITTI odometry dataset root.
#[derive(Clone, Debug)]
pub struct KittiLayout {
    pub root: PathBuf,
}

impl KittiLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn sequence_dir(&self, seq: SequenceId) -> PathBuf {
        self.root.join("sequences").join(seq.to_string())
    }

    pub fn velodyne_dir(&self, seq: SequenceId) -> PathBuf {
        self.sequence_dir(seq).join("velodyne")
    }

    pub fn scan_path(&self, seq: SequenceId, frame: usize) -> PathBuf {
        self.velodyne_dir(seq).join(format!("{frame:06}.bin"))
    }

    pub fn calib_path(&self, seq: SequenceId) -> PathBuf {
        self.sequence_dir(seq).join("calib.txt")
    }

    pub fn poses_path(&self, seq: SequenceId) -> PathBuf {
        self.root.join("poses").join(format!("{seq}.txt"))
    }

    /// Sorted scan files of a sequence.
    pub fn scan_paths(&self, seq: SequenceId) -> Result<Vec<PathBuf>> {
        let dir = self.velodyne_dir(seq);
        let entries = fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut paths = Vec::new();
        for entry in entries {
            let entry = entry.map_err(|e| Error::io(&dir, e))?;
            let path = entry.path();
            if path.extension().is_some_and(|e| e == "bin") {
                paths.push(path);
            }
        }
        paths.sort();
        Ok(paths)
    }

    /// Ground-truth poses of a sequence, converted to the LiDAR frame.
    pub fn lidar_poses(&self, seq: SequenceId) -> Result<Vec<Pose>> {
        let poses = read_kitti_poses(self.poses_path(seq))?;
        let tr = read_calibration(self.calib_path(seq))?;
        Ok(poses_to_lidar_frame(&poses, &tr))
    }
}
