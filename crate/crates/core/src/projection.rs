//! Spherical projection of a scan onto a panoramic image.
//!
//! Columns follow azimuth (`atan2(y, x)`, wrapping at the image border) and
//! rows follow elevation. Each pixel keeps the closest return; the frame
//! carries depth, intensity and a cross-product surface normal.

use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::dataset_io::{Point, PointCloud};
use crate::error::{Error, Result};

/// Channels per projected frame: depth, intensity, nx, ny, nz.
pub const FRAME_CHANNELS: usize = 5;
/// Channels of a stacked consecutive pair.
pub const PAIR_CHANNELS: usize = 2 * FRAME_CHANNELS;

const NORMAL_DEGENERACY: f64 = 1e-12;
const BLOB_MAGIC: [u8; 4] = *b"LRCF";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProjectionConfig {
    pub width: usize,
    pub height: usize,
    /// Radians above the horizon.
    pub fov_up: f64,
    /// Radians below the horizon, as a positive magnitude.
    pub fov_down: f64,
    /// Depth normalization ceiling in meters.
    pub max_range: f64,
}

impl Default for ProjectionConfig {
    /// 64-beam sensor, 0.4° azimuth resolution.
    fn default() -> Self {
        Self {
            width: 900,
            height: 64,
            fov_up: 3.0f64.to_radians(),
            fov_down: 25.0f64.to_radians(),
            max_range: 80.0,
        }
    }
}

impl ProjectionConfig {
    pub fn fov(&self) -> f64 {
        self.fov_up + self.fov_down
    }

    pub fn validate(&self) -> Result<()> {
        if self.width < 2 || self.height < 2 {
            return Err(Error::Config(format!(
                "projection image must be at least 2x2, got {}x{}",
                self.height, self.width
            )));
        }
        if !(self.fov().is_finite() && self.fov() > 0.0) {
            return Err(Error::Config("vertical field of view must be positive".into()));
        }
        if !(self.max_range.is_finite() && self.max_range > 0.0) {
            return Err(Error::Config("max_range must be positive".into()));
        }
        Ok(())
    }

    /// Azimuth of the center of column `u`.
    pub fn column_azimuth(&self, u: usize) -> f64 {
        PI * (1.0 - 2.0 * (u as f64 + 0.5) / self.width as f64)
    }

    /// Elevation of the center of row `v`.
    pub fn row_elevation(&self, v: usize) -> f64 {
        (1.0 - (v as f64 + 0.5) / self.height as f64) * self.fov() - self.fov_up
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PixelHit {
    pub u: usize,
    pub v: usize,
    pub d: f64,
}

/// Maps a point to its pixel, or `None` when it lies outside the vertical
/// field of view or at the origin.
pub fn project_point(p: &Point, cfg: &ProjectionConfig) -> Option<PixelHit> {
    let (x, y, z) = (p.x as f64, p.y as f64, p.z as f64);
    let d = (x * x + y * y + z * z).sqrt();
    if !(d > 0.0) {
        return None;
    }
    let w = cfg.width as f64;
    let h = cfg.height as f64;
    let u_raw = (0.5 * (1.0 - y.atan2(x) / PI) * w).floor();
    let u = (u_raw as i64).rem_euclid(cfg.width as i64) as usize;
    let elevation = (z / d).clamp(-1.0, 1.0).asin();
    let v_raw = ((1.0 - (elevation + cfg.fov_up) / cfg.fov()) * h).floor();
    if !(0.0..h).contains(&v_raw) {
        return None;
    }
    Some(PixelHit {
        u,
        v: v_raw as usize,
        d,
    })
}

/// Panoramic image of one scan. All per-pixel vectors are row-major `h×w`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectedFrame {
    pub height: usize,
    pub width: usize,
    /// `min(d, max_range) / max_range`
    pub depth: Vec<f64>,
    pub intensity: Vec<f64>,
    pub normal: Vec<[f64; 3]>,
    /// Sensor-frame coordinates of the selected point.
    pub xyz: Vec<[f64; 3]>,
    pub valid: Vec<bool>,
    /// Index into the source cloud of the selected point.
    pub source: Vec<Option<usize>>,
}

impl ProjectedFrame {
    pub fn empty(height: usize, width: usize) -> Self {
        let n = height * width;
        Self {
            height,
            width,
            depth: vec![0.0; n],
            intensity: vec![0.0; n],
            normal: vec![[0.0; 3]; n],
            xyz: vec![[0.0; 3]; n],
            valid: vec![false; n],
            source: vec![None; n],
        }
    }

    #[inline]
    pub fn index(&self, v: usize, u: usize) -> usize {
        v * self.width + u
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    /// Model-input channels `[depth, intensity, nx, ny, nz]`.
    pub fn channels(&self) -> FrameChannels {
        let n = self.height * self.width;
        let mut data = vec![0.0f32; FRAME_CHANNELS * n];
        for i in 0..n {
            data[i] = self.depth[i] as f32;
            data[n + i] = self.intensity[i] as f32;
            for k in 0..3 {
                data[(2 + k) * n + i] = self.normal[i][k] as f32;
            }
        }
        FrameChannels {
            height: self.height,
            width: self.width,
            data,
        }
    }
}

/// Nearest-return range image; the normal channel is left at zero.
pub fn build_range_image(cloud: &PointCloud, cfg: &ProjectionConfig) -> ProjectedFrame {
    let mut frame = ProjectedFrame::empty(cfg.height, cfg.width);
    let mut best = vec![f64::INFINITY; cfg.height * cfg.width];
    for (idx, p) in cloud.points.iter().enumerate() {
        let Some(hit) = project_point(p, cfg) else {
            continue;
        };
        let pix = frame.index(hit.v, hit.u);
        // Strict comparison keeps the earliest point on ties.
        if hit.d < best[pix] {
            best[pix] = hit.d;
            frame.source[pix] = Some(idx);
        }
    }
    for pix in 0..best.len() {
        let Some(idx) = frame.source[pix] else {
            continue;
        };
        let p = &cloud.points[idx];
        frame.valid[pix] = true;
        frame.depth[pix] = best[pix].min(cfg.max_range) / cfg.max_range;
        frame.intensity[pix] = p.intensity.clamp(0.0, 1.0) as f64;
        frame.xyz[pix] = [p.x as f64, p.y as f64, p.z as f64];
    }
    frame
}

/// Fills the normal channel from the right (wrapping) and lower neighbors,
/// oriented toward the sensor.
pub fn compute_normals(mut frame: ProjectedFrame) -> ProjectedFrame {
    let (h, w) = (frame.height, frame.width);
    let xyz = |f: &ProjectedFrame, i: usize| Vector3::from(f.xyz[i]);
    for v in 0..h {
        for u in 0..w {
            let center = frame.index(v, u);
            let mut n = [0.0; 3];
            if frame.valid[center] && v + 1 < h {
                let right = frame.index(v, (u + 1) % w);
                let down = frame.index(v + 1, u);
                if frame.valid[right] && frame.valid[down] {
                    let c = xyz(&frame, center);
                    let a = xyz(&frame, right) - c;
                    let b = xyz(&frame, down) - c;
                    let cross = a.cross(&b);
                    let norm = cross.norm();
                    if norm >= NORMAL_DEGENERACY {
                        let mut unit = cross / norm;
                        if unit.dot(&(-c)) < 0.0 {
                            unit = -unit;
                        }
                        n = [unit[0], unit[1], unit[2]];
                    }
                }
            }
            frame.normal[center] = n;
        }
    }
    frame
}

/// Range image plus normals.
pub fn project_cloud(cloud: &PointCloud, cfg: &ProjectionConfig) -> ProjectedFrame {
    compute_normals(build_range_image(cloud, cfg))
}

/// Affine `[-1, 1] -> [0, 1]` map of the normals, for image export only.
pub fn normals_to_rgb(frame: &ProjectedFrame) -> Vec<[f64; 3]> {
    frame
        .normal
        .iter()
        .map(|n| [(n[0] + 1.0) / 2.0, (n[1] + 1.0) / 2.0, (n[2] + 1.0) / 2.0])
        .collect()
}

/// Channel-major `[5, h, w]` model input for one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameChannels {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl FrameChannels {
    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.data.len() * 4);
        out.extend_from_slice(&BLOB_MAGIC);
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        out.extend_from_slice(&(FRAME_CHANNELS as u32).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < 16 || bytes[..4] != BLOB_MAGIC {
            return Err(Error::format(path, "not a frame blob (bad magic)"));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
        let (height, width, channels) = (word(4), word(8), word(12));
        if channels != FRAME_CHANNELS {
            return Err(Error::format(
                path,
                format!("expected {FRAME_CHANNELS} channels, found {channels}"),
            ));
        }
        let expected = 16 + 4 * channels * height * width;
        if bytes.len() != expected {
            return Err(Error::format(
                path,
                format!("expected {expected} bytes for {height}x{width}, found {}", bytes.len()),
            ));
        }
        let data = bytes[16..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self { height, width, data })
    }
}

pub fn write_frame_blob(path: impl AsRef<Path>, frame: &FrameChannels) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, frame.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_frame_blob(path: impl AsRef<Path>) -> Result<FrameChannels> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    FrameChannels::from_bytes(&bytes, path)
}

/// Two consecutive frames stacked into `[10, h, w]`:
/// `[depth_t, intensity_t, n_t, depth_t+1, intensity_t+1, n_t+1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FramePair {
    pub height: usize,
    pub width: usize,
    pub channels: Vec<f32>,
}

pub fn stack_channels(a: &FrameChannels, b: &FrameChannels) -> Result<FramePair> {
    if a.height != b.height || a.width != b.width {
        return Err(Error::Shape(format!(
            "cannot stack {}x{} with {}x{}",
            a.height, a.width, b.height, b.width
        )));
    }
    let mut channels = Vec::with_capacity(a.data.len() * 2);
    channels.extend_from_slice(&a.data);
    channels.extend_from_slice(&b.data);
    Ok(FramePair {
        height: a.height,
        width: a.width,
        channels,
    })
}

pub fn stack_pair(a: &ProjectedFrame, b: &ProjectedFrame) -> Result<FramePair> {
    stack_channels(&a.channels(), &b.channels())
}

fn write_netpbm(path: &Path, header: String, body: &[u8]) -> Result<()> {
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(header.as_bytes())
        .and_then(|_| file.write_all(body))
        .map_err(|e| Error::io(path, e))
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Binary graymap of a `[0, 1]` channel.
pub fn write_pgm(path: impl AsRef<Path>, height: usize, width: usize, values: &[f64]) -> Result<()> {
    let body: Vec<u8> = values.iter().map(|v| to_byte(*v)).collect();
    write_netpbm(path.as_ref(), format!("P5\n{width} {height}\n255\n"), &body)
}

/// Binary pixmap of `[0, 1]` RGB triples.
pub fn write_ppm(path: impl AsRef<Path>, height: usize, width: usize, values: &[[f64; 3]]) -> Result<()> {
    let body: Vec<u8> = values.iter().flat_map(|c| c.map(to_byte)).collect();
    write_netpbm(path.as_ref(), format!("P6\n{width} {height}\n255\n"), &body)
}

/// Writes `depth.pgm`, `intensity.pgm` and `normal.ppm` into `dir`.
pub fn export_frame_images(frame: &ProjectedFrame, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_pgm(dir.join("depth.pgm"), frame.height, frame.width, &frame.depth)?;
    write_pgm(dir.join("intensity.pgm"), frame.height, frame.width, &frame.intensity)?;
    write_ppm(
        dir.join("normal.ppm"),
        frame.height,
        frame.width,
        &normals_to_rgb(frame),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn kitti_cfg() -> ProjectionConfig {
        ProjectionConfig::default()
    }

    fn pt(x: f32, y: f32, z: f32, i: f32) -> Point {
        Point::new(x, y, z, i)
    }

    #[test]
    fn forward_point_projects_to_center_column() {
        let hit = project_point(&pt(10.0, 0.0, 0.0, 0.0), &kitti_cfg()).unwrap();
        assert_eq!((hit.u, hit.v), (450, 57));
        assert_eq!(hit.d, 10.0);
    }

    #[test]
    fn left_point_projects_to_quarter_column() {
        let hit = project_point(&pt(0.0, 5.0, 0.0, 0.0), &kitti_cfg()).unwrap();
        assert_eq!((hit.u, hit.v), (225, 57));
        assert_eq!(hit.d, 5.0);
    }

    #[test]
    fn pythagorean_distance() {
        let hit = project_point(&pt(1.0, 2.0, 2.0, 0.0), &kitti_cfg());
        // Elevation asin(2/3) is far above the 3° ceiling.
        assert!(hit.is_none());
        let cfg = ProjectionConfig {
            fov_down: 60f64.to_radians(),
            ..kitti_cfg()
        };
        assert_eq!(project_point(&pt(1.0, 2.0, 2.0, 0.0), &cfg).unwrap().d, 3.0);
    }

    #[test]
    fn origin_and_out_of_fov_are_rejected() {
        assert!(project_point(&pt(0.0, 0.0, 0.0, 0.0), &kitti_cfg()).is_none());
        assert!(project_point(&pt(1.0, 0.0, -5.0, 0.0), &kitti_cfg()).is_none());
    }

    #[test]
    fn backward_azimuth_wraps_to_column_zero() {
        // atan2 = π lands exactly on u = 0; -π would give u = w before wrapping.
        let hit = project_point(&pt(-10.0, 0.0, 0.0, 0.0), &kitti_cfg()).unwrap();
        assert_eq!(hit.u, 0);
        let hit = project_point(&pt(-10.0, -1e-6, 0.0, 0.0), &kitti_cfg()).unwrap();
        assert_eq!(hit.u, 899);
    }

    #[test]
    fn closest_point_wins_pixel() {
        let cfg = kitti_cfg();
        let cloud = PointCloud::new(
            vec![pt(9.0, 0.0, 0.0, 0.9), pt(4.0, 0.0, 0.0, 0.4), pt(4.0, 0.0, 0.0, 0.1)],
            0,
        );
        let frame = build_range_image(&cloud, &cfg);
        let pix = frame.index(57, 450);
        assert!(frame.valid[pix]);
        assert_abs_diff_eq!(frame.depth[pix], 4.0 / 80.0);
        assert_abs_diff_eq!(frame.intensity[pix], 0.4f32 as f64);
        assert_eq!(frame.source[pix], Some(1));
        assert_eq!(frame.valid_count(), 1);
    }

    #[test]
    fn empty_cloud_gives_invalid_frame() {
        let frame = build_range_image(&PointCloud::default(), &kitti_cfg());
        assert_eq!(frame.valid_count(), 0);
        assert!(frame.depth.iter().all(|d| *d == 0.0));
    }

    #[test]
    fn single_point_single_pixel() {
        let cloud = PointCloud::new(vec![pt(10.0, 0.0, 0.0, 0.7)], 0);
        let frame = build_range_image(&cloud, &kitti_cfg());
        assert_eq!(frame.valid_count(), 1);
        let pix = frame.index(57, 450);
        assert!(frame.valid[pix]);
        assert_abs_diff_eq!(frame.intensity[pix], 0.7, epsilon = 1e-7);
        assert!(frame.normal.iter().all(|n| *n == [0.0; 3]));
    }

    #[test]
    fn depth_is_clamped_at_max_range() {
        let cloud = PointCloud::new(vec![pt(200.0, 0.0, 0.0, 0.5)], 0);
        let frame = build_range_image(&cloud, &kitti_cfg());
        assert_eq!(frame.depth[frame.index(57, 450)], 1.0);
    }

    fn frame_with(points: &[(usize, usize, [f64; 3])]) -> ProjectedFrame {
        let mut f = ProjectedFrame::empty(4, 4);
        for &(v, u, p) in points {
            let i = f.index(v, u);
            f.valid[i] = true;
            f.depth[i] = 0.1;
            f.xyz[i] = p;
        }
        f
    }

    #[test]
    fn ground_normal_points_up() {
        let f = frame_with(&[
            (1, 1, [5.0, 0.0, -2.0]),
            (1, 2, [5.0, 0.1, -2.0]),
            (2, 1, [5.2, 0.0, -2.0]),
        ]);
        let f = compute_normals(f);
        let n = f.normal[f.index(1, 1)];
        assert_abs_diff_eq!(n[0], 0.0);
        assert_abs_diff_eq!(n[1], 0.0);
        assert_abs_diff_eq!(n[2], 1.0, epsilon = 1e-15);
    }

    #[test]
    fn collinear_and_isolated_pixels_have_zero_normal() {
        let f = compute_normals(frame_with(&[
            (1, 1, [1.0, 0.0, 0.0]),
            (1, 2, [2.0, 0.0, 0.0]),
            (2, 1, [3.0, 0.0, 0.0]),
            (3, 3, [1.0, 1.0, 1.0]),
        ]));
        assert_eq!(f.normal[f.index(1, 1)], [0.0; 3]);
        assert_eq!(f.normal[f.index(3, 3)], [0.0; 3]);
    }

    #[test]
    fn right_neighbor_wraps_horizontally() {
        let f = compute_normals(frame_with(&[
            (0, 3, [5.0, 0.0, -2.0]),
            (0, 0, [5.0, 0.1, -2.0]),
            (1, 3, [5.2, 0.0, -2.0]),
        ]));
        assert_abs_diff_eq!(f.normal[f.index(0, 3)][2], 1.0, epsilon = 1e-15);
    }

    #[test]
    fn rgb_mapping() {
        let mut f = ProjectedFrame::empty(1, 3);
        f.normal = vec![[0.0, 0.0, 1.0], [0.0, 0.0, 0.0], [-1.0, 0.0, 0.0]];
        assert_eq!(
            normals_to_rgb(&f),
            vec![[0.5, 0.5, 1.0], [0.5, 0.5, 0.5], [0.0, 0.5, 0.5]]
        );
    }

    #[test]
    fn stacking_pairs() {
        let cfg = kitti_cfg();
        let cloud = PointCloud::new(vec![pt(10.0, 0.0, 0.0, 0.7), pt(3.0, 4.0, 0.1, 0.2)], 0);
        let a = project_cloud(&cloud, &cfg);
        let pair = stack_pair(&a, &a).unwrap();
        assert_eq!(pair.channels.len(), 10 * 64 * 900);
        let n = 64 * 900;
        assert_eq!(pair.channels[..5 * n], pair.channels[5 * n..]);
        assert_eq!(pair.channels[..n], a.channels().channel(0)[..]);

        let small = ProjectedFrame::empty(32, 900);
        assert!(matches!(stack_pair(&a, &small), Err(Error::Shape(_))));
    }

    #[test]
    fn frame_blob_header_and_round_trip() {
        let cloud = PointCloud::new(vec![pt(10.0, 0.0, 0.0, 0.7)], 0);
        let cfg = ProjectionConfig {
            width: 8,
            height: 4,
            fov_up: 0.2,
            fov_down: 0.2,
            max_range: 50.0,
        };
        let ch = project_cloud(&cloud, &cfg).channels();
        let bytes = ch.to_bytes();
        assert_eq!(&bytes[..4], b"LRCF");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 4);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 8);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 5);
        assert_eq!(bytes.len(), 16 + 5 * 4 * 8 * 4);
        assert_eq!(FrameChannels::from_bytes(&bytes, Path::new("b")).unwrap(), ch);
        assert!(FrameChannels::from_bytes(&bytes[..20], Path::new("b")).is_err());
    }

    #[test]
    fn image_export_writes_netpbm() {
        let dir = tempfile::tempdir().unwrap();
        let frame = project_cloud(&PointCloud::new(vec![pt(10.0, 0.0, 0.0, 0.7)], 0), &kitti_cfg());
        export_frame_images(&frame, dir.path()).unwrap();
        let pgm = fs::read(dir.path().join("depth.pgm")).unwrap();
        assert!(pgm.starts_with(b"P5\n900 64\n255\n"));
        assert_eq!(pgm.len(), "P5\n900 64\n255\n".len() + 900 * 64);
        let ppm = fs::read(dir.path().join("normal.ppm")).unwrap();
        assert_eq!(ppm.len(), "P6\n900 64\n255\n".len() + 3 * 900 * 64);
    }

    fn yaw(p: &Point, angle: f64) -> Point {
        let (s, c) = angle.sin_cos();
        let (x, y) = (p.x as f64, p.y as f64);
        Point::new((c * x - s * y) as f32, (s * x + c * y) as f32, p.z, p.intensity)
    }

    proptest! {
        #[test]
        fn full_turn_keeps_column(x in -50.0f32..50.0, y in -50.0f32..50.0, z in -2.0f32..0.5) {
            let p = pt(x, y, z, 0.3);
            let cfg = kitti_cfg();
            let turned = yaw(&p, 2.0 * PI);
            let (a, b) = (project_point(&p, &cfg), project_point(&turned, &cfg));
            if let (Some(a), Some(b)) = (a, b) {
                // A float round trip through 2π can only nudge the azimuth by an ulp.
                let diff = (a.u as i64 - b.u as i64).rem_euclid(900);
                prop_assert!(diff == 0 || diff == 1 || diff == 899);
            }
        }

        #[test]
        fn positive_yaw_decreases_column(az in -3.0f64..3.0, r in 5.0f64..40.0) {
            let cfg = kitti_cfg();
            let p = Point::new((r * az.cos()) as f32, (r * az.sin()) as f32, 0.0, 0.1);
            let q = yaw(&p, 0.02);
            let (a, b) = (project_point(&p, &cfg).unwrap(), project_point(&q, &cfg).unwrap());
            // 0.02 rad is 2.86 columns at 0.4°/column; the step is in (0, w/2) modulo w.
            let step = (a.u as i64 - b.u as i64).rem_euclid(900);
            prop_assert!((2..=3).contains(&step), "step {}", step);
        }

        #[test]
        fn frame_invariants_hold(raw in prop::collection::vec(prop::array::uniform4(-30.0f32..30.0), 1..300)) {
            let cfg = ProjectionConfig { width: 64, height: 16, ..kitti_cfg() };
            let cloud = PointCloud::new(
                raw.iter().map(|v| pt(v[0], v[1], v[2] / 10.0, (v[3] + 30.0) / 60.0)).collect(),
                0,
            );
            let f = project_cloud(&cloud, &cfg);
            for i in 0..f.valid.len() {
                prop_assert!((0.0..=1.0).contains(&f.depth[i]));
                prop_assert_eq!(f.valid[i], f.depth[i] > 0.0);
                let n = Vector3::from(f.normal[i]);
                if f.valid[i] {
                    let len = n.norm();
                    prop_assert!(len == 0.0 || (len - 1.0).abs() < 1e-6);
                    prop_assert!(n.dot(&(-Vector3::from(f.xyz[i]))) >= 0.0);
                } else {
                    prop_assert_eq!(n.norm(), 0.0);
                    prop_assert_eq!(f.intensity[i], 0.0);
                }
            }
        }
    }
}
