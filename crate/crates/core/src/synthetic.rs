//! Procedural worlds, trajectories and ray-cast LiDAR scans.
//!
//! Beams fire at the exact pixel-center angles of the matching projection
//! grid, so every returned point projects back into the pixel that cast it.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset_io::{format_kitti_pose, write_velodyne_bin, KittiLayout, Point, PointCloud, SequenceId};
use crate::error::{Error, Result};
use crate::geometry::{euler_to_rotation, Pose};
use crate::projection::{project_cloud, ProjectedFrame, ProjectionConfig};

/// Largest heading change between consecutive trajectory poses.
pub const MAX_STEP_ROTATION: f64 = 5.0 * PI / 180.0;

const HIT_EPS: f64 = 1e-9;

/// Axis-aligned box in world coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub center: [f64; 3],
    pub half_extents: [f64; 3],
}

/// Infinite vertical plane through `point` with horizontal `normal`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Wall {
    pub point: [f64; 3],
    pub normal: [f64; 3],
}

/// Static scene. Geometry is expressed in the world's own frame and placed
/// in the global frame by `placement`.
#[derive(Clone, Debug, PartialEq)]
pub struct World {
    pub ground_height: Option<f64>,
    pub boxes: Vec<Aabb>,
    pub walls: Vec<Wall>,
    pub seed: u64,
    pub placement: Pose,
}

impl World {
    pub fn empty() -> Self {
        Self {
            ground_height: None,
            boxes: Vec::new(),
            walls: Vec::new(),
            seed: 0,
            placement: Pose::identity(),
        }
    }

    pub fn ground(height: f64) -> Self {
        Self {
            ground_height: Some(height),
            ..Self::empty()
        }
    }

    pub fn surface_count(&self) -> usize {
        usize::from(self.ground_height.is_some()) + self.boxes.len() + self.walls.len()
    }

    /// The same world with its geometry moved by `t`.
    pub fn transformed(&self, t: &Pose) -> Self {
        Self {
            placement: t * &self.placement,
            ..self.clone()
        }
    }

    /// Ground, a square room of walls and a scatter of boxes.
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ground = -rng.gen_range(1.5..2.0);
        let half = rng.gen_range(18.0..28.0);
        let walls = [(1.0, 0.0), (-1.0, 0.0), (0.0, 1.0), (0.0, -1.0)]
            .iter()
            .map(|(nx, ny)| {
                let offset = half + rng.gen_range(-3.0..3.0);
                Wall {
                    point: [-nx * offset, -ny * offset, 0.0],
                    normal: [*nx, *ny, 0.0],
                }
            })
            .collect();
        let count = rng.gen_range(8..16);
        let boxes = (0..count)
            .map(|_| {
                let h = rng.gen_range(0.5..4.0);
                Aabb {
                    center: [
                        rng.gen_range(-half + 4.0..half - 4.0),
                        rng.gen_range(-half + 4.0..half - 4.0),
                        ground + h,
                    ],
                    half_extents: [rng.gen_range(0.3..2.5), rng.gen_range(0.3..2.5), h],
                }
            })
            // Keep a clear corridor around the origin for the sensor.
            .filter(|b| b.center[0].abs() > b.half_extents[0] + 3.0 || b.center[1].abs() > b.half_extents[1] + 3.0)
            .collect();
        Self {
            ground_height: Some(ground),
            boxes,
            walls,
            seed,
            placement: Pose::identity(),
        }
    }

    /// Reflectance of a surface; a fixed function of its id.
    pub fn surface_intensity(&self, id: usize) -> f32 {
        let golden = 0.618_033_988_749_895;
        (0.1 + 0.8 * ((id as f64 + 1.0) * golden).fract()) as f32
    }

    /// Nearest hit `(distance, surface id)` of a ray given in global
    /// coordinates with unit `dir`.
    pub fn cast(&self, origin: &Vector3<f64>, dir: &Vector3<f64>, max_range: f64) -> Option<(f64, usize)> {
        let inv = self.placement.inverse();
        let o = inv.transform_point(origin);
        let d = inv.rotation * dir;
        let mut best: Option<(f64, usize)> = None;
        let mut offer = |t: f64, id: usize| {
            if t > HIT_EPS && t <= max_range && best.is_none_or(|(b, _)| t < b) {
                best = Some((t, id));
            }
        };
        let mut id = 0;
        if let Some(h) = self.ground_height {
            if d.z != 0.0 {
                offer((h - o.z) / d.z, id);
            }
            id += 1;
        }
        for b in &self.boxes {
            if let Some(t) = ray_box(&o, &d, b) {
                offer(t, id);
            }
            id += 1;
        }
        for w in &self.walls {
            let n = Vector3::from(w.normal);
            let denom = n.dot(&d);
            if denom != 0.0 {
                offer(n.dot(&(Vector3::from(w.point) - o)) / denom, id);
            }
            id += 1;
        }
        best
    }
}

/// Entry distance of a ray into a box from outside, by the slab method.
fn ray_box(o: &Vector3<f64>, d: &Vector3<f64>, b: &Aabb) -> Option<f64> {
    let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
    for k in 0..3 {
        let lo = b.center[k] - b.half_extents[k];
        let hi = b.center[k] + b.half_extents[k];
        if d[k] == 0.0 {
            if o[k] < lo || o[k] > hi {
                return None;
            }
            continue;
        }
        let (a, c) = ((lo - o[k]) / d[k], (hi - o[k]) / d[k]);
        t0 = t0.max(a.min(c));
        t1 = t1.min(a.max(c));
    }
    (t0 <= t1 && t0 > 0.0).then_some(t0)
}

/// Beam grid of the simulated sensor, identical to a projection grid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LidarModel {
    pub height: usize,
    pub width: usize,
    pub fov_up: f64,
    pub fov_down: f64,
    pub max_range: f64,
}

impl LidarModel {
    pub fn matching(cfg: &ProjectionConfig) -> Self {
        Self {
            height: cfg.height,
            width: cfg.width,
            fov_up: cfg.fov_up,
            fov_down: cfg.fov_down,
            max_range: cfg.max_range,
        }
    }

    pub fn projection(&self) -> ProjectionConfig {
        ProjectionConfig {
            width: self.width,
            height: self.height,
            fov_up: self.fov_up,
            fov_down: self.fov_down,
            max_range: self.max_range,
        }
    }

    /// Unit beam direction of pixel `(v, u)` in the sensor frame.
    pub fn beam(&self, v: usize, u: usize) -> Vector3<f64> {
        let cfg = self.projection();
        let (el, az) = (cfg.row_elevation(v), cfg.column_azimuth(u));
        Vector3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin())
    }
}

/// Scan plus the pixel each point was cast from.
pub fn simulate_scan_labeled(world: &World, pose: &Pose, lidar: &LidarModel) -> (PointCloud, Vec<(usize, usize)>) {
    let rows: Vec<Vec<(Point, (usize, usize))>> = (0..lidar.height)
        .into_par_iter()
        .map(|v| {
            (0..lidar.width)
                .filter_map(|u| {
                    let dir = lidar.beam(v, u);
                    let global = pose.rotation * dir;
                    world.cast(&pose.translation, &global, lidar.max_range).map(|(t, id)| {
                        let p = dir * t;
                        let point = Point::new(p.x as f32, p.y as f32, p.z as f32, world.surface_intensity(id));
                        (point, (v, u))
                    })
                })
                .collect()
        })
        .collect();
    let (points, pixels) = rows.into_iter().flatten().unzip();
    (PointCloud::new(points, 0), pixels)
}

/// One ray per beam; misses produce no point.
pub fn simulate_scan(world: &World, pose: &Pose, lidar: &LidarModel) -> PointCloud {
    simulate_scan_labeled(world, pose, lidar).0
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Motion {
    /// Along +x at a fixed heading.
    Straight,
    /// Forward motion with a smoothly varying, seeded yaw rate.
    Arc,
    /// Around a square of the given side at a fixed heading.
    Square { side: f64 },
}

/// `n` poses with `step` meters between consecutive positions.
pub fn generate_trajectory(n: usize, motion: Motion, step: f64, seed: u64) -> Result<Vec<Pose>> {
    if n < 2 {
        return Err(Error::Config("a trajectory needs at least 2 poses".into()));
    }
    if !(step.is_finite() && step >= 0.0) {
        return Err(Error::Config("trajectory step must be finite and non-negative".into()));
    }
    Ok(match motion {
        Motion::Straight => (0..n)
            .map(|i| Pose::from_translation(i as f64 * step, 0.0, 0.0))
            .collect(),
        Motion::Arc => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let base = rng.gen_range(-0.4..0.4) * MAX_STEP_ROTATION;
            let amp = rng.gen_range(0.0..0.5) * MAX_STEP_ROTATION;
            let period = rng.gen_range(20.0..80.0);
            let phase = rng.gen_range(0.0..2.0 * PI);
            let mut pose = Pose::identity();
            let mut out = vec![pose];
            for k in 0..n - 1 {
                let rate = base + amp * (2.0 * PI * k as f64 / period + phase).sin();
                let motion = Pose::new(euler_to_rotation(0.0, 0.0, rate), Vector3::new(step, 0.0, 0.0));
                pose = pose * motion;
                out.push(pose);
            }
            out
        }
        Motion::Square { side } => {
            if !(side.is_finite() && side > 0.0) {
                return Err(Error::Config("square side must be positive".into()));
            }
            (0..n)
                .map(|i| {
                    let s = (i as f64 * step) % (4.0 * side);
                    let (x, y) = match (s / side).floor() as usize {
                        0 => (s, 0.0),
                        1 => (side, s - side),
                        2 => (3.0 * side - s, side),
                        _ => (0.0, 4.0 * side - s),
                    };
                    Pose::from_translation(x, y, 0.0)
                })
                .collect()
        }
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSequence {
    pub clouds: Vec<PointCloud>,
    pub frames: Vec<ProjectedFrame>,
    pub poses: Vec<Pose>,
}

/// Scans and projected frames along a trajectory.
pub fn make_synthetic_dataset(
    world: &World,
    trajectory: &[Pose],
    lidar: &LidarModel,
    cfg: &ProjectionConfig,
) -> Result<SyntheticSequence> {
    if LidarModel::matching(cfg) != *lidar {
        return Err(Error::Config("LiDAR beam grid must match the projection grid".into()));
    }
    let clouds: Vec<PointCloud> = trajectory
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut c = simulate_scan(world, p, lidar);
            c.frame_index = i;
            c
        })
        .collect();
    let frames = clouds.iter().map(|c| project_cloud(c, cfg)).collect();
    Ok(SyntheticSequence {
        clouds,
        frames,
        poses: trajectory.to_vec(),
    })
}

/// Velodyne-to-camera extrinsic with KITTI's axis convention
/// (camera x = -LiDAR y, camera y = -LiDAR z, camera z = LiDAR x).
pub fn kitti_like_calibration() -> Pose {
    Pose::new(
        Matrix3::new(0.0, -1.0, 0.0, 0.0, 0.0, -1.0, 1.0, 0.0, 0.0),
        Vector3::new(-0.004, -0.076, -0.272),
    )
}

/// Writes scans, calibration and camera-frame poses in KITTI layout.
pub fn write_kitti_sequence(root: &Path, seq: SequenceId, clouds: &[PointCloud], lidar_poses: &[Pose]) -> Result<()> {
    if clouds.len() != lidar_poses.len() {
        return Err(Error::Shape(format!(
            "{} scans but {} poses",
            clouds.len(),
            lidar_poses.len()
        )));
    }
    let layout = KittiLayout::new(root);
    let velo = layout.velodyne_dir(seq);
    fs::create_dir_all(&velo).map_err(|e| Error::io(&velo, e))?;
    for (i, c) in clouds.iter().enumerate() {
        write_velodyne_bin(layout.scan_path(seq, i), c)?;
    }
    let tr = kitti_like_calibration();
    let calib = layout.calib_path(seq);
    fs::write(&calib, format!("Tr: {}\n", format_kitti_pose(&tr))).map_err(|e| Error::io(&calib, e))?;
    let poses_path = layout.poses_path(seq);
    let dir = poses_path.parent().expect("poses directory");
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let tr_inv = tr.inverse();
    let text: String = lidar_poses
        .iter()
        .map(|p| format_kitti_pose(&(tr * *p * tr_inv)) + "\n")
        .collect();
    fs::write(&poses_path, text).map_err(|e| Error::io(&poses_path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset_io::read_velodyne_bin;
    use crate::geometry::{relative_pose, rotation_angle};
    use crate::projection::build_range_image;
    use proptest::prelude::*;

    /// Beams reaching down to -25° so a level sensor sees nearby ground.
    fn downward() -> LidarModel {
        LidarModel {
            height: 16,
            width: 64,
            fov_up: 25f64.to_radians(),
            fov_down: 3f64.to_radians(),
            max_range: 80.0,
        }
    }

    #[test]
    fn straight_line() {
        let t = generate_trajectory(3, Motion::Straight, 1.0, 0).unwrap();
        let xs: Vec<[f64; 3]> = t.iter().map(|p| p.translation.into()).collect();
        assert_eq!(xs, vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]]);
    }

    #[test]
    fn square_returns_home() {
        let t = generate_trajectory(17, Motion::Square { side: 4.0 }, 1.0, 0).unwrap();
        assert!(t[16].matrix_distance(&t[0]) < 1e-9);
        assert!(t[8].matrix_distance(&Pose::from_translation(4.0, 4.0, 0.0)) < 1e-12);
    }

    #[test]
    fn arc_is_deterministic_and_bounded() {
        let a = generate_trajectory(200, Motion::Arc, 1.0, 7).unwrap();
        assert_eq!(a, generate_trajectory(200, Motion::Arc, 1.0, 7).unwrap());
        assert_ne!(a, generate_trajectory(200, Motion::Arc, 1.0, 8).unwrap());
        for w in a.windows(2) {
            let r = relative_pose(&w[0], &w[1]);
            assert!(rotation_angle(&r.rotation) <= MAX_STEP_ROTATION + 1e-12);
            assert!((r.translation.norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn too_short_trajectory() {
        assert!(generate_trajectory(1, Motion::Straight, 1.0, 0).is_err());
    }

    #[test]
    fn empty_world_gives_empty_scan() {
        let c = simulate_scan(&World::empty(), &Pose::identity(), &downward());
        assert!(c.is_empty());
    }

    #[test]
    fn ground_distances() {
        let lidar = downward();
        let world = World::ground(-2.0);
        let (cloud, pixels) = simulate_scan_labeled(&world, &Pose::identity(), &lidar);
        assert!(!cloud.is_empty());
        let cfg = lidar.projection();
        for (p, (v, _)) in cloud.points.iter().zip(&pixels) {
            let el = cfg.row_elevation(*v);
            assert!(el < 0.0);
            let d = ((p.x as f64).powi(2) + (p.y as f64).powi(2) + (p.z as f64).powi(2)).sqrt();
            let expected = 2.0 / el.abs().sin();
            assert!((d - expected).abs() < 1e-5 * expected, "{d} vs {expected}");
        }
    }

    #[test]
    fn box_straight_ahead() {
        let lidar = LidarModel {
            height: 3,
            width: 64,
            fov_up: 1.0f64.to_radians(),
            fov_down: 1.0f64.to_radians(),
            max_range: 80.0,
        };
        // Row 1 is horizontal; columns 31 and 32 straddle azimuth 0.
        assert!(lidar.projection().row_elevation(1).abs() < 1e-15);
        let world = World {
            boxes: vec![Aabb {
                center: [10.0, 0.0, 0.0],
                half_extents: [1.5, 5.0, 5.0],
            }],
            ..World::empty()
        };
        let dir = Vector3::new(1.0, 0.0, 0.0);
        let (t, _) = world.cast(&Vector3::zeros(), &dir, 80.0).unwrap();
        assert_eq!(t, 8.5);
        let hit = world.cast(&Vector3::zeros(), &lidar.beam(1, 32), 80.0).unwrap().0;
        assert!((hit * lidar.beam(1, 32).x - 8.5).abs() < 1e-12);
    }

    #[test]
    fn max_range_cuts_hits() {
        let world = World::ground(-2.0);
        let dir = Vector3::new(1.0, 0.0, -0.01).normalize();
        assert!(world.cast(&Vector3::zeros(), &dir, 80.0).is_none());
        assert!(world.cast(&Vector3::zeros(), &dir, 300.0).is_some());
    }

    #[test]
    fn every_point_lands_in_its_pixel() {
        let lidar = LidarModel::matching(&ProjectionConfig {
            height: 16,
            width: 64,
            ..ProjectionConfig::default()
        });
        let world = World::random(3);
        let pose = Pose::new(euler_to_rotation(0.0, 0.0, 0.3), Vector3::new(1.0, -2.0, 0.0));
        let (cloud, pixels) = simulate_scan_labeled(&world, &pose, &lidar);
        assert!(cloud.len() > 16 * 64 / 2);
        let frame = build_range_image(&cloud, &lidar.projection());
        for (i, (v, u)) in pixels.iter().enumerate() {
            assert_eq!(frame.source[frame.index(*v, *u)], Some(i));
        }
        assert_eq!(frame.valid_count(), cloud.len());
    }

    #[test]
    fn level_ground_normals_point_up() {
        let lidar = downward();
        let world = World::ground(-1.73);
        let frame = project_cloud(&simulate_scan(&world, &Pose::identity(), &lidar), &lidar.projection());
        let mut checked = 0;
        for v in 0..frame.height - 1 {
            for u in 0..frame.width {
                let i = frame.index(v, u);
                let interior = frame.valid[i]
                    && frame.valid[frame.index(v, (u + 1) % frame.width)]
                    && frame.valid[frame.index(v + 1, u)];
                if interior {
                    let n = frame.normal[i];
                    assert!(
                        n[0].abs() < 1e-6 && n[1].abs() < 1e-6 && (n[2] - 1.0).abs() < 1e-6,
                        "{n:?}"
                    );
                    checked += 1;
                }
            }
        }
        assert!(checked > 100);
    }

    #[test]
    fn kitti_export_reads_back() {
        let dir = tempfile::tempdir().unwrap();
        let lidar = downward();
        let traj = generate_trajectory(3, Motion::Arc, 0.8, 1).unwrap();
        let world = World::random(1);
        let clouds: Vec<PointCloud> = traj.iter().map(|p| simulate_scan(&world, p, &lidar)).collect();
        let seq = SequenceId(4);
        write_kitti_sequence(dir.path(), seq, &clouds, &traj).unwrap();
        let layout = KittiLayout::new(dir.path());
        let poses = layout.lidar_poses(seq).unwrap();
        for (a, b) in poses.iter().zip(&traj) {
            assert!(a.matrix_distance(b) < 1e-6);
        }
        let (back, _) = read_velodyne_bin(layout.scan_path(seq, 2)).unwrap();
        assert_eq!(back.points, clouds[2].points);
    }

    #[test]
    fn dataset_grid_must_match() {
        let lidar = downward();
        let traj = generate_trajectory(2, Motion::Straight, 1.0, 0).unwrap();
        assert!(make_synthetic_dataset(&World::random(0), &traj, &lidar, &ProjectionConfig::default()).is_err());
        let d = make_synthetic_dataset(&World::random(0), &traj, &lidar, &lidar.projection()).unwrap();
        assert_eq!(d.frames.len(), 2);
        assert_eq!(d.clouds[1].frame_index, 1);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn scans_are_equivariant(
            yaw in -3.0f64..3.0, roll in -0.2f64..0.2, pitch in -0.2f64..0.2,
            tx in -3.0f64..3.0, ty in -3.0f64..3.0, seed in 0u64..50
        ) {
            let lidar = LidarModel { height: 8, width: 32, ..downward() };
            let world = World::random(seed);
            let p = Pose::new(euler_to_rotation(0.0, 0.0, 0.4), Vector3::new(0.5, 0.2, 0.0));
            let t = Pose::new(euler_to_rotation(roll, pitch, yaw), Vector3::new(tx, ty, 0.1));
            let (a, pa) = simulate_scan_labeled(&world, &(t * p), &lidar);
            let (b, pb) = simulate_scan_labeled(&world.transformed(&t.inverse()), &p, &lidar);
            prop_assert_eq!(pa, pb);
            for (x, y) in a.points.iter().zip(&b.points) {
                prop_assert!((x.x - y.x).abs() as f64 <= 1e-9 + 1e-6 * x.x.abs() as f64);
                prop_assert!((x.y - y.y).abs() as f64 <= 1e-9 + 1e-6 * x.y.abs() as f64);
                prop_assert!((x.z - y.z).abs() as f64 <= 1e-9 + 1e-6 * x.z.abs() as f64);
                prop_assert_eq!(x.intensity, y.intensity);
            }
        }

        #[test]
        fn hits_are_positive_and_in_range(seed in 0u64..200, v in 0usize..16, u in 0usize..64) {
            let lidar = downward();
            let world = World::random(seed);
            if let Some((t, _)) = world.cast(&Vector3::zeros(), &lidar.beam(v, u), lidar.max_range) {
                prop_assert!(t > 0.0 && t <= lidar.max_range);
            }
        }
    }
}
