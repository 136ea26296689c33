//! Rigid-body pose algebra.
//!
//! Rotations use the ZYX (yaw-pitch-roll) convention throughout:
//! `R = Rz(yaw) * Ry(pitch) * Rx(roll)`.

use std::f64::consts::{FRAC_PI_2, PI};
use std::ops::Mul;

use nalgebra::{Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Orthonormality drift above which parsed rotations are re-projected.
pub const REORTHONORMALIZE_TOLERANCE: f64 = 1e-6;

const GIMBAL_TOLERANCE: f64 = 1e-9;

/// A rigid transform mapping points of a child frame into a parent frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self { rotation, translation }
    }

    pub fn identity() -> Self {
        Self::new(Matrix3::identity(), Vector3::zeros())
    }

    pub fn from_translation(x: f64, y: f64, z: f64) -> Self {
        Self::new(Matrix3::identity(), Vector3::new(x, y, z))
    }

    pub fn from_rotation(rotation: Matrix3<f64>) -> Self {
        Self::new(rotation, Vector3::zeros())
    }

    /// Builds a pose from a row-major 3x4 `[R | t]` block.
    pub fn from_row_major_3x4(values: &[f64; 12]) -> Self {
        let rotation = Matrix3::new(
            values[0], values[1], values[2], values[4], values[5], values[6], values[8], values[9], values[10],
        );
        let translation = Vector3::new(values[3], values[7], values[11]);
        Self::new(rotation, translation)
    }

    pub fn to_row_major_3x4(&self) -> [f64; 12] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            t[0],
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            t[1],
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
            t[2],
        ]
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self::new(rt, -(rt * self.translation))
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Largest entry of `RᵀR - I`.
    pub fn orthonormality_error(&self) -> f64 {
        orthonormality_error(&self.rotation)
    }

    pub fn is_valid(&self, tol: f64) -> bool {
        self.translation.iter().all(|v| v.is_finite())
            && self.rotation.iter().all(|v| v.is_finite())
            && self.orthonormality_error() <= tol
            && (self.rotation.determinant() - 1.0).abs() <= tol
    }

    /// Replaces the rotation block with its nearest rotation matrix.
    pub fn orthonormalized(&self) -> Self {
        Self::new(nearest_rotation(&self.rotation), self.translation)
    }

    /// Frobenius norm of the 3x4 difference `[R1-R2 | t1-t2]`.
    pub fn matrix_distance(&self, other: &Pose) -> f64 {
        let dr = (self.rotation - other.rotation).norm_squared();
        let dt = (self.translation - other.translation).norm_squared();
        (dr + dt).sqrt()
    }
}

impl Mul for Pose {
    type Output = Pose;

    fn mul(self, rhs: Pose) -> Pose {
        Pose::new(
            self.rotation * rhs.rotation,
            self.rotation * rhs.translation + self.translation,
        )
    }
}

impl Mul<&Pose> for &Pose {
    type Output = Pose;

    fn mul(self, rhs: &Pose) -> Pose {
        *self * *rhs
    }
}

/// Relative motion as translation plus ZYX Euler angles.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RelPose6D {
    pub tx: f64,
    pub ty: f64,
    pub tz: f64,
    pub roll: f64,
    pub pitch: f64,
    pub yaw: f64,
}

impl RelPose6D {
    pub fn new(tx: f64, ty: f64, tz: f64, roll: f64, pitch: f64, yaw: f64) -> Self {
        Self {
            tx,
            ty,
            tz,
            roll,
            pitch,
            yaw,
        }
    }

    pub fn zero() -> Self {
        Self::default()
    }

    /// `[tx, ty, tz, roll, pitch, yaw]`
    pub fn to_array(&self) -> [f64; 6] {
        [self.tx, self.ty, self.tz, self.roll, self.pitch, self.yaw]
    }

    pub fn from_array(v: [f64; 6]) -> Self {
        Self::new(v[0], v[1], v[2], v[3], v[4], v[5])
    }

    pub fn translation(&self) -> Vector3<f64> {
        Vector3::new(self.tx, self.ty, self.tz)
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

pub fn rot_x(angle: f64) -> Matrix3<f64> {
    let (s, c) = angle.sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

pub fn rot_y(angle: f64) -> Matrix3<f64> {
    let (s, c) = angle.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

pub fn rot_z(angle: f64) -> Matrix3<f64> {
    let (s, c) = angle.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// `Rz(yaw) * Ry(pitch) * Rx(roll)`.
pub fn euler_to_rotation(roll: f64, pitch: f64, yaw: f64) -> Matrix3<f64> {
    let (sr, cr) = roll.sin_cos();
    let (sp, cp) = pitch.sin_cos();
    let (sy, cy) = yaw.sin_cos();
    Matrix3::new(
        cy * cp,
        cy * sp * sr - sy * cr,
        cy * sp * cr + sy * sr,
        sy * cp,
        sy * sp * sr + cy * cr,
        sy * sp * cr - cy * sr,
        -sp,
        cp * sr,
        cp * cr,
    )
}

/// Inverse of [`euler_to_rotation`] on the principal branch.
///
/// At gimbal lock roll is pinned to zero and yaw carries the coupled
/// rotation, so only the matrix (not the angle triple) round-trips.
pub fn rotation_to_euler(r: &Matrix3<f64>) -> Result<(f64, f64, f64)> {
    let err = orthonormality_error(r);
    if !(err <= REORTHONORMALIZE_TOLERANCE) || (r.determinant() - 1.0).abs() > 1e-6 {
        return Err(Error::Geometry(format!(
            "matrix is not a rotation (orthonormality error {err:.3e}, det {:.6})",
            r.determinant()
        )));
    }
    Ok(euler_from_rotation_unchecked(r))
}

fn euler_from_rotation_unchecked(r: &Matrix3<f64>) -> (f64, f64, f64) {
    let pitch = (-r[(2, 0)]).clamp(-1.0, 1.0).asin();
    if (pitch.abs() - FRAC_PI_2).abs() < GIMBAL_TOLERANCE {
        // Both lock branches reduce to R01 = -sin(yaw'), R11 = cos(yaw').
        let yaw = (-r[(0, 1)]).atan2(r[(1, 1)]);
        (0.0, pitch, normalize_angle(yaw))
    } else {
        let roll = r[(2, 1)].atan2(r[(2, 2)]);
        let yaw = r[(1, 0)].atan2(r[(0, 0)]);
        (normalize_angle(roll), pitch, normalize_angle(yaw))
    }
}

/// Wraps an angle into `(-π, π]`.
pub fn normalize_angle(a: f64) -> f64 {
    let mut w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w -= 2.0 * PI;
    }
    w
}

/// Rotation angle in radians from the trace, clamped for safety near identity.
pub fn rotation_angle(r: &Matrix3<f64>) -> f64 {
    ((r.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
}

pub fn orthonormality_error(r: &Matrix3<f64>) -> f64 {
    (r.transpose() * r - Matrix3::identity()).amax()
}

/// Nearest proper rotation in the Frobenius sense (polar decomposition).
pub fn nearest_rotation(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let (Some(u), Some(v_t)) = (svd.u, svd.v_t) else {
        return Matrix3::identity();
    };
    let mut r = u * v_t;
    if r.determinant() < 0.0 {
        let mut u = u;
        u.column_mut(2).neg_mut();
        r = u * v_t;
    }
    r
}

/// Motion from frame `a` to frame `b`, expressed in `a`: `a⁻¹·b`.
pub fn relative_pose(a: &Pose, b: &Pose) -> Pose {
    a.inverse() * *b
}

pub fn pose_to_6dof(p: &Pose) -> RelPose6D {
    let (roll, pitch, yaw) = euler_from_rotation_unchecked(&p.rotation);
    RelPose6D::new(p.translation[0], p.translation[1], p.translation[2], roll, pitch, yaw)
}

pub fn sixdof_to_pose(r: &RelPose6D) -> Pose {
    Pose::new(euler_to_rotation(r.roll, r.pitch, r.yaw), r.translation())
}

/// Chains relative motions onto `start`; the output has `rels.len() + 1` poses.
pub fn accumulate(start: &Pose, rels: &[RelPose6D]) -> Vec<Pose> {
    let mut out = Vec::with_capacity(rels.len() + 1);
    let mut current = *start;
    out.push(current);
    for rel in rels {
        current = current * sixdof_to_pose(rel);
        out.push(current);
    }
    out
}

/// 6-DOF targets between consecutive poses.
pub fn consecutive_motions(poses: &[Pose]) -> Vec<RelPose6D> {
    poses
        .windows(2)
        .map(|w| pose_to_6dof(&relative_pose(&w[0], &w[1])))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn arb_pose() -> impl Strategy<Value = Pose> {
        (-PI..PI, -1.5f64..1.5, -PI..PI, prop::array::uniform3(-50.0f64..50.0))
            .prop_map(|(r, p, y, t)| Pose::new(euler_to_rotation(r, p, y), Vector3::new(t[0], t[1], t[2])))
    }

    #[test]
    fn zero_angles_give_identity() {
        assert_eq!(euler_to_rotation(0.0, 0.0, 0.0), Matrix3::identity());
        assert_eq!(rotation_to_euler(&Matrix3::identity()).unwrap(), (0.0, 0.0, 0.0));
    }

    #[test]
    fn quarter_yaw_maps_x_to_y() {
        let r = euler_to_rotation(0.0, 0.0, FRAC_PI_2);
        let v = r * Vector3::x();
        assert_abs_diff_eq!(v, Vector3::y(), epsilon = 1e-15);
        let (roll, pitch, yaw) = rotation_to_euler(&rot_z(FRAC_PI_2)).unwrap();
        assert_abs_diff_eq!(roll, 0.0);
        assert_abs_diff_eq!(pitch, 0.0);
        assert_abs_diff_eq!(yaw, FRAC_PI_2, epsilon = 1e-15);
    }

    #[test]
    fn euler_round_trip_small_angles() {
        let r = euler_to_rotation(0.1, -0.2, 0.3);
        let (roll, pitch, yaw) = rotation_to_euler(&r).unwrap();
        assert_abs_diff_eq!(roll, 0.1, epsilon = 1e-12);
        assert_abs_diff_eq!(pitch, -0.2, epsilon = 1e-12);
        assert_abs_diff_eq!(yaw, 0.3, epsilon = 1e-12);
    }

    #[test]
    fn gimbal_lock_pins_roll_and_round_trips_matrix() {
        for r in [
            rot_y(FRAC_PI_2) * rot_x(0.3),
            rot_z(0.7) * rot_y(-FRAC_PI_2) * rot_x(-1.1),
        ] {
            let (roll, pitch, yaw) = rotation_to_euler(&r).unwrap();
            assert_eq!(roll, 0.0);
            assert_abs_diff_eq!(pitch.abs(), FRAC_PI_2, epsilon = 1e-12);
            let back = euler_to_rotation(roll, pitch, yaw);
            assert!((back - r).amax() < 1e-9, "{back} vs {r}");
        }
    }

    #[test]
    fn non_rotation_is_rejected() {
        let m = Matrix3::identity() * 1.01;
        assert!(rotation_to_euler(&m).is_err());
        let reflect = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0));
        assert!(rotation_to_euler(&reflect).is_err());
    }

    #[test]
    fn relative_pose_examples() {
        let t = Pose::new(euler_to_rotation(0.2, 0.1, -0.4), Vector3::new(1.0, 2.0, 3.0));
        assert!(relative_pose(&t, &t).matrix_distance(&Pose::identity()) < 1e-15);

        let b = Pose::from_translation(1.0, 2.0, 3.0);
        assert_eq!(relative_pose(&Pose::identity(), &b), b);

        let a = Pose::from_rotation(rot_z(FRAC_PI_2));
        let b = Pose::from_translation(1.0, 0.0, 0.0);
        let rel = relative_pose(&a, &b);
        assert_abs_diff_eq!(rel.translation, Vector3::new(0.0, -1.0, 0.0), epsilon = 1e-15);
        assert_abs_diff_eq!(rel.rotation, rot_z(-FRAC_PI_2), epsilon = 1e-15);
    }

    #[test]
    fn sixdof_examples() {
        assert_eq!(pose_to_6dof(&Pose::identity()), RelPose6D::zero());
        assert_eq!(sixdof_to_pose(&RelPose6D::zero()), Pose::identity());
        let p = Pose::from_translation(1.0, 2.0, 3.0);
        assert_eq!(pose_to_6dof(&p), RelPose6D::new(1.0, 2.0, 3.0, 0.0, 0.0, 0.0));
        assert_eq!(sixdof_to_pose(&RelPose6D::new(1.0, 2.0, 3.0, 0.0, 0.0, 0.0)), p);
    }

    #[test]
    fn accumulate_examples() {
        let start = Pose::from_translation(4.0, 5.0, 6.0);
        assert_eq!(accumulate(&start, &[]), vec![start]);

        let step = RelPose6D::new(1.0, 0.0, 0.0, 0.0, 0.0, 0.0);
        let traj = accumulate(&Pose::identity(), &[step; 3]);
        assert_eq!(traj.len(), 4);
        for (i, p) in traj.iter().enumerate() {
            assert_eq!(p.translation, Vector3::new(i as f64, 0.0, 0.0));
        }

        let corner = RelPose6D::new(1.0, 0.0, 0.0, 0.0, 0.0, FRAC_PI_2);
        let square = accumulate(&Pose::identity(), &[corner; 4]);
        assert!(square[4].matrix_distance(&Pose::identity()) < 1e-9);
        // Hand-composed corners: (1,0) -> (1,1) -> (0,1) -> (0,0).
        assert_abs_diff_eq!(square[2].translation, Vector3::new(1.0, 1.0, 0.0), epsilon = 1e-12);
        assert_abs_diff_eq!(square[3].translation, Vector3::new(0.0, 1.0, 0.0), epsilon = 1e-12);
    }

    #[test]
    fn normalize_angle_range() {
        assert_eq!(normalize_angle(PI), PI);
        assert_abs_diff_eq!(normalize_angle(-PI), PI);
        assert_abs_diff_eq!(normalize_angle(3.0 * PI / 2.0), -FRAC_PI_2, epsilon = 1e-15);
        assert_eq!(normalize_angle(0.25), 0.25);
    }

    #[test]
    fn nearest_rotation_repairs_drift() {
        let r = euler_to_rotation(0.3, -0.2, 1.0);
        let drifted = r + Matrix3::from_element(1e-4);
        let fixed = nearest_rotation(&drifted);
        assert!(orthonormality_error(&fixed) < 1e-12);
        assert_abs_diff_eq!(fixed.determinant(), 1.0, epsilon = 1e-12);
        assert!((fixed - r).amax() < 1e-3);
    }

    proptest! {
        #[test]
        fn relative_pose_chains(a in arb_pose(), b in arb_pose(), c in arb_pose()) {
            let direct = relative_pose(&a, &c);
            let chained = relative_pose(&a, &b) * relative_pose(&b, &c);
            prop_assert!(direct.matrix_distance(&chained) < 1e-9);
        }

        #[test]
        fn euler_rotation_is_proper(r in -10.0f64..10.0, p in -10.0f64..10.0, y in -10.0f64..10.0) {
            let m = euler_to_rotation(r, p, y);
            prop_assert!(orthonormality_error(&m) < 1e-12);
            prop_assert!((m.determinant() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn sixdof_round_trip(p in arb_pose()) {
            let back = sixdof_to_pose(&pose_to_6dof(&p));
            prop_assert!(back.matrix_distance(&p) < 1e-9);
        }
    }
}
