//! Frames, quaternion algebra, camera/FOV geometry and the coordinate
//! transforms consumed by every other module.
//!
//! Conventions used throughout the crate:
//! - World frame: x, y horizontal, z up (altitude).
//! - Camera/body frame: optical convention, x right, y down, z forward
//!   (the optical axis). The body-to-camera extrinsics default to identity,
//!   so the body "forward" axis is the camera optical axis.
//! - Quaternions are stored scalar-first (w, x, y, z).

use nalgebra::{Matrix3, Matrix3x4, Matrix4, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GeomError {
    #[error("invalid camera model: {0}")]
    InvalidCamera(String),
}

/// Unit-norm quaternion (scalar-first storage).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quat {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Quat {
    pub const IDENTITY: Quat = Quat { w: 1.0, x: 0.0, y: 0.0, z: 0.0 };

    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Quat { w, x, y, z }
    }

    /// Pure-vector quaternion (zero scalar part).
    pub fn pure(v: Vector3<f64>) -> Self {
        Quat { w: 0.0, x: v.x, y: v.y, z: v.z }
    }

    pub fn from_axis_angle(axis: Vector3<f64>, angle: f64) -> Self {
        let a = axis.normalize();
        let (s, c) = (angle / 2.0).sin_cos();
        Quat { w: c, x: s * a.x, y: s * a.y, z: s * a.z }
    }

    pub fn norm(&self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn normalized(&self) -> Quat {
        let n = self.norm();
        Quat { w: self.w / n, x: self.x / n, y: self.y / n, z: self.z / n }
    }

    pub fn conjugate(&self) -> Quat {
        Quat { w: self.w, x: -self.x, y: -self.y, z: -self.z }
    }

    pub fn vector_part(&self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.z)
    }

    /// Rotate a vector by this (unit) quaternion.
    pub fn rotate(&self, v: Vector3<f64>) -> Vector3<f64> {
        quat_to_rot(self) * v
    }

    /// Rotate by the inverse of this (unit) quaternion.
    pub fn rotate_inv(&self, v: Vector3<f64>) -> Vector3<f64> {
        quat_to_rot(self).transpose() * v
    }

    /// Extract a unit quaternion from a rotation matrix (Shepperd's method).
    pub fn from_rotation_matrix(r: &Matrix3<f64>) -> Quat {
        let tr = r[(0, 0)] + r[(1, 1)] + r[(2, 2)];
        let q = if tr > 0.0 {
            let s = (tr + 1.0).sqrt() * 2.0;
            Quat::new(
                0.25 * s,
                (r[(2, 1)] - r[(1, 2)]) / s,
                (r[(0, 2)] - r[(2, 0)]) / s,
                (r[(1, 0)] - r[(0, 1)]) / s,
            )
        } else if r[(0, 0)] > r[(1, 1)] && r[(0, 0)] > r[(2, 2)] {
            let s = (1.0 + r[(0, 0)] - r[(1, 1)] - r[(2, 2)]).sqrt() * 2.0;
            Quat::new(
                (r[(2, 1)] - r[(1, 2)]) / s,
                0.25 * s,
                (r[(0, 1)] + r[(1, 0)]) / s,
                (r[(0, 2)] + r[(2, 0)]) / s,
            )
        } else if r[(1, 1)] > r[(2, 2)] {
            let s = (1.0 + r[(1, 1)] - r[(0, 0)] - r[(2, 2)]).sqrt() * 2.0;
            Quat::new(
                (r[(0, 2)] - r[(2, 0)]) / s,
                (r[(0, 1)] + r[(1, 0)]) / s,
                0.25 * s,
                (r[(1, 2)] + r[(2, 1)]) / s,
            )
        } else {
            let s = (1.0 + r[(2, 2)] - r[(0, 0)] - r[(1, 1)]).sqrt() * 2.0;
            Quat::new(
                (r[(1, 0)] - r[(0, 1)]) / s,
                (r[(0, 2)] + r[(2, 0)]) / s,
                (r[(1, 2)] + r[(2, 1)]) / s,
                0.25 * s,
            )
        };
        q.normalized()
    }
}

/// Hamilton product a ⊗ b.
pub fn quat_mul(a: &Quat, b: &Quat) -> Quat {
    Quat {
        w: a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
        x: a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
        y: a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
        z: a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w,
    }
}

/// Rotation matrix of a unit quaternion.
pub fn quat_to_rot(q: &Quat) -> Matrix3<f64> {
    let (w, x, y, z) = (q.w, q.x, q.y, q.z);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Rigid transform: position plus orientation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub position: Vector3<f64>,
    pub orientation: Quat,
}

impl Pose {
    pub const IDENTITY: Pose =
        Pose { position: Vector3::new(0.0, 0.0, 0.0), orientation: Quat::IDENTITY };

    pub fn new(position: Vector3<f64>, orientation: Quat) -> Self {
        Pose { position, orientation }
    }

    /// Map a point from this frame into the parent frame: R·p + t.
    pub fn transform_point(&self, p: Vector3<f64>) -> Vector3<f64> {
        self.orientation.rotate(p) + self.position
    }

    /// Map a point from the parent frame into this frame: Rᵀ(p − t).
    pub fn inverse_transform_point(&self, p: Vector3<f64>) -> Vector3<f64> {
        self.orientation.rotate_inv(p - self.position)
    }

    /// Compose with a child pose: self ∘ child.
    pub fn compose(&self, child: &Pose) -> Pose {
        Pose {
            position: self.transform_point(child.position),
            orientation: quat_mul(&self.orientation, &child.orientation).normalized(),
        }
    }

    /// Level attitude at `position` with the optical axis pointing along the
    /// horizontal direction `dir_xy` and the camera "down" axis (+y) aligned
    /// with world −z. This is the attitude used to start planar missions.
    pub fn level_facing(position: Vector3<f64>, dir_xy: Vector3<f64>) -> Pose {
        let fwd = Vector3::new(dir_xy.x, dir_xy.y, 0.0).normalize();
        let down = Vector3::new(0.0, 0.0, -1.0);
        let right = down.cross(&fwd);
        let r = Matrix3::from_columns(&[right, down, fwd]);
        Pose { position, orientation: Quat::from_rotation_matrix(&r) }
    }
}

/// Pinhole-style pyramidal FOV model of the depth camera.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    /// Half horizontal aperture [rad].
    pub alpha_h: f64,
    /// Half vertical aperture [rad].
    pub alpha_v: f64,
    /// Maximum sensing depth [m].
    pub d_max: f64,
    /// Horizontal pixel count.
    pub n_h: usize,
    /// Vertical pixel count.
    pub n_v: usize,
    /// Constant body-to-camera transform.
    pub extrinsics: Pose,
    /// Capture rate [Hz].
    pub rate_hz: f64,
}

impl CameraModel {
    pub fn new(
        alpha_h: f64,
        alpha_v: f64,
        d_max: f64,
        n_h: usize,
        n_v: usize,
        extrinsics: Pose,
        rate_hz: f64,
    ) -> Result<Self, GeomError> {
        let cam = CameraModel { alpha_h, alpha_v, d_max, n_h, n_v, extrinsics, rate_hz };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<(), GeomError> {
        if !(self.alpha_h > 0.0 && self.alpha_h < std::f64::consts::FRAC_PI_2) {
            return Err(GeomError::InvalidCamera(format!("alpha_h out of range: {}", self.alpha_h)));
        }
        if !(self.alpha_v > 0.0 && self.alpha_v < std::f64::consts::FRAC_PI_2) {
            return Err(GeomError::InvalidCamera(format!("alpha_v out of range: {}", self.alpha_v)));
        }
        if !(self.d_max > 0.0) {
            return Err(GeomError::InvalidCamera(format!("d_max must be positive: {}", self.d_max)));
        }
        if self.n_h < 8 || self.n_v < 8 {
            return Err(GeomError::InvalidCamera(format!(
                "resolution too small: {}x{}",
                self.n_h, self.n_v
            )));
        }
        Ok(())
    }

    pub fn tan_alpha_h(&self) -> f64 {
        self.alpha_h.tan()
    }

    pub fn tan_alpha_v(&self) -> f64 {
        self.alpha_v.tan()
    }

    /// Ray direction through the center of pixel (row, col), in the camera
    /// frame, scaled so that the z component is 1 (the ray parameter is then
    /// z-depth directly).
    pub fn pixel_ray(&self, row: usize, col: usize) -> Vector3<f64> {
        let u = (col as f64 + 0.5) / self.n_h as f64;
        let v = (row as f64 + 0.5) / self.n_v as f64;
        Vector3::new(
            (2.0 * u - 1.0) * self.tan_alpha_h(),
            (2.0 * v - 1.0) * self.tan_alpha_v(),
            1.0,
        )
    }

    /// Pixel (row, col) containing the projection of a camera-frame point
    /// with z > 0. Uses floor binning; points projecting exactly onto the
    /// outer image border belong to the nearer (inside) pixel.
    pub fn project_to_pixel(&self, p: Vector3<f64>) -> Option<(usize, usize)> {
        if p.z <= 0.0 {
            return None;
        }
        let u = (p.x / (p.z * self.tan_alpha_h()) + 1.0) / 2.0;
        let v = (p.y / (p.z * self.tan_alpha_v()) + 1.0) / 2.0;
        if !(0.0..=1.0).contains(&u) || !(0.0..=1.0).contains(&v) {
            return None;
        }
        let col = ((u * self.n_h as f64).floor() as usize).min(self.n_h - 1);
        let row = ((v * self.n_v as f64).floor() as usize).min(self.n_v - 1);
        Some((row, col))
    }

    /// Desk-scale default matching a D455-like angular FOV: half-angles
    /// 43.5° x 29°, 5 m max depth, 64x48 pixels at 30 Hz, identity extrinsics.
    pub fn default_desk() -> Self {
        CameraModel {
            alpha_h: 43.5_f64.to_radians(),
            alpha_v: 29.0_f64.to_radians(),
            d_max: 5.0,
            n_h: 64,
            n_v: 48,
            extrinsics: Pose::IDENTITY,
            rate_hz: 30.0,
        }
    }
}

/// Position of the camera origin for a given body state, expressed in the
/// frame of the camera at capture time (C0):
/// ᶜ⁰p_C = ᵂR_{C0}ᵀ (ᵂR_B · ᴮp_C + ᵂp_B − ᵂp_{C0}).
pub fn camera_point_in_capture_frame(
    state_position: Vector3<f64>,
    state_quat: &Quat,
    capture_pose: &Pose,
    extrinsics: &Pose,
) -> Vector3<f64> {
    let p_cam_world = state_quat.rotate(extrinsics.position) + state_position;
    capture_pose.inverse_transform_point(p_cam_world)
}

/// Scale a camera-frame point [m] to the unit-less network input:
/// a = (x/tan α_H, y/tan α_V, z) / d_max.
pub fn scale_to_network_input(p: Vector3<f64>, cam: &CameraModel) -> Vector3<f64> {
    Vector3::new(p.x / cam.tan_alpha_h(), p.y / cam.tan_alpha_v(), p.z) / cam.d_max
}

/// Inverse of [`scale_to_network_input`].
pub fn unscale_from_network_input(a: Vector3<f64>, cam: &CameraModel) -> Vector3<f64> {
    Vector3::new(a.x * cam.tan_alpha_h(), a.y * cam.tan_alpha_v(), a.z) * cam.d_max
}

/// FOV membership with closed boundary:
/// 0 < z ≤ d_max, |x| ≤ z·tan α_H, |y| ≤ z·tan α_V.
pub fn in_fov(p: Vector3<f64>, cam: &CameraModel) -> bool {
    p.z > 0.0
        && p.z <= cam.d_max
        && p.x.abs() <= p.z * cam.tan_alpha_h()
        && p.y.abs() <= p.z * cam.tan_alpha_v()
}

/// Left product matrix: L(a)·b = a ⊗ b with b as a (w,x,y,z) column.
pub fn quat_l_matrix(a: &Quat) -> Matrix4<f64> {
    Matrix4::new(
        a.w, -a.x, -a.y, -a.z,
        a.x, a.w, -a.z, a.y,
        a.y, a.z, a.w, -a.x,
        a.z, -a.y, a.x, a.w,
    )
}

/// Right product matrix: R(b)·a = a ⊗ b with a as a (w,x,y,z) column.
pub fn quat_r_matrix(b: &Quat) -> Matrix4<f64> {
    Matrix4::new(
        b.w, -b.x, -b.y, -b.z,
        b.x, b.w, b.z, -b.y,
        b.y, -b.z, b.w, b.x,
        b.z, b.y, -b.x, b.w,
    )
}

/// Jacobian of R(q)·e_z with respect to the quaternion components (3x4,
/// columns ordered w, x, y, z). Valid for any q; for unit q the rows are the
/// partials of the body z axis expressed in the parent frame.
pub fn drot_ez_dq(q: &Quat) -> Matrix3x4<f64> {
    let (w, x, y, z) = (q.w, q.x, q.y, q.z);
    Matrix3x4::new(
        2.0 * y, 2.0 * z, 2.0 * w, 2.0 * x,
        -2.0 * x, -2.0 * w, 2.0 * z, 2.0 * y,
        0.0, -4.0 * x, -4.0 * y, 0.0,
    )
}

/// Jacobian of q/‖q‖ with respect to q: (I − q̂ q̂ᵀ)/‖q‖.
pub fn dnormalize_dq(q: &Quat) -> Matrix4<f64> {
    let n = q.norm();
    let qh = nalgebra::Vector4::new(q.w, q.x, q.y, q.z) / n;
    (Matrix4::identity() - qh * qh.transpose()) / n
}

/// Uniform random unit quaternion (Shoemake's method).
pub fn random_unit_quat<R: rand::Rng>(rng: &mut R) -> Quat {
    let u1: f64 = rng.random();
    let u2: f64 = rng.random();
    let u3: f64 = rng.random();
    let two_pi = std::f64::consts::TAU;
    Quat {
        w: (1.0 - u1).sqrt() * (two_pi * u2).sin(),
        x: (1.0 - u1).sqrt() * (two_pi * u2).cos(),
        y: u1.sqrt() * (two_pi * u3).sin(),
        z: u1.sqrt() * (two_pi * u3).cos(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cam_45_30() -> CameraModel {
        CameraModel::new(
            45.0_f64.to_radians(),
            30.0_f64.to_radians(),
            5.0,
            64,
            48,
            Pose::IDENTITY,
            30.0,
        )
        .unwrap()
    }

    #[test]
    fn quat_mul_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let q = random_unit_quat(&mut rng);
            let r = quat_mul(&Quat::IDENTITY, &q);
            assert_relative_eq!(r.w, q.w, epsilon = 1e-15);
            assert_relative_eq!(r.x, q.x, epsilon = 1e-15);
            assert_relative_eq!(r.y, q.y, epsilon = 1e-15);
            assert_relative_eq!(r.z, q.z, epsilon = 1e-15);
        }
    }

    #[test]
    fn quat_mul_conjugate_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let q = random_unit_quat(&mut rng);
            let r = quat_mul(&q, &q.conjugate());
            assert_relative_eq!(r.w, 1.0, epsilon = 1e-12);
            assert!(r.vector_part().norm() < 1e-12);
        }
    }

    #[test]
    fn quat_mul_pure_x_times_pure_y() {
        // Direct expansion of the Hamilton product: i ⊗ j = k.
        let a = Quat::new(0.0, 1.0, 0.0, 0.0);
        let b = Quat::new(0.0, 0.0, 1.0, 0.0);
        let r = quat_mul(&a, &b);
        assert_eq!((r.w, r.x, r.y, r.z), (0.0, 0.0, 0.0, 1.0));
    }

    #[test]
    fn quat_mul_norm_multiplicative() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let a = Quat::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5,
                              rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5);
            let b = Quat::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5,
                              rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5);
            assert_relative_eq!(quat_mul(&a, &b).norm(), a.norm() * b.norm(), epsilon = 1e-12);
        }
    }

    #[test]
    fn quat_mul_associative() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let a = random_unit_quat(&mut rng);
            let b = random_unit_quat(&mut rng);
            let c = random_unit_quat(&mut rng);
            let lhs = quat_mul(&quat_mul(&a, &b), &c);
            let rhs = quat_mul(&a, &quat_mul(&b, &c));
            assert_relative_eq!(lhs.w, rhs.w, epsilon = 1e-12);
            assert_relative_eq!(lhs.x, rhs.x, epsilon = 1e-12);
            assert_relative_eq!(lhs.y, rhs.y, epsilon = 1e-12);
            assert_relative_eq!(lhs.z, rhs.z, epsilon = 1e-12);
        }
    }

    #[test]
    fn quat_to_rot_identity() {
        let r = quat_to_rot(&Quat::IDENTITY);
        assert_relative_eq!(r, Matrix3::identity(), epsilon = 1e-15);
    }

    #[test]
    fn quat_to_rot_90deg_about_z_maps_x_to_y() {
        let q = Quat::from_axis_angle(Vector3::z(), std::f64::consts::FRAC_PI_2);
        let v = quat_to_rot(&q) * Vector3::x();
        assert_relative_eq!(v, Vector3::y(), epsilon = 1e-12);
    }

    #[test]
    fn quat_to_rot_orthonormal_det_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let q = random_unit_quat(&mut rng);
            let r = quat_to_rot(&q);
            assert_relative_eq!(r.transpose() * r, Matrix3::identity(), epsilon = 1e-9);
            assert_relative_eq!(r.determinant(), 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn quat_to_rot_homomorphism() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..100 {
            let a = random_unit_quat(&mut rng);
            let b = random_unit_quat(&mut rng);
            let lhs = quat_to_rot(&quat_mul(&a, &b));
            let rhs = quat_to_rot(&a) * quat_to_rot(&b);
            assert_relative_eq!(lhs, rhs, epsilon = 1e-10);
        }
    }

    #[test]
    fn from_rotation_matrix_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let q = random_unit_quat(&mut rng);
            let q2 = Quat::from_rotation_matrix(&quat_to_rot(&q));
            // q and -q encode the same rotation.
            let sign = if q.w * q2.w + q.x * q2.x + q.y * q2.y + q.z * q2.z < 0.0 { -1.0 } else { 1.0 };
            assert_relative_eq!(q.w, sign * q2.w, epsilon = 1e-9);
            assert_relative_eq!(q.x, sign * q2.x, epsilon = 1e-9);
            assert_relative_eq!(q.y, sign * q2.y, epsilon = 1e-9);
            assert_relative_eq!(q.z, sign * q2.z, epsilon = 1e-9);
        }
    }

    #[test]
    fn capture_frame_same_pose_is_origin() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let pose = Pose::new(
                Vector3::new(rng.random::<f64>() * 4.0, rng.random::<f64>() * 4.0, rng.random::<f64>() * 4.0),
                random_unit_quat(&mut rng),
            );
            let p = camera_point_in_capture_frame(
                pose.position,
                &pose.orientation,
                &pose,
                &Pose::IDENTITY,
            );
            assert!(p.norm() < 1e-12);
        }
    }

    #[test]
    fn capture_frame_forward_translation() {
        // 1 m along the C0 optical axis with identity rotations -> (0, 0, 1).
        let capture = Pose::IDENTITY;
        let p = camera_point_in_capture_frame(
            Vector3::new(0.0, 0.0, 1.0),
            &Quat::IDENTITY,
            &capture,
            &Pose::IDENTITY,
        );
        assert_relative_eq!(p, Vector3::new(0.0, 0.0, 1.0), epsilon = 1e-15);
    }

    #[test]
    fn capture_frame_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let capture = Pose::new(
                Vector3::new(rng.random(), rng.random(), rng.random()),
                random_unit_quat(&mut rng),
            );
            let extr = Pose::IDENTITY;
            let state_p = Vector3::new(rng.random(), rng.random(), rng.random());
            let state_q = random_unit_quat(&mut rng);
            let in_c0 = camera_point_in_capture_frame(state_p, &state_q, &capture, &extr);
            // Inverse: world position of the camera recovered from C0 coordinates.
            let back = capture.transform_point(in_c0);
            let direct = state_q.rotate(extr.position) + state_p;
            assert!((back - direct).norm() < 1e-12);
        }
    }

    #[test]
    fn scaling_origin_and_reference_point() {
        let cam = cam_45_30();
        assert_eq!(scale_to_network_input(Vector3::zeros(), &cam), Vector3::zeros());
        let a = scale_to_network_input(Vector3::new(1.0, 0.57735, 5.0), &cam);
        assert_relative_eq!(a, Vector3::new(0.2, 0.2, 1.0), epsilon = 1e-6);
    }

    #[test]
    fn scaling_box_cone_inequalities_inside_fov() {
        let cam = CameraModel::default_desk();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut checked = 0usize;
        while checked < 100_000 {
            let p = Vector3::new(
                (rng.random::<f64>() - 0.5) * 12.0,
                (rng.random::<f64>() - 0.5) * 12.0,
                (rng.random::<f64>() - 0.5) * 12.0,
            );
            if !in_fov(p, &cam) {
                continue;
            }
            let a = scale_to_network_input(p, &cam);
            assert!(a.x.abs() <= a.z + 1e-12 && a.y.abs() <= a.z + 1e-12);
            assert!(a.z > 0.0 && a.z <= 1.0 + 1e-12);
            checked += 1;
        }
    }

    #[test]
    fn scaling_bijection_on_fov() {
        let cam = CameraModel::default_desk();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10_000 {
            let z = rng.random::<f64>() * cam.d_max;
            let p = Vector3::new(
                (rng.random::<f64>() * 2.0 - 1.0) * z * cam.tan_alpha_h(),
                (rng.random::<f64>() * 2.0 - 1.0) * z * cam.tan_alpha_v(),
                z,
            );
            let back = unscale_from_network_input(scale_to_network_input(p, &cam), &cam);
            assert!((back - p).norm() < 1e-12);
        }
    }

    #[test]
    fn in_fov_matches_scaled_inequalities() {
        let cam = CameraModel::default_desk();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..100_000 {
            let p = Vector3::new(
                (rng.random::<f64>() - 0.5) * 14.0,
                (rng.random::<f64>() - 0.5) * 14.0,
                (rng.random::<f64>() - 0.5) * 14.0,
            );
            let a = scale_to_network_input(p, &cam);
            let by_scaled = a.z > 0.0 && a.z <= 1.0 && a.x.abs() <= a.z && a.y.abs() <= a.z;
            assert_eq!(in_fov(p, &cam), by_scaled);
        }
    }

    #[test]
    fn in_fov_examples() {
        let cam = CameraModel::default_desk();
        assert!(in_fov(Vector3::new(0.0, 0.0, cam.d_max / 2.0), &cam));
        assert!(!in_fov(Vector3::new(0.0, 0.0, -1.0), &cam));
        // Closed boundary: corner point exactly on the FOV surface.
        let z = cam.d_max;
        assert!(in_fov(Vector3::new(z * cam.tan_alpha_h(), 0.0, z), &cam));
    }

    #[test]
    fn camera_validation_rejects_bad_models() {
        assert!(CameraModel::new(2.0, 0.5, 5.0, 64, 48, Pose::IDENTITY, 30.0).is_err());
        assert!(CameraModel::new(0.7, 0.5, -1.0, 64, 48, Pose::IDENTITY, 30.0).is_err());
        assert!(CameraModel::new(0.7, 0.5, 5.0, 4, 48, Pose::IDENTITY, 30.0).is_err());
    }

    #[test]
    fn product_matrices_match_hamilton_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..200 {
            let a = random_unit_quat(&mut rng);
            let b = random_unit_quat(&mut rng);
            let ab = quat_mul(&a, &b);
            let via_l = quat_l_matrix(&a) * nalgebra::Vector4::new(b.w, b.x, b.y, b.z);
            let via_r = quat_r_matrix(&b) * nalgebra::Vector4::new(a.w, a.x, a.y, a.z);
            for (got, want) in [(via_l, ab), (via_r, ab)] {
                assert_relative_eq!(got.x, want.w, epsilon = 1e-14);
                assert_relative_eq!(got.y, want.x, epsilon = 1e-14);
                assert_relative_eq!(got.z, want.y, epsilon = 1e-14);
                assert_relative_eq!(got.w, want.z, epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn drot_ez_dq_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let h = 1e-6;
        for _ in 0..50 {
            let q = random_unit_quat(&mut rng);
            let jac = drot_ez_dq(&q);
            for k in 0..4 {
                let mut qp = q;
                let mut qm = q;
                match k {
                    0 => {
                        qp.w += h;
                        qm.w -= h;
                    }
                    1 => {
                        qp.x += h;
                        qm.x -= h;
                    }
                    2 => {
                        qp.y += h;
                        qm.y -= h;
                    }
                    _ => {
                        qp.z += h;
                        qm.z -= h;
                    }
                }
                // Unnormalized on purpose: the Jacobian is of the raw polynomial map.
                let fd = (quat_to_rot(&qp) * Vector3::z() - quat_to_rot(&qm) * Vector3::z())
                    / (2.0 * h);
                for i in 0..3 {
                    assert_relative_eq!(jac[(i, k)], fd[i], epsilon = 1e-7);
                }
            }
        }
    }

    #[test]
    fn dnormalize_dq_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let h = 1e-6;
        for _ in 0..50 {
            let mut q = random_unit_quat(&mut rng);
            // Perturb off the unit sphere so normalization is non-trivial.
            q.w *= 1.3;
            q.y *= 0.8;
            let jac = dnormalize_dq(&q);
            for k in 0..4 {
                let mut qp = q;
                let mut qm = q;
                match k {
                    0 => {
                        qp.w += h;
                        qm.w -= h;
                    }
                    1 => {
                        qp.x += h;
                        qm.x -= h;
                    }
                    2 => {
                        qp.y += h;
                        qm.y -= h;
                    }
                    _ => {
                        qp.z += h;
                        qm.z -= h;
                    }
                }
                let np = qp.normalized();
                let nm = qm.normalized();
                let fd = [
                    (np.w - nm.w) / (2.0 * h),
                    (np.x - nm.x) / (2.0 * h),
                    (np.y - nm.y) / (2.0 * h),
                    (np.z - nm.z) / (2.0 * h),
                ];
                for i in 0..4 {
                    assert_relative_eq!(jac[(i, k)], fd[i], epsilon = 1e-7);
                }
            }
        }
    }

    #[test]
    fn level_facing_keeps_optical_axis_horizontal() {
        let pose = Pose::level_facing(Vector3::zeros(), Vector3::new(1.0, 0.0, 0.0));
        let r = quat_to_rot(&pose.orientation);
        // Optical axis (body z) points along +x, body y points down.
        assert_relative_eq!(r * Vector3::z(), Vector3::x(), epsilon = 1e-12);
        assert_relative_eq!(r * Vector3::y(), -Vector3::z(), epsilon = 1e-12);
        assert_relative_eq!(pose.orientation.norm(), 1.0, epsilon = 1e-9);
    }
}
