//! Quaternion and 3D vector kernel.
//!
//! Quaternions are stored scalar-first `(w, x, y, z)` and represent the rotation
//! from body to world frame. `q` and `-q` encode the same rotation; compare
//! rotations with [`Quat::angle_to`] instead of component-wise.

use std::ops::{Add, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

pub type Vec3 = nalgebra::Vector3<f64>;
pub type Mat3 = nalgebra::Matrix3<f64>;

/// Tolerance used by debug assertions on unit-norm preconditions.
const UNIT_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quat {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Default for Quat {
    fn default() -> Self {
        Self::identity()
    }
}

impl Quat {
    pub const fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Self { w, x, y, z }
    }

    pub const fn identity() -> Self {
        Self::new(1.0, 0.0, 0.0, 0.0)
    }

    /// Rotation of `angle` radians about `axis` (need not be normalized).
    pub fn from_axis_angle(axis: &Vec3, angle: f64) -> Self {
        let n = axis.norm();
        if n == 0.0 {
            return Self::identity();
        }
        let (s, c) = (0.5 * angle).sin_cos();
        let a = axis / n * s;
        Self::new(c, a.x, a.y, a.z)
    }

    /// Exponential map of a rotation vector.
    pub fn from_rotation_vector(rv: &Vec3) -> Self {
        Self::from_axis_angle(rv, rv.norm())
    }

    pub fn from_yaw(yaw: f64) -> Self {
        let (s, c) = (0.5 * yaw).sin_cos();
        Self::new(c, 0.0, 0.0, s)
    }

    pub fn vec(&self) -> Vec3 {
        Vec3::new(self.x, self.y, self.z)
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn norm_squared(&self) -> f64 {
        self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z
    }

    pub fn norm(&self) -> f64 {
        self.norm_squared().sqrt()
    }

    pub fn normalized(&self) -> Self {
        let n = self.norm();
        if n == 0.0 || !n.is_finite() {
            return Self::identity();
        }
        self.scale(1.0 / n)
    }

    pub fn is_unit(&self, tol: f64) -> bool {
        (self.norm_squared() - 1.0).abs() <= tol
    }

    pub fn conj(&self) -> Self {
        Self::new(self.w, -self.x, -self.y, -self.z)
    }

    pub fn scale(&self, s: f64) -> Self {
        Self::new(self.w * s, self.x * s, self.y * s, self.z * s)
    }

    pub fn dot(&self, o: &Self) -> f64 {
        self.w * o.w + self.x * o.x + self.y * o.y + self.z * o.z
    }

    /// Returns the representative with non-negative scalar part.
    pub fn canonical(&self) -> Self {
        if self.w < 0.0 {
            -*self
        } else {
            *self
        }
    }

    /// Rotates `v` by this quaternion, i.e. `q v q̄`.
    pub fn rotate(&self, v: &Vec3) -> Vec3 {
        debug_assert!(self.is_unit(UNIT_TOL), "rotate requires a unit quaternion");
        // v + 2 u × (u × v + w v)
        let u = self.vec();
        let t = u.cross(v) * 2.0;
        v + t * self.w + u.cross(&t)
    }

    /// Rotates `v` by the inverse of this quaternion.
    pub fn rotate_inv(&self, v: &Vec3) -> Vec3 {
        self.conj().rotate(v)
    }

    pub fn to_rotmat(&self) -> Mat3 {
        debug_assert!(self.is_unit(UNIT_TOL), "to_rotmat requires a unit quaternion");
        let (w, x, y, z) = (self.w, self.x, self.y, self.z);
        let (xx, yy, zz) = (x * x, y * y, z * z);
        let (xy, xz, yz) = (x * y, x * z, y * z);
        let (wx, wy, wz) = (w * x, w * y, w * z);
        Mat3::new(
            1.0 - 2.0 * (yy + zz),
            2.0 * (xy - wz),
            2.0 * (xz + wy),
            2.0 * (xy + wz),
            1.0 - 2.0 * (xx + zz),
            2.0 * (yz - wx),
            2.0 * (xz - wy),
            2.0 * (yz + wx),
            1.0 - 2.0 * (xx + yy),
        )
    }

    /// Shepperd's method; the input should be orthonormal.
    pub fn from_rotmat(r: &Mat3) -> Self {
        let tr = r[(0, 0)] + r[(1, 1)] + r[(2, 2)];
        let q = if tr > 0.0 {
            let s = (tr + 1.0).sqrt() * 2.0;
            Self::new(
                0.25 * s,
                (r[(2, 1)] - r[(1, 2)]) / s,
                (r[(0, 2)] - r[(2, 0)]) / s,
                (r[(1, 0)] - r[(0, 1)]) / s,
            )
        } else if r[(0, 0)] > r[(1, 1)] && r[(0, 0)] > r[(2, 2)] {
            let s = (1.0 + r[(0, 0)] - r[(1, 1)] - r[(2, 2)]).sqrt() * 2.0;
            Self::new(
                (r[(2, 1)] - r[(1, 2)]) / s,
                0.25 * s,
                (r[(0, 1)] + r[(1, 0)]) / s,
                (r[(0, 2)] + r[(2, 0)]) / s,
            )
        } else if r[(1, 1)] > r[(2, 2)] {
            let s = (1.0 + r[(1, 1)] - r[(0, 0)] - r[(2, 2)]).sqrt() * 2.0;
            Self::new(
                (r[(0, 2)] - r[(2, 0)]) / s,
                (r[(0, 1)] + r[(1, 0)]) / s,
                0.25 * s,
                (r[(1, 2)] + r[(2, 1)]) / s,
            )
        } else {
            let s = (1.0 + r[(2, 2)] - r[(0, 0)] - r[(1, 1)]).sqrt() * 2.0;
            Self::new(
                (r[(1, 0)] - r[(0, 1)]) / s,
                (r[(0, 2)] + r[(2, 0)]) / s,
                (r[(1, 2)] + r[(2, 1)]) / s,
                0.25 * s,
            )
        };
        q.normalized().canonical()
    }

    /// Quaternion rate `½ q ⊗ (0, ω)` for a body-frame angular velocity.
    pub fn derivative(&self, omega_body: &Vec3) -> Self {
        debug_assert!(self.is_unit(UNIT_TOL), "derivative requires a unit quaternion");
        (*self * Self::new(0.0, omega_body.x, omega_body.y, omega_body.z)).scale(0.5)
    }

    /// Rotation angle (rad) between the rotations represented by two quaternions.
    pub fn angle_to(&self, other: &Self) -> f64 {
        let e = self.normalized().conj() * other.normalized();
        2.0 * e.vec().norm().atan2(e.w.abs())
    }

    /// Rotation vector (axis × angle) of the rotation, shortest form.
    pub fn to_rotation_vector(&self) -> Vec3 {
        let q = self.normalized().canonical();
        let s = q.vec().norm();
        if s < 1e-12 {
            return q.vec() * 2.0;
        }
        let angle = 2.0 * s.atan2(q.w);
        q.vec() * (angle / s)
    }

    /// Yaw angle of the body x-axis projected on the world xy-plane.
    pub fn yaw(&self) -> f64 {
        let (w, x, y, z) = (self.w, self.x, self.y, self.z);
        (2.0 * (w * z + x * y)).atan2(1.0 - 2.0 * (y * y + z * z))
    }
}

impl Mul for Quat {
    type Output = Quat;

    /// Hamilton product.
    fn mul(self, o: Quat) -> Quat {
        Quat::new(
            self.w * o.w - self.x * o.x - self.y * o.y - self.z * o.z,
            self.w * o.x + self.x * o.w + self.y * o.z - self.z * o.y,
            self.w * o.y - self.x * o.z + self.y * o.w + self.z * o.x,
            self.w * o.z + self.x * o.y - self.y * o.x + self.z * o.w,
        )
    }
}

impl Add for Quat {
    type Output = Quat;
    fn add(self, o: Quat) -> Quat {
        Quat::new(self.w + o.w, self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl Sub for Quat {
    type Output = Quat;
    fn sub(self, o: Quat) -> Quat {
        Quat::new(self.w - o.w, self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Neg for Quat {
    type Output = Quat;
    fn neg(self) -> Quat {
        self.scale(-1.0)
    }
}

/// Row-major flattening of a 3×3 matrix.
pub fn mat3_row_major(m: &Mat3) -> [f64; 9] {
    [
        m[(0, 0)],
        m[(0, 1)],
        m[(0, 2)],
        m[(1, 0)],
        m[(1, 1)],
        m[(1, 2)],
        m[(2, 0)],
        m[(2, 1)],
        m[(2, 2)],
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn quat_strategy() -> impl Strategy<Value = Quat> {
        (-1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64)
            .prop_filter("non-degenerate", |(w, x, y, z)| w * w + x * x + y * y + z * z > 1e-3)
            .prop_map(|(w, x, y, z)| Quat::new(w, x, y, z).normalized())
    }

    fn vec_strategy() -> impl Strategy<Value = Vec3> {
        (-10.0..10.0f64, -10.0..10.0f64, -10.0..10.0f64).prop_map(|(x, y, z)| Vec3::new(x, y, z))
    }

    #[test]
    fn identity_rotation() {
        let v = Vec3::new(1.0, 2.0, 3.0);
        assert_eq!(Quat::identity().rotate(&v), v);
        assert_eq!(Quat::identity().to_rotmat(), Mat3::identity());
    }

    #[test]
    fn quarter_turn_about_z() {
        let q = Quat::from_axis_angle(&Vec3::z(), FRAC_PI_2);
        let r = q.rotate(&Vec3::x());
        assert!((r - Vec3::y()).norm() < 1e-15);
    }

    #[test]
    fn half_turn_about_x() {
        let q = Quat::from_axis_angle(&Vec3::x(), PI);
        let r = q.to_rotmat();
        let expected = Mat3::from_diagonal(&Vec3::new(1.0, -1.0, -1.0));
        assert!((r - expected).abs().max() < 1e-15);
    }

    #[test]
    fn derivative_hand_expansion() {
        assert_eq!(Quat::identity().derivative(&Vec3::zeros()), Quat::new(0.0, 0.0, 0.0, 0.0));
        let qd = Quat::identity().derivative(&Vec3::new(0.0, 0.0, 2.0));
        assert_eq!(qd, Quat::new(0.0, 0.0, 0.0, 1.0));
    }

    #[test]
    fn rotation_vector_round_trip() {
        let rv = Vec3::new(0.3, -0.2, 1.1);
        let back = Quat::from_rotation_vector(&rv).to_rotation_vector();
        assert!((back - rv).norm() < 1e-12);
        assert_eq!(Quat::identity().to_rotation_vector(), Vec3::zeros());
    }

    #[test]
    fn yaw_extraction() {
        assert!((Quat::from_yaw(0.7).yaw() - 0.7).abs() < 1e-14);
    }

    proptest! {
        #[test]
        fn rotate_preserves_norm(q in quat_strategy(), v in vec_strategy()) {
            let r = q.rotate(&v);
            prop_assert!((r.norm() - v.norm()).abs() <= 1e-12 * v.norm().max(1.0));
        }

        #[test]
        fn rotmat_matches_rotate(q in quat_strategy()) {
            let r = q.to_rotmat();
            for e in [Vec3::x(), Vec3::y(), Vec3::z()] {
                prop_assert!((r * e - q.rotate(&e)).norm() <= 1e-12);
            }
            let err = (r.transpose() * r - Mat3::identity()).abs().max();
            prop_assert!(err <= 1e-9);
            prop_assert!((r.determinant() - 1.0).abs() <= 1e-9);
        }

        #[test]
        fn derivative_is_tangent(q in quat_strategy(), w in vec_strategy()) {
            prop_assert!(q.dot(&q.derivative(&w)).abs() <= 1e-12);
        }

        #[test]
        fn composition_associates(q1 in quat_strategy(), q2 in quat_strategy(), v in vec_strategy()) {
            let lhs = (q1 * q2).normalized().rotate(&v);
            let rhs = q1.rotate(&q2.rotate(&v));
            prop_assert!((lhs - rhs).norm() <= 1e-10);
        }

        #[test]
        fn rotmat_round_trip(q in quat_strategy()) {
            let back = Quat::from_rotmat(&q.to_rotmat());
            prop_assert!(back.angle_to(&q) <= 1e-8);
            prop_assert!(back.is_unit(1e-9));
        }
    }
}
