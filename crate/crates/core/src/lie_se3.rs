//! Rigid-body kinematics on SE(3).
//!
//! Poses are stored as a world-frame position plus a unit quaternion.
//! Tangent vectors ([`Twist`]) are ordered `(linear; angular)` so that they
//! line up with the surge, sway, heave, roll, pitch, yaw ordering used by the
//! dynamics.

use std::ops::Mul;

use nalgebra::{Matrix3, Matrix6, Quaternion, UnitQuaternion, Vector3, Vector6};
use thiserror::Error;

/// Below this rotation angle the exp/log coefficients switch to their
/// Taylor expansions.
pub const SMALL_ANGLE: f64 = 1e-7;

/// Rotations closer than this to pi have no well-conditioned logarithm.
pub const NEAR_PI_MARGIN: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Error)]
pub enum LieError {
    #[error("rotation angle {angle} rad is within {NEAR_PI_MARGIN} of pi; logarithm is ill-conditioned")]
    AngleNearPi { angle: f64 },
    #[error("quaternion has zero or non-finite norm")]
    DegenerateQuaternion,
}

/// Unit quaternion, canonicalized so that `w >= 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnitQuat(UnitQuaternion<f64>);

impl UnitQuat {
    pub fn identity() -> Self {
        Self(UnitQuaternion::identity())
    }

    /// Normalizes `(w, x, y, z)` and flips the sign if `w < 0`.
    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Result<Self, LieError> {
        let q = Quaternion::new(w, x, y, z);
        let norm = q.norm();
        if !norm.is_finite() || norm == 0.0 {
            return Err(LieError::DegenerateQuaternion);
        }
        Ok(Self::canonical(q / norm))
    }

    fn canonical(q: Quaternion<f64>) -> Self {
        let q = if q.w < 0.0 { -q } else { q };
        Self(UnitQuaternion::new_unchecked(q))
    }

    fn renormalized(q: Quaternion<f64>) -> Self {
        Self::canonical(q / q.norm())
    }

    /// Rotation of `angle` radians about `axis` (need not be normalized).
    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64) -> Self {
        let n = axis.norm();
        if n == 0.0 {
            return Self::identity();
        }
        Self::from_rotation_vector(&(axis * (angle / n)))
    }

    /// Exponential map of so(3): rotation vector to quaternion.
    pub fn from_rotation_vector(omega: &Vector3<f64>) -> Self {
        let theta = omega.norm();
        let (c, s_over_theta) = if theta < SMALL_ANGLE {
            let t2 = theta * theta;
            (1.0 - t2 / 8.0, 0.5 - t2 / 48.0)
        } else {
            let half = 0.5 * theta;
            (half.cos(), half.sin() / theta)
        };
        let v = omega * s_over_theta;
        Self::renormalized(Quaternion::new(c, v.x, v.y, v.z))
    }

    /// Intrinsic Z-Y-X (yaw, pitch, roll) construction.
    pub fn from_euler(roll: f64, pitch: f64, yaw: f64) -> Self {
        Self::canonical(UnitQuaternion::from_euler_angles(roll, pitch, yaw).into_inner())
    }

    pub fn w(&self) -> f64 {
        self.0.w
    }
    pub fn x(&self) -> f64 {
        self.0.i
    }
    pub fn y(&self) -> f64 {
        self.0.j
    }
    pub fn z(&self) -> f64 {
        self.0.k
    }

    /// `[w, x, y, z]`
    pub fn coords(&self) -> [f64; 4] {
        [self.w(), self.x(), self.y(), self.z()]
    }

    pub fn norm(&self) -> f64 {
        self.0.as_ref().norm()
    }

    pub fn inverse(&self) -> Self {
        Self::canonical(self.0.conjugate().into_inner())
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.0.to_rotation_matrix().into_inner()
    }

    pub fn rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.0.transform_vector(v)
    }

    pub fn inverse_rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.0.inverse_transform_vector(v)
    }

    /// Rotation angle in `[0, pi]`.
    pub fn angle(&self) -> f64 {
        let v = Vector3::new(self.x(), self.y(), self.z()).norm();
        2.0 * v.atan2(self.w().abs())
    }

    /// Logarithm of SO(3) on the principal branch (`w >= 0` gives angles up to pi).
    pub fn rotation_vector(&self) -> Vector3<f64> {
        let v = Vector3::new(self.x(), self.y(), self.z());
        let s = v.norm();
        let w = self.w();
        if s < 0.5 * SMALL_ANGLE {
            // 2 * atan(s / w) / s ~ 2 / w for tiny s
            return v * (2.0 / w);
        }
        let theta = 2.0 * s.atan2(w);
        v * (theta / s)
    }

    pub fn yaw(&self) -> f64 {
        self.0.euler_angles().2
    }

    pub fn euler_angles(&self) -> (f64, f64, f64) {
        self.0.euler_angles()
    }

    pub fn as_nalgebra(&self) -> &UnitQuaternion<f64> {
        &self.0
    }
}

impl Default for UnitQuat {
    fn default() -> Self {
        Self::identity()
    }
}

impl Mul for UnitQuat {
    type Output = UnitQuat;

    fn mul(self, rhs: UnitQuat) -> UnitQuat {
        UnitQuat::renormalized(self.0.into_inner() * rhs.0.into_inner())
    }
}

/// Angle of the relative rotation `q^-1 * q_des`, in `[0, pi]`.
pub fn quat_angle_error(q: &UnitQuat, q_des: &UnitQuat) -> f64 {
    let (a, b) = (q.0.into_inner(), q_des.0.into_inner());
    if a == b || a == -b {
        return 0.0;
    }
    let rel = q.0.conjugate().into_inner() * q_des.0.into_inner();
    let v = rel.imag().norm();
    (2.0 * v.atan2(rel.w.abs())).min(std::f64::consts::PI)
}

/// Element of the tangent space, body frame unless stated otherwise.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Twist {
    pub linear: Vector3<f64>,
    pub angular: Vector3<f64>,
}

impl Twist {
    pub fn new(linear: Vector3<f64>, angular: Vector3<f64>) -> Self {
        Self { linear, angular }
    }

    pub fn zero() -> Self {
        Self::default()
    }

    pub fn from_vector(v: &Vector6<f64>) -> Self {
        Self {
            linear: v.fixed_rows::<3>(0).into_owned(),
            angular: v.fixed_rows::<3>(3).into_owned(),
        }
    }

    pub fn from_slice(v: &[f64; 6]) -> Self {
        Self {
            linear: Vector3::new(v[0], v[1], v[2]),
            angular: Vector3::new(v[3], v[4], v[5]),
        }
    }

    pub fn to_vector(&self) -> Vector6<f64> {
        Vector6::new(
            self.linear.x,
            self.linear.y,
            self.linear.z,
            self.angular.x,
            self.angular.y,
            self.angular.z,
        )
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            linear: self.linear * s,
            angular: self.angular * s,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.linear.iter().chain(self.angular.iter()).all(|v| v.is_finite())
    }

    pub fn is_zero(&self) -> bool {
        self.linear.iter().chain(self.angular.iter()).all(|&v| v == 0.0)
    }
}

/// Rigid-body pose in the world frame.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Pose {
    pub position: Vector3<f64>,
    pub orientation: UnitQuat,
}

impl Pose {
    pub fn new(position: Vector3<f64>, orientation: UnitQuat) -> Self {
        Self {
            position,
            orientation,
        }
    }

    pub fn identity() -> Self {
        Self::default()
    }

    pub fn from_translation(position: Vector3<f64>) -> Self {
        Self::new(position, UnitQuat::identity())
    }

    pub fn inverse(&self) -> Self {
        let inv = self.orientation.inverse();
        Self::new(-inv.rotate(&self.position), inv)
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.position + self.orientation.rotate(p)
    }

    /// Closed-form SE(3) exponential.
    pub fn exp(xi: &Twist) -> Self {
        let omega = xi.angular;
        let theta = omega.norm();
        let rotation = UnitQuat::from_rotation_vector(&omega);
        let (a, b) = v_coefficients(theta);
        let w = skew(&omega);
        let translation = xi.linear + w * xi.linear * a + w * (w * xi.linear) * b;
        Self::new(translation, rotation)
    }

    /// Inverse of [`Pose::exp`] on the principal branch.
    pub fn log(&self) -> Result<Twist, LieError> {
        let angle = self.orientation.angle();
        if angle > std::f64::consts::PI - NEAR_PI_MARGIN {
            return Err(LieError::AngleNearPi { angle });
        }
        let omega = self.orientation.rotation_vector();
        let theta = omega.norm();
        let w = skew(&omega);
        // V^-1 = I - W/2 + c W^2
        let c = if theta < SMALL_ANGLE {
            1.0 / 12.0 + theta * theta / 720.0
        } else {
            let half = 0.5 * theta;
            (1.0 - half * half.cos() / half.sin()) / (theta * theta)
        };
        let p = self.position;
        let linear = p - w * p * 0.5 + w * (w * p) * c;
        Ok(Twist::new(linear, omega))
    }

    /// Body-to-world twist transport, block form `[R, [p]x R; 0, R]`.
    pub fn adjoint(&self) -> Matrix6<f64> {
        let r = self.orientation.rotation_matrix();
        let pr = skew(&self.position) * r;
        let mut adj = Matrix6::zeros();
        adj.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        adj.fixed_view_mut::<3, 3>(0, 3).copy_from(&pr);
        adj.fixed_view_mut::<3, 3>(3, 3).copy_from(&r);
        adj
    }

    /// Right-composition with the exponential of a body twist: `m * Exp(xi dt)`.
    pub fn oplus(&self, xi: &Twist, dt: f64) -> Self {
        let step = xi.scaled(dt);
        if step.is_zero() {
            return *self;
        }
        *self * Pose::exp(&step)
    }

    pub fn is_finite(&self) -> bool {
        self.position.iter().all(|v| v.is_finite())
            && self.orientation.coords().iter().all(|v| v.is_finite())
    }
}

impl Mul for Pose {
    type Output = Pose;

    fn mul(self, rhs: Pose) -> Pose {
        Pose::new(
            self.position + self.orientation.rotate(&rhs.position),
            self.orientation * rhs.orientation,
        )
    }
}

/// `(1 - cos t) / t^2` and `(t - sin t) / t^3`, evaluated stably.
fn v_coefficients(theta: f64) -> (f64, f64) {
    if theta < SMALL_ANGLE {
        let t2 = theta * theta;
        (0.5 - t2 / 24.0, 1.0 / 6.0 - t2 / 120.0)
    } else {
        let t2 = theta * theta;
        let half_sin = (0.5 * theta).sin();
        let a = 2.0 * half_sin * half_sin / t2;
        let b = if theta < 1e-3 {
            1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0
        } else {
            (theta - theta.sin()) / (t2 * theta)
        };
        (a, b)
    }
}

/// Cross-product matrix: `skew(a) * b == a x b`.
pub fn skew(a: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -a.z, a.y, a.z, 0.0, -a.x, -a.y, a.x, 0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn twist(v: [f64; 6]) -> Twist {
        Twist::from_slice(&v)
    }

    fn pose_close(a: &Pose, b: &Pose, tol: f64) -> bool {
        (a.position - b.position).norm() < tol && quat_angle_error(&a.orientation, &b.orientation) < tol
    }

    #[test]
    fn oplus_identity_and_translation() {
        let id = Pose::identity();
        assert_eq!(id.oplus(&Twist::zero(), 1.0), id);
        let moved = id.oplus(&twist([1.0, 0.0, 0.0, 0.0, 0.0, 0.0]), 2.0);
        assert_relative_eq!(moved.position, Vector3::new(2.0, 0.0, 0.0), epsilon = 1e-15);
        assert_eq!(moved.orientation, UnitQuat::identity());
    }

    #[test]
    fn oplus_twice_quarter_turn_is_half_turn() {
        let xi = twist([0.0, 0.0, 0.0, 0.0, 0.0, FRAC_PI_2]);
        let m = Pose::identity().oplus(&xi, 1.0).oplus(&xi, 1.0);
        // direct quaternion product of two quarter turns about z
        let s = (PI / 4.0).sin();
        let c = (PI / 4.0).cos();
        let qz = Quaternion::new(c, 0.0, 0.0, s);
        let expected = qz * qz;
        let expected = UnitQuat::new(expected.w, expected.i, expected.j, expected.k).unwrap();
        assert!(quat_angle_error(&m.orientation, &expected) < 1e-12);
        assert_relative_eq!(m.orientation.angle(), PI, epsilon = 1e-12);
    }

    #[test]
    fn exp_pure_rotation() {
        let m = Pose::exp(&twist([0.0, 0.0, 0.0, 0.0, 0.0, 0.7]));
        assert_eq!(m.position, Vector3::zeros());
        assert_relative_eq!(m.orientation.yaw(), 0.7, epsilon = 1e-14);
        assert_eq!(Pose::exp(&Twist::zero()), Pose::identity());
    }

    #[test]
    fn exp_matches_fine_euler_integration() {
        // left-invariant ODE: p' = R v, R' = R [w]x, integrated over unit time
        let v = Vector3::new(1.0, 0.0, 0.0);
        let w = Vector3::new(0.0, 0.0, FRAC_PI_2);
        let steps = 10_000;
        let h = 1.0 / steps as f64;
        let mut p = Vector3::<f64>::zeros();
        let mut r = Matrix3::<f64>::identity();
        for _ in 0..steps {
            // midpoint in rotation so the oracle converges well within 1e-6
            let r_mid = r * UnitQuat::from_rotation_vector(&(w * 0.5 * h)).rotation_matrix();
            p += r_mid * v * h;
            r *= UnitQuat::from_rotation_vector(&(w * h)).rotation_matrix();
        }
        let m = Pose::exp(&Twist::new(v, w));
        assert_relative_eq!(m.position, p, epsilon = 1e-6);
        assert_relative_eq!(m.position, Vector3::new(2.0 / PI, 2.0 / PI, 0.0), epsilon = 1e-12);
    }

    #[test]
    fn log_of_identity_is_zero() {
        assert_eq!(Pose::identity().log().unwrap(), Twist::zero());
    }

    #[test]
    fn log_rejects_half_turn() {
        let m = Pose::exp(&twist([0.0, 0.0, 0.0, PI, 0.0, 0.0]));
        assert!(matches!(m.log(), Err(LieError::AngleNearPi { .. })));
    }

    #[test]
    fn small_angle_branch_roundtrip() {
        let xi = twist([0.3, -0.2, 0.1, 1e-9, -2e-9, 5e-10]);
        let back = Pose::exp(&xi).log().unwrap();
        assert_relative_eq!(back.to_vector(), xi.to_vector(), epsilon = 1e-14);
    }

    #[test]
    fn adjoint_identity_and_translation() {
        assert_eq!(Pose::identity().adjoint(), Matrix6::identity());
        let m = Pose::from_translation(Vector3::new(0.0, 1.0, 0.0));
        let body = twist([0.0, 0.0, 0.0, 0.0, 0.0, 1.0]).to_vector();
        let world = m.adjoint() * body;
        assert_relative_eq!(world, Vector6::new(1.0, 0.0, 0.0, 0.0, 0.0, 1.0), epsilon = 1e-15);

        // numeric differentiation of the moving frame's origin seen in the world
        let h = 1e-6;
        let moved = m.oplus(&Twist::from_vector(&body), h);
        // velocity of the body-fixed point currently at the world origin
        let point_body = m.inverse().position;
        let v = (moved.transform_point(&point_body) - m.transform_point(&point_body)) / h;
        assert_relative_eq!(v, Vector3::new(1.0, 0.0, 0.0), epsilon = 1e-5);
    }

    #[test]
    fn angle_error_cases() {
        let q = UnitQuat::from_euler(0.1, -0.2, 0.3);
        assert_eq!(quat_angle_error(&q, &q), 0.0);
        let half = UnitQuat::from_axis_angle(&Vector3::z(), PI);
        assert_relative_eq!(quat_angle_error(&UnitQuat::identity(), &half), PI, epsilon = 1e-12);
        let axis = Vector3::new(0.3, -0.5, 0.8);
        let r = UnitQuat::from_axis_angle(&axis, 0.3);
        assert_relative_eq!(quat_angle_error(&UnitQuat::identity(), &r), 0.3, epsilon = 1e-9);
    }

    #[test]
    fn canonical_sign() {
        let q = UnitQuat::new(-0.5, 0.5, 0.5, 0.5).unwrap();
        assert!(q.w() > 0.0);
        assert_eq!(q, UnitQuat::new(0.5, -0.5, -0.5, -0.5).unwrap());
        assert!(UnitQuat::new(0.0, 0.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn norm_preserved_over_long_chain() {
        let step = UnitQuat::from_rotation_vector(&Vector3::new(0.013, -0.021, 0.037));
        let mut q = UnitQuat::identity();
        let mut m = Pose::identity();
        let xi = twist([0.2, 0.1, -0.1, 0.3, -0.2, 0.5]);
        for _ in 0..10_000 {
            q = q * step;
            m = m.oplus(&xi, 0.01);
            assert!((q.norm() - 1.0).abs() < 1e-9);
            assert!((m.orientation.norm() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn oplus_first_order_agreement() {
        let m = Pose::new(Vector3::new(1.0, 2.0, -1.0), UnitQuat::from_euler(0.2, 0.1, -0.4));
        let xi = twist([0.5, -0.3, 0.2, 0.1, 0.4, -0.2]);
        let world = m.adjoint() * xi.to_vector();
        let mut prev = f64::INFINITY;
        for dt in [1e-2, 5e-3, 2.5e-3] {
            let next = m.oplus(&xi, dt);
            // translational velocity of the body origin is R v
            let first_order = m.position + m.orientation.rotate(&xi.linear) * dt;
            let err = (next.position - first_order).norm();
            assert!(err < 10.0 * dt * dt, "err {err} at dt {dt}");
            assert!(err < prev);
            prev = err;
            let rot_err = (next.orientation.rotation_vector()
                - (m.orientation * UnitQuat::from_rotation_vector(&(xi.angular * dt))).rotation_vector())
            .norm();
            assert!(rot_err < 1e-12);
        }
        // world angular rate from the adjoint equals R w
        assert_relative_eq!(
            world.fixed_rows::<3>(3).into_owned(),
            m.orientation.rotate(&xi.angular),
            epsilon = 1e-12
        );
    }

    fn arb_twist(max_rot: f64) -> impl Strategy<Value = Twist> {
        (
            prop::array::uniform3(-5.0..5.0f64),
            prop::array::uniform3(-1.0..1.0f64),
            0.0..max_rot,
        )
            .prop_map(|(l, a, r)| {
                let axis = Vector3::from(a);
                let n = axis.norm().max(1e-12);
                Twist::new(Vector3::from(l), axis * (r / n))
            })
    }

    proptest! {
        #[test]
        fn exp_log_roundtrip(xi in arb_twist(PI - 1e-3)) {
            let back = Pose::exp(&xi).log().unwrap();
            prop_assert!((back.to_vector() - xi.to_vector()).norm() < 1e-9);
        }

        #[test]
        fn adjoint_is_homomorphism(a in arb_twist(3.0), b in arb_twist(3.0)) {
            let (ma, mb) = (Pose::exp(&a), Pose::exp(&b));
            let lhs = (ma * mb).adjoint();
            let rhs = ma.adjoint() * mb.adjoint();
            prop_assert!((lhs - rhs).amax() < 1e-9);
        }

        #[test]
        fn angle_error_symmetric_and_double_cover(a in arb_twist(3.1), b in arb_twist(3.1)) {
            let (qa, qb) = (Pose::exp(&a).orientation, Pose::exp(&b).orientation);
            let e1 = quat_angle_error(&qa, &qb);
            let e2 = quat_angle_error(&qb, &qa);
            prop_assert!((e1 - e2).abs() < 1e-12);
            prop_assert!((0.0..=PI).contains(&e1));
            // -q is the same rotation
            let neg = Quaternion::new(-qa.w(), -qa.x(), -qa.y(), -qa.z());
            let neg = UnitQuat(UnitQuaternion::new_unchecked(neg));
            prop_assert!(quat_angle_error(&qa, &neg) < 1e-12);
        }

        #[test]
        fn composition_with_inverse(a in arb_twist(3.0)) {
            let m = Pose::exp(&a);
            prop_assert!(pose_close(&(m * m.inverse()), &Pose::identity(), 1e-12));
        }
    }
}
