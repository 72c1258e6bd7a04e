//! Quaternion, dual-quaternion and rigid-transform algebra.
//!
//! Conventions used throughout the crate:
//!
//! * Hamilton quaternion product, scalar-first storage `(w, x, y, z)`.
//! * A rigid transform maps a point as `x ↦ R·x + t`.
//! * A unit dual quaternion `real + ε·dual` encodes `(R, t)` with
//!   `real = q(R)` and `dual = ½·(0, t)·real`.
//!
//! Blending uses dual quaternion blending: a weighted sum of unit dual
//! quaternions, renormalized, then mapped back to a rigid transform. The
//! result is always a proper rigid motion no matter how the weights are
//! distributed.

use std::ops::{Add, Mul, Neg, Sub};

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

/// Tolerance on `|real|` accepted by [`dq_to_se3`].
pub const UNIT_TOLERANCE: f64 = 1e-6;
/// Below this norm a blended real part is considered cancelled out.
pub const DEGENERATE_NORM: f64 = 1e-12;
/// Tolerance on the sum of blend weights.
pub const WEIGHT_SUM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RigidError {
    #[error("dual quaternion real part has norm {norm}, expected 1 (normalize first)")]
    NonUnitInput { norm: f64 },
    #[error("blended real part has norm {norm}; the inputs cancel each other")]
    DegenerateBlend { norm: f64 },
    #[error("blend weights must lie in [0, 1] and sum to 1 (sum = {sum})")]
    InvalidWeights { sum: f64 },
    #[error("cannot blend an empty list of transforms")]
    EmptyBlend,
}

/// A general (not necessarily unit) quaternion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quaternion {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Quaternion {
    pub const ZERO: Quaternion = Quaternion::new(0.0, 0.0, 0.0, 0.0);
    pub const IDENTITY: Quaternion = Quaternion::new(1.0, 0.0, 0.0, 0.0);

    pub const fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Self { w, x, y, z }
    }

    /// Pure quaternion `(0, v)`.
    pub fn pure(v: &Vector3<f64>) -> Self {
        Self::new(0.0, v.x, v.y, v.z)
    }

    pub fn vector(&self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.z)
    }

    pub fn dot(&self, other: &Quaternion) -> f64 {
        self.w * other.w + self.x * other.x + self.y * other.y + self.z * other.z
    }

    pub fn norm_squared(&self) -> f64 {
        self.dot(self)
    }

    pub fn norm(&self) -> f64 {
        self.norm_squared().sqrt()
    }

    pub fn conjugate(&self) -> Self {
        Self::new(self.w, -self.x, -self.y, -self.z)
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }
}

impl Mul for Quaternion {
    type Output = Quaternion;

    /// Hamilton product.
    fn mul(self, b: Quaternion) -> Quaternion {
        let a = self;
        Quaternion::new(
            a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
            a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
            a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
            a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w,
        )
    }
}

impl Mul<f64> for Quaternion {
    type Output = Quaternion;
    fn mul(self, s: f64) -> Quaternion {
        Quaternion::new(self.w * s, self.x * s, self.y * s, self.z * s)
    }
}

impl Add for Quaternion {
    type Output = Quaternion;
    fn add(self, o: Quaternion) -> Quaternion {
        Quaternion::new(self.w + o.w, self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl Sub for Quaternion {
    type Output = Quaternion;
    fn sub(self, o: Quaternion) -> Quaternion {
        Quaternion::new(self.w - o.w, self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Neg for Quaternion {
    type Output = Quaternion;
    fn neg(self) -> Quaternion {
        Quaternion::new(-self.w, -self.x, -self.y, -self.z)
    }
}

/// A rotation stored as a unit quaternion.
///
/// `q` and `-q` describe the same rotation. No sign convention is enforced
/// internally; [`UnitQuaternion::canonical`] picks `w ≥ 0` and is applied
/// when values are written to disk.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnitQuaternion(Quaternion);

impl UnitQuaternion {
    pub const IDENTITY: UnitQuaternion = UnitQuaternion(Quaternion::IDENTITY);

    /// Normalizes `q`. Returns `None` for a zero or non-finite quaternion.
    pub fn new_normalize(q: Quaternion) -> Option<Self> {
        let n = q.norm();
        if n.is_finite() && n > 0.0 {
            Some(Self(q * (1.0 / n)))
        } else {
            None
        }
    }

    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64) -> Self {
        let n = axis.norm();
        if n == 0.0 || angle == 0.0 {
            return Self::IDENTITY;
        }
        let (s, c) = (0.5 * angle).sin_cos();
        let a = axis * (s / n);
        Self(Quaternion::new(c, a.x, a.y, a.z))
    }

    /// Exponential map: rotation by `|v|` radians about `v`.
    pub fn from_scaled_axis(v: &Vector3<f64>) -> Self {
        Self::from_axis_angle(v, v.norm())
    }

    pub fn quaternion(&self) -> Quaternion {
        self.0
    }

    pub fn w(&self) -> f64 {
        self.0.w
    }

    pub fn inverse(&self) -> Self {
        Self(self.0.conjugate())
    }

    /// Representative with `w ≥ 0`.
    pub fn canonical(&self) -> Self {
        if self.0.w < 0.0 {
            Self(-self.0)
        } else {
            *self
        }
    }

    pub fn to_rotation_matrix(&self) -> Matrix3<f64> {
        let Quaternion { w, x, y, z } = self.0;
        let (xx, yy, zz) = (x * x, y * y, z * z);
        let (xy, xz, yz) = (x * y, x * z, y * z);
        let (wx, wy, wz) = (w * x, w * y, w * z);
        Matrix3::new(
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

    pub fn rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        // v' = v + 2w(u×v) + 2u×(u×v)
        let u = self.0.vector();
        let uv = u.cross(v);
        v + uv * (2.0 * self.0.w) + u.cross(&uv) * 2.0
    }

    /// Rotation angle between two rotations, in radians, in `[0, π]`.
    pub fn angle_to(&self, other: &UnitQuaternion) -> f64 {
        let d = self.0.conjugate() * other.0;
        2.0 * d.vector().norm().atan2(d.w.abs())
    }

    /// Spherical linear interpolation along the shorter arc.
    pub fn slerp(&self, other: &UnitQuaternion, tau: f64) -> UnitQuaternion {
        if tau == 0.0 {
            return *self;
        }
        if tau == 1.0 {
            return *other;
        }
        let a = self.0;
        let mut b = other.0;
        let mut d = a.dot(&b);
        if d < 0.0 {
            b = -b;
            d = -d;
        }
        if d > 1.0 - 1e-12 {
            let q = a * (1.0 - tau) + b * tau;
            return Self::new_normalize(q).unwrap_or(*self);
        }
        let theta = d.min(1.0).acos();
        let s = theta.sin();
        let wa = ((1.0 - tau) * theta).sin() / s;
        let wb = (tau * theta).sin() / s;
        Self::new_normalize(a * wa + b * wb).unwrap_or(*self)
    }
}

impl Default for UnitQuaternion {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl Mul for UnitQuaternion {
    type Output = UnitQuaternion;
    fn mul(self, rhs: UnitQuaternion) -> UnitQuaternion {
        quat_mul(&self, &rhs)
    }
}

/// Hamilton product of two rotations, renormalized against round-off drift.
pub fn quat_mul(a: &UnitQuaternion, b: &UnitQuaternion) -> UnitQuaternion {
    let p = a.0 * b.0;
    UnitQuaternion::new_normalize(p).expect("product of unit quaternions is nonzero")
}

/// A rigid transform `x ↦ R·x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SE3Pose {
    pub rotation: UnitQuaternion,
    pub translation: Vector3<f64>,
}

impl SE3Pose {
    pub fn new(rotation: UnitQuaternion, translation: Vector3<f64>) -> Self {
        Self { rotation, translation }
    }

    pub fn identity() -> Self {
        Self::new(UnitQuaternion::IDENTITY, Vector3::zeros())
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self::new(UnitQuaternion::IDENTITY, t)
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix()
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.rotate(p) + self.translation
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &SE3Pose) -> SE3Pose {
        SE3Pose::new(
            quat_mul(&self.rotation, &other.rotation),
            self.rotation.rotate(&other.translation) + self.translation,
        )
    }

    pub fn inverse(&self) -> SE3Pose {
        let r = self.rotation.inverse();
        SE3Pose::new(r, -r.rotate(&self.translation))
    }
}

impl Default for SE3Pose {
    fn default() -> Self {
        Self::identity()
    }
}

/// `real + ε·dual`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DualQuaternion {
    pub real: Quaternion,
    pub dual: Quaternion,
}

impl DualQuaternion {
    pub const IDENTITY: DualQuaternion =
        DualQuaternion { real: Quaternion::IDENTITY, dual: Quaternion::ZERO };

    pub fn new(real: Quaternion, dual: Quaternion) -> Self {
        Self { real, dual }
    }
}

impl Add for DualQuaternion {
    type Output = DualQuaternion;
    fn add(self, o: DualQuaternion) -> DualQuaternion {
        DualQuaternion::new(self.real + o.real, self.dual + o.dual)
    }
}

impl Mul<f64> for DualQuaternion {
    type Output = DualQuaternion;
    fn mul(self, s: f64) -> DualQuaternion {
        DualQuaternion::new(self.real * s, self.dual * s)
    }
}

impl Neg for DualQuaternion {
    type Output = DualQuaternion;
    fn neg(self) -> DualQuaternion {
        DualQuaternion::new(-self.real, -self.dual)
    }
}

/// `real = q(R)`, `dual = ½·(0, t)·real`.
pub fn se3_to_dq(pose: &SE3Pose) -> DualQuaternion {
    let real = pose.rotation.quaternion();
    let dual = (Quaternion::pure(&pose.translation) * real) * 0.5;
    DualQuaternion::new(real, dual)
}

/// Inverse of [`se3_to_dq`]; the input must already be normalized.
pub fn dq_to_se3(dq: &DualQuaternion) -> Result<SE3Pose, RigidError> {
    let norm = dq.real.norm();
    if !norm.is_finite() || (norm - 1.0).abs() > UNIT_TOLERANCE {
        return Err(RigidError::NonUnitInput { norm });
    }
    let rotation = UnitQuaternion::new_normalize(dq.real).ok_or(RigidError::NonUnitInput { norm })?;
    let t = (dq.dual * rotation.quaternion().conjugate()) * 2.0;
    Ok(SE3Pose::new(rotation, t.vector()))
}

/// Scales to `|real| = 1` and projects the dual part so `real · dual = 0`.
pub fn dq_normalize(dq: &DualQuaternion) -> Result<DualQuaternion, RigidError> {
    let norm = dq.real.norm();
    if !(norm > DEGENERATE_NORM) {
        return Err(RigidError::DegenerateBlend { norm });
    }
    let inv = 1.0 / norm;
    let real = dq.real * inv;
    let dual = dq.dual * inv;
    let dual = dual - real * real.dot(&dual);
    Ok(DualQuaternion::new(real, dual))
}

/// Dual quaternion blending of weighted rigid transforms.
///
/// Every entry is sign-aligned with the first one (`real_i · real_0 ≥ 0`)
/// before summation so that antipodal representatives of the same rotation
/// do not cancel.
pub fn dqb_blend(entries: &[(f64, DualQuaternion)]) -> Result<SE3Pose, RigidError> {
    let (_, first) = entries.first().ok_or(RigidError::EmptyBlend)?;
    let mut sum = 0.0;
    for &(w, _) in entries {
        if !(0.0..=1.0).contains(&w) {
            return Err(RigidError::InvalidWeights { sum: f64::NAN });
        }
        sum += w;
    }
    if (sum - 1.0).abs() > WEIGHT_SUM_TOLERANCE {
        return Err(RigidError::InvalidWeights { sum });
    }
    if entries.len() == 1 {
        return dq_to_se3(&dq_normalize(first)?);
    }
    let pivot = first.real;
    let mut acc = DualQuaternion::new(Quaternion::ZERO, Quaternion::ZERO);
    for &(w, dq) in entries {
        let aligned = if dq.real.dot(&pivot) < 0.0 { -dq } else { dq };
        acc = acc + aligned * w;
    }
    dq_to_se3(&dq_normalize(&acc)?)
}
