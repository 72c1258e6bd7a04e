//! Pinhole camera with world-to-camera extrinsics.
//!
//! A world point `x` maps to camera space as `x_c = R·x + T`; pixel
//! coordinates are `(fx·x_c/z_c + cx, fy·y_c/z_c + cy)` and the depth is
//! `z_c`. The camera looks down `+z` with `+y` pointing down the image.

use nalgebra::{Matrix2x3, Matrix3, Vector2, Vector3};

use super::HarnessError;

/// Points closer to the image plane than this cannot be projected.
pub const MIN_PROJECT_DEPTH: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Camera {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: u32,
        height: u32,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
    ) -> Result<Self, HarnessError> {
        let cam = Self { fx, fy, cx, cy, width, height, rotation, translation };
        cam.validate()?;
        Ok(cam)
    }

    /// Identity extrinsics.
    pub fn with_intrinsics(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self, HarnessError> {
        Self::new(fx, fy, cx, cy, width, height, Matrix3::identity(), Vector3::zeros())
    }

    /// Camera at `eye` looking at `target`. `up` fixes the roll; the image
    /// `y` axis points away from it.
    pub fn look_at(
        eye: &Vector3<f64>,
        target: &Vector3<f64>,
        up: &Vector3<f64>,
        intrinsics: (f64, f64, f64, f64),
        size: (u32, u32),
    ) -> Result<Self, HarnessError> {
        let z = (target - eye)
            .try_normalize(1e-12)
            .ok_or_else(|| HarnessError::InvalidCamera("eye and target coincide".into()))?;
        let x = z
            .cross(up)
            .try_normalize(1e-12)
            .ok_or_else(|| HarnessError::InvalidCamera("up is parallel to the view direction".into()))?;
        let y = z.cross(&x);
        let rotation = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        let (fx, fy, cx, cy) = intrinsics;
        Self::new(fx, fy, cx, cy, size.0, size.1, rotation, -(rotation * eye))
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(HarnessError::InvalidCamera("focal lengths must be positive".into()));
        }
        let r = &self.rotation;
        if (r * r.transpose() - Matrix3::identity()).amax() > 1e-9 || (r.determinant() - 1.0).abs() > 1e-9 {
            return Err(HarnessError::InvalidCamera("rotation is not a proper orthonormal matrix".into()));
        }
        Ok(())
    }

    pub fn to_camera(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * x + self.translation
    }

    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn project(&self, x: &Vector3<f64>) -> Result<(Vector2<f64>, f64), HarnessError> {
        let p = self.to_camera(x);
        if !(p.z > MIN_PROJECT_DEPTH) {
            return Err(HarnessError::BehindCamera { depth: p.z });
        }
        let u = Vector2::new(self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy);
        Ok((u, p.z))
    }

    /// Pixel Jacobian `∂u/∂x` with respect to the world point.
    pub fn project_jacobian(&self, x: &Vector3<f64>) -> Result<Matrix2x3<f64>, HarnessError> {
        let p = self.to_camera(x);
        if !(p.z > MIN_PROJECT_DEPTH) {
            return Err(HarnessError::BehindCamera { depth: p.z });
        }
        let iz = 1.0 / p.z;
        let j = Matrix2x3::new(
            self.fx * iz, 0.0, -self.fx * p.x * iz * iz,
            0.0, self.fy * iz, -self.fy * p.y * iz * iz,
        );
        Ok(j * self.rotation)
    }

    /// `x = Rᵀ·(d·((u_x − cx)/fx, (u_y − cy)/fy, 1)) − Rᵀ·T`.
    pub fn backproject(&self, u: &Vector2<f64>, depth: f64) -> Result<Vector3<f64>, HarnessError> {
        if !(depth > 0.0) {
            return Err(HarnessError::NonPositiveDepth { depth });
        }
        let ray = Vector3::new((u.x - self.cx) / self.fx, (u.y - self.cy) / self.fy, 1.0) * depth;
        let rt = self.rotation.transpose();
        Ok(rt * ray - rt * self.translation)
    }

    pub fn contains(&self, u: &Vector2<f64>) -> bool {
        u.x >= 0.0 && u.y >= 0.0 && u.x < self.width as f64 && u.y < self.height as f64
    }
}
