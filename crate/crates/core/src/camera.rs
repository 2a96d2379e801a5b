//! Pinhole cameras and rays.
//!
//! Camera space is right-handed with +z looking forward, +x to the right and
//! +y down the image. Pixel centers sit at half-integer coordinates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Mat3, Vec3};

const ROTATION_TOL: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl Intrinsics {
    /// Square pixels, principal point at the image center.
    pub fn centered(width: u32, height: u32, focal: f64) -> Self {
        Self {
            fx: focal,
            fy: focal,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidCamera("image size must be positive".into()));
        }
        if !(self.fx > 0.0 && self.fy > 0.0 && self.fx.is_finite() && self.fy.is_finite()) {
            return Err(Error::InvalidCamera(format!(
                "focal lengths must be positive, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        if !(0.0..=self.width as f64).contains(&self.cx)
            || !(0.0..=self.height as f64).contains(&self.cy)
        {
            return Err(Error::InvalidCamera(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }
}

/// Camera-to-world pose plus intrinsics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    pub rotation: Mat3,
    pub center: Vec3,
    pub intrinsics: Intrinsics,
}

impl CameraPose {
    pub fn new(rotation: Mat3, center: Vec3, intrinsics: Intrinsics) -> Result<Self> {
        let pose = Self { rotation, center, intrinsics };
        pose.validate()?;
        Ok(pose)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.rotation.is_finite() || !self.center.is_finite() {
            return Err(Error::InvalidCamera("non-finite pose".into()));
        }
        let ortho = self.rotation.orthonormality_error();
        if ortho > ROTATION_TOL {
            return Err(Error::InvalidCamera(format!(
                "rotation is not orthonormal (max |RᵀR − I| = {ortho:.3e})"
            )));
        }
        let det = self.rotation.determinant();
        if (det - 1.0).abs() > ROTATION_TOL {
            return Err(Error::InvalidCamera(format!("rotation determinant {det} != +1")));
        }
        self.intrinsics.validate()
    }

    /// Camera at `eye` looking at `target`, with `up` roughly opposite to the image's +y.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3, intrinsics: Intrinsics) -> Result<Self> {
        let forward = (target - eye).normalized();
        let right = forward.cross(up).normalized();
        if right.norm() < 0.5 {
            return Err(Error::InvalidCamera("look_at: up is parallel to view direction".into()));
        }
        let down = forward.cross(right);
        Self::new(Mat3::from_columns(right, down, forward), eye, intrinsics)
    }

    pub fn width(&self) -> u32 {
        self.intrinsics.width
    }

    pub fn height(&self) -> u32 {
        self.intrinsics.height
    }

    pub fn forward(&self) -> Vec3 {
        self.rotation.column(2)
    }

    /// Projects a world point to continuous pixel coordinates. `None` behind the camera.
    pub fn project(&self, p: Vec3) -> Option<(f64, f64)> {
        let local = self.rotation.transpose().mul_vec(p - self.center);
        if local.z <= 0.0 {
            return None;
        }
        let k = &self.intrinsics;
        Some((k.fx * local.x / local.z + k.cx, k.fy * local.y / local.z + k.cy))
    }

    /// Row-major 4×4 camera-to-world matrix.
    pub fn c2w(&self) -> [f64; 16] {
        let r = &self.rotation.rows;
        let t = self.center;
        [
            r[0][0], r[0][1], r[0][2], t.x, //
            r[1][0], r[1][1], r[1][2], t.y, //
            r[2][0], r[2][1], r[2][2], t.z, //
            0.0, 0.0, 0.0, 1.0,
        ]
    }

    pub fn from_c2w(m: &[f64; 16], intrinsics: Intrinsics) -> Result<Self> {
        let rotation = Mat3::from_rows([[m[0], m[1], m[2]], [m[4], m[5], m[6]], [m[8], m[9], m[10]]]);
        Self::new(rotation, Vec3::new(m[3], m[7], m[11]), intrinsics)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
    pub t_near: f64,
    pub t_far: f64,
}

impl Ray {
    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.direction * t
    }

    pub fn with_bounds(mut self, t_near: f64, t_far: f64) -> Self {
        self.t_near = t_near;
        self.t_far = t_far;
        self
    }

    pub fn is_valid(&self) -> bool {
        self.origin.is_finite()
            && (self.direction.norm() - 1.0).abs() <= 1e-6
            && self.t_near >= 0.0
            && self.t_near < self.t_far
    }
}

/// Ray through the center of pixel `(px, py)`. Bounds default to `[0, ∞)`.
pub fn pixel_ray(pose: &CameraPose, px: i64, py: i64) -> Result<Ray> {
    let k = &pose.intrinsics;
    if px < 0 || py < 0 || px >= k.width as i64 || py >= k.height as i64 {
        return Err(Error::PixelOutOfRange { px, py, width: k.width, height: k.height });
    }
    Ok(subpixel_ray(pose, px as f64 + 0.5, py as f64 + 0.5))
}

/// Ray through continuous image coordinates `(u, v)`.
pub fn subpixel_ray(pose: &CameraPose, u: f64, v: f64) -> Ray {
    let k = &pose.intrinsics;
    let local = Vec3::new((u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0);
    Ray {
        origin: pose.center,
        direction: pose.rotation.mul_vec(local).normalized(),
        t_near: 0.0,
        t_far: f64::INFINITY,
    }
}
