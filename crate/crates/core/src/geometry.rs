//! Cameras, rays, rotations, and projection.
//!
//! Conventions, fixed here and used everywhere else:
//! - Euler composition is `R = Rz(roll) * Ry(yaw) * Rx(pitch)`.
//! - A world point `V` maps to camera space as `X = R V + t`; the camera
//!   looks down +z and its center is `-R^T t`.
//! - Image origin is the top-left corner, +x right, +y down, units of
//!   pixels. The center of pixel `(i, j)` is at `(i + 0.5, j + 0.5)`.

use crate::error::{Error, Result};
use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

/// Minimum admissible camera-space depth for projection.
pub const DEPTH_EPS: f64 = 1e-8;

/// Extrinsic camera pose: Euler angles in radians plus translation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    pub pitch: f64,
    pub yaw: f64,
    pub roll: f64,
    pub translation: [f64; 3],
}

impl CameraPose {
    pub fn identity() -> Self {
        CameraPose { pitch: 0.0, yaw: 0.0, roll: 0.0, translation: [0.0; 3] }
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        euler_to_rotation(self.pitch, self.yaw, self.roll)
    }

    pub fn translation_vec(&self) -> Vector3<f64> {
        Vector3::from_column_slice(&self.translation)
    }

    /// Camera center `c = -R^T t`.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation().transpose() * self.translation_vec())
    }
}

/// Pinhole intrinsics in pixel units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    /// Symmetric pinhole with focal length equal to the image width
    /// (about a 53 degree horizontal field of view).
    pub fn default_synthetic(width: usize, height: usize) -> Self {
        Intrinsics {
            fx: width as f64,
            fy: width as f64,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(Error::ManifestInvalid(format!(
                "non-positive focal length ({}, {})",
                self.fx, self.fy
            )));
        }
        if self.cx < 0.0 || self.cx >= self.width as f64 || self.cy < 0.0 || self.cy >= self.height as f64 {
            return Err(Error::ManifestInvalid(format!(
                "principal point ({}, {}) outside {}x{}",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= 0.0 && x < self.width as f64 && y >= 0.0 && y < self.height as f64
    }
}

/// A ray with unit direction and positive, ordered near/far bounds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vector3<f64>,
    pub direction: Vector3<f64>,
    pub t_near: f64,
    pub t_far: f64,
}

impl Ray {
    pub fn new(origin: Vector3<f64>, direction: Vector3<f64>, t_near: f64, t_far: f64) -> Result<Self> {
        if !(t_near > 0.0 && t_near < t_far) {
            return Err(Error::InvalidRayBounds { t_near, t_far });
        }
        let n = direction.norm();
        if (n - 1.0).abs() > 1e-9 {
            return Err(Error::DegenerateConfiguration { reason: "ray direction not unit length" });
        }
        Ok(Ray { origin, direction, t_near, t_far })
    }

    pub fn point_at(&self, t: f64) -> Vector3<f64> {
        self.origin + t * self.direction
    }
}

/// `R = Rz(roll) * Ry(yaw) * Rx(pitch)`. Total function; always a proper
/// rotation.
pub fn euler_to_rotation(pitch: f64, yaw: f64, roll: f64) -> Matrix3<f64> {
    let (sp, cp) = pitch.sin_cos();
    let (sy, cy) = yaw.sin_cos();
    let (sr, cr) = roll.sin_cos();
    let rx = Matrix3::new(1.0, 0.0, 0.0, 0.0, cp, -sp, 0.0, sp, cp);
    let ry = Matrix3::new(cy, 0.0, sy, 0.0, 1.0, 0.0, -sy, 0.0, cy);
    let rz = Matrix3::new(cr, -sr, 0.0, sr, cr, 0.0, 0.0, 0.0, 1.0);
    rz * ry * rx
}

/// Perspective projection `q = (fx X/Z + cx, fy Y/Z + cy)` of a world point.
pub fn project(point: Vector3<f64>, pose: &CameraPose, k: &Intrinsics) -> Result<[f64; 2]> {
    let cam = pose.rotation() * point + pose.translation_vec();
    if cam.z <= DEPTH_EPS {
        return Err(Error::NonPositiveDepth { depth: cam.z });
    }
    Ok([k.fx * cam.x / cam.z + k.cx, k.fy * cam.y / cam.z + k.cy])
}

/// Build the world-space ray through a (continuous) pixel coordinate.
pub fn ray_through_pixel(
    pixel: [f64; 2],
    pose: &CameraPose,
    k: &Intrinsics,
    t_near: f64,
    t_far: f64,
) -> Result<Ray> {
    if !k.contains(pixel[0], pixel[1]) {
        return Err(Error::PixelOutOfBounds {
            x: pixel[0],
            y: pixel[1],
            width: k.width,
            height: k.height,
        });
    }
    let dir_cam = Vector3::new((pixel[0] - k.cx) / k.fx, (pixel[1] - k.cy) / k.fy, 1.0);
    let r = pose.rotation();
    let dir_world = (r.transpose() * dir_cam).normalize();
    let origin = -(r.transpose() * pose.translation_vec());
    Ray::new(origin, dir_world, t_near, t_far)
}
