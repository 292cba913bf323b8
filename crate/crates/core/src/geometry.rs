//! Vectors, quaternions, rigid transforms and the pinhole camera.
//!
//! Conventions: right-handed camera frame looking down +z. A camera-space
//! point `q` maps to NDC `s = focal * (q.x / q.z, q.y / q.z)` and to pixel
//! coordinates `((s.x + 1) / 2 * width, (s.y + 1) / 2 * height)`. Pixel rows
//! grow with NDC y, so row 0 of every image buffer is the `s.y = -1` edge.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Tolerance used for unit-length checks on quaternions and directions.
pub const UNIT_TOLERANCE: f64 = 1e-6;

/// Quaternion stored as `(w, x, y, z)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quat {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Default for Quat {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl Quat {
    pub const IDENTITY: Quat = Quat {
        w: 1.0,
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Self { w, x, y, z }
    }

    pub fn from_axis_angle(axis: Vec3, angle: f64) -> Self {
        let n = axis.norm();
        if n == 0.0 || angle == 0.0 {
            return Self::IDENTITY;
        }
        let a = axis / n;
        let (s, c) = (0.5 * angle).sin_cos();
        Self::new(c, a.x * s, a.y * s, a.z * s)
    }

    /// Rotation vector (axis scaled by angle in radians).
    pub fn from_rotation_vector(v: Vec3) -> Self {
        Self::from_axis_angle(v, v.norm())
    }

    pub fn norm(&self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn is_unit(&self) -> bool {
        (self.norm() - 1.0).abs() <= UNIT_TOLERANCE
    }

    /// Normalized copy; the zero quaternion maps to identity.
    pub fn normalized(&self) -> Self {
        let n = self.norm();
        if n == 0.0 || !n.is_finite() {
            return Self::IDENTITY;
        }
        Self::new(self.w / n, self.x / n, self.y / n, self.z / n)
    }

    pub fn conjugate(&self) -> Self {
        Self::new(self.w, -self.x, -self.y, -self.z)
    }

    /// Hamilton product `self * rhs`.
    pub fn mul(&self, rhs: &Quat) -> Quat {
        let (a, b) = (self, rhs);
        Quat::new(
            a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
            a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
            a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
            a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w,
        )
    }

    pub fn to_matrix(&self) -> Mat3 {
        quat_to_matrix(*self)
    }

    pub fn rotate(&self, v: Vec3) -> Vec3 {
        self.to_matrix() * v
    }
}

/// Rotation matrix of a unit quaternion.
///
/// Quaternions further than [`UNIT_TOLERANCE`] from unit length are
/// normalized first and a warning is logged.
pub fn quat_to_matrix(q: Quat) -> Mat3 {
    let q = if q.is_unit() {
        q
    } else {
        log::warn!("quat_to_matrix: non-unit quaternion (norm {}), normalizing", q.norm());
        q.normalized()
    };
    let Quat { w, x, y, z } = q;
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

/// Rotation matrix of an axis-angle (rotation) vector via Rodrigues' formula.
pub fn rotation_vector_to_matrix(v: Vec3) -> Mat3 {
    let angle = v.norm();
    if angle < 1e-12 {
        return Mat3::identity();
    }
    let k = v / angle;
    let kx = Mat3::new(0.0, -k.z, k.y, k.z, 0.0, -k.x, -k.y, k.x, 0.0);
    Mat3::identity() + kx * angle.sin() + kx * kx * (1.0 - angle.cos())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    pub rotation: Quat,
    pub translation: [f64; 3],
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl RigidTransform {
    pub const IDENTITY: RigidTransform = RigidTransform {
        rotation: Quat::IDENTITY,
        translation: [0.0; 3],
    };

    pub fn new(rotation: Quat, translation: Vec3) -> Self {
        Self {
            rotation,
            translation: [translation.x, translation.y, translation.z],
        }
    }

    pub fn translation(&self) -> Vec3 {
        Vec3::from(self.translation)
    }

    pub fn apply(&self, p: Vec3) -> Vec3 {
        self.rotation.to_matrix() * p + self.translation()
    }

    pub fn inverse(&self) -> Self {
        let r_inv = self.rotation.conjugate();
        let t = -(r_inv.to_matrix() * self.translation());
        Self::new(r_inv, t)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.rotation.is_unit() {
            return Err(Error::Invalid(format!(
                "rigid transform rotation has norm {}",
                self.rotation.norm()
            )));
        }
        if self.translation.iter().any(|t| !t.is_finite()) {
            return Err(Error::NonFinite("rigid transform translation".into()));
        }
        Ok(())
    }
}

/// Pinhole camera with an NDC-scale focal multiplier.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub focal: f64,
    pub width: usize,
    pub height: usize,
    /// World to camera transform.
    pub pose: RigidTransform,
    pub near: f64,
    pub far: f64,
}

/// Result of projecting a world point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub pixel: [f64; 2],
    pub depth: f64,
    pub in_frustum: bool,
}

impl Camera {
    pub const DEFAULT_FOCAL: f64 = 12.0;

    /// Camera at `distance` on the world -z axis looking at the origin.
    pub fn facing_origin(width: usize, height: usize, distance: f64) -> Self {
        Self {
            focal: Self::DEFAULT_FOCAL,
            width,
            height,
            pose: RigidTransform::new(Quat::IDENTITY, Vec3::new(0.0, 0.0, distance)),
            near: 1.0,
            far: 50.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.focal > 0.0) {
            return Err(Error::Invalid(format!("camera focal {} must be > 0", self.focal)));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Invalid("camera dimensions must be at least 1".into()));
        }
        if !(self.near > 0.0 && self.far > self.near) {
            return Err(Error::Invalid(format!(
                "camera depth range [{}, {}] is invalid",
                self.near, self.far
            )));
        }
        self.pose.validate()
    }

    /// Focal lengths in pixels along x and y.
    pub fn pixel_focal(&self) -> (f64, f64) {
        (
            self.focal * self.width as f64 * 0.5,
            self.focal * self.height as f64 * 0.5,
        )
    }

    pub fn rotation(&self) -> Mat3 {
        self.pose.rotation.to_matrix()
    }

    pub fn to_camera(&self, p: Vec3) -> Vec3 {
        self.pose.apply(p)
    }

    /// Camera centre in world coordinates.
    pub fn center(&self) -> Vec3 {
        self.pose.inverse().translation()
    }

    /// Pixel coordinates of a camera-space point (no frustum test).
    pub fn camera_to_pixel(&self, q: Vec3) -> [f64; 2] {
        let sx = self.focal * q.x / q.z;
        let sy = self.focal * q.y / q.z;
        [
            (sx + 1.0) * 0.5 * self.width as f64,
            (sy + 1.0) * 0.5 * self.height as f64,
        ]
    }

    pub fn project(&self, p: Vec3) -> Projection {
        let q = self.to_camera(p);
        let pixel = self.camera_to_pixel(q);
        let depth = q.z;
        let in_depth = depth >= self.near && depth <= self.far;
        let in_image =
            pixel[0] >= 0.0 && pixel[0] <= self.width as f64 && pixel[1] >= 0.0 && pixel[1] <= self.height as f64;
        Projection {
            pixel,
            depth,
            in_frustum: in_depth && in_image && pixel.iter().all(|c| c.is_finite()),
        }
    }

    /// Camera-space point at camera depth `depth` seen through `pixel`.
    pub fn pixel_to_camera(&self, pixel: [f64; 2], depth: f64) -> Vec3 {
        let sx = 2.0 * pixel[0] / self.width as f64 - 1.0;
        let sy = 2.0 * pixel[1] / self.height as f64 - 1.0;
        Vec3::new(sx * depth / self.focal, sy * depth / self.focal, depth)
    }

    /// Inverse of [`Camera::project`] for points in front of the camera.
    pub fn unproject(&self, pixel: [f64; 2], depth: f64) -> Vec3 {
        self.pose.inverse().apply(self.pixel_to_camera(pixel, depth))
    }

    /// Unit world-space direction of the viewing ray through `pixel`.
    pub fn ray_direction(&self, pixel: [f64; 2]) -> Vec3 {
        let d = self.pixel_to_camera(pixel, 1.0).normalize();
        self.rotation().transpose() * d
    }
}
