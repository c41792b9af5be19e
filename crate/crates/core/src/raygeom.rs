//! Camera models, ray generation, Plücker embedding and rigid-transform algebra.
//!
//! Conventions: right-handed world frame with +y up. A camera looks down its
//! local +z axis with local +x to the right and +y down the image. Pixel
//! centers sit at integer + 0.5 coordinates.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{ColfError, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Rotation followed by translation: `x ↦ R·x + t`.
///
/// Serialized as the row-major 3×4 matrix `[R | t]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 12]", into = "[f64; 12]")]
pub struct RigidTransform {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn new(rotation: Mat3, translation: Vec3) -> Result<Self> {
        let t = Self {
            rotation,
            translation,
        };
        if !t.is_rigid(1e-6) {
            return Err(ColfError::Domain(
                "rotation is not orthonormal with determinant +1".into(),
            ));
        }
        Ok(t)
    }

    pub fn from_translation(t: Vec3) -> Self {
        Self {
            rotation: Mat3::identity(),
            translation: t,
        }
    }

    /// Rotation by `angle` radians about the world +y axis.
    pub fn from_yaw(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Self {
            rotation: Mat3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c),
            translation: Vec3::zeros(),
        }
    }

    pub fn from_axis_angle(axis: Vec3, angle: f64) -> Self {
        let axis = nalgebra::Unit::new_normalize(axis);
        Self {
            rotation: *nalgebra::Rotation3::from_axis_angle(&axis, angle).matrix(),
            translation: Vec3::zeros(),
        }
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn apply_point(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn apply_vector(&self, v: &Vec3) -> Vec3 {
        self.rotation * v
    }

    pub fn is_rigid(&self, tol: f64) -> bool {
        let should_be_identity = self.rotation.transpose() * self.rotation;
        let ortho = (should_be_identity - Mat3::identity()).amax() <= tol;
        ortho && (self.rotation.determinant() - 1.0).abs() <= tol
    }

    /// Replaces the rotation by its nearest proper rotation (polar decomposition).
    pub fn reorthonormalized(&self) -> RigidTransform {
        let svd = self.rotation.svd(true, true);
        let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
        let mut r = u * v_t;
        if r.determinant() < 0.0 {
            let mut flip = Mat3::identity();
            flip[(2, 2)] = -1.0;
            r = u * flip * v_t;
        }
        RigidTransform {
            rotation: r,
            translation: self.translation,
        }
    }

    /// Row-major 3×4 `[R | t]`.
    pub fn to_row_major(&self) -> [f64; 12] {
        let mut out = [0.0; 12];
        for r in 0..3 {
            for c in 0..3 {
                out[r * 4 + c] = self.rotation[(r, c)];
            }
            out[r * 4 + 3] = self.translation[r];
        }
        out
    }

    pub fn from_row_major(m: &[f64; 12]) -> RigidTransform {
        let rotation = Mat3::new(m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10]);
        RigidTransform {
            rotation,
            translation: Vec3::new(m[3], m[7], m[11]),
        }
    }
}

impl From<[f64; 12]> for RigidTransform {
    fn from(m: [f64; 12]) -> Self {
        RigidTransform::from_row_major(&m)
    }
}

impl From<RigidTransform> for [f64; 12] {
    fn from(t: RigidTransform) -> Self {
        t.to_row_major()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Camera {
    pub world_from_camera: RigidTransform,
    pub focal_px: f64,
    pub principal_point: [f64; 2],
    pub width: usize,
    pub height: usize,
}

/// Flat camera record shared by datasets, checkpoints and the service.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraRecord {
    pub world_from_camera: [f64; 12],
    pub focal_px: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    pub fn new(
        world_from_camera: RigidTransform,
        focal_px: f64,
        principal_point: [f64; 2],
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let cam = Camera {
            world_from_camera,
            focal_px,
            principal_point,
            width,
            height,
        };
        cam.validate()?;
        Ok(cam)
    }

    fn validate(&self) -> Result<()> {
        if !(self.focal_px.is_finite() && self.focal_px > 0.0) {
            return Err(ColfError::Domain(format!(
                "focal length must be positive, got {}",
                self.focal_px
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(ColfError::Domain("image size must be positive".into()));
        }
        let [cx, cy] = self.principal_point;
        if !(cx > 0.0 && cx < self.width as f64 && cy > 0.0 && cy < self.height as f64) {
            return Err(ColfError::Domain(format!(
                "principal point ({cx}, {cy}) outside {}x{} image",
                self.width, self.height
            )));
        }
        if !self.world_from_camera.is_rigid(1e-6) {
            return Err(ColfError::Domain("camera pose is not rigid".into()));
        }
        Ok(())
    }

    /// Pinhole camera at `eye` looking at `target`, with world +y as up.
    /// The field of view is the full horizontal angle in radians.
    pub fn look_at(eye: Vec3, target: Vec3, fov_x: f64, width: usize, height: usize) -> Result<Self> {
        let forward = target - eye;
        if forward.norm() < 1e-12 {
            return Err(ColfError::Domain("eye and target coincide".into()));
        }
        let forward = forward.normalize();
        let right = forward.cross(&Vec3::y());
        if right.norm() < 1e-9 {
            return Err(ColfError::Domain("viewing direction parallel to up".into()));
        }
        let right = right.normalize();
        let down = forward.cross(&right);
        let rotation = Mat3::from_columns(&[right, down, forward]);
        let focal = 0.5 * width as f64 / (0.5 * fov_x).tan();
        Camera::new(
            RigidTransform {
                rotation,
                translation: eye,
            },
            focal,
            [0.5 * width as f64, 0.5 * height as f64],
            width,
            height,
        )
    }

    pub fn position(&self) -> Vec3 {
        self.world_from_camera.translation
    }

    pub fn camera_from_world(&self) -> RigidTransform {
        self.world_from_camera.inverse()
    }

    /// Same pose and field of view at a different resolution.
    pub fn resized(&self, width: usize, height: usize) -> Result<Camera> {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        if (sx - sy).abs() > 1e-12 {
            return Err(ColfError::Domain("resize must preserve aspect ratio".into()));
        }
        Camera::new(
            self.world_from_camera,
            self.focal_px * sx,
            [self.principal_point[0] * sx, self.principal_point[1] * sy],
            width,
            height,
        )
    }

    /// Rays through every pixel center, row-major.
    pub fn pixel_center_rays(&self) -> Vec<OrientedRay> {
        let mut rays = Vec::with_capacity(self.width * self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                rays.push(self.unproject(x as f64 + 0.5, y as f64 + 0.5));
            }
        }
        rays
    }

    fn unproject(&self, px: f64, py: f64) -> OrientedRay {
        let [cx, cy] = self.principal_point;
        let local = Vec3::new((px - cx) / self.focal_px, (py - cy) / self.focal_px, 1.0);
        OrientedRay {
            origin: self.world_from_camera.translation,
            direction: self.world_from_camera.apply_vector(&local).normalize(),
        }
    }

    /// Projects a world point to continuous pixel coordinates; `None` behind the camera.
    pub fn project(&self, p: &Vec3) -> Option<[f64; 2]> {
        let local = self.camera_from_world().apply_point(p);
        if local.z <= 1e-9 {
            return None;
        }
        Some([
            self.focal_px * local.x / local.z + self.principal_point[0],
            self.focal_px * local.y / local.z + self.principal_point[1],
        ])
    }

    pub fn to_record(&self) -> CameraRecord {
        CameraRecord {
            world_from_camera: self.world_from_camera.to_row_major(),
            focal_px: self.focal_px,
            cx: self.principal_point[0],
            cy: self.principal_point[1],
            width: self.width,
            height: self.height,
        }
    }

    /// Decodes a wire record; the rotation is re-projected onto SO(3) to absorb
    /// serialization drift.
    pub fn from_record(rec: &CameraRecord) -> Result<Camera> {
        if rec.world_from_camera.iter().any(|v| !v.is_finite()) {
            return Err(ColfError::Domain("camera pose has non-finite entries".into()));
        }
        let raw = RigidTransform::from_row_major(&rec.world_from_camera);
        if !raw.is_rigid(1e-3) {
            return Err(ColfError::Domain("camera rotation is far from orthonormal".into()));
        }
        Camera::new(
            raw.reorthonormalized(),
            rec.focal_px,
            [rec.cx, rec.cy],
            rec.width,
            rec.height,
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OrientedRay {
    pub origin: Vec3,
    pub direction: Vec3,
}

impl OrientedRay {
    /// Normalizes `direction`.
    pub fn new(origin: Vec3, direction: Vec3) -> Result<Self> {
        let n = direction.norm();
        if !(n.is_finite() && n > 1e-12) {
            return Err(ColfError::Domain("ray direction must be nonzero".into()));
        }
        Ok(Self {
            origin,
            direction: direction / n,
        })
    }

    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.direction * t
    }
}

/// Plücker embedding `(d, o × d)` of an oriented ray.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PluckerRay {
    pub direction: Vec3,
    pub moment: Vec3,
}

impl PluckerRay {
    pub fn to_array(&self) -> [f64; 6] {
        [
            self.direction.x,
            self.direction.y,
            self.direction.z,
            self.moment.x,
            self.moment.y,
            self.moment.z,
        ]
    }
}

pub fn pixel_to_ray(camera: &Camera, pixel: [f64; 2]) -> Result<OrientedRay> {
    let [px, py] = pixel;
    if !(px >= 0.0 && px < camera.width as f64 && py >= 0.0 && py < camera.height as f64) {
        return Err(ColfError::Domain(format!(
            "pixel ({px}, {py}) outside {}x{} image",
            camera.width, camera.height
        )));
    }
    Ok(camera.unproject(px, py))
}

pub fn to_plucker(ray: &OrientedRay) -> PluckerRay {
    PluckerRay {
        direction: ray.direction,
        moment: ray.origin.cross(&ray.direction),
    }
}

pub fn transform_ray(transform: &RigidTransform, ray: &OrientedRay) -> OrientedRay {
    OrientedRay {
        origin: transform.apply_point(&ray.origin),
        direction: transform.apply_vector(&ray.direction),
    }
}
