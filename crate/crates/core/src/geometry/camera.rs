//! Pinhole cameras and ray generation.
//!
//! Convention: right-handed world with +z up. In its local frame a camera
//! looks along +z, +x points right and +y points down, matching pixel rows
//! increasing downward. `rotation` maps camera-local directions to world.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub rotation: Mat3,
    pub translation: Vec3,
    pub t_near: f64,
    pub t_far: f64,
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
}

/// `true` when `m` is a proper rotation to within `tol`.
pub fn is_rotation(m: &Mat3, tol: f64) -> bool {
    let gram = m.transpose() * m - Mat3::identity();
    gram.norm() < tol && (m.determinant() - 1.0).abs() < tol
}

impl Camera {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        width: usize,
        height: usize,
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        rotation: Mat3,
        translation: Vec3,
        t_near: f64,
        t_far: f64,
    ) -> Result<Self> {
        let cam = Camera {
            width,
            height,
            fx,
            fy,
            cx,
            cy,
            rotation,
            translation,
            t_near,
            t_far,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::domain("camera has zero-sized image"));
        }
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::domain("focal lengths must be positive"));
        }
        if !(self.t_near > 0.0 && self.t_near < self.t_far) {
            return Err(Error::domain(format!(
                "ray bounds must satisfy 0 < t_near < t_far, got [{}, {}]",
                self.t_near, self.t_far
            )));
        }
        if !is_rotation(&self.rotation, 1e-9) {
            return Err(Error::domain("camera rotation is not orthonormal"));
        }
        Ok(())
    }

    /// Camera at `eye` looking at `target`, with `up` as the world up hint.
    /// The vertical field of view is given in degrees.
    pub fn look_at(
        eye: Vec3,
        target: Vec3,
        up: Vec3,
        size: usize,
        fov_y_deg: f64,
        t_near: f64,
        t_far: f64,
    ) -> Result<Self> {
        let forward = (target - eye)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::domain("eye and target coincide"))?;
        let right = forward
            .cross(&up)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::domain("up hint is parallel to the view direction"))?;
        let down = forward.cross(&right);
        let rotation = Mat3::from_columns(&[right, down, forward]);
        let f = 0.5 * size as f64 / (0.5 * fov_y_deg.to_radians()).tan();
        let c = 0.5 * size as f64;
        Camera::new(size, size, f, f, c, c, rotation, eye, t_near, t_far)
    }

    pub fn ray_for_pixel(&self, px: f64, py: f64) -> Result<Ray> {
        if !(px >= 0.0 && px < self.width as f64 && py >= 0.0 && py < self.height as f64) {
            return Err(Error::domain(format!(
                "pixel ({px}, {py}) outside {}x{} image",
                self.width, self.height
            )));
        }
        let local = Vec3::new((px - self.cx) / self.fx, (py - self.cy) / self.fy, 1.0);
        Ok(Ray {
            origin: self.translation,
            direction: (self.rotation * local).normalize(),
            t_near: self.t_near,
            t_far: self.t_far,
        })
    }

    /// Ray through the centre of cell `(i, j)` (column, row) of a
    /// `resolution`×`resolution` grid laid over the image.
    pub fn ray_for_cell(&self, i: usize, j: usize, resolution: usize) -> Result<Ray> {
        let px = (i as f64 + 0.5) * self.width as f64 / resolution as f64;
        let py = (j as f64 + 0.5) * self.height as f64 / resolution as f64;
        self.ray_for_pixel(px, py)
    }

    /// Project a world point to continuous pixel coordinates plus its
    /// distance along the viewing ray. `None` when behind the camera.
    pub fn project(&self, x: &Vec3) -> Option<(f64, f64, f64)> {
        let local = self.rotation.transpose() * (x - self.translation);
        if local.z <= 1e-9 {
            return None;
        }
        let px = self.fx * local.x / local.z + self.cx;
        let py = self.fy * local.y / local.z + self.cy;
        Some((px, py, local.norm()))
    }
}

/// `count` cameras evenly spaced on a horizontal circle of `radius` at the
/// given elevation (degrees), all looking at the origin.
pub fn camera_ring(
    count: usize,
    radius: f64,
    elevation_deg: f64,
    size: usize,
    fov_y_deg: f64,
    t_near: f64,
    t_far: f64,
) -> Result<Vec<Camera>> {
    (0..count)
        .map(|k| {
            let azimuth = 2.0 * std::f64::consts::PI * k as f64 / count as f64;
            ring_camera(azimuth, radius, elevation_deg, size, fov_y_deg, t_near, t_far)
        })
        .collect()
}

pub fn ring_camera(
    azimuth: f64,
    radius: f64,
    elevation_deg: f64,
    size: usize,
    fov_y_deg: f64,
    t_near: f64,
    t_far: f64,
) -> Result<Camera> {
    let el = elevation_deg.to_radians();
    let eye = Vec3::new(
        radius * el.cos() * azimuth.cos(),
        radius * el.cos() * azimuth.sin(),
        radius * el.sin(),
    );
    Camera::look_at(
        eye,
        Vec3::zeros(),
        Vec3::z(),
        size,
        fov_y_deg,
        t_near,
        t_far,
    )
}
