use nalgebra::{Matrix3, Matrix4, Rotation3, Vector3};

use crate::geometry::Vec3;
use crate::{Error, Result};

/// Pinhole camera. Pixel centers sit at integer coordinates with (0, 0) the
/// top-left pixel; camera space is +x right, +y down, +z forward.
#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// World-to-camera rotation.
    pub rotation: Matrix3<f64>,
    /// World-to-camera translation.
    pub translation: Vec3,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, world_to_camera: Matrix4<f64>, width: usize, height: usize) -> Self {
        Camera {
            fx,
            fy,
            cx,
            cy,
            rotation: world_to_camera.fixed_view::<3, 3>(0, 0).into_owned(),
            translation: world_to_camera.fixed_view::<3, 1>(0, 3).into_owned(),
            width,
            height,
        }
    }

    /// Camera at `eye` looking at `target`; `up` points toward the top of
    /// the image. `focal` is in pixels and the principal point is centered.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3, focal: f64, width: usize, height: usize) -> Self {
        let z = (target - eye).normalize();
        let x = z.cross(&up).normalize();
        let y = z.cross(&x);
        let rotation = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        Camera {
            fx: focal,
            fy: focal,
            cx: (width as f64 - 1.0) / 2.0,
            cy: (height as f64 - 1.0) / 2.0,
            translation: -(rotation * eye),
            rotation,
            width,
            height,
        }
    }

    pub fn intrinsics(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn world_to_camera(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn to_camera(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    /// Pixel coordinates and depth, or `None` at or behind the near plane.
    pub fn project_point(&self, p: &Vec3, near: f64) -> Option<([f64; 2], f64)> {
        let m = self.to_camera(p);
        if m.z <= near {
            return None;
        }
        Some(([self.fx * m.x / m.z + self.cx, self.fy * m.y / m.z + self.cy], m.z))
    }

    pub fn center(&self) -> Vec3 {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::arg("camera", "focal lengths must be positive"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::arg("camera", "zero image size"));
        }
        if (self.rotation.transpose() * self.rotation - Matrix3::identity()).norm() > 1e-9
            || self.rotation.determinant() < 0.0
        {
            return Err(Error::arg("camera", "rotation block is not orthonormal"));
        }
        Ok(())
    }

    /// Same view at a different resolution.
    pub fn resized(&self, width: usize, height: usize) -> Self {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        Camera {
            fx: self.fx * sx,
            fy: self.fy * sy,
            cx: (self.cx + 0.5) * sx - 0.5,
            cy: (self.cy + 0.5) * sy - 0.5,
            width,
            height,
            ..self.clone()
        }
    }

    pub fn orbit(radius: f64, azimuth: f64, elevation: f64, target: Vec3, focal: f64, width: usize, height: usize) -> Self {
        let dir = Rotation3::from_axis_angle(&Vector3::y_axis(), azimuth)
            * Rotation3::from_axis_angle(&Vector3::x_axis(), -elevation)
            * Vector3::new(0.0, 0.0, 1.0);
        Camera::look_at(target + dir * radius, target, Vector3::y(), focal, width, height)
    }
}
