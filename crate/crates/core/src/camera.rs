//! Pinhole cameras and the text manifest that lists them.
//!
//! Camera space follows the usual computer-vision convention: +x right,
//! +y down, +z forward. Pixel `(px, py)` has its center at
//! `(px + 0.5, py + 0.5)`.

use std::fmt::Write as _;

use nalgebra::{Matrix3, Matrix4, Vector3};

use crate::error::{Error, Result};

/// Default horizontal field of view for orbit cameras, in degrees.
pub const DEFAULT_FOV_X_DEG: f64 = 50.0;

#[derive(Debug, Clone, PartialEq)]
pub struct CameraView {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// Rigid world-to-camera transform, row-major.
    pub world_to_camera: Matrix4<f64>,
}

impl CameraView {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
        world_to_camera: Matrix4<f64>,
    ) -> Result<Self> {
        let view = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            world_to_camera,
        };
        view.validate()?;
        Ok(view)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0 && self.fx.is_finite() && self.fy.is_finite()) {
            return Err(Error::InvalidCamera(format!(
                "focal lengths must be positive, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidCamera("zero-sized image".into()));
        }
        if !self.world_to_camera.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidCamera("non-finite pose".into()));
        }
        let r = self.rotation();
        let err = (r.transpose() * r - Matrix3::identity()).abs().max();
        if err > 1e-4 {
            return Err(Error::InvalidCamera(format!(
                "rotation block is not orthonormal (max |RᵀR - I| = {err:.3e})"
            )));
        }
        let det = r.determinant();
        if (det - 1.0).abs() > 1e-4 {
            return Err(Error::InvalidCamera(format!("rotation determinant {det} != +1")));
        }
        let last = self.world_to_camera.row(3);
        if (last[0].abs() + last[1].abs() + last[2].abs() + (last[3] - 1.0).abs()) > 1e-6 {
            return Err(Error::InvalidCamera("last pose row must be 0 0 0 1".into()));
        }
        Ok(())
    }

    /// A camera at `eye` looking at `target`, with world `up` mapped to
    /// image-up. Intrinsics come from the horizontal field of view with
    /// square pixels and a centered principal point.
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        width: usize,
        height: usize,
        fov_x_deg: f64,
    ) -> Result<Self> {
        let forward = (target - eye).normalize();
        let right = forward.cross(&up);
        if right.norm() < 1e-9 {
            return Err(Error::InvalidCamera("view direction parallel to up".into()));
        }
        let right = right.normalize();
        let down = forward.cross(&right);
        let rot = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let t = -(rot * eye);
        let mut w2c = Matrix4::identity();
        w2c.fixed_view_mut::<3, 3>(0, 0).copy_from(&rot);
        w2c.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
        let f = 0.5 * width as f64 / (0.5 * fov_x_deg.to_radians()).tan();
        Self::new(f, f, 0.5 * width as f64, 0.5 * height as f64, width, height, w2c)
    }

    /// Orbit camera around the origin with world +z up. `theta` is the
    /// azimuth and `phi` the elevation, both in radians.
    pub fn orbit(theta: f64, phi: f64, radius: f64, width: usize, height: usize) -> Result<Self> {
        let eye = Vector3::new(
            radius * phi.cos() * theta.cos(),
            radius * phi.cos() * theta.sin(),
            radius * phi.sin(),
        );
        Self::look_at(eye, Vector3::zeros(), Vector3::z(), width, height, DEFAULT_FOV_X_DEG)
    }

    /// A camera with the given pose and default intrinsics: square pixels,
    /// centered principal point, [`DEFAULT_FOV_X_DEG`] horizontal field of
    /// view.
    pub fn from_pose(world_to_camera: Matrix4<f64>, width: usize, height: usize) -> Result<Self> {
        if width == 0 {
            return Err(Error::InvalidCamera("zero-sized image".into()));
        }
        let f = 0.5 * width as f64 / (0.5 * DEFAULT_FOV_X_DEG.to_radians()).tan();
        Self::new(f, f, 0.5 * width as f64, 0.5 * height as f64, width, height, world_to_camera)
    }

    /// Same pose with intrinsics scaled for a `width × height` image,
    /// keeping the field of view.
    pub fn resized(&self, width: usize, height: usize) -> Self {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        Self {
            fx: self.fx * sx,
            fy: self.fy * sy,
            cx: self.cx * sx,
            cy: self.cy * sy,
            width,
            height,
            world_to_camera: self.world_to_camera,
        }
    }

    /// Downscale by an integer factor (resolution schedule).
    pub fn downscaled(&self, factor: usize) -> Self {
        if factor <= 1 {
            return self.clone();
        }
        self.resized(
            (self.width / factor).max(1),
            (self.height / factor).max(1),
        )
    }

    #[inline]
    pub fn rotation(&self) -> Matrix3<f64> {
        self.world_to_camera.fixed_view::<3, 3>(0, 0).into_owned()
    }

    #[inline]
    pub fn translation(&self) -> Vector3<f64> {
        self.world_to_camera.fixed_view::<3, 1>(0, 3).into_owned()
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation().transpose() * self.translation())
    }

    pub fn pose_row_major(&self) -> [f64; 16] {
        let mut out = [0.0; 16];
        for r in 0..4 {
            for c in 0..4 {
                out[r * 4 + c] = self.world_to_camera[(r, c)];
            }
        }
        out
    }
}

/// Parses 16 row-major scalars into a pose matrix.
pub fn pose_from_row_major(values: &[f64]) -> Result<Matrix4<f64>> {
    if values.len() != 16 {
        return Err(Error::InvalidCamera(format!(
            "pose needs 16 values, got {}",
            values.len()
        )));
    }
    Ok(Matrix4::from_row_slice(values))
}

/// Parses a comma-separated pose string (16 row-major scalars).
pub fn parse_pose(s: &str) -> Result<Matrix4<f64>> {
    let values = s
        .split(',')
        .map(|t| t.trim().parse::<f64>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::InvalidCamera(format!("bad pose scalar: {e}")))?;
    pose_from_row_major(&values)
}

/// Serializes views as `index fx fy cx cy W H p00 .. p33`, one per line.
pub fn write_manifest(views: &[CameraView]) -> String {
    let mut s = String::new();
    for (i, v) in views.iter().enumerate() {
        write!(s, "{i} {} {} {} {} {} {}", v.fx, v.fy, v.cx, v.cy, v.width, v.height).unwrap();
        for p in v.pose_row_major() {
            write!(s, " {p}").unwrap();
        }
        s.push('\n');
    }
    s
}

pub fn parse_manifest(text: &str) -> Result<Vec<CameraView>> {
    let mut views = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let perr = |reason: String| Error::Parse {
            line: lineno + 1,
            reason,
        };
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.len() != 23 {
            return Err(perr(format!("expected 23 fields, got {}", tokens.len())));
        }
        let index: usize = tokens[0].parse().map_err(|e| perr(format!("index: {e}")))?;
        if index != views.len() {
            return Err(perr(format!("expected view index {}, got {index}", views.len())));
        }
        let num = |t: &str| t.parse::<f64>().map_err(|e| perr(format!("{t:?}: {e}")));
        let dim = |t: &str| t.parse::<usize>().map_err(|e| perr(format!("{t:?}: {e}")));
        let pose: Vec<f64> = tokens[7..].iter().map(|t| num(t)).collect::<Result<_>>()?;
        let view = CameraView::new(
            num(tokens[1])?,
            num(tokens[2])?,
            num(tokens[3])?,
            num(tokens[4])?,
            dim(tokens[5])?,
            dim(tokens[6])?,
            pose_from_row_major(&pose)?,
        )
        .map_err(|e| perr(e.to_string()))?;
        views.push(view);
    }
    Ok(views)
}
