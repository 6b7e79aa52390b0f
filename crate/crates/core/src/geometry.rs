//! Pinhole cameras, quaternions and 3D covariance assembly.
//!
//! Pixel coordinates are continuous: pixel `(i, j)` covers `[i, i+1) x [j, j+1)`
//! and its centre sits at `(i + 0.5, j + 0.5)`. Depth is camera-space `z`.

use nalgebra::{Matrix3, Matrix4, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Points closer than this (camera-space z, metres) are treated as behind the camera.
pub const Z_NEAR: f64 = 0.05;

/// Rotation quaternion stored as `(w, x, y, z)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quaternion {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Quaternion {
    pub const IDENTITY: Self = Self {
        w: 1.0,
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Self { w, x, y, z }
    }

    pub fn from_array(q: [f64; 4]) -> Self {
        Self::new(q[0], q[1], q[2], q[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    pub fn norm(&self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn normalized(&self) -> Result<Self> {
        let n = self.norm();
        if !(n > 1e-12) || !n.is_finite() {
            return Err(Error::Domain(format!("cannot normalize quaternion {self:?}")));
        }
        Ok(Self::new(self.w / n, self.x / n, self.y / n, self.z / n))
    }

    /// Rotation matrix of the normalized quaternion.
    pub fn to_rotation_matrix(&self) -> Result<Matrix3<f64>> {
        let Self { w, x, y, z } = self.normalized()?;
        Ok(Matrix3::new(
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        ))
    }

    /// Unit quaternion of a rotation matrix (Shepperd's method), with `w >= 0`.
    pub fn from_rotation_matrix(m: &Matrix3<f64>) -> Self {
        let tr = m.trace();
        let q = if tr > 0.0 {
            let s = (tr + 1.0).sqrt() * 2.0;
            Self::new(
                0.25 * s,
                (m[(2, 1)] - m[(1, 2)]) / s,
                (m[(0, 2)] - m[(2, 0)]) / s,
                (m[(1, 0)] - m[(0, 1)]) / s,
            )
        } else if m[(0, 0)] > m[(1, 1)] && m[(0, 0)] > m[(2, 2)] {
            let s = (1.0 + m[(0, 0)] - m[(1, 1)] - m[(2, 2)]).sqrt() * 2.0;
            Self::new(
                (m[(2, 1)] - m[(1, 2)]) / s,
                0.25 * s,
                (m[(0, 1)] + m[(1, 0)]) / s,
                (m[(0, 2)] + m[(2, 0)]) / s,
            )
        } else if m[(1, 1)] > m[(2, 2)] {
            let s = (1.0 + m[(1, 1)] - m[(0, 0)] - m[(2, 2)]).sqrt() * 2.0;
            Self::new(
                (m[(0, 2)] - m[(2, 0)]) / s,
                (m[(0, 1)] + m[(1, 0)]) / s,
                0.25 * s,
                (m[(1, 2)] + m[(2, 1)]) / s,
            )
        } else {
            let s = (1.0 + m[(2, 2)] - m[(0, 0)] - m[(1, 1)]).sqrt() * 2.0;
            Self::new(
                (m[(1, 0)] - m[(0, 1)]) / s,
                (m[(0, 2)] + m[(2, 0)]) / s,
                (m[(1, 2)] + m[(2, 1)]) / s,
                0.25 * s,
            )
        };
        if q.w < 0.0 {
            Self::new(-q.w, -q.x, -q.y, -q.z)
        } else {
            q
        }
    }
}

/// `Σ = R diag(S) diag(S)ᵀ Rᵀ`.
pub fn assemble_covariance(scale: [f64; 3], rot: Quaternion) -> Result<Matrix3<f64>> {
    if scale.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::Domain(format!("scales must be positive, got {scale:?}")));
    }
    let r = rot.to_rotation_matrix()?;
    let s2 = Matrix3::from_diagonal(&Vector3::new(
        scale[0] * scale[0],
        scale[1] * scale[1],
        scale[2] * scale[2],
    ));
    Ok(r * s2 * r.transpose())
}

/// A point projected into an image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projected {
    pub pixel: Vector2<f64>,
    pub depth: f64,
}

/// Pinhole camera: intrinsics `K` and rigid world-to-camera extrinsics `E`.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
    width: usize,
    height: usize,
}

impl Camera {
    pub fn new(
        intrinsics: Matrix3<f64>,
        extrinsics: Matrix4<f64>,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let (fx, fy) = (intrinsics[(0, 0)], intrinsics[(1, 1)]);
        if !(fx > 0.0 && fy > 0.0) {
            return Err(Error::Domain(format!(
                "focal lengths must be positive, got fx={fx} fy={fy}"
            )));
        }
        if intrinsics[(0, 1)] != 0.0
            || intrinsics[(1, 0)] != 0.0
            || intrinsics[(2, 0)] != 0.0
            || intrinsics[(2, 1)] != 0.0
            || intrinsics[(2, 2)] != 1.0
        {
            return Err(Error::Domain("intrinsics must be a pinhole matrix".into()));
        }
        let rotation: Matrix3<f64> = extrinsics.fixed_view::<3, 3>(0, 0).into();
        let ortho_err = (rotation.transpose() * rotation - Matrix3::identity()).amax();
        if ortho_err > 1e-9 || (rotation.determinant() - 1.0).abs() > 1e-9 {
            return Err(Error::Domain(
                "extrinsic rotation must be orthonormal with det +1".into(),
            ));
        }
        let bottom = extrinsics.fixed_view::<1, 4>(3, 0);
        if bottom[(0, 0)] != 0.0 || bottom[(0, 1)] != 0.0 || bottom[(0, 2)] != 0.0 || bottom[(0, 3)] != 1.0 {
            return Err(Error::Domain("extrinsics must be a rigid transform".into()));
        }
        if width == 0 || height == 0 {
            return Err(Error::Domain("image size must be non-zero".into()));
        }
        Ok(Self {
            fx,
            fy,
            cx: intrinsics[(0, 2)],
            cy: intrinsics[(1, 2)],
            rotation,
            translation: extrinsics.fixed_view::<3, 1>(0, 3).into(),
            width,
            height,
        })
    }

    /// Camera at the origin looking down +z.
    pub fn with_identity_pose(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        Self::new(
            Matrix3::new(fx, 0.0, cx, 0.0, fy, cy, 0.0, 0.0, 1.0),
            Matrix4::identity(),
            width,
            height,
        )
    }

    /// Camera at `eye` looking at `target`; image `y` points along `-up`.
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        fx: f64,
        fy: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let forward = (target - eye)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::Domain("eye and target coincide".into()))?;
        let right = forward
            .cross(&up)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::Domain("up is parallel to the view direction".into()))?;
        let down = forward.cross(&right);
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let translation = -(rotation * eye);
        let mut e = Matrix4::identity();
        e.fixed_view_mut::<3, 3>(0, 0).copy_from(&rotation);
        e.fixed_view_mut::<3, 1>(0, 3).copy_from(&translation);
        let k = Matrix3::new(fx, 0.0, width as f64 / 2.0, 0.0, fy, height as f64 / 2.0, 0.0, 0.0, 1.0);
        Self::new(k, e, width, height)
    }

    pub fn fx(&self) -> f64 {
        self.fx
    }
    pub fn fy(&self) -> f64 {
        self.fy
    }
    pub fn cx(&self) -> f64 {
        self.cx
    }
    pub fn cy(&self) -> f64 {
        self.cy
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn intrinsics(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    /// World-to-camera transform `E`.
    pub fn extrinsics(&self) -> Matrix4<f64> {
        let mut e = Matrix4::identity();
        e.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        e.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        e
    }

    /// Rotation block of `E` (world to camera).
    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    /// `E⁻¹` for a rigid `E`.
    pub fn camera_to_world(&self) -> Matrix4<f64> {
        let rt = self.rotation.transpose();
        let mut inv = Matrix4::identity();
        inv.fixed_view_mut::<3, 3>(0, 0).copy_from(&rt);
        inv.fixed_view_mut::<3, 1>(0, 3).copy_from(&(-(rt * self.translation)));
        inv
    }

    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn world_to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Project a world point. `None` when it lies at or behind [`Z_NEAR`].
    pub fn project(&self, p: &Vector3<f64>) -> Option<Projected> {
        let c = self.world_to_camera(p);
        if c.z <= Z_NEAR {
            return None;
        }
        Some(Projected {
            pixel: Vector2::new(self.fx * c.x / c.z + self.cx, self.fy * c.y / c.z + self.cy),
            depth: c.z,
        })
    }

    /// `E⁻¹ K⁻¹ (d · [u, v, 1])` for a pixel at z-depth `d`.
    pub fn unproject(&self, pixel: &Vector2<f64>, depth: f64) -> Result<Vector3<f64>> {
        if !(depth > 0.0) {
            return Err(Error::Domain(format!("depth must be positive, got {depth}")));
        }
        let c = Vector3::new(
            (pixel.x - self.cx) / self.fx * depth,
            (pixel.y - self.cy) / self.fy * depth,
            depth,
        );
        Ok(self.rotation.transpose() * (c - self.translation))
    }

    /// Batched [`Camera::unproject`].
    pub fn unproject_all(&self, pixels: &[[f64; 2]], depths: &[f64]) -> Result<Vec<Vector3<f64>>> {
        if pixels.len() != depths.len() {
            return Err(Error::Dimension(format!(
                "{} pixels but {} depths",
                pixels.len(),
                depths.len()
            )));
        }
        pixels
            .iter()
            .zip(depths)
            .map(|(p, &d)| self.unproject(&Vector2::new(p[0], p[1]), d))
            .collect()
    }

    /// World-space ray through a pixel; the direction has unit camera-space z,
    /// so the ray parameter equals z-depth.
    pub fn ray(&self, pixel: &Vector2<f64>) -> (Vector3<f64>, Vector3<f64>) {
        let dir_cam = Vector3::new((pixel.x - self.cx) / self.fx, (pixel.y - self.cy) / self.fy, 1.0);
        (self.center(), self.rotation.transpose() * dir_cam)
    }

    /// Same pose with the image resized to `width x height`; intrinsics scale
    /// with the continuous pixel coordinates.
    pub fn resized(&self, width: usize, height: usize) -> Result<Self> {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        let k = Matrix3::new(self.fx * sx, 0.0, self.cx * sx, 0.0, self.fy * sy, self.cy * sy, 0.0, 0.0, 1.0);
        Self::new(k, self.extrinsics(), width, height)
    }
}

/// JSON form of a camera.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct CameraRecord {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Row-major world-to-camera transform.
    pub extrinsics: [[f64; 4]; 4],
    pub width: usize,
    pub height: usize,
}

impl From<&Camera> for CameraRecord {
    fn from(c: &Camera) -> Self {
        let e = c.extrinsics();
        let mut rows = [[0.0; 4]; 4];
        for (i, row) in rows.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = e[(i, j)];
            }
        }
        Self {
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
            extrinsics: rows,
            width: c.width,
            height: c.height,
        }
    }
}

impl TryFrom<&CameraRecord> for Camera {
    type Error = Error;

    fn try_from(r: &CameraRecord) -> Result<Self> {
        let e = Matrix4::from_fn(|i, j| r.extrinsics[i][j]);
        Camera::new(
            Matrix3::new(r.fx, 0.0, r.cx, 0.0, r.fy, r.cy, 0.0, 0.0, 1.0),
            e,
            r.width,
            r.height,
        )
    }
}
