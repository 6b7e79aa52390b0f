use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};

use super::COV2D_EPS;
use crate::error::Result;
use crate::geometry::{assemble_covariance, Camera, Quaternion, Z_NEAR};

/// A Gaussian splatted onto the image plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectedGaussian {
    pub mu2d: Vector2<f64>,
    /// `J W Σ Wᵀ Jᵀ + ε I`, px².
    pub cov2d: Matrix2<f64>,
    /// Inverse of `cov2d` stored as `(a, b, c)` for `[[a, b], [b, c]]`.
    pub conic: [f64; 3],
    /// Camera-space z, metres.
    pub z: f64,
    /// Three standard deviations along the major axis, px.
    pub radius: f64,
}

/// Local affine (EWA) projection of a 3D Gaussian. `None` when the Gaussian
/// is at or behind the near plane or its 3σ disk misses the image.
pub fn project_gaussian(
    mean: [f64; 3],
    scale: [f64; 3],
    rot: Quaternion,
    cam: &Camera,
) -> Result<Option<ProjectedGaussian>> {
    let t = cam.world_to_camera(&Vector3::from(mean));
    if t.z <= Z_NEAR {
        return Ok(None);
    }
    let sigma = assemble_covariance(scale, rot)?;
    let j = jacobian(cam, &t);
    let m = j * cam.rotation();
    let cov2d = m * sigma * m.transpose() + Matrix2::identity() * COV2D_EPS;
    let (a, b, c) = (cov2d[(0, 0)], cov2d[(0, 1)], cov2d[(1, 1)]);
    let det = a * c - b * b;
    let mid = 0.5 * (a + c);
    let lambda_max = mid + (mid * mid - det).max(0.0).sqrt();
    let radius = 3.0 * lambda_max.sqrt();
    let mu2d = Vector2::new(cam.fx() * t.x / t.z + cam.cx(), cam.fy() * t.y / t.z + cam.cy());
    let (w, h) = (cam.width() as f64, cam.height() as f64);
    if mu2d.x + radius < 0.0 || mu2d.x - radius > w || mu2d.y + radius < 0.0 || mu2d.y - radius > h {
        return Ok(None);
    }
    Ok(Some(ProjectedGaussian {
        mu2d,
        cov2d,
        conic: [c / det, -b / det, a / det],
        z: t.z,
        radius,
    }))
}

/// Jacobian of the perspective projection at camera-space point `t`.
pub(crate) fn jacobian(cam: &Camera, t: &Vector3<f64>) -> Matrix2x3<f64> {
    let (fx, fy) = (cam.fx(), cam.fy());
    let iz = 1.0 / t.z;
    Matrix2x3::new(fx * iz, 0.0, -fx * t.x * iz * iz, 0.0, fy * iz, -fy * t.y * iz * iz)
}

/// Partial derivatives of the rotation matrix of a unit quaternion `(w, x, y, z)`
/// with respect to each component, contracted with an upstream gradient `g`.
pub(crate) fn rotation_vjp(q: [f64; 4], g: &Matrix3<f64>) -> [f64; 4] {
    let [w, x, y, z] = q;
    let mut d = [0.0; 4];
    let mut add = |i: usize, j: usize, dw: f64, dx: f64, dy: f64, dz: f64| {
        let v = g[(i, j)];
        d[0] += v * dw;
        d[1] += v * dx;
        d[2] += v * dy;
        d[3] += v * dz;
    };
    add(0, 0, 0.0, 0.0, -4.0 * y, -4.0 * z);
    add(0, 1, -2.0 * z, 2.0 * y, 2.0 * x, -2.0 * w);
    add(0, 2, 2.0 * y, 2.0 * z, 2.0 * w, 2.0 * x);
    add(1, 0, 2.0 * z, 2.0 * y, 2.0 * x, 2.0 * w);
    add(1, 1, 0.0, -4.0 * x, 0.0, -4.0 * z);
    add(1, 2, -2.0 * x, -2.0 * w, 2.0 * z, 2.0 * y);
    add(2, 0, -2.0 * y, 2.0 * z, -2.0 * w, 2.0 * x);
    add(2, 1, 2.0 * x, 2.0 * w, 2.0 * z, 2.0 * y);
    add(2, 2, 0.0, -4.0 * x, -4.0 * y, 0.0);
    d
}
