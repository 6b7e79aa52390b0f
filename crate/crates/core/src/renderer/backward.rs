use nalgebra::{Matrix2, Matrix3, Vector3};
use rayon::prelude::*;

use super::project::{jacobian, rotation_vjp};
use super::raster::{composite_pixel, tile_ranges, Contribution, RenderState};
use crate::error::{Error, Result};
use crate::gaussians::GaussianParams;

/// Gradients of a scalar loss with respect to every Gaussian parameter,
/// laid out like [`GaussianParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct RenderGrads {
    pub means: Vec<f64>,
    pub scales: Vec<f64>,
    pub quats: Vec<f64>,
    pub opacities: Vec<f64>,
    pub feats: Vec<f64>,
}

// dmx, dmy, dA, dB, dC, dz, dopacity
const SCREEN: usize = 7;

/// Backpropagate `grad_feat` (`H x W x C`) and `grad_depth` (`H x W`)
/// through the forward pass described by `state`.
pub fn render_backward(
    state: &RenderState,
    params: &GaussianParams,
    grad_feat: &[f64],
    grad_depth: &[f64],
) -> Result<RenderGrads> {
    let (h, w, c) = (state.height, state.width, params.feat_dim);
    if grad_feat.len() != h * w * c || grad_depth.len() != h * w {
        return Err(Error::Dimension(format!(
            "render gradient sizes {} / {} do not match a {h}x{w}x{c} view",
            grad_feat.len(),
            grad_depth.len()
        )));
    }
    let n = params.len();
    let stride = SCREEN + c;

    let per_tile: Vec<Vec<f64>> = tile_ranges(state)
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|(t, (x0, x1, y0, y1))| {
            let list = &state.tiles[t];
            let mut local = vec![0.0; list.len() * stride];
            if list.is_empty() {
                return local;
            }
            let slot: std::collections::HashMap<usize, usize> =
                list.iter().enumerate().map(|(s, &i)| (i, s)).collect();
            let mut contribs: Vec<Contribution> = Vec::new();
            let mut suffix: Vec<f64> = Vec::new();
            for y in y0..y1 {
                for x in x0..x1 {
                    let p = y * w + x;
                    let gf = &grad_feat[p * c..(p + 1) * c];
                    let gd = grad_depth[p];
                    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                    contribs.clear();
                    composite_pixel(list, &state.projected, params.opacities, px, py, |k| contribs.push(k));
                    // e_k = dL/d(weight_k); suffix[k] = Σ_{j>k} e_j w_j
                    suffix.clear();
                    suffix.resize(contribs.len(), 0.0);
                    let mut acc = 0.0;
                    for (k, ct) in contribs.iter().enumerate().rev() {
                        suffix[k] = acc;
                        let e = emission_grad(params, state, ct.index, gf, gd);
                        acc += e * ct.alpha * ct.trans;
                    }
                    for (k, ct) in contribs.iter().enumerate() {
                        let i = ct.index;
                        let g = &mut local[slot[&i] * stride..(slot[&i] + 1) * stride];
                        let wk = ct.alpha * ct.trans;
                        for (d, v) in g[SCREEN..].iter_mut().zip(gf) {
                            *d += wk * v;
                        }
                        let pg = state.projected[i].as_ref().unwrap();
                        g[5] += wk * gd;
                        let e = emission_grad(params, state, i, gf, gd);
                        let da = ct.trans * e - suffix[k] / (1.0 - ct.alpha);
                        if ct.clipped {
                            continue;
                        }
                        g[6] += da * ct.falloff;
                        let dpow = da * ct.alpha;
                        let dx = px - pg.mu2d.x;
                        let dy = py - pg.mu2d.y;
                        let [ca, cb, cc] = pg.conic;
                        g[0] += dpow * (ca * dx + cb * dy);
                        g[1] += dpow * (cb * dx + cc * dy);
                        g[2] += dpow * (-0.5 * dx * dx);
                        g[3] += dpow * (-dx * dy);
                        g[4] += dpow * (-0.5 * dy * dy);
                    }
                }
            }
            local
        })
        .collect();

    let mut screen = vec![0.0; n * SCREEN];
    let mut grads = RenderGrads {
        means: vec![0.0; 3 * n],
        scales: vec![0.0; 3 * n],
        quats: vec![0.0; 4 * n],
        opacities: vec![0.0; n],
        feats: vec![0.0; n * c],
    };
    for (t, local) in per_tile.iter().enumerate() {
        for (s, &i) in state.tiles[t].iter().enumerate() {
            let g = &local[s * stride..(s + 1) * stride];
            for (d, v) in screen[i * SCREEN..(i + 1) * SCREEN].iter_mut().zip(&g[..SCREEN]) {
                *d += v;
            }
            for (d, v) in grads.feats[i * c..(i + 1) * c].iter_mut().zip(&g[SCREEN..]) {
                *d += v;
            }
        }
    }

    let world: Vec<Option<([f64; 3], [f64; 3], [f64; 4])>> = (0..n)
        .into_par_iter()
        .map(|i| {
            if state.projected[i].is_none() {
                return Ok(None);
            }
            screen_to_world(state, params, i, &screen[i * SCREEN..(i + 1) * SCREEN]).map(Some)
        })
        .collect::<Result<_>>()?;
    for (i, g) in world.into_iter().enumerate() {
        grads.opacities[i] = screen[i * SCREEN + 6];
        if let Some((dm, ds, dq)) = g {
            grads.means[3 * i..3 * i + 3].copy_from_slice(&dm);
            grads.scales[3 * i..3 * i + 3].copy_from_slice(&ds);
            grads.quats[4 * i..4 * i + 4].copy_from_slice(&dq);
        }
    }
    Ok(grads)
}

#[inline]
fn emission_grad(params: &GaussianParams, state: &RenderState, i: usize, gf: &[f64], gd: f64) -> f64 {
    let f = params.feat(i);
    let z = state.projected[i].as_ref().unwrap().z;
    f.iter().zip(gf).map(|(a, b)| a * b).sum::<f64>() + gd * z
}

/// Chain screen-space gradients of Gaussian `i` back to its mean, scale
/// and (unnormalized) quaternion.
fn screen_to_world(
    state: &RenderState,
    params: &GaussianParams,
    i: usize,
    g: &[f64],
) -> Result<([f64; 3], [f64; 3], [f64; 4])> {
    let cam = &state.cam;
    let pg = state.projected[i].as_ref().unwrap();
    let (fx, fy) = (cam.fx(), cam.fy());
    let mean = Vector3::from(params.mean(i));
    let t = cam.world_to_camera(&mean);
    let w = cam.rotation();
    let s = params.scale(i);
    let q_raw = params.quat(i);
    let qn = q_raw.norm();
    let q = q_raw.normalized()?;
    let r = q.to_rotation_matrix()?;
    let d = Matrix3::from_diagonal(&Vector3::new(s[0] * s[0], s[1] * s[1], s[2] * s[2]));
    let sigma = r * d * r.transpose();
    let j = jacobian(cam, &t);
    let tm = j * w;

    let conic = Matrix2::new(pg.conic[0], pg.conic[1], pg.conic[1], pg.conic[2]);
    let dconic = Matrix2::new(g[2], 0.5 * g[3], 0.5 * g[3], g[4]);
    let dcov2 = -conic * dconic * conic;
    let dtm = 2.0 * dcov2 * tm * sigma;
    let dsigma = tm.transpose() * dcov2 * tm;
    let dj = dtm * w.transpose();

    let iz = 1.0 / t.z;
    let iz2 = iz * iz;
    let mut dt = Vector3::zeros();
    dt.x += dj[(0, 2)] * (-fx * iz2);
    dt.y += dj[(1, 2)] * (-fy * iz2);
    dt.z += dj[(0, 0)] * (-fx * iz2)
        + dj[(1, 1)] * (-fy * iz2)
        + dj[(0, 2)] * (2.0 * fx * t.x * iz2 * iz)
        + dj[(1, 2)] * (2.0 * fy * t.y * iz2 * iz);
    dt.x += g[0] * fx * iz;
    dt.z -= g[0] * fx * t.x * iz2;
    dt.y += g[1] * fy * iz;
    dt.z -= g[1] * fy * t.y * iz2;
    dt.z += g[5];
    let dmean = w.transpose() * dt;

    let dr = 2.0 * dsigma * r * d;
    let inner = r.transpose() * dsigma * r;
    let dscale = [
        2.0 * s[0] * inner[(0, 0)],
        2.0 * s[1] * inner[(1, 1)],
        2.0 * s[2] * inner[(2, 2)],
    ];
    let qa = q.to_array();
    let dqn = rotation_vjp(qa, &dr);
    let proj: f64 = qa.iter().zip(&dqn).map(|(a, b)| a * b).sum();
    let dq = [0, 1, 2, 3].map(|k| (dqn[k] - qa[k] * proj) / qn);
    Ok(([dmean.x, dmean.y, dmean.z], dscale, dq))
}
