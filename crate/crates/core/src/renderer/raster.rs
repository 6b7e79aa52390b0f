use rayon::prelude::*;

use super::project::{project_gaussian, ProjectedGaussian};
use super::{ALPHA_MAX, TILE_SIZE, T_MIN};
use crate::error::{Error, Result};
use crate::gaussians::GaussianParams;
use crate::geometry::Camera;
use crate::tensor::Tensor;

/// Blended features, depth and final transmittance for one view.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedView {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// `height x width x channels`.
    pub feat: Vec<f64>,
    /// `height x width`, metres.
    pub depth: Vec<f64>,
    /// `height x width`, in `[0, 1]`.
    pub trans: Vec<f64>,
}

impl RenderedView {
    fn blank(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            feat: vec![0.0; height * width * channels],
            depth: vec![0.0; height * width],
            trans: vec![1.0; height * width],
        }
    }

    pub fn feat_tensor(&self) -> Tensor {
        Tensor::new([self.height, self.width, self.channels], self.feat.clone()).unwrap()
    }

    pub fn depth_tensor(&self) -> Tensor {
        Tensor::new([self.height, self.width], self.depth.clone()).unwrap()
    }

    pub fn trans_tensor(&self) -> Tensor {
        Tensor::new([self.height, self.width], self.trans.clone()).unwrap()
    }

    /// Depth normalized by accumulated opacity, `D / (1 - T)`; zero where
    /// nothing was hit. Removes the attenuation from the opacity clip.
    pub fn expected_depth(&self) -> Vec<f64> {
        self.depth
            .iter()
            .zip(&self.trans)
            .map(|(&d, &t)| if t < 1.0 { d / (1.0 - t) } else { 0.0 })
            .collect()
    }
}

/// Everything the backward pass needs from a forward render.
#[derive(Debug, Clone)]
pub struct RenderState {
    pub(crate) cam: Camera,
    pub(crate) projected: Vec<Option<ProjectedGaussian>>,
    /// Visible Gaussians sorted front to back (ties broken by index).
    pub(crate) order: Vec<usize>,
    /// Per tile, the Gaussians whose 3σ box touches it, in `order`.
    pub(crate) tiles: Vec<Vec<usize>>,
    pub(crate) tiles_x: usize,
    pub(crate) height: usize,
    pub(crate) width: usize,
}

impl RenderState {
    pub fn num_visible(&self) -> usize {
        self.order.len()
    }

    /// Pixel ranges `(x0..x1, y0..y1)` of tile `t`.
    fn tile_bounds(&self, t: usize) -> (usize, usize, usize, usize) {
        let (tx, ty) = (t % self.tiles_x, t / self.tiles_x);
        let x0 = tx * TILE_SIZE;
        let y0 = ty * TILE_SIZE;
        (x0, (x0 + TILE_SIZE).min(self.width), y0, (y0 + TILE_SIZE).min(self.height))
    }
}

/// Project, cull, depth-sort and bin Gaussians into tiles for a view of
/// `height x width` pixels. `cam` is rescaled to that resolution.
pub fn prepare(params: &GaussianParams, cam: &Camera, height: usize, width: usize) -> Result<RenderState> {
    params.validate()?;
    if height == 0 || width == 0 {
        return Err(Error::Dimension("render size must be non-zero".into()));
    }
    let cam = cam.resized(width, height)?;
    let projected = (0..params.len())
        .map(|i| project_gaussian(params.mean(i), params.scale(i), params.quat(i), &cam))
        .collect::<Result<Vec<_>>>()?;
    let mut order: Vec<usize> = (0..params.len()).filter(|&i| projected[i].is_some()).collect();
    order.sort_by(|&a, &b| {
        let (za, zb) = (projected[a].unwrap().z, projected[b].unwrap().z);
        za.total_cmp(&zb).then(a.cmp(&b))
    });
    let tiles_x = width.div_ceil(TILE_SIZE);
    let tiles_y = height.div_ceil(TILE_SIZE);
    let mut tiles = vec![Vec::new(); tiles_x * tiles_y];
    for &i in &order {
        let p = projected[i].unwrap();
        // Pixel-centre range, padded by one pixel so binning never misses a
        // pixel the per-pixel test would accept.
        let lo_x = (p.mu2d.x - p.radius - 1.5).floor().max(0.0);
        let hi_x = (p.mu2d.x + p.radius + 0.5).ceil().min(width as f64 - 1.0);
        let lo_y = (p.mu2d.y - p.radius - 1.5).floor().max(0.0);
        let hi_y = (p.mu2d.y + p.radius + 0.5).ceil().min(height as f64 - 1.0);
        if lo_x > hi_x || lo_y > hi_y {
            continue;
        }
        let (tx0, tx1) = (lo_x as usize / TILE_SIZE, hi_x as usize / TILE_SIZE);
        let (ty0, ty1) = (lo_y as usize / TILE_SIZE, hi_y as usize / TILE_SIZE);
        for ty in ty0..=ty1 {
            for tx in tx0..=tx1 {
                tiles[ty * tiles_x + tx].push(i);
            }
        }
    }
    Ok(RenderState {
        cam,
        projected,
        order,
        tiles,
        tiles_x,
        height,
        width,
    })
}

/// One Gaussian's contribution to a pixel.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Contribution {
    pub index: usize,
    /// Effective opacity after falloff and clipping.
    pub alpha: f64,
    /// Transmittance before this Gaussian.
    pub trans: f64,
    /// Gaussian falloff `exp(power)`.
    pub falloff: f64,
    pub clipped: bool,
}

/// Front-to-back walk of `list` at pixel centre `(px, py)`. Calls `visit`
/// for every contributing Gaussian and returns the final transmittance.
#[inline]
pub(crate) fn composite_pixel(
    list: &[usize],
    projected: &[Option<ProjectedGaussian>],
    opacities: &[f64],
    px: f64,
    py: f64,
    mut visit: impl FnMut(Contribution),
) -> f64 {
    let mut t = 1.0;
    for &i in list {
        let p = projected[i].as_ref().unwrap();
        let dx = px - p.mu2d.x;
        let dy = py - p.mu2d.y;
        if dx.abs() > p.radius || dy.abs() > p.radius {
            continue;
        }
        let power = -0.5 * (p.conic[0] * dx * dx + 2.0 * p.conic[1] * dx * dy + p.conic[2] * dy * dy);
        let falloff = power.exp();
        let raw = opacities[i] * falloff;
        let clipped = raw > ALPHA_MAX;
        let alpha = if clipped { ALPHA_MAX } else { raw };
        visit(Contribution {
            index: i,
            alpha,
            trans: t,
            falloff,
            clipped,
        });
        t *= 1.0 - alpha;
        if t < T_MIN {
            break;
        }
    }
    t
}

fn shade(
    list: &[usize],
    state: &RenderState,
    params: &GaussianParams,
    px: f64,
    py: f64,
    feat: &mut [f64],
    depth: &mut f64,
) -> f64 {
    let c = params.feat_dim;
    composite_pixel(list, &state.projected, params.opacities, px, py, |k| {
        let w = k.alpha * k.trans;
        let f = &params.feats[k.index * c..(k.index + 1) * c];
        for (o, v) in feat.iter_mut().zip(f) {
            *o += w * v;
        }
        *depth += w * state.projected[k.index].as_ref().unwrap().z;
    })
}

/// Tile-parallel forward pass over a prepared state.
pub fn rasterize(state: &RenderState, params: &GaussianParams) -> RenderedView {
    let (h, w, c) = (state.height, state.width, params.feat_dim);
    let mut view = RenderedView::blank(h, w, c);
    let tile_outputs: Vec<(usize, Vec<f64>, Vec<f64>, Vec<f64>)> = (0..state.tiles.len())
        .into_par_iter()
        .map(|t| {
            let (x0, x1, y0, y1) = state.tile_bounds(t);
            let n = (x1 - x0) * (y1 - y0);
            let mut feat = vec![0.0; n * c];
            let mut depth = vec![0.0; n];
            let mut trans = vec![1.0; n];
            let mut k = 0;
            for y in y0..y1 {
                for x in x0..x1 {
                    trans[k] = shade(
                        &state.tiles[t],
                        state,
                        params,
                        x as f64 + 0.5,
                        y as f64 + 0.5,
                        &mut feat[k * c..(k + 1) * c],
                        &mut depth[k],
                    );
                    k += 1;
                }
            }
            (t, feat, depth, trans)
        })
        .collect();
    for (t, feat, depth, trans) in tile_outputs {
        let (x0, x1, y0, y1) = state.tile_bounds(t);
        let mut k = 0;
        for y in y0..y1 {
            for x in x0..x1 {
                let p = y * w + x;
                view.feat[p * c..(p + 1) * c].copy_from_slice(&feat[k * c..(k + 1) * c]);
                view.depth[p] = depth[k];
                view.trans[p] = trans[k];
                k += 1;
            }
        }
    }
    view
}

/// Alpha-blend Gaussian features and depth into a `height x width` view.
pub fn render(params: &GaussianParams, cam: &Camera, height: usize, width: usize) -> Result<RenderedView> {
    let state = prepare(params, cam, height, width)?;
    Ok(rasterize(&state, params))
}

/// Reference renderer: every pixel walks every visible Gaussian in the
/// global sorted order, with no tiling.
pub fn render_brute_force(params: &GaussianParams, cam: &Camera, height: usize, width: usize) -> Result<RenderedView> {
    let state = prepare(params, cam, height, width)?;
    let c = params.feat_dim;
    let mut view = RenderedView::blank(height, width, c);
    for y in 0..height {
        for x in 0..width {
            let p = y * width + x;
            let mut depth = 0.0;
            view.trans[p] = shade(
                &state.order,
                &state,
                params,
                x as f64 + 0.5,
                y as f64 + 0.5,
                &mut view.feat[p * c..(p + 1) * c],
                &mut depth,
            );
            view.depth[p] = depth;
        }
    }
    Ok(view)
}

/// Tile index and the pixel range it covers, for every tile.
pub(crate) fn tile_ranges(state: &RenderState) -> impl Iterator<Item = (usize, (usize, usize, usize, usize))> + '_ {
    (0..state.tiles.len()).map(move |t| (t, state.tile_bounds(t)))
}
