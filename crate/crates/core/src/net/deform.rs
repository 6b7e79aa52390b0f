use super::layers::{layer_norm, linear};
use super::params::ParamVars;
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::maps::FeatureMap;
use crate::tensor::Tensor;

/// Shape of the sampling pattern.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DeformLayout {
    pub heads: usize,
    pub levels: usize,
    pub points: usize,
}

impl DeformLayout {
    pub fn samples(&self) -> usize {
        self.heads * self.levels * self.points
    }
}

/// Multi-level features of one view, `levels[l]` is `H_l x W_l x C`.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub levels: Vec<FeatureMap>,
}

impl FeaturePyramid {
    /// Level 0 is `base`; each further level is a 2x2 average pool.
    pub fn build(base: &FeatureMap, levels: usize) -> Result<Self> {
        let mut out = vec![base.clone()];
        while out.len() < levels {
            out.push(out.last().unwrap().avg_pool2()?);
        }
        Ok(Self { levels: out })
    }
}

/// Bilinear corner weights and their derivatives for a continuous position
/// in pixel-index coordinates (pixel centres at integers).
struct Taps {
    idx: [Option<usize>; 4],
    w: [f64; 4],
    dwdx: [f64; 4],
    dwdy: [f64; 4],
}

fn taps(x: f64, y: f64, h: usize, w: usize) -> Taps {
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let at = |cx: f64, cy: f64| {
        (cx >= 0.0 && cy >= 0.0 && cx < w as f64 && cy < h as f64).then(|| cy as usize * w + cx as usize)
    };
    Taps {
        idx: [at(x0, y0), at(x0 + 1.0, y0), at(x0, y0 + 1.0), at(x0 + 1.0, y0 + 1.0)],
        w: [(1.0 - fx) * (1.0 - fy), fx * (1.0 - fy), (1.0 - fx) * fy, fx * fy],
        dwdx: [-(1.0 - fy), 1.0 - fy, -fy, fy],
        dwdy: [-(1.0 - fx), -fx, 1.0 - fx, fx],
    }
}

/// Where each sample of each query lands.
struct Locator {
    refs: Vec<[f64; 2]>,
    view_of: Vec<usize>,
    offsets: Tensor,
    dims: Vec<Vec<(usize, usize)>>,
    levels: usize,
    points: usize,
}

impl Locator {
    fn at(&self, q: usize, h: usize, l: usize, k: usize) -> (usize, Taps) {
        let (hl, wl) = self.dims[self.view_of[q]][l];
        let j = (h * self.levels + l) * self.points + k;
        let o = self.offsets.row(q);
        let x = self.refs[q][0] * wl as f64 + o[2 * j] - 0.5;
        let y = self.refs[q][1] * hl as f64 + o[2 * j + 1] - 0.5;
        (j, taps(x, y, hl, wl))
    }
}

/// Fused deformable sampling.
///
/// Query `m` belongs to view `view_of[m]` and has reference point
/// `refs[m]` in normalized image coordinates. `offsets` is
/// `M x (heads·levels·points·2)` in level pixels and `weights` is
/// `M x (heads·levels·points)` (already normalized). `values[v][l]` is the
/// projected `H_l·W_l x C` value map with `dims[v][l] = (H_l, W_l)`. Each
/// head reads its own `C / heads` channel slice; samples outside the map
/// read zeros.
#[allow(clippy::too_many_arguments)]
pub fn deform_sample(
    values: &[Vec<Var>],
    dims: &[Vec<(usize, usize)>],
    view_of: &[usize],
    refs: &[[f64; 2]],
    offsets: &Var,
    weights: &Var,
    layout: DeformLayout,
) -> Result<Var> {
    let DeformLayout { heads, levels, points } = layout;
    let m = refs.len();
    let s = layout.samples();
    if offsets.shape() != [m, 2 * s] || weights.shape() != [m, s] || view_of.len() != m {
        return Err(Error::Dimension(format!(
            "deform_sample: offsets {:?}, weights {:?} for {m} queries and {s} samples",
            offsets.shape(),
            weights.shape()
        )));
    }
    let first = values
        .first()
        .and_then(|v| v.first())
        .ok_or_else(|| Error::Dimension("deform_sample needs at least one value map".into()))?;
    let c = first.value().last_dim();
    if c % heads != 0 {
        return Err(Error::Dimension(format!("channels {c} not divisible by {heads} heads")));
    }
    let d = c / heads;
    if dims.len() != values.len() {
        return Err(Error::Dimension(format!("{} dims for {} views", dims.len(), values.len())));
    }
    for (v, lv) in values.iter().enumerate() {
        if lv.len() != levels || dims[v].len() != levels {
            return Err(Error::Dimension(format!("view {v} has {} levels, expected {levels}", lv.len())));
        }
        for (l, val) in lv.iter().enumerate() {
            let (h, w) = dims[v][l];
            if val.shape() != [h * w, c] {
                return Err(Error::Dimension(format!("value map ({v}, {l}) has shape {:?}", val.shape())));
            }
        }
    }
    if let Some(&bad) = view_of.iter().find(|&&v| v >= values.len()) {
        return Err(Error::Dimension(format!("query refers to missing view {bad}")));
    }

    let vals: Vec<Vec<Tensor>> = values.iter().map(|lv| lv.iter().map(|v| v.value().clone()).collect()).collect();
    let wts = weights.value().clone();
    let loc = Locator {
        refs: refs.to_vec(),
        view_of: view_of.to_vec(),
        offsets: offsets.value().clone(),
        dims: dims.to_vec(),
        levels,
        points,
    };

    let mut out = vec![0.0; m * c];
    for q in 0..m {
        let v = view_of[q];
        for h in 0..heads {
            for l in 0..levels {
                let map = vals[v][l].data();
                for k in 0..points {
                    let (j, t) = loc.at(q, h, l, k);
                    let a = wts.row(q)[j];
                    let dst = &mut out[q * c + h * d..q * c + (h + 1) * d];
                    for (corner, &tw) in t.idx.iter().zip(&t.w) {
                        let Some(p) = corner else { continue };
                        let src = &map[p * c + h * d..p * c + (h + 1) * d];
                        for (o, s) in dst.iter_mut().zip(src) {
                            *o += a * tw * s;
                        }
                    }
                }
            }
        }
    }
    let value = Tensor::new([m, c], out)?;

    let nviews = values.len();
    let view_of = view_of.to_vec();
    let mut inputs: Vec<&Var> = vec![offsets, weights];
    inputs.extend(values.iter().flatten());
    offsets.tape().custom(
        "deform_sample",
        &inputs,
        value,
        Box::new(move |g: &Tensor| {
            let mut d_off = vec![0.0; m * 2 * s];
            let mut d_w = vec![0.0; m * s];
            let mut d_vals: Vec<Vec<Vec<f64>>> = (0..nviews)
                .map(|v| (0..levels).map(|l| vec![0.0; vals[v][l].len()]).collect())
                .collect();
            for q in 0..m {
                let v = view_of[q];
                let gq = g.row(q);
                for h in 0..heads {
                    let gh = &gq[h * d..(h + 1) * d];
                    for l in 0..levels {
                        let map = vals[v][l].data();
                        let dmap = &mut d_vals[v][l];
                        for k in 0..points {
                            let (j, t) = loc.at(q, h, l, k);
                            let a = wts.row(q)[j];
                            let (mut dot, mut dx, mut dy) = (0.0, 0.0, 0.0);
                            for ci in 0..4 {
                                let Some(p) = t.idx[ci] else { continue };
                                let src = &map[p * c + h * d..p * c + (h + 1) * d];
                                let gs: f64 = gh.iter().zip(src).map(|(x, y)| x * y).sum();
                                dot += t.w[ci] * gs;
                                dx += t.dwdx[ci] * gs;
                                dy += t.dwdy[ci] * gs;
                                let dst = &mut dmap[p * c + h * d..p * c + (h + 1) * d];
                                for (o, gv) in dst.iter_mut().zip(gh) {
                                    *o += a * t.w[ci] * gv;
                                }
                            }
                            d_w[q * s + j] += dot;
                            d_off[q * 2 * s + 2 * j] += a * dx;
                            d_off[q * 2 * s + 2 * j + 1] += a * dy;
                        }
                    }
                }
            }
            let mut grads = vec![
                Some(Tensor::new([m, 2 * s], d_off).unwrap()),
                Some(Tensor::new([m, s], d_w).unwrap()),
            ];
            for (v, lv) in d_vals.into_iter().enumerate() {
                for (l, dv) in lv.into_iter().enumerate() {
                    let (hl, wl) = loc.dims[v][l];
                    grads.push(Some(Tensor::new([hl * wl, c], dv).unwrap()));
                }
            }
            grads
        }),
    )
}

/// Initial bias of the offset layer: head `h`'s points spread on rays at
/// angle `2πh/H`, point `k` at radius `k + 1` level pixels.
pub fn ring_offsets(layout: DeformLayout) -> Tensor {
    let DeformLayout { heads, levels, points } = layout;
    let mut b = Vec::with_capacity(2 * layout.samples());
    for h in 0..heads {
        let a = 2.0 * std::f64::consts::PI * h as f64 / heads as f64;
        for _ in 0..levels {
            for k in 0..points {
                b.push((k + 1) as f64 * a.cos());
                b.push((k + 1) as f64 * a.sin());
            }
        }
    }
    Tensor::new([1, 2 * layout.samples()], b).unwrap()
}

/// One deformable cross-attention block: offsets and per-head softmax
/// weights from the queries, sampling of projected features, output
/// projection, residual and layer norm. Parameters live under `prefix`.
pub fn deform_attn(
    q: &Var,
    pyramids: &[FeaturePyramid],
    view_of: &[usize],
    refs: &[[f64; 2]],
    p: &ParamVars,
    prefix: &str,
    layout: DeformLayout,
) -> Result<Var> {
    let tape = q.tape();
    let m = refs.len();
    let mut values = Vec::with_capacity(pyramids.len());
    let mut dims = Vec::with_capacity(pyramids.len());
    for pyr in pyramids {
        let mut lv = Vec::with_capacity(layout.levels);
        let mut ld = Vec::with_capacity(layout.levels);
        for f in pyr.levels.iter().take(layout.levels) {
            let flat = tape.constant(Tensor::new([f.height * f.width, f.channels], f.data.clone())?);
            lv.push(linear(&flat, p, &format!("{prefix}.value"))?);
            ld.push((f.height, f.width));
        }
        values.push(lv);
        dims.push(ld);
    }
    let offsets = linear(q, p, &format!("{prefix}.offset"))?;
    let logits = linear(q, p, &format!("{prefix}.attn"))?;
    let per_head = layout.levels * layout.points;
    let weights = logits
        .reshape([m * layout.heads, per_head])?
        .softmax()
        .reshape([m, layout.samples()])?;
    let sampled = deform_sample(&values, &dims, view_of, refs, &offsets, &weights, layout)?;
    let out = linear(&sampled, p, &format!("{prefix}.out"))?;
    layer_norm(&q.add(&out)?, p, &format!("{prefix}.ln"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::check::gradient_error;
    use crate::autodiff::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const LAYOUT: DeformLayout = DeformLayout {
        heads: 2,
        levels: 2,
        points: 3,
    };

    #[test]
    fn sample_at_grid_point_reads_the_stored_value() {
        let tape = Tape::new();
        // 2x3 map with 2 channels; one head, one level, one point.
        let layout = DeformLayout {
            heads: 1,
            levels: 1,
            points: 1,
        };
        let vals: Vec<f64> = (0..12).map(|i| i as f64).collect();
        let v = tape.constant(Tensor::new([6, 2], vals).unwrap());
        // Centre of pixel (x=2, y=1) is normalized (2.5/3, 1.5/2).
        let refs = [[2.5 / 3.0, 1.5 / 2.0]];
        let off = tape.constant(Tensor::zeros([1, 2]));
        let w = tape.constant(Tensor::ones([1, 1]));
        let out = deform_sample(&[vec![v]], &[vec![(2, 3)]], &[0], &refs, &off, &w, layout).unwrap();
        assert_eq!(out.value().data(), &[10.0, 11.0]);
    }

    #[test]
    fn constant_field_samples_the_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let tape = Tape::new();
        let c = 4;
        let dims = vec![vec![(8, 8), (4, 4)]];
        let vals = vec![vec![
            tape.constant(Tensor::new([64, c], [0.5, -1.0, 2.0, 3.0].repeat(64)).unwrap()),
            tape.constant(Tensor::new([16, c], [0.5, -1.0, 2.0, 3.0].repeat(16)).unwrap()),
        ]];
        let refs = [[0.5, 0.5], [0.4, 0.6]];
        let off = tape.constant(Tensor::uniform([2, 2 * LAYOUT.samples()], -0.9, 0.9, &mut rng));
        let w = tape.constant(Tensor::full([2, LAYOUT.samples()], 1.0 / 6.0));
        let out = deform_sample(&vals, &dims, &[0, 0], &refs, &off, &w, LAYOUT).unwrap();
        for r in 0..2 {
            for (a, b) in out.value().row(r).iter().zip([0.5, -1.0, 2.0, 3.0]) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn selector_weights_pick_one_sample() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let tape = Tape::new();
        let layout = DeformLayout {
            heads: 1,
            levels: 1,
            points: 3,
        };
        let v = Tensor::randn([25, 2], 1.0, &mut rng);
        let vv = tape.constant(v.clone());
        let off = Tensor::uniform([1, 6], -1.5, 1.5, &mut rng);
        let w = tape.constant(Tensor::new([1, 3], vec![0.0, 1.0, 0.0]).unwrap());
        let full = deform_sample(&[vec![vv.clone()]], &[vec![(5, 5)]], &[0], &[[0.5, 0.5]], &tape.constant(off.clone()), &w, layout)
            .unwrap();
        // Moving the unselected points changes nothing.
        let mut moved = off.clone();
        for j in [0, 1, 4, 5] {
            moved.data_mut()[j] += 0.7;
        }
        let again = deform_sample(&[vec![vv]], &[vec![(5, 5)]], &[0], &[[0.5, 0.5]], &tape.constant(moved), &w, layout).unwrap();
        assert_eq!(full.value(), again.value());
    }

    #[test]
    fn out_of_image_samples_read_zero() {
        let tape = Tape::new();
        let layout = DeformLayout {
            heads: 1,
            levels: 1,
            points: 1,
        };
        let v = tape.constant(Tensor::ones([4, 1]));
        let off = tape.constant(Tensor::new([1, 2], vec![10.0, 0.0]).unwrap());
        let w = tape.constant(Tensor::ones([1, 1]));
        let out = deform_sample(&[vec![v]], &[vec![(2, 2)]], &[0], &[[0.5, 0.5]], &off, &w, layout).unwrap();
        assert_eq!(out.value().data(), &[0.0]);
    }

    #[test]
    fn sampling_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c = 4;
        let m = 3;
        let dims = vec![vec![(6, 5), (3, 2)], vec![(6, 5), (3, 2)]];
        let refs = [[0.3, 0.6], [0.55, 0.45], [0.8, 0.2]];
        let view_of = [0, 1, 1];
        let s = LAYOUT.samples();
        for _ in 0..10 {
            let off = Tensor::uniform([m, 2 * s], -1.8, 1.8, &mut rng);
            let inputs = vec![
                off,
                Tensor::uniform([m, s], 0.0, 1.0, &mut rng),
                Tensor::randn([30, c], 1.0, &mut rng),
                Tensor::randn([6, c], 1.0, &mut rng),
                Tensor::randn([30, c], 1.0, &mut rng),
                Tensor::randn([6, c], 1.0, &mut rng),
            ];
            let wsum = Tensor::randn([m, c], 1.0, &mut rng);
            let build = |tape: &Tape, v: &[Var]| {
                let values = vec![vec![v[2].clone(), v[3].clone()], vec![v[4].clone(), v[5].clone()]];
                let out = deform_sample(&values, &dims, &view_of, &refs, &v[0], &v[1], LAYOUT)?;
                Ok(out.mul(&tape.constant(wsum.clone()))?.sum())
            };
            let err = gradient_error(&build, &inputs, 1e-6).unwrap();
            assert!(err < 1e-6, "rel err {err}");
        }
    }
}
