use std::rc::Rc;

use super::backward::render_backward;
use super::raster::{prepare, rasterize, RenderedView};
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::gaussians::GaussianArrays;
use crate::geometry::Camera;
use crate::tensor::Tensor;

/// Differentiable render of one view.
///
/// Inputs are `means [N,3]`, `scales [N,3]`, `quats [N,4]` (any non-zero
/// norm), `opacities [N,1]` and `feats [N,C]`. The output is
/// `[H*W, C+1]`: blended features followed by depth. Transmittance is
/// returned alongside and carries no gradient.
pub fn render_var(
    means: &Var,
    scales: &Var,
    quats: &Var,
    opacities: &Var,
    feats: &Var,
    cam: &Camera,
    height: usize,
    width: usize,
) -> Result<(Var, RenderedView)> {
    let n = means.shape().first().copied().unwrap_or(0);
    let c = feats.value().last_dim();
    let expect = [(means, 3), (scales, 3), (quats, 4), (opacities, 1), (feats, c)];
    for (v, k) in expect {
        if v.shape() != [n, k] {
            return Err(Error::Dimension(format!(
                "render input has shape {:?}, expected [{n}, {k}]",
                v.shape()
            )));
        }
    }
    let arrays = Rc::new(GaussianArrays {
        means: means.value().data().to_vec(),
        scales: scales.value().data().to_vec(),
        quats: quats.value().data().to_vec(),
        opacities: opacities.value().data().to_vec(),
        feats: feats.value().data().to_vec(),
        feat_dim: c,
    });
    let state = Rc::new(prepare(&arrays.params(), cam, height, width)?);
    let view = rasterize(&state, &arrays.params());
    let hw = height * width;
    let mut out = Vec::with_capacity(hw * (c + 1));
    for p in 0..hw {
        out.extend_from_slice(&view.feat[p * c..(p + 1) * c]);
        out.push(view.depth[p]);
    }
    let value = Tensor::new([hw, c + 1], out)?;
    let var = means.tape().custom(
        "render",
        &[means, scales, quats, opacities, feats],
        value,
        Box::new(move |g: &Tensor| {
            let mut gf = Vec::with_capacity(hw * c);
            let mut gd = Vec::with_capacity(hw);
            for row in g.data().chunks_exact(c + 1) {
                gf.extend_from_slice(&row[..c]);
                gd.push(row[c]);
            }
            let r = render_backward(&state, &arrays.params(), &gf, &gd)
                .expect("render backward on a validated forward state");
            vec![
                Some(Tensor::new([n, 3], r.means).unwrap()),
                Some(Tensor::new([n, 3], r.scales).unwrap()),
                Some(Tensor::new([n, 4], r.quats).unwrap()),
                Some(Tensor::new([n, 1], r.opacities).unwrap()),
                Some(Tensor::new([n, c], r.feats).unwrap()),
            ]
        }),
    )?;
    Ok((var, view))
}
