use super::layers::{layer_norm, linear};
use super::params::ParamVars;
use crate::autodiff::{concat_cols, Var};
use crate::error::{Error, Result};

/// Multi-head self-attention over all rows of `q`, with `pe` added to
/// queries and keys only, then residual and layer norm.
pub fn self_attn(q: &Var, pe: &Var, p: &ParamVars, prefix: &str, heads: usize) -> Result<Var> {
    let c = q.value().last_dim();
    if c % heads != 0 {
        return Err(Error::Dimension(format!("dim {c} not divisible by {heads} heads")));
    }
    let d = c / heads;
    let x = q.add(pe)?;
    let qs = linear(&x, p, &format!("{prefix}.q"))?;
    let ks = linear(&x, p, &format!("{prefix}.k"))?;
    let vs = linear(q, p, &format!("{prefix}.v"))?;
    let scale = 1.0 / (d as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (a, b) = (h * d, (h + 1) * d);
        let scores = qs.narrow_cols(a, b)?.matmul(&ks.narrow_cols(a, b)?.transpose()?)?.mul_scalar(scale);
        outs.push(scores.softmax().matmul(&vs.narrow_cols(a, b)?)?);
    }
    let merged = concat_cols(&outs.iter().collect::<Vec<_>>())?;
    let out = linear(&merged, p, &format!("{prefix}.o"))?;
    layer_norm(&q.add(&out)?, p, &format!("{prefix}.ln"))
}
