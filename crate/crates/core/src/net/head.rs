use super::layers::linear;
use super::params::ParamVars;
use crate::autodiff::Var;
use crate::error::Result;

/// Raw outputs per query before `Δμ` scaling: 3 + 4 + 3 + 1 + C columns.
pub const GEOM_OUTPUTS: usize = 11;

/// Per-query predictions of one Gaussian head.
pub struct HeadOutput {
    /// `tanh(·)·Δμ_max`, metres.
    pub delta_mean: Var,
    pub delta_rot: Var,
    /// Log-space scale update.
    pub delta_scale: Var,
    /// Sigmoid opacity, `N x 1`.
    pub opacity: Var,
    pub feat: Var,
}

/// Two-layer MLP head: `relu(q W1 + b1) W2 + b2`, split into the Gaussian
/// updates.
pub fn gaussian_head(q: &Var, p: &ParamVars, prefix: &str, delta_mean_max: f64) -> Result<HeadOutput> {
    let h = linear(q, p, &format!("{prefix}.w1"))?.relu();
    let o = linear(&h, p, &format!("{prefix}.w2"))?;
    let width = o.value().last_dim();
    Ok(HeadOutput {
        delta_mean: o.narrow_cols(0, 3)?.tanh().mul_scalar(delta_mean_max),
        delta_rot: o.narrow_cols(3, 7)?,
        delta_scale: o.narrow_cols(7, 10)?,
        opacity: o.narrow_cols(10, 11)?.sigmoid(),
        feat: o.narrow_cols(GEOM_OUTPUTS, width)?,
    })
}
