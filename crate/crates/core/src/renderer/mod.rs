//! Tile-based alpha-blending splatter for Gaussian features and depth.

mod backward;
mod op;
mod project;
mod raster;

pub use backward::{render_backward, RenderGrads};
pub use op::render_var;
pub use project::{project_gaussian, ProjectedGaussian};
pub use raster::{prepare, rasterize, render, render_brute_force, RenderState, RenderedView};

/// Low-pass term added to every projected covariance, px².
pub const COV2D_EPS: f64 = 0.3;
pub const TILE_SIZE: usize = 16;
/// Effective opacity is clipped here so `1 - α` never vanishes.
pub const ALPHA_MAX: f64 = 0.999;
/// Compositing stops once transmittance falls below this.
pub const T_MIN: f64 = 1e-4;
