//! The Gaussian transformer: learnable queries refined by deformable
//! cross-attention over per-view features, 3D self-attention and an MLP
//! head that updates Gaussian parameters layer by layer.

mod attention;
mod deform;
mod head;
mod layers;
mod params;

pub use attention::self_attn;
pub use deform::{deform_attn, deform_sample, ring_offsets, DeformLayout, FeaturePyramid};
pub use head::{gaussian_head, HeadOutput, GEOM_OUTPUTS};
pub use layers::{layer_norm, linear, positional_encoding};
pub use params::{ParamStore, ParamVars, WeightsManifest};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::gaussians::{init_from_depth, Gaussian, GaussianSet, InitialGaussian, SCALE_MAX, SCALE_MIN};
use crate::geometry::{Camera, Quaternion};
use crate::maps::{DepthMap, FeatureMap};
use crate::tensor::Tensor;

/// Architecture hyper-parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub queries_per_view: usize,
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub levels: usize,
    pub points: usize,
    /// Bound on the per-layer mean update, metres.
    pub delta_mean_max: f64,
    /// Initial isotropic scale as a fraction of the sampled depth.
    pub s0_factor: f64,
    /// Box used to normalize positions for the positional encoding.
    pub pe_min: [f64; 3],
    pub pe_max: [f64; 3],
    /// Seed of the query pixel layout.
    pub seed: u64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            queries_per_view: 300,
            layers: 3,
            dim: 256,
            heads: 4,
            levels: 2,
            points: 4,
            delta_mean_max: 2.0,
            s0_factor: 0.05,
            pe_min: [-8.0, -8.0, 0.0],
            pe_max: [8.0, 8.0, 3.2],
            seed: 0,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.queries_per_view == 0 || self.layers == 0 || self.dim == 0 {
            return bad("queries_per_view, layers and dim must be positive".into());
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return bad(format!("dim {} must be divisible by heads {}", self.dim, self.heads));
        }
        if self.levels == 0 || self.points == 0 {
            return bad("levels and points must be positive".into());
        }
        if !(self.delta_mean_max > 0.0) || !(self.s0_factor > 0.0) {
            return bad("delta_mean_max and s0_factor must be positive".into());
        }
        if (0..3).any(|a| !(self.pe_max[a] > self.pe_min[a])) {
            return bad("positional-encoding bounds must be non-empty".into());
        }
        Ok(())
    }

    pub fn layout(&self) -> DeformLayout {
        DeformLayout {
            heads: self.heads,
            levels: self.levels,
            points: self.points,
        }
    }
}

/// Per-view network input.
#[derive(Debug, Clone)]
pub struct ViewInput {
    /// Features at network resolution, `dim` channels.
    pub features: FeatureMap,
    /// Depth at the same resolution as `features`.
    pub depth: DepthMap,
    /// Camera of the full-resolution input image.
    pub cam: Camera,
}

fn random_linear(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, fan_in: usize, fan_out: usize) {
    store.insert(format!("{name}.w"), Tensor::randn([fan_in, fan_out], 1.0 / (fan_in as f64).sqrt(), rng));
    store.insert(format!("{name}.b"), Tensor::zeros([1, fan_out]));
}

fn zero_linear(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize) {
    store.insert(format!("{name}.w"), Tensor::zeros([fan_in, fan_out]));
    store.insert(format!("{name}.b"), Tensor::zeros([1, fan_out]));
}

fn norm(store: &mut ParamStore, name: &str, c: usize) {
    store.insert(format!("{name}.g"), Tensor::ones([1, c]));
    store.insert(format!("{name}.b"), Tensor::zeros([1, c]));
}

/// Fresh weights. Offset and attention-weight layers start at zero (with a
/// ring of offsets in the bias, so sampling starts uniform over
/// `levels·points` taps) and the final head layer starts at zero, so an
/// untrained network reproduces the depth initialization.
pub fn init_params(cfg: &NetConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = cfg.dim;
    let layout = cfg.layout();
    let mut s = ParamStore::default();
    s.insert("queries", Tensor::randn([cfg.queries_per_view, c], 1.0, &mut rng));
    for l in 0..cfg.layers {
        let d = format!("l{l}.deform");
        random_linear(&mut s, &mut rng, &format!("{d}.value"), c, c);
        zero_linear(&mut s, &format!("{d}.offset"), c, 2 * layout.samples());
        s.insert(format!("{d}.offset.b"), ring_offsets(layout));
        zero_linear(&mut s, &format!("{d}.attn"), c, layout.samples());
        random_linear(&mut s, &mut rng, &format!("{d}.out"), c, c);
        norm(&mut s, &format!("{d}.ln"), c);
        let a = format!("l{l}.self");
        for k in ["q", "k", "v", "o"] {
            random_linear(&mut s, &mut rng, &format!("{a}.{k}"), c, c);
        }
        norm(&mut s, &format!("{a}.ln"), c);
        let h = format!("l{l}.head");
        random_linear(&mut s, &mut rng, &format!("{h}.w1"), c, c);
        zero_linear(&mut s, &format!("{h}.w2"), c, GEOM_OUTPUTS + c);
    }
    Ok(s)
}

/// Stratified, jittered pixel positions for `n` queries on a
/// `width x height` image, deterministic in `(seed, view)`.
pub fn query_positions(n: usize, width: usize, height: usize, seed: u64, view: usize) -> Vec<[f64; 2]> {
    let (w, h) = (width as f64, height as f64);
    let gx = ((n as f64 * w / h).sqrt().ceil() as usize).max(1);
    let gy = n.div_ceil(gx).max(1);
    let cells = gx * gy;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(view as u64 + 1);
    (0..n)
        .map(|i| {
            let cell = i * cells / n;
            let (cx, cy) = (cell % gx, cell / gx);
            let u: f64 = rng.random();
            let v: f64 = rng.random();
            [(cx as f64 + u) * w / gx as f64, (cy as f64 + v) * h / gy as f64]
        })
        .collect()
}

/// Differentiable Gaussian parameters for every query of every view,
/// stacked view by view.
pub struct NetOutput {
    pub means: Var,
    pub scales: Var,
    /// Unit quaternions `(w, x, y, z)`.
    pub quats: Var,
    /// `M x 1`, zero for inactive queries.
    pub opacities: Var,
    pub feats: Var,
    pub init: Vec<InitialGaussian>,
    pub source_view: Vec<usize>,
    pub queries_per_view: usize,
}

impl NetOutput {
    pub fn len(&self) -> usize {
        self.init.len()
    }

    pub fn is_empty(&self) -> bool {
        self.init.is_empty()
    }

    pub fn to_gaussian_set(&self) -> Result<GaussianSet> {
        let (m, c) = (self.len(), self.feats.value().last_dim());
        let (mu, s, q, a, f) = (
            self.means.value(),
            self.scales.value(),
            self.quats.value(),
            self.opacities.value(),
            self.feats.value(),
        );
        let gaussians = (0..m)
            .map(|i| Gaussian {
                mean: [mu.row(i)[0], mu.row(i)[1], mu.row(i)[2]],
                scale: [s.row(i)[0], s.row(i)[1], s.row(i)[2]],
                rot: Quaternion::from_array([q.row(i)[0], q.row(i)[1], q.row(i)[2], q.row(i)[3]]),
                opacity: a.data()[i],
                feat: f.row(i).to_vec(),
            })
            .collect();
        let set = GaussianSet {
            gaussians,
            source_view: self.source_view.clone(),
            feat_dim: c,
            queries_per_view: self.queries_per_view,
            num_views: self.source_view.iter().max().map_or(0, |v| v + 1),
        };
        set.validate()?;
        Ok(set)
    }
}

/// Run the network on all views of one scene.
pub fn forward(cfg: &NetConfig, p: &ParamVars, views: &[ViewInput]) -> Result<NetOutput> {
    cfg.validate()?;
    if views.is_empty() {
        return Err(Error::Data("forward needs at least one view".into()));
    }
    let n = cfg.queries_per_view;
    let m = n * views.len();
    let queries = p.get("queries")?;
    if queries.shape() != [n, cfg.dim] {
        return Err(Error::Dimension(format!(
            "queries have shape {:?}, config expects [{n}, {}]",
            queries.shape(),
            cfg.dim
        )));
    }
    let tape = queries.tape().clone();
    let mut refs = Vec::with_capacity(m);
    let mut view_of = Vec::with_capacity(m);
    let mut init = Vec::with_capacity(m);
    let mut pyramids = Vec::with_capacity(views.len());
    for (v, view) in views.iter().enumerate() {
        let f = &view.features;
        if f.channels != cfg.dim {
            return Err(Error::Dimension(format!("view {v} features have {} channels, expected {}", f.channels, cfg.dim)));
        }
        if (view.depth.height, view.depth.width) != (f.height, f.width) {
            return Err(Error::Dimension(format!("view {v} depth and feature maps differ in size")));
        }
        let (w, h) = (view.cam.width(), view.cam.height());
        let pos = query_positions(n, w, h, cfg.seed, v);
        init.extend(init_from_depth(&pos, &view.depth, &view.cam, cfg.s0_factor)?);
        refs.extend(pos.iter().map(|p| [p[0] / w as f64, p[1] / h as f64]));
        view_of.extend(std::iter::repeat_n(v, n));
        pyramids.push(FeaturePyramid::build(f, cfg.levels)?);
    }

    let column = |k: usize, get: &dyn Fn(&InitialGaussian) -> Vec<f64>| -> Result<Var> {
        Ok(tape.constant(Tensor::new([m, k], init.iter().flat_map(get).collect())?))
    };
    let mut means = column(3, &|g| g.mean.to_vec())?;
    let mut scales = column(3, &|g| g.scale.to_vec())?;
    let mut quats = column(4, &|g| g.rot.to_array().to_vec())?;
    let active = column(1, &|g| vec![if g.active { 1.0 } else { 0.0 }])?;

    let tile: Vec<usize> = (0..views.len()).flat_map(|_| 0..n).collect();
    let mut q = queries.gather_rows(&tile)?;
    let mut out = None;
    for l in 0..cfg.layers {
        q = deform_attn(&q, &pyramids, &view_of, &refs, p, &format!("l{l}.deform"), cfg.layout())?;
        let pe = positional_encoding(&means, (cfg.pe_min, cfg.pe_max), cfg.dim)?;
        q = self_attn(&q, &pe, p, &format!("l{l}.self"), cfg.heads)?;
        let h = gaussian_head(&q, p, &format!("l{l}.head"), cfg.delta_mean_max)?;
        means = means.add(&h.delta_mean)?;
        let raw = quats.add(&h.delta_rot)?;
        quats = raw.div(&raw.square().sum_axis(1)?.sqrt()?)?;
        scales = scales.mul(&h.delta_scale.exp())?.clamp(SCALE_MIN, SCALE_MAX);
        out = Some((h.opacity.mul(&active)?, h.feat));
    }
    let (opacities, feats) = out.expect("at least one layer");
    Ok(NetOutput {
        means,
        scales,
        quats,
        opacities,
        feats,
        init,
        source_view: view_of,
        queries_per_view: n,
    })
}

/// Inference: run the network with frozen weights and return plain Gaussians.
pub fn predict(cfg: &NetConfig, params: &ParamStore, views: &[ViewInput]) -> Result<GaussianSet> {
    let tape = crate::autodiff::Tape::new();
    forward(cfg, &params.constants(&tape), views)?.to_gaussian_set()
}
