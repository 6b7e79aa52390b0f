//! The Gaussian scene representation.
//!
//! Each Gaussian carries a mean, per-axis scale, rotation, opacity and a
//! feature vector. Sets are initialized by unprojecting depth at query
//! pixels and then refined with predicted deltas.

use std::fs;
use std::path::Path;

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{assemble_covariance, Camera, Quaternion};
use crate::io::{read_tensor, write_tensor};
use crate::maps::DepthMap;
use crate::tensor::Tensor;

/// Default bounds for the scale clamp applied after each refinement, metres.
pub const SCALE_MIN: f64 = 0.01;
pub const SCALE_MAX: f64 = 10.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian {
    pub mean: [f64; 3],
    pub scale: [f64; 3],
    pub rot: Quaternion,
    pub opacity: f64,
    pub feat: Vec<f64>,
}

impl Gaussian {
    pub fn validate(&self) -> Result<()> {
        let finite = self.mean.iter().chain(&self.scale).chain(&self.feat).all(|v| v.is_finite())
            && self.rot.to_array().iter().all(|v| v.is_finite())
            && self.opacity.is_finite();
        if !finite {
            return Err(Error::Domain("non-finite Gaussian parameter".into()));
        }
        if !(0.0..=1.0).contains(&self.opacity) {
            return Err(Error::Domain(format!("opacity {} outside [0, 1]", self.opacity)));
        }
        if self.scale.iter().any(|&s| s <= 0.0) {
            return Err(Error::Domain(format!("non-positive scale {:?}", self.scale)));
        }
        if (self.rot.norm() - 1.0).abs() > 1e-6 {
            return Err(Error::Domain(format!("rotation not unit: |q| = {}", self.rot.norm())));
        }
        Ok(())
    }

    /// Unnormalized density `exp(-½ (x-μ)ᵀ Σ⁻¹ (x-μ))`, equal to 1 at the mean.
    pub fn density_at(&self, x: [f64; 3]) -> Result<f64> {
        let cov = assemble_covariance(self.scale, self.rot)?;
        let chol = cov
            .cholesky()
            .ok_or_else(|| Error::Domain("covariance is not positive definite".into()))?;
        let d = Vector3::from(x) - Vector3::from(self.mean);
        let m = d.dot(&chol.solve(&d));
        Ok((-0.5 * m).exp())
    }
}

/// Predicted per-Gaussian updates from one transformer layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Refinement {
    pub delta_mean: [f64; 3],
    pub delta_rot: [f64; 4],
    /// Log-space scale update.
    pub delta_log_scale: [f64; 3],
}

impl Refinement {
    pub const ZERO: Self = Self {
        delta_mean: [0.0; 3],
        delta_rot: [0.0; 4],
        delta_log_scale: [0.0; 3],
    };
}

/// `μ ← μ + Δμ`, `R ← normalize(R + ΔR)`, `S ← clamp(S · exp(ΔS))`.
pub fn apply_refinement(g: &Gaussian, r: &Refinement, scale_min: f64, scale_max: f64) -> Result<Gaussian> {
    let mut out = g.clone();
    for i in 0..3 {
        out.mean[i] += r.delta_mean[i];
        out.scale[i] = (g.scale[i] * r.delta_log_scale[i].exp()).clamp(scale_min, scale_max);
    }
    let q = g.rot.to_array();
    let sum = Quaternion::new(
        q[0] + r.delta_rot[0],
        q[1] + r.delta_rot[1],
        q[2] + r.delta_rot[2],
        q[3] + r.delta_rot[3],
    );
    // A delta that cancels the rotation exactly keeps the previous one.
    out.rot = sum.normalized().or_else(|_| g.rot.normalized())?;
    Ok(out)
}

/// Geometric initialization of one query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitialGaussian {
    pub mean: [f64; 3],
    pub scale: [f64; 3],
    pub rot: Quaternion,
    /// False when no valid depth was found; such queries render with zero opacity.
    pub active: bool,
    pub depth: f64,
}

/// Unproject query pixels at their nearest-pixel depth. Scale is isotropic,
/// `s0_factor · depth`; rotation is the camera-to-world rotation of `cam`.
pub fn init_from_depth(
    mu2d: &[[f64; 2]],
    depth_map: &DepthMap,
    cam: &Camera,
    s0_factor: f64,
) -> Result<Vec<InitialGaussian>> {
    if !(s0_factor > 0.0) {
        return Err(Error::Domain(format!("s0_factor must be positive, got {s0_factor}")));
    }
    let rot = Quaternion::from_rotation_matrix(&cam.rotation().transpose());
    mu2d.iter()
        .map(|p| {
            let sampled = depth_map
                .sample_nearest(*p, cam.width(), cam.height())
                .filter(|d| *d > 0.0 && d.is_finite());
            match sampled {
                Some(d) => {
                    let m = cam.unproject(&Vector2::new(p[0], p[1]), d)?;
                    let s = s0_factor * d;
                    Ok(InitialGaussian {
                        mean: [m.x, m.y, m.z],
                        scale: [s; 3],
                        rot,
                        active: true,
                        depth: d,
                    })
                }
                None => {
                    // Park inactive queries on the camera centre; their opacity is forced to 0.
                    let c = cam.center();
                    Ok(InitialGaussian {
                        mean: [c.x, c.y, c.z],
                        scale: [s0_factor; 3],
                        rot,
                        active: false,
                        depth: 0.0,
                    })
                }
            }
        })
        .collect()
}

/// Gaussians predicted for a scene, grouped by source view.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianSet {
    pub gaussians: Vec<Gaussian>,
    pub source_view: Vec<usize>,
    pub feat_dim: usize,
    pub queries_per_view: usize,
    pub num_views: usize,
}

/// Structure-of-arrays view of Gaussian parameters, as consumed by the
/// renderer and voxelizer.
#[derive(Debug, Clone, Copy)]
pub struct GaussianParams<'a> {
    pub means: &'a [f64],
    pub scales: &'a [f64],
    pub quats: &'a [f64],
    pub opacities: &'a [f64],
    pub feats: &'a [f64],
    pub feat_dim: usize,
}

impl GaussianParams<'_> {
    pub fn len(&self) -> usize {
        self.opacities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.opacities.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if self.means.len() != 3 * n
            || self.scales.len() != 3 * n
            || self.quats.len() != 4 * n
            || self.feats.len() != self.feat_dim * n
        {
            return Err(Error::Dimension(format!(
                "inconsistent Gaussian parameter lengths for {n} Gaussians"
            )));
        }
        Ok(())
    }

    pub fn mean(&self, i: usize) -> [f64; 3] {
        [self.means[3 * i], self.means[3 * i + 1], self.means[3 * i + 2]]
    }

    pub fn scale(&self, i: usize) -> [f64; 3] {
        [self.scales[3 * i], self.scales[3 * i + 1], self.scales[3 * i + 2]]
    }

    pub fn quat(&self, i: usize) -> Quaternion {
        Quaternion::new(
            self.quats[4 * i],
            self.quats[4 * i + 1],
            self.quats[4 * i + 2],
            self.quats[4 * i + 3],
        )
    }

    pub fn feat(&self, i: usize) -> &[f64] {
        &self.feats[i * self.feat_dim..(i + 1) * self.feat_dim]
    }
}

/// Owned structure-of-arrays Gaussian parameters.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GaussianArrays {
    pub means: Vec<f64>,
    pub scales: Vec<f64>,
    pub quats: Vec<f64>,
    pub opacities: Vec<f64>,
    pub feats: Vec<f64>,
    pub feat_dim: usize,
}

impl GaussianArrays {
    pub fn params(&self) -> GaussianParams<'_> {
        GaussianParams {
            means: &self.means,
            scales: &self.scales,
            quats: &self.quats,
            opacities: &self.opacities,
            feats: &self.feats,
            feat_dim: self.feat_dim,
        }
    }

    pub fn from_gaussians(gs: &[Gaussian], feat_dim: usize) -> Self {
        let mut a = Self {
            feat_dim,
            ..Default::default()
        };
        for g in gs {
            a.push(g);
        }
        a
    }

    pub fn push(&mut self, g: &Gaussian) {
        self.means.extend_from_slice(&g.mean);
        self.scales.extend_from_slice(&g.scale);
        self.quats.extend_from_slice(&g.rot.to_array());
        self.opacities.push(g.opacity);
        self.feats.extend_from_slice(&g.feat);
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct GaussianSetManifest {
    #[serde(rename = "N")]
    pub queries_per_view: usize,
    #[serde(rename = "V")]
    pub num_views: usize,
    #[serde(rename = "C")]
    pub feat_dim: usize,
    #[serde(default)]
    pub config_hash: String,
}

impl GaussianSet {
    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn empty(feat_dim: usize) -> Self {
        Self {
            gaussians: Vec::new(),
            source_view: Vec::new(),
            feat_dim,
            queries_per_view: 0,
            num_views: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.gaussians.len() != self.queries_per_view * self.num_views
            || self.source_view.len() != self.gaussians.len()
        {
            return Err(Error::Dimension(format!(
                "{} Gaussians for {} views x {} queries",
                self.gaussians.len(),
                self.num_views,
                self.queries_per_view
            )));
        }
        for g in &self.gaussians {
            if g.feat.len() != self.feat_dim {
                return Err(Error::Dimension("feature length differs from C".into()));
            }
            g.validate()?;
        }
        Ok(())
    }

    pub fn arrays(&self) -> GaussianArrays {
        GaussianArrays::from_gaussians(&self.gaussians, self.feat_dim)
    }

    /// Write one GTSR block per property plus a `gaussians.json` sidecar.
    pub fn save(&self, dir: &Path, config_hash: &str) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let n = self.len();
        let a = self.arrays();
        write_tensor(&dir.join("means.gtsr"), &Tensor::new([n, 3], a.means)?)?;
        write_tensor(&dir.join("scales.gtsr"), &Tensor::new([n, 3], a.scales)?)?;
        write_tensor(&dir.join("rotations.gtsr"), &Tensor::new([n, 4], a.quats)?)?;
        write_tensor(&dir.join("opacities.gtsr"), &Tensor::new([n], a.opacities)?)?;
        write_tensor(&dir.join("features.gtsr"), &Tensor::new([n, self.feat_dim], a.feats)?)?;
        let views = self.source_view.iter().map(|&v| v as f64).collect();
        write_tensor(&dir.join("source_view.gtsr"), &Tensor::new([n], views)?)?;
        let manifest = GaussianSetManifest {
            queries_per_view: self.queries_per_view,
            num_views: self.num_views,
            feat_dim: self.feat_dim,
            config_hash: config_hash.to_string(),
        };
        let path = dir.join("gaussians.json");
        fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<(Self, GaussianSetManifest)> {
        let path = dir.join("gaussians.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: GaussianSetManifest = serde_json::from_str(&text)?;
        let means = read_tensor(&dir.join("means.gtsr"))?;
        let scales = read_tensor(&dir.join("scales.gtsr"))?;
        let rots = read_tensor(&dir.join("rotations.gtsr"))?;
        let ops = read_tensor(&dir.join("opacities.gtsr"))?;
        let feats = read_tensor(&dir.join("features.gtsr"))?;
        let views = read_tensor(&dir.join("source_view.gtsr"))?;
        let n = ops.len();
        let c = m.feat_dim;
        if means.len() != 3 * n || scales.len() != 3 * n || rots.len() != 4 * n || feats.len() != c * n || views.len() != n {
            return Err(Error::Data("Gaussian property blocks disagree in length".into()));
        }
        let gaussians = (0..n)
            .map(|i| Gaussian {
                mean: means.data()[3 * i..3 * i + 3].try_into().unwrap(),
                scale: scales.data()[3 * i..3 * i + 3].try_into().unwrap(),
                rot: Quaternion::from_array(rots.data()[4 * i..4 * i + 4].try_into().unwrap()),
                opacity: ops.data()[i],
                feat: feats.data()[c * i..c * (i + 1)].to_vec(),
            })
            .collect();
        let set = Self {
            gaussians,
            source_view: views.data().iter().map(|&v| v as usize).collect(),
            feat_dim: c,
            queries_per_view: m.queries_per_view,
            num_views: m.num_views,
        };
        set.validate().map_err(|e| Error::Data(format!("invalid Gaussian set: {e}")))?;
        Ok((set, m))
    }
}
