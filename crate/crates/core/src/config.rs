//! Flat run configuration shared by every pipeline stage.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::net::NetConfig;
use crate::occupancy::{GridSpec, TAU_OCC};
use crate::training::{SceneConfig, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Scenes generated by `synth`; scene k uses seed + k.
    pub scenes: usize,

    pub views: usize,
    pub image_width: usize,
    pub image_height: usize,
    pub render_downsample: usize,
    pub hfov_deg: f64,
    pub noise_sigma: f64,
    pub camera_radius: f64,
    pub camera_height: f64,
    pub box_side: [f64; 2],
    pub box_height: [f64; 2],
    pub grid_min: [f64; 3],
    pub grid_max: [f64; 3],
    pub voxel: f64,

    pub queries_per_view: usize,
    pub layers: usize,
    #[serde(rename = "C", alias = "dim")]
    pub dim: usize,
    pub heads: usize,
    pub levels: usize,
    pub points: usize,
    pub delta_mean_max: f64,
    pub s0_factor: f64,

    #[serde(rename = "C_R", alias = "c_r")]
    pub c_r: usize,
    pub lr: f64,
    pub steps: usize,
    pub batch: usize,
    pub seg_aug: bool,
    pub pca_samples: usize,
    pub clip: f64,
    pub seg_hidden: usize,
    pub cover_threshold: f64,

    pub tau_occ: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let s = SceneConfig::default();
        let n = NetConfig::default();
        let t = TrainConfig::default();
        Self {
            seed: 0,
            scenes: 1,
            views: s.num_views,
            image_width: s.image_width,
            image_height: s.image_height,
            render_downsample: s.downsample,
            hfov_deg: s.hfov_deg,
            noise_sigma: s.noise_sigma,
            camera_radius: s.camera_radius,
            camera_height: s.camera_height,
            box_side: s.box_side,
            box_height: s.box_height,
            grid_min: s.grid.min,
            grid_max: s.grid.max,
            voxel: s.grid.voxel,
            queries_per_view: n.queries_per_view,
            layers: n.layers,
            dim: n.dim,
            heads: n.heads,
            levels: n.levels,
            points: n.points,
            delta_mean_max: n.delta_mean_max,
            s0_factor: n.s0_factor,
            c_r: t.c_r,
            lr: t.lr,
            steps: t.steps,
            batch: t.batch,
            seg_aug: t.seg_aug,
            pca_samples: t.pca_samples,
            clip: t.clip,
            seg_hidden: t.seg_hidden,
            cover_threshold: t.cover_threshold,
            tau_occ: TAU_OCC,
        }
    }
}

impl RunConfig {
    /// Parse TOML, or JSON when the extension is `.json`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        } else {
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn keys() -> Vec<String> {
        match serde_json::to_value(Self::default()) {
            Ok(serde_json::Value::Object(m)) => m.keys().cloned().collect(),
            _ => Vec::new(),
        }
    }

    /// Apply `key = value` overrides. Values are read as JSON and fall back
    /// to a plain string, so `8`, `true`, `[1, 2]` and `2e-4` all work.
    pub fn with_overrides<K: AsRef<str>, V: AsRef<str>>(&self, pairs: &[(K, V)]) -> Result<Self> {
        let mut v = serde_json::to_value(self)?;
        let map = v.as_object_mut().expect("config serializes to an object");
        for (k, val) in pairs {
            let k = match k.as_ref() {
                "dim" => "C",
                "c_r" => "C_R",
                other => other,
            };
            if !map.contains_key(k) {
                return Err(Error::Config(format!("unknown config key `{k}`")));
            }
            let parsed = serde_json::from_str(val.as_ref())
                .unwrap_or_else(|_| serde_json::Value::String(val.as_ref().to_string()));
            map.insert(k.to_string(), parsed);
        }
        let cfg: Self = serde_json::from_value(v).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.scenes == 0 {
            return Err(Error::Config("scenes must be at least 1".into()));
        }
        if !(self.tau_occ > 0.0) || !self.tau_occ.is_finite() {
            return Err(Error::Config("tau_occ must be positive".into()));
        }
        if self.c_r > self.dim {
            return Err(Error::Config(format!("C_R = {} exceeds C = {}", self.c_r, self.dim)));
        }
        self.grid().validate().map_err(|e| Error::Config(e.to_string()))?;
        self.scene_config().validate()?;
        self.net_config().validate()?;
        self.train_config().validate()
    }

    pub fn grid(&self) -> GridSpec {
        GridSpec {
            min: self.grid_min,
            max: self.grid_max,
            voxel: self.voxel,
        }
    }

    pub fn scene_seed(&self, k: usize) -> u64 {
        self.seed.wrapping_add(k as u64)
    }

    pub fn scene_config(&self) -> SceneConfig {
        SceneConfig {
            num_views: self.views,
            feat_dim: self.dim,
            image_width: self.image_width,
            image_height: self.image_height,
            downsample: self.render_downsample,
            hfov_deg: self.hfov_deg,
            noise_sigma: self.noise_sigma,
            camera_radius: self.camera_radius,
            camera_height: self.camera_height,
            box_side: self.box_side,
            box_height: self.box_height,
            grid: self.grid(),
        }
    }

    pub fn net_config(&self) -> NetConfig {
        NetConfig {
            queries_per_view: self.queries_per_view,
            layers: self.layers,
            dim: self.dim,
            heads: self.heads,
            levels: self.levels,
            points: self.points,
            delta_mean_max: self.delta_mean_max,
            s0_factor: self.s0_factor,
            pe_min: self.grid_min,
            pe_max: self.grid_max,
            seed: self.seed,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            steps: self.steps,
            batch: self.batch,
            seed: self.seed,
            seg_aug: self.seg_aug,
            c_r: self.c_r,
            pca_samples: self.pca_samples,
            clip: self.clip,
            seg_hidden: self.seg_hidden,
            cover_threshold: self.cover_threshold,
        }
    }

    /// First 16 hex digits of the SHA-256 of the compact JSON encoding.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&bytes)[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip_through_toml_and_json() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let t = dir.path().join("run.toml");
        fs::write(&t, toml::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(RunConfig::load(&t).unwrap(), cfg);
        let j = dir.path().join("run.json");
        fs::write(&j, serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(RunConfig::load(&j).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let t = dir.path().join("run.toml");
        fs::write(&t, "C = 32\nC_R = 3\nlearning_rate = 0.1\n").unwrap();
        assert!(matches!(RunConfig::load(&t), Err(Error::Config(_))));
        let cfg = RunConfig::default();
        assert!(matches!(cfg.with_overrides(&[("bogus", "1")]), Err(Error::Config(_))));
        assert!(matches!(cfg.with_overrides(&[("steps", "many")]), Err(Error::Config(_))));
    }

    #[test]
    fn partial_files_take_defaults_and_overrides_apply() {
        let dir = tempfile::tempdir().unwrap();
        let t = dir.path().join("run.toml");
        fs::write(&t, "C = 32\nC_R = 3\nqueries_per_view = 64\n").unwrap();
        let cfg = RunConfig::load(&t).unwrap();
        assert_eq!((cfg.dim, cfg.c_r, cfg.queries_per_view), (32, 3, 64));
        assert_eq!(cfg.lr, 2e-4);
        let o = cfg
            .with_overrides(&[("lr", "1e-3"), ("seg_aug", "true"), ("box_side", "[1.0, 2.0]"), ("dim", "16")])
            .unwrap();
        assert_eq!((o.lr, o.seg_aug, o.box_side, o.dim), (1e-3, true, [1.0, 2.0], 16));
        assert!(matches!(cfg.with_overrides(&[("C_R", "64")]), Err(Error::Config(_))));
    }

    #[test]
    fn hash_tracks_every_field() {
        let a = RunConfig::default();
        assert_eq!(a.hash(), a.clone().hash());
        assert_eq!(a.hash().len(), 16);
        assert_ne!(a.hash(), a.with_overrides(&[("seed", "1")]).unwrap().hash());
        assert_ne!(a.hash(), a.with_overrides(&[("tau_occ", "0.2")]).unwrap().hash());
    }
}
