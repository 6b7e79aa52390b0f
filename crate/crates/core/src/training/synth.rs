//! Procedural box scenes and the oracle that stands in for pretrained
//! feature, depth and segmentation models.

use std::f64::consts::PI;

use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Camera, CameraRecord};
use crate::maps::{ClassMap, DepthMap, FeatureMap, IGNORE_CLASS};
use crate::occupancy::{GridSpec, OccupancyGrid, TextPrototypes};
use crate::tensor::Tensor;

pub const CLASS_NAMES: [&str; 3] = ["vehicle", "building", "vegetation"];

/// Axis-aligned box primitive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxPrim {
    pub min: [f64; 3],
    pub max: [f64; 3],
    pub class: u8,
}

impl BoxPrim {
    pub fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] && p[a] <= self.max[a])
    }

    /// Entry distance along `origin + t·dir` (slab method), if the ray
    /// hits the box in front of the origin.
    pub fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        let mut t0 = f64::NEG_INFINITY;
        let mut t1 = f64::INFINITY;
        for a in 0..3 {
            if dir[a] == 0.0 {
                if origin[a] < self.min[a] || origin[a] > self.max[a] {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / dir[a];
            let (mut n, mut f) = ((self.min[a] - origin[a]) * inv, (self.max[a] - origin[a]) * inv);
            if n > f {
                std::mem::swap(&mut n, &mut f);
            }
            t0 = t0.max(n);
            t1 = t1.min(f);
        }
        (t0 <= t1 && t0 > 0.0).then_some(t0)
    }
}

/// Knobs for scene generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    pub num_views: usize,
    pub feat_dim: usize,
    /// Input image size; oracle maps are produced at `1 / downsample` of it.
    pub image_width: usize,
    pub image_height: usize,
    pub downsample: usize,
    pub hfov_deg: f64,
    pub noise_sigma: f64,
    pub camera_radius: f64,
    pub camera_height: f64,
    /// Box footprint side range and height range, metres.
    pub box_side: [f64; 2],
    pub box_height: [f64; 2],
    pub grid: GridSpec,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            num_views: 2,
            feat_dim: 32,
            image_width: 320,
            image_height: 240,
            downsample: 16,
            hfov_deg: 60.0,
            noise_sigma: 0.1,
            camera_radius: 6.0,
            camera_height: 2.4,
            box_side: [1.2, 2.4],
            box_height: [1.2, 2.4],
            grid: GridSpec::DESK,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.num_views == 0 {
            return bad("num_views must be at least 1");
        }
        if self.feat_dim == 0 {
            return bad("feat_dim must be at least 1");
        }
        if self.downsample == 0 || self.image_width < self.downsample || self.image_height < self.downsample {
            return bad("image must be at least one downsampled pixel");
        }
        if !(self.hfov_deg > 0.0 && self.hfov_deg < 180.0) {
            return bad("hfov_deg must be in (0, 180)");
        }
        if !(self.noise_sigma >= 0.0) {
            return bad("noise_sigma must be non-negative");
        }
        if !(self.box_side[0] > 0.0 && self.box_side[0] <= self.box_side[1])
            || !(self.box_height[0] > 0.0 && self.box_height[0] <= self.box_height[1])
        {
            return bad("box size ranges must be positive and ordered");
        }
        self.grid.validate().map_err(|e| Error::Config(e.to_string()))
    }

    pub fn feature_size(&self) -> (usize, usize) {
        (self.image_height / self.downsample, self.image_width / self.downsample)
    }
}

/// One view of oracle supervision at feature resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleView {
    pub features: FeatureMap,
    /// z-depth; 0 where the ray escapes.
    pub depth: DepthMap,
    pub classes: ClassMap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub seed: u64,
    pub boxes: Vec<BoxPrim>,
    pub class_names: Vec<String>,
    /// Unit-norm class prototypes, one per class.
    pub prototypes: Vec<Vec<f64>>,
    /// Unit-norm feature returned for rays that hit nothing.
    pub background: Vec<f64>,
    pub cameras: Vec<CameraRecord>,
    pub grid: GridSpec,
    pub noise_sigma: f64,
    pub feature_height: usize,
    pub feature_width: usize,
}

fn unit_vector(rng: &mut impl Rng, c: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..c).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn overlaps(a: &BoxPrim, b: &BoxPrim, gap: f64) -> bool {
    (0..2).all(|k| a.min[k] < b.max[k] + gap && b.min[k] < a.max[k] + gap)
}

impl SyntheticScene {
    /// Three boxes (one per class) standing on `z = 0` near the origin,
    /// seen by cameras evenly spread on a circle.
    pub fn generate(cfg: &SceneConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nc = CLASS_NAMES.len();
        let prototypes: Vec<Vec<f64>> = (0..nc).map(|_| unit_vector(&mut rng, cfg.feat_dim)).collect();
        let background = unit_vector(&mut rng, cfg.feat_dim);

        let g = cfg.grid;
        let half = cfg.camera_radius * 0.45;
        let mut boxes: Vec<BoxPrim> = Vec::with_capacity(nc);
        let phase = rng.random_range(0.0..2.0 * PI);
        for k in 0..nc {
            let mut placed = None;
            for _ in 0..1000 {
                let sx = rng.random_range(cfg.box_side[0]..=cfg.box_side[1]);
                let sy = rng.random_range(cfg.box_side[0]..=cfg.box_side[1]);
                let h = rng.random_range(cfg.box_height[0]..=cfg.box_height[1]).min(g.max[2] - g.min[2]);
                let ang = phase + 2.0 * PI * k as f64 / nc as f64 + rng.random_range(-0.3..0.3);
                let r = rng.random_range(0.2 * half..half);
                let (cx, cy) = (r * ang.cos(), r * ang.sin());
                let b = BoxPrim {
                    min: [cx - sx / 2.0, cy - sy / 2.0, g.min[2]],
                    max: [cx + sx / 2.0, cy + sy / 2.0, g.min[2] + h],
                    class: k as u8,
                };
                let inside = (0..2).all(|a| b.min[a] >= g.min[a] && b.max[a] <= g.max[a]);
                if inside && !boxes.iter().any(|o| overlaps(o, &b, 0.3)) {
                    placed = Some(b);
                    break;
                }
            }
            boxes.push(placed.ok_or_else(|| Error::Config("could not place boxes inside the grid".into()))?);
        }

        let (fh, fw) = cfg.feature_size();
        let fx = cfg.image_width as f64 / 2.0 / (cfg.hfov_deg.to_radians() / 2.0).tan();
        let target = Vector3::new(0.0, 0.0, g.min[2] + 0.5 * cfg.box_height[1]);
        let start = rng.random_range(0.0..2.0 * PI);
        let cameras = (0..cfg.num_views)
            .map(|v| {
                let a = start + 2.0 * PI * v as f64 / cfg.num_views as f64;
                let eye = Vector3::new(
                    cfg.camera_radius * a.cos(),
                    cfg.camera_radius * a.sin(),
                    g.min[2] + cfg.camera_height,
                );
                let cam = Camera::look_at(
                    eye,
                    target,
                    Vector3::z(),
                    fx,
                    fx,
                    cfg.image_width,
                    cfg.image_height,
                )?;
                Ok(CameraRecord::from(&cam))
            })
            .collect::<Result<Vec<_>>>()?;

        Ok(Self {
            seed,
            boxes,
            class_names: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
            prototypes,
            background,
            cameras,
            grid: g,
            noise_sigma: cfg.noise_sigma,
            feature_height: fh,
            feature_width: fw,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn num_views(&self) -> usize {
        self.cameras.len()
    }

    pub fn camera(&self, view: usize) -> Result<Camera> {
        let rec = self
            .cameras
            .get(view)
            .ok_or_else(|| Error::Data(format!("scene has no view {view}")))?;
        Camera::try_from(rec)
    }

    pub fn text_prototypes(&self) -> Result<TextPrototypes> {
        TextPrototypes::new(self.class_names.clone(), Tensor::from_rows(&self.prototypes)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        let c = self.background.len();
        for p in self.prototypes.iter().chain([&self.background]) {
            let n = p.iter().map(|x| x * x).sum::<f64>().sqrt();
            if p.len() != c || (n - 1.0).abs() > 1e-9 {
                return Err(Error::Data("scene prototypes must be unit vectors of equal length".into()));
            }
        }
        if self.prototypes.len() != self.class_names.len() {
            return Err(Error::Data("one prototype per class is required".into()));
        }
        for b in &self.boxes {
            let inside = (0..3).all(|a| b.min[a] >= self.grid.min[a] && b.max[a] <= self.grid.max[a]);
            if !inside || (b.class as usize) >= self.num_classes() {
                return Err(Error::Data(format!("box {b:?} is outside the grid or has a bad class")));
            }
        }
        for v in 0..self.num_views() {
            self.camera(v)?;
        }
        Ok(())
    }

    /// Nearest box hit along the ray through `pixel`: (z-depth, class).
    pub fn cast(&self, cam: &Camera, pixel: Vector2<f64>) -> Option<(f64, u8)> {
        let (o, d) = cam.ray(&pixel);
        let mut best: Option<(f64, u8)> = None;
        for b in &self.boxes {
            if let Some(t) = b.intersect(&o, &d) {
                if best.is_none_or(|(bt, _)| t < bt) {
                    best = Some((t, b.class));
                }
            }
        }
        best
    }

    /// Oracle features, depth and classes for `view` at feature resolution.
    /// Noise is drawn from a per-row stream, so rows render independently.
    pub fn oracle_render(&self, view: usize) -> Result<OracleView> {
        let cam = self.camera(view)?.resized(self.feature_width, self.feature_height)?;
        let (h, w, c) = (self.feature_height, self.feature_width, self.background.len());
        let noise = Normal::new(0.0, self.noise_sigma.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
        let rows: Vec<(Vec<f64>, Vec<f64>, Vec<u8>)> = (0..h)
            .into_par_iter()
            .map(|y| {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                rng.set_stream(((view as u64) << 32) | y as u64);
                let mut feat = Vec::with_capacity(w * c);
                let mut depth = Vec::with_capacity(w);
                let mut class = Vec::with_capacity(w);
                for x in 0..w {
                    let hit = self.cast(&cam, Vector2::new(x as f64 + 0.5, y as f64 + 0.5));
                    let proto = match hit {
                        Some((d, k)) => {
                            depth.push(d);
                            class.push(k);
                            &self.prototypes[k as usize]
                        }
                        None => {
                            depth.push(0.0);
                            class.push(IGNORE_CLASS);
                            &self.background
                        }
                    };
                    let mut f: Vec<f64> = proto.clone();
                    if self.noise_sigma > 0.0 {
                        f.iter_mut().for_each(|v| *v += noise.sample(&mut rng));
                        let n = f.iter().map(|v| v * v).sum::<f64>().sqrt();
                        f.iter_mut().for_each(|v| *v /= n);
                    }
                    feat.extend(f);
                }
                (feat, depth, class)
            })
            .collect();
        let mut feat = Vec::with_capacity(h * w * c);
        let mut depth = Vec::with_capacity(h * w);
        let mut class = Vec::with_capacity(h * w);
        for (f, d, k) in rows {
            feat.extend(f);
            depth.extend(d);
            class.extend(k);
        }
        Ok(OracleView {
            features: FeatureMap::new(h, w, c, feat)?,
            depth: DepthMap::new(h, w, depth)?,
            classes: ClassMap {
                height: h,
                width: w,
                data: class,
            },
        })
    }

    /// Ground-truth occupancy: a voxel takes the class of the box that
    /// contains its centre.
    pub fn ground_truth(&self) -> Result<OccupancyGrid> {
        let mut grid = OccupancyGrid::empty(self.grid, self.num_classes())?;
        for k in 0..self.grid.num_cells() {
            let p = self.grid.center(self.grid.unlinear(k));
            if let Some(b) = self.boxes.iter().find(|b| b.contains(p)) {
                grid.cells[k] = b.class;
            }
        }
        Ok(grid)
    }
}
