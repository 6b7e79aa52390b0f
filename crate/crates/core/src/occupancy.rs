//! Open-vocabulary semantic logits, voxelization of Gaussians and
//! occupancy metrics.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::softmax_rows;
use crate::error::{Error, Result};
use crate::gaussians::GaussianParams;
use crate::geometry::assemble_covariance;
use crate::io::{read_f64, read_u32};
use crate::tensor::Tensor;

/// Cell value for unoccupied voxels.
pub const EMPTY: u8 = 255;
pub const GOCC_MAGIC: &[u8; 4] = b"GOCC";
pub const GOCC_VERSION: u32 = 1;
/// Default voxel size, metres.
pub const VOXEL_SIZE: f64 = 0.4;
/// Default occupancy threshold on accumulated density.
pub const TAU_OCC: f64 = 0.1;

/// Axis-aligned voxel grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub min: [f64; 3],
    pub max: [f64; 3],
    pub voxel: f64,
}

impl GridSpec {
    /// 16 m × 16 m × 3.2 m at 0.4 m, centred on the origin in x and y.
    pub const DESK: Self = Self {
        min: [-8.0, -8.0, 0.0],
        max: [8.0, 8.0, 3.2],
        voxel: VOXEL_SIZE,
    };

    pub fn validate(&self) -> Result<()> {
        if !(self.voxel > 0.0) || !self.voxel.is_finite() {
            return Err(Error::Domain(format!("voxel size must be positive, got {}", self.voxel)));
        }
        for a in 0..3 {
            if !(self.max[a] > self.min[a]) || !self.min[a].is_finite() || !self.max[a].is_finite() {
                return Err(Error::Domain(format!("empty or invalid grid extent on axis {a}")));
            }
            if ((self.max[a] - self.min[a]) / self.voxel).round() < 1.0 {
                return Err(Error::Domain(format!("grid axis {a} is thinner than one voxel")));
            }
        }
        Ok(())
    }

    pub fn dims(&self) -> [usize; 3] {
        [0, 1, 2].map(|a| ((self.max[a] - self.min[a]) / self.voxel).round() as usize)
    }

    pub fn num_cells(&self) -> usize {
        self.dims().iter().product()
    }

    /// Linear index, x fastest.
    pub fn linear(&self, idx: [usize; 3]) -> usize {
        let [nx, ny, _] = self.dims();
        idx[0] + nx * (idx[1] + ny * idx[2])
    }

    pub fn unlinear(&self, k: usize) -> [usize; 3] {
        let [nx, ny, _] = self.dims();
        [k % nx, (k / nx) % ny, k / (nx * ny)]
    }

    pub fn center(&self, idx: [usize; 3]) -> [f64; 3] {
        [0, 1, 2].map(|a| self.min[a] + (idx[a] as f64 + 0.5) * self.voxel)
    }

    /// Voxel containing `p`, or `None` outside the grid.
    pub fn index_of(&self, p: [f64; 3]) -> Option<[usize; 3]> {
        let dims = self.dims();
        let mut out = [0; 3];
        for a in 0..3 {
            let f = ((p[a] - self.min[a]) / self.voxel).floor();
            if !(f >= 0.0) || f >= dims[a] as f64 {
                return None;
            }
            out[a] = f as usize;
        }
        Some(out)
    }
}

/// Unit-norm class embeddings that voxel features are matched against.
#[derive(Debug, Clone, PartialEq)]
pub struct TextPrototypes {
    names: Vec<String>,
    embeddings: Tensor,
}

#[derive(Serialize, Deserialize)]
struct PrototypeRecord {
    names: Vec<String>,
    embeddings: Vec<Vec<f64>>,
}

impl TextPrototypes {
    pub fn new(names: Vec<String>, embeddings: Tensor) -> Result<Self> {
        let (n, _) = embeddings.dims2()?;
        if n != names.len() || n == 0 {
            return Err(Error::Dimension(format!(
                "{} class names for {n} prototype rows",
                names.len()
            )));
        }
        if n > EMPTY as usize {
            return Err(Error::Domain(format!("at most 255 classes are supported, got {n}")));
        }
        for r in 0..n {
            let norm = embeddings.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-9 {
                return Err(Error::Domain(format!("prototype `{}` has norm {norm}", names[r])));
            }
        }
        Ok(Self { names, embeddings })
    }

    /// Append a category given by an arbitrary (non-zero) embedding.
    pub fn with_novel(mut self, name: &str, embedding: &[f64]) -> Result<Self> {
        let c = self.dim();
        if embedding.len() != c {
            return Err(Error::Dimension(format!("novel prototype has dim {}, expected {c}", embedding.len())));
        }
        let norm = embedding.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm > 0.0) {
            return Err(Error::Domain("novel prototype must be non-zero".into()));
        }
        let mut data = self.embeddings.data().to_vec();
        data.extend(embedding.iter().map(|v| v / norm));
        self.names.push(name.to_string());
        Self::new(self.names, Tensor::new([self.embeddings.shape()[0] + 1, c], data)?)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn embeddings(&self) -> &Tensor {
        &self.embeddings
    }

    pub fn num_classes(&self) -> usize {
        self.names.len()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.last_dim()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let rec = PrototypeRecord {
            names: self.names.clone(),
            embeddings: (0..self.num_classes()).map(|r| self.embeddings.row(r).to_vec()).collect(),
        };
        fs::write(path, serde_json::to_vec_pretty(&rec)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
        let rec: PrototypeRecord = serde_json::from_slice(&buf)?;
        let embeddings = Tensor::from_rows(&rec.embeddings).map_err(|e| Error::Data(e.to_string()))?;
        Self::new(rec.names, embeddings).map_err(|e| Error::Data(e.to_string()))
    }
}

/// Row-softmax of `f · f_Tᵀ`, shape `[N, N_C]`.
pub fn semantic_logits(feats: &Tensor, prototypes: &TextPrototypes) -> Result<Tensor> {
    let sims = feats.matmul(&prototypes.embeddings.transpose()?)?;
    Ok(softmax_rows(&sims))
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = k;
        }
    }
    best
}

/// A classified voxel grid; `EMPTY` marks free cells.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyGrid {
    pub spec: GridSpec,
    pub num_classes: usize,
    pub cells: Vec<u8>,
}

impl OccupancyGrid {
    pub fn empty(spec: GridSpec, num_classes: usize) -> Result<Self> {
        spec.validate()?;
        Ok(Self {
            spec,
            num_classes,
            cells: vec![EMPTY; spec.num_cells()],
        })
    }

    pub fn get(&self, idx: [usize; 3]) -> u8 {
        self.cells[self.spec.linear(idx)]
    }

    pub fn set(&mut self, idx: [usize; 3], class: u8) {
        let k = self.spec.linear(idx);
        self.cells[k] = class;
    }

    pub fn occupied(&self) -> usize {
        self.cells.iter().filter(|&&c| c != EMPTY).count()
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        if self.cells.len() != self.spec.num_cells() {
            return Err(Error::Data(format!(
                "grid has {} cells, spec needs {}",
                self.cells.len(),
                self.spec.num_cells()
            )));
        }
        if let Some(c) = self.cells.iter().find(|&&c| c != EMPTY && c as usize >= self.num_classes) {
            return Err(Error::Data(format!("cell class {c} >= {} classes", self.num_classes)));
        }
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + 4 + 56 + 4 + self.cells.len());
        out.extend_from_slice(GOCC_MAGIC);
        out.extend_from_slice(&GOCC_VERSION.to_le_bytes());
        for v in self.spec.min.iter().chain(&self.spec.max) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.spec.voxel.to_le_bytes());
        out.extend_from_slice(&(self.num_classes as u32).to_le_bytes());
        out.extend_from_slice(&self.cells);
        out
    }

    pub fn decode(buf: &[u8]) -> Result<Self> {
        if buf.len() < 4 || &buf[..4] != GOCC_MAGIC {
            return Err(Error::Data("bad GOCC magic".into()));
        }
        let mut pos = 4;
        let version = read_u32(buf, &mut pos)?;
        if version != GOCC_VERSION {
            return Err(Error::Data(format!("unsupported GOCC version {version}")));
        }
        let mut ext = [0.0; 6];
        for v in &mut ext {
            *v = read_f64(buf, &mut pos)?;
        }
        let voxel = read_f64(buf, &mut pos)?;
        let num_classes = read_u32(buf, &mut pos)? as usize;
        let spec = GridSpec {
            min: [ext[0], ext[1], ext[2]],
            max: [ext[3], ext[4], ext[5]],
            voxel,
        };
        spec.validate().map_err(|e| Error::Data(e.to_string()))?;
        let grid = Self {
            spec,
            num_classes,
            cells: buf[pos..].to_vec(),
        };
        grid.validate()?;
        Ok(grid)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&buf).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }
}

/// Per-Gaussian data shared by both voxelizers.
struct Support {
    mean: Vector3<f64>,
    precision: Matrix3<f64>,
    /// Half-widths of the 3σ box, per axis.
    extent: [f64; 3],
}

fn supports(params: &GaussianParams) -> Result<Vec<Support>> {
    (0..params.len())
        .map(|i| {
            let cov = assemble_covariance(params.scale(i), params.quat(i))?;
            let precision = cov
                .try_inverse()
                .ok_or_else(|| Error::Domain(format!("Gaussian {i} has a singular covariance")))?;
            Ok(Support {
                mean: Vector3::from(params.mean(i)),
                precision,
                extent: [0, 1, 2].map(|a| 3.0 * cov[(a, a)].sqrt()),
            })
        })
        .collect()
}

#[inline]
fn inside(s: &Support, x: &Vector3<f64>) -> bool {
    (0..3).all(|a| (x[a] - s.mean[a]).abs() <= s.extent[a])
}

#[inline]
fn density(s: &Support, x: &Vector3<f64>) -> f64 {
    let d = x - s.mean;
    (-0.5 * d.dot(&(s.precision * d))).exp()
}

/// Classify one voxel from the Gaussians in `list` (ascending index).
fn classify(
    list: impl Iterator<Item = usize>,
    sup: &[Support],
    params: &GaussianParams,
    x: &Vector3<f64>,
    prototypes: &TextPrototypes,
    tau: f64,
    feat: &mut [f64],
) -> u8 {
    feat.iter_mut().for_each(|v| *v = 0.0);
    let mut w = 0.0;
    for i in list {
        let s = &sup[i];
        if !inside(s, x) {
            continue;
        }
        let g = params.opacities[i] * density(s, x);
        w += g;
        for (f, v) in feat.iter_mut().zip(params.feat(i)) {
            *f += g * v;
        }
    }
    if !(w >= tau) || w <= 0.0 {
        return EMPTY;
    }
    feat.iter_mut().for_each(|v| *v /= w);
    // Softmax is monotone, so the arg-max of the raw similarities is the
    // arg-max of the logits.
    let e = prototypes.embeddings();
    let sims: Vec<f64> = (0..prototypes.num_classes())
        .map(|k| e.row(k).iter().zip(feat.iter()).map(|(a, b)| a * b).sum())
        .collect();
    argmax(&sims) as u8
}

fn check_inputs(params: &GaussianParams, prototypes: &TextPrototypes, spec: &GridSpec) -> Result<()> {
    params.validate()?;
    spec.validate()?;
    if params.feat_dim != prototypes.dim() {
        return Err(Error::Dimension(format!(
            "Gaussian features have dim {}, prototypes {}",
            params.feat_dim,
            prototypes.dim()
        )));
    }
    Ok(())
}

/// Density-weighted voxelization. Each Gaussian contributes to the voxels
/// whose centres lie in its 3σ box: `w = Σ α G(x)`, `f = Σ α G(x) f_i / w`.
/// A voxel is occupied when `w ≥ tau` and takes the class of its best
/// matching prototype.
pub fn voxelize(
    params: &GaussianParams,
    prototypes: &TextPrototypes,
    spec: &GridSpec,
    tau: f64,
) -> Result<OccupancyGrid> {
    check_inputs(params, prototypes, spec)?;
    let sup = supports(params)?;
    let dims = spec.dims();
    let mut bins: Vec<Vec<u32>> = vec![Vec::new(); spec.num_cells()];
    for (i, s) in sup.iter().enumerate() {
        let mut lo = [0usize; 3];
        let mut hi = [0usize; 3];
        let mut hit = true;
        for a in 0..3 {
            // One voxel of slack on each side; `inside` makes the exact call.
            let l = ((s.mean[a] - s.extent[a] - spec.min[a]) / spec.voxel - 0.5).floor() - 1.0;
            let h = ((s.mean[a] + s.extent[a] - spec.min[a]) / spec.voxel - 0.5).ceil() + 1.0;
            let l = l.max(0.0);
            let h = h.min(dims[a] as f64 - 1.0);
            if !(l <= h) {
                hit = false;
                break;
            }
            lo[a] = l as usize;
            hi[a] = h as usize;
        }
        if !hit {
            continue;
        }
        for z in lo[2]..=hi[2] {
            for y in lo[1]..=hi[1] {
                for x in lo[0]..=hi[0] {
                    bins[spec.linear([x, y, z])].push(i as u32);
                }
            }
        }
    }
    let slab = dims[0] * dims[1];
    let mut cells = vec![EMPTY; spec.num_cells()];
    cells.par_chunks_mut(slab).enumerate().for_each(|(z, out)| {
        let mut feat = vec![0.0; params.feat_dim];
        for (k, cell) in out.iter_mut().enumerate() {
            let lin = z * slab + k;
            let list = &bins[lin];
            if list.is_empty() {
                continue;
            }
            let x = Vector3::from(spec.center(spec.unlinear(lin)));
            *cell = classify(list.iter().map(|&i| i as usize), &sup, params, &x, prototypes, tau, &mut feat);
        }
    });
    Ok(OccupancyGrid {
        spec: *spec,
        num_classes: prototypes.num_classes(),
        cells,
    })
}

/// All-pairs reference voxelizer: every voxel tests every Gaussian.
pub fn voxelize_brute_force(
    params: &GaussianParams,
    prototypes: &TextPrototypes,
    spec: &GridSpec,
    tau: f64,
) -> Result<OccupancyGrid> {
    check_inputs(params, prototypes, spec)?;
    let sup = supports(params)?;
    let mut grid = OccupancyGrid::empty(*spec, prototypes.num_classes())?;
    let mut feat = vec![0.0; params.feat_dim];
    for lin in 0..spec.num_cells() {
        let x = Vector3::from(spec.center(spec.unlinear(lin)));
        grid.cells[lin] = classify(0..params.len(), &sup, params, &x, prototypes, tau, &mut feat);
    }
    Ok(grid)
}

/// Binary and per-class intersection-over-union.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub binary_iou: f64,
    /// Classes absent from both grids are left out.
    pub per_class: BTreeMap<String, f64>,
    pub miou: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

pub fn iou(pred: &OccupancyGrid, gt: &OccupancyGrid, class_names: &[String]) -> Result<Metrics> {
    if pred.spec != gt.spec || pred.cells.len() != gt.cells.len() {
        return Err(Error::Contract("prediction and ground truth grids differ in spec".into()));
    }
    let n = class_names.len();
    if pred.num_classes > n || gt.num_classes > n {
        return Err(Error::Contract(format!(
            "{n} class names for grids with {} / {} classes",
            pred.num_classes, gt.num_classes
        )));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    let mut ci = vec![0usize; n];
    let mut cu = vec![0usize; n];
    for (&p, &g) in pred.cells.iter().zip(&gt.cells) {
        let (po, go) = (p != EMPTY, g != EMPTY);
        inter += (po && go) as usize;
        union += (po || go) as usize;
        if p == g {
            if po {
                ci[p as usize] += 1;
                cu[p as usize] += 1;
            }
        } else {
            if po {
                cu[p as usize] += 1;
            }
            if go {
                cu[g as usize] += 1;
            }
        }
    }
    let ratio = |i: usize, u: usize| if u == 0 { 1.0 } else { i as f64 / u as f64 };
    let per_class: BTreeMap<String, f64> = (0..n)
        .filter(|&k| cu[k] > 0)
        .map(|k| (class_names[k].clone(), ratio(ci[k], cu[k])))
        .collect();
    let miou = if per_class.is_empty() {
        1.0
    } else {
        per_class.values().sum::<f64>() / per_class.len() as f64
    };
    Ok(Metrics {
        binary_iou: ratio(inter, union),
        per_class,
        miou,
        config_hash: None,
    })
}
