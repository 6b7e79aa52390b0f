//! The optimization loop: network forward, splatting into every source
//! view, masked losses against the oracle and an Adam update.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::losses::{depth_loss, feat_loss, seg_loss, DEPTH_L1_WEIGHT};
use super::optim::Adam;
use super::pca::{pca_fit, PcaBasis};
use super::synth::{OracleView, SyntheticScene};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::gaussians::GaussianSet;
use crate::geometry::Camera;
use crate::net::{self, forward, init_params, linear, NetConfig, ParamStore, ParamVars, ViewInput};
use crate::occupancy::TextPrototypes;
use crate::renderer::render_var;
use crate::tensor::Tensor;

/// Optimization knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub steps: usize,
    /// Scenes per step.
    pub batch: usize,
    pub seed: u64,
    pub seg_aug: bool,
    /// PCA output dimension.
    pub c_r: usize,
    /// Oracle pixels used to fit the PCA basis.
    pub pca_samples: usize,
    pub clip: f64,
    pub seg_hidden: usize,
    /// Pixels whose final transmittance is below this enter the losses.
    pub cover_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            steps: 2000,
            batch: 1,
            seed: 0,
            seg_aug: false,
            c_r: 64,
            pca_samples: 10_000,
            clip: 10.0,
            seg_hidden: 64,
            cover_threshold: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return bad("lr must be finite and non-negative");
        }
        if self.batch == 0 || self.c_r == 0 || self.pca_samples == 0 || self.seg_hidden == 0 {
            return bad("batch, C_R, pca_samples and seg_hidden must be positive");
        }
        if !(self.clip > 0.0) {
            return bad("clip must be positive");
        }
        if !(self.cover_threshold > 0.0 && self.cover_threshold <= 1.0) {
            return bad("cover_threshold must lie in (0, 1]");
        }
        Ok(())
    }
}

/// Loss terms of one step. `total = feat + depth + seg`, with
/// `depth = silog + β·l1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub feat: f64,
    pub depth: f64,
    pub silog: f64,
    pub l1: f64,
    pub seg: f64,
}

impl LossReport {
    pub const CSV_HEADER: &'static str = "step,total,feat,silog,l1,seg";

    pub fn csv_row(&self, step: usize) -> String {
        format!("{step},{},{},{},{},{}", self.total, self.feat, self.silog, self.l1, self.seg)
    }
}

/// A scene with its oracle outputs and the derived network inputs.
#[derive(Debug, Clone)]
pub struct SceneData {
    pub scene: SyntheticScene,
    pub oracle: Vec<OracleView>,
    pub views: Vec<ViewInput>,
}

impl SceneData {
    pub fn new(scene: SyntheticScene) -> Result<Self> {
        let mut oracle = Vec::with_capacity(scene.num_views());
        let mut views = Vec::with_capacity(scene.num_views());
        for v in 0..scene.num_views() {
            let o = scene.oracle_render(v)?;
            views.push(ViewInput {
                features: o.features.clone(),
                depth: o.depth.clone(),
                cam: scene.camera(v)?,
            });
            oracle.push(o);
        }
        Ok(Self { scene, oracle, views })
    }
}

/// Differentiable loss terms.
pub struct LossVars {
    pub total: Var,
    pub feat: Var,
    pub depth: Var,
    pub silog: Var,
    pub l1: Var,
    pub seg: Var,
}

impl LossVars {
    pub fn report(&self) -> LossReport {
        let v = |x: &Var| x.value().item();
        LossReport {
            total: v(&self.total),
            feat: v(&self.feat),
            depth: v(&self.depth),
            silog: v(&self.silog),
            l1: v(&self.l1),
            seg: v(&self.seg),
        }
    }
}

/// Everything needed to run inference later.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub net: NetConfig,
    pub params: ParamStore,
    pub pca: PcaBasis,
    pub prototypes: TextPrototypes,
    pub config_hash: String,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    net: NetConfig,
    config_hash: String,
}

impl Checkpoint {
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.params.save(&dir.join("weights"), &self.config_hash)?;
        let meta = CheckpointMeta {
            net: self.net.clone(),
            config_hash: self.config_hash.clone(),
        };
        let p = dir.join("checkpoint.json");
        fs::write(&p, serde_json::to_vec_pretty(&meta)?).map_err(|e| Error::io(&p, e))?;
        let p = dir.join("pca.json");
        fs::write(&p, serde_json::to_vec(&self.pca)?).map_err(|e| Error::io(&p, e))?;
        self.prototypes.save(&dir.join("prototypes.json"))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let read = |name: &str| {
            let p = dir.join(name);
            fs::read(&p).map_err(|e| Error::io(&p, e))
        };
        let meta: CheckpointMeta = serde_json::from_slice(&read("checkpoint.json")?)?;
        let pca: PcaBasis = serde_json::from_slice(&read("pca.json")?)?;
        let (params, manifest) = ParamStore::load(&dir.join("weights"))?;
        if manifest.config_hash != meta.config_hash {
            return Err(Error::Data(format!(
                "weights carry config hash {} but the checkpoint says {}",
                manifest.config_hash, meta.config_hash
            )));
        }
        Ok(Self {
            net: meta.net,
            params,
            pca,
            prototypes: TextPrototypes::load(&dir.join("prototypes.json"))?,
            config_hash: meta.config_hash,
        })
    }

    pub fn predict(&self, views: &[ViewInput]) -> Result<GaussianSet> {
        net::predict(&self.net, &self.params, views)
    }

    /// Gaussians and prototypes ready for voxelization.
    pub fn semantic_inputs(&self, set: &GaussianSet) -> Result<(GaussianSet, TextPrototypes)> {
        reduce_for_semantics(&self.pca, set, &self.prototypes)
    }
}

/// Express Gaussian features and text prototypes in the centred PCA space
/// that the feature loss acts on; prototypes are renormalized there.
pub fn reduce_for_semantics(
    pca: &PcaBasis,
    set: &GaussianSet,
    prototypes: &TextPrototypes,
) -> Result<(GaussianSet, TextPrototypes)> {
    let mut out = set.clone();
    if !set.is_empty() {
        let feats = Tensor::from_rows(&set.gaussians.iter().map(|g| g.feat.clone()).collect::<Vec<_>>())?;
        let reduced = pca.project(&feats)?;
        for (i, g) in out.gaussians.iter_mut().enumerate() {
            g.feat = reduced.row(i).to_vec();
        }
    }
    out.feat_dim = pca.output_dim();
    let p = pca.project(prototypes.embeddings())?;
    let mut rows = Vec::with_capacity(prototypes.num_classes());
    for (r, name) in prototypes.names().iter().enumerate() {
        let row = p.row(r);
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(n > 0.0) {
            return Err(Error::Domain(format!("prototype `{name}` vanishes in the PCA space")));
        }
        rows.push(row.iter().map(|v| v / n).collect());
    }
    Ok((out, TextPrototypes::new(prototypes.names().to_vec(), Tensor::from_rows(&rows)?)?))
}

fn seg_params(store: &mut ParamStore, c_r: usize, hidden: usize, classes: usize, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(7);
    store.insert("seg.fc1.w", Tensor::randn([c_r, hidden], 1.0 / (c_r as f64).sqrt(), &mut rng));
    store.insert("seg.fc1.b", Tensor::zeros([1, hidden]));
    store.insert("seg.fc2.w", Tensor::randn([hidden, classes], 1.0 / (hidden as f64).sqrt(), &mut rng));
    store.insert("seg.fc2.b", Tensor::zeros([1, classes]));
}

/// Oracle pixels of every view, subsampled to at most `limit` rows.
fn pca_samples(data: &[SceneData], limit: usize, seed: u64) -> Result<Tensor> {
    let c = data[0].oracle[0].features.channels;
    let all: Vec<&[f64]> = data
        .iter()
        .flat_map(|d| d.oracle.iter())
        .flat_map(|o| o.features.data.chunks_exact(c))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(3);
    let mut pick: Vec<usize> = if all.len() > limit {
        sample(&mut rng, all.len(), limit).into_vec()
    } else {
        (0..all.len()).collect()
    };
    pick.sort_unstable();
    Tensor::new([pick.len(), c], pick.iter().flat_map(|&i| all[i].iter().copied()).collect())
}

fn gather(t: &Tensor, rows: &[usize]) -> Result<Tensor> {
    let c = t.last_dim();
    Tensor::new([rows.len(), c], rows.iter().flat_map(|&r| t.row(r).iter().copied()).collect())
}

/// Per-view PCA targets, `H*W x C_R`.
struct Targets {
    feats: Vec<Vec<Tensor>>,
}

pub struct Trainer {
    pub net: NetConfig,
    pub cfg: TrainConfig,
    pub params: ParamStore,
    pub pca: PcaBasis,
    pub data: Vec<SceneData>,
    targets: Targets,
    opt: Adam,
    step: usize,
}

impl Trainer {
    pub fn new(net: NetConfig, cfg: TrainConfig, data: Vec<SceneData>) -> Result<Self> {
        net.validate()?;
        cfg.validate()?;
        let first = data.first().ok_or_else(|| Error::Data("training needs at least one scene".into()))?;
        let classes = first.scene.num_classes();
        for d in &data {
            if d.views.is_empty() {
                return Err(Error::Data("scene without views".into()));
            }
            if d.scene.num_classes() != classes {
                return Err(Error::Data("scenes disagree on the class list".into()));
            }
            for v in &d.views {
                if v.features.channels != net.dim {
                    return Err(Error::Config(format!(
                        "oracle features have {} channels but the network dim is {}",
                        v.features.channels, net.dim
                    )));
                }
            }
        }
        if cfg.c_r > net.dim {
            return Err(Error::Config(format!("C_R = {} exceeds C = {}", cfg.c_r, net.dim)));
        }
        let pca = pca_fit(&pca_samples(&data, cfg.pca_samples, cfg.seed)?, cfg.c_r)?;
        let feats = data
            .iter()
            .map(|d| {
                d.oracle
                    .iter()
                    .map(|o| {
                        let f = &o.features;
                        pca.project(&Tensor::new([f.height * f.width, f.channels], f.data.clone())?)
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        let mut params = init_params(&net, cfg.seed)?;
        seg_params(&mut params, cfg.c_r, cfg.seg_hidden, classes, cfg.seed);
        let mut opt = Adam::new(cfg.lr);
        opt.clip = cfg.clip;
        Ok(Self {
            net,
            cfg,
            params,
            pca,
            data,
            targets: Targets { feats },
            opt,
            step: 0,
        })
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    /// Scenes used at step `k`.
    pub fn batch_at(&self, k: usize) -> Vec<usize> {
        (0..self.cfg.batch).map(|b| (k * self.cfg.batch + b) % self.data.len()).collect()
    }

    /// Mean loss over every (scene, view) pair of `batch`.
    pub fn loss(&self, p: &ParamVars, batch: &[usize]) -> Result<LossVars> {
        let tape = p.get("queries")?.tape().clone();
        let zero = || tape.constant(Tensor::scalar(0.0));
        let (mut feat, mut silog, mut l1, mut seg) = (zero(), zero(), zero(), zero());
        let mut count = 0usize;
        for &s in batch {
            let d = &self.data[s];
            let out = forward(&self.net, p, &d.views)?;
            let reduced = self.pca.project_var(&out.feats)?;
            for (v, oracle) in d.oracle.iter().enumerate() {
                let cam: &Camera = &d.views[v].cam;
                let (h, w) = (oracle.depth.height, oracle.depth.width);
                let (img, rv) = render_var(&out.means, &out.scales, &out.quats, &out.opacities, &reduced, cam, h, w)?;
                count += 1;
                let covered: Vec<usize> = (0..h * w).filter(|&i| rv.trans[i] < self.cfg.cover_threshold).collect();
                if covered.is_empty() {
                    continue;
                }
                let rows = img.gather_rows(&covered)?;
                let c_r = self.pca.output_dim();
                let f = rows.narrow_cols(0, c_r)?;
                feat = feat.add(&feat_loss(&gather(&self.targets.feats[s][v], &covered)?, &f)?)?;
                let gt: Vec<f64> = covered.iter().map(|&i| oracle.depth.data[i]).collect();
                let dl = depth_loss(&gt, &rows.narrow_cols(c_r, c_r + 1)?, DEPTH_L1_WEIGHT)?;
                silog = silog.add(&dl.silog)?;
                l1 = l1.add(&dl.l1)?;
                if self.cfg.seg_aug {
                    let hidden = linear(&f, p, "seg.fc1")?.relu();
                    let logits = linear(&hidden, p, "seg.fc2")?;
                    let labels: Vec<u8> = covered.iter().map(|&i| oracle.classes.data[i]).collect();
                    seg = seg.add(&seg_loss(&labels, &logits)?)?;
                }
            }
        }
        let k = 1.0 / count.max(1) as f64;
        let (feat, silog, l1, seg) = (feat.mul_scalar(k), silog.mul_scalar(k), l1.mul_scalar(k), seg.mul_scalar(k));
        let depth = silog.add(&l1.mul_scalar(DEPTH_L1_WEIGHT))?;
        let total = feat.add(&depth)?.add(&seg)?;
        Ok(LossVars {
            total,
            feat,
            depth,
            silog,
            l1,
            seg,
        })
    }

    /// Loss at the current weights on the batch of the next step.
    pub fn evaluate(&self) -> Result<LossReport> {
        let tape = Tape::new();
        Ok(self.loss(&self.params.constants(&tape), &self.batch_at(self.step))?.report())
    }

    /// One update. Returns the loss measured before the update. A
    /// non-finite loss aborts without touching the weights.
    pub fn step(&mut self) -> Result<LossReport> {
        let tape = Tape::new();
        let p = self.params.leaves(&tape);
        // Inputs were checked when the trainer was built, so a domain failure
        // here means the weights have diverged.
        let loss = self.loss(&p, &self.batch_at(self.step)).map_err(|e| match e {
            Error::Domain(m) => Error::Numerical {
                step: self.step,
                message: m,
            },
            other => other,
        })?;
        let report = loss.report();
        if !report.total.is_finite() {
            return Err(Error::Numerical {
                step: self.step,
                message: format!("non-finite loss {report:?}"),
            });
        }
        let grads = p.gradients(&tape.backward(&loss.total)?);
        if grads.values().any(|g| !g.all_finite()) {
            return Err(Error::Numerical {
                step: self.step,
                message: "non-finite gradient".into(),
            });
        }
        self.opt.step(&mut self.params.tensors, &grads);
        self.step += 1;
        Ok(report)
    }

    /// Run `steps` updates, appending one CSV row per step to `csv`. On a
    /// numerical abort the current weights and the last good report are
    /// written to `dump_dir` before the error is returned.
    pub fn run(&mut self, steps: usize, mut csv: Option<&mut dyn Write>, dump_dir: Option<&Path>) -> Result<Vec<LossReport>> {
        let mut out = Vec::with_capacity(steps);
        for _ in 0..steps {
            let k = self.step;
            match self.step() {
                Ok(r) => {
                    if let Some(w) = csv.as_mut() {
                        writeln!(w, "{}", r.csv_row(k)).map_err(|e| Error::io("loss csv", e))?;
                    }
                    out.push(r);
                }
                Err(e @ Error::Numerical { .. }) => {
                    if let Some(dir) = dump_dir {
                        self.dump(dir, out.last())?;
                    }
                    return Err(e);
                }
                Err(e) => return Err(e),
            }
        }
        Ok(out)
    }

    fn dump(&self, dir: &Path, last: Option<&LossReport>) -> Result<()> {
        self.params.save(&dir.join("params"), "abort")?;
        let p = dir.join("last_loss.json");
        let body = serde_json::json!({ "step": self.step, "last_good": last });
        fs::write(&p, serde_json::to_vec_pretty(&body)?).map_err(|e| Error::io(&p, e))
    }

    /// Gaussians predicted for scene `s` at the current weights.
    pub fn predict(&self, s: usize) -> Result<GaussianSet> {
        net::predict(&self.net, &self.params, &self.data[s].views)
    }

    pub fn checkpoint(&self, config_hash: &str) -> Result<Checkpoint> {
        let mut params = ParamStore::default();
        for (k, t) in &self.params.tensors {
            if !k.starts_with("seg.") {
                params.insert(k.clone(), t.clone());
            }
        }
        Ok(Checkpoint {
            net: self.net.clone(),
            params,
            pca: self.pca.clone(),
            prototypes: self.data[0].scene.text_prototypes()?,
            config_hash: config_hash.to_string(),
        })
    }
}
