use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use gausstr_core::config::RunConfig;
use gausstr_core::gaussians::GaussianSet;
use gausstr_core::io::{encode_depth_pgm, encode_ppm, write_tensor};
use gausstr_core::occupancy::{iou, voxelize as voxelize_grid};
use gausstr_core::renderer;
use gausstr_core::training::{Checkpoint, LossReport, SyntheticScene, Trainer};
use gausstr_core::{Error, Result};
use serde_json::json;

use crate::artifacts::*;

fn warn_hash(what: &str, found: &str, expected: &str) {
    if found != expected {
        eprintln!("warning: {what} was produced under config {found}, this run is {expected}");
    }
}

pub fn synth(cfg: &RunConfig, out: &Path) -> Result<()> {
    let hash = cfg.hash();
    create_dir(out)?;
    write_json(
        &out.join("config.json"),
        &ConfigRecord {
            config_hash: hash.clone(),
            config: cfg.clone(),
        },
    )?;
    let sc = cfg.scene_config();
    for k in 0..cfg.scenes {
        let scene = SyntheticScene::generate(&sc, cfg.scene_seed(k))?;
        write_scene(&scene_dir(out, k), &scene, &hash)?;
    }
    println!("synth: {} scene(s), {} view(s) each -> {} [{hash}]", cfg.scenes, cfg.views, out.display());
    Ok(())
}

pub fn train(cfg: &RunConfig, data: &Path, out: &Path) -> Result<()> {
    let hash = cfg.hash();
    let mut scenes = Vec::new();
    for dir in scene_dirs(data)? {
        let (s, h) = load_scene(&dir)?;
        warn_hash(&dir.display().to_string(), &h, &hash);
        scenes.push(s);
    }
    let mut trainer = Trainer::new(cfg.net_config(), cfg.train_config(), scenes)?;
    create_dir(out)?;
    let csv_path = out.join("loss.csv");
    let file = File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
    let mut csv = BufWriter::new(file);
    writeln!(csv, "# config_hash {hash}").map_err(|e| Error::io(&csv_path, e))?;
    writeln!(csv, "{}", LossReport::CSV_HEADER).map_err(|e| Error::io(&csv_path, e))?;
    let t0 = Instant::now();
    let series = trainer.run(cfg.steps, Some(&mut csv), Some(&out.join("abort")));
    csv.flush().map_err(|e| Error::io(&csv_path, e))?;
    let series = series?;
    let last = trainer.evaluate()?;
    trainer.checkpoint(&hash)?.save(&out.join("checkpoint"))?;
    write_json(
        &out.join("config.json"),
        &ConfigRecord {
            config_hash: hash.clone(),
            config: cfg.clone(),
        },
    )?;
    write_json(
        &out.join("train.json"),
        &json!({
            "config_hash": hash,
            "steps": series.len(),
            "initial": series.first(),
            "final": last,
            "seconds": t0.elapsed().as_secs_f64(),
        }),
    )?;
    match series.first() {
        Some(first) => println!("train: {} steps, loss {:.4} -> {:.4} [{hash}]", series.len(), first.total, last.total),
        None => println!("train: 0 steps, loss {:.4} [{hash}]", last.total),
    }
    Ok(())
}

fn pick_scene(data: &Path, k: usize) -> Result<std::path::PathBuf> {
    let dirs = scene_dirs(data)?;
    dirs.get(k)
        .cloned()
        .ok_or_else(|| Error::Data(format!("scene {k} requested but {} has {}", data.display(), dirs.len())))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    // Accept either the train output directory or the checkpoint inside it.
    let inner = path.join("checkpoint");
    Checkpoint::load(if inner.join("checkpoint.json").exists() { &inner } else { path })
}

/// Feature preview: the first three channels, magnitudes scaled by the
/// image-wide maximum. An empty rendering is black.
fn preview(feat: &[f64], channels: usize, pixels: usize) -> Vec<[f64; 3]> {
    let k = channels.min(3);
    let max = (0..pixels)
        .flat_map(|p| (0..k).map(move |c| feat[p * channels + c].abs()))
        .fold(0.0f64, f64::max);
    let scale = if max > 0.0 { 1.0 / max } else { 0.0 };
    (0..pixels)
        .map(|p| {
            let mut rgb = [0.0; 3];
            for c in 0..k {
                rgb[c] = feat[p * channels + c].abs() * scale;
            }
            rgb
        })
        .collect()
}

pub fn render(
    cfg: &RunConfig,
    data: &Path,
    scene: usize,
    ckpt: Option<&Path>,
    gaussians: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let hash = cfg.hash();
    let (sd, _) = load_scene(&pick_scene(data, scene)?)?;
    let set: GaussianSet = match (ckpt, gaussians) {
        (Some(c), _) => {
            let ck = load_checkpoint(c)?;
            warn_hash("checkpoint", &ck.config_hash, &hash);
            ck.semantic_inputs(&ck.predict(&sd.views)?)?.0
        }
        (None, Some(g)) => GaussianSet::load(g)?.0,
        (None, None) => return Err(Error::Config("render needs --ckpt or --gaussians".into())),
    };
    create_dir(out)?;
    set.save(&out.join("gaussians"), &hash)?;
    let arrays = set.arrays();
    let (h, w) = (sd.scene.feature_height, sd.scene.feature_width);
    for (v, view) in sd.views.iter().enumerate() {
        let r = renderer::render(&arrays.params(), &view.cam, h, w)?;
        write_tensor(&view_file(out, v, "features"), &r.feat_tensor())?;
        write_tensor(&view_file(out, v, "depth"), &r.depth_tensor())?;
        write_tensor(&view_file(out, v, "trans"), &r.trans_tensor())?;
        let ppm = stamp_pnm(encode_ppm(&preview(&r.feat, r.channels, h * w), w, h), &hash);
        let p = out.join(format!("view_{v}_features.ppm"));
        std::fs::write(&p, ppm).map_err(|e| Error::io(&p, e))?;
        let pgm = stamp_pnm(encode_depth_pgm(&r.depth, w, h), &hash);
        let p = out.join(format!("view_{v}_depth.pgm"));
        std::fs::write(&p, pgm).map_err(|e| Error::io(&p, e))?;
    }
    write_json(
        &out.join("render.json"),
        &json!({ "config_hash": hash, "views": sd.views.len(), "height": h, "width": w, "gaussians": set.len() }),
    )?;
    println!("render: {} Gaussians into {} view(s) at {w}x{h} -> {}", set.len(), sd.views.len(), out.display());
    Ok(())
}

pub fn voxelize(cfg: &RunConfig, data: &Path, scene: usize, ckpt: &Path, out: &Path) -> Result<()> {
    let hash = cfg.hash();
    let (sd, _) = load_scene(&pick_scene(data, scene)?)?;
    let ck = load_checkpoint(ckpt)?;
    warn_hash("checkpoint", &ck.config_hash, &hash);
    let (set, protos) = ck.semantic_inputs(&ck.predict(&sd.views)?)?;
    let grid = voxelize_grid(&set.arrays().params(), &protos, &sd.scene.grid, cfg.tau_occ)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    let rec = GridRecord {
        config_hash: hash.clone(),
        class_names: protos.names().to_vec(),
        num_classes: protos.num_classes(),
        occupied: grid.occupied(),
        tau_occ: Some(cfg.tau_occ),
    };
    save_grid(out, &grid, &rec)?;
    println!("voxelize: {} occupied cells -> {} [{hash}]", rec.occupied, out.display());
    Ok(())
}

pub fn eval(pred: &Path, gt: &Path, out: &Path, force: bool) -> Result<()> {
    let (pg, pr) = load_grid(pred)?;
    let (gg, gr) = load_grid(gt)?;
    let ph = pr.as_ref().map(|r| r.config_hash.clone());
    let gh = gr.as_ref().map(|r| r.config_hash.clone());
    if ph.is_none() || ph != gh {
        let show = |h: &Option<String>| h.clone().unwrap_or_else(|| "<none>".into());
        let msg = format!("config hash mismatch: prediction {} vs ground truth {}", show(&ph), show(&gh));
        if !force {
            return Err(Error::Data(format!("{msg} (use --force to evaluate anyway)")));
        }
        eprintln!("warning: {msg}");
    }
    let names = gr
        .or(pr)
        .map(|r| r.class_names)
        .unwrap_or_else(|| (0..gg.num_classes.max(pg.num_classes)).map(|k| format!("class_{k}")).collect());
    let mut metrics = iou(&pg, &gg, &names)?;
    metrics.config_hash = ph;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_json(out, &metrics)?;
    println!("eval: IoU {:.4} mIoU {:.4} -> {}", metrics.binary_iou, metrics.miou, out.display());
    Ok(())
}
