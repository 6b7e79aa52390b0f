//! On-disk layout shared by the subcommands.
//!
//! A data directory from `synth` holds `config.json` and one `scene_NNN/`
//! per scene with `scene.json`, per-view `view_V_{features,depth,classes}.gtsr`
//! and the ground truth `gt.gocc` with its `gt.gocc.json` sidecar.

use std::fs;
use std::path::{Path, PathBuf};

use gausstr_core::config::RunConfig;
use gausstr_core::io::{read_tensor, write_tensor};
use gausstr_core::maps::{ClassMap, DepthMap, FeatureMap};
use gausstr_core::net::ViewInput;
use gausstr_core::occupancy::OccupancyGrid;
use gausstr_core::training::{OracleView, SceneData, SyntheticScene};
use gausstr_core::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Serialize, Deserialize)]
pub struct ConfigRecord {
    pub config_hash: String,
    pub config: RunConfig,
}

#[derive(Serialize, Deserialize)]
pub struct SceneRecord {
    pub config_hash: String,
    pub scene: SyntheticScene,
}

/// Sidecar of a `.gocc` grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridRecord {
    pub config_hash: String,
    pub class_names: Vec<String>,
    pub num_classes: usize,
    pub occupied: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau_occ: Option<f64>,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&buf).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

pub fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn sidecar(grid: &Path) -> PathBuf {
    let mut s = grid.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn save_grid(path: &Path, grid: &OccupancyGrid, rec: &GridRecord) -> Result<()> {
    grid.save(path)?;
    write_json(&sidecar(path), rec)
}

pub fn load_grid(path: &Path) -> Result<(OccupancyGrid, Option<GridRecord>)> {
    let grid = OccupancyGrid::load(path)?;
    let side = sidecar(path);
    let rec = if side.exists() { Some(read_json(&side)?) } else { None };
    Ok((grid, rec))
}

pub fn scene_dir(data: &Path, k: usize) -> PathBuf {
    data.join(format!("scene_{k:03}"))
}

pub fn view_file(dir: &Path, v: usize, what: &str) -> PathBuf {
    dir.join(format!("view_{v}_{what}.gtsr"))
}

pub fn write_scene(dir: &Path, scene: &SyntheticScene, hash: &str) -> Result<()> {
    create_dir(dir)?;
    write_json(
        &dir.join("scene.json"),
        &SceneRecord {
            config_hash: hash.to_string(),
            scene: scene.clone(),
        },
    )?;
    for v in 0..scene.num_views() {
        let o = scene.oracle_render(v)?;
        write_tensor(&view_file(dir, v, "features"), &o.features.to_tensor())?;
        write_tensor(&view_file(dir, v, "depth"), &o.depth.to_tensor())?;
        write_tensor(&view_file(dir, v, "classes"), &o.classes.to_tensor())?;
    }
    let gt = scene.ground_truth()?;
    let rec = GridRecord {
        config_hash: hash.to_string(),
        class_names: scene.class_names.clone(),
        num_classes: scene.num_classes(),
        occupied: gt.occupied(),
        tau_occ: None,
    };
    save_grid(&dir.join("gt.gocc"), &gt, &rec)
}

/// Scene directories of a data directory, in order.
pub fn scene_dirs(data: &Path) -> Result<Vec<PathBuf>> {
    if data.join("scene.json").exists() {
        return Ok(vec![data.to_path_buf()]);
    }
    let mut dirs = Vec::new();
    while scene_dir(data, dirs.len()).join("scene.json").exists() {
        dirs.push(scene_dir(data, dirs.len()));
    }
    if dirs.is_empty() {
        return Err(Error::Data(format!("{} holds no scenes", data.display())));
    }
    Ok(dirs)
}

/// Scene plus the oracle maps stored next to it.
pub fn load_scene(dir: &Path) -> Result<(SceneData, String)> {
    let rec: SceneRecord = read_json(&dir.join("scene.json"))?;
    let scene = rec.scene;
    scene.validate().map_err(|e| Error::Data(format!("{}: {e}", dir.display())))?;
    let mut oracle = Vec::new();
    let mut views = Vec::new();
    for v in 0..scene.num_views() {
        let data_err = |e: Error| Error::Data(format!("{} view {v}: {e}", dir.display()));
        let features = FeatureMap::from_tensor(&read_tensor(&view_file(dir, v, "features"))?).map_err(data_err)?;
        let depth = DepthMap::from_tensor(&read_tensor(&view_file(dir, v, "depth"))?).map_err(data_err)?;
        let classes = ClassMap::from_tensor(&read_tensor(&view_file(dir, v, "classes"))?).map_err(data_err)?;
        let dims = [
            (features.height, features.width),
            (depth.height, depth.width),
            (classes.height, classes.width),
        ];
        if dims.iter().any(|&d| d != (scene.feature_height, scene.feature_width)) {
            return Err(Error::Data(format!("{} view {v}: map sizes disagree with the scene", dir.display())));
        }
        views.push(ViewInput {
            features: features.clone(),
            depth: depth.clone(),
            cam: scene.camera(v)?,
        });
        oracle.push(OracleView { features, depth, classes });
    }
    Ok((SceneData { scene, oracle, views }, rec.config_hash))
}

/// Insert a `# config_hash` comment after the magic line of a PNM image.
pub fn stamp_pnm(mut bytes: Vec<u8>, hash: &str) -> Vec<u8> {
    let comment = format!("# config_hash {hash}\n");
    bytes.splice(3..3, comment.into_bytes());
    bytes
}
