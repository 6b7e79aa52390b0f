use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use gausstr_core::gaussians::GaussianSet;
use gausstr_core::io::read_tensor;
use serde_json::Value;

const SMALL: &str = r#"
C = 16
C_R = 3
image_width = 128
image_height = 96
render_downsample = 8
queries_per_view = 16
layers = 1
heads = 2
levels = 2
points = 2
steps = 5
pca_samples = 500
"#;

fn gausstr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gausstr"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = gausstr(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn code(args: &[&str]) -> i32 {
    gausstr(args).status.code().expect("exit code")
}

fn small_config(dir: &Path) -> String {
    let p = dir.join("run.toml");
    fs::write(&p, SMALL).unwrap();
    p.to_str().unwrap().to_string()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn files(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(files(&p));
        } else {
            out.push(p);
        }
    }
    out.sort();
    out
}

#[test]
fn synth_is_byte_identical_and_writes_one_map_per_view() {
    let t = tempfile::tempdir().unwrap();
    let cfg = small_config(t.path());
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    ok(&["synth", "--config", &cfg, "--out", s(&a)]);
    ok(&["synth", "--config", &cfg, "--out", s(&b), "--threads", "1"]);
    let fa = files(&a);
    assert_eq!(fa.len(), files(&b).len());
    for p in &fa {
        let q = b.join(p.strip_prefix(&a).unwrap());
        assert_eq!(fs::read(p).unwrap(), fs::read(&q).unwrap(), "{} differs", p.display());
    }
    let names: Vec<String> = fa.iter().map(|p| p.file_name().unwrap().to_string_lossy().into_owned()).collect();
    assert_eq!(names.iter().filter(|n| n.ends_with("_features.gtsr")).count(), 2);
    assert_eq!(names.iter().filter(|n| n.ends_with("_depth.gtsr")).count(), 2);

    let c = t.path().join("c");
    ok(&["synth", "--config", &cfg, "--out", s(&c), "--seed=1"]);
    assert_ne!(
        fs::read(a.join("scene_000/scene.json")).unwrap(),
        fs::read(c.join("scene_000/scene.json")).unwrap()
    );
}

#[test]
fn ground_truth_matches_box_voxel_overlap() {
    let t = tempfile::tempdir().unwrap();
    let cfg = small_config(t.path());
    let data = t.path().join("data");
    ok(&["synth", "--config", &cfg, "--out", s(&data), "--scenes=3"]);
    for k in 0..3 {
        let dir = data.join(format!("scene_{k:03}"));
        let scene: Value = serde_json::from_slice(&fs::read(dir.join("scene.json")).unwrap()).unwrap();
        let grid = &scene["scene"]["grid"];
        let f = |v: &Value| v.as_f64().unwrap();
        let (gmin, voxel) = (&grid["min"], f(&grid["voxel"]));
        // Per-axis index ranges of voxel centres inside each box, unioned.
        let mut cells = std::collections::BTreeSet::new();
        for b in scene["scene"]["boxes"].as_array().unwrap() {
            let range = |a: usize| {
                let lo = ((f(&b["min"][a]) - f(&gmin[a])) / voxel - 0.5).ceil() as i64;
                let hi = ((f(&b["max"][a]) - f(&gmin[a])) / voxel - 0.5).floor() as i64;
                lo.max(0)..=hi
            };
            for i in range(0) {
                for j in range(1) {
                    for l in range(2) {
                        cells.insert((i, j, l));
                    }
                }
            }
        }
        let side: Value = serde_json::from_slice(&fs::read(dir.join("gt.gocc.json")).unwrap()).unwrap();
        assert!(!cells.is_empty());
        assert_eq!(side["occupied"].as_u64().unwrap() as usize, cells.len());
    }
}

#[test]
fn eval_of_ground_truth_against_itself_is_perfect() {
    let t = tempfile::tempdir().unwrap();
    let cfg = small_config(t.path());
    let data = t.path().join("data");
    ok(&["synth", "--config", &cfg, "--out", s(&data)]);
    let gt = data.join("scene_000/gt.gocc");
    let m = t.path().join("m.json");
    ok(&["eval", "--pred", s(&gt), "--gt", s(&gt), "--out", s(&m)]);
    let v: Value = serde_json::from_slice(&fs::read(&m).unwrap()).unwrap();
    assert_eq!(v["miou"], 1.0);
    assert_eq!(v["binary_iou"], 1.0);
    assert!(v["config_hash"].is_string());
}

#[test]
fn eval_refuses_mismatched_hashes_unless_forced() {
    let t = tempfile::tempdir().unwrap();
    let cfg = small_config(t.path());
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    ok(&["synth", "--config", &cfg, "--out", s(&a)]);
    ok(&["synth", "--config", &cfg, "--out", s(&b), "--seed=3"]);
    let (ga, gb) = (a.join("scene_000/gt.gocc"), b.join("scene_000/gt.gocc"));
    let m = t.path().join("m.json");
    let out = gausstr(&["eval", "--pred", s(&gb), "--gt", s(&ga), "--out", s(&m)]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("hash"));
    assert!(!m.exists());
    ok(&["eval", "--pred", s(&gb), "--gt", s(&ga), "--out", s(&m), "--force"]);
    assert!(m.exists());
}

#[test]
fn rendering_no_gaussians_is_black_and_fully_transparent() {
    let t = tempfile::tempdir().unwrap();
    let cfg = small_config(t.path());
    let data = t.path().join("data");
    ok(&["synth", "--config", &cfg, "--out", s(&data)]);
    let g = t.path().join("empty");
    GaussianSet::empty(16).save(&g, "none").unwrap();
    let out = t.path().join("render");
    ok(&["render", "--config", &cfg, "--data", s(&data), "--gaussians", s(&g), "--out", s(&out)]);
    for v in 0..2 {
        let trans = read_tensor(&out.join(format!("view_{v}_trans.gtsr"))).unwrap();
        assert_eq!(trans.shape(), &[12, 16]);
        assert!(trans.data().iter().all(|&x| x == 1.0));
        let ppm = fs::read(out.join(format!("view_{v}_features.ppm"))).unwrap();
        assert!(ppm.starts_with(b"P6\n# config_hash "));
        let pixels = &ppm[ppm.len() - 12 * 16 * 3..];
        assert!(pixels.iter().all(|&b| b == 0));
    }
}

#[test]
fn full_pipeline_runs_and_stamps_every_output() {
    let t = tempfile::tempdir().unwrap();
    let cfg = small_config(t.path());
    let data = t.path().join("data");
    let run = t.path().join("run");
    ok(&["synth", "--config", &cfg, "--out", s(&data)]);
    ok(&["train", "--config", &cfg, "--data", s(&data), "--out", s(&run)]);
    let hash: Value = serde_json::from_slice(&fs::read(run.join("config.json")).unwrap()).unwrap();
    let hash = hash["config_hash"].as_str().unwrap().to_string();

    let csv = fs::read_to_string(run.join("loss.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], format!("# config_hash {hash}"));
    assert_eq!(lines[1], "step,total,feat,silog,l1,seg");
    assert_eq!(lines.len(), 2 + 5);
    assert!(lines[2].starts_with("0,"));

    let grid = t.path().join("pred/grid.gocc");
    ok(&["voxelize", "--config", &cfg, "--data", s(&data), "--ckpt", s(&run), "--out", s(&grid)]);
    let m = t.path().join("metrics.json");
    ok(&["eval", "--pred", s(&grid), "--gt", s(&data.join("scene_000/gt.gocc")), "--out", s(&m)]);
    let v: Value = serde_json::from_slice(&fs::read(&m).unwrap()).unwrap();
    for k in ["binary_iou", "miou"] {
        let x = v[k].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&x));
    }
    assert_eq!(v["config_hash"], hash.as_str());

    let r = t.path().join("render");
    ok(&["render", "--config", &cfg, "--data", s(&data), "--ckpt", s(&run), "--out", s(&r)]);
    let feats = read_tensor(&r.join("view_0_features.gtsr")).unwrap();
    assert_eq!(feats.shape(), &[12, 16, 3]);
    assert!(fs::read(r.join("view_1_depth.pgm")).unwrap().starts_with(format!("P5\n# config_hash {hash}\n").as_bytes()));
    let side: Value = serde_json::from_slice(&fs::read(r.join("gaussians/gaussians.json")).unwrap()).unwrap();
    assert_eq!(side["config_hash"], hash.as_str());
}

#[test]
fn training_is_deterministic_across_thread_counts() {
    let t = tempfile::tempdir().unwrap();
    let cfg = small_config(t.path());
    let data = t.path().join("data");
    ok(&["synth", "--config", &cfg, "--out", s(&data)]);
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    ok(&["train", "--config", &cfg, "--data", s(&data), "--out", s(&a), "--threads", "1"]);
    let out = Command::new(env!("CARGO_BIN_EXE_gausstr"))
        .args(["train", "--config", &cfg, "--data", s(&data), "--out", s(&b)])
        .env("GAUSSTR_THREADS", "3")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(fs::read(a.join("loss.csv")).unwrap(), fs::read(b.join("loss.csv")).unwrap());
    for f in files(&a.join("checkpoint")) {
        let g = b.join("checkpoint").join(f.strip_prefix(a.join("checkpoint")).unwrap());
        assert_eq!(fs::read(&f).unwrap(), fs::read(&g).unwrap(), "{} differs", f.display());
    }
}

#[test]
fn exit_codes_separate_config_data_and_numerical_failures() {
    let t = tempfile::tempdir().unwrap();
    let cfg = small_config(t.path());
    let data = t.path().join("data");
    let out = s(&data);
    assert_eq!(code(&["synth", "--config", &cfg, "--out", out, "--no_such_key=1"]), 2);
    assert_eq!(code(&["synth", "--config", &cfg, "--out", out, "--C_R=64"]), 2);
    assert_eq!(code(&["synth", "--config", &cfg, "--out", out, "--steps=lots"]), 2);
    let bad = t.path().join("bad.toml");
    fs::write(&bad, "learning_rate = 1.0\n").unwrap();
    assert_eq!(code(&["synth", "--config", s(&bad), "--out", out]), 2);

    let missing = t.path().join("missing");
    assert_eq!(code(&["train", "--config", &cfg, "--data", s(&missing), "--out", s(&t.path().join("r"))]), 3);
    ok(&["synth", "--config", &cfg, "--out", out]);
    fs::write(data.join("scene_000/view_1_depth.gtsr"), b"GTSR\x01").unwrap();
    assert_eq!(code(&["train", "--config", &cfg, "--data", out, "--out", s(&t.path().join("r"))]), 3);

    ok(&["synth", "--config", &cfg, "--out", out]);
    let run = t.path().join("nan");
    assert_eq!(code(&["train", "--config", &cfg, "--data", out, "--out", s(&run), "--lr=1e300"]), 4);
    assert!(run.join("abort/last_loss.json").exists());
}
