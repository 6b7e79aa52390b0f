use std::path::Path;

use gausstr_cli::commands;
use gausstr_core::config::RunConfig;
use gausstr_core::gaussians::{Gaussian, GaussianArrays};
use gausstr_core::geometry::{Camera, Quaternion};
use gausstr_core::occupancy::iou as grid_iou;
use gausstr_core::Error;
use pyo3::exceptions::{PyArithmeticError, PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyString};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Numerical { .. } => PyArithmeticError::new_err(e.to_string()),
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

/// Round-trip a serializable value into Python objects through JSON.
fn json_to_py<T: serde::Serialize>(py: Python<'_>, v: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(v).map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

/// Defaults plus `overrides`; non-string values are passed as JSON.
fn config(py: Python<'_>, overrides: Option<&Bound<'_, PyDict>>) -> PyResult<RunConfig> {
    let mut pairs = Vec::new();
    if let Some(d) = overrides {
        let json = py.import("json")?;
        for (k, v) in d.iter() {
            let key: String = k.extract()?;
            let val: String = if v.is_instance_of::<PyString>() {
                v.extract()?
            } else {
                json.call_method1("dumps", (v,))?.extract()?
            };
            pairs.push((key, val));
        }
    }
    RunConfig::default().with_overrides(&pairs).map_err(to_py)
}

/// Effective configuration as a dict.
#[pyfunction]
#[pyo3(signature = (overrides=None))]
fn run_config(py: Python<'_>, overrides: Option<&Bound<'_, PyDict>>) -> PyResult<Py<PyAny>> {
    json_to_py(py, &config(py, overrides)?)
}

#[pyfunction]
#[pyo3(signature = (overrides=None))]
fn config_hash(py: Python<'_>, overrides: Option<&Bound<'_, PyDict>>) -> PyResult<String> {
    Ok(config(py, overrides)?.hash())
}

/// Write synthetic scenes to `out`; returns the config hash.
#[pyfunction]
#[pyo3(signature = (out, overrides=None))]
fn synth(py: Python<'_>, out: &str, overrides: Option<&Bound<'_, PyDict>>) -> PyResult<String> {
    let cfg = config(py, overrides)?;
    commands::synth(&cfg, Path::new(out)).map_err(to_py)?;
    Ok(cfg.hash())
}

/// Train on `data` and write the run to `out`; returns the train report.
#[pyfunction]
#[pyo3(signature = (data, out, overrides=None))]
fn train(py: Python<'_>, data: &str, out: &str, overrides: Option<&Bound<'_, PyDict>>) -> PyResult<Py<PyAny>> {
    let cfg = config(py, overrides)?;
    commands::train(&cfg, Path::new(data), Path::new(out)).map_err(to_py)?;
    let text = std::fs::read_to_string(Path::new(out).join("train.json"))?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

#[pyfunction]
#[pyo3(signature = (data, ckpt, out, scene=0, overrides=None))]
fn voxelize(
    py: Python<'_>,
    data: &str,
    ckpt: &str,
    out: &str,
    scene: usize,
    overrides: Option<&Bound<'_, PyDict>>,
) -> PyResult<()> {
    let cfg = config(py, overrides)?;
    commands::voxelize(&cfg, Path::new(data), scene, Path::new(ckpt), Path::new(out)).map_err(to_py)
}

/// IoU metrics of two GOCC grids. Hashes are not checked.
#[pyfunction]
fn iou(py: Python<'_>, pred: &str, gt: &str) -> PyResult<Py<PyAny>> {
    let (p, pr) = gausstr_cli::artifacts::load_grid(Path::new(pred)).map_err(to_py)?;
    let (g, gr) = gausstr_cli::artifacts::load_grid(Path::new(gt)).map_err(to_py)?;
    let names = gr
        .or(pr)
        .map(|r| r.class_names)
        .unwrap_or_else(|| (0..g.num_classes.max(p.num_classes)).map(|k| format!("class_{k}")).collect());
    json_to_py(py, &grid_iou(&p, &g, &names).map_err(to_py)?)
}

/// Render Gaussians through an identity-pose pinhole camera. Each Gaussian
/// is `(mean, scale, quat_wxyz, opacity, feat)`.
#[pyfunction]
#[allow(clippy::type_complexity)]
fn render(
    py: Python<'_>,
    gaussians: Vec<([f64; 3], [f64; 3], [f64; 4], f64, Vec<f64>)>,
    focal: f64,
    width: usize,
    height: usize,
) -> PyResult<Py<PyAny>> {
    let c = gaussians.first().map_or(1, |g| g.4.len());
    let gs: Vec<Gaussian> = gaussians
        .into_iter()
        .map(|(mean, scale, q, opacity, feat)| Gaussian {
            mean,
            scale,
            rot: Quaternion::from_array(q),
            opacity,
            feat,
        })
        .collect();
    let arrays = GaussianArrays::from_gaussians(&gs, c);
    let cam = Camera::with_identity_pose(focal, focal, width as f64 / 2.0, height as f64 / 2.0, width, height).map_err(to_py)?;
    let r = gausstr_core::renderer::render(&arrays.params(), &cam, height, width).map_err(to_py)?;
    let out = serde_json::json!({
        "feat": r.feat,
        "depth": r.depth,
        "trans": r.trans,
        "expected_depth": r.expected_depth(),
        "channels": r.channels,
    });
    json_to_py(py, &out)
}

#[pymodule]
fn gausstr(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(run_config, m)?)?;
    m.add_function(wrap_pyfunction!(config_hash, m)?)?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(voxelize, m)?)?;
    m.add_function(wrap_pyfunction!(iou, m)?)?;
    m.add_function(wrap_pyfunction!(render, m)?)?;
    Ok(())
}
