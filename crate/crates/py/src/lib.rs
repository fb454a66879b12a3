//! Python bindings over the core crate, single precision.
//!
//! Build with `cargo build -p featreg-py --release`, then rename
//! `libfeatreg_py.so` to `featreg_py.so` somewhere on `PYTHONPATH`.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use featreg::datagen::{
    build_dataset, DataSide, DatasetSpec, LabeledSet, PairSet, SceneSpec, SplitCounts,
    TransformSpec,
};
use featreg::inversion::{self, InversionConfig};
use featreg::metrics::{dataset_distance as core_distance, ReferenceScore};
use featreg::nn::{Checkpoint, NetworkConfig};
use featreg::optim::SgdConfig;
use featreg::transfer::{self, FeatureSelection};
use featreg::{ckpt, kernels, netpbm, Error, Tensor};

fn pyerr(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        Error::InvalidInput(_) | Error::Format { .. } => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn parse_side(s: &str) -> PyResult<DataSide> {
    match s {
        "d1" => Ok(DataSide::D1),
        "d2" => Ok(DataSide::D2),
        other => Err(PyValueError::new_err(format!("side must be d1 or d2, got {other:?}"))),
    }
}

fn sgd(iters: u64, batch: usize, lr: f64, momentum: f64, weight_decay: f64, power: f64) -> SgdConfig {
    SgdConfig { base_lr: lr, momentum, weight_decay, power, max_iter: iters, batch_size: batch }
}

fn selection(taps: Vec<String>, weights: Option<Vec<f64>>) -> PyResult<FeatureSelection> {
    let weights = weights.unwrap_or_else(|| vec![1.0; taps.len()]);
    if taps.len() != weights.len() {
        return Err(PyValueError::new_err("taps and weights must have equal length"));
    }
    FeatureSelection::new(taps.into_iter().zip(weights).collect()).map_err(pyerr)
}

/// A segmentation network checkpoint (single precision).
#[pyclass]
struct Network {
    inner: Checkpoint<f32>,
}

#[pymethods]
impl Network {
    /// Randomly initialized network for `classes` output classes.
    #[new]
    fn new(classes: usize, seed: u64) -> PyResult<Self> {
        let inner = Checkpoint::init(NetworkConfig::desk_default(classes), seed).map_err(pyerr)?;
        Ok(Network { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Network { inner: ckpt::load(&path).map_err(pyerr)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        ckpt::save(&self.inner, &path).map_err(pyerr)
    }

    #[getter]
    fn classes(&self) -> usize {
        self.inner.config.class_count
    }

    #[getter]
    fn iterations(&self) -> u64 {
        self.inner.iterations
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    fn parameter_names(&self) -> Vec<String> {
        self.inner.param_names().map(str::to_string).collect()
    }

    /// Per-pixel class labels for one image given as a flat planar RGB
    /// list (3*h*w floats in [0,1], channel-major).
    fn predict(&self, pixels: Vec<f32>, height: usize, width: usize) -> PyResult<Vec<u8>> {
        let x = Tensor::new(pixels, &[1, 3, height, width]).map_err(pyerr)?;
        let mut tape = featreg::Tape::new();
        let (logits, _) = self.inner.forward_with_taps(&mut tape, &x).map_err(pyerr)?;
        Ok(kernels::argmax_channels(logits.shape(), logits.data()))
    }

    /// Mean class accuracy, mean IoU and per-class scores on one dataset
    /// split. Returns a dict.
    #[pyo3(signature = (dataset, split="test", side="d2", batch=8))]
    fn evaluate(
        &self,
        py: Python<'_>,
        dataset: PathBuf,
        split: &str,
        side: &str,
        batch: usize,
    ) -> PyResult<Py<PyAny>> {
        let data = LabeledSet::load(&dataset, split, parse_side(side)?).map_err(pyerr)?;
        let (scores, _) = transfer::evaluate(&self.inner, &data, batch).map_err(pyerr)?;
        let d = pyo3::types::PyDict::new(py);
        d.set_item("acc", scores.mean_class_acc)?;
        d.set_item("miou", scores.miou)?;
        d.set_item("class_acc", scores.class_acc)?;
        d.set_item("class_iou", scores.class_iou)?;
        Ok(d.into_any().unbind())
    }

    fn __repr__(&self) -> String {
        format!(
            "Network(classes={}, iterations={}, seed={})",
            self.inner.config.class_count, self.inner.iterations, self.inner.seed
        )
    }
}

/// Writes a paired two-domain corpus under `path`. `transform` is one of
/// none, photocopy, ripple, cubism (default parameters).
#[pyfunction]
#[pyo3(signature = (path, transform="none", seed=0, train=2000, val=200, test=200, size=64, classes=5))]
#[allow(clippy::too_many_arguments)]
fn generate_dataset(
    path: PathBuf,
    transform: &str,
    seed: u64,
    train: usize,
    val: usize,
    test: usize,
    size: usize,
    classes: usize,
) -> PyResult<()> {
    let transform = match transform {
        "none" => TransformSpec::None,
        "photocopy" => TransformSpec::photocopy_default(),
        "ripple" => TransformSpec::ripple_default(),
        "cubism" => TransformSpec::cubism_default(),
        other => return Err(PyValueError::new_err(format!("unknown transform {other:?}"))),
    };
    let spec = DatasetSpec {
        seed,
        scene: SceneSpec { size, class_count: classes, ..SceneSpec::default() },
        transform,
        counts: SplitCounts { train, val, test },
    };
    build_dataset(&path, &spec).map_err(pyerr)
}

/// Trains `net` in place from pixel labels; returns the loss history as
/// a list of (iteration, lr, loss).
#[pyfunction]
#[pyo3(signature = (net, dataset, side="d1", iters=3000, batch=8, lr=1e-2, momentum=0.9, weight_decay=5e-4, power=0.9, seed=0))]
#[allow(clippy::too_many_arguments)]
fn train_supervised(
    net: &mut Network,
    dataset: PathBuf,
    side: &str,
    iters: u64,
    batch: usize,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
    power: f64,
    seed: u64,
) -> PyResult<Vec<(u64, f64, f64)>> {
    let data = LabeledSet::load(&dataset, "train", parse_side(side)?).map_err(pyerr)?;
    let cfg = sgd(iters, batch, lr, momentum, weight_decay, power);
    let history =
        transfer::train_supervised(&mut net.inner, &data, &cfg, seed, |_| {}).map_err(pyerr)?;
    Ok(history.into_iter().map(|r| (r.iter, r.lr, r.loss)).collect())
}

/// Adapts a frozen `teacher` to the shifted domain from image pairs
/// alone; returns (student, history).
#[pyfunction]
#[pyo3(signature = (teacher, dataset, taps, weights=None, iters=2000, batch=8, lr=2.5e-7, momentum=0.9, weight_decay=0.0, power=0.9, seed=0))]
#[allow(clippy::too_many_arguments)]
fn train_transfer(
    teacher: &Network,
    dataset: PathBuf,
    taps: Vec<String>,
    weights: Option<Vec<f64>>,
    iters: u64,
    batch: usize,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
    power: f64,
    seed: u64,
) -> PyResult<(Network, Vec<(u64, f64, f64)>)> {
    let sel = selection(taps, weights)?;
    let pairs = PairSet::load(&dataset, "train").map_err(pyerr)?;
    let cfg = sgd(iters, batch, lr, momentum, weight_decay, power);
    let (student, history) =
        transfer::train_transfer(&teacher.inner, &pairs, &sel, &cfg, seed, |_| {}).map_err(pyerr)?;
    Ok((
        Network { inner: student },
        history.into_iter().map(|r| (r.iter, r.lr, r.loss)).collect(),
    ))
}

/// Normalized degradation (percent) between a reference (acc, miou) and a
/// shifted-domain score pair.
#[pyfunction]
fn dataset_distance(reference: (f64, f64), scores: (f64, f64)) -> PyResult<f64> {
    let r = ReferenceScore::new(reference.0, reference.1).map_err(pyerr)?;
    let s = ReferenceScore::new(scores.0, scores.1).map_err(pyerr)?;
    core_distance(&r, &s).map_err(pyerr)
}

/// Gradient-descends noise pixels until their features match the
/// reference image's. Returns (flat planar pixels, history).
#[pyfunction]
#[pyo3(signature = (net, pixels, height, width, content=None, style=None, iters=2000, step=1.0, seed=0))]
#[allow(clippy::too_many_arguments)]
fn invert(
    net: &Network,
    pixels: Vec<f32>,
    height: usize,
    width: usize,
    content: Option<Vec<String>>,
    style: Option<Vec<String>>,
    iters: u64,
    step: f64,
    seed: u64,
) -> PyResult<(Vec<f32>, Vec<(u64, f64, f64)>)> {
    let reference = Tensor::new(pixels, &[1, 3, height, width]).map_err(pyerr)?;
    let defaults = InversionConfig::default();
    let with_unit = |taps: Vec<String>| taps.into_iter().map(|t| (t, 1.0)).collect();
    let cfg = InversionConfig {
        content: content.map_or(defaults.content, with_unit),
        style: style.map_or(defaults.style, with_unit),
        iterations: iters,
        step,
        seed,
    };
    let (image, history) = inversion::invert(&net.inner, &reference, &cfg, |_| {}).map_err(pyerr)?;
    Ok((
        image.data().to_vec(),
        history.into_iter().map(|r| (r.iter, r.lr, r.loss)).collect(),
    ))
}

/// Reads a binary PPM into (height, width, flat planar RGB in [0,1]).
#[pyfunction]
fn load_image(path: PathBuf) -> PyResult<(usize, usize, Vec<f32>)> {
    let (w, h, rgb) = netpbm::read_ppm(&path).map_err(pyerr)?;
    let plane = w * h;
    let mut out = vec![0f32; 3 * plane];
    for p in 0..plane {
        for c in 0..3 {
            out[c * plane + p] = rgb[p * 3 + c] as f32 / 255.0;
        }
    }
    Ok((h, w, out))
}

#[pymodule]
fn featreg_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Network>()?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(train_supervised, m)?)?;
    m.add_function(wrap_pyfunction!(train_transfer, m)?)?;
    m.add_function(wrap_pyfunction!(dataset_distance, m)?)?;
    m.add_function(wrap_pyfunction!(invert, m)?)?;
    m.add_function(wrap_pyfunction!(load_image, m)?)?;
    Ok(())
}
