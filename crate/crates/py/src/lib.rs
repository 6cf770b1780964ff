//! Python module `dias`: scenes, metrics, slot reduction and checkpoints.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use dias_core::diffnum::Tensor;
use dias_core::metrics::{discovery_scores as core_scores, MeanStd};
use dias_core::scene::{generate_many, SceneConfig, SceneSample};
use dias_core::trainer::{self, EvalSummary, TrainConfig};

fn py_err(e: dias_core::Error) -> PyErr {
    if e.is_user_error() {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

fn scene_config(config: Option<&str>) -> PyResult<SceneConfig> {
    let cfg = match config {
        Some(text) => toml::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?,
        None => SceneConfig::default(),
    };
    cfg.validate().map_err(py_err)?;
    Ok(cfg)
}

/// Rows of equal width as an `[s, c]` tensor.
pub fn rows_to_tensor(rows: &[Vec<f64>]) -> Result<Tensor<f64>, String> {
    let c = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || c == 0 || rows.iter().any(|r| r.len() != c) {
        return Err("expected a non-empty list of equal-length rows".into());
    }
    Tensor::new(vec![rows.len(), c], rows.concat()).map_err(|e| e.to_string())
}

/// A generated image with its instance labels.
#[pyclass(name = "Scene", frozen, skip_from_py_object)]
#[derive(Clone)]
pub struct PyScene {
    inner: SceneSample,
}

#[pymethods]
impl PyScene {
    #[getter]
    fn height(&self) -> usize {
        self.inner.height
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    /// Row-major `H x W x 3` floats in `[0, 1]`.
    #[getter]
    fn image(&self) -> Vec<f32> {
        self.inner.image.clone()
    }

    /// Per-pixel label; 0 is background, `k` is the `k`-th object.
    #[getter]
    fn gt_masks(&self) -> Vec<u32> {
        self.inner.gt_masks.iter().map(|&l| l as u32).collect()
    }

    /// `(class_id, [x0, y0, x1, y1])` per object, boxes normalized.
    #[getter]
    fn objects(&self) -> Vec<(u32, [f32; 4])> {
        self.inner.objects.iter().map(|o| (o.class_id, o.bbox)).collect()
    }

    fn __repr__(&self) -> String {
        format!(
            "Scene(seed={}, {}x{}, objects={})",
            self.inner.seed,
            self.inner.height,
            self.inner.width,
            self.inner.objects.len()
        )
    }
}

/// Generates one scene. `config` is an optional TOML scene table.
#[pyfunction]
#[pyo3(signature = (seed, config=None))]
fn generate_scene(seed: u64, config: Option<&str>) -> PyResult<PyScene> {
    let cfg = scene_config(config)?;
    let inner = dias_core::scene::generate_scene(&cfg, seed).map_err(py_err)?;
    Ok(PyScene { inner })
}

#[pyfunction]
#[pyo3(signature = (count, seed=0, config=None))]
fn generate_scenes(count: usize, seed: u64, config: Option<&str>) -> PyResult<Vec<PyScene>> {
    let cfg = scene_config(config)?;
    let samples = generate_many(&cfg, seed, count).map_err(py_err)?;
    Ok(samples.into_iter().map(|inner| PyScene { inner }).collect())
}

/// Loads a dataset directory written by `dias gen-data`.
#[pyfunction]
fn read_dataset(path: PathBuf) -> PyResult<Vec<PyScene>> {
    let (_, samples) = dias_core::scene::read_dataset(&path).map_err(py_err)?;
    Ok(samples.into_iter().map(|inner| PyScene { inner }).collect())
}

#[pyfunction]
fn ari(gt: Vec<i64>, pred: Vec<i64>) -> PyResult<f64> {
    dias_core::metrics::ari(&gt, &pred).map_err(py_err)
}

/// ARI, foreground ARI, mBO and mIoU of a predicted segmentation. Foreground
/// scores are `None` when the image has no object.
#[pyfunction]
fn discovery_scores<'py>(py: Python<'py>, gt: Vec<u8>, pred: Vec<usize>) -> PyResult<Bound<'py, PyDict>> {
    let s = core_scores(&gt, &pred).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("ari", s.ari)?;
    d.set_item("ari_fg", s.ari_fg)?;
    d.set_item("mbo", s.mbo)?;
    d.set_item("miou", s.miou)?;
    Ok(d)
}

/// Minimum-cost assignment; returns `(column of each row, total cost)`.
#[pyfunction]
fn hungarian(cost: Vec<Vec<f64>>) -> PyResult<(Vec<usize>, f64)> {
    let a = dias_core::distill::hungarian(&cost).map_err(py_err)?;
    Ok((a.mapping, a.total_cost))
}

/// Clusters of redundant slots at cosine-distance threshold `tau`.
#[pyfunction]
fn cluster_slots(slots: Vec<Vec<f64>>, tau: f64) -> PyResult<Vec<Vec<usize>>> {
    let t = rows_to_tensor(&slots).map_err(PyValueError::new_err)?;
    let r = dias_core::redundancy::cluster_slots(&t, tau).map_err(py_err)?;
    Ok(r.clusters)
}

/// Merged slots and the keep mask.
#[pyfunction]
fn reduce_slots(slots: Vec<Vec<f64>>, tau: f64) -> PyResult<(Vec<Vec<f64>>, Vec<bool>)> {
    let t = rows_to_tensor(&slots).map_err(PyValueError::new_err)?;
    let c = t.shape()[1];
    let (out, mask) = dias_core::redundancy::reduce(&t, tau).map_err(py_err)?;
    let rows = out.data().chunks(c).map(<[f64]>::to_vec).collect();
    Ok((rows, mask.keep().to_vec()))
}

/// A random decoding order of `n` tokens: `(order, n_known)`.
#[pyfunction]
fn sample_order(n: usize, seed: u64) -> PyResult<(Vec<usize>, usize)> {
    let o = dias_core::ar_decoder::sample_order(n, &mut ChaCha8Rng::seed_from_u64(seed)).map_err(py_err)?;
    Ok((o.order, o.n_known))
}

/// Trains every seed of a TOML config file; returns the run directories.
#[pyfunction]
fn train(py: Python<'_>, config: PathBuf) -> PyResult<Vec<PathBuf>> {
    let cfg = TrainConfig::from_file(&config).map_err(py_err)?;
    py.detach(|| trainer::train(&cfg)).map_err(py_err)
}

fn mean_std<'py>(py: Python<'py>, m: Option<MeanStd>) -> PyResult<Option<Bound<'py, PyDict>>> {
    m.map(|m| {
        let d = PyDict::new(py);
        d.set_item("mean", m.mean)?;
        d.set_item("std", m.std)?;
        d.set_item("count", m.count)?;
        Ok(d)
    })
    .transpose()
}

fn summary_dict<'py>(py: Python<'py>, s: &EvalSummary) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("ari", mean_std(py, s.ari)?)?;
    d.set_item("ari_fg", mean_std(py, s.ari_fg)?)?;
    d.set_item("mbo", mean_std(py, s.mbo)?)?;
    d.set_item("miou", mean_std(py, s.miou)?)?;
    d.set_item("fraction_last_better", s.fraction_last_better)?;
    d.set_item("mean_kept_slots", s.mean_kept_slots)?;
    Ok(d)
}

/// A trained model loaded from a checkpoint directory.
#[pyclass(name = "Checkpoint", frozen)]
pub struct PyCheckpoint {
    inner: trainer::Checkpoint,
}

#[pymethods]
impl PyCheckpoint {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyCheckpoint {
            inner: trainer::load_checkpoint(&path).map_err(py_err)?,
        })
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.manifest.seed
    }

    #[getter]
    fn slots(&self) -> usize {
        self.inner.model.slots()
    }

    /// Summary metrics over `scenes`.
    fn evaluate<'py>(&self, py: Python<'py>, scenes: Vec<PyRef<'py, PyScene>>) -> PyResult<Bound<'py, PyDict>> {
        let samples: Vec<SceneSample> = scenes.iter().map(|s| s.inner.clone()).collect();
        let c = &self.inner;
        let report = py
            .detach(|| trainer::evaluate(&c.model, &c.store, &samples, c.manifest.ablation, c.manifest.seed))
            .map_err(py_err)?;
        summary_dict(py, &report.summary)
    }

    /// Per-pixel slot index of the final attention at image resolution.
    fn segment(&self, scene: PyRef<'_, PyScene>) -> PyResult<Vec<usize>> {
        let c = &self.inner;
        let s = &scene.inner;
        let inf = trainer::infer_all(&c.model, &c.store, std::slice::from_ref(s), c.manifest.ablation)
            .map_err(py_err)?;
        let i = &inf[0];
        Ok(trainer::segment(&i.last, Some(&i.mask), s.height, s.width))
    }
}

#[pymodule]
fn dias(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyScene>()?;
    m.add_class::<PyCheckpoint>()?;
    m.add_function(wrap_pyfunction!(generate_scene, m)?)?;
    m.add_function(wrap_pyfunction!(generate_scenes, m)?)?;
    m.add_function(wrap_pyfunction!(read_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(ari, m)?)?;
    m.add_function(wrap_pyfunction!(discovery_scores, m)?)?;
    m.add_function(wrap_pyfunction!(hungarian, m)?)?;
    m.add_function(wrap_pyfunction!(cluster_slots, m)?)?;
    m.add_function(wrap_pyfunction!(reduce_slots, m)?)?;
    m.add_function(wrap_pyfunction!(sample_order, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    Ok(())
}
