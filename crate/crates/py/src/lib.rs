//! Python bindings: point clouds, neighbor search, evaluation, synthetic
//! scenes, training, benchmarking and gradient checks.
//!
//! Each binding is a thin shell over a plain Rust helper in this file so the
//! conversions can be tested without an interpreter.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use lsnet_core::bench::BenchMode;
use lsnet_core::cloud_io::{self, Format};
use lsnet_core::lsnet::{self, parse_config, Evaluation};
use lsnet_core::neighbors::{Projection, SpatialIndex};
use lsnet_core::verify::{self, CheckModule};
use lsnet_core::Error;

fn to_py(e: Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Row-major `n x k` neighbor indices of every point among `positions`.
pub fn knn_rows(positions: &[[f64; 3]], k: usize, projection: &str) -> lsnet_core::Result<Vec<Vec<u32>>> {
    let proj: Projection = projection.parse()?;
    let index = SpatialIndex::build(positions, proj)?;
    let table = lsnet_core::neighbors::knn(&index, positions, k)?;
    Ok((0..table.rows()).map(|i| table.row(i).to_vec()).collect())
}

/// `(oa, miou, per-class IoU)`; absent classes give `None`.
pub fn evaluation_parts(e: &Evaluation) -> (f64, f64, Vec<Option<f64>>) {
    (e.oa, e.miou, e.iou.clone())
}

/// `(name, instances, max_error, passed)` per check.
pub fn gradcheck_rows(module: &str, instances: usize, seed: u64) -> lsnet_core::Result<Vec<(String, usize, f64, bool)>> {
    let module: CheckModule = module.parse()?;
    Ok(verify::run_gradcheck(module, instances, seed)?
        .into_iter()
        .map(|r| {
            let ok = r.passed();
            (r.name, r.instances, r.max_error, ok)
        })
        .collect())
}

#[pyclass(name = "PointCloud", module = "lsnet_py", from_py_object)]
#[derive(Clone)]
pub struct PyPointCloud {
    pub inner: cloud_io::PointCloud,
}

#[pymethods]
impl PyPointCloud {
    #[new]
    #[pyo3(signature = (positions, labels=None))]
    fn new(positions: Vec<[f32; 3]>, labels: Option<Vec<u32>>) -> PyResult<Self> {
        let mut inner = cloud_io::PointCloud::new(positions);
        if let Some(l) = labels {
            inner = inner.with_labels(l);
        }
        inner.validate(None).map_err(to_py)?;
        Ok(PyPointCloud { inner })
    }

    /// Reads ASCII or binary, detected from the file.
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let format = Format::detect(path).map_err(to_py)?;
        let inner = cloud_io::load_cloud(path, format, None).map_err(to_py)?;
        Ok(PyPointCloud { inner })
    }

    /// Writes binary when `binary` is true, ASCII otherwise.
    #[pyo3(signature = (path, binary=true))]
    fn save(&self, path: &str, binary: bool) -> PyResult<()> {
        let format = if binary { Format::Binary } else { Format::Ascii };
        cloud_io::write_cloud(&self.inner, path, format).map_err(to_py)
    }

    #[getter]
    fn positions(&self) -> Vec<[f32; 3]> {
        self.inner.positions.clone()
    }

    #[getter]
    fn labels(&self) -> Option<Vec<u32>> {
        self.inner.labels.clone()
    }

    fn grid_sample(&self, cell: f64) -> PyResult<Self> {
        let inner = cloud_io::grid_sample(&self.inner, cell).map_err(to_py)?;
        Ok(PyPointCloud { inner })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("PointCloud(n={}, labelled={})", self.inner.len(), self.inner.labels.is_some())
    }
}

/// Trainer built from `key=value` config text and in-memory clouds.
#[pyclass(name = "Trainer", module = "lsnet_py", unsendable)]
pub struct PyTrainer {
    inner: lsnet::Trainer,
}

#[pymethods]
impl PyTrainer {
    #[new]
    #[pyo3(signature = (clouds, config=""))]
    fn new(clouds: Vec<PyPointCloud>, config: &str) -> PyResult<Self> {
        let (net, train) = parse_config(config).map_err(to_py)?;
        let data = clouds.into_iter().map(|c| c.inner).collect();
        let inner = lsnet::Trainer::new(net, train, data).map_err(to_py)?;
        Ok(PyTrainer { inner })
    }

    /// Runs one epoch and returns its metrics.
    fn run_epoch<'py>(&mut self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let m = self.inner.run_epoch().map_err(to_py)?;
        let d = evaluation_dict(py, &m.eval)?;
        d.set_item("epoch", m.epoch)?;
        d.set_item("lr", m.lr)?;
        d.set_item("loss", m.loss)?;
        Ok(d)
    }

    /// Per-point class ids for a whole cloud.
    #[pyo3(signature = (cloud, seed=0))]
    fn predict(&self, cloud: &PyPointCloud, seed: u64) -> PyResult<Vec<u32>> {
        lsnet::predict_cloud(&self.inner.net, &cloud.inner, seed).map_err(to_py)
    }

    #[getter]
    fn next_epoch(&self) -> usize {
        self.inner.next_epoch
    }
}

fn evaluation_dict<'py>(py: Python<'py>, e: &Evaluation) -> PyResult<Bound<'py, PyDict>> {
    let (oa, miou, iou) = evaluation_parts(e);
    let d = PyDict::new(py);
    d.set_item("oa", oa)?;
    d.set_item("miou", miou)?;
    d.set_item("iou", iou)?;
    Ok(d)
}

/// Neighbor indices of every point, nearest first.
#[pyfunction]
#[pyo3(signature = (positions, k, projection="3d"))]
fn knn(positions: Vec<[f64; 3]>, k: usize, projection: &str) -> PyResult<Vec<Vec<u32>>> {
    knn_rows(&positions, k, projection).map_err(to_py)
}

/// Overall accuracy, per-class IoU and mean IoU.
#[pyfunction]
fn evaluate<'py>(py: Python<'py>, preds: Vec<u32>, labels: Vec<u32>, classes: usize) -> PyResult<Bound<'py, PyDict>> {
    let e = lsnet::evaluate(&preds, &labels, classes).map_err(to_py)?;
    evaluation_dict(py, &e)
}

/// Labelled synthetic street scene.
#[pyfunction]
#[pyo3(signature = (seed=0, points=4096, extent=lsnet_core::synth::DEFAULT_EXTENT))]
fn synth_scene(seed: u64, points: usize, extent: f64) -> PyResult<PyPointCloud> {
    let scene = lsnet_core::synth::synth_scene(seed, points, extent).map_err(to_py)?;
    Ok(PyPointCloud { inner: scene.cloud })
}

/// Times one pooling block; returns the report fields.
#[pyfunction]
#[pyo3(name = "bench", signature = (mode, k, points=16384, dim=64, reps=5, seed=0))]
fn bench_block<'py>(py: Python<'py>, mode: &str, k: usize, points: usize, dim: usize, reps: usize, seed: u64) -> PyResult<Bound<'py, PyDict>> {
    let mode: BenchMode = mode.parse().map_err(to_py)?;
    let r = lsnet_core::bench::bench(mode, k, points, dim, reps, seed).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("mode", r.mode.to_string())?;
    d.set_item("median_ms", r.median_ms)?;
    d.set_item("min_ms", r.min_ms)?;
    d.set_item("index_build_ms", r.index_build_ms)?;
    d.set_item("neighbor_slots", r.work.neighbor_slots)?;
    d.set_item("mlp_macs", r.work.mlp_macs)?;
    d.set_item("gathers", r.work.gathers)?;
    Ok(d)
}

/// Finite-difference checks as `(name, instances, max_error, passed)`.
#[pyfunction]
#[pyo3(signature = (module="all", instances=verify::DEFAULT_INSTANCES, seed=0))]
fn gradcheck(module: &str, instances: usize, seed: u64) -> PyResult<Vec<(String, usize, f64, bool)>> {
    gradcheck_rows(module, instances, seed).map_err(to_py)
}

#[pymodule]
fn lsnet_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyPointCloud>()?;
    m.add_class::<PyTrainer>()?;
    m.add_function(wrap_pyfunction!(knn, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(synth_scene, m)?)?;
    m.add_function(wrap_pyfunction!(bench_block, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    Ok(())
}
