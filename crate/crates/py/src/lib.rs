//! Python bindings: scan paths, models, the toy dataset and training.
//!
//! Tensors cross the boundary as flat `list[float]` plus a shape tuple.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use vcmamba::harness::check::run_checks;
use vcmamba::harness::{evaluate, gen_toy_dataset, train, DatasetConfig, TrainConfig};
use vcmamba::model::{load_checkpoint, save_checkpoint};
use vcmamba::scan::{generate_path, GridShape, PathId};
use vcmamba::{Error, Model, ModelSpec, Tensor};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::InvalidArgument { .. }
        | Error::InvalidSpec(_)
        | Error::Config { .. }
        | Error::ShapeMismatch { .. }
        | Error::EmptyDataset => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

/// Visiting order and step directions of a scan path over an `h x w` grid.
#[pyfunction]
fn scan_path(height: usize, width: usize, path: &str) -> PyResult<(Vec<usize>, Vec<String>)> {
    let grid = GridShape::new(height, width).map_err(to_py)?;
    let p = generate_path(grid, path.parse::<PathId>().map_err(to_py)?);
    let dirs = p.dirs.iter().map(|d| d.as_str().to_string()).collect();
    Ok((p.order.to_vec(), dirs))
}

/// Inverse permutation of a visiting order.
#[pyfunction]
fn invert_path(order: Vec<usize>) -> Vec<usize> {
    vcmamba::scan::invert_path(&order)
}

#[pyfunction]
fn presets() -> Vec<&'static str> {
    ModelSpec::PRESETS.to_vec()
}

/// Runs the invariant suite; returns `(suite, passed, detail)` rows.
#[pyfunction]
fn check() -> Vec<(String, bool, String)> {
    run_checks()
        .into_iter()
        .map(|r| (r.suite.to_string(), r.passed, r.detail))
        .collect()
}

/// Trains from a config file; returns `(accuracy, loss)` of the final eval.
#[pyfunction]
fn train_config(path: PathBuf) -> PyResult<(f64, f64)> {
    let cfg = TrainConfig::load(path).map_err(to_py)?;
    let r = train(&cfg).map_err(to_py)?;
    Ok((r.final_eval.accuracy, r.final_eval.loss))
}

#[pyclass(name = "ToyDataset")]
struct PyToyDataset(vcmamba::harness::ToyDataset);

#[pymethods]
impl PyToyDataset {
    #[new]
    #[pyo3(signature = (seed = 0, n_samples = 2000, resolution = 32))]
    fn new(seed: u64, n_samples: usize, resolution: usize) -> PyResult<Self> {
        let cfg = DatasetConfig {
            seed,
            n_samples,
            resolution,
        };
        Ok(Self(gen_toy_dataset(&cfg).map_err(to_py)?))
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    fn labels(&self) -> Vec<usize> {
        self.0.labels().to_vec()
    }

    /// Image `i` as a flat `[3, r, r]` list.
    fn image(&self, i: usize) -> PyResult<Vec<f32>> {
        if i >= self.0.len() {
            return Err(PyValueError::new_err(format!("index {i} out of range")));
        }
        Ok(self.0.image(i).to_vec())
    }

    fn class_histogram(&self) -> Vec<usize> {
        self.0.class_histogram().to_vec()
    }
}

#[pyclass(name = "Model")]
struct PyModel(Model<f32>);

#[pymethods]
impl PyModel {
    /// Builds a preset (`S`, `M`, `B`, `Nano`) with freshly initialized weights.
    #[new]
    #[pyo3(signature = (preset, seed = 0))]
    fn new(preset: &str, seed: u64) -> PyResult<Self> {
        let spec = ModelSpec::preset(preset).map_err(to_py)?;
        Ok(Self(Model::build(spec, seed).map_err(to_py)?))
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self(load_checkpoint(path).map_err(to_py)?))
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&self.0, path).map_err(to_py)
    }

    #[getter]
    fn spec(&self) -> String {
        self.0.spec().to_string()
    }

    /// `(module, count)` rows ending with `"total"`.
    fn params(&self) -> Vec<(String, usize)> {
        let r = self.0.count_params();
        let mut rows = r.rows;
        rows.push(("total".into(), r.total));
        rows
    }

    #[pyo3(signature = (resolution = 224))]
    fn macs(&self, resolution: usize) -> PyResult<Vec<(String, u64)>> {
        let r = self.0.count_macs(resolution).map_err(to_py)?;
        let mut rows = r.rows;
        rows.push(("total".into(), r.total));
        Ok(rows)
    }

    /// Eval-mode logits for flat `[B, 3, H, W]` images; returns flat `[B, K]`.
    fn forward(&self, images: Vec<f32>, shape: Vec<usize>) -> PyResult<(Vec<f32>, Vec<usize>)> {
        let x = Tensor::new(&shape, images).map_err(to_py)?;
        let logits = self.0.predict(&x).map_err(to_py)?;
        let s = logits.shape().to_vec();
        Ok((logits.into_data(), s))
    }

    /// `(accuracy, loss)` on a toy dataset.
    fn evaluate(&self, dataset: &PyToyDataset) -> PyResult<(f64, f64)> {
        let r = evaluate(&self.0, &dataset.0).map_err(to_py)?;
        Ok((r.accuracy, r.loss))
    }
}

#[pymodule]
fn vcmamba_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(scan_path, m)?)?;
    m.add_function(wrap_pyfunction!(invert_path, m)?)?;
    m.add_function(wrap_pyfunction!(presets, m)?)?;
    m.add_function(wrap_pyfunction!(check, m)?)?;
    m.add_function(wrap_pyfunction!(train_config, m)?)?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyToyDataset>()?;
    Ok(())
}
