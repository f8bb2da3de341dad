//! Python bindings. Volumes cross the boundary as flat lists plus a shape.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use tumorseg::config::ExperimentConfig;
use tumorseg::harness::{self, AblationVariant, DeskScale, Workspace};
use tumorseg::inference::{predict_volume, Predictor, SlidingWindowConfig};
use tumorseg::model::{build_model, Model as CoreModel};
use tumorseg::postprocess::{self, PostprocessConfig};
use tumorseg::synthetic::{generate_synthetic as core_generate, SyntheticSpec};
use tumorseg::trainer;
use tumorseg::Tensor;

fn err(e: tumorseg::Error) -> PyErr {
    match e {
        tumorseg::Error::Config(_) | tumorseg::Error::ShapeMismatch(_) | tumorseg::Error::InvalidLabel { .. } => {
            PyValueError::new_err(e.to_string())
        }
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn tensor<T>(values: Vec<T>, shape: Vec<usize>) -> PyResult<Tensor<T>> {
    if shape.iter().product::<usize>() != values.len() {
        return Err(PyValueError::new_err(format!(
            "{} values do not fill shape {shape:?}",
            values.len()
        )));
    }
    Ok(Tensor::from_vec(shape, values))
}

/// Experiment configuration.
#[pyclass(name = "Config", from_py_object)]
#[derive(Clone)]
struct Config {
    inner: ExperimentConfig,
}

#[pymethods]
impl Config {
    /// The best configuration.
    #[new]
    fn new() -> Self {
        Config {
            inner: ExperimentConfig::default(),
        }
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        Ok(Config {
            inner: ExperimentConfig::from_toml(text).map_err(err)?,
        })
    }

    /// Baseline with one ablation variant applied.
    #[staticmethod]
    fn variant(name: &str) -> PyResult<Self> {
        let v: AblationVariant = name.parse().map_err(err)?;
        Ok(Config {
            inner: harness::variant_config(v, &harness::baseline_experiment()).map_err(err)?,
        })
    }

    fn desk_scale(&self) -> Self {
        Config {
            inner: DeskScale::default().apply(&self.inner),
        }
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml()
    }

    fn hash(&self) -> String {
        self.inner.hash()
    }

    #[getter]
    fn depth(&self) -> usize {
        self.inner.model.depth
    }

    #[getter]
    fn channels(&self) -> Vec<usize> {
        self.inner.model.channels.clone()
    }

    #[getter]
    fn patch_size(&self) -> [usize; 3] {
        self.inner.augment.patch_size
    }

    fn __repr__(&self) -> String {
        format!(
            "Config(depth={}, channels={:?}, hash={})",
            self.inner.model.depth,
            self.inner.model.channels,
            self.inner.hash()
        )
    }
}

/// Randomly initialised or checkpoint-loaded network.
#[pyclass(name = "Model", unsendable)]
struct Model {
    inner: CoreModel<f32>,
}

#[pymethods]
impl Model {
    #[new]
    #[pyo3(signature = (config, seed = 0))]
    fn new(config: &Config, seed: u64) -> PyResult<Self> {
        Ok(Model {
            inner: build_model(&config.inner.model, seed).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (inner, _) = tumorseg::model::checkpoint::load_checkpoint::<f32>(&path).map_err(err)?;
        Ok(Model { inner })
    }

    fn count_parameters(&self) -> usize {
        self.inner.count_parameters()
    }

    /// Region probabilities `(3, H, W, D)` for one `(C, H, W, D)` patch.
    fn predict(&self, values: Vec<f32>, shape: [usize; 4]) -> PyResult<Vec<f32>> {
        let mut s = vec![1];
        s.extend(shape);
        let x = tensor(values, s)?;
        Ok(self.inner.predict(&x).map_err(err)?.into_data())
    }

    /// Sliding-window prediction over a whole `(C, H, W, D)` volume.
    #[pyo3(signature = (values, shape, window, tta = false))]
    fn predict_volume(&self, values: Vec<f32>, shape: [usize; 4], window: [usize; 3], tta: bool) -> PyResult<Vec<f32>> {
        let x = tensor(values, shape.to_vec())?;
        let cfg = SlidingWindowConfig {
            window,
            ..Default::default()
        };
        Ok(predict_volume(&self.inner, &x, &cfg, tta).map_err(err)?.into_data())
    }
}

#[pyfunction]
fn lr_at_step(step: u64, total_steps: u64, target: f64, warmup: u64) -> f64 {
    trainer::lr_at_step(step, total_steps, target, warmup)
}

/// `[(train_ids, val_ids), ...]` in fold order.
#[pyfunction]
fn make_folds(ids: Vec<String>, k: usize, seed: u64) -> PyResult<Vec<(Vec<String>, Vec<String>)>> {
    Ok(trainer::make_folds(&ids, k, seed)
        .map_err(err)?
        .into_iter()
        .map(|f| (f.train, f.val))
        .collect())
}

/// (ET, TC, WT) Dice of two label maps.
#[pyfunction]
fn region_dice(pred: Vec<u8>, truth: Vec<u8>) -> PyResult<(f64, f64, f64)> {
    if pred.len() != truth.len() {
        return Err(PyValueError::new_err("label maps differ in length"));
    }
    let [et, tc, wt] = tumorseg::metrics::region_dice(&pred, &truth);
    Ok((et, tc, wt))
}

/// Labels from `(3, H, W, D)` region probabilities, with the default or a
/// TOML `[postprocess]`-style table.
#[pyfunction]
#[pyo3(signature = (probs, shape, config_toml = None))]
fn postprocess_probabilities(probs: Vec<f32>, shape: [usize; 3], config_toml: Option<&str>) -> PyResult<Vec<u8>> {
    let cfg: PostprocessConfig = match config_toml {
        Some(t) => tumorseg_toml(t)?,
        None => PostprocessConfig::default(),
    };
    cfg.validate().map_err(err)?;
    let p = tensor(probs, vec![3, shape[0], shape[1], shape[2]])?;
    Ok(postprocess::postprocess(&p, &cfg).into_data())
}

fn tumorseg_toml(text: &str) -> PyResult<PostprocessConfig> {
    let wrapped = format!("[postprocess]\n{text}");
    ExperimentConfig::from_toml(&wrapped)
        .map(|c| c.postprocess)
        .map_err(err)
}

/// Writes synthetic examples; returns their ids.
#[pyfunction]
#[pyo3(signature = (directory, count, size = 32, seed = 0))]
fn generate_synthetic(directory: PathBuf, count: usize, size: usize, seed: u64) -> PyResult<Vec<String>> {
    let spec = SyntheticSpec {
        shape: [size; 3],
        count,
        seed,
        ..Default::default()
    };
    core_generate(&spec, &directory).map_err(err)
}

/// Caches a dataset into a workspace; returns the number of folds.
#[pyfunction]
#[pyo3(signature = (workspace, data_root, folds = 5, seed = 0))]
fn prepare(workspace: PathBuf, data_root: PathBuf, folds: usize, seed: u64) -> PyResult<usize> {
    let cv = tumorseg::config::CrossValConfig { folds, seed };
    let m = harness::prepare(&Workspace::new(workspace), &data_root, &cv).map_err(err)?;
    Ok(m.splits.len())
}

/// `(dims, values)` of a NIfTI file.
#[pyfunction]
fn read_nifti(path: PathBuf) -> PyResult<(Vec<usize>, Vec<f32>)> {
    let v = tumorseg::volume_io::read_nifti(&path).map_err(err)?;
    Ok((v.dims.clone(), v.to_f32()))
}

#[pymodule]
fn tumorseg_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Config>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(lr_at_step, m)?)?;
    m.add_function(wrap_pyfunction!(make_folds, m)?)?;
    m.add_function(wrap_pyfunction!(region_dice, m)?)?;
    m.add_function(wrap_pyfunction!(postprocess_probabilities, m)?)?;
    m.add_function(wrap_pyfunction!(generate_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(prepare, m)?)?;
    m.add_function(wrap_pyfunction!(read_nifti, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
