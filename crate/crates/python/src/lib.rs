//! Python bindings: robust averaging, pose metrics, model inference and the
//! stage pipeline.

use std::path::PathBuf;

use nalgebra::{Matrix4, Vector3};
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;

use forestnet::forest::Forest as CoreForest;
use forestnet::forestnet::{ForestNet as CoreNet, Variant};
use forestnet::metrics;
use forestnet::netsplit;
use forestnet::pipeline::{ExperimentConfig, PipelineError, Stage};
use forestnet::robust::{self, GmConfig};
use forestnet::scene::CameraPose;

create_exception!(forestnet_py, ForestnetError, PyException, "Pipeline failure; `args[0]` is the category.");

fn pipeline_err(e: PipelineError) -> PyErr {
    ForestnetError::new_err((e.category(), e.to_string()))
}

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_vectors(points: &[[f64; 3]]) -> Vec<Vector3<f64>> {
    points.iter().map(|p| Vector3::from(*p)).collect()
}

fn to_array(v: &Vector3<f64>) -> [f64; 3] {
    [v.x, v.y, v.z]
}

/// Robust average of 3D points: Weiszfeld steps from the mean, then
/// Gaussian mean-shift steps of bandwidth `sigma` meters.
#[pyfunction]
#[pyo3(signature = (points, weiszfeld_iters = 10, meanshift_iters = 10, sigma = 0.025))]
fn geometric_median(points: Vec<[f64; 3]>, weiszfeld_iters: usize, meanshift_iters: usize, sigma: f64) -> PyResult<[f64; 3]> {
    let cfg = GmConfig {
        weiszfeld_iters,
        meanshift_iters,
        sigma,
        ..Default::default()
    };
    robust::geometric_median(&to_vectors(&points), &cfg)
        .map(|q| to_array(&q))
        .map_err(value_err)
}

/// Parameter reduction of splitting a depth-`depth` tree network into
/// depth-`subtree_depth` sub-networks, as `(numerator, denominator)`.
#[pyfunction]
fn reduction_factor(depth: u32, subtree_depth: u32) -> PyResult<(u128, u128)> {
    netsplit::reduction_factor(depth, subtree_depth)
        .map(|r| (r.numerator, r.denominator))
        .map_err(value_err)
}

fn pose_from(m: [[f64; 4]; 4]) -> PyResult<CameraPose> {
    let flat: Vec<f64> = m.iter().flatten().copied().collect();
    CameraPose::from_matrix(&Matrix4::from_row_slice(&flat), 1e-6).map_err(value_err)
}

/// `(translation error m, rotation error deg, correct)` of an estimated
/// camera-to-scene pose against ground truth, both 4×4 row-major.
#[pyfunction]
fn pose_error(estimate: [[f64; 4]; 4], ground_truth: [[f64; 4]; 4]) -> PyResult<(f64, f64, bool)> {
    let m = metrics::pose_metrics(&pose_from(estimate)?, &pose_from(ground_truth)?);
    Ok((m.translation_error, m.rotation_error, m.correct))
}

/// A trained regression forest.
#[pyclass(frozen)]
struct Forest {
    inner: CoreForest,
}

#[pymethods]
impl Forest {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        CoreForest::load(&path).map(|inner| Self { inner }).map_err(value_err)
    }

    #[getter]
    fn n_trees(&self) -> usize {
        self.inner.n_trees()
    }

    #[getter]
    fn feature_count(&self) -> usize {
        self.inner.bank.len()
    }

    /// One scene coordinate per tree for a precomputed feature vector.
    fn predict(&self, features: Vec<f32>) -> PyResult<Vec<[f64; 3]>> {
        if features.len() != self.inner.bank.len() {
            return Err(value_err(format!(
                "expected {} features, got {}",
                self.inner.bank.len(),
                features.len()
            )));
        }
        Ok(self.inner.predict_features(&features).iter().map(to_array).collect())
    }
}

/// A forest mapped onto per-tree networks.
#[pyclass(frozen)]
struct ForestNet {
    inner: CoreNet,
}

#[pymethods]
impl ForestNet {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        CoreNet::load(&path).map(|inner| Self { inner }).map_err(value_err)
    }

    /// Maps `forest` with the default constants of `variant` (L, LS or LST).
    #[staticmethod]
    fn from_forest(forest: &Forest, variant: &str) -> PyResult<Self> {
        let v: Variant = variant.parse().map_err(value_err)?;
        CoreNet::from_forest(&forest.inner, v)
            .map(|inner| Self { inner })
            .map_err(value_err)
    }

    #[getter]
    fn variant(&self) -> String {
        self.inner.variant.to_string()
    }

    #[getter]
    fn n_trees(&self) -> usize {
        self.inner.n_trees()
    }

    fn predict(&self, features: Vec<f32>) -> PyResult<Vec<[f64; 3]>> {
        self.inner
            .forward_ensemble(&features)
            .map(|qs| qs.iter().map(to_array).collect())
            .map_err(value_err)
    }
}

/// The default experiment configuration as TOML.
#[pyfunction]
fn default_config() -> String {
    ExperimentConfig::default().to_toml()
}

/// Runs one pipeline stage (`synth`, `train-forest`, ..., `report`) and
/// returns its JSON log. Failures raise `ForestnetError(category, message)`.
#[pyfunction]
fn run_stage(py: Python<'_>, stage: &str, config_toml: &str) -> PyResult<String> {
    let stage = Stage::ALL
        .into_iter()
        .find(|s| s.name() == stage)
        .ok_or_else(|| value_err(format!("unknown stage {stage:?}")))?;
    let cfg = ExperimentConfig::from_toml(config_toml).map_err(pipeline_err)?;
    let log = py.detach(|| stage.run(&cfg)).map_err(pipeline_err)?;
    Ok(log.to_string())
}

#[pymodule]
pub fn forestnet_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("ForestnetError", m.py().get_type::<ForestnetError>())?;
    m.add_function(wrap_pyfunction!(geometric_median, m)?)?;
    m.add_function(wrap_pyfunction!(reduction_factor, m)?)?;
    m.add_function(wrap_pyfunction!(pose_error, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(run_stage, m)?)?;
    m.add_class::<Forest>()?;
    m.add_class::<ForestNet>()?;
    Ok(())
}
