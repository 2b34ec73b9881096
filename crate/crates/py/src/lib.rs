//! Python bindings. Structured results cross the boundary as JSON and are
//! returned as plain dicts and lists.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use serde::Serialize;

use fedcontract::asyncsim::{self, Upload};
use fedcontract::baselines::Algorithm;
use fedcontract::data::{self, Dataset};
use fedcontract::experiment::{prepare, ExperimentConfig};
use fedcontract::incentive::{
    self, AccuracyCurveParams, ContractDocument, CurveModel, FitSample, MarketModel, QualityParams,
};
use fedcontract::model::{self, TrainConfig};

fn err(e: fedcontract::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn dataset(features: Vec<Vec<f64>>, labels: Vec<usize>, classes: usize) -> PyResult<Dataset> {
    let dim = features.first().map_or(0, Vec::len);
    if features.iter().any(|r| r.len() != dim) {
        return Err(PyValueError::new_err("feature rows have different lengths"));
    }
    Dataset::new(features.concat(), labels, dim, classes).map_err(err)
}

/// Multilayer perceptron with ReLU hidden layers.
#[pyclass(name = "Model", from_py_object)]
#[derive(Clone)]
struct PyModel(model::Model);

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (layer_dims, seed=0))]
    fn new(layer_dims: Vec<usize>, seed: u64) -> PyResult<Self> {
        model::Model::init(&layer_dims, seed).map(PyModel).map_err(err)
    }

    #[staticmethod]
    fn from_params(layer_dims: Vec<usize>, params: Vec<f64>) -> PyResult<Self> {
        model::Model::from_params(&layer_dims, params).map(PyModel).map_err(err)
    }

    #[getter]
    fn layer_dims(&self) -> Vec<usize> {
        self.0.layer_dims().to_vec()
    }

    #[getter]
    fn params(&self) -> Vec<f64> {
        self.0.params().to_vec()
    }

    /// Logits for each feature row.
    fn forward(&self, features: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let labels = vec![0; features.len()];
        let ds = dataset(features, labels, self.0.output_dim())?;
        let rows: Vec<usize> = (0..model::Samples::len(&ds)).collect();
        let batch = model::Batch::gather(&ds, &rows).map_err(err)?;
        let out = model::forward(&self.0, &batch).map_err(err)?;
        Ok((0..rows.len()).map(|r| out.row(r).to_vec()).collect())
    }

    /// `(loss, accuracy)` on labelled rows.
    fn evaluate(&self, features: Vec<Vec<f64>>, labels: Vec<usize>) -> PyResult<(f64, f64)> {
        let ds = dataset(features, labels, self.0.output_dim())?;
        let e = model::evaluate(&self.0, &ds).map_err(err)?;
        Ok((e.loss, e.accuracy))
    }

    /// Mini-batch SGD; returns the trained model and per-epoch mean losses.
    #[pyo3(signature = (features, labels, epochs, lr=0.01, batch_size=20, seed=0))]
    fn train(
        &self,
        features: Vec<Vec<f64>>,
        labels: Vec<usize>,
        epochs: usize,
        lr: f64,
        batch_size: usize,
        seed: u64,
    ) -> PyResult<(PyModel, Vec<f64>)> {
        let ds = dataset(features, labels, self.0.output_dim())?;
        let t = model::train_epochs(&self.0, &ds, TrainConfig { epochs, lr, batch_size, seed }).map_err(err)?;
        Ok((PyModel(t.model), t.epoch_losses))
    }

    fn __repr__(&self) -> String {
        format!("Model(layer_dims={:?})", self.0.layer_dims())
    }
}

#[pyfunction]
fn data_quality(d: usize, s: f64) -> f64 {
    incentive::data_quality(d, s, &QualityParams::default())
}

#[pyfunction]
fn accuracy_curve(effort: f64, theta: f64) -> f64 {
    incentive::accuracy_curve(effort, theta, &AccuracyCurveParams::default())
}

#[pyfunction]
#[pyo3(signature = (theta, levels=10))]
fn level_of(theta: f64, levels: usize) -> usize {
    incentive::level_of(theta, &MarketModel::uniform(levels))
}

#[pyfunction]
fn emd(label_hist: Vec<f64>, benchmark: Vec<f64>) -> PyResult<f64> {
    data::emd(&label_hist, &benchmark).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (m, theta, staleness, epsilon=2.0))]
fn access_indicator(m: f64, theta: f64, staleness: usize, epsilon: f64) -> f64 {
    asyncsim::access_indicator(m, theta, staleness, epsilon)
}

/// `uploads` is a list of `(client_id, level, q)`.
#[pyfunction]
#[pyo3(signature = (uploads, a=0.5, phi=3.0))]
fn access_control<'py>(
    py: Python<'py>,
    uploads: Vec<(usize, usize, f64)>,
    a: f64,
    phi: f64,
) -> PyResult<Bound<'py, PyAny>> {
    let uploads: Vec<Upload> = uploads.into_iter().map(|(client_id, level, q)| Upload { client_id, level, q }).collect();
    let out = asyncsim::access_control(&uploads, a, phi).map_err(err)?;
    to_py(py, &out)
}

fn market(levels: usize, market_json: Option<&str>) -> PyResult<MarketModel> {
    match market_json {
        Some(text) => serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string())),
        None => Ok(MarketModel::uniform(levels)),
    }
}

/// Solves and verifies the menu for the reference market with `levels`
/// levels, or for a market given as JSON.
#[pyfunction]
#[pyo3(signature = (levels=10, market_json=None))]
fn solve_contract<'py>(py: Python<'py>, levels: usize, market_json: Option<&str>) -> PyResult<Bound<'py, PyAny>> {
    let m = market(levels, market_json)?;
    m.validate().map_err(err)?;
    let menu = incentive::solve_contract(&m, &AccuracyCurveParams::default()).map_err(err)?;
    let report = incentive::verify_contract(&menu, &m);
    to_py(py, &ContractDocument::new(&menu, &m, &report))
}

/// IR/IC report for arbitrary efforts and rewards.
#[pyfunction]
#[pyo3(signature = (efforts, rewards, levels=10, market_json=None))]
fn verify_contract<'py>(
    py: Python<'py>,
    efforts: Vec<f64>,
    rewards: Vec<f64>,
    levels: usize,
    market_json: Option<&str>,
) -> PyResult<Bound<'py, PyAny>> {
    let m = market(levels, market_json)?;
    if efforts.len() != m.levels() || rewards.len() != m.levels() {
        return Err(PyValueError::new_err("need one effort and one reward per level"));
    }
    let mut menu = incentive::solve_contract(&m, &AccuracyCurveParams::default()).map_err(err)?;
    for ((entry, e), r) in menu.entries.iter_mut().zip(efforts).zip(rewards) {
        entry.effort = e;
        entry.reward = r;
    }
    to_py(py, &incentive::verify_contract(&menu, &m))
}

#[pyfunction]
#[pyo3(signature = (efforts, levels=10))]
fn rewards_from_efforts(efforts: Vec<f64>, levels: usize) -> PyResult<Vec<f64>> {
    incentive::rewards_from_efforts(&efforts, &MarketModel::uniform(levels)).map_err(err)
}

/// Fits `"accuracy"` (inputs `[effort, theta]`) or `"quality"` (inputs
/// `[d, s]` or `[x]`) to `(inputs, target)` pairs.
#[pyfunction]
#[pyo3(signature = (samples, model, seed=0))]
fn fit_curve<'py>(
    py: Python<'py>,
    samples: Vec<(Vec<f64>, f64)>,
    model: &str,
    seed: u64,
) -> PyResult<Bound<'py, PyAny>> {
    let model = match model {
        "accuracy" => CurveModel::AccuracyCurve,
        "quality" => CurveModel::DataQuality,
        other => return Err(PyValueError::new_err(format!("unknown curve model {other:?}"))),
    };
    let samples: Vec<FitSample> = samples.into_iter().map(|(inputs, target)| FitSample { inputs, target }).collect();
    let fit = incentive::fit_curve(&samples, model, &model.default_init(), seed).map_err(err)?;
    to_py(py, &fit)
}

/// Runs a preset with `key=value` overrides. `algorithm` is `"proposed"`,
/// `"fedavg"`, `"fedprox"` or `"local_sgd"`. Returns the per-round summary.
#[pyfunction]
#[pyo3(signature = (preset="desk", overrides=Vec::new(), algorithm="proposed"))]
fn run_experiment<'py>(
    py: Python<'py>,
    preset: &str,
    overrides: Vec<String>,
    algorithm: &str,
) -> PyResult<Bound<'py, PyAny>> {
    let mut cfg = ExperimentConfig::preset(preset).map_err(err)?;
    for o in &overrides {
        cfg.set(o).map_err(err)?;
    }
    let baseline = match algorithm {
        "proposed" => None,
        "fedavg" => Some(Algorithm::FedAvg),
        "fedprox" => Some(Algorithm::FedProx),
        "local_sgd" => Some(Algorithm::LocalSgd),
        other => return Err(PyValueError::new_err(format!("unknown algorithm {other:?}"))),
    };
    let rows = py
        .detach(|| -> fedcontract::Result<_> {
            let prepared = prepare(&cfg)?;
            match baseline {
                None => Ok(prepared.simulate()?.summary),
                Some(a) => Ok(prepared.run_baseline(a)?.1),
            }
        })
        .map_err(err)?;
    to_py(py, &rows)
}

#[pymodule]
fn fedcontract_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(data_quality, m)?)?;
    m.add_function(wrap_pyfunction!(accuracy_curve, m)?)?;
    m.add_function(wrap_pyfunction!(level_of, m)?)?;
    m.add_function(wrap_pyfunction!(emd, m)?)?;
    m.add_function(wrap_pyfunction!(access_indicator, m)?)?;
    m.add_function(wrap_pyfunction!(access_control, m)?)?;
    m.add_function(wrap_pyfunction!(solve_contract, m)?)?;
    m.add_function(wrap_pyfunction!(verify_contract, m)?)?;
    m.add_function(wrap_pyfunction!(rewards_from_efforts, m)?)?;
    m.add_function(wrap_pyfunction!(fit_curve, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    Ok(())
}
