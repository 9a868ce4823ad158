//! Python bindings: the scaling function, the synthetic generator, AUC,
//! and a small trainer driven by a JSON run config.

use std::collections::BTreeMap;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use tempo_ode::checkpoint::Checkpoint;
use tempo_ode::config::RunConfig;
use tempo_ode::data::{generate_synthetic as generate, DatasetSplit, SyntheticSpec};
use tempo_ode::models::LatentOdeModel;
use tempo_ode::scaling::{scale_raw, CouplingMode, PairwiseMemory, ScaleInputs};
use tempo_ode::tensor::{Parameterized, Tape, Tensor};
use tempo_ode::training::{self, train_epoch as run_epoch, AdamaxState};

fn err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Scaled weights `S(W, t)` for a flat base vector. `k` holds 1, N or N²
/// values for `coupling` = "scalar", "rank1" or "full".
#[pyfunction]
#[pyo3(signature = (base, k, alpha, beta, gamma, t, coupling = "rank1"))]
fn scale(
    base: Vec<f64>,
    k: Vec<f64>,
    alpha: f64,
    beta: f64,
    gamma: f64,
    t: f64,
    coupling: &str,
) -> PyResult<Vec<f64>> {
    let mode: CouplingMode = serde_json::from_value(coupling.into()).map_err(err)?;
    let n = base.len();
    let k = match mode {
        CouplingMode::Scalar => Tensor::new(vec![], k),
        CouplingMode::Rank1 => Tensor::new(vec![n], k),
        CouplingMode::Full => Tensor::new(vec![n, n], k),
    }
    .map_err(err)?;
    let inputs = ScaleInputs {
        base: &Tensor::new(vec![n], base).map_err(err)?,
        k: &k,
        mode,
        alpha: &Tensor::scalar(alpha),
        beta: &Tensor::scalar(beta),
        gamma: &Tensor::scalar(gamma),
        t: &Tensor::scalar(t),
    };
    let out = scale_raw(&Tape::no_grad(), inputs, PairwiseMemory::Auto).map_err(err)?;
    Ok(out.to_vec())
}

#[pyfunction]
fn auc(scores: Vec<f64>, labels: Vec<bool>) -> PyResult<f64> {
    training::auc(&scores, &labels).map_err(err)
}

/// Synthetic series as `(id, times, values, observed, heldout)` tuples.
#[pyfunction]
#[pyo3(signature = (spec_json = "{}"))]
#[allow(clippy::type_complexity)]
fn generate_synthetic(
    spec_json: &str,
) -> PyResult<Vec<(String, Vec<f64>, Vec<f64>, Vec<bool>, Vec<bool>)>> {
    let spec: SyntheticSpec = serde_json::from_str(spec_json).map_err(err)?;
    Ok(generate(&spec)
        .map_err(err)?
        .into_iter()
        .map(|s| {
            (
                s.id().to_string(),
                s.times().to_vec(),
                s.values().to_vec(),
                s.mask().to_vec(),
                s.heldout().to_vec(),
            )
        })
        .collect())
}

/// One model, optimizer and dataset built from a run config.
#[pyclass(unsendable)]
struct Trainer {
    config: RunConfig,
    model: LatentOdeModel,
    opt: AdamaxState,
    split: DatasetSplit,
    epoch: usize,
}

#[pymethods]
impl Trainer {
    #[new]
    #[pyo3(signature = (config_json = "{}"))]
    fn new(config_json: &str) -> PyResult<Self> {
        let config = RunConfig::from_json(config_json).map_err(err)?;
        let model = LatentOdeModel::new(&config.model, config.training.seed).map_err(err)?;
        let opt = AdamaxState::new(config.training.lr, config.training.decay);
        let split = config.dataset().map_err(err)?;
        Ok(Self {
            config,
            model,
            opt,
            split,
            epoch: 0,
        })
    }

    #[getter]
    fn epoch(&self) -> usize {
        self.epoch
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.model.param_count()
    }

    fn param_breakdown(&self) -> BTreeMap<String, usize> {
        self.model.param_breakdown()
    }

    /// One pass over the training split; returns the mean batch loss.
    fn train_epoch(&mut self) -> PyResult<f64> {
        let c = &self.config;
        let loss = run_epoch(
            &mut self.model,
            &self.split.train,
            &c.task,
            &c.training,
            &c.solver.train,
            &mut self.opt,
            self.epoch,
        )
        .map_err(err)?;
        self.epoch += 1;
        Ok(loss)
    }

    /// Metrics on the test split.
    fn evaluate(&self) -> PyResult<BTreeMap<String, f64>> {
        let c = &self.config;
        training::evaluate(
            &self.model,
            &self.split.test,
            &c.task,
            &c.training.loss,
            &self.split.stats,
            &c.solver.eval,
            c.training.batch_size,
        )
        .map_err(err)
    }

    fn save_checkpoint(&self, path: &str) -> PyResult<()> {
        Checkpoint::capture(
            &self.config,
            &self.model,
            &self.opt,
            self.epoch,
            &self.split.stats,
        )
        .save(path.as_ref())
        .map_err(err)
    }
}

/// Imported as `tempo_ode`; the shared library is `libtempo_ode_py`.
#[pymodule]
#[pyo3(name = "tempo_ode")]
fn tempo_ode_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(scale, m)?)?;
    m.add_function(wrap_pyfunction!(auc, m)?)?;
    m.add_function(wrap_pyfunction!(generate_synthetic, m)?)?;
    m.add_class::<Trainer>()?;
    Ok(())
}
