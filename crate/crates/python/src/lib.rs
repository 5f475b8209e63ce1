//! Python bindings for the `ewfm` crate. Points are plain lists of floats.

use std::sync::Arc;

use ewfm::cnf::{self, DivergenceMode, OdeConfig};
use ewfm::config::{self, RunConfig};
use ewfm::energy::GmmSpec;
use ewfm::evaluation;
use ewfm::reference::{self, MhConfig};
use ewfm::{Algorithm, Error, FieldArch, Trainer};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::InvalidInput(_) | Error::Config(_) | Error::Checkpoint(_) => PyValueError::new_err(e.to_string()),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn ode(n_steps: usize) -> PyResult<OdeConfig> {
    OdeConfig::new(n_steps).map_err(py_err)
}

/// A Boltzmann target `exp(-E(x) / T)` with an energy-evaluation counter.
#[pyclass(module = "pyewfm")]
struct EnergySystem {
    inner: ewfm::EnergySystem,
}

#[pymethods]
impl EnergySystem {
    /// Isotropic Gaussian mixture with `n` equally weighted modes on a circle.
    #[staticmethod]
    #[pyo3(signature = (n, radius, variance = 1.0, temperature = 1.0))]
    fn gmm_ring(n: usize, radius: f64, variance: f64, temperature: f64) -> PyResult<Self> {
        let spec = GmmSpec::isotropic(GmmSpec::ring_means(n, radius), variance).map_err(py_err)?;
        let inner = ewfm::EnergySystem::new("gmm-ring", Arc::new(spec), temperature).map_err(py_err)?;
        Ok(Self { inner })
    }

    /// The training-time system of a TOML run config.
    #[staticmethod]
    fn from_config(toml_text: &str) -> PyResult<Self> {
        let cfg = RunConfig::from_toml(toml_text).map_err(py_err)?;
        Ok(Self {
            inner: cfg.system.build().map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn from_preset(name: &str) -> PyResult<Self> {
        let cfg = config::preset(name).map_err(py_err)?;
        Ok(Self {
            inner: cfg.system.build().map_err(py_err)?,
        })
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn temperature(&self) -> f64 {
        self.inner.temperature()
    }

    #[getter]
    fn eval_count(&self) -> u64 {
        self.inner.eval_count()
    }

    fn energy(&self, x: Vec<f64>) -> PyResult<f64> {
        self.inner.energy(&x).map_err(py_err)
    }

    fn energies(&self, xs: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
        xs.iter().map(|x| self.inner.energy(x).map_err(py_err)).collect()
    }

    /// Metropolis-Hastings reference draws, chain-major.
    #[pyo3(signature = (step_size, n_chains, samples_per_chain, burn_in = 500, thinning = 10, seed = 0))]
    fn mh_sample(
        &self,
        step_size: f64,
        n_chains: usize,
        samples_per_chain: usize,
        burn_in: usize,
        thinning: usize,
        seed: u64,
    ) -> PyResult<(Vec<Vec<f64>>, f64)> {
        let cfg = MhConfig {
            step_size,
            n_chains,
            samples_per_chain,
            burn_in,
            thinning,
            seed,
            init_scale: 1.0,
        };
        let r = reference::mh_sample(&self.inner, &cfg).map_err(py_err)?;
        Ok((r.samples, r.acceptance_rate))
    }
}

/// MLP vector field `v(t, x)`; a fresh network is the identity flow.
#[pyclass(module = "pyewfm")]
struct VectorFieldNet {
    inner: ewfm::VectorFieldNet,
}

#[pymethods]
impl VectorFieldNet {
    #[new]
    #[pyo3(signature = (dim, hidden, time_embed_dim = 16, seed = 0))]
    fn new(dim: usize, hidden: Vec<usize>, time_embed_dim: usize, seed: u64) -> PyResult<Self> {
        let inner = ewfm::VectorFieldNet::new(FieldArch::new(dim, hidden, time_embed_dim), seed).map_err(py_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn from_checkpoint(text: &str) -> PyResult<Self> {
        let (inner, _) = ewfm::VectorFieldNet::from_checkpoint(text).map_err(py_err)?;
        Ok(Self { inner })
    }

    #[pyo3(signature = (seed = 0))]
    fn to_checkpoint(&self, seed: u64) -> String {
        self.inner.to_checkpoint(seed)
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn n_params(&self) -> usize {
        self.inner.n_params()
    }

    fn params(&self) -> Vec<f64> {
        self.inner.params().to_vec()
    }

    fn velocity(&self, t: f64, x: Vec<f64>) -> PyResult<Vec<f64>> {
        self.inner.velocity(t, &x).map_err(py_err)
    }

    /// Pushes `n` prior draws through the flow.
    #[pyo3(signature = (n, ode_steps = 100, seed = 0))]
    fn sample(&self, n: usize, ode_steps: usize, seed: u64) -> PyResult<Vec<Vec<f64>>> {
        cnf::sample_forward(&self.inner, n, &ode(ode_steps)?, seed).map_err(py_err)
    }

    /// Samples with model log-densities (exact divergence up to d = 8).
    #[pyo3(signature = (n, ode_steps = 100, seed = 0))]
    fn sample_with_logdensity(&self, n: usize, ode_steps: usize, seed: u64) -> PyResult<(Vec<Vec<f64>>, Vec<f64>)> {
        let mode = DivergenceMode::auto(self.inner.dim(), 1);
        let pairs = cnf::sample_with_logdensity(&self.inner, n, &ode(ode_steps)?, mode, seed).map_err(py_err)?;
        Ok(pairs.into_iter().unzip())
    }

    #[pyo3(signature = (x, ode_steps = 100))]
    fn log_likelihood(&self, x: Vec<f64>, ode_steps: usize) -> PyResult<f64> {
        cnf::log_likelihood(&self.inner, &x, &ode(ode_steps)?, DivergenceMode::Exact, 0)
            .map(|(lp, _)| lp)
            .map_err(py_err)
    }
}

/// Trains a network from a TOML run config; returns it with a run summary.
#[pyfunction]
fn train(py: Python<'_>, config_toml: &str, algo: &str) -> PyResult<(VectorFieldNet, Py<PyDict>)> {
    let cfg = RunConfig::from_toml(config_toml).map_err(py_err)?;
    let algorithm: Algorithm = algo.parse().map_err(py_err)?;
    let system = cfg.system.build().map_err(py_err)?;
    let mut net = cfg.init_net().map_err(py_err)?;
    let mut trainer = Trainer::new(&system, cfg.train_config(), algorithm);
    if let Some(s) = &cfg.anneal {
        if algorithm == Algorithm::Aewfm {
            trainer = trainer.with_schedule(s.clone());
        }
    }
    let out = trainer.run(&mut net).map_err(py_err)?;
    let summary = PyDict::new(py);
    summary.set_item("eval_count", out.eval_count)?;
    summary.set_item("refreshes", out.refreshes)?;
    summary.set_item("steps", out.metrics.len())?;
    summary.set_item("skipped_steps", out.skipped_steps)?;
    summary.set_item("proposal_source", out.proposal_source.to_string())?;
    summary.set_item("buffer_ess", out.buffers.iter().map(|b| b.ess).collect::<Vec<_>>())?;
    summary.set_item("loss", out.metrics.iter().map(|m| m.loss_estimate).collect::<Vec<_>>())?;
    Ok((VectorFieldNet { inner: net }, summary.unbind()))
}

/// Empirical 2-Wasserstein distance; the flag is false for the entropic
/// approximation used on unequal or large sample sets.
#[pyfunction]
fn w2_distance(a: Vec<Vec<f64>>, b: Vec<Vec<f64>>) -> PyResult<(f64, bool)> {
    let r = evaluation::w2_distance(&a, &b).map_err(py_err)?;
    Ok((r.value, r.exact))
}

/// Mean held-out negative log-likelihood and its standard error.
#[pyfunction]
#[pyo3(signature = (net, test, ode_steps = 100))]
fn nll(net: &VectorFieldNet, test: Vec<Vec<f64>>, ode_steps: usize) -> PyResult<(f64, f64)> {
    let r = evaluation::model_nll(&net.inner, &test, &ode(ode_steps)?, DivergenceMode::Exact, 0).map_err(py_err)?;
    Ok((r.mean, r.std_err))
}

/// TOML text of a built-in preset.
#[pyfunction]
fn preset_toml(name: &str) -> PyResult<String> {
    config::preset(name).and_then(|c| c.to_toml()).map_err(py_err)
}

#[pymodule]
fn pyewfm(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<EnergySystem>()?;
    m.add_class::<VectorFieldNet>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(w2_distance, m)?)?;
    m.add_function(wrap_pyfunction!(nll, m)?)?;
    m.add_function(wrap_pyfunction!(preset_toml, m)?)?;
    m.add("PRESETS", config::PRESETS.to_vec())?;
    Ok(())
}
