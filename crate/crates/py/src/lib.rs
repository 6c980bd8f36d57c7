//! Python bindings. Matrices cross the boundary as lists of rows.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use cot_core::diffengine::Matrix;
use cot_core::harness::experiments::{eval_noise, transport_cost_grid, TrainedPair};
use cot_core::harness::{run, write_outputs, Experiment, ExperimentConfig};
use cot_core::kernels::{self, WeightedSamples};
use cot_core::models::{Activation, ImplicitGenerator};
use cot_core::objectives::{self, CotConfig, ImplicitProblem, JointDataset};
use cot_core::oracles::{self, Gaussian1D, OtCost};
use cot_core::rng::RngStream;
use cot_core::synthdata::{self, ConditionalGaussianSpec};
use cot_core::CotError;

fn err(e: CotError) -> PyErr {
    match e {
        CotError::Shape { .. } | CotError::InvalidParameter(_) | CotError::NotInSupport(_) => {
            PyValueError::new_err(e.to_string())
        }
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn to_matrix(rows: Vec<Vec<f64>>) -> PyResult<Matrix> {
    let cols = rows.first().map(Vec::len).unwrap_or(0);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err("ragged matrix"));
    }
    let n = rows.len();
    Matrix::from_shape_vec((n, cols), rows.into_iter().flatten().collect())
        .map_err(|e| PyValueError::new_err(e.to_string()))
}

fn from_matrix(m: &Matrix) -> Vec<Vec<f64>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn ot_cost(name: &str) -> PyResult<OtCost> {
    match name {
        "sqeuclidean" => Ok(OtCost::SqEuclidean),
        "euclidean" => Ok(OtCost::Euclidean),
        _ => Err(PyValueError::new_err(format!("unknown cost {name:?}"))),
    }
}

/// Translation-invariant kernel; `bandwidth` is σ².
#[pyclass(name = "Kernel", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyKernel {
    inner: kernels::Kernel,
}

#[pymethods]
impl PyKernel {
    #[staticmethod]
    fn rbf(bandwidth: f64) -> PyResult<Self> {
        Ok(Self {
            inner: kernels::Kernel::rbf(bandwidth).map_err(err)?,
        })
    }

    #[staticmethod]
    fn imq(bandwidth: f64) -> PyResult<Self> {
        Ok(Self {
            inner: kernels::Kernel::imq(bandwidth).map_err(err)?,
        })
    }

    #[staticmethod]
    fn imq2(bandwidth: f64) -> PyResult<Self> {
        Ok(Self {
            inner: kernels::Kernel::imq2(bandwidth).map_err(err)?,
        })
    }

    /// Copy rescaled so that k(a, a) = 1.
    fn normalized(&self) -> Self {
        Self {
            inner: self.inner.normalized(),
        }
    }

    fn eval(&self, a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
        if a.len() != b.len() {
            return Err(PyValueError::new_err("dimension mismatch"));
        }
        Ok(self
            .inner
            .eval(ndarray::ArrayView1::from(&a), ndarray::ArrayView1::from(&b)))
    }

    fn gram(&self, a: Vec<Vec<f64>>, b: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let g = kernels::gram(&self.inner, &to_matrix(a)?, &to_matrix(b)?).map_err(err)?;
        Ok(from_matrix(&g))
    }

    fn __repr__(&self) -> String {
        format!(
            "Kernel({:?}, bandwidth={})",
            self.inner.family, self.inner.bandwidth
        )
    }
}

fn weighted(points: Vec<Vec<f64>>, weights: Option<Vec<f64>>) -> PyResult<WeightedSamples> {
    let p = to_matrix(points)?;
    match weights {
        Some(w) => WeightedSamples::new(p, w.into()).map_err(err),
        None => WeightedSamples::uniform(p).map_err(err),
    }
}

/// Biased MMD² between two weighted point sets (uniform weights by default).
#[pyfunction]
#[pyo3(signature = (kernel, p, q, p_weights=None, q_weights=None))]
fn mmd2(
    kernel: &PyKernel,
    p: Vec<Vec<f64>>,
    q: Vec<Vec<f64>>,
    p_weights: Option<Vec<f64>>,
    q_weights: Option<Vec<f64>>,
) -> PyResult<f64> {
    kernels::mmd2(
        &kernel.inner,
        &weighted(p, p_weights)?,
        &weighted(q, q_weights)?,
    )
    .map_err(err)
}

#[pyfunction]
fn gaussian_w2sq(mean1: f64, var1: f64, mean2: f64, var2: f64) -> PyResult<f64> {
    Ok(oracles::gaussian_w2sq(
        Gaussian1D::new(mean1, var1).map_err(err)?,
        Gaussian1D::new(mean2, var2).map_err(err)?,
    ))
}

#[pyfunction]
fn true_conditional_w2sq(x: f64) -> PyResult<f64> {
    oracles::true_conditional_w2sq(x).map_err(err)
}

/// (mean, variance) of the weighted barycenter at x.
#[pyfunction]
fn analytic_barycenter(x: f64, rho: f64) -> PyResult<(f64, f64)> {
    let g = oracles::analytic_barycenter(x, rho).map_err(err)?;
    Ok((g.mean(), g.var()))
}

#[pyfunction]
#[pyo3(signature = (a, b, cost="sqeuclidean"))]
fn exact_ot_1d(a: Vec<f64>, b: Vec<f64>, cost: &str) -> PyResult<f64> {
    oracles::exact_ot_1d(&a, &b, ot_cost(cost)?).map_err(err)
}

#[pyfunction]
fn empirical_w1_1d(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    oracles::empirical_w1_1d(&a, &b).map_err(err)
}

/// (mean cost, permutation) of the optimal equal-weight assignment.
#[pyfunction]
#[pyo3(signature = (source, target, cost="sqeuclidean"))]
fn exact_assignment_ot(
    source: Vec<Vec<f64>>,
    target: Vec<Vec<f64>>,
    cost: &str,
) -> PyResult<(f64, Vec<usize>)> {
    let a = oracles::exact_assignment_ot(&to_matrix(source)?, &to_matrix(target)?, ot_cost(cost)?)
        .map_err(err)?;
    Ok((a.cost, a.permutation))
}

fn preset(name: &str) -> PyResult<ConditionalGaussianSpec> {
    Ok(match name {
        "converge_source" => ConditionalGaussianSpec::converge_source(),
        "converge_target" => ConditionalGaussianSpec::converge_target(),
        "barycenter_first" => ConditionalGaussianSpec::barycenter_first(),
        "barycenter_second" => ConditionalGaussianSpec::barycenter_second(),
        _ => return Err(PyValueError::new_err(format!("unknown preset {name:?}"))),
    })
}

/// (x, y) column lists drawn from a named conditional-Gaussian preset.
#[pyfunction]
fn gen_conditional_gaussian(
    preset_name: &str,
    m: usize,
    seed: u64,
) -> PyResult<(Vec<f64>, Vec<f64>)> {
    let d =
        synthdata::gen_conditional_gaussian(&mut RngStream::new(seed), &preset(preset_name)?, m)
            .map_err(err)?;
    Ok((d.x().column(0).to_vec(), d.y().column(0).to_vec()))
}

/// Default configuration for an experiment tag, as JSON.
#[pyfunction]
fn default_config(experiment: &str) -> PyResult<String> {
    let e: Experiment = experiment.parse().map_err(err)?;
    Ok(
        serde_json::to_string_pretty(&ExperimentConfig::defaults_for(e))
            .expect("config serializes"),
    )
}

/// Runs an experiment from a JSON config. Returns the report as CSV text and
/// also writes the CSV, SVG and metadata when `out_dir` is given.
#[pyfunction]
#[pyo3(signature = (config_json, out_dir=None))]
fn run_experiment(config_json: &str, out_dir: Option<std::path::PathBuf>) -> PyResult<String> {
    let cfg = ExperimentConfig::from_json(config_json).map_err(err)?;
    let report = run(&cfg).map_err(err)?;
    if let Some(dir) = out_dir {
        write_outputs(&cfg, &report, &dir).map_err(err)?;
    }
    report.to_csv_string().map_err(err)
}

fn dataset(x: Vec<f64>, y: Vec<f64>) -> PyResult<JointDataset> {
    let n = x.len();
    let col = |v: Vec<f64>| Matrix::from_shape_vec((v.len(), 1), v).expect("column");
    if y.len() != n {
        return Err(PyValueError::new_err("x and y lengths differ"));
    }
    JointDataset::new(col(x), col(y)).map_err(err)
}

/// Implicit-model estimator for scalar x and y: θ generates target-side
/// draws y(x, η′), ψ maps (y, x, η) to source-side draws.
#[pyclass(name = "ImplicitCot")]
struct PyImplicitCot {
    problem: ImplicitProblem,
}

#[pymethods]
impl PyImplicitCot {
    /// `config_json` holds the optimizer and loss settings (`CotConfig`
    /// fields); unspecified fields take their defaults.
    #[new]
    #[pyo3(signature = (source_x, source_y, target_x, target_y, config_json="{}", hidden=vec![32, 32], noise_dim=4, seed=0))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        source_x: Vec<f64>,
        source_y: Vec<f64>,
        target_x: Vec<f64>,
        target_y: Vec<f64>,
        config_json: &str,
        hidden: Vec<usize>,
        noise_dim: usize,
        seed: u64,
    ) -> PyResult<Self> {
        let config: CotConfig =
            serde_json::from_str(config_json).map_err(|e| PyValueError::new_err(e.to_string()))?;
        let theta = ImplicitGenerator::new(1, noise_dim, 1, &hidden, Activation::Tanh, seed)
            .map_err(err)?;
        let psi = ImplicitGenerator::new(2, noise_dim, 1, &hidden, Activation::Tanh, seed + 1)
            .map_err(err)?;
        let problem = ImplicitProblem::new(
            theta,
            psi,
            dataset(source_x, source_y)?,
            dataset(target_x, target_y)?,
            config,
        )
        .map_err(err)?;
        Ok(Self { problem })
    }

    /// Trains in place; returns the per-epoch mean loss.
    fn train(&mut self) -> PyResult<Vec<f64>> {
        let cfg = self.problem.config.clone();
        let history = objectives::train(&mut self.problem, &cfg, |_| {}).map_err(err)?;
        Ok(history.iter().map(|r| r.loss).collect())
    }

    /// Estimated conditional transport cost at each x, from `draws`
    /// moment-matched noise draws.
    #[pyo3(signature = (xs, draws=500, seed=0))]
    fn transport_cost(&self, xs: Vec<f64>, draws: usize, seed: u64) -> PyResult<Vec<f64>> {
        let p = &self.problem;
        let noise = eval_noise(
            &mut RngStream::new(seed),
            draws,
            p.psi.noise_dim(),
            p.theta.noise_dim(),
        );
        transport_cost_grid(
            &TrainedPair {
                theta: &p.theta,
                psi: &p.psi,
            },
            &xs,
            &noise,
        )
        .map_err(err)
    }

    /// Paired (θ-side, ψ-side) draws at x.
    #[pyo3(signature = (x, draws=500, seed=0))]
    fn sample(&self, x: f64, draws: usize, seed: u64) -> PyResult<(Vec<f64>, Vec<f64>)> {
        use cot_core::harness::experiments::ConditionalSampler;
        let p = &self.problem;
        let noise = eval_noise(
            &mut RngStream::new(seed),
            draws,
            p.psi.noise_dim(),
            p.theta.noise_dim(),
        );
        TrainedPair {
            theta: &p.theta,
            psi: &p.psi,
        }
        .pairs(x, &noise)
        .map_err(err)
    }
}

#[pymodule]
fn pycot(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<PyKernel>()?;
    m.add_class::<PyImplicitCot>()?;
    m.add_function(wrap_pyfunction!(mmd2, m)?)?;
    m.add_function(wrap_pyfunction!(gaussian_w2sq, m)?)?;
    m.add_function(wrap_pyfunction!(true_conditional_w2sq, m)?)?;
    m.add_function(wrap_pyfunction!(analytic_barycenter, m)?)?;
    m.add_function(wrap_pyfunction!(exact_ot_1d, m)?)?;
    m.add_function(wrap_pyfunction!(empirical_w1_1d, m)?)?;
    m.add_function(wrap_pyfunction!(exact_assignment_ot, m)?)?;
    m.add_function(wrap_pyfunction!(gen_conditional_gaussian, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    Ok(())
}
