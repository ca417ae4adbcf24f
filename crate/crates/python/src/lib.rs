//! Python bindings. Vectors and matrices cross the boundary as lists;
//! options use the same key names as the CLI and config files.

use std::collections::BTreeMap;

use caat_core::attack::{self, AttackSpec};
use caat_core::data::{self, Dataset, LabelSpace};
use caat_core::error::{Error, ErrorClass};
use caat_core::experiment::{self, Command, Config};
use caat_core::model::{self, Activation, Label, Model, ModelSpec, OutputHead, ParamVector};
use caat_core::surgery::{self, Branch};
use caat_core::theory;
use caat_core::train::Trainer;
use ndarray::{Array1, Array2};
use pyo3::create_exception;
use pyo3::exceptions::{PyArithmeticError, PyMemoryError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};

create_exception!(caat, ValidationError, PyValueError);
create_exception!(caat, ResourceGuardError, PyMemoryError);
create_exception!(caat, NumericError, PyArithmeticError);

fn py_err(e: Error) -> PyErr {
    let msg = e.to_string();
    match e.class() {
        ErrorClass::Validation => ValidationError::new_err(msg),
        ErrorClass::ResourceGuard => ResourceGuardError::new_err(msg),
        ErrorClass::Numeric => NumericError::new_err(msg),
    }
}

trait OrPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> OrPy<T> for caat_core::error::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Array2<f64>> {
    let n = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != d) {
        return Err(ValidationError::new_err("rows have different lengths"));
    }
    Array2::from_shape_vec((n, d), rows.into_iter().flatten().collect()).map_err(|e| ValidationError::new_err(e.to_string()))
}

fn rows(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.outer_iter().map(|r| r.to_vec()).collect()
}

/// A config for `command` with `options` applied on top of its defaults.
fn config(command: Command, options: Option<&Bound<'_, PyDict>>) -> PyResult<Config> {
    let mut pairs = Vec::new();
    if let Some(opts) = options {
        for (k, v) in opts.iter() {
            let key: String = k.extract()?;
            let value = match v.extract::<bool>() {
                Ok(b) => b.to_string(),
                Err(_) => v.str()?.to_string(),
            };
            pairs.push((key, value));
        }
    }
    Config::resolve(command, None, pairs.iter().map(|(k, v)| (k.as_str(), v.as_str()))).py()
}

fn json_to_py(py: Python<'_>, v: &serde_json::Value) -> PyResult<Py<PyAny>> {
    use serde_json::Value;
    Ok(match v {
        Value::Null => py.None(),
        Value::Bool(b) => b.into_pyobject(py)?.to_owned().into_any().unbind(),
        Value::Number(n) => match n.as_i64() {
            Some(i) => i.into_pyobject(py)?.into_any().unbind(),
            None => n.as_f64().unwrap_or(f64::NAN).into_pyobject(py)?.into_any().unbind(),
        },
        Value::String(s) => s.into_pyobject(py)?.into_any().unbind(),
        Value::Array(items) => {
            let list = PyList::empty(py);
            for item in items {
                list.append(json_to_py(py, item)?)?;
            }
            list.into_any().unbind()
        }
        Value::Object(map) => {
            let dict = PyDict::new(py);
            for (k, item) in map {
                dict.set_item(k, json_to_py(py, item)?)?;
            }
            dict.into_any().unbind()
        }
    })
}

fn to_py<T: serde::Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let v = serde_json::to_value(value).map_err(|e| ValidationError::new_err(e.to_string()))?;
    json_to_py(py, &v)
}

fn loss_kind(name: &str, beta: f64) -> PyResult<caat_core::loss::LossKind> {
    let mut cfg = Config::defaults(Command::Train);
    cfg.set("loss", name).py()?;
    cfg.set("beta", &beta.to_string()).py()?;
    cfg.loss().py()
}

fn activation_from(name: &str) -> PyResult<Activation> {
    match name {
        "relu" => Ok(Activation::Relu),
        "tanh" => Ok(Activation::Tanh),
        other => Err(ValidationError::new_err(format!("unknown activation `{other}`"))),
    }
}

/// Perturbation settings.
#[pyclass(name = "Attack", module = "caat", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyAttack {
    spec: AttackSpec,
}

#[pymethods]
impl PyAttack {
    /// Keys: attack, norm, delta, alpha, steps, random_init, clip.
    #[new]
    #[pyo3(signature = (**options))]
    fn new(options: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        Ok(Self {
            spec: config(Command::Train, options)?.attack().py()?,
        })
    }

    #[getter]
    fn delta(&self) -> f64 {
        self.spec.delta
    }

    #[getter]
    fn steps(&self) -> usize {
        self.spec.steps
    }

    fn __repr__(&self) -> String {
        format!("{:?}", self.spec)
    }
}

#[pyclass(name = "Model", module = "caat", skip_from_py_object)]
#[derive(Clone)]
struct PyModel {
    inner: Model,
}

#[pymethods]
impl PyModel {
    /// Layer widths `[d, h1, ..., k]`; a final width of 1 gives a single
    /// logit for ±1 labels, otherwise a softmax over class indices.
    #[new]
    #[pyo3(signature = (dims, activation = "relu", seed = 0))]
    fn new(dims: Vec<usize>, activation: &str, seed: u64) -> PyResult<Self> {
        let act = activation_from(activation)?;
        let head = if dims.last() == Some(&1) {
            OutputHead::SingleLogit
        } else {
            OutputHead::MultiLogit
        };
        let spec = ModelSpec::new(dims, act, head).py()?;
        Ok(Self {
            inner: Model::init(spec, seed),
        })
    }

    #[staticmethod]
    #[pyo3(signature = (d, seed = 0))]
    fn logistic(d: usize, seed: u64) -> PyResult<Self> {
        Ok(Self {
            inner: Model::init(ModelSpec::logistic(d).py()?, seed),
        })
    }

    #[staticmethod]
    #[pyo3(signature = (path, activation = "relu"))]
    fn load(path: &str, activation: &str) -> PyResult<Self> {
        Ok(Self {
            inner: data::read_checkpoint(path, activation_from(activation)?).py()?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        data::write_checkpoint(path, &self.inner).py()
    }

    #[getter]
    fn dims(&self) -> Vec<usize> {
        self.inner.spec().layer_dims().to_vec()
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.spec().param_count()
    }

    fn params(&self) -> Vec<f64> {
        self.inner.to_params().into_vec()
    }

    fn set_params(&mut self, params: Vec<f64>) -> PyResult<()> {
        self.inner.set_params(&ParamVector::from_vec(params)).py()
    }

    fn logits(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        Ok(rows(&self.inner.logits(matrix(x)?.view()).py()?))
    }

    fn predict(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<Label>> {
        let logits = self.inner.logits(matrix(x)?.view()).py()?;
        Ok(self.inner.predict(logits.view()))
    }

    /// Mean loss and its parameter gradient over a batch.
    #[pyo3(signature = (x, labels, loss = "bce", beta = 6.0))]
    fn loss_and_grad(&self, x: Vec<Vec<f64>>, labels: Vec<Label>, loss: &str, beta: f64) -> PyResult<(f64, Vec<f64>)> {
        let (l, g) = self
            .inner
            .loss_and_param_gradient(matrix(x)?.view(), &labels, &loss_kind(loss, beta)?)
            .py()?;
        Ok((l, g.into_vec()))
    }

    #[pyo3(signature = (x, label, loss = "bce", beta = 6.0))]
    fn input_gradient(&self, x: Vec<f64>, label: Label, loss: &str, beta: f64) -> PyResult<Vec<f64>> {
        let g = self.inner.input_gradient(Array1::from(x).view(), label, &loss_kind(loss, beta)?).py()?;
        Ok(g.to_vec())
    }

    fn __repr__(&self) -> String {
        format!("Model(dims={:?}, params={})", self.dims(), self.param_count())
    }
}

#[pyfunction]
fn cosine_similarity(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    surgery::cosine_similarity(&ParamVector::from_vec(a), &ParamVector::from_vec(b)).py()
}

/// `{"norm_gc", "norm_ga", "phi", "mu"}` for a gradient pair.
#[pyfunction]
fn conflict_mu(py: Python<'_>, g_c: Vec<f64>, g_a: Vec<f64>) -> PyResult<Py<PyAny>> {
    let c = surgery::conflict_mu(&ParamVector::from_vec(g_c), &ParamVector::from_vec(g_a)).py()?;
    let d = PyDict::new(py);
    d.set_item("norm_gc", c.norm_gc)?;
    d.set_item("norm_ga", c.norm_ga)?;
    d.set_item("phi", c.phi)?;
    d.set_item("mu", c.mu)?;
    Ok(d.into_any().unbind())
}

#[pyfunction]
fn combine_vanilla(g_c: Vec<f64>, g_a: Vec<f64>, lam: f64) -> PyResult<Vec<f64>> {
    Ok(surgery::combine_vanilla(&ParamVector::from_vec(g_c), &ParamVector::from_vec(g_a), lam)
        .py()?
        .into_vec())
}

#[pyfunction]
fn lambda_star(norm_gc: f64, norm_ga: f64, phi: f64, gamma: f64) -> PyResult<f64> {
    surgery::lambda_star(norm_gc, norm_ga, phi, gamma).py()
}

/// Conflict-aware combination; returns the update and a report dict with
/// `branch` in {"projected", "standard_only", "fallback_degenerate"}.
#[pyfunction]
fn project_conflict_aware(py: Python<'_>, g_c: Vec<f64>, g_a: Vec<f64>, gamma: f64) -> PyResult<(Vec<f64>, Py<PyAny>)> {
    let (g, r) = surgery::project_conflict_aware(&ParamVector::from_vec(g_c), &ParamVector::from_vec(g_a), gamma).py()?;
    let d = PyDict::new(py);
    d.set_item("norm_gc", r.norm_gc)?;
    d.set_item("norm_ga", r.norm_ga)?;
    d.set_item("phi", r.phi)?;
    d.set_item("mu", r.mu)?;
    d.set_item("lambda_star", r.lambda_star)?;
    let branch = match r.branch {
        Branch::Projected => "projected",
        Branch::StandardOnly => "standard_only",
        Branch::FallbackDegenerate => "fallback_degenerate",
    };
    d.set_item("branch", branch)?;
    Ok((g.into_vec(), d.into_any().unbind()))
}

#[pyfunction]
#[pyo3(signature = (model, x, labels, attack, loss = "bce", beta = 6.0, seed = 0))]
fn perturb(model: &PyModel, x: Vec<Vec<f64>>, labels: Vec<Label>, attack: &PyAttack, loss: &str, beta: f64, seed: u64) -> PyResult<Vec<Vec<f64>>> {
    let adv = attack::perturb_batch(&model.inner, matrix(x)?.view(), &labels, &loss_kind(loss, beta)?, &attack.spec, seed).py()?;
    Ok(rows(&adv))
}

/// Largest eigenvalue and residual of a symmetric PSD matrix.
#[pyfunction]
fn power_iteration_lmax(k: Vec<Vec<f64>>) -> PyResult<(f64, f64)> {
    let p = theory::power_iteration_lmax(matrix(k)?.view()).py()?;
    Ok((p.lambda_max, p.residual))
}

#[pyfunction]
#[pyo3(signature = (model, x, label, attack, loss = "bce", beta = 6.0, seed = 0))]
#[allow(clippy::too_many_arguments)]
fn verify_bound(py: Python<'_>, model: &PyModel, x: Vec<f64>, label: Label, attack: &PyAttack, loss: &str, beta: f64, seed: u64) -> PyResult<Py<PyAny>> {
    let r = theory::verify_bound(&model.inner, Array1::from(x).view(), label, &loss_kind(loss, beta)?, &attack.spec, seed).py()?;
    to_py(py, &r)
}

fn dataset(model: &Model, x: Vec<Vec<f64>>, y: Vec<Label>) -> PyResult<Dataset> {
    let space = match model.spec().output_head() {
        OutputHead::SingleLogit => LabelSpace::Binary,
        OutputHead::MultiLogit => LabelSpace::Classes(model.spec().output_dim()),
    };
    Dataset::new(matrix(x)?, y, space).py()
}

/// Trains a copy of `model`. `options` are training config keys (method,
/// lambda, gamma, loss, attack, delta, epochs, lr_max, ...). Returns the
/// trained model and one record dict per epoch.
#[pyfunction]
#[pyo3(signature = (model, train_x, train_y, test_x, test_y, **options))]
fn train(
    py: Python<'_>,
    model: &PyModel,
    train_x: Vec<Vec<f64>>,
    train_y: Vec<Label>,
    test_x: Vec<Vec<f64>>,
    test_y: Vec<Label>,
    options: Option<&Bound<'_, PyDict>>,
) -> PyResult<(PyModel, Vec<Py<PyAny>>)> {
    let tc = config(Command::Train, options)?.train_config().py()?;
    let train_set = dataset(&model.inner, train_x, train_y)?;
    let test_set = dataset(&model.inner, test_x, test_y)?;
    let mut m = model.inner.clone();
    let records = py
        .detach(|| -> caat_core::error::Result<_> {
            let mut trainer = Trainer::new(tc, &m, train_set.len())?;
            trainer.run(&mut m, &train_set, &test_set, |_| {})
        })
        .py()?;
    let recs = records.iter().map(|r| to_py(py, r)).collect::<PyResult<_>>()?;
    Ok((PyModel { inner: m }, recs))
}

/// One SGD heavy-ball step in place: `v ← m·v + g`, `θ ← θ − lr·v`.
#[pyfunction]
fn sgd_step(params: Vec<f64>, velocity: Vec<f64>, grad: Vec<f64>, lr: f64, momentum: f64) -> PyResult<(Vec<f64>, Vec<f64>)> {
    let mut p = ParamVector::from_vec(params);
    let mut v = ParamVector::from_vec(velocity);
    model::sgd_step(&mut p, &mut v, &ParamVector::from_vec(grad), lr, momentum).py()?;
    Ok((p.into_vec(), v.into_vec()))
}

/// Pixels scaled to `[0, 1]` and labels from an IDX image/label file pair.
#[pyfunction]
fn load_idx(images: &str, labels: &str) -> PyResult<(Vec<Vec<f64>>, Vec<Label>)> {
    let ds = data::load_idx(images, labels).py()?;
    Ok((rows(ds.images()), ds.labels().to_vec()))
}

fn command(name: &str) -> PyResult<Command> {
    [
        Command::Train,
        Command::Eval,
        Command::Sweep,
        Command::Synthetic,
        Command::BoundCheck,
        Command::ExportGradients,
    ]
    .into_iter()
    .find(|c| c.name() == name)
    .ok_or_else(|| ValidationError::new_err(format!("unknown command `{name}`")))
}

/// Runs a CLI command (`train`, `eval`, `sweep`, `synthetic`, `bound-check`,
/// `export-gradients`) with config keys as options; returns its manifest.
#[pyfunction]
#[pyo3(signature = (name, **options))]
fn run(py: Python<'_>, name: &str, options: Option<&Bound<'_, PyDict>>) -> PyResult<Py<PyAny>> {
    let cmd = command(name)?;
    let cfg = config(cmd, options)?;
    let manifest = py
        .detach(|| match cmd {
            Command::Train => experiment::cmd_train(&cfg).map(|o| o.manifest),
            Command::Eval => experiment::cmd_eval(&cfg).map(|o| o.0),
            Command::Sweep => experiment::cmd_sweep(&cfg).map(|o| o.manifest),
            Command::Synthetic => experiment::cmd_synthetic(&cfg).map(|o| o.manifest),
            Command::BoundCheck => experiment::cmd_bound_check(&cfg).map(|o| o.0),
            Command::ExportGradients => experiment::cmd_export_gradients(&cfg),
        })
        .py()?;
    to_py(py, &manifest)
}

/// Default value of every config key for `command`.
#[pyfunction]
#[pyo3(signature = (name = "train"))]
fn defaults(name: &str) -> PyResult<BTreeMap<String, String>> {
    Ok(Config::defaults(command(name)?).values().clone())
}

#[pymodule]
fn caat(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_class::<PyAttack>()?;
    m.add("ValidationError", m.py().get_type::<ValidationError>())?;
    m.add("ResourceGuardError", m.py().get_type::<ResourceGuardError>())?;
    m.add("NumericError", m.py().get_type::<NumericError>())?;
    m.add_function(wrap_pyfunction!(cosine_similarity, m)?)?;
    m.add_function(wrap_pyfunction!(conflict_mu, m)?)?;
    m.add_function(wrap_pyfunction!(combine_vanilla, m)?)?;
    m.add_function(wrap_pyfunction!(lambda_star, m)?)?;
    m.add_function(wrap_pyfunction!(project_conflict_aware, m)?)?;
    m.add_function(wrap_pyfunction!(perturb, m)?)?;
    m.add_function(wrap_pyfunction!(power_iteration_lmax, m)?)?;
    m.add_function(wrap_pyfunction!(verify_bound, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(sgd_step, m)?)?;
    m.add_function(wrap_pyfunction!(load_idx, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(defaults, m)?)?;
    Ok(())
}
