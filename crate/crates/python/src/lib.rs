use copulad::config::resolve_config as resolve;
use copulad::dependency::{Base, DependencyConfig, DependencyModel, Family};
use copulad::evaluation::EpochRecord;
use copulad::pipeline::{checkpoint_to_string, evaluate_series, fit, load_checkpoint, save_checkpoint, Checkpoint};
use copulad::synthdata::{case_preset, events_from_labels, generate_latent_series, LabeledSeries};
use copulad::Error;
use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(e) => PyOSError::new_err(e.to_string()),
        e @ (Error::InvalidConfig(_)
        | Error::UnknownKey { .. }
        | Error::TypeMismatch { .. }
        | Error::UnknownCase(_)
        | Error::DimensionMismatch { .. }
        | Error::WindowTooLong { .. }
        | Error::ThresholdUndefined) => PyValueError::new_err(e.to_string()),
        e => PyRuntimeError::new_err(e.to_string()),
    }
}

fn series(rows: Vec<Vec<f64>>, labels: Option<Vec<u8>>) -> PyResult<LabeledSeries> {
    let dim = rows.first().map_or(0, Vec::len);
    if dim == 0 || rows.iter().any(|r| r.len() != dim) {
        return Err(PyValueError::new_err("values must be a non-empty rectangular list of rows"));
    }
    let labels = labels.unwrap_or_else(|| vec![0; rows.len()]);
    if labels.len() != rows.len() || labels.iter().any(|&y| y > 1) {
        return Err(PyValueError::new_err("labels must be 0/1, one per row"));
    }
    Ok(LabeledSeries {
        dim,
        values: rows.concat(),
        events: events_from_labels(&labels),
        labels,
    })
}

fn rows(s: &LabeledSeries) -> Vec<Vec<f64>> {
    s.values.chunks(s.dim).map(<[f64]>::to_vec).collect()
}

/// Synthetic scenario `case` as `(rows, labels)`.
#[pyfunction]
#[pyo3(signature = (case, seed = 0, length = None))]
fn generate(case: u8, seed: u64, length: Option<usize>) -> PyResult<(Vec<Vec<f64>>, Vec<u32>)> {
    let mut config = case_preset(case).map_err(py_err)?;
    config.seed = seed;
    if let Some(t) = length {
        config.length = t;
    }
    let s = generate_latent_series(&config).map_err(py_err)?;
    Ok((rows(&s), s.labels.iter().map(|&y| u32::from(y)).collect()))
}

/// Fully resolved run configuration as TOML.
#[pyfunction]
#[pyo3(signature = (text = None))]
fn resolve_config(text: Option<&str>) -> PyResult<String> {
    resolve(text, &[]).and_then(|c| c.to_toml()).map_err(py_err)
}

/// Copula log-density of each row of `u` under correlation `sigma`.
#[pyfunction]
#[pyo3(signature = (u, sigma, base = "student_t", nu = 4.0))]
fn copula_log_density(u: Vec<Vec<f64>>, sigma: Vec<Vec<f64>>, base: &str, nu: f64) -> PyResult<Vec<f64>> {
    let base = match base {
        "gaussian" => Base::Gaussian,
        "student_t" => Base::StudentT,
        other => return Err(PyValueError::new_err(format!("unknown base {other:?}"))),
    };
    let d = sigma.len();
    if u.iter().any(|r| r.len() != d) || sigma.iter().any(|r| r.len() != d) {
        return Err(PyValueError::new_err("u rows and sigma must share the dimension"));
    }
    let config = DependencyConfig {
        family: Family::Copula,
        base,
        nu,
        ..DependencyConfig::default()
    };
    let mut model = DependencyModel::new(&config, d).map_err(py_err)?;
    model.set_sigma(&sigma.concat()).map_err(py_err)?;
    model.copula_logdensity_batch(&u.concat()).map_err(py_err)
}

/// A trained model plus the history of the run that produced it.
#[pyclass(name = "Detector", module = "copulad")]
struct Detector {
    ckpt: Checkpoint,
    history: Vec<EpochRecord>,
}

#[pymethods]
impl Detector {
    /// Trains on `rows`; `config` is TOML text resolved over the defaults.
    #[staticmethod]
    #[pyo3(signature = (rows, labels, config = None))]
    fn fit(py: Python<'_>, rows: Vec<Vec<f64>>, labels: Vec<u8>, config: Option<&str>) -> PyResult<Self> {
        let s = series(rows, Some(labels))?;
        let mut run = resolve(config, &[]).map_err(py_err)?;
        run.train.encoder.input_dim = s.dim;
        let (ckpt, history) = py.detach(|| fit(&s, None, &run.train)).map_err(py_err)?;
        Ok(Self { ckpt, history })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            ckpt: load_checkpoint(path.as_ref()).map_err(py_err)?,
            history: Vec::new(),
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        save_checkpoint(&self.ckpt, path.as_ref()).map_err(py_err)
    }

    fn to_json(&self) -> PyResult<String> {
        checkpoint_to_string(&self.ckpt).map_err(py_err)
    }

    #[getter]
    fn window(&self) -> usize {
        self.ckpt.config.window
    }

    #[getter]
    fn epoch(&self) -> usize {
        self.ckpt.epoch
    }

    #[getter]
    fn threshold(&self) -> Option<f64> {
        self.ckpt.threshold
    }

    /// Log-density of every stride-1 window; lower is more anomalous.
    fn score(&self, py: Python<'_>, rows: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
        let s = series(rows, None)?;
        py.detach(|| self.ckpt.score_series(&s)).map(|w| w.scores).map_err(py_err)
    }

    fn evaluate<'py>(&self, py: Python<'py>, rows: Vec<Vec<f64>>, labels: Vec<u8>) -> PyResult<Bound<'py, PyDict>> {
        let s = series(rows, Some(labels))?;
        let (_, tau, c, delay) = py.detach(|| evaluate_series(&self.ckpt, &s)).map_err(py_err)?;
        let out = PyDict::new(py);
        out.set_item("precision", c.precision)?;
        out.set_item("recall", c.recall)?;
        out.set_item("f1", c.f1)?;
        out.set_item("auc_roc", c.auc_roc)?;
        out.set_item("threshold", tau)?;
        out.set_item("add", delay.add)?;
        out.set_item("add_missed", delay.missed)?;
        Ok(out)
    }

    #[getter]
    fn history<'py>(&self, py: Python<'py>) -> PyResult<Vec<Bound<'py, PyDict>>> {
        self.history
            .iter()
            .map(|r| {
                let d = PyDict::new(py);
                d.set_item("epoch", r.epoch)?;
                d.set_item("loss", r.loss)?;
                d.set_item("normal_logc", r.normal_logc)?;
                d.set_item("anomaly_logc", r.anomaly_logc)?;
                d.set_item("val_f1", r.val_f1)?;
                d.set_item("val_auc", r.val_auc)?;
                d.set_item("val_add", r.val_add)?;
                Ok(d)
            })
            .collect()
    }

    fn __repr__(&self) -> String {
        format!(
            "Detector(window={}, epoch={}, family={:?}, base={:?})",
            self.ckpt.config.window, self.ckpt.epoch, self.ckpt.config.dependency.family, self.ckpt.config.dependency.base
        )
    }
}

#[pymodule]
#[pyo3(name = "copulad")]
fn copulad_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(resolve_config, m)?)?;
    m.add_function(wrap_pyfunction!(copula_log_density, m)?)?;
    m.add_class::<Detector>()?;
    Ok(())
}
