//! Python bindings. Matrices cross the boundary as nested lists of floats
//! and pair records as JSON strings in the pair-file format.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use normmatch::checkpoint::{Checkpoint, EpochMetrics};
use normmatch::config::TrainConfig;
use normmatch::dataset::{read_pairs, PairRecord};
use normmatch::gradcheck::GradCheckConfig;
use normmatch::harness::prepare_records;
use normmatch::matching::{self, AffinityMatrix, TransportPlan};
use normmatch::model::Model;
use normmatch::suite::{gradient_suite, GradModule};
use normmatch::synth::{generate_dataset, SyntheticPairSpec};
use normmatch::train::{evaluate, Adam, Trainer};
use normmatch::{Error, ParameterStore, Tensor};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(io) => PyIOError::new_err(io.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

trait OrPy<T> {
    fn or_py(self) -> PyResult<T>;
}

impl<T> OrPy<T> for normmatch::Result<T> {
    fn or_py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

fn to_tensor(rows: Vec<Vec<f64>>) -> PyResult<Tensor> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|row| row.len() != c) {
        return Err(PyValueError::new_err("ragged matrix"));
    }
    Tensor::matrix(r, c, rows.concat()).or_py()
}

fn to_rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

/// Cosine affinity of two sets of unit-norm rows.
#[pyfunction]
fn affinity(f1: Vec<Vec<f64>>, f2: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    let c = matching::affinity(&to_tensor(f1)?, &to_tensor(f2)?).or_py()?;
    Ok(to_rows(&c.values))
}

/// Log-space Sinkhorn. Returns the plan and its largest marginal error.
#[pyfunction]
#[pyo3(signature = (c, temperature = 0.1, iters = 20))]
fn sinkhorn(c: Vec<Vec<f64>>, temperature: f64, iters: usize) -> PyResult<(Vec<Vec<f64>>, f64)> {
    let plan = matching::sinkhorn_log(&AffinityMatrix { values: to_tensor(c)? }, temperature, iters).or_py()?;
    Ok((to_rows(&plan.values), plan.max_marginal_error))
}

/// Row-wise argmax of a plan, plus whether two rows share a column.
#[pyfunction]
fn decode_matching(plan: Vec<Vec<f64>>) -> PyResult<(Vec<usize>, bool)> {
    let values = to_tensor(plan)?;
    let m = matching::decode_matching(&TransportPlan {
        max_marginal_error: matching::marginal_error(&values),
        values,
        iterations_used: 0,
    });
    Ok((m.assignment, m.non_injective))
}

/// Synthetic pairs as JSON lines. `spec` uses the `key = value` format.
#[pyfunction]
#[pyo3(signature = (seed, spec = ""))]
fn generate_pairs(seed: u64, spec: &str) -> PyResult<Vec<String>> {
    let spec = SyntheticPairSpec::parse(spec).or_py()?;
    generate_dataset(&spec, seed)
        .or_py()?
        .iter()
        .map(|p| serde_json::to_string(p).map_err(|e| PyValueError::new_err(e.to_string())))
        .collect()
}

/// Finite-difference checks; one `(passed, max_rel_error)` per instance.
#[pyfunction]
#[pyo3(signature = (module, instances = 10, seed = 0))]
fn gradcheck(module: &str, instances: usize, seed: u64) -> PyResult<Vec<(bool, f64)>> {
    let module: GradModule = module.parse().or_py()?;
    let reports = gradient_suite(module, instances, seed, &GradCheckConfig::default()).or_py()?;
    Ok(reports.iter().map(|r| (r.passed(), r.max_rel_error())).collect())
}

fn metrics_dict<'py>(py: Python<'py>, e: &EpochMetrics) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("epoch", e.epoch)?;
    d.set_item("lr", e.lr)?;
    d.set_item("train_loss", e.train_loss)?;
    d.set_item("steps", e.steps)?;
    d.set_item("val_accuracy", e.val_accuracy)?;
    Ok(d)
}

/// A model with its parameters and optimizer state.
#[pyclass]
struct Matcher {
    model: Model,
    store: ParameterStore,
    adam: Adam,
    epoch: usize,
    history: Vec<EpochMetrics>,
}

impl Matcher {
    fn from_config(cfg: TrainConfig) -> PyResult<Self> {
        let model = Model::new(&cfg).or_py()?;
        let store = model.init_params(cfg.seed).or_py()?;
        let adam = Adam::new(&store);
        Ok(Self {
            model,
            store,
            adam,
            epoch: 0,
            history: Vec::new(),
        })
    }

    fn pairs_from_json(&self, lines: &[String]) -> PyResult<Vec<normmatch::dataset::PreparedPair>> {
        let recs: Vec<PairRecord> = lines
            .iter()
            .map(|l| serde_json::from_str(l).map_err(|e| PyValueError::new_err(e.to_string())))
            .collect::<PyResult<_>>()?;
        prepare_records(&self.model.config, &recs, None).or_py()
    }

    fn pairs_from_file(&self, path: &PathBuf) -> PyResult<Vec<normmatch::dataset::PreparedPair>> {
        let recs = read_pairs(path).or_py()?;
        prepare_records(&self.model.config, &recs, Some(path)).or_py()
    }
}

#[pymethods]
impl Matcher {
    /// Fresh weights from a `key = value` config; the desk preset by default.
    #[new]
    #[pyo3(signature = (config = ""))]
    fn new(config: &str) -> PyResult<Self> {
        Self::from_config(TrainConfig::parse(config).or_py()?)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ck = Checkpoint::load(&path).or_py()?;
        let model = Model::new(&ck.config).or_py()?;
        let t = Trainer::from_checkpoint(&model, &ck).or_py()?;
        let (store, adam, epoch, history) = (t.store, t.adam, t.epoch, t.history);
        Ok(Self {
            model,
            store,
            adam,
            epoch,
            history,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.trainer(|t| t.checkpoint()).save(&path).or_py()
    }

    /// The config in the file format.
    fn config(&self) -> String {
        self.model.config.to_text()
    }

    #[getter]
    fn epoch(&self) -> usize {
        self.epoch
    }

    fn history<'py>(&self, py: Python<'py>) -> PyResult<Vec<Bound<'py, PyDict>>> {
        self.history.iter().map(|e| metrics_dict(py, e)).collect()
    }

    /// Runs the remaining configured epochs on pair files and returns the
    /// metrics of the epochs just run.
    #[pyo3(signature = (train_pairs, val_pairs = None))]
    fn train<'py>(
        &mut self,
        py: Python<'py>,
        train_pairs: PathBuf,
        val_pairs: Option<PathBuf>,
    ) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let train = self.pairs_from_file(&train_pairs)?;
        let val = match &val_pairs {
            Some(p) => self.pairs_from_file(p)?,
            None => Vec::new(),
        };
        let start = self.history.len();
        let mut t = Trainer {
            model: &self.model,
            store: std::mem::take(&mut self.store),
            adam: std::mem::replace(&mut self.adam, Adam { step: 0, m: Vec::new(), v: Vec::new() }),
            epoch: self.epoch,
            history: std::mem::take(&mut self.history),
        };
        let res = py.allow_threads(|| t.train(&train, &val, |_, _| Ok(())));
        self.store = t.store;
        self.adam = t.adam;
        self.epoch = t.epoch;
        self.history = t.history;
        res.or_py()?;
        self.history[start..].iter().map(|e| metrics_dict(py, e)).collect()
    }

    /// Matches one pair given as a JSON record.
    fn match_pair<'py>(&self, py: Python<'py>, pair: String) -> PyResult<Bound<'py, PyDict>> {
        let p = self.pairs_from_json(&[pair])?.remove(0);
        let inf = self.model.infer(&self.store, &p).or_py()?;
        let acc = matching::accuracy(&inf.matching.assignment, &p.truth).or_py()?;
        let d = PyDict::new(py);
        d.set_item("assignment", inf.matching.assignment)?;
        d.set_item("non_injective", inf.matching.non_injective)?;
        d.set_item("marginal_error", inf.plan.max_marginal_error)?;
        d.set_item("scores", inf.scores)?;
        d.set_item("plan", to_rows(&inf.plan.values))?;
        d.set_item("accuracy", acc)?;
        Ok(d)
    }

    /// Mean and per-class accuracy over JSON records.
    fn evaluate(&self, pairs: Vec<String>) -> PyResult<(f64, Vec<(usize, usize, f64)>)> {
        let prepared = self.pairs_from_json(&pairs)?;
        let r = evaluate(&self.model, &self.store, &prepared).or_py()?;
        let rows = r.classes.iter().map(|c| (c.class_id, c.pairs, c.accuracy)).collect();
        Ok((r.mean_accuracy, rows))
    }

    fn parameter_names(&self) -> Vec<String> {
        self.store.iter().map(|(n, _)| n.to_string()).collect()
    }

    fn parameter(&self, name: &str) -> PyResult<(Vec<usize>, Vec<f64>)> {
        let v = self.store.value(name).or_py()?;
        Ok((v.shape().to_vec(), v.data().to_vec()))
    }
}

impl Matcher {
    fn trainer<R>(&self, f: impl FnOnce(&Trainer<'_>) -> R) -> R {
        let t = Trainer {
            model: &self.model,
            store: self.store.clone(),
            adam: self.adam.clone(),
            epoch: self.epoch,
            history: self.history.clone(),
        };
        f(&t)
    }
}

#[pymodule]
fn normmatch_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(affinity, m)?)?;
    m.add_function(wrap_pyfunction!(sinkhorn, m)?)?;
    m.add_function(wrap_pyfunction!(decode_matching, m)?)?;
    m.add_function(wrap_pyfunction!(generate_pairs, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_class::<Matcher>()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nested_lists_round_trip_and_reject_ragged_rows() {
        let rows = vec![vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]];
        let t = to_tensor(rows.clone()).unwrap();
        assert_eq!(t.shape(), &[3, 2]);
        assert_eq!(to_rows(&t), rows);
        assert!(to_tensor(vec![vec![1.0], vec![1.0, 2.0]]).is_err());
    }
}
