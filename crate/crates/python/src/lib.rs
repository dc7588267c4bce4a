//! Python bindings for the hmamba core library.

use std::collections::BTreeMap;
use std::path::PathBuf;

use hmamba::data::{build_sequences, synth_hierarchical_dataset, BuildOptions, Interaction, InteractionLog, SequenceDataset};
use hmamba::lorentz::{self, Curvature, LorentzPoint, TangentVector, Tolerance};
use hmamba::metrics::{self, EvalOptions, Split};
use hmamba::model::{checkpoint, item_points, score_sequences, ModelConfig, ModelState, Variant};
use hmamba::train::{train_epoch, Optimizer, OptimizerKind, TrainConfig};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

fn err(e: hmamba::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn curvature(k: f64) -> PyResult<Curvature> {
    Curvature::new(k).map_err(err)
}

fn point(coords: Vec<f64>, k: f64) -> PyResult<LorentzPoint> {
    LorentzPoint::new(coords, curvature(k)?).map_err(err)
}

/// Lorentz inner product `-u0 v0 + sum uj vj`.
#[pyfunction]
fn lorentz_inner(u: Vec<f64>, v: Vec<f64>) -> PyResult<f64> {
    lorentz::lorentz_inner(&u, &v).map_err(err)
}

/// Exponential map at the origin of a spatial tangent vector; returns ambient coordinates.
#[pyfunction]
#[pyo3(signature = (v, k = 1.0))]
fn exp_map_origin(v: Vec<f64>, k: f64) -> PyResult<Vec<f64>> {
    let t = lorentz::lift(&v, curvature(k)?);
    Ok(lorentz::exp_map_origin(&t, &Tolerance::default()).map_err(err)?.into_coords())
}

/// Logarithmic map at the origin; returns the spatial part of the tangent vector.
#[pyfunction]
#[pyo3(signature = (x, k = 1.0))]
fn log_map_origin(x: Vec<f64>, k: f64) -> PyResult<Vec<f64>> {
    let t = lorentz::log_map_origin(&point(x, k)?, &Tolerance::default()).map_err(err)?;
    Ok(t.coords()[1..].to_vec())
}

#[pyfunction]
#[pyo3(signature = (x, y, k = 1.0))]
fn hyperbolic_distance(x: Vec<f64>, y: Vec<f64>, k: f64) -> PyResult<f64> {
    lorentz::hyperbolic_distance(&point(x, k)?, &point(y, k)?, &Tolerance::default()).map_err(err)
}

/// Transports `v`, tangent at `x`, to `y`.
#[pyfunction]
#[pyo3(signature = (x, y, v, k = 1.0))]
fn parallel_transport(x: Vec<f64>, y: Vec<f64>, v: Vec<f64>, k: f64) -> PyResult<Vec<f64>> {
    let x = point(x, k)?;
    let v = TangentVector::new(v, x.clone()).map_err(err)?;
    let out = lorentz::parallel_transport(&x, &point(y, k)?, &v, &Tolerance::default()).map_err(err)?;
    Ok(out.into_coords())
}

#[pyfunction]
#[pyo3(signature = (x, k = 1.0))]
fn project_to_poincare(x: Vec<f64>, k: f64) -> PyResult<Vec<f64>> {
    Ok(lorentz::project_to_poincare(&point(x, k)?))
}

/// HR, NDCG and MRR at cutoff `k` for full rankings and their targets.
#[pyfunction]
fn compute_metrics(rankings: Vec<Vec<usize>>, targets: Vec<usize>, k: usize) -> PyResult<BTreeMap<String, f64>> {
    let m = metrics::compute_metrics(&rankings, &targets, k).map_err(err)?;
    Ok(BTreeMap::from([
        ("hr".to_string(), m.hr),
        ("ndcg".to_string(), m.ndcg),
        ("mrr".to_string(), m.mrr),
    ]))
}

/// Synthetic hierarchical log as `(user, item, timestamp)` triples.
#[pyfunction]
#[pyo3(signature = (seed = 7, depth = 3, branching = 3, users = 500, length = 20))]
fn synth(seed: u64, depth: usize, branching: usize, users: usize, length: usize) -> PyResult<Vec<(u64, u64, i64)>> {
    let (log, _) = synth_hierarchical_dataset(seed, depth, branching, users, length).map_err(err)?;
    Ok(log.records.iter().map(|r| (r.user, r.item, r.timestamp)).collect())
}

/// Leave-one-out sequences built from an interaction log.
#[pyclass(module = "hmamba", frozen)]
struct Dataset {
    inner: SequenceDataset,
}

#[pymethods]
impl Dataset {
    #[staticmethod]
    #[pyo3(signature = (interactions, min_user_len = 3, min_item_count = 1, max_seq_len = 50))]
    fn from_interactions(
        interactions: Vec<(u64, u64, i64)>,
        min_user_len: usize,
        min_item_count: usize,
        max_seq_len: usize,
    ) -> PyResult<Self> {
        let log = InteractionLog {
            records: interactions
                .into_iter()
                .map(|(user, item, timestamp)| Interaction { user, item, timestamp })
                .collect(),
            malformed: 0,
        };
        let opts = BuildOptions {
            min_user_len,
            min_item_count,
            max_seq_len,
        };
        Ok(Self {
            inner: build_sequences(&log, opts).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: SequenceDataset::load(&path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(err)
    }

    #[getter]
    fn n_items(&self) -> usize {
        self.inner.n_items()
    }

    #[getter]
    fn n_users(&self) -> usize {
        self.inner.users.len()
    }

    #[getter]
    fn item_ids(&self) -> Vec<u64> {
        self.inner.item_ids.clone()
    }

    fn train_sequences(&self) -> Vec<Vec<usize>> {
        self.inner.train_sequences()
    }

    fn __repr__(&self) -> String {
        format!("Dataset(users={}, items={})", self.inner.users.len(), self.inner.n_items())
    }
}

/// Model parameters plus configuration.
#[pyclass(module = "hmamba")]
struct Model {
    inner: ModelState,
}

#[pymethods]
impl Model {
    #[new]
    #[pyo3(signature = (vocab_size, variant = "full", d = 32, d_state = 32, max_seq_len = 50, k = 1.0, dropout = 0.1, seed = 42))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        vocab_size: usize,
        variant: &str,
        d: usize,
        d_state: usize,
        max_seq_len: usize,
        k: f64,
        dropout: f64,
        seed: u64,
    ) -> PyResult<Self> {
        let cfg = ModelConfig {
            variant: variant.parse::<Variant>().map_err(err)?,
            d,
            d_state,
            max_seq_len,
            k,
            dropout,
            vocab_size,
            ..ModelConfig::default()
        };
        Ok(Self {
            inner: ModelState::init(cfg, seed).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: checkpoint::load(&path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        checkpoint::save(&self.inner, &path).map_err(err)
    }

    #[getter]
    fn variant(&self) -> &'static str {
        self.inner.config().variant.name()
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        self.inner.config().vocab_size
    }

    #[getter]
    fn n_params(&self) -> usize {
        self.inner.n_params()
    }

    /// Scores of items `1..vocab_size` after each sequence; entry `j` is item `j + 1`.
    fn score(&self, sequences: Vec<Vec<usize>>) -> PyResult<Vec<Vec<f64>>> {
        let refs: Vec<&[usize]> = sequences.iter().map(Vec::as_slice).collect();
        score_sequences(&self.inner, &refs).map_err(err)
    }

    /// Top-`n` item ids after each sequence.
    #[pyo3(signature = (sequences, n = 10))]
    fn recommend(&self, sequences: Vec<Vec<usize>>, n: usize) -> PyResult<Vec<Vec<usize>>> {
        Ok(self
            .score(sequences)?
            .iter()
            .map(|s| {
                let mut ids: Vec<usize> = (1..=s.len()).collect();
                ids.sort_by(|&a, &b| s[b - 1].total_cmp(&s[a - 1]).then(a.cmp(&b)));
                ids.truncate(n);
                ids
            })
            .collect())
    }

    /// Poincaré-ball coordinates of items `1..vocab_size` (hyperbolic variants only).
    fn poincare_items(&self) -> PyResult<Vec<Vec<f64>>> {
        if !self.inner.config().variant.is_hyperbolic() {
            return Err(PyValueError::new_err("the euclidean variant has no hyperbolic item points"));
        }
        Ok(item_points(&self.inner)
            .map_err(err)?
            .iter()
            .map(lorentz::project_to_poincare)
            .collect())
    }

    /// Trains in place; returns the mean loss of each epoch.
    #[pyo3(signature = (dataset, epochs = 10, lr = 1e-3, batch_size = 128, optimizer = "adam", seed = 42))]
    fn fit(
        &mut self,
        dataset: &Dataset,
        epochs: usize,
        lr: f64,
        batch_size: usize,
        optimizer: &str,
        seed: u64,
    ) -> PyResult<Vec<f64>> {
        let cfg = TrainConfig {
            batch_size,
            epochs,
            optimizer: optimizer.parse::<OptimizerKind>().map_err(err)?,
            lr,
            seed,
            ..TrainConfig::default()
        };
        cfg.validate().map_err(err)?;
        let mut opt = Optimizer::new(cfg.optimizer, cfg.lr).map_err(err)?;
        let seqs = dataset.inner.train_sequences();
        (1..=epochs)
            .map(|e| {
                train_epoch(&mut self.inner, &seqs, &mut opt, &cfg, e)
                    .map(|(r, _)| r.mean_loss)
                    .map_err(err)
            })
            .collect()
    }

    /// Full-catalog leave-one-out metrics keyed by `"{metric}@{k}"`.
    #[pyo3(signature = (dataset, ks = vec![1, 5, 10, 20], split = "test"))]
    fn evaluate(&self, dataset: &Dataset, ks: Vec<usize>, split: &str) -> PyResult<BTreeMap<String, f64>> {
        let split = match split {
            "test" => Split::Test,
            "valid" => Split::Valid,
            other => return Err(PyValueError::new_err(format!("unknown split '{other}'"))),
        };
        let opts = EvalOptions {
            split,
            ks,
            ..EvalOptions::default()
        };
        let report = metrics::evaluate(&self.inner, &dataset.inner, &opts).map_err(err)?;
        let mut out = BTreeMap::new();
        for m in &report.metrics {
            out.insert(format!("hr@{}", m.k), m.hr);
            out.insert(format!("ndcg@{}", m.k), m.ndcg);
            out.insert(format!("mrr@{}", m.k), m.mrr);
        }
        Ok(out)
    }

    fn __repr__(&self) -> String {
        let c = self.inner.config();
        format!("Model(variant={}, d={}, d_state={}, vocab_size={})", c.variant, c.d, c.d_state, c.vocab_size)
    }
}

#[pymodule]
#[pyo3(name = "hmamba")]
fn hmamba_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(lorentz_inner, m)?)?;
    m.add_function(wrap_pyfunction!(exp_map_origin, m)?)?;
    m.add_function(wrap_pyfunction!(log_map_origin, m)?)?;
    m.add_function(wrap_pyfunction!(hyperbolic_distance, m)?)?;
    m.add_function(wrap_pyfunction!(parallel_transport, m)?)?;
    m.add_function(wrap_pyfunction!(project_to_poincare, m)?)?;
    m.add_function(wrap_pyfunction!(compute_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_class::<Dataset>()?;
    m.add_class::<Model>()?;
    Ok(())
}
