//! Python bindings: datasets, loss terms, risk estimators, distillation
//! and evaluation. Arrays cross the boundary as nested lists or as
//! `(shape, flat)` pairs.

use bacon_core::data::{self, BlobSpec, Dataset as CoreDataset, SyntheticSet as CoreSet};
use bacon_core::distill::{run_distillation, DistillConfig, Method};
use bacon_core::eval::{self, EvalConfig};
use bacon_core::featurenet::FeatureNetConfig;
use bacon_core::losses::{self, LossConfig, Pairing, SigmaPolicy};
use bacon_core::tensor::Tensor;
use bacon_core::theory::{self, DistributionSpec, RiskConfig, RiskEstimate};
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::PyDict;

create_exception!(bacon, BaconError, PyException);

fn err(e: bacon_core::Error) -> PyErr {
    BaconError::new_err(format!("{}: {e}", e.kind()))
}

fn value_err(msg: impl Into<String>) -> PyErr {
    pyo3::exceptions::PyValueError::new_err(msg.into())
}

fn matrix(rows: &[Vec<f64>]) -> PyResult<Tensor> {
    Tensor::from_rows(rows).map_err(err)
}

#[pyclass(module = "bacon", frozen)]
pub struct Dataset {
    inner: CoreDataset,
}

#[pymethods]
impl Dataset {
    /// Gaussian blobs; returns `(train, test)`.
    #[staticmethod]
    #[pyo3(signature = (classes=10, train_per_class=100, test_per_class=100, shape=(1, 4, 4), separation=4.0, seed=0))]
    fn blobs(
        classes: usize,
        train_per_class: usize,
        test_per_class: usize,
        shape: (usize, usize, usize),
        separation: f64,
        seed: u64,
    ) -> PyResult<(Dataset, Dataset)> {
        let spec = BlobSpec {
            classes,
            train_per_class,
            test_per_class,
            shape: [shape.0, shape.1, shape.2],
            separation,
            seed,
        };
        let (train, test) = data::make_blobs(&spec).map_err(err)?;
        Ok((Dataset { inner: train }, Dataset { inner: test }))
    }

    /// MNIST IDX files under `root`; returns `(train, test)`.
    #[staticmethod]
    fn mnist(root: &str) -> PyResult<(Dataset, Dataset)> {
        let (train, test) = data::load_mnist_dir(root).map_err(err)?;
        Ok((Dataset { inner: train }, Dataset { inner: test }))
    }

    #[staticmethod]
    fn cifar10(root: &str) -> PyResult<(Dataset, Dataset)> {
        let (train, test) = data::load_cifar10_dir(root).map_err(err)?;
        Ok((Dataset { inner: train }, Dataset { inner: test }))
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn classes(&self) -> usize {
        self.inner.classes()
    }

    #[getter]
    fn image_shape(&self) -> (usize, usize, usize) {
        let [c, h, w] = self.inner.image_shape();
        (c, h, w)
    }

    #[getter]
    fn name(&self) -> String {
        self.inner.name().to_string()
    }

    fn labels(&self) -> Vec<usize> {
        self.inner.labels().to_vec()
    }

    /// Normalized pixels as `(shape, flat)`.
    fn images(&self) -> (Vec<usize>, Vec<f64>) {
        let t = self.inner.images();
        (t.shape().to_vec(), t.data().to_vec())
    }

    fn digest(&self) -> String {
        self.inner.digest()
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset(name={:?}, len={}, classes={}, shape={:?})",
            self.inner.name(),
            self.inner.len(),
            self.inner.classes(),
            self.inner.image_shape()
        )
    }
}

#[pyclass(module = "bacon", frozen)]
pub struct SyntheticSet {
    inner: CoreSet,
}

#[pymethods]
impl SyntheticSet {
    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn classes(&self) -> usize {
        self.inner.classes()
    }

    #[getter]
    fn ipc(&self) -> usize {
        self.inner.ipc()
    }

    #[getter]
    fn method(&self) -> String {
        self.inner.provenance.method.clone()
    }

    fn labels(&self) -> Vec<usize> {
        self.inner.labels().to_vec()
    }

    fn images(&self) -> (Vec<usize>, Vec<f64>) {
        let t = self.inner.images();
        (t.shape().to_vec(), t.data().to_vec())
    }

    /// Writes a BSYN file and its JSON sidecar.
    fn save(&self, path: &str) -> PyResult<()> {
        data::save_synthetic(&self.inner, path).map_err(err)
    }

    fn __repr__(&self) -> String {
        format!(
            "SyntheticSet(method={:?}, classes={}, ipc={})",
            self.inner.provenance.method,
            self.inner.classes(),
            self.inner.ipc()
        )
    }
}

#[pyfunction]
fn load_synthetic(path: &str) -> PyResult<SyntheticSet> {
    Ok(SyntheticSet {
        inner: data::load_synthetic(path).map_err(err)?,
    })
}

fn loss_config(lambda: f64, terms: &[String], sigma_policy: &str, pairing: &str) -> PyResult<LossConfig> {
    for t in terms {
        if !["lh", "tv", "clip"].contains(&t.as_str()) {
            return Err(value_err(format!("unknown loss term {t:?}")));
        }
    }
    let has = |t: &str| terms.iter().any(|x| x == t);
    let sigma_policy = match sigma_policy {
        "per_class_scalar" => SigmaPolicy::PerClassScalar,
        "per_dimension" => SigmaPolicy::PerDimension,
        other => return Err(value_err(format!("unknown sigma policy {other:?}"))),
    };
    let pairing = match pairing {
        "anchor_mean" => Pairing::AnchorMean,
        "pairwise" => Pairing::Pairwise,
        other => return Err(value_err(format!("unknown pairing {other:?}"))),
    };
    Ok(LossConfig {
        lambda,
        sigma_policy,
        pairing,
        ..LossConfig::default()
    }
    .with_terms(has("lh"), has("tv"), has("clip")))
}

/// Loss terms of synthetic embeddings against one class's anchors.
/// Returns `{"total", "lh", "tv", "clip"}`; disabled terms are `None`.
#[pyfunction]
#[pyo3(signature = (z_syn, anchors, lam=0.8, terms=vec!["lh".to_string(), "tv".to_string(), "clip".to_string()], sigma_policy="per_class_scalar", pairing="anchor_mean"))]
fn loss_terms<'py>(
    py: Python<'py>,
    z_syn: Vec<Vec<f64>>,
    anchors: Vec<Vec<f64>>,
    lam: f64,
    terms: Vec<String>,
    sigma_policy: &str,
    pairing: &str,
) -> PyResult<Bound<'py, PyDict>> {
    let cfg = loss_config(lam, &terms, sigma_policy, pairing)?;
    let b = losses::evaluate_terms(&matrix(&z_syn)?, &matrix(&anchors)?, 0, &cfg).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("total", b.total)?;
    d.set_item("lh", b.lh)?;
    d.set_item("tv", b.tv)?;
    d.set_item("clip", b.clip)?;
    Ok(d)
}

/// Squared distance between the mean of `z_syn` rows and `real_mean`.
#[pyfunction]
fn loss_dm(z_syn: Vec<Vec<f64>>, real_mean: Vec<f64>) -> PyResult<f64> {
    let z = matrix(&z_syn)?;
    losses::dm_distance(&z.column_means(), &real_mean).map_err(err)
}

fn risk_spec(spec_json: Option<&str>, dim: usize) -> PyResult<DistributionSpec> {
    let spec = match spec_json {
        Some(s) => serde_json::from_str(s).map_err(|e| BaconError::new_err(format!("BadDistributionSpec: {e}")))?,
        None => DistributionSpec::unit_gaussians(dim),
    };
    spec.validate().map_err(err)?;
    Ok(spec)
}

fn estimate_dict<'py>(py: Python<'py>, e: &RiskEstimate) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    let method = match e.method {
        theory::RiskMethod::Direct => "direct",
        theory::RiskMethod::Theorem1 => "theorem1",
    };
    d.set_item("method", method)?;
    d.set_item("epsilon", e.epsilon)?;
    d.set_item("value", e.value)?;
    d.set_item("stderr", e.stderr)?;
    d.set_item("n", e.n)?;
    d.set_item("seed", e.seed)?;
    Ok(d)
}

/// Monte Carlo risk `P(||z_x - z_syn|| >= eps)` sampled directly.
/// `spec_json` is a tagged distribution spec; unit Gaussians otherwise.
#[pyfunction]
#[pyo3(signature = (epsilon, samples=20000, seed=0, spec_json=None, dim=2))]
fn risk_direct<'py>(
    py: Python<'py>,
    epsilon: f64,
    samples: usize,
    seed: u64,
    spec_json: Option<&str>,
    dim: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let cfg = RiskConfig::new(risk_spec(spec_json, dim)?, epsilon, samples, seed);
    let e = py.detach(|| theory::estimate_risk_direct(&cfg)).map_err(err)?;
    estimate_dict(py, &e)
}

/// The same risk through the ball-probability decomposition.
#[pyfunction]
#[pyo3(signature = (epsilon, samples=20000, seed=0, spec_json=None, dim=2))]
fn risk_theorem1<'py>(
    py: Python<'py>,
    epsilon: f64,
    samples: usize,
    seed: u64,
    spec_json: Option<&str>,
    dim: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let cfg = RiskConfig::new(risk_spec(spec_json, dim)?, epsilon, samples, seed);
    let e = py.detach(|| theory::estimate_risk_theorem1(&cfg)).map_err(err)?;
    estimate_dict(py, &e)
}

/// `(log(mean(p)), mean(log(p)))`.
#[pyfunction]
fn jensen_gap(p: Vec<f64>) -> PyResult<(f64, f64)> {
    theory::jensen_gap(&p).map_err(err)
}

/// Convnet when the input survives its pooling, otherwise a one-layer MLP.
fn auto_net(template: FeatureNetConfig, ds: &CoreDataset, kind: &str) -> PyResult<FeatureNetConfig> {
    let [c, h, w] = ds.image_shape();
    let mlp = FeatureNetConfig::mlp(c * h * w, vec![64], ds.classes());
    match kind {
        "convnet" => Ok(template.with_input(c, h, w)),
        "mlp" => Ok(mlp),
        "auto" => {
            let conv = template.with_input(c, h, w);
            Ok(if conv.validate().is_ok() { conv } else { mlp })
        }
        other => Err(value_err(format!("unknown net {other:?}"))),
    }
}

/// Distills `train`; returns `(SyntheticSet, history)` where history is a
/// list of per-step dicts.
#[pyfunction]
#[pyo3(signature = (train, ipc=1, steps=200, lam=0.8, terms=vec!["lh".to_string(), "tv".to_string(), "clip".to_string()], anchors=64, method="bacon", preset="desk", net="auto", seed=0))]
#[allow(clippy::too_many_arguments)]
fn distill<'py>(
    py: Python<'py>,
    train: &Dataset,
    ipc: usize,
    steps: usize,
    lam: f64,
    terms: Vec<String>,
    anchors: usize,
    method: &str,
    preset: &str,
    net: &str,
    seed: u64,
) -> PyResult<(SyntheticSet, Vec<Bound<'py, PyDict>>)> {
    let base = match preset {
        "desk" => DistillConfig::desk(ipc),
        "paper" => DistillConfig::paper(ipc),
        other => return Err(value_err(format!("unknown preset {other:?}"))),
    };
    let method = match method {
        "bacon" => Method::Bacon,
        "dm" => Method::Dm,
        other => return Err(value_err(format!("unknown method {other:?}"))),
    };
    let loss = loss_config(lam, &terms, "per_class_scalar", "anchor_mean")?;
    let cfg = DistillConfig {
        method,
        outer_steps: steps,
        anchors_per_class: anchors,
        net: auto_net(base.net.clone(), &train.inner, net)?,
        loss,
        seed,
        ..base
    };
    let real = &train.inner;
    let (set, history) = py.detach(|| run_distillation(real, &cfg)).map_err(err)?;
    let rows = history
        .iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("step", r.step)?;
            d.set_item("loss", r.loss)?;
            d.set_item("lh", r.lh)?;
            d.set_item("tv", r.tv)?;
            d.set_item("clip", r.clip)?;
            d.set_item("grad_norm", r.grad_norm)?;
            Ok(d)
        })
        .collect::<PyResult<Vec<_>>>()?;
    Ok((SyntheticSet { inner: set }, rows))
}

/// `ipc` random real images per class.
#[pyfunction]
#[pyo3(signature = (train, ipc, seed=0))]
fn coreset_random(train: &Dataset, ipc: usize, seed: u64) -> PyResult<SyntheticSet> {
    Ok(SyntheticSet {
        inner: eval::coreset_random(&train.inner, ipc, seed).map_err(err)?,
    })
}

/// Trains fresh classifiers on `synthetic` and reports test accuracy:
/// `{"accuracies", "mean", "std"}`.
#[pyfunction]
#[pyo3(signature = (synthetic, test, seeds=5, epochs=100, lr=0.01, batch_size=256, net="auto", seed=0))]
#[allow(clippy::too_many_arguments)]
fn evaluate<'py>(
    py: Python<'py>,
    synthetic: &SyntheticSet,
    test: &Dataset,
    seeds: usize,
    epochs: usize,
    lr: f64,
    batch_size: usize,
    net: &str,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let base = EvalConfig::desk();
    let cfg = EvalConfig {
        seeds,
        epochs,
        lr,
        batch_size,
        classifier: auto_net(base.classifier.clone(), &test.inner, net)?,
        seed,
        ..base
    };
    let (set, test) = (&synthetic.inner, &test.inner);
    let rep = py.detach(|| eval::evaluate(set, test, &cfg)).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("accuracies", rep.accuracies)?;
    d.set_item("mean", rep.mean)?;
    d.set_item("std", rep.std)?;
    Ok(d)
}

#[pymodule]
fn bacon(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("BaconError", m.py().get_type::<BaconError>())?;
    m.add_class::<Dataset>()?;
    m.add_class::<SyntheticSet>()?;
    m.add_function(wrap_pyfunction!(load_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(loss_terms, m)?)?;
    m.add_function(wrap_pyfunction!(loss_dm, m)?)?;
    m.add_function(wrap_pyfunction!(risk_direct, m)?)?;
    m.add_function(wrap_pyfunction!(risk_theorem1, m)?)?;
    m.add_function(wrap_pyfunction!(jensen_gap, m)?)?;
    m.add_function(wrap_pyfunction!(distill, m)?)?;
    m.add_function(wrap_pyfunction!(coreset_random, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    Ok(())
}
