//! Python bindings: models, datasets, training and evaluation.

use std::path::PathBuf;

use danhar::attention::AttentionKind;
use danhar::checkpoint::{load_checkpoint, save_checkpoint_with, Precision};
use danhar::data::{
    decimate, load_archive, load_csv, normalize, save_archive, split, synth_generate, window_all, CsvSchema,
    EmbedMode, LabelPolicy, Provenance, SplitPolicy, SynthConfig, WindowedDataset,
};
use danhar::train::{evaluate_with_threads, predict_logits, train as train_model, Metrics, TrainConfig};
use danhar::{AttentionConfig, AttentionTrace, AttentionVariant, Backbone, Error, Model, ModelConfig, Tensor};
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;

create_exception!(danhar, DanharError, PyException, "Raised for every library failure; message starts with [category].");

fn to_py(e: Error) -> PyErr {
    DanharError::new_err(format!("[{}] {e}", e.category()))
}

fn parse_enum<T: serde::de::DeserializeOwned>(what: &str, value: &str) -> PyResult<T> {
    serde_json::from_value(serde_json::Value::String(value.into()))
        .map_err(|_| to_py(Error::Config(format!("unknown {what} '{value}'"))))
}

fn enum_name<T: serde::Serialize>(value: &T) -> String {
    serde_json::to_value(value)
        .ok()
        .and_then(|v| v.as_str().map(String::from))
        .unwrap_or_default()
}

/// `N × H × W` nested lists to an `N×1×H×W` tensor.
fn windows_tensor(windows: &[Vec<Vec<f64>>]) -> Result<Tensor, Error> {
    let n = windows.len();
    let h = windows.first().map_or(0, Vec::len);
    let w = windows.first().and_then(|x| x.first()).map_or(0, Vec::len);
    let mut data = Vec::with_capacity(n * h * w);
    for (i, win) in windows.iter().enumerate() {
        if win.len() != h || win.iter().any(|row| row.len() != w) {
            return Err(Error::Config(format!("window {i} is ragged; every window must be {h}×{w}")));
        }
        data.extend(win.iter().flatten());
    }
    Tensor::new([n, 1, h, w], data)
}

fn unflatten(values: &[f64], h: usize, w: usize) -> Vec<Vec<f64>> {
    (0..h).map(|r| values[r * w..(r + 1) * w].to_vec()).collect()
}

/// Convolutional activity classifier with optional channel and temporal attention.
#[pyclass(name = "Model", module = "danhar", skip_from_py_object)]
#[derive(Clone)]
struct PyModel {
    inner: Model,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (
        sensor_axes = 3,
        window_length = 200,
        num_classes = 6,
        backbone = "residual",
        attention = "channel_then_temporal",
        channel_plan = None,
        conv_kernel = 6,
        pool = 2,
        reduction = 16,
        temporal_kernel = 7,
        seed = 0,
    ))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        sensor_axes: usize,
        window_length: usize,
        num_classes: usize,
        backbone: &str,
        attention: &str,
        channel_plan: Option<Vec<usize>>,
        conv_kernel: usize,
        pool: usize,
        reduction: usize,
        temporal_kernel: usize,
        seed: u64,
    ) -> PyResult<Self> {
        let defaults = ModelConfig::default();
        let config = ModelConfig {
            backbone: parse_enum::<Backbone>("backbone", backbone)?,
            channel_plan: channel_plan.unwrap_or(defaults.channel_plan),
            conv_kernel,
            pool,
            num_classes,
            sensor_axes,
            window_length,
            attention: AttentionConfig {
                variant: attention.parse().map_err(to_py)?,
                reduction,
                temporal_kernel,
            },
            seed,
        };
        Ok(Self {
            inner: Model::build(config).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: load_checkpoint(&path).map_err(to_py)?,
        })
    }

    /// Writes a checkpoint; `f32=True` stores parameters in single precision.
    #[pyo3(signature = (path, f32 = false))]
    fn save(&self, path: PathBuf, f32: bool) -> PyResult<()> {
        let precision = if f32 { Precision::F32 } else { Precision::F64 };
        save_checkpoint_with(&self.inner, &path, precision).map_err(to_py)
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    #[getter]
    fn attention_param_count(&self) -> usize {
        self.inner.attention_param_count()
    }

    #[getter]
    fn backbone(&self) -> String {
        enum_name(&self.inner.config().backbone)
    }

    #[getter]
    fn attention(&self) -> String {
        self.inner.config().attention.variant.to_string()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.config().num_classes
    }

    #[getter]
    fn sensor_axes(&self) -> usize {
        self.inner.config().sensor_axes
    }

    #[getter]
    fn window_length(&self) -> usize {
        self.inner.config().window_length
    }

    #[getter]
    fn channel_plan(&self) -> Vec<usize> {
        self.inner.config().channel_plan.clone()
    }

    /// Names of every stored tensor, parameters first, then running statistics.
    fn state_names(&self) -> Vec<String> {
        self.inner.state().into_iter().map(|(n, _)| n).collect()
    }

    /// `(shape, flat values)` of one stored tensor.
    fn tensor(&self, name: &str) -> PyResult<(Vec<usize>, Vec<f64>)> {
        self.inner
            .state()
            .into_iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| (t.shape().to_vec(), t.into_data()))
            .ok_or_else(|| to_py(Error::Manifest(format!("no tensor named '{name}'"))))
    }

    /// Class logits for `N × axes × length` windows, in inference mode.
    fn predict(&self, windows: Vec<Vec<Vec<f64>>>) -> PyResult<Vec<Vec<f64>>> {
        let x = windows_tensor(&windows).map_err(to_py)?;
        let logits = self.inner.predict(&x, None).map_err(to_py)?;
        let k = logits.shape()[1];
        Ok(logits.data().chunks(k).map(<[f64]>::to_vec).collect())
    }

    /// Attention weights for one `axes × length` window, one dict per gate.
    fn attention_weights(&self, py: Python<'_>, window: Vec<Vec<f64>>) -> PyResult<Vec<Py<PyAny>>> {
        let x = windows_tensor(&[window]).map_err(to_py)?;
        let mut trace = AttentionTrace::new();
        self.inner.predict(&x, Some(&mut trace)).map_err(to_py)?;
        let mut out = Vec::new();
        for rec in &trace.records {
            let d = pyo3::types::PyDict::new(py);
            d.set_item("layer", rec.layer)?;
            match rec.kind {
                AttentionKind::Channel => {
                    d.set_item("kind", "channel")?;
                    d.set_item("weights", rec.weights.data().to_vec())?;
                }
                AttentionKind::Temporal => {
                    let (h, w) = (rec.weights.shape()[2], rec.weights.shape()[3]);
                    d.set_item("kind", "temporal")?;
                    d.set_item("weights", unflatten(rec.weights.data(), h, w))?;
                }
            }
            out.push(d.into_any().unbind());
        }
        Ok(out)
    }

    fn __repr__(&self) -> String {
        let c = self.inner.config();
        format!(
            "Model(backbone='{}', attention='{}', channel_plan={:?}, input={}x{}, classes={}, params={})",
            enum_name(&c.backbone),
            c.attention.variant,
            c.channel_plan,
            c.sensor_axes,
            c.window_length,
            c.num_classes,
            self.inner.param_count()
        )
    }
}

/// Fixed-size labeled windows, `axes × width` each.
#[pyclass(name = "Dataset", module = "danhar", skip_from_py_object)]
#[derive(Clone)]
struct PyDataset {
    inner: WindowedDataset,
}

fn wrap(inner: WindowedDataset) -> PyDataset {
    PyDataset { inner }
}

#[pymethods]
impl PyDataset {
    /// Labeled sinusoid benchmark; `mode="segment"` confines the class signal to a short burst.
    #[staticmethod]
    #[pyo3(signature = (num_classes = 4, per_class = 250, axes = 3, width = 64, mode = "full", noise = 0.3, seed = 0))]
    fn synthetic(
        num_classes: usize,
        per_class: usize,
        axes: usize,
        width: usize,
        mode: &str,
        noise: f64,
        seed: u64,
    ) -> PyResult<Self> {
        let config = SynthConfig {
            seed,
            num_classes,
            per_class,
            axes,
            width,
            mode: parse_enum::<EmbedMode>("mode", mode)?,
            noise,
        };
        synth_generate(&config).map(wrap).map_err(to_py)
    }

    /// Windows a `subject,label,timestamp,<channels>` CSV file.
    #[staticmethod]
    #[pyo3(signature = (path, width, step, label_policy = "majority", decimate_by = 1))]
    fn from_csv(path: PathBuf, width: usize, step: usize, label_policy: &str, decimate_by: usize) -> PyResult<Self> {
        let policy = parse_enum::<LabelPolicy>("label policy", label_policy)?;
        let csv = load_csv(&path, &CsvSchema::default()).map_err(to_py)?;
        let series = if decimate_by > 1 {
            csv.series
                .iter()
                .map(|s| decimate(s, decimate_by))
                .collect::<Result<Vec<_>, _>>()
                .map_err(to_py)?
        } else {
            csv.series
        };
        window_all(&series, width, step, policy, &csv.class_names).map(wrap).map_err(to_py)
    }

    /// Builds a dataset from `N × axes × width` nested lists.
    #[staticmethod]
    #[pyo3(signature = (windows, labels, class_names = None))]
    fn from_windows(windows: Vec<Vec<Vec<f64>>>, labels: Vec<usize>, class_names: Option<Vec<String>>) -> PyResult<Self> {
        let x = windows_tensor(&windows).map_err(to_py)?;
        let (axes, width) = (x.shape()[2], x.shape()[3]);
        let k = labels.iter().max().map_or(0, |m| m + 1);
        let names = class_names.unwrap_or_else(|| (0..k).map(|i| format!("class{i}")).collect());
        let mut d = WindowedDataset::empty(axes, width, names);
        d.provenance = (0..labels.len())
            .map(|i| Provenance {
                subject: "python".into(),
                source: "memory".into(),
                offset: i,
            })
            .collect();
        d.windows = x.into_data();
        d.labels = labels;
        d.validate().map_err(to_py)?;
        Ok(wrap(d))
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        load_archive(&path).map(wrap).map_err(to_py)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_archive(&self.inner, &path).map_err(to_py)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn axes(&self) -> usize {
        self.inner.axes
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    #[getter]
    fn class_names(&self) -> Vec<String> {
        self.inner.class_names.clone()
    }

    #[getter]
    fn labels(&self) -> Vec<usize> {
        self.inner.labels.clone()
    }

    #[getter]
    fn subjects(&self) -> Vec<String> {
        self.inner.provenance.iter().map(|p| p.subject.clone()).collect()
    }

    fn class_histogram(&self) -> Vec<usize> {
        self.inner.class_histogram()
    }

    fn window(&self, index: usize) -> PyResult<Vec<Vec<f64>>> {
        if index >= self.inner.len() {
            return Err(to_py(Error::IndexOutOfRange {
                index,
                len: self.inner.len(),
            }));
        }
        Ok(unflatten(self.inner.window(index), self.inner.axes, self.inner.width))
    }

    /// Seeded random split; `fraction` of the windows go to the first set.
    #[pyo3(signature = (fraction = 0.7, seed = 0))]
    fn split_random(&self, fraction: f64, seed: u64) -> PyResult<(Self, Self)> {
        let (a, b) = split(&self.inner, &SplitPolicy::Random { fraction, seed }).map_err(to_py)?;
        Ok((wrap(a), wrap(b)))
    }

    /// Leave-subjects-out split; the named subjects form the second set.
    fn split_by_subject(&self, test_subjects: Vec<String>) -> PyResult<(Self, Self)> {
        let (a, b) = split(&self.inner, &SplitPolicy::BySubject { test_subjects }).map_err(to_py)?;
        Ok((wrap(a), wrap(b)))
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset(windows={}, axes={}, width={}, classes={})",
            self.inner.len(),
            self.inner.axes,
            self.inner.width,
            self.inner.num_classes()
        )
    }
}

/// Standardizes both sets with per-axis statistics fitted on `train`.
/// Returns `(train, test, mean, std)`.
#[pyfunction]
fn normalize_pair(train: &PyDataset, test: &PyDataset) -> PyResult<(PyDataset, PyDataset, Vec<f64>, Vec<f64>)> {
    let (a, b, stats) = normalize(&train.inner, &test.inner).map_err(to_py)?;
    Ok((wrap(a), wrap(b), stats.mean, stats.std))
}

#[pyclass(name = "Metrics", module = "danhar", get_all, skip_from_py_object)]
#[derive(Clone)]
struct PyMetrics {
    accuracy: f64,
    loss: f64,
    precision: Vec<f64>,
    recall: Vec<f64>,
    confusion: Vec<Vec<usize>>,
}

impl From<Metrics> for PyMetrics {
    fn from(m: Metrics) -> Self {
        Self {
            accuracy: m.accuracy,
            loss: m.loss,
            precision: m.precision,
            recall: m.recall,
            confusion: m.confusion,
        }
    }
}

#[pymethods]
impl PyMetrics {
    fn __repr__(&self) -> String {
        format!("Metrics(accuracy={:.4}, loss={:.4})", self.accuracy, self.loss)
    }
}

#[pyclass(name = "TrainResult", module = "danhar", get_all)]
struct PyTrainResult {
    final_model: PyModel,
    best_model: PyModel,
    best_epoch: usize,
    /// `(epoch, lr, train_loss, val_loss, val_acc)` per epoch.
    history: Vec<(usize, f64, f64, f64, f64)>,
}

/// Adam with step decay; returns the final weights and the weights of the
/// epoch with the highest validation accuracy.
#[pyfunction]
#[pyo3(signature = (
    model, train, val, epochs = 50, batch_size = 32, base_lr = 1e-3,
    decay_factor = 0.1, decay_interval = 50, seed = 0, shuffle = true, threads = 1,
))]
#[allow(clippy::too_many_arguments)]
fn train(
    model: &PyModel,
    train: &PyDataset,
    val: &PyDataset,
    epochs: usize,
    batch_size: usize,
    base_lr: f64,
    decay_factor: f64,
    decay_interval: usize,
    seed: u64,
    shuffle: bool,
    threads: usize,
) -> PyResult<PyTrainResult> {
    let config = TrainConfig {
        epochs,
        batch_size,
        base_lr,
        decay_factor,
        decay_interval,
        seed,
        shuffle,
        threads,
    };
    let out = train_model(model.inner.clone(), &train.inner, &val.inner, &config).map_err(to_py)?;
    Ok(PyTrainResult {
        final_model: PyModel { inner: out.final_model },
        best_model: PyModel { inner: out.best_model },
        best_epoch: out.best_epoch,
        history: out
            .history
            .iter()
            .map(|r| (r.epoch, r.lr, r.train_loss, r.val_loss, r.val_acc))
            .collect(),
    })
}

#[pyfunction]
#[pyo3(signature = (model, dataset, threads = 1))]
fn evaluate(model: &PyModel, dataset: &PyDataset, threads: usize) -> PyResult<PyMetrics> {
    evaluate_with_threads(&model.inner, &dataset.inner, threads)
        .map(PyMetrics::from)
        .map_err(to_py)
}

/// Logits for every window of a dataset.
#[pyfunction]
#[pyo3(signature = (model, dataset, threads = 1))]
fn logits(model: &PyModel, dataset: &PyDataset, threads: usize) -> PyResult<Vec<Vec<f64>>> {
    predict_logits(&model.inner, &dataset.inner, threads).map_err(to_py)
}

/// Number of windows a sliding window yields over `length` samples.
#[pyfunction]
fn window_count(length: usize, width: usize, step: usize) -> PyResult<usize> {
    if width == 0 || step == 0 {
        return Err(to_py(Error::Config("width and step must be positive".into())));
    }
    Ok(if width > length { 0 } else { (length - width) / step + 1 })
}

#[pymodule]
#[pyo3(name = "danhar")]
fn danhar_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyMetrics>()?;
    m.add_class::<PyTrainResult>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(logits, m)?)?;
    m.add_function(wrap_pyfunction!(normalize_pair, m)?)?;
    m.add_function(wrap_pyfunction!(window_count, m)?)?;
    m.add("DanharError", m.py().get_type::<DanharError>())?;
    m.add(
        "ATTENTION_VARIANTS",
        AttentionVariant::ALL.iter().map(ToString::to_string).collect::<Vec<_>>(),
    )?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
