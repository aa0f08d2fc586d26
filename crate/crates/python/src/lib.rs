//! Python bindings: tensors, the forecaster, training loops, masks and
//! verification metrics. Everything runs at 64-bit precision.

use std::path::PathBuf;

use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;

use searth::evaluation::{self, MetricKind};
use searth::geometry;
use searth::io::checkpoint::{self, Checkpoint};
use searth::io::synth::{generate, SynthConfig};
use searth::training::{self, Dataset, LrSchedule, TrainConfig, TrainState, UpdateCadence};
use searth::{MaskMode, ModelConfig, NormStats};

fn err(e: searth::Error) -> PyErr {
    let msg = format!("{}: {e}", e.code());
    if e.exit_code() == 4 {
        PyOSError::new_err(msg)
    } else {
        PyValueError::new_err(msg)
    }
}

fn parse<T: std::str::FromStr<Err = String>>(s: &str) -> PyResult<T> {
    s.parse().map_err(PyValueError::new_err)
}

/// Dense row-major float64 tensor.
#[pyclass(name = "Tensor", module = "searth", skip_from_py_object)]
#[derive(Clone)]
pub struct PyTensor {
    inner: searth::Tensor<f64>,
}

impl From<searth::Tensor<f64>> for PyTensor {
    fn from(inner: searth::Tensor<f64>) -> Self {
        Self { inner }
    }
}

#[pymethods]
impl PyTensor {
    #[new]
    fn new(shape: Vec<usize>, data: Vec<f64>) -> PyResult<Self> {
        searth::Tensor::new(shape, data).map(Self::from).map_err(err)
    }

    #[staticmethod]
    fn full(shape: Vec<usize>, value: f64) -> Self {
        searth::Tensor::full(shape, value).into()
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.inner.shape().to_vec()
    }

    /// Flat row-major values.
    fn tolist(&self) -> Vec<f64> {
        self.inner.data().to_vec()
    }

    fn get(&self, index: Vec<usize>) -> PyResult<f64> {
        let s = self.inner.shape();
        if index.len() != s.len() || index.iter().zip(s).any(|(i, n)| i >= n) {
            return Err(PyValueError::new_err(format!(
                "index {index:?} out of bounds for {s:?}"
            )));
        }
        Ok(self.inner.get(&index))
    }

    fn roll(&self, axis: usize, shift: isize) -> PyResult<Self> {
        self.inner.roll(axis, shift).map(Self::from).map_err(err)
    }

    fn max_abs_diff(&self, other: &PyTensor) -> PyResult<f64> {
        if self.inner.shape() != other.inner.shape() {
            return Err(PyValueError::new_err("shape mismatch"));
        }
        Ok(self.inner.max_abs_diff(&other.inner))
    }

    fn __len__(&self) -> usize {
        self.inner.numel()
    }

    fn __eq__(&self, other: &PyTensor) -> bool {
        self.inner == other.inner
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?})", self.inner.shape())
    }
}

fn tensors(list: &[PyRef<'_, PyTensor>]) -> Vec<searth::Tensor<f64>> {
    list.iter().map(|t| t.inner.clone()).collect()
}

/// Forecaster parameters together with optimizer state and iteration count.
#[pyclass(name = "Model", module = "searth")]
pub struct PyModel {
    state: TrainState<f64>,
}

#[pymethods]
impl PyModel {
    /// `preset` is "toy", "tiny" or "full"; `grid` and `channels` override
    /// its field size. `init` is "standard", "random" (every parameter at a
    /// sizeable scale) or "zeros".
    #[new]
    #[pyo3(signature = (preset = "toy", seed = 0, mask_mode = "earth", init = "standard", grid = None, channels = None, droppath = None))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        preset: &str,
        seed: u64,
        mask_mode: &str,
        init: &str,
        grid: Option<(usize, usize)>,
        channels: Option<usize>,
        droppath: Option<f64>,
    ) -> PyResult<Self> {
        let mut cfg = ModelConfig::preset(preset).map_err(err)?;
        cfg.mask_mode = parse(mask_mode)?;
        if let Some((h, w)) = grid {
            (cfg.n_lat, cfg.n_lon) = (h, w);
        }
        if let Some(c) = channels {
            cfg.n_channels = c;
        }
        if let Some(p) = droppath {
            cfg.droppath = p;
        }
        let model = match init {
            "standard" => searth::Model::init(cfg, seed),
            "random" => searth::Model::random(cfg, seed, 1.0),
            "zeros" => searth::Model::zeros(cfg),
            other => return Err(PyValueError::new_err(format!("unknown init `{other}`"))),
        }
        .map_err(err)?;
        Ok(Self {
            state: TrainState::new(model),
        })
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.state.model.param_count()
    }

    #[getter]
    fn iteration(&self) -> usize {
        self.state.iter
    }

    #[getter]
    fn mask_mode(&self) -> String {
        self.state.model.config.mask_mode.to_string()
    }

    /// Model configuration as JSON.
    fn config_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.state.model.config).map_err(|e| err(e.into()))
    }

    fn param_names(&self) -> Vec<String> {
        self.state.model.params.names().to_vec()
    }

    fn param(&self, name: &str) -> PyResult<PyTensor> {
        self.state
            .model
            .params
            .get(name)
            .map(|t| t.clone().into())
            .ok_or_else(|| PyValueError::new_err(format!("no parameter `{name}`")))
    }

    /// Autoregressive forecast of `steps` fields from two `[C, H, W]` states.
    fn rollout(&self, x_prev: &PyTensor, x_curr: &PyTensor, steps: usize) -> PyResult<Vec<PyTensor>> {
        let out = self
            .state
            .model
            .rollout(&x_prev.inner, &x_curr.inner, steps)
            .map_err(err)?;
        Ok(out.into_iter().map(PyTensor::from).collect())
    }

    /// One-step latitude-weighted MAE averaged over every window of `frames`.
    fn one_step_wmae(&self, frames: Vec<PyRef<'_, PyTensor>>) -> PyResult<f64> {
        let data = dataset(&self.state.model.config, tensors(&frames))?;
        training::one_step_wmae(&self.state.model, &data).map_err(err)
    }

    fn save(&self, dir: PathBuf, seed: u64) -> PyResult<()> {
        let norm = NormStats::identity(self.state.model.config.n_channels);
        checkpoint::save(dir, &Checkpoint::new(self.state.clone(), norm, seed, None, "python")).map_err(err)
    }

    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        let ckpt = checkpoint::load::<f64>(dir, None).map_err(err)?;
        Ok(Self { state: ckpt.state })
    }

    fn __repr__(&self) -> String {
        let c = &self.state.model.config;
        format!(
            "Model({}x{}x{}, {} params, {})",
            c.n_channels,
            c.n_lat,
            c.n_lon,
            self.param_count(),
            c.mask_mode
        )
    }
}

fn dataset(cfg: &ModelConfig, frames: Vec<searth::Tensor<f64>>) -> PyResult<Dataset<f64>> {
    let weights = searth::LatLonGrid::cell_centered(cfg.n_lat, cfg.n_lon)
        .map_err(err)?
        .weights();
    Dataset::new(frames, weights).map_err(err)
}

fn train_config(
    iters: usize,
    batch: usize,
    lr: f64,
    lr_final: Option<f64>,
    weight_decay: f64,
    seed: u64,
) -> TrainConfig {
    TrainConfig {
        batch_size: batch,
        iters,
        lr_initial: lr,
        lr_final: lr_final.unwrap_or(lr),
        schedule: if lr_final.is_some() {
            LrSchedule::Cosine
        } else {
            LrSchedule::Constant
        },
        weight_decay,
        seed,
        ..TrainConfig::pretrain_default()
    }
}

/// One-step pretraining, continuing from the model's iteration count up to
/// `iters`. Returns the losses of the iterations run.
#[pyfunction]
#[pyo3(signature = (model, frames, iters, batch = 1, lr = 1e-3, lr_final = Some(1e-5), weight_decay = 0.01, seed = 0))]
#[allow(clippy::too_many_arguments)]
fn pretrain(
    model: &mut PyModel,
    frames: Vec<PyRef<'_, PyTensor>>,
    iters: usize,
    batch: usize,
    lr: f64,
    lr_final: Option<f64>,
    weight_decay: f64,
    seed: u64,
) -> PyResult<Vec<f64>> {
    let data = dataset(&model.state.model.config, tensors(&frames))?;
    let tc = train_config(iters, batch, lr, lr_final, weight_decay, seed);
    let out = training::pretrain(&mut model.state, &data, &tc).map_err(err)?;
    Ok(out.log.iter().map(|r| r.loss).collect())
}

/// Full-horizon autoregressive fine-tuning over `steps` steps, starting a
/// fresh optimizer from the current parameters. Returns
/// `(losses, peak_live_nodes)`.
#[pyfunction]
#[pyo3(signature = (model, frames, steps, iters, batch = 1, lr = 1e-5, weight_decay = 0.0, seed = 0))]
#[allow(clippy::too_many_arguments)]
fn finetune_ar(
    model: &mut PyModel,
    frames: Vec<PyRef<'_, PyTensor>>,
    steps: usize,
    iters: usize,
    batch: usize,
    lr: f64,
    weight_decay: f64,
    seed: u64,
) -> PyResult<(Vec<f64>, usize)> {
    let data = dataset(&model.state.model.config, tensors(&frames))?;
    let tc = train_config(iters, batch, lr, None, weight_decay, seed);
    model.state = TrainState::new(model.state.model.clone());
    let out = training::finetune_ar(&mut model.state, &data, steps, &tc).map_err(err)?;
    Ok((out.log.iter().map(|r| r.loss).collect(), out.peak_live_nodes))
}

/// Relay fine-tuning: `stages` sub-stages of `k` steps, each fed detached
/// outputs of the previous one, with a fresh optimizer. Returns
/// `(losses, peak_live_nodes)`.
#[pyfunction]
#[pyo3(signature = (model, frames, k, stages, iters, batch = 1, lr = 1e-5, weight_decay = 0.0, seed = 0, cadence = "per-stage"))]
#[allow(clippy::too_many_arguments)]
fn finetune_rar(
    model: &mut PyModel,
    frames: Vec<PyRef<'_, PyTensor>>,
    k: usize,
    stages: usize,
    iters: usize,
    batch: usize,
    lr: f64,
    weight_decay: f64,
    seed: u64,
    cadence: &str,
) -> PyResult<(Vec<f64>, usize)> {
    let cadence = match cadence {
        "per-stage" => UpdateCadence::PerStage,
        "per-sequence" => UpdateCadence::PerSequence,
        other => return Err(PyValueError::new_err(format!("unknown cadence `{other}`"))),
    };
    let data = dataset(&model.state.model.config, tensors(&frames))?;
    let tc = train_config(iters, batch, lr, None, weight_decay, seed);
    model.state = TrainState::new(model.state.model.clone());
    let out = training::finetune_rar(&mut model.state, &data, k, stages, cadence, &tc, None).map_err(err)?;
    Ok((out.log.iter().map(|r| r.loss).collect(), out.peak_live_nodes))
}

/// Synthetic zonally advected fields `[C, H, W]`, normalised per channel
/// unless `normalize` is false.
#[pyfunction]
#[pyo3(signature = (n_lat, n_lon, channels, steps, seed = 0, waves = 3, normalize = true))]
fn synthetic_frames(
    n_lat: usize,
    n_lon: usize,
    channels: usize,
    steps: usize,
    seed: u64,
    waves: usize,
    normalize: bool,
) -> PyResult<Vec<PyTensor>> {
    let raw = generate(&SynthConfig::random(n_lat, n_lon, channels, steps, waves, seed)).map_err(err)?;
    if !normalize {
        return Ok(raw.into_iter().map(PyTensor::from).collect());
    }
    let stats = NormStats::from_fields(&raw).map_err(err)?;
    Ok(raw.iter().map(|f| stats.normalize(f).into()).collect())
}

/// Blocked `(window, query, key)` triples of the shifted-window mask.
#[pyfunction]
#[pyo3(signature = (h, w, win, shift, mode = "earth"))]
fn attention_mask(h: usize, w: usize, win: usize, shift: usize, mode: &str) -> PyResult<Vec<(usize, usize, usize)>> {
    let mode: MaskMode = parse(mode)?;
    let m = geometry::earth_attention_mask(h, w, win, win, shift, shift, mode).map_err(err)?;
    Ok(m.blocked_set().into_iter().collect())
}

#[pyfunction]
fn latitude_weights(latitudes: Vec<f64>) -> PyResult<Vec<f64>> {
    geometry::latitude_weights(&latitudes).map_err(err)
}

/// 721×1440 → 180×360 block mean over the trailing axes.
#[pyfunction]
fn regrid(field: &PyTensor) -> PyResult<PyTensor> {
    geometry::regrid_quarter_to_one(&field.inner)
        .map(PyTensor::from)
        .map_err(err)
}

fn cell_weights(truths: &[searth::Tensor<f64>]) -> PyResult<Vec<f64>> {
    let s = truths
        .first()
        .ok_or_else(|| PyValueError::new_err("no fields"))?
        .shape();
    if s.len() != 3 {
        return Err(PyValueError::new_err(format!("expected [C, H, W] fields, got {s:?}")));
    }
    Ok(searth::LatLonGrid::cell_centered(s[1], s[2]).map_err(err)?.weights())
}

/// Latitude-weighted RMSE of channel `c` on a cell-centred grid.
#[pyfunction]
fn rmse(forecasts: Vec<PyRef<'_, PyTensor>>, truths: Vec<PyRef<'_, PyTensor>>, c: usize) -> PyResult<f64> {
    let (f, y) = (tensors(&forecasts), tensors(&truths));
    evaluation::rmse(&f, &y, &cell_weights(&y)?, c).map_err(err)
}

/// Anomaly correlation of channel `c` against the climatology `clim_fields`.
#[pyfunction]
fn acc(
    forecasts: Vec<PyRef<'_, PyTensor>>,
    truths: Vec<PyRef<'_, PyTensor>>,
    clim_fields: Vec<PyRef<'_, PyTensor>>,
    c: usize,
) -> PyResult<f64> {
    let (f, y) = (tensors(&forecasts), tensors(&truths));
    let clim = evaluation::compute_climatology(&tensors(&clim_fields), "python").map_err(err)?;
    Ok(evaluation::acc(&f, &y, &clim, &cell_weights(&y)?, c)
        .map_err(err)?
        .value)
}

/// `kind` is "rmse" or "acc".
#[pyfunction]
fn normalized_diff(a: f64, b: f64, kind: &str) -> PyResult<f64> {
    let kind = match kind {
        "rmse" => MetricKind::Rmse,
        "acc" => MetricKind::Acc,
        other => return Err(PyValueError::new_err(format!("unknown metric `{other}`"))),
    };
    evaluation::normalized_diff(a, b, kind).map_err(err)
}

/// First crossing of `threshold` by `(lead, value)` pairs; `(lead, censored)`.
#[pyfunction]
fn skillful_lead_time(series: Vec<(f64, f64)>, threshold: f64) -> PyResult<(f64, bool)> {
    let t = evaluation::skillful_lead_time(&series, threshold).map_err(err)?;
    Ok((t.value, t.censored))
}

/// Maximum relative finite-difference error of every differentiable primitive.
#[pyfunction]
#[pyo3(signature = (seed = 0))]
fn gradcheck_primitives(seed: u64) -> PyResult<Vec<(String, f64)>> {
    searth::gradcheck::primitive_suite(seed).map_err(err)
}

#[pymodule]
#[pyo3(name = "searth")]
pub fn searth_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<PyTensor>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(pretrain, m)?)?;
    m.add_function(wrap_pyfunction!(finetune_ar, m)?)?;
    m.add_function(wrap_pyfunction!(finetune_rar, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic_frames, m)?)?;
    m.add_function(wrap_pyfunction!(attention_mask, m)?)?;
    m.add_function(wrap_pyfunction!(latitude_weights, m)?)?;
    m.add_function(wrap_pyfunction!(regrid, m)?)?;
    m.add_function(wrap_pyfunction!(rmse, m)?)?;
    m.add_function(wrap_pyfunction!(acc, m)?)?;
    m.add_function(wrap_pyfunction!(normalized_diff, m)?)?;
    m.add_function(wrap_pyfunction!(skillful_lead_time, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck_primitives, m)?)?;
    Ok(())
}
