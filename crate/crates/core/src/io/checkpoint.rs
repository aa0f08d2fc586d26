//! Checkpoint directories: `params.gt1` (parameters, Adam moments and
//! normalisation statistics) next to a `checkpoint.json` sidecar.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::gt1;
use crate::model::{Model, ModelConfig, NormStats, ParamStore};
use crate::scalar::{Precision, Scalar};
use crate::tensor::Tensor;
use crate::training::{OptimizerState, TrainConfig, TrainState};

pub const PARAMS_FILE: &str = "params.gt1";
pub const SIDECAR_FILE: &str = "checkpoint.json";

const M_PREFIX: &str = "adam.m.";
const V_PREFIX: &str = "adam.v.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub model: ModelConfig,
    pub precision: Precision,
    /// Iterations completed.
    pub iteration: usize,
    pub adam_step: u64,
    pub seed: u64,
    /// Training configuration of the stage that produced this checkpoint.
    #[serde(default)]
    pub train: Option<TrainConfig>,
    /// Which stage produced it (`init`, `pretrain`, `finetune-ar`, `finetune-rar`).
    pub stage: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T: Scalar> {
    pub state: TrainState<T>,
    pub norm: NormStats,
    pub sidecar: Sidecar,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn new(state: TrainState<T>, norm: NormStats, seed: u64, train: Option<TrainConfig>, stage: &str) -> Self {
        let sidecar = Sidecar {
            model: state.model.config.clone(),
            precision: T::PRECISION,
            iteration: state.iter,
            adam_step: state.opt.step,
            seed,
            train,
            stage: stage.to_string(),
        };
        Self { state, norm, sidecar }
    }
}

pub fn save<T: Scalar>(dir: impl AsRef<Path>, ckpt: &Checkpoint<T>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mean = Tensor::<f64>::from_f64(vec![ckpt.norm.mean.len()], &ckpt.norm.mean)?;
    let std = Tensor::<f64>::from_f64(vec![ckpt.norm.std.len()], &ckpt.norm.std)?;
    let state = &ckpt.state;
    let mut archive = gt1::ArchiveWriter::new();
    for (n, t) in state.model.params.iter() {
        archive.push(n, t)?;
    }
    for (n, t) in state.opt.m.iter() {
        archive.push(&format!("{M_PREFIX}{n}"), t)?;
    }
    for (n, t) in state.opt.v.iter() {
        archive.push(&format!("{V_PREFIX}{n}"), t)?;
    }
    // Statistics stay at 64 bits whatever the run precision.
    archive.push("norm.mean", &mean)?;
    archive.push("norm.std", &std)?;
    let bytes = archive.finish();
    gt1::write_bytes(&dir.join(PARAMS_FILE), &bytes)?;
    let text = serde_json::to_string_pretty(&ckpt.sidecar)? + "\n";
    gt1::write_bytes(&dir.join(SIDECAR_FILE), text.as_bytes())
}

pub fn read_sidecar(dir: impl AsRef<Path>) -> Result<Sidecar> {
    let path = dir.as_ref().join(SIDECAR_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Loads a checkpoint, converting to `T` if it was stored at the other
/// precision. With `expected`, every tensor is checked against that
/// configuration's layout and the first disagreement is reported by name.
pub fn load<T: Scalar>(dir: impl AsRef<Path>, expected: Option<&ModelConfig>) -> Result<Checkpoint<T>> {
    let dir = dir.as_ref();
    let sidecar = read_sidecar(dir)?;
    let config = expected.unwrap_or(&sidecar.model).clone();
    config.validate()?;
    let entries: std::collections::HashMap<String, gt1::AnyTensor> =
        gt1::read_archive(dir.join(PARAMS_FILE))?.into_iter().collect();
    let fetch = |name: &str, shape: &[usize]| -> Result<Tensor<T>> {
        let t = entries.get(name).ok_or_else(|| Error::CheckpointMismatch {
            name: name.into(),
            detail: "missing from archive".into(),
        })?;
        if t.shape() != shape {
            return Err(Error::CheckpointMismatch {
                name: name.into(),
                detail: format!("stored shape {:?}, configuration expects {:?}", t.shape(), shape),
            });
        }
        Ok(t.to())
    };
    let layout = config.param_layout();
    let mut params = Vec::with_capacity(layout.len());
    let mut m = Vec::with_capacity(layout.len());
    let mut v = Vec::with_capacity(layout.len());
    for (name, shape) in &layout {
        params.push((name.clone(), fetch(name, shape)?));
        m.push((name.clone(), fetch(&format!("{M_PREFIX}{name}"), shape)?));
        v.push((name.clone(), fetch(&format!("{V_PREFIX}{name}"), shape)?));
    }
    let c = config.n_channels;
    let mean = fetch_f64(&entries, "norm.mean", c)?;
    let std = fetch_f64(&entries, "norm.std", c)?;
    let state = TrainState {
        model: Model {
            config: config.clone(),
            params: ParamStore::from_pairs(params)?,
        },
        opt: OptimizerState {
            m: ParamStore::from_pairs(m)?,
            v: ParamStore::from_pairs(v)?,
            step: sidecar.adam_step,
        },
        iter: sidecar.iteration,
    };
    Ok(Checkpoint {
        state,
        norm: NormStats { mean, std },
        sidecar,
    })
}

fn fetch_f64(entries: &std::collections::HashMap<String, gt1::AnyTensor>, name: &str, n: usize) -> Result<Vec<f64>> {
    let t = entries.get(name).ok_or_else(|| Error::CheckpointMismatch {
        name: name.into(),
        detail: "missing from archive".into(),
    })?;
    if t.shape() != [n] {
        return Err(Error::CheckpointMismatch {
            name: name.into(),
            detail: format!("shape {:?}, expected [{n}]", t.shape()),
        });
    }
    Ok(t.to::<f64>().into_data())
}
