//! Encoder–core–decoder forecaster.
//!
//! ```text
//! (X_{t-1}, X_t) ─ embed ─ encoder ─┬─ merge ─ core ─ expand ─(+)─ decoder ─ unembed ─ ΔX
//!                                   └───────────── skip ───────┘
//! X̂_{t+1} = X_t + ΔX
//! ```
//!
//! Inputs and outputs are `[C, H, W]`; latents are channel-last.

use std::collections::HashMap;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::attention::{block_pair_param_shapes, searth_block_pair, BlockPairParams, StageGeometry};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::geometry::MaskMode;
use crate::rng::{StreamRng, Streams};
use crate::scalar::{Precision, Scalar};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageHeads {
    pub encoder: usize,
    pub core: usize,
    pub decoder: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_channels: usize,
    pub n_lat: usize,
    pub n_lon: usize,
    pub embed_dim: usize,
    /// `(win_h, win_w)`, shared by every stage.
    pub window: (usize, usize),
    /// Shifted-window offset; `⌊win/2⌋` per axis when absent.
    #[serde(default)]
    pub shift: Option<(usize, usize)>,
    pub heads: StageHeads,
    /// Individual blocks per stage; each pair forms one Searth block pair.
    pub encoder_blocks: usize,
    pub core_blocks: usize,
    pub decoder_blocks: usize,
    /// Stochastic-depth rate of the deepest pair.
    pub droppath: f64,
    pub mask_mode: MaskMode,
    pub precision: Precision,
    /// Channels after the transposed convolution; `embed_dim / 2` when absent.
    #[serde(default)]
    pub unembed_dim: Option<usize>,
}

impl ModelConfig {
    /// Desk-scale preset used by tests and the CLI default.
    pub fn toy() -> Self {
        Self {
            n_channels: 4,
            n_lat: 16,
            n_lon: 32,
            embed_dim: 32,
            window: (2, 2),
            shift: None,
            heads: StageHeads {
                encoder: 2,
                core: 4,
                decoder: 2,
            },
            encoder_blocks: 2,
            core_blocks: 4,
            decoder_blocks: 2,
            droppath: 0.0,
            mask_mode: MaskMode::Earth,
            precision: Precision::F64,
            unembed_dim: None,
        }
    }

    /// Full-size configuration: 69 variables on the 1° grid.
    pub fn full() -> Self {
        Self {
            n_channels: 69,
            n_lat: 180,
            n_lon: 360,
            embed_dim: 768,
            window: (5, 5),
            shift: None,
            heads: StageHeads {
                encoder: 8,
                core: 16,
                decoder: 8,
            },
            encoder_blocks: 6,
            core_blocks: 20,
            decoder_blocks: 6,
            droppath: 0.2,
            mask_mode: MaskMode::Earth,
            precision: Precision::F32,
            unembed_dim: None,
        }
    }

    /// Smallest valid network, for exhaustive gradient checks.
    pub fn tiny() -> Self {
        Self {
            n_channels: 2,
            n_lat: 8,
            n_lon: 8,
            embed_dim: 4,
            window: (2, 2),
            shift: None,
            heads: StageHeads {
                encoder: 1,
                core: 2,
                decoder: 1,
            },
            encoder_blocks: 2,
            core_blocks: 2,
            decoder_blocks: 2,
            droppath: 0.0,
            mask_mode: MaskMode::Earth,
            precision: Precision::F64,
            unembed_dim: None,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "toy" => Ok(Self::toy()),
            "full" => Ok(Self::full()),
            "tiny" => Ok(Self::tiny()),
            other => Err(Error::config(format!(
                "unknown preset `{other}` (expected toy, full or tiny)"
            ))),
        }
    }

    pub fn shift(&self) -> (usize, usize) {
        self.shift.unwrap_or((self.window.0 / 2, self.window.1 / 2))
    }

    pub fn unembed_dim(&self) -> usize {
        self.unembed_dim.unwrap_or(self.embed_dim / 2)
    }

    pub fn pairs(&self) -> (usize, usize, usize) {
        (self.encoder_blocks / 2, self.core_blocks / 2, self.decoder_blocks / 2)
    }

    pub fn validate(&self) -> Result<()> {
        let (wh, ww) = self.window;
        let (sh, sw) = self.shift();
        let d = self.embed_dim;
        let bad = |m: String| Err(Error::config(m));
        if self.n_channels == 0 || d == 0 || self.unembed_dim() == 0 {
            return bad("channel counts must be positive".into());
        }
        if wh == 0 || ww == 0 || sh >= wh || sw >= ww {
            return bad(format!("window {wh}×{ww} with shift {sh}×{sw} is invalid"));
        }
        if self.n_lat % 4 != 0 || self.n_lon % 4 != 0 {
            return bad(format!("grid {}×{} must be divisible by 4", self.n_lat, self.n_lon));
        }
        for (h, w) in [(self.n_lat / 2, self.n_lon / 2), (self.n_lat / 4, self.n_lon / 4)] {
            if h % wh != 0 || w % ww != 0 {
                return bad(format!("latent {h}×{w} not divisible by window {wh}×{ww}"));
            }
        }
        for (name, n) in [
            ("encoder_blocks", self.encoder_blocks),
            ("core_blocks", self.core_blocks),
            ("decoder_blocks", self.decoder_blocks),
        ] {
            if n % 2 != 0 {
                return bad(format!("{name} = {n} must be even"));
            }
        }
        for (name, heads, dim) in [
            ("encoder", self.heads.encoder, d),
            ("core", self.heads.core, 2 * d),
            ("decoder", self.heads.decoder, d),
        ] {
            if heads == 0 || dim % heads != 0 {
                return bad(format!("{name} heads {heads} do not divide width {dim}"));
            }
        }
        if !(0.0..1.0).contains(&self.droppath) {
            return bad(format!("droppath {} outside [0, 1)", self.droppath));
        }
        Ok(())
    }

    /// Stochastic-depth rate of every pair in execution order, rising
    /// linearly from 0 to `droppath`.
    pub fn drop_rates(&self) -> Vec<f64> {
        let (e, c, d) = self.pairs();
        let n = e + c + d;
        (0..n)
            .map(|i| {
                if n > 1 {
                    self.droppath * i as f64 / (n - 1) as f64
                } else {
                    self.droppath
                }
            })
            .collect()
    }

    /// Ordered parameter names and shapes.
    pub fn param_layout(&self) -> Vec<(String, Vec<usize>)> {
        let (c, d, du) = (self.n_channels, self.embed_dim, self.unembed_dim());
        let (wh, ww) = self.window;
        let (e, k, dec) = self.pairs();
        let mut out = vec![
            ("embed.weight".to_string(), vec![d, c, 2, 2, 2]),
            ("embed.bias".to_string(), vec![d]),
        ];
        for i in 0..e {
            out.extend(block_pair_param_shapes(
                &format!("encoder.{i}"),
                d,
                self.heads.encoder,
                wh,
                ww,
            ));
        }
        out.push(("merge.weight".into(), vec![4 * d, 2 * d]));
        out.push(("merge.bias".into(), vec![2 * d]));
        for i in 0..k {
            out.extend(block_pair_param_shapes(
                &format!("core.{i}"),
                2 * d,
                self.heads.core,
                wh,
                ww,
            ));
        }
        out.push(("expand.weight".into(), vec![2 * d, 4 * d]));
        out.push(("expand.bias".into(), vec![4 * d]));
        for i in 0..dec {
            out.extend(block_pair_param_shapes(
                &format!("decoder.{i}"),
                d,
                self.heads.decoder,
                wh,
                ww,
            ));
        }
        out.push(("unembed.deconv.weight".into(), vec![d, du, 2, 2]));
        out.push(("unembed.deconv.bias".into(), vec![du]));
        out.push(("unembed.fc.weight".into(), vec![du, c]));
        out.push(("unembed.fc.bias".into(), vec![c]));
        out
    }

    /// Computed from shapes alone; nothing is allocated.
    pub fn param_count(&self) -> usize {
        self.param_layout()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }

    /// `[C, H, W]` extents after embed, in the core, and at the output.
    pub fn stage_shapes(&self) -> StageShapes {
        let (h, w, d) = (self.n_lat, self.n_lon, self.embed_dim);
        StageShapes {
            embed: [d, h / 2, w / 2],
            core: [2 * d, h / 4, w / 4],
            output: [self.n_channels, h, w],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageShapes {
    pub embed: [usize; 3],
    pub core: [usize; 3],
    pub output: [usize; 3],
}

fn fan_in(shape: &[usize]) -> usize {
    if shape.len() == 2 {
        shape[0]
    } else {
        shape[1..].iter().product()
    }
}

/// Standard deviation of a parameter's initial draw; `None` for
/// deterministic ones (gains 1, biases 0).
fn init_std(name: &str, shape: &[usize]) -> Option<f64> {
    if name.ends_with("rel_bias") {
        Some(0.02)
    } else if name.ends_with(".gain") || name.ends_with(".bias") {
        None
    } else if name == "unembed.fc.weight" {
        // Start close to persistence.
        Some(0.1 / (fan_in(shape) as f64).sqrt())
    } else {
        Some(1.0 / (fan_in(shape) as f64).sqrt())
    }
}

/// Named parameter tensors in layout order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T: Scalar> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn from_pairs(pairs: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let mut store = Self {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        };
        for (name, t) in pairs {
            if store.index.insert(name.clone(), store.names.len()).is_some() {
                return Err(Error::invalid(format!("duplicate parameter name `{name}`")));
            }
            store.names.push(name);
            store.tensors.push(t);
        }
        Ok(store)
    }

    /// Every tensor zero, same names and shapes.
    pub fn zeros_like(&self) -> Self {
        Self {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect(),
            index: self.index.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter_mut())
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// All values concatenated in layout order.
    pub fn flatten(&self) -> Vec<T> {
        self.tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    /// Overwrites values from a flat vector in layout order.
    pub fn assign_flat(&mut self, flat: &[T]) -> Result<()> {
        if flat.len() != self.numel() {
            return Err(Error::invalid(format!(
                "{} values for {} parameters",
                flat.len(),
                self.numel()
            )));
        }
        let mut at = 0;
        for t in &mut self.tensors {
            let n = t.numel();
            t.data_mut().copy_from_slice(&flat[at..at + n]);
            at += n;
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }
}

/// A model: configuration plus its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T: Scalar> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
}

impl<T: Scalar> Model<T> {
    /// Standard initialisation from the `init` stream: scaled normal weights,
    /// zero biases, unit layer-norm gains.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Streams::new(seed).stream("init");
        let params = config
            .param_layout()
            .into_iter()
            .map(|(name, shape)| {
                let t = match init_std(&name, &shape) {
                    None if name.ends_with(".gain") => Tensor::ones(shape),
                    None => Tensor::zeros(shape),
                    Some(std) => normal_tensor(&mut rng, shape, std),
                };
                (name, t)
            })
            .collect();
        Ok(Self {
            config,
            params: ParamStore::from_pairs(params)?,
        })
    }

    /// Every parameter drawn at a sizeable scale, including biases and gains.
    /// Used where generic, non-degenerate weights matter (oracles, gradient
    /// checks, symmetry tests).
    pub fn random(config: ModelConfig, seed: u64, scale: f64) -> Result<Self> {
        config.validate()?;
        let mut rng = Streams::new(seed).stream("random-params");
        let params = config
            .param_layout()
            .into_iter()
            .map(|(name, shape)| {
                let t = if name.ends_with(".gain") {
                    normal_tensor(&mut rng, shape, 0.2).map(|v| v + T::one())
                } else if name.ends_with("rel_bias") || name.ends_with("bias") {
                    normal_tensor(&mut rng, shape, 0.3 * scale)
                } else {
                    let std = scale / (fan_in(&shape) as f64).sqrt();
                    normal_tensor(&mut rng, shape, std)
                };
                (name, t)
            })
            .collect();
        Ok(Self {
            config,
            params: ParamStore::from_pairs(params)?,
        })
    }

    /// All parameters zero (gains included): the network emits zero tendency.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let params = config
            .param_layout()
            .into_iter()
            .map(|(n, s)| (n, Tensor::zeros(s)))
            .collect();
        Ok(Self {
            config,
            params: ParamStore::from_pairs(params)?,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    /// Binds parameters into `graph`, as named differentiable leaves when
    /// `trainable`, otherwise as constants.
    pub fn bind(&self, graph: &Graph, trainable: bool) -> Result<BoundModel<T>> {
        let vars: HashMap<String, Var<T>> = self
            .params
            .iter()
            .map(|(n, t)| {
                let v = if trainable {
                    graph.param(n, t.clone())
                } else {
                    graph.constant(t.clone())
                };
                (n.to_string(), v)
            })
            .collect();
        BoundModel::new(&self.config, graph.clone(), vars)
    }

    /// Autoregressive forecast without gradient tracking: returns
    /// `X̂_{t+1}, …, X̂_{t+steps}`.
    pub fn rollout(&self, x_prev: &Tensor<T>, x_curr: &Tensor<T>, steps: usize) -> Result<Vec<Tensor<T>>> {
        let graph = Graph::new();
        let bound = self.bind(&graph, false)?;
        let mut prev = graph.constant(x_prev.clone());
        let mut curr = graph.constant(x_curr.clone());
        let mut out = Vec::with_capacity(steps);
        for _ in 0..steps {
            let next = bound.forward_step(&prev, &curr, None)?;
            out.push(next.value().clone());
            prev = curr;
            curr = next.detach();
        }
        Ok(out)
    }
}

fn normal_tensor<T: Scalar>(rng: &mut StreamRng, shape: Vec<usize>, std: f64) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape, |_| T::of(dist.sample(rng)))
}

/// Parameters bound as graph variables, ready for forward passes.
pub struct BoundModel<T: Scalar> {
    config: ModelConfig,
    graph: Graph,
    vars: HashMap<String, Var<T>>,
    encoder: Vec<BlockPairParams<T>>,
    core: Vec<BlockPairParams<T>>,
    decoder: Vec<BlockPairParams<T>>,
    outer_geo: StageGeometry<T>,
    core_geo: StageGeometry<T>,
}

impl<T: Scalar> BoundModel<T> {
    pub fn new(config: &ModelConfig, graph: Graph, vars: HashMap<String, Var<T>>) -> Result<Self> {
        config.validate()?;
        for (name, shape) in config.param_layout() {
            match vars.get(&name) {
                None => {
                    return Err(Error::CheckpointMismatch {
                        name,
                        detail: "missing".into(),
                    })
                }
                Some(v) if v.shape() != shape.as_slice() => {
                    return Err(Error::CheckpointMismatch {
                        name,
                        detail: format!("shape {:?}, expected {:?}", v.shape(), shape),
                    })
                }
                Some(_) => {}
            }
        }
        let get = |n: &str| -> Result<Var<T>> {
            vars.get(n).cloned().ok_or_else(|| Error::CheckpointMismatch {
                name: n.into(),
                detail: "missing".into(),
            })
        };
        let rates = config.drop_rates();
        let (e, c, d) = config.pairs();
        let bind_stage = |stage: &str, n: usize, heads: usize, offset: usize| -> Result<Vec<BlockPairParams<T>>> {
            (0..n)
                .map(|i| BlockPairParams::bind(&format!("{stage}.{i}"), heads, rates[offset + i], &get))
                .collect()
        };
        let encoder = bind_stage("encoder", e, config.heads.encoder, 0)?;
        let core = bind_stage("core", c, config.heads.core, e)?;
        let decoder = bind_stage("decoder", d, config.heads.decoder, e + c)?;
        let (wh, ww) = config.window;
        let (sh, sw) = config.shift();
        let [_, h1, w1] = config.stage_shapes().embed;
        let [_, h2, w2] = config.stage_shapes().core;
        Ok(Self {
            config: config.clone(),
            outer_geo: StageGeometry::new(h1, w1, wh, ww, sh, sw, config.mask_mode)?,
            core_geo: StageGeometry::new(h2, w2, wh, ww, sh, sw, config.mask_mode)?,
            graph,
            vars,
            encoder,
            core,
            decoder,
        })
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn var(&self, name: &str) -> Option<&Var<T>> {
        self.vars.get(name)
    }

    /// Parameter variables in layout order.
    pub fn vars_in_order(&self) -> Vec<(String, Var<T>)> {
        self.config
            .param_layout()
            .into_iter()
            .map(|(n, _)| {
                let v = self.vars[&n].clone();
                (n, v)
            })
            .collect()
    }

    fn p(&self, name: &str) -> &Var<T> {
        &self.vars[name]
    }

    /// `[C, H, W]` pair → latent `[H/2, W/2, d]`.
    pub fn embed(&self, x_prev: &Var<T>, x_curr: &Var<T>) -> Result<Var<T>> {
        let [c, h, w] = self.config.stage_shapes().output;
        for x in [x_prev, x_curr] {
            if x.shape() != [c, h, w] {
                return Err(Error::ShapeMismatch {
                    op: "embed",
                    lhs: x.shape().to_vec(),
                    rhs: vec![c, h, w],
                });
            }
        }
        let stacked = Var::concat(
            &[x_prev.reshape(vec![c, 1, h, w])?, x_curr.reshape(vec![c, 1, h, w])?],
            1,
        )?;
        let d = self.config.embed_dim;
        stacked
            .conv3d(self.p("embed.weight"), self.p("embed.bias"), [2, 2, 2])?
            .reshape(vec![d, h / 2, w / 2])?
            .permute(&[1, 2, 0])
    }

    /// Channel-last `[h, w, d]` → `[h/2, w/2, 2d]`.
    pub fn patch_merge(&self, x: &Var<T>) -> Result<Var<T>> {
        patch_merge(x, self.p("merge.weight"), self.p("merge.bias"))
    }

    /// Channel-last `[h/2, w/2, 2d]` → `[h, w, d]`.
    pub fn patch_expand(&self, x: &Var<T>) -> Result<Var<T>> {
        patch_expand(x, self.p("expand.weight"), self.p("expand.bias"))
    }

    /// Latent `[H/2, W/2, d]` → tendency `[C, H, W]`.
    pub fn unembed(&self, z: &Var<T>) -> Result<Var<T>> {
        unembed(
            z,
            [
                self.p("unembed.deconv.weight"),
                self.p("unembed.deconv.bias"),
                self.p("unembed.fc.weight"),
                self.p("unembed.fc.bias"),
            ],
        )
    }

    /// `X̂_{t+1} = X_t + ΔX`. `rng` enables stochastic depth (training).
    pub fn forward_step(&self, x_prev: &Var<T>, x_curr: &Var<T>, mut rng: Option<&mut StreamRng>) -> Result<Var<T>> {
        let mut z = self.embed(x_prev, x_curr)?;
        for p in &self.encoder {
            z = searth_block_pair(&z, p, &self.outer_geo, rng.as_deref_mut())?;
        }
        let skip = z.clone();
        z = self.patch_merge(&z)?;
        for p in &self.core {
            z = searth_block_pair(&z, p, &self.core_geo, rng.as_deref_mut())?;
        }
        z = self.patch_expand(&z)?.add(&skip)?;
        for p in &self.decoder {
            z = searth_block_pair(&z, p, &self.outer_geo, rng.as_deref_mut())?;
        }
        x_curr.add(&self.unembed(&z)?)
    }
}

pub fn patch_merge<T: Scalar>(x: &Var<T>, weight: &Var<T>, bias: &Var<T>) -> Result<Var<T>> {
    let s = x.shape();
    if s.len() != 3 || s[0] % 2 != 0 || s[1] % 2 != 0 {
        return Err(Error::InvalidShape {
            op: "patch_merge",
            detail: format!("{s:?} needs even h, w"),
        });
    }
    let (h, w, d) = (s[0], s[1], s[2]);
    x.reshape(vec![h / 2, 2, w / 2, 2, d])?
        .permute(&[0, 2, 1, 3, 4])?
        .reshape(vec![h / 2, w / 2, 4 * d])?
        .linear(weight, bias)
}

pub fn patch_expand<T: Scalar>(x: &Var<T>, weight: &Var<T>, bias: &Var<T>) -> Result<Var<T>> {
    let s = x.shape();
    let out = weight.shape().get(1).copied().unwrap_or(0);
    if s.len() != 3 || out % 4 != 0 {
        return Err(Error::InvalidShape {
            op: "patch_expand",
            detail: format!("input {s:?}, weight {:?}", weight.shape()),
        });
    }
    let (h, w, d) = (s[0], s[1], out / 4);
    x.linear(weight, bias)?
        .reshape(vec![h, w, 2, 2, d])?
        .permute(&[0, 2, 1, 3, 4])?
        .reshape(vec![2 * h, 2 * w, d])
}

/// `[deconv.weight, deconv.bias, fc.weight, fc.bias]`.
pub fn unembed<T: Scalar>(z: &Var<T>, p: [&Var<T>; 4]) -> Result<Var<T>> {
    if z.shape().len() != 3 {
        return Err(Error::InvalidShape {
            op: "unembed",
            detail: format!("latent {:?}", z.shape()),
        });
    }
    z.permute(&[2, 0, 1])?
        .conv_transpose2d(p[0], p[1], [2, 2])?
        .permute(&[1, 2, 0])?
        .linear(p[2], p[3])?
        .permute(&[2, 0, 1])
}

/// Shapes produced by materialising only the embed, merge and unembed layers
/// of a configuration (zero-valued inputs, inference mode). The transformer
/// stacks preserve shape and are not built.
pub fn probe_boundary_shapes<T: Scalar>(config: &ModelConfig, seed: u64) -> Result<StageShapes> {
    config.validate()?;
    let layout: HashMap<String, Vec<usize>> = config.param_layout().into_iter().collect();
    let mut rng = Streams::new(seed).stream("probe");
    let g = Graph::new();
    let mut param = |name: &str| -> Var<T> {
        let shape = layout[name].clone();
        g.constant(normal_tensor(&mut rng, shape, 0.02))
    };
    let [c, h, w] = config.stage_shapes().output;
    let d = config.embed_dim;
    let x = g.constant(Tensor::<T>::zeros(vec![c, 2, h, w]));
    let z = x
        .conv3d(&param("embed.weight"), &param("embed.bias"), [2, 2, 2])?
        .reshape(vec![d, h / 2, w / 2])?
        .permute(&[1, 2, 0])?;
    let embed = hwc_to_chw(z.shape());
    let merged = patch_merge(&z, &param("merge.weight"), &param("merge.bias"))?;
    let core = hwc_to_chw(merged.shape());
    drop(merged);
    let out = unembed(
        &z,
        [
            &param("unembed.deconv.weight"),
            &param("unembed.deconv.bias"),
            &param("unembed.fc.weight"),
            &param("unembed.fc.bias"),
        ],
    )?;
    let s = out.shape();
    Ok(StageShapes {
        embed,
        core,
        output: [s[0], s[1], s[2]],
    })
}

fn hwc_to_chw(s: &[usize]) -> [usize; 3] {
    [s[2], s[0], s[1]]
}

/// Per-channel standardisation statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    /// Mean and population standard deviation per channel over `[C, H, W]` fields.
    pub fn from_fields<T: Scalar>(fields: &[Tensor<T>]) -> Result<Self> {
        let first = fields
            .first()
            .ok_or_else(|| Error::invalid("no fields for normalisation statistics"))?;
        let c = first.shape()[0];
        let per = first.numel() / c;
        let mut sum = vec![0.0; c];
        let mut sq = vec![0.0; c];
        for f in fields {
            if f.shape() != first.shape() {
                return Err(Error::ShapeMismatch {
                    op: "norm_stats",
                    lhs: f.shape().to_vec(),
                    rhs: first.shape().to_vec(),
                });
            }
            for (ch, chunk) in f.data().chunks(per).enumerate() {
                for &v in chunk {
                    let v = v.as_f64();
                    sum[ch] += v;
                    sq[ch] += v * v;
                }
            }
        }
        let n = (fields.len() * per) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| {
                let var = (s / n - m * m).max(0.0);
                if var > 0.0 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn normalize<T: Scalar>(&self, x: &Tensor<T>) -> Tensor<T> {
        self.apply(x, |v, m, s| (v - m) / s)
    }

    pub fn denormalize<T: Scalar>(&self, x: &Tensor<T>) -> Tensor<T> {
        self.apply(x, |v, m, s| v * s + m)
    }

    fn apply<T: Scalar>(&self, x: &Tensor<T>, f: impl Fn(f64, f64, f64) -> f64) -> Tensor<T> {
        let per = x.numel() / self.mean.len();
        let mut out = x.clone();
        for (ch, chunk) in out.data_mut().chunks_mut(per).enumerate() {
            for v in chunk {
                *v = T::of(f(v.as_f64(), self.mean[ch], self.std[ch]));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for c in [ModelConfig::toy(), ModelConfig::full(), ModelConfig::tiny()] {
            c.validate().unwrap();
        }
        let mut bad = ModelConfig::toy();
        bad.window = (3, 3);
        assert!(bad.validate().is_err());
        bad = ModelConfig::toy();
        bad.core_blocks = 3;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn toy_stage_shapes() {
        let s = ModelConfig::toy().stage_shapes();
        assert_eq!(s.embed, [32, 8, 16]);
        assert_eq!(s.core, [64, 4, 8]);
        assert_eq!(s.output, [4, 16, 32]);
    }

    #[test]
    fn layout_names_unique_and_count_matches() {
        let c = ModelConfig::toy();
        let m = Model::<f64>::init(c.clone(), 0).unwrap();
        assert_eq!(m.param_count(), c.param_count());
        assert_eq!(m.params.len(), c.param_layout().len());
    }

    #[test]
    fn drop_rates_rise_linearly() {
        let mut c = ModelConfig::toy();
        c.droppath = 0.3;
        let r = c.drop_rates();
        assert_eq!(r.len(), 4);
        assert_eq!(r[0], 0.0);
        assert!((r[3] - 0.3).abs() < 1e-15);
    }

    #[test]
    fn norm_stats_round_trip() {
        let f = Tensor::<f64>::from_fn([2, 3, 4], |i| (i as f64).cos() * 5.0 + 2.0);
        let s = NormStats::from_fields(std::slice::from_ref(&f)).unwrap();
        let back = s.denormalize(&s.normalize(&f));
        assert!(back.max_abs_diff(&f) < 1e-12);
    }

    #[test]
    fn zero_model_is_persistence() {
        let m = Model::<f64>::zeros(ModelConfig::tiny()).unwrap();
        let a = Tensor::from_fn([2, 8, 8], |i| i as f64 * 0.1);
        let b = Tensor::from_fn([2, 8, 8], |i| (i as f64).sin());
        let out = m.rollout(&a, &b, 1).unwrap();
        assert_eq!(out[0], b);
    }
}
