//! Windowed multi-head self-attention and the paired Searth block.
//!
//! Latents are channel-last `[H, W, C]` throughout. The first sub-block of a
//! pair attends inside plain windows; the second rolls the field by
//! `(−shift_h, −shift_w)`, attends under an [`AttentionMask`], and rolls back.

use rand::Rng;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::geometry::{earth_attention_mask, AttentionMask, MaskMode, WindowLayout};
use crate::rng::StreamRng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;

/// Index into the relative-position bias table for every `(q, k)` pair of a
/// `win_h × win_w` window, row-major over `T × T`.
pub fn relative_position_index(win_h: usize, win_w: usize) -> Vec<usize> {
    let t = win_h * win_w;
    let span_w = 2 * win_w - 1;
    let mut idx = Vec::with_capacity(t * t);
    for q in 0..t {
        for k in 0..t {
            let dh = (q / win_w) as isize - (k / win_w) as isize + win_h as isize - 1;
            let dw = (q % win_w) as isize - (k % win_w) as isize + win_w as isize - 1;
            idx.push(dh as usize * span_w + dw as usize);
        }
    }
    idx
}

pub fn relative_table_rows(win_h: usize, win_w: usize) -> usize {
    (2 * win_h - 1) * (2 * win_w - 1)
}

/// Parameter names and shapes of one paired block, in a fixed order.
pub fn block_pair_param_shapes(
    prefix: &str,
    d: usize,
    n_heads: usize,
    win_h: usize,
    win_w: usize,
) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    for sub in ["wmsa", "smsa"] {
        let p = format!("{prefix}.{sub}");
        let mut push = |name: &str, shape: Vec<usize>| out.push((format!("{p}.{name}"), shape));
        push("norm1.gain", vec![d]);
        push("norm1.bias", vec![d]);
        push("attn.qkv.weight", vec![d, 3 * d]);
        push("attn.qkv.bias", vec![3 * d]);
        push("attn.proj.weight", vec![d, d]);
        push("attn.proj.bias", vec![d]);
        push("attn.rel_bias", vec![relative_table_rows(win_h, win_w), n_heads]);
        push("norm2.gain", vec![d]);
        push("norm2.bias", vec![d]);
        push("mlp.fc1.weight", vec![d, 4 * d]);
        push("mlp.fc1.bias", vec![4 * d]);
        push("mlp.fc2.weight", vec![4 * d, d]);
        push("mlp.fc2.bias", vec![d]);
    }
    out
}

/// Looks up a bound parameter by full name.
pub type ParamLookup<'a, T> = dyn Fn(&str) -> Result<Var<T>> + 'a;

#[derive(Debug, Clone)]
pub struct MsaParams<T: Scalar> {
    pub qkv_weight: Var<T>,
    pub qkv_bias: Var<T>,
    pub proj_weight: Var<T>,
    pub proj_bias: Var<T>,
    /// `[(2·win_h−1)·(2·win_w−1), n_heads]`.
    pub rel_bias: Var<T>,
    pub n_heads: usize,
}

impl<T: Scalar> MsaParams<T> {
    pub fn bind(prefix: &str, n_heads: usize, get: &ParamLookup<'_, T>) -> Result<Self> {
        Ok(Self {
            qkv_weight: get(&format!("{prefix}.qkv.weight"))?,
            qkv_bias: get(&format!("{prefix}.qkv.bias"))?,
            proj_weight: get(&format!("{prefix}.proj.weight"))?,
            proj_bias: get(&format!("{prefix}.proj.bias"))?,
            rel_bias: get(&format!("{prefix}.rel_bias"))?,
            n_heads,
        })
    }

    pub fn d_model(&self) -> usize {
        self.proj_weight.shape()[0]
    }
}

/// One pre-norm transformer sub-block.
#[derive(Debug, Clone)]
pub struct SubBlockParams<T: Scalar> {
    pub norm1: (Var<T>, Var<T>),
    pub msa: MsaParams<T>,
    pub norm2: (Var<T>, Var<T>),
    pub fc1: (Var<T>, Var<T>),
    pub fc2: (Var<T>, Var<T>),
}

impl<T: Scalar> SubBlockParams<T> {
    pub fn bind(prefix: &str, n_heads: usize, get: &ParamLookup<'_, T>) -> Result<Self> {
        let pair = |a: &str, b: &str| -> Result<(Var<T>, Var<T>)> {
            Ok((get(&format!("{prefix}.{a}"))?, get(&format!("{prefix}.{b}"))?))
        };
        Ok(Self {
            norm1: pair("norm1.gain", "norm1.bias")?,
            msa: MsaParams::bind(&format!("{prefix}.attn"), n_heads, get)?,
            norm2: pair("norm2.gain", "norm2.bias")?,
            fc1: pair("mlp.fc1.weight", "mlp.fc1.bias")?,
            fc2: pair("mlp.fc2.weight", "mlp.fc2.bias")?,
        })
    }
}

/// Unshifted sub-block followed by the shifted one.
#[derive(Debug, Clone)]
pub struct BlockPairParams<T: Scalar> {
    pub wmsa: SubBlockParams<T>,
    pub smsa: SubBlockParams<T>,
    pub drop_rate: f64,
}

impl<T: Scalar> BlockPairParams<T> {
    pub fn bind(prefix: &str, n_heads: usize, drop_rate: f64, get: &ParamLookup<'_, T>) -> Result<Self> {
        Ok(Self {
            wmsa: SubBlockParams::bind(&format!("{prefix}.wmsa"), n_heads, get)?,
            smsa: SubBlockParams::bind(&format!("{prefix}.smsa"), n_heads, get)?,
            drop_rate,
        })
    }
}

/// Window geometry of one stage plus its precomputed shifted mask.
#[derive(Debug, Clone)]
pub struct StageGeometry<T: Scalar> {
    pub layout: WindowLayout,
    pub shift_h: usize,
    pub shift_w: usize,
    pub mode: MaskMode,
    mask: AttentionMask,
    mask_tensor: Option<Tensor<T>>,
    rel_index: Vec<usize>,
}

impl<T: Scalar> StageGeometry<T> {
    pub fn new(
        h: usize,
        w: usize,
        win_h: usize,
        win_w: usize,
        shift_h: usize,
        shift_w: usize,
        mode: MaskMode,
    ) -> Result<Self> {
        let layout = WindowLayout::new(h, w, win_h, win_w)?;
        let mask = earth_attention_mask(h, w, win_h, win_w, shift_h, shift_w, mode)?;
        let mask_tensor = (!mask.is_zero()).then(|| mask.to_tensor());
        Ok(Self {
            layout,
            shift_h,
            shift_w,
            mode,
            mask,
            mask_tensor,
            rel_index: relative_position_index(win_h, win_w),
        })
    }

    /// Shift of `⌊win/2⌋` on both axes.
    pub fn half_shift(h: usize, w: usize, win_h: usize, win_w: usize, mode: MaskMode) -> Result<Self> {
        Self::new(h, w, win_h, win_w, win_h / 2, win_w / 2, mode)
    }

    pub fn mask(&self) -> &AttentionMask {
        &self.mask
    }
}

/// `[H, W, C]` → `[num_windows, T, C]`.
pub fn partition_hwc<T: Scalar>(x: &Var<T>, layout: &WindowLayout) -> Result<Var<T>> {
    let c = x.shape()[2];
    let WindowLayout { h, w, win_h, win_w } = *layout;
    x.reshape(vec![h / win_h, win_h, w / win_w, win_w, c])?
        .permute(&[0, 2, 1, 3, 4])?
        .reshape(vec![layout.num_windows(), layout.tokens(), c])
}

/// Inverse of [`partition_hwc`].
pub fn reverse_hwc<T: Scalar>(windows: &Var<T>, layout: &WindowLayout) -> Result<Var<T>> {
    let c = windows.shape()[2];
    let WindowLayout { h, w, win_h, win_w } = *layout;
    windows
        .reshape(vec![h / win_h, w / win_w, win_h, win_w, c])?
        .permute(&[0, 2, 1, 3, 4])?
        .reshape(vec![h, w, c])
}

/// Multi-head attention inside every window of `x: [H, W, C]`.
///
/// With `masked` false the geometry's mask is ignored (plain windows).
pub fn window_msa<T: Scalar>(x: &Var<T>, p: &MsaParams<T>, geo: &StageGeometry<T>, masked: bool) -> Result<Var<T>> {
    let layout = geo.layout;
    let s = x.shape();
    let d = p.d_model();
    if s.len() != 3 || s[0] != layout.h || s[1] != layout.w || s[2] != d {
        return Err(Error::InvalidShape {
            op: "window_msa",
            detail: format!("input {s:?} vs geometry {}×{}×{d}", layout.h, layout.w),
        });
    }
    let (nh, t, nw) = (p.n_heads, layout.tokens(), layout.num_windows());
    if nh == 0 || d % nh != 0 {
        return Err(Error::invalid(format!("{nh} heads do not divide d_model {d}")));
    }
    if p.rel_bias.shape() != [relative_table_rows(layout.win_h, layout.win_w), nh] {
        return Err(Error::InvalidShape {
            op: "window_msa",
            detail: format!(
                "relative bias table {:?} for window {}×{}",
                p.rel_bias.shape(),
                layout.win_h,
                layout.win_w
            ),
        });
    }
    let hd = d / nh;
    let windows = partition_hwc(x, &layout)?;
    let qkv = windows
        .linear(&p.qkv_weight, &p.qkv_bias)?
        .reshape(vec![nw, t, 3, nh, hd])?
        .permute(&[2, 0, 3, 1, 4])?;
    let part = |i: usize| qkv.narrow(0, i, 1)?.reshape(vec![nw, nh, t, hd]);
    let (q, k, v) = (part(0)?, part(1)?, part(2)?);
    let mut scores = q.scale(1.0 / (hd as f64).sqrt()).matmul(&k.transpose_last()?)?;
    let bias = p
        .rel_bias
        .gather_rows(&geo.rel_index)?
        .reshape(vec![t, t, nh])?
        .permute(&[2, 0, 1])?;
    scores = scores.add(&bias)?;
    if masked {
        if let Some(m) = &geo.mask_tensor {
            scores = scores.add(&x.graph().constant(m.clone()))?;
        }
    }
    let out = scores
        .softmax()
        .matmul(&v)?
        .permute(&[0, 2, 1, 3])?
        .reshape(vec![nw, t, d])?
        .linear(&p.proj_weight, &p.proj_bias)?;
    reverse_hwc(&out, &layout)
}

/// Whether a residual branch survives one stochastic-depth draw.
pub fn drop_path_keep(rate: f64, rng: &mut StreamRng) -> bool {
    rate <= 0.0 || rng.random::<f64>() >= rate
}

/// Per-sample stochastic depth on a residual branch. `rng` of `None` means
/// inference, where the branch passes unchanged.
pub fn drop_path<T: Scalar>(branch: &Var<T>, rate: f64, rng: Option<&mut StreamRng>) -> Result<Var<T>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::invalid(format!("drop-path rate {rate} outside [0, 1)")));
    }
    match rng {
        Some(rng) if rate > 0.0 => Ok(if drop_path_keep(rate, rng) {
            branch.scale(1.0 / (1.0 - rate))
        } else {
            branch.scale(0.0)
        }),
        _ => Ok(branch.clone()),
    }
}

fn sub_block<T: Scalar>(
    x: &Var<T>,
    p: &SubBlockParams<T>,
    geo: &StageGeometry<T>,
    shifted: bool,
    drop_rate: f64,
    rng: &mut Option<&mut StreamRng>,
) -> Result<Var<T>> {
    let normed = x.layer_norm(&p.norm1.0, &p.norm1.1, LN_EPS)?;
    let attn = if shifted {
        let sh = geo.shift_h as isize;
        let sw = geo.shift_w as isize;
        let rolled = normed.roll(0, -sh)?.roll(1, -sw)?;
        window_msa(&rolled, &p.msa, geo, true)?.roll(0, sh)?.roll(1, sw)?
    } else {
        window_msa(&normed, &p.msa, geo, false)?
    };
    let x = x.add(&drop_path(&attn, drop_rate, rng.as_deref_mut())?)?;
    let mlp = x
        .layer_norm(&p.norm2.0, &p.norm2.1, LN_EPS)?
        .linear(&p.fc1.0, &p.fc1.1)?
        .gelu()
        .linear(&p.fc2.0, &p.fc2.1)?;
    x.add(&drop_path(&mlp, drop_rate, rng.as_deref_mut())?)
}

/// Plain-window sub-block, then the shifted, masked sub-block.
pub fn searth_block_pair<T: Scalar>(
    x: &Var<T>,
    p: &BlockPairParams<T>,
    geo: &StageGeometry<T>,
    mut rng: Option<&mut StreamRng>,
) -> Result<Var<T>> {
    let x = sub_block(x, &p.wmsa, geo, false, p.drop_rate, &mut rng)?;
    sub_block(&x, &p.smsa, geo, true, p.drop_rate, &mut rng)
}
