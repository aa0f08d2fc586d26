//! Latitude–longitude grid geometry: area weights, 0.25° → 1° regridding,
//! window tiling and the shifted-window attention masks.
//!
//! The masks are where the Earth topology enters the model. After the
//! shifted sub-block rolls the latent field by `(−shift_h, −shift_w)`, the
//! last row of windows contains tokens that wrapped over the pole and the last
//! column of windows contains tokens that wrapped over the date line. In
//! [`MaskMode::Earth`] only the pole seam is masked, so attention flows freely
//! across the longitude seam; [`MaskMode::Planar`] masks both seams, which is
//! the classic Swin behaviour.

use std::collections::BTreeSet;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Additive score for a disallowed token pair.
pub const BLOCK: f64 = -1e9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatLonGrid {
    latitudes: Vec<f64>,
    n_lon: usize,
}

impl LatLonGrid {
    /// `latitudes` in degrees, strictly decreasing from north.
    pub fn new(latitudes: Vec<f64>, n_lon: usize) -> Result<Self> {
        if latitudes.is_empty() || n_lon == 0 {
            return Err(Error::invalid("grid needs at least one latitude and one longitude"));
        }
        if latitudes.iter().any(|p| !p.is_finite() || p.abs() > 90.0) {
            return Err(Error::invalid("latitudes must lie in [-90, 90]"));
        }
        if latitudes.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::invalid("latitudes must be strictly decreasing"));
        }
        Ok(Self { latitudes, n_lon })
    }

    /// Cell-centred regular grid: row `i` at `90 − (i + ½)·180/H`.
    pub fn cell_centered(n_lat: usize, n_lon: usize) -> Result<Self> {
        let dlat = 180.0 / n_lat as f64;
        Self::new((0..n_lat).map(|i| 90.0 - (i as f64 + 0.5) * dlat).collect(), n_lon)
    }

    /// Latitudes of the 180×360 grid produced by [`regrid_quarter_to_one`]:
    /// each output row is the mean latitude of its four 0.25° source rows.
    pub fn one_degree_from_quarter() -> Self {
        let lats = (0..180).map(|r| 90.0 - 0.25 * (4 * r) as f64 - 0.375).collect();
        Self::new(lats, 360).expect("static grid")
    }

    pub fn n_lat(&self) -> usize {
        self.latitudes.len()
    }

    pub fn n_lon(&self) -> usize {
        self.n_lon
    }

    pub fn latitudes(&self) -> &[f64] {
        &self.latitudes
    }

    /// Uniform, periodic: index `n_lon` wraps to 0.
    pub fn longitudes(&self) -> Vec<f64> {
        let d = 360.0 / self.n_lon as f64;
        (0..self.n_lon).map(|j| j as f64 * d).collect()
    }

    pub fn weights(&self) -> Vec<f64> {
        latitude_weights(&self.latitudes).expect("validated grid")
    }
}

/// `L_i = N_lat · cos φ_i / Σ_j cos φ_j`, so that `Σ L_i = N_lat`.
pub fn latitude_weights(latitudes_deg: &[f64]) -> Result<Vec<f64>> {
    if latitudes_deg.is_empty() {
        return Err(Error::invalid("latitude_weights: empty latitude list"));
    }
    if latitudes_deg.iter().any(|p| !p.is_finite() || p.abs() > 90.0) {
        return Err(Error::invalid("latitude_weights: |latitude| must be ≤ 90°"));
    }
    let cos: Vec<f64> = latitudes_deg.iter().map(|p| p.to_radians().cos()).collect();
    let total: f64 = cos.iter().sum();
    if total <= 0.0 {
        return Err(Error::invalid("latitude_weights: all latitudes at the poles"));
    }
    let n = latitudes_deg.len() as f64;
    Ok(cos.iter().map(|c| n * c / total).collect())
}

/// 0.25° (721×1440) → 1° (180×360) block averaging over the trailing two
/// axes. Row 720 (90°S under north→south ordering) is dropped, then every
/// 4×4 block is replaced by its mean.
pub fn regrid_quarter_to_one<T: Scalar>(field: &Tensor<T>) -> Result<Tensor<T>> {
    let r = field.rank();
    if r < 2 || field.shape()[r - 2..] != [721, 1440] {
        return Err(Error::InvalidShape {
            op: "regrid",
            detail: format!("expected trailing extents (721, 1440), got {:?}", field.shape()),
        });
    }
    block_mean(field, 720, 4)
}

/// Mean over `factor×factor` blocks of the first `rows` rows of the trailing
/// two axes.
pub fn block_mean<T: Scalar>(field: &Tensor<T>, rows: usize, factor: usize) -> Result<Tensor<T>> {
    let r = field.rank();
    let (h, w) = (field.shape()[r - 2], field.shape()[r - 1]);
    if factor == 0 || rows > h || rows % factor != 0 || w % factor != 0 {
        return Err(Error::InvalidShape {
            op: "block_mean",
            detail: format!("{rows} rows of {:?} not tileable by {factor}", field.shape()),
        });
    }
    let (oh, ow) = (rows / factor, w / factor);
    let lead: usize = field.shape()[..r - 2].iter().product();
    let inv = T::of(1.0 / (factor * factor) as f64);
    let mut out = Vec::with_capacity(lead * oh * ow);
    for c in 0..lead {
        let src = &field.data()[c * h * w..(c + 1) * h * w];
        for i in 0..oh {
            for j in 0..ow {
                let mut s = T::zero();
                for a in 0..factor {
                    let row = &src[(i * factor + a) * w + j * factor..][..factor];
                    for &v in row {
                        s += v;
                    }
                }
                out.push(s * inv);
            }
        }
    }
    let mut shape = field.shape()[..r - 2].to_vec();
    shape.extend([oh, ow]);
    Tensor::new(shape, out)
}

/// Window geometry over an `h × w` token grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowLayout {
    pub h: usize,
    pub w: usize,
    pub win_h: usize,
    pub win_w: usize,
}

impl WindowLayout {
    pub fn new(h: usize, w: usize, win_h: usize, win_w: usize) -> Result<Self> {
        if win_h == 0 || win_w == 0 || h % win_h != 0 || w % win_w != 0 {
            return Err(Error::InvalidShape {
                op: "window_partition",
                detail: format!("{h}×{w} is not divisible by window {win_h}×{win_w}"),
            });
        }
        Ok(Self { h, w, win_h, win_w })
    }

    pub fn windows_per_row(&self) -> usize {
        self.w / self.win_w
    }

    pub fn num_windows(&self) -> usize {
        (self.h / self.win_h) * (self.w / self.win_w)
    }

    pub fn tokens(&self) -> usize {
        self.win_h * self.win_w
    }

    /// `(window, local index)` of grid cell `(i, j)`.
    pub fn locate(&self, i: usize, j: usize) -> (usize, usize) {
        let win = (i / self.win_h) * self.windows_per_row() + j / self.win_w;
        (win, (i % self.win_h) * self.win_w + j % self.win_w)
    }

    /// Grid cell of `(window, local index)`.
    pub fn cell(&self, window: usize, local: usize) -> (usize, usize) {
        let (wr, wc) = (window / self.windows_per_row(), window % self.windows_per_row());
        (
            wr * self.win_h + local / self.win_w,
            wc * self.win_w + local % self.win_w,
        )
    }
}

/// `[C, H, W]` → `[num_windows, win_h·win_w, C]`, windows and tokens in
/// row-major order.
pub fn window_partition<T: Scalar>(x: &Tensor<T>, win_h: usize, win_w: usize) -> Result<Tensor<T>> {
    if x.rank() != 3 {
        return Err(Error::InvalidShape {
            op: "window_partition",
            detail: format!("expected [C, H, W], got {:?}", x.shape()),
        });
    }
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let layout = WindowLayout::new(h, w, win_h, win_w)?;
    x.clone()
        .reshape(vec![c, h / win_h, win_h, w / win_w, win_w])?
        .permute(&[1, 3, 2, 4, 0])?
        .reshape(vec![layout.num_windows(), layout.tokens(), c])
}

/// Inverse of [`window_partition`].
pub fn window_reverse<T: Scalar>(
    windows: &Tensor<T>,
    h: usize,
    w: usize,
    win_h: usize,
    win_w: usize,
) -> Result<Tensor<T>> {
    let layout = WindowLayout::new(h, w, win_h, win_w)?;
    let s = windows.shape();
    if s.len() != 3 || s[0] != layout.num_windows() || s[1] != layout.tokens() {
        return Err(Error::InvalidShape {
            op: "window_reverse",
            detail: format!("{s:?} does not tile {h}×{w} with {win_h}×{win_w} windows"),
        });
    }
    let c = s[2];
    windows
        .clone()
        .reshape(vec![h / win_h, w / win_w, win_h, win_w, c])?
        .permute(&[4, 0, 2, 1, 3])?
        .reshape(vec![c, h, w])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum MaskMode {
    /// Longitude seam open, pole seam masked.
    #[default]
    Earth,
    /// Both seams masked (Swin).
    Planar,
}

impl std::str::FromStr for MaskMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "earth" => Ok(MaskMode::Earth),
            "planar" | "swin" => Ok(MaskMode::Planar),
            other => Err(format!("unknown mask mode `{other}` (expected earth or planar)")),
        }
    }
}

impl std::fmt::Display for MaskMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MaskMode::Earth => "earth",
            MaskMode::Planar => "planar",
        })
    }
}

/// Per-window additive attention mask with entries in `{0, BLOCK}`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMask {
    layout: WindowLayout,
    entries: Vec<f64>,
}

impl AttentionMask {
    pub fn layout(&self) -> WindowLayout {
        self.layout
    }

    pub fn num_windows(&self) -> usize {
        self.layout.num_windows()
    }

    pub fn tokens_per_window(&self) -> usize {
        self.layout.tokens()
    }

    pub fn entry(&self, window: usize, q: usize, k: usize) -> f64 {
        let t = self.tokens_per_window();
        self.entries[(window * t + q) * t + k]
    }

    pub fn is_blocked(&self, window: usize, q: usize, k: usize) -> bool {
        self.entry(window, q, k) != 0.0
    }

    pub fn is_zero(&self) -> bool {
        self.entries.iter().all(|&e| e == 0.0)
    }

    /// Every blocked `(window, q, k)` triple.
    pub fn blocked_set(&self) -> BTreeSet<(usize, usize, usize)> {
        let t = self.tokens_per_window();
        (0..self.num_windows())
            .flat_map(|w| (0..t).flat_map(move |q| (0..t).map(move |k| (w, q, k))))
            .filter(|&(w, q, k)| self.is_blocked(w, q, k))
            .collect()
    }

    /// `[num_windows, 1, T, T]`, broadcastable over attention heads.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let t = self.tokens_per_window();
        Tensor::from_f64(vec![self.num_windows(), 1, t, t], &self.entries).expect("mask extent")
    }

    /// CSV with columns `window,q,k,blocked`.
    pub fn write_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "window,q,k,blocked")?;
        let t = self.tokens_per_window();
        for w in 0..self.num_windows() {
            for q in 0..t {
                for k in 0..t {
                    writeln!(out, "{w},{q},{k},{}", u8::from(self.is_blocked(w, q, k)))?;
                }
            }
        }
        Ok(())
    }
}

/// Band of a post-roll coordinate: 0 for `[0, n−win)`, 1 for
/// `[n−win, n−shift)`, 2 for `[n−shift, n)`.
fn band(i: usize, n: usize, win: usize, shift: usize) -> usize {
    if i < n - win {
        0
    } else if i < n - shift {
        1
    } else {
        2
    }
}

/// Builds the shifted-window mask by labelling regions of the rolled layout
/// and blocking every pair of tokens whose regions differ.
pub fn earth_attention_mask(
    h: usize,
    w: usize,
    win_h: usize,
    win_w: usize,
    shift_h: usize,
    shift_w: usize,
    mode: MaskMode,
) -> Result<AttentionMask> {
    let layout = WindowLayout::new(h, w, win_h, win_w)?;
    if shift_h >= win_h || shift_w >= win_w {
        return Err(Error::invalid(format!(
            "shift ({shift_h}, {shift_w}) must be smaller than window ({win_h}, {win_w})"
        )));
    }
    let t = layout.tokens();
    let mut entries = vec![0.0; layout.num_windows() * t * t];
    if shift_h == 0 && shift_w == 0 {
        return Ok(AttentionMask { layout, entries });
    }
    let region = |i: usize, j: usize| -> usize {
        let rb = band(i, h, win_h, shift_h);
        match mode {
            MaskMode::Earth => rb,
            MaskMode::Planar => 3 * rb + band(j, w, win_w, shift_w),
        }
    };
    for win in 0..layout.num_windows() {
        let labels: Vec<usize> = (0..t)
            .map(|l| {
                let (i, j) = layout.cell(win, l);
                region(i, j)
            })
            .collect();
        for q in 0..t {
            for k in 0..t {
                if labels[q] != labels[k] {
                    entries[(win * t + q) * t + k] = BLOCK;
                }
            }
        }
    }
    Ok(AttentionMask { layout, entries })
}
