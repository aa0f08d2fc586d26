//! Dense row-major tensors and the raw kernels the differentiation graph is
//! built on. Nothing here records gradients; see [`crate::autodiff`].

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> std::fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        const PREVIEW: usize = 8;
        let head: Vec<T> = self.data.iter().take(PREVIEW).copied().collect();
        write!(f, "Tensor{:?} {:?}", self.shape, head)?;
        if self.data.len() > PREVIEW {
            write!(f, " …")?;
        }
        Ok(())
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

/// Right-aligned broadcast of two shapes.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` viewed as broadcast into `out` (zero on expanded axes).
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let own = strides_of(shape);
    let offset = out.len() - shape.len();
    (0..out.len())
        .map(|i| {
            if i < offset || shape[i - offset] == 1 {
                0
            } else {
                own[i - offset]
            }
        })
        .collect()
}

/// Visits every multi-index of `shape` in row-major order, carrying one
/// strided offset per operand.
fn for_each_offset<const N: usize>(shape: &[usize], strides: [&[usize]; N], mut f: impl FnMut(usize, [usize; N])) {
    let total = numel(shape);
    if total == 0 {
        return;
    }
    let rank = shape.len();
    let mut idx = vec![0usize; rank];
    let mut offs = [0usize; N];
    for linear in 0..total {
        f(linear, offs);
        for d in (0..rank).rev() {
            idx[d] += 1;
            for (o, s) in offs.iter_mut().zip(strides.iter()) {
                *o += s[d];
            }
            if idx[d] < shape[d] {
                break;
            }
            for (o, s) in offs.iter_mut().zip(strides.iter()) {
                *o -= s[d] * shape[d];
            }
            idx[d] = 0;
        }
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        if numel(&shape) != data.len() {
            return Err(Error::InvalidShape {
                op: "tensor",
                detail: format!("shape {:?} needs {} values, got {}", shape, numel(&shape), data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let n = numel(&shape);
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> T) -> Self {
        let shape = shape.into();
        let data = (0..numel(&shape)).map(&mut f).collect();
        Self { shape, data }
    }

    pub fn from_f64(shape: impl Into<Vec<usize>>, values: &[f64]) -> Result<Self> {
        Self::new(shape, values.iter().map(|&v| T::of(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn get(&self, index: &[usize]) -> T {
        debug_assert_eq!(index.len(), self.shape.len());
        let strides = strides_of(&self.shape);
        let off: usize = index.iter().zip(&strides).map(|(i, s)| i * s).sum();
        self.data[off]
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if numel(&shape) != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape,
                rhs: shape,
            });
        }
        Ok(Self { shape, data: self.data })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn map_inplace(&mut self, f: impl Fn(T) -> T) {
        for v in &mut self.data {
            *v = f(*v);
        }
    }

    /// Elementwise op with numpy-style right-aligned broadcasting.
    pub fn broadcast_zip(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape == other.shape {
            let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
            return Ok(Self {
                shape: self.shape.clone(),
                data,
            });
        }
        let out_shape = broadcast_shape(&self.shape, &other.shape).ok_or_else(|| Error::ShapeMismatch {
            op,
            lhs: self.shape.clone(),
            rhs: other.shape.clone(),
        })?;
        // Fast path: `other` broadcast along leading axes only.
        if out_shape == self.shape && is_trailing(&other.shape, &self.shape) {
            let m = other.data.len();
            let data = self
                .data
                .iter()
                .enumerate()
                .map(|(i, &a)| f(a, other.data[i % m]))
                .collect();
            return Ok(Self { shape: out_shape, data });
        }
        let sa = broadcast_strides(&self.shape, &out_shape);
        let sb = broadcast_strides(&other.shape, &out_shape);
        let mut data = Vec::with_capacity(numel(&out_shape));
        for_each_offset(&out_shape, [&sa, &sb], |_, [oa, ob]| {
            data.push(f(self.data[oa], other.data[ob]));
        });
        Ok(Self { shape: out_shape, data })
    }

    /// Sums a broadcast result back down to `shape` (the adjoint of broadcasting).
    pub fn sum_to_shape(&self, shape: &[usize]) -> Result<Self> {
        if self.shape == shape {
            return Ok(self.clone());
        }
        if broadcast_shape(shape, &self.shape).as_deref() != Some(&self.shape[..]) {
            return Err(Error::ShapeMismatch {
                op: "sum_to_shape",
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        let mut out = Self::zeros(shape.to_vec());
        if is_trailing(shape, &self.shape) {
            let m = out.data.len();
            for (i, &v) in self.data.iter().enumerate() {
                out.data[i % m] += v;
            }
            return Ok(out);
        }
        let st = broadcast_strides(shape, &self.shape);
        let own = strides_of(&self.shape);
        for_each_offset(&self.shape, [&own, &st], |_, [os, ot]| {
            out.data[ot] += self.data[os];
        });
        Ok(out)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.broadcast_zip(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.broadcast_zip(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.broadcast_zip(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op: "add_assign",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        self.sum() / T::of(self.data.len() as f64)
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff: shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn permute(&self, axes: &[usize]) -> Result<Self> {
        let rank = self.shape.len();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::InvalidShape {
                op: "permute",
                detail: format!("axes {:?} invalid for shape {:?}", axes, self.shape),
            });
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| self.shape[a]).collect();
        let own = strides_of(&self.shape);
        let src_strides: Vec<usize> = axes.iter().map(|&a| own[a]).collect();
        let mut data = Vec::with_capacity(self.data.len());
        for_each_offset(&out_shape, [&src_strides], |_, [o]| data.push(self.data[o]));
        Ok(Self { shape: out_shape, data })
    }

    /// Cyclic shift: `out[.., (j + shift) mod n, ..] = self[.., j, ..]`.
    pub fn roll(&self, axis: usize, shift: isize) -> Result<Self> {
        if axis >= self.rank() {
            return Err(Error::InvalidShape {
                op: "roll",
                detail: format!("axis {axis} out of range for shape {:?}", self.shape),
            });
        }
        let n = self.shape[axis];
        let s = shift.rem_euclid(n as isize) as usize;
        if s == 0 {
            return Ok(self.clone());
        }
        let inner: usize = self.shape[axis + 1..].iter().product();
        let outer: usize = self.shape[..axis].iter().product();
        let mut data = vec![T::zero(); self.data.len()];
        for o in 0..outer {
            let base = o * n * inner;
            for j in 0..n {
                let dst = base + ((j + s) % n) * inner;
                let src = base + j * inner;
                data[dst..dst + inner].copy_from_slice(&self.data[src..src + inner]);
            }
        }
        Ok(Self {
            shape: self.shape.clone(),
            data,
        })
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Self> {
        if axis >= self.rank() || start + len > self.shape[axis] {
            return Err(Error::InvalidShape {
                op: "narrow",
                detail: format!("[{start}, {}) on axis {axis} of {:?}", start + len, self.shape),
            });
        }
        let n = self.shape[axis];
        let inner: usize = self.shape[axis + 1..].iter().product();
        let outer: usize = self.shape[..axis].iter().product();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * n + start) * inner;
            data.extend_from_slice(&self.data[from..from + len * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = len;
        Ok(Self { shape, data })
    }

    pub fn concat(parts: &[&Self], axis: usize) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        if axis >= first.rank() {
            return Err(Error::InvalidShape {
                op: "concat",
                detail: format!("axis {axis} out of range for shape {:?}", first.shape),
            });
        }
        for p in parts {
            let compatible = p.rank() == first.rank()
                && p.shape
                    .iter()
                    .zip(&first.shape)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first.shape.clone(),
                    rhs: p.shape.clone(),
                });
            }
        }
        let inner: usize = first.shape[axis + 1..].iter().product();
        let outer: usize = first.shape[..axis].iter().product();
        let total_axis: usize = parts.iter().map(|p| p.shape[axis]).sum();
        let mut data = Vec::with_capacity(outer * total_axis * inner);
        for o in 0..outer {
            for p in parts {
                let chunk = p.shape[axis] * inner;
                data.extend_from_slice(&p.data[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first.shape.clone();
        shape[axis] = total_axis;
        Ok(Self { shape, data })
    }

    /// Batched matrix product over the trailing two axes.
    ///
    /// `other` is either rank 2 (shared across every batch entry of `self`) or
    /// has exactly the same batch axes as `self`.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        matmul_ex(self, false, other, false)
    }
}

fn is_trailing(small: &[usize], big: &[usize]) -> bool {
    small.len() <= big.len() && small == &big[big.len() - small.len()..]
}

/// Matrix product with optional logical transposes of either operand's
/// trailing two axes. Used by the forward pass and by the matmul adjoint.
pub(crate) fn matmul_ex<T: Scalar>(a: &Tensor<T>, ta: bool, b: &Tensor<T>, tb: bool) -> Result<Tensor<T>> {
    let mismatch = || Error::ShapeMismatch {
        op: "matmul",
        lhs: a.shape.clone(),
        rhs: b.shape.clone(),
    };
    if a.rank() < 2 || b.rank() < 2 {
        return Err(mismatch());
    }
    let (ar, ac) = (a.shape[a.rank() - 2], a.shape[a.rank() - 1]);
    let (br, bc) = (b.shape[b.rank() - 2], b.shape[b.rank() - 1]);
    let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
    let (k2, n) = if tb { (bc, br) } else { (br, bc) };
    if k != k2 {
        return Err(mismatch());
    }
    let a_batch = &a.shape[..a.rank() - 2];
    let b_batch = &b.shape[..b.rank() - 2];
    let batch: usize = a_batch.iter().product();
    let b_shared = b_batch.is_empty();
    if !b_shared && a_batch != b_batch {
        return Err(mismatch());
    }
    let mut out_shape = a_batch.to_vec();
    out_shape.extend([m, n]);
    let mut out = vec![T::zero(); batch * m * n];

    let a_str = if ta { (1, m as isize) } else { (k as isize, 1) };
    let b_str = if tb { (1, k as isize) } else { (n as isize, 1) };
    if b_shared && !ta {
        // Fold the batch into the row dimension: one large product.
        gemm_dispatch(batch * m, k, n, &a.data, a_str, &b.data, b_str, &mut out, n);
    } else {
        let b_step = if b_shared { 0 } else { k * n };
        for i in 0..batch {
            gemm_dispatch(
                m,
                k,
                n,
                &a.data[i * m * k..(i + 1) * m * k],
                a_str,
                &b.data[i * b_step..i * b_step + k * n],
                b_str,
                &mut out[i * m * n..(i + 1) * m * n],
                n,
            );
        }
    }
    Tensor::new(out_shape, out)
}

/// Sums the per-batch products `aᵢᵀ·bᵢ` into one `[k, n]` matrix; the
/// adjoint of a matmul whose right operand is shared across the batch.
pub(crate) fn batched_at_b_sum<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = (a.shape[a.rank() - 2], a.shape[a.rank() - 1]);
    let n = b.shape[b.rank() - 1];
    let rows = a.numel() / k;
    if b.numel() / n != rows || b.shape[b.rank() - 2] != m {
        return Err(Error::ShapeMismatch {
            op: "matmul_backward",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let mut out = vec![T::zero(); k * n];
    gemm_dispatch(
        k,
        rows,
        n,
        &a.data,
        (1, k as isize),
        &b.data,
        (n as isize, 1),
        &mut out,
        n,
    );
    Tensor::new(vec![k, n], out)
}

const SMALL_GEMM: usize = 4096;

#[allow(clippy::too_many_arguments)]
fn gemm_dispatch<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    (ars, acs): (isize, isize),
    b: &[T],
    (brs, bcs): (isize, isize),
    c: &mut [T],
    ldc: usize,
) {
    if m * k * n <= SMALL_GEMM {
        for i in 0..m {
            let crow = &mut c[i * ldc..i * ldc + n];
            for p in 0..k {
                let av = a[(i as isize * ars + p as isize * acs) as usize];
                let boff = p as isize * brs;
                for (j, cv) in crow.iter_mut().enumerate() {
                    *cv += av * b[(boff + j as isize * bcs) as usize];
                }
            }
        }
    } else {
        T::gemm(m, k, n, a, (ars, acs), b, (brs, bcs), T::zero(), c, (ldc as isize, 1));
    }
}
