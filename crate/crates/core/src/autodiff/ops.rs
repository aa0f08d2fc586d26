use std::f64::consts::{FRAC_1_SQRT_2, PI};

use super::Var;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{batched_at_b_sum, matmul_ex, Tensor};

/// Output extent of an unpadded strided convolution.
pub fn conv_output_len(input: usize, kernel: usize, stride: usize) -> Option<usize> {
    (input >= kernel && stride > 0).then(|| (input - kernel) / stride + 1)
}

fn one<T: Scalar>(t: Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> {
    Ok(vec![Some(t)])
}

impl<T: Scalar> Var<T> {
    pub fn add(&self, other: &Var<T>) -> Result<Var<T>> {
        let out = self.value().add(other.value())?;
        Ok(Var::record(vec![self.clone(), other.clone()], out, |g, p, _| {
            Ok(vec![
                Some(g.sum_to_shape(p[0].shape())?),
                Some(g.sum_to_shape(p[1].shape())?),
            ])
        }))
    }

    pub fn sub(&self, other: &Var<T>) -> Result<Var<T>> {
        let out = self.value().sub(other.value())?;
        Ok(Var::record(vec![self.clone(), other.clone()], out, |g, p, _| {
            Ok(vec![
                Some(g.sum_to_shape(p[0].shape())?),
                Some(g.scale(-T::one()).sum_to_shape(p[1].shape())?),
            ])
        }))
    }

    pub fn mul(&self, other: &Var<T>) -> Result<Var<T>> {
        let out = self.value().mul(other.value())?;
        Ok(Var::record(vec![self.clone(), other.clone()], out, |g, p, _| {
            let ga = p[0]
                .requires_grad()
                .then(|| g.mul(p[1].value())?.sum_to_shape(p[0].shape()))
                .transpose()?;
            let gb = p[1]
                .requires_grad()
                .then(|| g.mul(p[0].value())?.sum_to_shape(p[1].shape()))
                .transpose()?;
            Ok(vec![ga, gb])
        }))
    }

    pub fn scale(&self, s: f64) -> Var<T> {
        let s = T::of(s);
        Var::record(
            vec![self.clone()],
            self.value().scale(s),
            move |g, _, _| one(g.scale(s)),
        )
    }

    pub fn abs(&self) -> Var<T> {
        Var::record(vec![self.clone()], self.value().map(T::abs), |g, p, _| {
            // d|x|/dx taken as 0 at the kink.
            let sign = p[0].value().map(|x| {
                if x > T::zero() {
                    T::one()
                } else if x < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                }
            });
            one(g.mul(&sign)?)
        })
    }

    /// Exact GELU, `x·Φ(x)`.
    pub fn gelu(&self) -> Var<T> {
        let half = T::of(0.5);
        let r2 = T::of(FRAC_1_SQRT_2);
        let out = self.value().map(|x| half * x * (T::one() + (x * r2).erf()));
        Var::record(vec![self.clone()], out, move |g, p, _| {
            let inv_sqrt_2pi = T::of(1.0 / (2.0 * PI).sqrt());
            let d = p[0].value().map(|x| {
                let cdf = half * (T::one() + (x * r2).erf());
                let pdf = inv_sqrt_2pi * (-half * x * x).exp();
                cdf + x * pdf
            });
            one(g.mul(&d)?)
        })
    }

    /// Softmax over the last axis.
    pub fn softmax(&self) -> Var<T> {
        let x = self.value();
        let n = *x.shape().last().unwrap_or(&1);
        let mut out = x.clone();
        for row in out.data_mut().chunks_mut(n) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        Var::record(vec![self.clone()], out, move |g, _, y| {
            let mut dx = g.clone();
            for (dr, yr) in dx.data_mut().chunks_mut(n).zip(y.data().chunks(n)) {
                let dot: T = dr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                for (d, &yy) in dr.iter_mut().zip(yr) {
                    *d = yy * (*d - dot);
                }
            }
            one(dx)
        })
    }

    /// Layer normalization over the last axis with learnable `gain` and `bias`
    /// (both shaped like that axis).
    pub fn layer_norm(&self, gain: &Var<T>, bias: &Var<T>, eps: f64) -> Result<Var<T>> {
        let d = *self.shape().last().unwrap_or(&0);
        if gain.shape() != [d] || bias.shape() != [d] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: self.shape().to_vec(),
                rhs: gain.shape().to_vec(),
            });
        }
        let eps = T::of(eps);
        let (xhat, _) = normalize_rows(self.value(), d, eps);
        let mut out = xhat;
        for row in out.data_mut().chunks_mut(d) {
            for ((v, &gn), &b) in row.iter_mut().zip(gain.value().data()).zip(bias.value().data()) {
                *v = *v * gn + b;
            }
        }
        let parents = vec![self.clone(), gain.clone(), bias.clone()];
        Ok(Var::record(parents, out, move |g, p, _| {
            let (xhat, rstd) = normalize_rows(p[0].value(), d, eps);
            let gain = p[1].value().data();
            let mut dgain = vec![T::zero(); d];
            let mut dbias = vec![T::zero(); d];
            let mut dx = Tensor::zeros(p[0].shape().to_vec());
            let inv_d = T::of(1.0 / d as f64);
            for (r, ((gr, xr), dxr)) in g
                .data()
                .chunks(d)
                .zip(xhat.data().chunks(d))
                .zip(dx.data_mut().chunks_mut(d))
                .enumerate()
            {
                let mut mean_dxhat = T::zero();
                let mut mean_dxhat_xhat = T::zero();
                for i in 0..d {
                    dgain[i] += gr[i] * xr[i];
                    dbias[i] += gr[i];
                    let dxh = gr[i] * gain[i];
                    mean_dxhat += dxh;
                    mean_dxhat_xhat += dxh * xr[i];
                }
                mean_dxhat *= inv_d;
                mean_dxhat_xhat *= inv_d;
                for i in 0..d {
                    let dxh = gr[i] * gain[i];
                    dxr[i] = rstd[r] * (dxh - mean_dxhat - xr[i] * mean_dxhat_xhat);
                }
            }
            Ok(vec![
                Some(dx),
                Some(Tensor::new(vec![d], dgain)?),
                Some(Tensor::new(vec![d], dbias)?),
            ])
        }))
    }

    /// Batched matrix product over the trailing two axes; a rank-2 right
    /// operand is shared across the batch.
    pub fn matmul(&self, other: &Var<T>) -> Result<Var<T>> {
        let out = self.value().matmul(other.value())?;
        let shared = other.value().rank() == 2;
        Ok(Var::record(vec![self.clone(), other.clone()], out, move |g, p, _| {
            let (a, b) = (p[0].value(), p[1].value());
            let ga = p[0].requires_grad().then(|| matmul_ex(g, false, b, true)).transpose()?;
            let gb = if !p[1].requires_grad() {
                None
            } else if shared {
                Some(batched_at_b_sum(a, g)?)
            } else {
                Some(matmul_ex(a, true, g, false)?)
            };
            Ok(vec![ga, gb])
        }))
    }

    /// Affine map over the last axis: `x·w + b`, `w` shaped `[in, out]`.
    pub fn linear(&self, weight: &Var<T>, bias: &Var<T>) -> Result<Var<T>> {
        self.matmul(weight)?.add(bias)
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Var<T>> {
        let out = self.value().clone().reshape(shape)?;
        Ok(Var::record(vec![self.clone()], out, |g, p, _| {
            one(g.clone().reshape(p[0].shape().to_vec())?)
        }))
    }

    pub fn permute(&self, axes: &[usize]) -> Result<Var<T>> {
        let out = self.value().permute(axes)?;
        let mut inverse = vec![0; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        Ok(Var::record(vec![self.clone()], out, move |g, _, _| {
            one(g.permute(&inverse)?)
        }))
    }

    pub fn transpose_last(&self) -> Result<Var<T>> {
        let r = self.shape().len();
        if r < 2 {
            return Err(Error::InvalidShape {
                op: "transpose_last",
                detail: format!("rank {r} < 2"),
            });
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(&axes)
    }

    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Var<T>> {
        let out = self.value().narrow(axis, start, len)?;
        Ok(Var::record(vec![self.clone()], out, move |g, p, _| {
            let shape = p[0].shape();
            let n = shape[axis];
            let inner: usize = shape[axis + 1..].iter().product();
            let outer: usize = shape[..axis].iter().product();
            let mut dx = Tensor::zeros(shape.to_vec());
            let chunk = len * inner;
            for o in 0..outer {
                let to = (o * n + start) * inner;
                dx.data_mut()[to..to + chunk].copy_from_slice(&g.data()[o * chunk..(o + 1) * chunk]);
            }
            one(dx)
        }))
    }

    pub fn concat(parts: &[Var<T>], axis: usize) -> Result<Var<T>> {
        let values: Vec<&Tensor<T>> = parts.iter().map(Var::value).collect();
        let out = Tensor::concat(&values, axis)?;
        let sizes: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        Ok(Var::record(parts.to_vec(), out, move |g, _, _| {
            let mut start = 0;
            sizes
                .iter()
                .map(|&len| {
                    let piece = g.narrow(axis, start, len);
                    start += len;
                    piece.map(Some)
                })
                .collect()
        }))
    }

    /// Cyclic shift along `axis`; see [`Tensor::roll`].
    pub fn roll(&self, axis: usize, shift: isize) -> Result<Var<T>> {
        let out = self.value().roll(axis, shift)?;
        Ok(Var::record(vec![self.clone()], out, move |g, _, _| {
            one(g.roll(axis, -shift)?)
        }))
    }

    pub fn sum(&self) -> Var<T> {
        let out = Tensor::scalar(self.value().sum());
        Var::record(vec![self.clone()], out, |g, p, _| {
            one(Tensor::full(p[0].shape().to_vec(), g.item()))
        })
    }

    pub fn mean(&self) -> Var<T> {
        let n = self.value().numel() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Rows of a `[rows, cols]` table selected by `indices` → `[indices.len(), cols]`.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Var<T>> {
        let shape = self.shape();
        if shape.len() != 2 || indices.iter().any(|&i| i >= shape[0]) {
            return Err(Error::InvalidShape {
                op: "gather_rows",
                detail: format!("table {:?} with index up to {:?}", shape, indices.iter().max()),
            });
        }
        let cols = shape[1];
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            data.extend_from_slice(&self.value().data()[i * cols..(i + 1) * cols]);
        }
        let out = Tensor::new(vec![indices.len(), cols], data)?;
        let indices = indices.to_vec();
        Ok(Var::record(vec![self.clone()], out, move |g, p, _| {
            let mut dt = Tensor::zeros(p[0].shape().to_vec());
            for (r, &i) in indices.iter().enumerate() {
                for c in 0..cols {
                    dt.data_mut()[i * cols + c] += g.data()[r * cols + c];
                }
            }
            one(dt)
        }))
    }

    /// Unpadded strided 3-D convolution.
    ///
    /// `self`: `[c_in, d, h, w]`; `weight`: `[c_out, c_in, kd, kh, kw]`;
    /// `bias`: `[c_out]`. Output `[c_out, d', h', w']`.
    pub fn conv3d(&self, weight: &Var<T>, bias: &Var<T>, stride: [usize; 3]) -> Result<Var<T>> {
        let geo = Conv3dGeometry::new(self.shape(), weight.shape(), bias.shape(), stride)?;
        let cols = im2col3d(self.value().data(), &geo);
        let w_flat = weight.value().clone().reshape(vec![geo.c_out, geo.patch])?;
        // [c_out, patch] · [positions, patch]ᵀ
        let mut out = matmul_ex(&w_flat, false, &cols, true)?;
        add_channel_bias(&mut out, bias.value());
        let out = out.reshape(vec![geo.c_out, geo.out[0], geo.out[1], geo.out[2]])?;
        let parents = vec![self.clone(), weight.clone(), bias.clone()];
        Ok(Var::record(parents, out, move |g, p, _| {
            let g2 = g.clone().reshape(vec![geo.c_out, geo.positions])?;
            let gx = if p[0].requires_grad() {
                let w_flat = p[1].value().clone().reshape(vec![geo.c_out, geo.patch])?;
                let dcols = matmul_ex(&g2, true, &w_flat, false)?;
                Some(col2im3d(&dcols, &geo, p[0].shape())?)
            } else {
                None
            };
            let gw = if p[1].requires_grad() {
                let cols = im2col3d(p[0].value().data(), &geo);
                Some(g2.matmul(&cols)?.reshape(p[1].shape().to_vec())?)
            } else {
                None
            };
            let gb = p[2].requires_grad().then(|| channel_sums(&g2));
            Ok(vec![gx, gw, gb])
        }))
    }

    /// Unpadded strided 2-D transposed convolution.
    ///
    /// `self`: `[c_in, h, w]`; `weight`: `[c_in, c_out, kh, kw]`; `bias`:
    /// `[c_out]`. Output `[c_out, (h−1)·sh + kh, (w−1)·sw + kw]`.
    pub fn conv_transpose2d(&self, weight: &Var<T>, bias: &Var<T>, stride: [usize; 2]) -> Result<Var<T>> {
        let geo = ConvT2dGeometry::new(self.shape(), weight.shape(), bias.shape(), stride)?;
        let x_flat = self.value().clone().reshape(vec![geo.c_in, geo.positions])?;
        let w_flat = weight.value().clone().reshape(vec![geo.c_in, geo.patch])?;
        // [patch, positions] contributions scattered into the output canvas.
        let cols = matmul_ex(&w_flat, true, &x_flat, false)?;
        let mut out = scatter_convt(&cols, &geo);
        let mut out2 = out.clone().reshape(vec![geo.c_out, geo.out[0] * geo.out[1]])?;
        add_channel_bias(&mut out2, bias.value());
        out = out2.reshape(vec![geo.c_out, geo.out[0], geo.out[1]])?;
        let parents = vec![self.clone(), weight.clone(), bias.clone()];
        Ok(Var::record(parents, out, move |g, p, _| {
            let dcols = gather_convt(g, &geo);
            let gx = if p[0].requires_grad() {
                let w_flat = p[1].value().clone().reshape(vec![geo.c_in, geo.patch])?;
                Some(w_flat.matmul(&dcols)?.reshape(p[0].shape().to_vec())?)
            } else {
                None
            };
            let gw = if p[1].requires_grad() {
                let x_flat = p[0].value().clone().reshape(vec![geo.c_in, geo.positions])?;
                Some(matmul_ex(&x_flat, false, &dcols, true)?.reshape(p[1].shape().to_vec())?)
            } else {
                None
            };
            let gb = if p[2].requires_grad() {
                Some(channel_sums(
                    &g.clone().reshape(vec![geo.c_out, geo.out[0] * geo.out[1]])?,
                ))
            } else {
                None
            };
            Ok(vec![gx, gw, gb])
        }))
    }
}

fn normalize_rows<T: Scalar>(x: &Tensor<T>, d: usize, eps: T) -> (Tensor<T>, Vec<T>) {
    let mut out = x.clone();
    let inv_d = T::of(1.0 / d as f64);
    let mut rstds = Vec::with_capacity(x.numel() / d.max(1));
    for row in out.data_mut().chunks_mut(d) {
        let mean = row.iter().copied().sum::<T>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let rstd = T::one() / (var + eps).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) * rstd;
        }
        rstds.push(rstd);
    }
    (out, rstds)
}

fn add_channel_bias<T: Scalar>(out: &mut Tensor<T>, bias: &Tensor<T>) {
    let per = out.numel() / bias.numel();
    for (row, &b) in out.data_mut().chunks_mut(per).zip(bias.data()) {
        for v in row {
            *v += b;
        }
    }
}

fn channel_sums<T: Scalar>(g: &Tensor<T>) -> Tensor<T> {
    let c = g.shape()[0];
    let per = g.numel() / c;
    Tensor::from_fn(vec![c], |i| g.data()[i * per..(i + 1) * per].iter().copied().sum())
}

#[derive(Debug, Clone, Copy)]
struct Conv3dGeometry {
    c_in: usize,
    c_out: usize,
    input: [usize; 3],
    kernel: [usize; 3],
    stride: [usize; 3],
    out: [usize; 3],
    patch: usize,
    positions: usize,
}

impl Conv3dGeometry {
    fn new(x: &[usize], w: &[usize], b: &[usize], stride: [usize; 3]) -> Result<Self> {
        let bad = || Error::ShapeMismatch {
            op: "conv3d",
            lhs: x.to_vec(),
            rhs: w.to_vec(),
        };
        if x.len() != 4 || w.len() != 5 || w[1] != x[0] || b != [w[0]] {
            return Err(bad());
        }
        let input = [x[1], x[2], x[3]];
        let kernel = [w[2], w[3], w[4]];
        let mut out = [0; 3];
        for i in 0..3 {
            out[i] = conv_output_len(input[i], kernel[i], stride[i]).ok_or_else(bad)?;
        }
        Ok(Self {
            c_in: x[0],
            c_out: w[0],
            input,
            kernel,
            stride,
            out,
            patch: x[0] * kernel.iter().product::<usize>(),
            positions: out.iter().product(),
        })
    }

    /// For every (output position, patch entry) the flat input offset.
    fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        let [d, h, w] = self.input;
        let [kd, kh, kw] = self.kernel;
        let [sd, sh, sw] = self.stride;
        let [od, oh, ow] = self.out;
        for z in 0..od {
            for y in 0..oh {
                for x in 0..ow {
                    let pos = (z * oh + y) * ow + x;
                    let mut k = 0;
                    for c in 0..self.c_in {
                        for a in 0..kd {
                            for bb in 0..kh {
                                let base = ((c * d + z * sd + a) * h + y * sh + bb) * w + x * sw;
                                for e in 0..kw {
                                    f(pos, k, base + e);
                                    k += 1;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn im2col3d<T: Scalar>(x: &[T], geo: &Conv3dGeometry) -> Tensor<T> {
    let mut cols = vec![T::zero(); geo.positions * geo.patch];
    geo.for_each(|pos, k, src| cols[pos * geo.patch + k] = x[src]);
    Tensor::new(vec![geo.positions, geo.patch], cols).expect("im2col extent")
}

fn col2im3d<T: Scalar>(cols: &Tensor<T>, geo: &Conv3dGeometry, shape: &[usize]) -> Result<Tensor<T>> {
    let mut dx = Tensor::zeros(shape.to_vec());
    let data = dx.data_mut();
    geo.for_each(|pos, k, dst| data[dst] += cols.data()[pos * geo.patch + k]);
    Ok(dx)
}

#[derive(Debug, Clone, Copy)]
struct ConvT2dGeometry {
    c_in: usize,
    c_out: usize,
    input: [usize; 2],
    kernel: [usize; 2],
    stride: [usize; 2],
    out: [usize; 2],
    patch: usize,
    positions: usize,
}

impl ConvT2dGeometry {
    fn new(x: &[usize], w: &[usize], b: &[usize], stride: [usize; 2]) -> Result<Self> {
        if x.len() != 3 || w.len() != 4 || w[0] != x[0] || b != [w[1]] || stride.contains(&0) {
            return Err(Error::ShapeMismatch {
                op: "conv_transpose2d",
                lhs: x.to_vec(),
                rhs: w.to_vec(),
            });
        }
        let input = [x[1], x[2]];
        let kernel = [w[2], w[3]];
        let out = [
            (input[0] - 1) * stride[0] + kernel[0],
            (input[1] - 1) * stride[1] + kernel[1],
        ];
        Ok(Self {
            c_in: x[0],
            c_out: w[1],
            input,
            kernel,
            stride,
            out,
            patch: w[1] * kernel[0] * kernel[1],
            positions: input[0] * input[1],
        })
    }

    /// For every (patch row (c_out, a, b), input position) the flat output offset.
    fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        let [h, w] = self.input;
        let [kh, kw] = self.kernel;
        let [sh, sw] = self.stride;
        let [oh, ow] = self.out;
        for co in 0..self.c_out {
            for a in 0..kh {
                for b in 0..kw {
                    let row = (co * kh + a) * kw + b;
                    for i in 0..h {
                        for j in 0..w {
                            f(row, i * w + j, (co * oh + i * sh + a) * ow + j * sw + b);
                        }
                    }
                }
            }
        }
    }
}

fn scatter_convt<T: Scalar>(cols: &Tensor<T>, geo: &ConvT2dGeometry) -> Tensor<T> {
    let mut out = Tensor::zeros(vec![geo.c_out, geo.out[0], geo.out[1]]);
    let data = out.data_mut();
    geo.for_each(|row, pos, dst| data[dst] += cols.data()[row * geo.positions + pos]);
    out
}

fn gather_convt<T: Scalar>(g: &Tensor<T>, geo: &ConvT2dGeometry) -> Tensor<T> {
    let mut cols = vec![T::zero(); geo.patch * geo.positions];
    geo.for_each(|row, pos, src| cols[row * geo.positions + pos] = g.data()[src]);
    Tensor::new(vec![geo.patch, geo.positions], cols).expect("convt extent")
}

#[cfg(test)]
mod tests {
    use super::super::{backward, grad_check, Graph};
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
    }

    /// Fixed random projection so that every output coordinate matters.
    fn weighted_sum(y: &Var<f64>, seed: u64) -> Result<Var<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = rand_tensor(&mut rng, y.shape());
        Ok(y.mul(&y.graph().constant(w))?.sum())
    }

    const TOL: f64 = 1e-4;

    fn check(name: &str, shape: &[usize], f: impl Fn(&Var<f64>) -> Result<Var<f64>>) {
        for seed in 0..10u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let x = rand_tensor(&mut rng, shape);
            let err = grad_check(|v| weighted_sum(&f(v)?, seed), &x, 1e-5).unwrap();
            assert!(err <= TOL, "{name}: seed {seed}: rel err {err}");
        }
    }

    fn constant(shape: &[usize], seed: u64) -> impl Fn(&Var<f64>) -> Var<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = rand_tensor(&mut rng, shape);
        move |v: &Var<f64>| v.graph().constant(t.clone())
    }

    #[test]
    fn gradcheck_elementwise() {
        let c = constant(&[3, 4], 1);
        check("add", &[3, 4], |x| x.add(&c(x)));
        check("sub", &[3, 4], |x| c(x).sub(x));
        check("mul", &[3, 4], |x| x.mul(&c(x)));
        check("scale", &[3, 4], |x| Ok(x.scale(-2.5)));
        check("abs", &[3, 4], |x| Ok(x.abs()));
        check("gelu", &[3, 4], |x| Ok(x.gelu()));
        let row = constant(&[4], 2);
        check("broadcast add lhs", &[3, 4], |x| x.add(&row(x)));
        let big = constant(&[2, 3, 4], 3);
        check("broadcast add rhs", &[3, 1], |x| big(x).add(x));
        check("broadcast mul rhs", &[1, 4], |x| big(x).mul(x));
    }

    #[test]
    fn gradcheck_softmax_and_layer_norm() {
        check("softmax", &[2, 5], |x| Ok(x.softmax()));
        let gain = constant(&[6], 4);
        let bias = constant(&[6], 5);
        check("layer_norm x", &[3, 6], |x| x.layer_norm(&gain(x), &bias(x), 1e-5));
        let xin = constant(&[3, 6], 6);
        check("layer_norm gain", &[6], |g| xin(g).layer_norm(g, &bias(g), 1e-5));
        check("layer_norm bias", &[6], |b| xin(b).layer_norm(&gain(b), b, 1e-5));
    }

    #[test]
    fn gradcheck_matmul() {
        let w = constant(&[4, 3], 7);
        check("matmul lhs shared", &[2, 5, 4], |x| x.matmul(&w(x)));
        let a = constant(&[2, 5, 4], 8);
        check("matmul rhs shared", &[4, 3], |x| a(x).matmul(x));
        let bb = constant(&[2, 4, 3], 9);
        check("matmul batched lhs", &[2, 5, 4], |x| x.matmul(&bb(x)));
        check("matmul batched rhs", &[2, 4, 3], |x| a(x).matmul(x));
        let bias = constant(&[3], 10);
        check("linear", &[5, 4], |x| x.linear(&w(x), &bias(x)));
        // Sizes large enough to take the blocked gemm route.
        let wl = constant(&[24, 20], 11);
        check("matmul large", &[30, 24], |x| x.matmul(&wl(x)));
    }

    #[test]
    fn gradcheck_structural() {
        check("reshape", &[2, 6], |x| x.reshape([3, 4]));
        check("permute", &[2, 3, 4], |x| x.permute(&[2, 0, 1]));
        check("transpose", &[2, 3, 4], |x| x.transpose_last());
        check("narrow", &[4, 5], |x| x.narrow(1, 1, 3));
        check("roll", &[4, 5], |x| x.roll(1, 2));
        check("roll negative", &[4, 5], |x| x.roll(0, -3));
        let c = constant(&[4, 2], 12);
        check("concat", &[4, 3], |x| Var::concat(&[x.clone(), c(x)], 1));
        check("sum", &[3, 3], |x| Ok(x.sum()));
        check("mean", &[3, 3], |x| Ok(x.mean()));
        check("gather_rows", &[5, 2], |x| x.gather_rows(&[4, 0, 4, 2, 1, 1]));
    }

    #[test]
    fn gradcheck_convolutions() {
        let w = constant(&[3, 2, 2, 2, 2], 13);
        let b = constant(&[3], 14);
        check("conv3d x", &[2, 2, 4, 6], |x| x.conv3d(&w(x), &b(x), [2, 2, 2]));
        let xin = constant(&[2, 3, 5, 5], 15);
        check("conv3d w overlapping", &[3, 2, 2, 2, 2], |wv| {
            xin(wv).conv3d(wv, &b(wv), [1, 2, 1])
        });
        check("conv3d b", &[3], |bv| xin(bv).conv3d(&w(bv), bv, [1, 1, 1]));

        let wt = constant(&[3, 2, 2, 3], 16);
        let bt = constant(&[2], 17);
        check("convT x", &[3, 3, 4], |x| x.conv_transpose2d(&wt(x), &bt(x), [2, 2]));
        let xt = constant(&[3, 3, 4], 18);
        check("convT w overlapping", &[3, 2, 2, 3], |wv| {
            xt(wv).conv_transpose2d(wv, &bt(wv), [1, 2])
        });
        check("convT b", &[2], |bv| xt(bv).conv_transpose2d(&wt(bv), bv, [2, 2]));
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let g = Graph::new();
        let x = g.constant(Tensor::<f64>::zeros([3]));
        for v in x.softmax().value().data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_sum_has_zero_gradient() {
        let g = Graph::new();
        let x = g.variable(Tensor::<f64>::from_fn([2, 4], |i| i as f64 * 0.3 - 1.0));
        let grads = backward(x.softmax().sum()).unwrap();
        assert!(grads.get(&x).unwrap().data().iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn roll_gradient_is_inverse_roll() {
        let g = Graph::new();
        let x = g.variable(Tensor::<f64>::from_fn([6], |i| i as f64));
        let w = Tensor::<f64>::from_fn([6], |i| (i * i) as f64);
        let loss = x.roll(0, 2).unwrap().mul(&g.constant(w.clone())).unwrap().sum();
        let grads = backward(loss).unwrap();
        assert_eq!(grads.get(&x).unwrap(), &w.roll(0, -2).unwrap());
    }

    #[test]
    fn conv3d_matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&mut rng, &[2, 2, 4, 4]);
        let w = rand_tensor(&mut rng, &[3, 2, 2, 2, 2]);
        let b = rand_tensor(&mut rng, &[3]);
        let g = Graph::new();
        let y = g
            .constant(x.clone())
            .conv3d(&g.constant(w.clone()), &g.constant(b.clone()), [2, 2, 2])
            .unwrap();
        assert_eq!(y.shape(), &[3, 1, 2, 2]);
        for co in 0..3 {
            for i in 0..2 {
                for j in 0..2 {
                    let mut s = b.data()[co];
                    for ci in 0..2 {
                        for a in 0..2 {
                            for p in 0..2 {
                                for q in 0..2 {
                                    s += w.get(&[co, ci, a, p, q]) * x.get(&[ci, a, 2 * i + p, 2 * j + q]);
                                }
                            }
                        }
                    }
                    assert!((y.value().get(&[co, 0, i, j]) - s).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn conv_transpose_matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_tensor(&mut rng, &[3, 2, 3]);
        let w = rand_tensor(&mut rng, &[3, 2, 2, 2]);
        let b = rand_tensor(&mut rng, &[2]);
        let g = Graph::new();
        let y = g
            .constant(x.clone())
            .conv_transpose2d(&g.constant(w.clone()), &g.constant(b.clone()), [2, 2])
            .unwrap();
        assert_eq!(y.shape(), &[2, 4, 6]);
        for co in 0..2 {
            for oy in 0..4 {
                for ox in 0..6 {
                    let (i, a, j, q) = (oy / 2, oy % 2, ox / 2, ox % 2);
                    let mut s = b.data()[co];
                    for ci in 0..3 {
                        s += x.get(&[ci, i, j]) * w.get(&[ci, co, a, q]);
                    }
                    assert!((y.value().get(&[co, oy, ox]) - s).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn shape_errors_name_the_op() {
        let g = Graph::new();
        let a = g.constant(Tensor::<f64>::zeros([2, 3]));
        let b = g.constant(Tensor::<f64>::zeros([4, 5]));
        let err = a.matmul(&b).unwrap_err().to_string();
        assert!(
            err.contains("matmul") && err.contains("[2, 3]") && err.contains("[4, 5]"),
            "{err}"
        );
        assert!(a.add(&b).is_err());
    }
}
