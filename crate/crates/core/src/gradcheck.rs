//! Finite-difference checks of every differentiable primitive and of the
//! full forecaster, as run by `searth gradcheck`.

use std::collections::HashMap;

use rand::Rng;

use crate::autodiff::{grad_check_coords, GradCheck, Var};
use crate::error::Result;
use crate::geometry::{earth_attention_mask, MaskMode};
use crate::model::{BoundModel, Model, ModelConfig};
use crate::rng::{StreamRng, Streams};
use crate::tensor::Tensor;
use crate::training::weighted_mae_loss;

/// Step used by every check.
pub const EPS: f64 = 1e-5;

fn uniform(rng: &mut StreamRng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

/// Random contraction weights `R` of `Σ op(x)·R`, so every output element
/// reaches the scalar.
fn probe(rng: &mut StreamRng, out_shape: &[usize]) -> Tensor<f64> {
    uniform(rng, out_shape)
}

type Primitive = Box<dyn Fn(&Var<f64>) -> Result<Var<f64>>>;

fn contract(op: impl Fn(&Var<f64>) -> Result<Var<f64>> + 'static, weights: Tensor<f64>) -> Primitive {
    Box::new(move |x: &Var<f64>| {
        let y = op(x)?;
        let g = x.graph();
        y.mul(&g.constant(weights.clone())).map(|v| v.sum())
    })
}

/// Named `(function, input)` pairs covering each primitive.
fn primitives(seed: u64) -> Vec<(&'static str, Primitive, Tensor<f64>)> {
    let mut rng = Streams::new(seed).stream("gradcheck");
    let r = &mut rng;
    let mut out: Vec<(&'static str, Primitive, Tensor<f64>)> = Vec::new();

    let other = uniform(r, &[3, 4]);
    let (o1, o2, o3) = (other.clone(), other.clone(), uniform(r, &[4]));
    out.push((
        "add",
        contract(move |x| x.add(&x.graph().constant(o1.clone())), probe(r, &[3, 4])),
        uniform(r, &[3, 4]),
    ));
    out.push((
        "sub",
        contract(move |x| x.graph().constant(o2.clone()).sub(x), probe(r, &[3, 4])),
        uniform(r, &[3, 4]),
    ));
    out.push((
        "mul_broadcast",
        contract(move |x| x.mul(&x.graph().constant(o3.clone())), probe(r, &[3, 4])),
        uniform(r, &[3, 4]),
    ));
    out.push(("mul_self", contract(|x| x.mul(x), probe(r, &[5])), uniform(r, &[5])));
    out.push((
        "scale",
        contract(|x| Ok(x.scale(-2.5)), probe(r, &[6])),
        uniform(r, &[6]),
    ));
    // Keep inputs away from the kink at zero.
    let abs_in = Tensor::from_fn(vec![8], |i| {
        if i % 2 == 0 {
            0.3 + i as f64 * 0.1
        } else {
            -0.2 - i as f64 * 0.1
        }
    });
    out.push(("abs", contract(|x| Ok(x.abs()), probe(r, &[8])), abs_in));
    out.push((
        "gelu",
        contract(|x| Ok(x.gelu()), probe(r, &[2, 5])),
        uniform(r, &[2, 5]).map(|v| 2.0 * v),
    ));
    out.push((
        "softmax",
        contract(|x| Ok(x.softmax()), probe(r, &[3, 5])),
        uniform(r, &[3, 5]),
    ));
    let (gain, bias) = (uniform(r, &[5]), uniform(r, &[5]));
    out.push((
        "layer_norm",
        contract(
            move |x| {
                let g = x.graph();
                x.layer_norm(&g.constant(gain.clone()), &g.constant(bias.clone()), 1e-5)
            },
            probe(r, &[3, 5]),
        ),
        uniform(r, &[3, 5]),
    ));
    let rhs = uniform(r, &[2, 4, 3]);
    out.push((
        "matmul_batched",
        contract(
            move |x| x.matmul(&x.graph().constant(rhs.clone())),
            probe(r, &[2, 5, 3]),
        ),
        uniform(r, &[2, 5, 4]),
    ));
    let lhs = uniform(r, &[2, 5, 4]);
    out.push((
        "matmul_rhs",
        contract(move |x| x.graph().constant(lhs.clone()).matmul(x), probe(r, &[2, 5, 3])),
        uniform(r, &[2, 4, 3]),
    ));
    let b = uniform(r, &[3]);
    out.push((
        "linear",
        contract(
            move |x| {
                let g = x.graph();
                g.constant(Tensor::from_fn(vec![2, 4], |i| (i as f64 * 0.37).sin()))
                    .linear(&x.reshape(vec![4, 3])?, &g.constant(b.clone()))
            },
            probe(r, &[2, 3]),
        ),
        uniform(r, &[12]),
    ));
    out.push((
        "reshape",
        contract(|x| x.reshape(vec![3, 4]), probe(r, &[3, 4])),
        uniform(r, &[2, 6]),
    ));
    out.push((
        "permute",
        contract(|x| x.permute(&[2, 0, 1]), probe(r, &[4, 2, 3])),
        uniform(r, &[2, 3, 4]),
    ));
    out.push((
        "transpose_last",
        contract(|x| x.transpose_last(), probe(r, &[2, 4, 3])),
        uniform(r, &[2, 3, 4]),
    ));
    out.push((
        "narrow",
        contract(|x| x.narrow(1, 1, 2), probe(r, &[3, 2])),
        uniform(r, &[3, 4]),
    ));
    let tail = uniform(r, &[2, 2]);
    out.push((
        "concat",
        contract(
            move |x| Var::concat(&[x.clone(), x.graph().constant(tail.clone()), x.scale(2.0)], 1),
            probe(r, &[2, 8]),
        ),
        uniform(r, &[2, 3]),
    ));
    out.push((
        "roll",
        contract(|x| x.roll(1, -3), probe(r, &[2, 5])),
        uniform(r, &[2, 5]),
    ));
    out.push(("sum", Box::new(|x: &Var<f64>| Ok(x.mul(x)?.sum())), uniform(r, &[7])));
    out.push(("mean", Box::new(|x: &Var<f64>| Ok(x.mul(x)?.mean())), uniform(r, &[7])));
    out.push((
        "gather_rows",
        contract(|x| x.gather_rows(&[2, 0, 2, 1]), probe(r, &[4, 3])),
        uniform(r, &[3, 3]),
    ));
    let (cw, cb) = (uniform(r, &[3, 2, 2, 2, 2]), uniform(r, &[3]));
    out.push((
        "conv3d",
        contract(
            move |x| {
                let g = x.graph();
                x.conv3d(&g.constant(cw.clone()), &g.constant(cb.clone()), [2, 2, 2])
            },
            probe(r, &[3, 1, 2, 3]),
        ),
        uniform(r, &[2, 2, 4, 6]),
    ));
    let (tw, tb) = (uniform(r, &[3, 2, 2, 2]), uniform(r, &[2]));
    out.push((
        "conv_transpose2d",
        contract(
            move |x| {
                let g = x.graph();
                x.conv_transpose2d(&g.constant(tw.clone()), &g.constant(tb.clone()), [2, 2])
            },
            probe(r, &[2, 4, 6]),
        ),
        uniform(r, &[3, 2, 3]),
    ));
    let mask = earth_attention_mask(4, 4, 2, 2, 1, 1, MaskMode::Planar)
        .expect("valid geometry")
        .to_tensor::<f64>();
    out.push((
        "mask_broadcast_add",
        contract(
            move |x| Ok(x.add(&x.graph().constant(mask.clone()))?.softmax()),
            probe(r, &[4, 2, 4, 4]),
        ),
        uniform(r, &[4, 2, 4, 4]),
    ));
    out
}

/// Maximum relative error of each primitive, in a fixed order.
pub fn primitive_suite(seed: u64) -> Result<Vec<(String, f64)>> {
    primitives(seed)
        .into_iter()
        .map(|(name, f, x)| Ok((name.to_string(), grad_check_coords(f, &x, EPS, None)?.max_rel_error)))
        .collect()
}

/// Gradient check of one-step weighted-MAE loss with respect to the flat
/// parameter vector of `config` (random parameters and fields), at
/// `samples` random coordinates or all of them.
pub fn model_gradcheck(config: &ModelConfig, samples: Option<usize>, seed: u64) -> Result<GradCheck> {
    let model = Model::<f64>::random(config.clone(), seed, 1.0)?;
    let mut rng = Streams::new(seed).stream("gradcheck-fields");
    let shape = [config.n_channels, config.n_lat, config.n_lon];
    let (a, b, y) = (
        uniform(&mut rng, &shape),
        uniform(&mut rng, &shape),
        uniform(&mut rng, &shape),
    );
    let weights = crate::geometry::LatLonGrid::cell_centered(config.n_lat, config.n_lon)?.weights();
    let n = model.param_count();
    let flat = Tensor::new(vec![n], model.params.flatten())?;
    let layout = config.param_layout();
    let cfg = config.clone();
    let f = move |theta: &Var<f64>| -> Result<Var<f64>> {
        let g = theta.graph();
        let mut vars = HashMap::with_capacity(layout.len());
        let mut at = 0;
        for (name, shape) in &layout {
            let len: usize = shape.iter().product();
            vars.insert(name.clone(), theta.narrow(0, at, len)?.reshape(shape.clone())?);
            at += len;
        }
        let bound = BoundModel::new(&cfg, g.clone(), vars)?;
        let pred = bound.forward_step(&g.constant(a.clone()), &g.constant(b.clone()), None)?;
        weighted_mae_loss(&[pred], std::slice::from_ref(&y), &weights)
    };
    let coords: Option<Vec<usize>> = samples.map(|k| (0..k).map(|_| rng.random_range(0..n)).collect());
    grad_check_coords(f, &flat, EPS, coords.as_deref())
}
