#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use searth::attention::{MsaParams, StageGeometry};
use searth::{Graph, Tensor};

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-scale..scale))
}

pub fn msa_params(g: &Graph, rng: &mut ChaCha8Rng, d: usize, nh: usize, rows: usize) -> MsaParams<f64> {
    MsaParams {
        qkv_weight: g.variable(rand_tensor(rng, &[d, 3 * d], 0.5)),
        qkv_bias: g.variable(rand_tensor(rng, &[3 * d], 0.5)),
        proj_weight: g.variable(rand_tensor(rng, &[d, d], 0.5)),
        proj_bias: g.variable(rand_tensor(rng, &[d], 0.5)),
        rel_bias: g.variable(rand_tensor(rng, &[rows, nh], 0.5)),
        n_heads: nh,
    }
}

/// Scalar-loop masked attention over every window of a channel-last field.
pub fn dense_reference(x: &Tensor<f64>, p: &MsaParams<f64>, geo: &StageGeometry<f64>, masked: bool) -> Tensor<f64> {
    let layout = geo.layout;
    let d = x.shape()[2];
    let nh = p.n_heads;
    let hd = d / nh;
    let (wq, bq) = (p.qkv_weight.value(), p.qkv_bias.value());
    let (wo, bo) = (p.proj_weight.value(), p.proj_bias.value());
    let t = layout.tokens();
    let mut out = Tensor::zeros(x.shape().to_vec());
    for win in 0..layout.num_windows() {
        let cells: Vec<(usize, usize)> = (0..t).map(|l| layout.cell(win, l)).collect();
        // qkv[token][j], j over 3d outputs
        let qkv: Vec<Vec<f64>> = cells
            .iter()
            .map(|&(i, j)| {
                (0..3 * d)
                    .map(|o| bq.data()[o] + (0..d).map(|c| x.get(&[i, j, c]) * wq.get(&[c, o])).sum::<f64>())
                    .collect()
            })
            .collect();
        let mut heads_out = vec![vec![0.0; d]; t];
        for h in 0..nh {
            for a in 0..t {
                let mut scores = vec![0.0; t];
                for b in 0..t {
                    let mut s = 0.0;
                    for e in 0..hd {
                        s += qkv[a][h * hd + e] * qkv[b][d + h * hd + e];
                    }
                    s /= (hd as f64).sqrt();
                    let (ra, ca) = (a / layout.win_w, a % layout.win_w);
                    let (rb, cb) = (b / layout.win_w, b % layout.win_w);
                    let row = (ra + layout.win_h - 1 - rb) * (2 * layout.win_w - 1) + (ca + layout.win_w - 1 - cb);
                    s += p.rel_bias.value().get(&[row, h]);
                    if masked {
                        s += geo.mask().entry(win, a, b);
                    }
                    scores[b] = s;
                }
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
                for b in 0..t {
                    let w = (scores[b] - m).exp() / z;
                    for e in 0..hd {
                        heads_out[a][h * hd + e] += w * qkv[b][2 * d + h * hd + e];
                    }
                }
            }
        }
        for (a, &(i, j)) in cells.iter().enumerate() {
            for o in 0..d {
                let v = bo.data()[o] + (0..d).map(|c| heads_out[a][c] * wo.get(&[c, o])).sum::<f64>();
                out.data_mut()[(i * layout.w + j) * d + o] = v;
            }
        }
    }
    out
}
