//! Loop-level reference implementations shared by unit and integration tests.
//!
//! Nothing here touches the tape; every function works on plain buffers with
//! the most direct index arithmetic available.
#![allow(dead_code)]

use rand::Rng;
use super::Tensor;

/// Uniform entries in `[-1, 1)`.
pub fn rand_tensor<R: Rng>(shape: &[usize], rng: &mut R) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// ‖a − b‖ / max(‖a‖, ‖b‖), or the absolute error when both are tiny.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale < 1e-10 {
        diff
    } else {
        diff / scale
    }
}

pub fn matmul_oracle(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let (p, q, r) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; p * r];
    for i in 0..p {
        for j in 0..r {
            let mut s = 0.0;
            for k in 0..q {
                s += a.data()[i * q + k] * b.data()[k * r + j];
            }
            out[i * r + j] = s;
        }
    }
    Tensor::new(vec![p, r], out).unwrap()
}

/// `out[t,o] = bias[o] + Σ_{j,c} x[t + (j − centre)·dil, c]·w[j,c,o]` with
/// `centre = ⌊k/2⌋` (same) or `k − 1` (causal).
pub fn conv1d_oracle(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    bias: &Tensor<f64>,
    dilation: usize,
    causal: bool,
) -> Tensor<f64> {
    let (tau, c_in) = (x.shape()[0], x.shape()[1]);
    let (k, c_out) = (w.shape()[0], w.shape()[2]);
    let centre = if causal { k as i64 - 1 } else { (k / 2) as i64 };
    let mut out = vec![0.0; tau * c_out];
    for t in 0..tau {
        for o in 0..c_out {
            let mut s = bias.data()[o];
            for j in 0..k {
                let src = t as i64 + (j as i64 - centre) * dilation as i64;
                if src < 0 || src >= tau as i64 {
                    continue;
                }
                for c in 0..c_in {
                    s += x.data()[src as usize * c_in + c] * w.data()[j * c_in * c_out + c * c_out + o];
                }
            }
            out[t * c_out + o] = s;
        }
    }
    Tensor::new(vec![tau, c_out], out).unwrap()
}

/// `x·W + b` by explicit loops.
pub fn linear_oracle(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let mut y = matmul_oracle(x, w);
    let c = y.shape()[1];
    for (k, v) in y.data_mut().iter_mut().enumerate() {
        *v += b.data()[k % c];
    }
    y
}

pub fn sigmoid_oracle(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn relu_oracle(x: f64) -> f64 {
    x.max(0.0)
}

/// Feature extractor: three conv branches, concatenation, fusion layer.
/// `p` holds c0,b0,c1,b1,c2,b2,c23,b23,c25,b25,fc_w,fc_b in that order.
pub fn extractor_oracle(window: &Tensor<f64>, p: &[Tensor<f64>]) -> Tensor<f64> {
    let f0 = conv1d_oracle(window, &p[0], &p[1], 1, false);
    let u1 = conv1d_oracle(window, &p[2], &p[3], 1, false);
    let f1 = conv1d_oracle(&u1, &p[6], &p[7], 3, false);
    let u2 = conv1d_oracle(window, &p[4], &p[5], 1, false);
    let f2 = conv1d_oracle(&u2, &p[8], &p[9], 5, false);
    let tau = window.shape()[0];
    let d = f0.shape()[1];
    let mut cat = vec![0.0; tau * 3 * d];
    for t in 0..tau {
        for (b, f) in [&f0, &f1, &f2].iter().enumerate() {
            for c in 0..d {
                cat[t * 3 * d + b * d + c] = f.data()[t * d + c];
            }
        }
    }
    let cat = Tensor::new(vec![tau, 3 * d], cat).unwrap();
    linear_oracle(&cat, &p[10], &p[11])
}

/// Pre-sigmoid edge scores for every `i < j`, built one concatenated pair at a
/// time. Returns a dense `τ×τ` score matrix (zero off-support) and the theta
/// matrix (sigmoid on support, zero elsewhere).
pub fn link_oracle(
    z: &Tensor<f64>,
    w1: &Tensor<f64>,
    b1: &Tensor<f64>,
    w2: &Tensor<f64>,
    b2: &Tensor<f64>,
) -> (Vec<f64>, Vec<f64>) {
    let (tau, d) = (z.shape()[0], z.shape()[1]);
    let dl = w1.shape()[1];
    let mut scores = vec![0.0; tau * tau];
    let mut theta = vec![0.0; tau * tau];
    for i in 0..tau {
        for j in (i + 1)..tau {
            let mut pair = Vec::with_capacity(2 * d);
            pair.extend_from_slice(z.row(i));
            pair.extend_from_slice(z.row(j));
            let mut hidden = vec![0.0; dl];
            for (o, h) in hidden.iter_mut().enumerate() {
                let mut s = b1.data()[o];
                for (k, &pk) in pair.iter().enumerate() {
                    s += pk * w1.data()[k * dl + o];
                }
                *h = relu_oracle(s);
            }
            let mut s = b2.data()[0];
            for (k, &hk) in hidden.iter().enumerate() {
                s += hk * w2.data()[k];
            }
            scores[i * tau + j] = s;
            theta[i * tau + j] = sigmoid_oracle(s);
        }
    }
    (scores, theta)
}

/// One mean-aggregation step, node by node: the (weighted) mean of
/// `{h_u} ∪ {h_i : A[i,u] > 0}` followed by `act(mean·W + b)`.
pub fn sage_step_oracle(
    h: &Tensor<f64>,
    adj: &Tensor<f64>,
    w: &Tensor<f64>,
    b: &Tensor<f64>,
    act: fn(f64) -> f64,
) -> Tensor<f64> {
    let (tau, d) = (h.shape()[0], h.shape()[1]);
    let d_out = w.shape()[1];
    let mut out = vec![0.0; tau * d_out];
    for u in 0..tau {
        let mut members: Vec<(f64, &[f64])> = vec![(1.0, h.row(u))];
        for i in 0..u {
            let a = adj.data()[i * tau + u];
            if a > 0.0 {
                members.push((a, h.row(i)));
            }
        }
        let total: f64 = members.iter().map(|(a, _)| a).sum();
        let mut mean = vec![0.0; d];
        for (a, row) in &members {
            for c in 0..d {
                mean[c] += a * row[c] / total;
            }
        }
        for o in 0..d_out {
            let mut s = b.data()[o];
            for c in 0..d {
                s += mean[c] * w.data()[c * d_out + o];
            }
            out[u * d_out + o] = act(s);
        }
    }
    Tensor::new(vec![tau, d_out], out).unwrap()
}

/// P sage steps, normalise the last row, two output layers.
/// `steps` holds (W, b) per step; `head` is (W1, b1, W2, b2).
pub fn forecast_oracle(
    z: &Tensor<f64>,
    adj: &Tensor<f64>,
    steps: &[(Tensor<f64>, Tensor<f64>)],
    head: &[Tensor<f64>; 4],
) -> Vec<f64> {
    let mut h = z.clone();
    for (w, b) in steps {
        h = sage_step_oracle(&h, adj, w, b, relu_oracle);
    }
    let tau = h.shape()[0];
    let last = h.row(tau - 1).to_vec();
    let norm = last.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    let readout: Vec<f64> = last.iter().map(|x| x / norm).collect();
    let readout = Tensor::new(vec![1, readout.len()], readout).unwrap();
    let hidden = linear_oracle(&readout, &head[0], &head[1]).map(relu_oracle);
    linear_oracle(&hidden, &head[2], &head[3]).into_data()
}
