//! Per-window temporal graph learning.
//!
//! A pairwise link predictor scores every ordered pair of timesteps `i < j`;
//! the scores parameterise independent Bernoulli edges that are relaxed with
//! the Gumbel trick during training and hardened at evaluation. Only the
//! strictly upper triangle is ever populated, so every edge points forward in
//! time.
//!
//! The link predictor's first layer acts on `z_i ‖ z_j`. Its weight is stored
//! as one `2d×d_link` matrix but applied as `z_i·W_top + z_j·W_bottom`, which
//! is the same product without materialising the `τ(τ−1)/2` concatenations.

use rand::Rng;
use rand_distr::{Distribution, Gumbel};
use serde::Serialize;

use crate::autodiff::{pair_count, sigmoid, upper_pairs, Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::tensor::{Real, Tensor};

/// Reported edge probabilities are clamped to `[THETA_EPS, 1 − THETA_EPS]`.
pub const THETA_EPS: f64 = 1e-6;

pub const PARAM_NAMES: [&str; 4] = [
    "link.fc1.weight",
    "link.fc1.bias",
    "link.fc2.weight",
    "link.fc2.bias",
];

#[derive(Clone, Copy, Debug)]
pub struct LinkPredictorParams {
    pub fc1_w: Var,
    pub fc1_b: Var,
    pub fc2_w: Var,
    pub fc2_b: Var,
}

impl LinkPredictorParams {
    pub fn register<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        d: usize,
        d_link: usize,
        rng: &mut R,
    ) -> Result<()> {
        store.insert_uniform(PARAM_NAMES[0], &[2 * d, d_link], 2 * d, rng)?;
        store.insert_zeros(PARAM_NAMES[1], &[d_link])?;
        store.insert_uniform(PARAM_NAMES[2], &[d_link, 1], d_link, rng)?;
        store.insert_zeros(PARAM_NAMES[3], &[1])?;
        Ok(())
    }

    pub fn bind<T: Real>(bound: &Bound<'_, T>) -> Result<Self> {
        Ok(Self {
            fc1_w: bound.get(PARAM_NAMES[0])?,
            fc1_b: bound.get(PARAM_NAMES[1])?,
            fc2_w: bound.get(PARAM_NAMES[2])?,
            fc2_b: bound.get(PARAM_NAMES[3])?,
        })
    }
}

/// Output of the link predictor for one window.
#[derive(Clone, Copy, Debug)]
pub struct EdgeScores {
    /// Pre-sigmoid scores, one row per upper pair in [`upper_pairs`] order.
    pub logits: Var,
    /// `τ×τ` edge probabilities, zero on and below the diagonal.
    pub theta: Var,
    pub nodes: usize,
}

/// Scores all `τ(τ−1)/2` forward pairs of a `τ×d` feature matrix.
pub fn edge_probabilities<T: Real>(
    tape: &mut Tape<T>,
    z: Var,
    p: &LinkPredictorParams,
) -> Result<EdgeScores> {
    let (tau, d) = tape.value(z).dims2("edge_probabilities")?;
    if tau < 2 {
        return Err(Error::invalid("edge_probabilities", "window needs at least two nodes"));
    }
    let (w_rows, _) = tape.value(p.fc1_w).dims2("edge_probabilities")?;
    if w_rows != 2 * d {
        return Err(Error::shape("edge_probabilities", "fc1 input width", 2 * d, w_rows));
    }
    let w_top = tape.slice_rows(p.fc1_w, 0, d)?;
    let w_bottom = tape.slice_rows(p.fc1_w, d, 2 * d)?;
    let left = tape.matmul(z, w_top)?;
    let right = tape.matmul(z, w_bottom)?;
    let pairs = tape.pair_sum_upper(left, right)?;
    let hidden = tape.add_row_bias(pairs, p.fc1_b)?;
    let hidden = tape.relu(hidden);
    let logits = tape.linear(hidden, p.fc2_w, p.fc2_b)?;
    let probs = tape.sigmoid(logits);
    let theta = tape.scatter_upper(probs, tau)?;
    Ok(EdgeScores {
        logits,
        theta,
        nodes: tau,
    })
}

/// `g¹ − g²` for independent standard Gumbel draws, one per upper pair.
pub fn gumbel_noise<T: Real, R: Rng>(pairs: usize, rng: &mut R) -> Vec<T> {
    let g = Gumbel::new(0.0, 1.0).expect("valid Gumbel parameters");
    (0..pairs)
        .map(|_| {
            let a: f64 = g.sample(rng);
            let b: f64 = g.sample(rng);
            T::lit(a - b)
        })
        .collect()
}

fn check_smoothness<T: Real>(s: T) -> Result<()> {
    if !(s > T::zero()) || !s.is_finite() {
        return Err(Error::invalid("gumbel_sample", format!("smoothness must be positive, got {s}")));
    }
    Ok(())
}

/// Relaxed adjacency `σ((ℓ + g¹ − g²)/s)` from pre-sigmoid pair scores `ℓ`,
/// scattered into the strict upper triangle of a `τ×τ` matrix.
pub fn relaxed_adjacency<T: Real>(
    tape: &mut Tape<T>,
    logits: Var,
    nodes: usize,
    smoothness: T,
    noise: &[T],
) -> Result<Var> {
    check_smoothness(smoothness)?;
    let shape = tape.shape(logits).to_vec();
    let n = tape.value(logits).numel();
    if noise.len() != n || n != pair_count(nodes) {
        return Err(Error::shape("relaxed_adjacency", "noise length", n, noise.len()));
    }
    let g = tape.constant(Tensor::new(shape, noise.to_vec())?);
    let perturbed = tape.add(logits, g)?;
    let scaled = tape.scale(perturbed, T::one() / smoothness);
    let a = tape.sigmoid(scaled);
    tape.scatter_upper(a, nodes)
}

/// Gumbel-relaxed sample from a `τ×τ` probability matrix with frozen noise.
///
/// `noise` holds one `g¹ − g²` value per upper pair. Theta is clamped to
/// `[THETA_EPS, 1 − THETA_EPS]` before the logit. Gradients flow to `theta`.
pub fn gumbel_sample_with_noise<T: Real>(
    tape: &mut Tape<T>,
    theta: Var,
    smoothness: T,
    noise: &[T],
) -> Result<Var> {
    check_smoothness(smoothness)?;
    let (n, c) = tape.value(theta).dims2("gumbel_sample")?;
    if n != c {
        return Err(Error::shape("gumbel_sample", "theta columns", n, c));
    }
    if noise.len() != pair_count(n) {
        return Err(Error::shape("gumbel_sample", "noise length", pair_count(n), noise.len()));
    }
    let eps = T::lit(THETA_EPS);
    let mut noise_full = vec![T::zero(); n * n];
    let mut mask = vec![T::zero(); n * n];
    for ((i, j), &g) in upper_pairs(n).zip(noise) {
        noise_full[i * n + j] = g;
        mask[i * n + j] = T::one();
    }
    let clamped = tape.clamp(theta, eps, T::one() - eps);
    let one = tape.constant(Tensor::full(&[n, n], T::one()));
    let complement = tape.sub(one, clamped)?;
    let log_p = tape.log(clamped);
    let log_q = tape.log(complement);
    let logit = tape.sub(log_p, log_q)?;
    let g = tape.constant(Tensor::new(vec![n, n], noise_full)?);
    let perturbed = tape.add(logit, g)?;
    let scaled = tape.scale(perturbed, T::one() / smoothness);
    let a = tape.sigmoid(scaled);
    let mask = tape.constant(Tensor::new(vec![n, n], mask)?);
    tape.mul(a, mask)
}

/// Gumbel-relaxed sample drawing fresh noise from `rng`.
pub fn gumbel_sample<T: Real, R: Rng>(
    tape: &mut Tape<T>,
    theta: Var,
    smoothness: T,
    rng: &mut R,
) -> Result<Var> {
    let n = tape.shape(theta)[0];
    let noise = gumbel_noise(pair_count(n), rng);
    gumbel_sample_with_noise(tape, theta, smoothness, &noise)
}

/// Deterministic adjacency: 1 where `theta > 0.5` on the upper triangle.
pub fn harden<T: Real>(theta: &Tensor<T>) -> Tensor<T> {
    let n = theta.shape()[0];
    let half = T::lit(0.5);
    Tensor::from_fn(theta.shape(), |k| {
        let (i, j) = (k / n, k % n);
        if i < j && theta.data()[k] > half {
            T::one()
        } else {
            T::zero()
        }
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum GraphMode {
    RelaxedTrain,
    HardEval,
}

/// Detached snapshot of one window's learned graph.
#[derive(Clone, Debug)]
pub struct TemporalGraph<T> {
    pub theta: Tensor<T>,
    pub adjacency: Tensor<T>,
    pub smoothness: T,
    pub mode: GraphMode,
}

impl<T: Real> TemporalGraph<T> {
    /// Builds the report from pair scores, clamping theta on the support.
    pub fn from_logits(logits: &[T], adjacency: Tensor<T>, smoothness: T, mode: GraphMode) -> Self {
        let n = adjacency.shape()[0];
        let eps = T::lit(THETA_EPS);
        let mut theta = Tensor::zeros(&[n, n]);
        for ((i, j), &l) in upper_pairs(n).zip(logits) {
            theta.data_mut()[i * n + j] = sigmoid(l).max(eps).min(T::one() - eps);
        }
        Self {
            theta,
            adjacency,
            smoothness,
            mode,
        }
    }

    pub fn nodes(&self) -> usize {
        self.theta.shape()[0]
    }

    /// `[i, j, theta, a]` per upper pair.
    pub fn edge_list(&self) -> Vec<(usize, usize, f64, f64)> {
        let n = self.nodes();
        upper_pairs(n)
            .map(|(i, j)| {
                (
                    i,
                    j,
                    self.theta.data()[i * n + j].as_f64(),
                    self.adjacency.data()[i * n + j].as_f64(),
                )
            })
            .collect()
    }
}

/// True when every entry on or below the diagonal is exactly zero.
pub fn is_strictly_upper<T: Real>(m: &Tensor<T>) -> bool {
    let n = m.shape()[0];
    m.data()
        .iter()
        .enumerate()
        .all(|(k, &v)| k / n < k % n || v == T::zero())
}
