//! Mean-aggregation message passing over a window's temporal graph and the
//! two-layer forecasting head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    #[default]
    Relu,
    Sigmoid,
    Identity,
}

impl Activation {
    pub fn apply<T: Real>(self, tape: &mut Tape<T>, x: Var) -> Var {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::Sigmoid => tape.sigmoid(x),
            Activation::Identity => x,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SageParams {
    /// `(W, b)` per aggregation step.
    pub steps: Vec<(Var, Var)>,
    pub fc1_w: Var,
    pub fc1_b: Var,
    pub fc2_w: Var,
    pub fc2_b: Var,
}

pub fn step_names(p: usize) -> (String, String) {
    (format!("gnn.step{p}.weight"), format!("gnn.step{p}.bias"))
}

pub const HEAD_NAMES: [&str; 4] = [
    "head.fc1.weight",
    "head.fc1.bias",
    "head.fc2.weight",
    "head.fc2.bias",
];

impl SageParams {
    pub fn register<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        d: usize,
        steps: usize,
        head_hidden: usize,
        out: usize,
        rng: &mut R,
    ) -> Result<()> {
        if steps == 0 {
            return Err(Error::invalid("sage_params", "need at least one aggregation step"));
        }
        for p in 1..=steps {
            let (w, b) = step_names(p);
            store.insert_uniform(w, &[d, d], d, rng)?;
            store.insert_zeros(b, &[d])?;
        }
        store.insert_uniform(HEAD_NAMES[0], &[d, head_hidden], d, rng)?;
        store.insert_zeros(HEAD_NAMES[1], &[head_hidden])?;
        store.insert_uniform(HEAD_NAMES[2], &[head_hidden, out], head_hidden, rng)?;
        store.insert_zeros(HEAD_NAMES[3], &[out])?;
        Ok(())
    }

    pub fn bind<T: Real>(bound: &Bound<'_, T>, steps: usize) -> Result<Self> {
        let steps = (1..=steps)
            .map(|p| {
                let (w, b) = step_names(p);
                Ok((bound.get(&w)?, bound.get(&b)?))
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            steps,
            fc1_w: bound.get(HEAD_NAMES[0])?,
            fc1_b: bound.get(HEAD_NAMES[1])?,
            fc2_w: bound.get(HEAD_NAMES[2])?,
            fc2_b: bound.get(HEAD_NAMES[3])?,
        })
    }
}

/// One aggregation step: row `u` becomes
/// `act(mean({h_u} ∪ {h_i : i → u})·W + b)`, with edge weights from `adj`
/// acting as soft multiplicities.
pub fn sage_step<T: Real>(
    tape: &mut Tape<T>,
    h: Var,
    adj: Var,
    w: Var,
    b: Var,
    act: Activation,
) -> Result<Var> {
    let agg = tape.neighbor_mean(h, adj)?;
    let lin = tape.linear(agg, w, b)?;
    Ok(act.apply(tape, lin))
}

/// Node states after every step plus the forecast.
pub struct ForecastTrace {
    /// `H⁰ … Hᴾ`.
    pub states: Vec<Var>,
    /// Row-normalised `Hᴾ`.
    pub normalized: Var,
    /// `1×out` forecast.
    pub output: Var,
}

pub fn forecast_trace<T: Real>(
    tape: &mut Tape<T>,
    z: Var,
    adj: Var,
    p: &SageParams,
    act: Activation,
) -> Result<ForecastTrace> {
    let (tau, _) = tape.value(z).dims2("forecast")?;
    let mut states = vec![z];
    let mut h = z;
    for &(w, b) in &p.steps {
        h = sage_step(tape, h, adj, w, b, act)?;
        states.push(h);
    }
    let normalized = tape.l2_normalize_rows(h)?;
    let readout = tape.select_row(normalized, tau - 1)?;
    let hidden = tape.linear(readout, p.fc1_w, p.fc1_b)?;
    let hidden = tape.relu(hidden);
    let output = tape.linear(hidden, p.fc2_w, p.fc2_b)?;
    Ok(ForecastTrace {
        states,
        normalized,
        output,
    })
}

/// Runs all aggregation steps and reads the last node out through the head.
pub fn forecast<T: Real>(
    tape: &mut Tape<T>,
    z: Var,
    adj: Var,
    p: &SageParams,
    act: Activation,
) -> Result<Var> {
    Ok(forecast_trace(tape, z, adj, p, act)?.output)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::is_strictly_upper;
    use crate::tensor::Tensor;
    use crate::testutil::{forecast_oracle, rand_tensor, relu_oracle, sage_step_oracle};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_binary_upper(n: usize, rng: &mut impl Rng) -> Tensor<f64> {
        Tensor::from_fn(&[n, n], |k| {
            if k / n < k % n && rng.random_bool(0.4) {
                1.0
            } else {
                0.0
            }
        })
    }

    #[test]
    fn empty_graph_is_per_node_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h = rand_tensor(&[4, 3], &mut rng);
        let w = rand_tensor(&[3, 3], &mut rng);
        let b = rand_tensor(&[3], &mut rng);
        let mut tape = Tape::new();
        let (hv, wv, bv) = (tape.constant(h.clone()), tape.constant(w.clone()), tape.constant(b.clone()));
        let a = tape.constant(Tensor::zeros(&[4, 4]));
        let out = sage_step(&mut tape, hv, a, wv, bv, Activation::Relu).unwrap();
        for u in 0..4 {
            for o in 0..3 {
                let s: f64 = (0..3).map(|c| h.at(u, c) * w.at(c, o)).sum::<f64>() + b.data()[o];
                assert!((tape.value(out).at(u, o) - s.max(0.0)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn path_graph_averages_predecessor() {
        let h = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 5.0], vec![7.0, 11.0]]).unwrap();
        let mut adj = Tensor::zeros(&[3, 3]);
        adj.data_mut()[1] = 1.0; // 1 -> 2
        adj.data_mut()[5] = 1.0; // 2 -> 3
        let mut tape = Tape::new();
        let hv = tape.constant(h);
        let av = tape.constant(adj);
        let w = tape.constant(Tensor::eye(2));
        let b = tape.constant(Tensor::zeros(&[2]));
        let out = sage_step(&mut tape, hv, av, w, b, Activation::Identity).unwrap();
        assert_eq!(tape.value(out).row(2), &[5.0, 8.0]);
        assert_eq!(tape.value(out).row(1), &[2.0, 3.5]);
        assert_eq!(tape.value(out).row(0), &[1.0, 2.0]);
    }

    #[test]
    fn binary_step_matches_node_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let h = rand_tensor(&[5, 4], &mut rng);
            let adj = random_binary_upper(5, &mut rng);
            let w = rand_tensor(&[4, 4], &mut rng);
            let b = rand_tensor(&[4], &mut rng);
            let want = sage_step_oracle(&h, &adj, &w, &b, relu_oracle);
            let mut tape = Tape::new();
            let (hv, av) = (tape.constant(h), tape.constant(adj));
            let (wv, bv) = (tape.constant(w), tape.constant(b));
            let out = sage_step(&mut tape, hv, av, wv, bv, Activation::Relu).unwrap();
            for (x, y) in tape.value(out).data().iter().zip(want.data()) {
                assert!((x - y).abs() < 1e-10);
            }
        }
    }

    fn sage_store(d: usize, steps: usize, out: usize, seed: u64) -> ParamStore<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        SageParams::register(&mut store, d, steps, d, out, &mut rng).unwrap();
        let names: Vec<String> = store.names().iter().filter(|n| n.ends_with("bias")).cloned().collect();
        for n in names {
            let shape = store.get(&n).unwrap().shape().to_vec();
            *store.get_mut(&n).unwrap() = rand_tensor(&shape, &mut rng);
        }
        store
    }

    #[test]
    fn forecast_matches_composed_oracle() {
        let (tau, d, m, steps) = (6, 4, 2, 2);
        let store = sage_store(d, steps, m, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let z = rand_tensor(&[tau, d], &mut rng);
        let adj = random_binary_upper(tau, &mut rng);
        let step_params: Vec<_> = (1..=steps)
            .map(|p| {
                let (w, b) = step_names(p);
                (store.get(&w).unwrap().clone(), store.get(&b).unwrap().clone())
            })
            .collect();
        let head = HEAD_NAMES.map(|n| store.get(n).unwrap().clone());
        let want = forecast_oracle(&z, &adj, &step_params, &head);

        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let p = SageParams::bind(&bound, steps).unwrap();
        let (zv, av) = (tape.constant(z), tape.constant(adj));
        let out = forecast(&mut tape, zv, av, &p, Activation::Relu).unwrap();
        assert_eq!(tape.shape(out), &[1, m]);
        for (x, y) in tape.value(out).data().iter().zip(&want) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn normalized_rows_have_unit_or_zero_norm() {
        let store = sage_store(5, 3, 3, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let p = SageParams::bind(&bound, 3).unwrap();
        let z = tape.constant(rand_tensor(&[9, 5], &mut rng));
        let adj = random_binary_upper(9, &mut rng);
        assert!(is_strictly_upper(&adj));
        let a = tape.constant(adj);
        let trace = forecast_trace(&mut tape, z, a, &p, Activation::Relu).unwrap();
        assert_eq!(trace.states.len(), 4);
        let hn = tape.value(trace.normalized);
        for u in 0..9 {
            let n: f64 = hn.row(u).iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!(n == 0.0 || (n - 1.0).abs() <= 1e-9, "row {u} norm {n}");
        }
    }

    #[test]
    fn empty_graph_forecast_only_sees_last_row() {
        let store = sage_store(4, 1, 2, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let z = rand_tensor(&[5, 4], &mut rng);
        let run = |z: Tensor<f64>| {
            let mut tape = Tape::new();
            let bound = store.bind(&mut tape);
            let p = SageParams::bind(&bound, 1).unwrap();
            let zv = tape.constant(z);
            let a = tape.constant(Tensor::zeros(&[5, 5]));
            let out = forecast(&mut tape, zv, a, &p, Activation::Relu).unwrap();
            tape.value(out).clone()
        };
        let base = run(z.clone());
        let mut perturbed = z.clone();
        for k in 0..16 {
            perturbed.data_mut()[k] += 0.5;
        }
        assert_eq!(run(perturbed), base);
        let mut last = z;
        last.data_mut()[17] += 0.5;
        assert_ne!(run(last), base);
    }

    #[test]
    fn zero_steps_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        assert!(SageParams::register(&mut store, 4, 0, 4, 2, &mut rng).is_err());
    }
}
