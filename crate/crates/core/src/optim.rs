//! Adam with bias correction, plus global-norm gradient clipping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments for every parameter, in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(params: &ParamStore<T>, config: AdamConfig) -> Self {
        let zeros = || params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One Adam update. Every parameter must have a gradient.
    pub fn adam_step(&mut self, params: &mut ParamStore<T>, grads: &[Option<Tensor<T>>]) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::shape("adam_step", "parameter count", params.len(), grads.len()));
        }
        if let Some(k) = grads.iter().position(Option::is_none) {
            return Err(Error::MissingGradient(params.names()[k].clone()));
        }
        self.step += 1;
        let c = self.config;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (one, eps, lr) = (T::one(), T::lit(c.eps), T::lit(c.lr));
        let bc1 = one - T::lit(c.beta1.powi(self.step as i32));
        let bc2 = one - T::lit(c.beta2.powi(self.step as i32));
        let names = params.names().to_vec();
        for (k, p) in params.tensors_mut().iter_mut().enumerate() {
            let g = grads[k].as_ref().expect("checked above");
            if g.shape() != p.shape() {
                return Err(Error::shape("adam_step", &names[k], p.numel(), g.numel()));
            }
            let (m, v) = (self.m[k].data_mut(), self.v[k].data_mut());
            for (((w, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// `‖g‖₂` over all present gradients, accumulated in f64.
pub fn global_norm<T: Real>(grads: &[Option<Tensor<T>>]) -> f64 {
    grads
        .iter()
        .flatten()
        .flat_map(|g| g.data())
        .map(|&x| x.as_f64() * x.as_f64())
        .sum::<f64>()
        .sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm<T: Real>(grads: &mut [Option<Tensor<T>>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm.is_finite() {
        let f = T::lit(max_norm / norm);
        for g in grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|x| *x = *x * f);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(values: &[f64]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::new(vec![values.len()], values.to_vec()).unwrap()).unwrap();
        s
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = store(&[1.0, -2.0]);
        let mut opt = OptimizerState::new(&p, AdamConfig::default());
        opt.adam_step(&mut p, &[Some(Tensor::zeros(&[2]))]).unwrap();
        assert_eq!(p.get("w").unwrap().data(), &[1.0, -2.0]);
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        for g in [0.3, -7.0, 1e-3] {
            let mut p = store(&[0.5]);
            let mut opt = OptimizerState::new(&p, AdamConfig::default());
            opt.adam_step(&mut p, &[Some(Tensor::new(vec![1], vec![g]).unwrap())]).unwrap();
            // m̂ = g, v̂ = g², so the step is lr·g/(|g| + ε)
            let want = 0.5 - 1e-3 * g / (g.abs() + 1e-8);
            assert!((p.get("w").unwrap().data()[0] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn matches_reference_recurrence_over_steps() {
        let grads = [0.4, -0.1, 0.25, 0.0, 1.5];
        let mut p = store(&[0.0]);
        let mut opt = OptimizerState::new(&p, AdamConfig::default());
        let (mut w, mut m, mut v) = (0.0f64, 0.0f64, 0.0f64);
        for (t, &g) in grads.iter().enumerate() {
            opt.adam_step(&mut p, &[Some(Tensor::new(vec![1], vec![g]).unwrap())]).unwrap();
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let k = (t + 1) as i32;
            w -= 1e-3 * (m / (1.0 - 0.9f64.powi(k))) / ((v / (1.0 - 0.999f64.powi(k))).sqrt() + 1e-8);
        }
        assert!((p.get("w").unwrap().data()[0] - w).abs() < 1e-15);
    }

    #[test]
    fn repeated_runs_are_bit_identical() {
        let run = || {
            let mut p = store(&[0.1, 0.2, 0.3]);
            let mut opt = OptimizerState::new(&p, AdamConfig::default());
            for k in 0..10 {
                let g = Tensor::from_fn(&[3], |i| ((k * 3 + i) as f64).sin());
                opt.adam_step(&mut p, &[Some(g)]).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn missing_gradient_names_parameter() {
        let mut p = store(&[1.0]);
        let mut opt = OptimizerState::new(&p, AdamConfig::default());
        match opt.adam_step(&mut p, &[None]) {
            Err(Error::MissingGradient(name)) => assert_eq!(name, "w"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn clipping_caps_global_norm() {
        let mut g = vec![Some(Tensor::new(vec![2], vec![3.0, 4.0]).unwrap()), None];
        assert_eq!(clip_global_norm(&mut g, 10.0), 5.0);
        assert_eq!(g[0].as_ref().unwrap().data(), &[3.0, 4.0]);
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((global_norm(&g) - 1.0).abs() < 1e-15);
    }
}
