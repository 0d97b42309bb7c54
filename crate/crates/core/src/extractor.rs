//! Per-timestep node features from a raw window.
//!
//! Three inception-style branches run over the `τ×m` window:
//!
//! * `f0`: size-1 convolution `m → d`
//! * `f1`: size-1 convolution, then size-3 convolution with dilation 3
//! * `f2`: size-1 convolution, then size-5 convolution with dilation 5
//!
//! The branches are concatenated along the feature axis and fused by a single
//! linear layer into `τ×d` node features. No nonlinearity sits between the
//! stacked convolutions.

use rand::Rng;

use crate::autodiff::{Padding, Tape, Var};
use crate::error::Result;
use crate::params::{Bound, ParamStore};
use crate::tensor::Real;

/// `(kernel size, dilation)` of the second convolution in branches f1 and f2.
pub const F1_KERNEL: (usize, usize) = (3, 3);
pub const F2_KERNEL: (usize, usize) = (5, 5);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    F0,
    F1,
    F2,
}

/// Number of input timesteps that can reach one output step of a branch.
pub fn receptive_field(branch: Branch) -> usize {
    let effective = |(k, dilation): (usize, usize)| 1 + (k - 1) * dilation;
    match branch {
        Branch::F0 => 1,
        Branch::F1 => effective(F1_KERNEL),
        Branch::F2 => effective(F2_KERNEL),
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ExtractorOptions {
    pub padding: Padding,
    /// Apply ReLU after the fusion layer.
    pub fusion_relu: bool,
}

/// Tape handles for the extractor weights.
#[derive(Clone, Copy, Debug)]
pub struct ExtractorParams {
    pub c0: Var,
    pub b0: Var,
    pub c1: Var,
    pub b1: Var,
    pub c2: Var,
    pub b2: Var,
    pub c2_3: Var,
    pub b2_3: Var,
    pub c2_5: Var,
    pub b2_5: Var,
    pub fuse_w: Var,
    pub fuse_b: Var,
}

pub const PARAM_NAMES: [&str; 12] = [
    "extractor.c0.weight",
    "extractor.c0.bias",
    "extractor.c1.weight",
    "extractor.c1.bias",
    "extractor.c2.weight",
    "extractor.c2.bias",
    "extractor.c2_3.weight",
    "extractor.c2_3.bias",
    "extractor.c2_5.weight",
    "extractor.c2_5.bias",
    "extractor.fuse.weight",
    "extractor.fuse.bias",
];

impl ExtractorParams {
    /// Adds freshly initialised extractor weights for `m` channels and width `d`.
    pub fn register<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        m: usize,
        d: usize,
        rng: &mut R,
    ) -> Result<()> {
        let [c0, b0, c1, b1, c2, b2, c23, b23, c25, b25, fw, fb] = PARAM_NAMES;
        for (w, b) in [(c0, b0), (c1, b1), (c2, b2)] {
            store.insert_uniform(w, &[1, m, d], m, rng)?;
            store.insert_zeros(b, &[d])?;
        }
        store.insert_uniform(c23, &[F1_KERNEL.0, d, d], F1_KERNEL.0 * d, rng)?;
        store.insert_zeros(b23, &[d])?;
        store.insert_uniform(c25, &[F2_KERNEL.0, d, d], F2_KERNEL.0 * d, rng)?;
        store.insert_zeros(b25, &[d])?;
        store.insert_uniform(fw, &[3 * d, d], 3 * d, rng)?;
        store.insert_zeros(fb, &[d])?;
        Ok(())
    }

    pub fn bind<T: Real>(bound: &Bound<'_, T>) -> Result<Self> {
        let v = |i: usize| bound.get(PARAM_NAMES[i]);
        Ok(Self {
            c0: v(0)?,
            b0: v(1)?,
            c1: v(2)?,
            b1: v(3)?,
            c2: v(4)?,
            b2: v(5)?,
            c2_3: v(6)?,
            b2_3: v(7)?,
            c2_5: v(8)?,
            b2_5: v(9)?,
            fuse_w: v(10)?,
            fuse_b: v(11)?,
        })
    }
}

/// The three pre-fusion feature maps, each `τ×d`.
pub fn extract_branches<T: Real>(
    tape: &mut Tape<T>,
    window: Var,
    p: &ExtractorParams,
    padding: Padding,
) -> Result<[Var; 3]> {
    let f0 = tape.conv1d(window, p.c0, p.b0, 1, padding)?;
    let u1 = tape.conv1d(window, p.c1, p.b1, 1, padding)?;
    let f1 = tape.conv1d(u1, p.c2_3, p.b2_3, F1_KERNEL.1, padding)?;
    let u2 = tape.conv1d(window, p.c2, p.b2, 1, padding)?;
    let f2 = tape.conv1d(u2, p.c2_5, p.b2_5, F2_KERNEL.1, padding)?;
    Ok([f0, f1, f2])
}

/// Maps a `τ×m` window to `τ×d` node features.
pub fn extract<T: Real>(
    tape: &mut Tape<T>,
    window: Var,
    p: &ExtractorParams,
    opts: ExtractorOptions,
) -> Result<Var> {
    let branches = extract_branches(tape, window, p, opts.padding)?;
    let cat = tape.concat_features(&branches)?;
    let z = tape.linear(cat, p.fuse_w, p.fuse_b)?;
    Ok(if opts.fusion_relu { tape.relu(z) } else { z })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use crate::testutil::{extractor_oracle, rand_tensor};
    use crate::Error;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(m: usize, d: usize, seed: u64) -> ParamStore<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        ExtractorParams::register(&mut store, m, d, &mut rng).unwrap();
        // random biases too, so the oracle comparison exercises them
        for name in PARAM_NAMES.iter().filter(|n| n.ends_with("bias")) {
            let shape = store.get(name).unwrap().shape().to_vec();
            *store.get_mut(name).unwrap() = rand_tensor(&shape, &mut rng);
        }
        store
    }

    #[test]
    fn receptive_fields() {
        assert_eq!(receptive_field(Branch::F0), 1);
        assert_eq!(receptive_field(Branch::F1), 7);
        assert_eq!(receptive_field(Branch::F2), 21);
    }

    #[test]
    fn zero_window_zero_bias_gives_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        ExtractorParams::register(&mut store, 3, 4, &mut rng).unwrap();
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let p = ExtractorParams::bind(&bound).unwrap();
        let w = tape.constant(Tensor::zeros(&[10, 3]));
        let z = extract(&mut tape, w, &p, ExtractorOptions::default()).unwrap();
        assert!(tape.value(z).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_step_window_has_shape_one_by_d() {
        let store = setup(2, 4, 2);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let p = ExtractorParams::bind(&bound).unwrap();
        let w = tape.constant(Tensor::new(vec![1, 2], vec![0.3, -0.2]).unwrap());
        let z = extract(&mut tape, w, &p, ExtractorOptions::default()).unwrap();
        assert_eq!(tape.shape(z), &[1, 4]);
    }

    #[test]
    fn matches_composed_loop_oracle() {
        let store = setup(2, 4, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let window = rand_tensor(&[8, 2], &mut rng);
        let want = extractor_oracle(&window, store.tensors());
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let p = ExtractorParams::bind(&bound).unwrap();
        let w = tape.constant(window);
        let z = extract(&mut tape, w, &p, ExtractorOptions::default()).unwrap();
        for (a, b) in tape.value(z).data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn branches_are_affine_in_the_window() {
        let store = setup(3, 5, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let window = rand_tensor(&[12, 3], &mut rng);
        let run = |w: Tensor<f64>| {
            let mut tape = Tape::new();
            let bound = store.bind(&mut tape);
            let p = ExtractorParams::bind(&bound).unwrap();
            let w = tape.constant(w);
            let b = extract_branches(&mut tape, w, &p, Padding::Same).unwrap();
            b.map(|v| tape.value(v).clone())
        };
        let base = run(Tensor::zeros(&[12, 3]));
        let once = run(window.clone());
        let twice = run(window.map(|v| 2.0 * v));
        for k in 0..3 {
            for ((z, a), b) in base[k].data().iter().zip(once[k].data()).zip(twice[k].data()) {
                assert!(((b - z) - 2.0 * (a - z)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn every_parameter_receives_gradient() {
        let store = setup(2, 4, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let p = ExtractorParams::bind(&bound).unwrap();
        let w = tape.constant(rand_tensor(&[16, 2], &mut rng));
        let z = extract(&mut tape, w, &p, ExtractorOptions::default()).unwrap();
        let c = tape.constant(rand_tensor(&[16, 4], &mut rng));
        let prod = tape.mul(z, c).unwrap();
        let loss = tape.sum(prod);
        tape.backward(loss).unwrap();
        for (name, g) in store.names().iter().zip(bound.grads(&tape)) {
            let g = g.unwrap();
            assert!(g.data().iter().any(|&v| v != 0.0), "{name} has zero gradient");
        }
    }

    #[test]
    fn rejects_wrong_channel_count() {
        let store = setup(2, 4, 6);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let p = ExtractorParams::bind(&bound).unwrap();
        let w = tape.constant(Tensor::zeros(&[8, 3]));
        let err = extract(&mut tape, w, &p, ExtractorOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }));
    }
}
