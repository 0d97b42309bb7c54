//! The full per-window model: feature extraction, graph learning and
//! message-passing forecast, sharing one parameter store.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{pair_count, Padding, Tape, Var};
use crate::data::ForecastMode;
use crate::error::{Error, Result};
use crate::extractor::{self, ExtractorOptions, ExtractorParams};
use crate::forecaster::{self, Activation, SageParams};
use crate::graph::{self, EdgeScores, LinkPredictorParams};
use crate::params::{Bound, ParamStore};
use crate::seed::derive_seed;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub channels: usize,
    pub window: usize,
    pub horizon: usize,
    pub mode: ForecastMode,
    pub d: usize,
    pub d_link: usize,
    pub head_hidden: usize,
    pub steps: usize,
    pub padding: Padding,
    pub fusion_relu: bool,
    pub activation: Activation,
}

impl ModelConfig {
    /// Defaults for everything except the data shape and width.
    pub fn new(channels: usize, window: usize, horizon: usize, d: usize) -> Self {
        Self {
            channels,
            window,
            horizon,
            mode: ForecastMode::SingleStep,
            d,
            d_link: d,
            head_hidden: d,
            steps: 3,
            padding: Padding::Same,
            fusion_relu: false,
            activation: Activation::Relu,
        }
    }

    pub fn output_dim(&self) -> usize {
        self.mode.output_dim(self.channels, self.horizon)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("channels", self.channels),
            ("horizon", self.horizon),
            ("d", self.d),
            ("d_link", self.d_link),
            ("head_hidden", self.head_hidden),
            ("steps", self.steps),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if self.window < 2 {
            return Err(Error::Config(format!("window must be at least 2, got {}", self.window)));
        }
        Ok(())
    }
}

/// How a window's adjacency is obtained.
#[derive(Clone, Copy, Debug)]
pub enum GraphPolicy<'a, T> {
    /// Gumbel-relaxed edges with the given `g¹ − g²` draws (one per pair).
    Relaxed { smoothness: T, noise: &'a [T] },
    /// `theta > 0.5`, no sampling.
    Hard,
    /// Caller-supplied `τ×τ` adjacency; the link predictor still runs.
    Fixed(&'a Tensor<T>),
}

/// Tape handles for every parameter group.
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub extractor: ExtractorParams,
    pub link: LinkPredictorParams,
    pub sage: SageParams,
}

/// Forward results for one window.
#[derive(Clone, Copy, Debug)]
pub struct WindowOutput {
    pub features: Var,
    pub scores: EdgeScores,
    pub adjacency: Var,
    /// `1×out`.
    pub prediction: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TimeGnn<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
}

impl<T: Real> TimeGnn<T> {
    /// Fresh weights drawn from a ChaCha stream keyed on `seed`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x494e_4954]));
        let mut params = ParamStore::new();
        ExtractorParams::register(&mut params, config.channels, config.d, &mut rng)?;
        LinkPredictorParams::register(&mut params, config.d, config.d_link, &mut rng)?;
        SageParams::register(
            &mut params,
            config.d,
            config.steps,
            config.head_hidden,
            config.output_dim(),
            &mut rng,
        )?;
        Ok(Self { config, params })
    }

    /// Wraps loaded parameters after checking names and shapes against a fresh layout.
    pub fn from_params(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        let layout = Self::init(config.clone(), 0)?;
        if layout.params.names() != params.names() {
            return Err(Error::Checkpoint(format!(
                "parameter names do not match the model layout: expected {:?}",
                layout.params.names()
            )));
        }
        for ((name, want), got) in layout.params.iter().zip(params.tensors()) {
            if want.shape() != got.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    got.shape(),
                    want.shape()
                )));
            }
        }
        Ok(Self { config, params })
    }

    pub fn cast<U: Real>(&self) -> TimeGnn<U> {
        TimeGnn {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    /// Binds all parameters; `trainable` controls gradient tracking.
    pub fn bind<'a>(&'a self, tape: &mut Tape<T>, trainable: bool) -> Result<(Bound<'a, T>, ModelVars)> {
        let bound = if trainable {
            self.params.bind(tape)
        } else {
            self.params.bind_frozen(tape)
        };
        let vars = ModelVars {
            extractor: ExtractorParams::bind(&bound)?,
            link: LinkPredictorParams::bind(&bound)?,
            sage: SageParams::bind(&bound, self.config.steps)?,
        };
        Ok((bound, vars))
    }

    pub fn extractor_options(&self) -> ExtractorOptions {
        ExtractorOptions {
            padding: self.config.padding,
            fusion_relu: self.config.fusion_relu,
        }
    }

    /// Runs one `τ×m` window through the whole model.
    pub fn forward_window(
        &self,
        tape: &mut Tape<T>,
        vars: &ModelVars,
        window: Var,
        policy: GraphPolicy<'_, T>,
    ) -> Result<WindowOutput> {
        let (tau, m) = tape.value(window).dims2("forward_window")?;
        if m != self.config.channels {
            return Err(Error::shape("forward_window", "channels", self.config.channels, m));
        }
        let features = extractor::extract(tape, window, &vars.extractor, self.extractor_options())?;
        let scores = graph::edge_probabilities(tape, features, &vars.link)?;
        let adjacency = match policy {
            GraphPolicy::Relaxed { smoothness, noise } => {
                graph::relaxed_adjacency(tape, scores.logits, tau, smoothness, noise)?
            }
            GraphPolicy::Hard => {
                let hard = graph::harden(tape.value(scores.theta));
                tape.constant(hard)
            }
            GraphPolicy::Fixed(adj) => {
                if adj.shape() != [tau, tau] {
                    return Err(Error::shape("forward_window", "adjacency", tau, adj.shape()[0]));
                }
                tape.constant(adj.clone())
            }
        };
        let prediction = forecaster::forecast(tape, features, adjacency, &vars.sage, self.config.activation)?;
        Ok(WindowOutput {
            features,
            scores,
            adjacency,
            prediction,
        })
    }

    /// Predictions for every window of a `B×τ×m` input, stacked to `B×out`.
    ///
    /// `noise_for(b)` supplies the Gumbel draws for window `b` when relaxed
    /// sampling is requested (`smoothness = Some`); otherwise graphs are hardened.
    pub fn forward_batch(
        &self,
        tape: &mut Tape<T>,
        vars: &ModelVars,
        inputs: &Tensor<T>,
        smoothness: Option<T>,
        mut noise_for: impl FnMut(usize) -> Vec<T>,
    ) -> Result<Var> {
        let [b, tau, m] = inputs.shape() else {
            return Err(Error::invalid("forward_batch", "inputs must be B×τ×m"));
        };
        let (b, tau, m) = (*b, *tau, *m);
        let mut preds = Vec::with_capacity(b);
        for k in 0..b {
            let slab = inputs.data()[k * tau * m..(k + 1) * tau * m].to_vec();
            let w = tape.constant(Tensor::new(vec![tau, m], slab)?);
            let out = match smoothness {
                Some(s) => {
                    let noise = noise_for(k);
                    self.forward_window(tape, vars, w, GraphPolicy::Relaxed { smoothness: s, noise: &noise })?
                }
                None => self.forward_window(tape, vars, w, GraphPolicy::Hard)?,
            };
            preds.push(out.prediction);
        }
        tape.stack_rows(&preds)
    }
}

/// Gumbel draws for one window, keyed on `(seed, stream, start)` so they do
/// not depend on batch composition or visit order.
pub fn window_noise<T: Real>(seed: u64, stream: u64, start: usize, nodes: usize) -> Vec<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x4e4f_4953, stream, start as u64]));
    graph::gumbel_noise(pair_count(nodes), &mut rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::is_strictly_upper;
    use crate::testutil::rand_tensor;

    fn small() -> ModelConfig {
        let mut c = ModelConfig::new(2, 8, 1, 4);
        c.steps = 2;
        c
    }

    #[test]
    fn init_is_seeded_and_layout_checked() {
        let a = TimeGnn::<f64>::init(small(), 3).unwrap();
        let b = TimeGnn::<f64>::init(small(), 3).unwrap();
        let c = TimeGnn::<f64>::init(small(), 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.params, c.params);
        assert!(TimeGnn::from_params(small(), a.params.clone()).is_ok());
        let mut wider = small();
        wider.d = 5;
        assert!(TimeGnn::from_params(wider, a.params).is_err());
    }

    #[test]
    fn forward_shapes_and_graph_support() {
        let model = TimeGnn::<f64>::init(small(), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut tape = Tape::new();
        let (_, vars) = model.bind(&mut tape, true).unwrap();
        let w = tape.constant(rand_tensor(&[8, 2], &mut rng));
        let noise = window_noise::<f64>(1, 0, 0, 8);
        let out = model
            .forward_window(&mut tape, &vars, w, GraphPolicy::Relaxed { smoothness: 0.3, noise: &noise })
            .unwrap();
        assert_eq!(tape.shape(out.prediction), &[1, 2]);
        assert!(is_strictly_upper(tape.value(out.adjacency)));
        assert!(is_strictly_upper(tape.value(out.scores.theta)));

        let hard = model.forward_window(&mut tape, &vars, w, GraphPolicy::Hard).unwrap();
        assert!(tape.value(hard.adjacency).data().iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn multi_step_output_width() {
        let mut cfg = small();
        cfg.mode = ForecastMode::MultiStep;
        cfg.horizon = 3;
        let model = TimeGnn::<f64>::init(cfg, 2).unwrap();
        let mut tape = Tape::new();
        let (_, vars) = model.bind(&mut tape, false).unwrap();
        let w = tape.constant(Tensor::zeros(&[8, 2]));
        let out = model.forward_window(&mut tape, &vars, w, GraphPolicy::Hard).unwrap();
        assert_eq!(tape.shape(out.prediction), &[1, 6]);
    }

    #[test]
    fn batch_forward_matches_single_windows() {
        let model = TimeGnn::<f64>::init(small(), 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let inputs = rand_tensor(&[3, 8, 2], &mut rng);
        let mut tape = Tape::new();
        let (_, vars) = model.bind(&mut tape, false).unwrap();
        let stacked = model.forward_batch(&mut tape, &vars, &inputs, None, |_| Vec::new()).unwrap();
        assert_eq!(tape.shape(stacked), &[3, 2]);
        for k in 0..3 {
            let slab = inputs.data()[k * 16..(k + 1) * 16].to_vec();
            let w = tape.constant(Tensor::new(vec![8, 2], slab).unwrap());
            let single = model.forward_window(&mut tape, &vars, w, GraphPolicy::Hard).unwrap();
            assert_eq!(tape.value(single.prediction).data(), tape.value(stacked).row(k));
        }
    }

    #[test]
    fn rejects_bad_configs_and_channels() {
        let mut cfg = small();
        cfg.window = 1;
        assert!(TimeGnn::<f64>::init(cfg, 0).is_err());
        let mut cfg = small();
        cfg.steps = 0;
        assert!(TimeGnn::<f64>::init(cfg, 0).is_err());

        let model = TimeGnn::<f64>::init(small(), 0).unwrap();
        let mut tape = Tape::new();
        let (_, vars) = model.bind(&mut tape, false).unwrap();
        let w = tape.constant(Tensor::zeros(&[8, 3]));
        assert!(model.forward_window(&mut tape, &vars, w, GraphPolicy::Hard).is_err());
    }
}
