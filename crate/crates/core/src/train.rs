//! Training loop, evaluation and metrics.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::config::RunConfig;
use crate::data::{Order, PreparedSplits, ScalerState, WindowBatch, Windows};
use crate::error::{Error, Result};
use crate::graph::{GraphMode, TemporalGraph};
use crate::model::{window_noise, GraphPolicy, TimeGnn};
use crate::optim::{clip_global_norm, OptimizerState};
use crate::tensor::{Real, Tensor};

/// RNG stream tags for per-window Gumbel draws.
const EVAL_SAMPLE_STREAM: u64 = u64::MAX;
const INITIAL_LOSS_STREAM: u64 = u64::MAX - 1;

/// Element-mean absolute error on the tape.
pub fn mae_loss<T: Real>(tape: &mut Tape<T>, pred: Var, target: Var) -> Result<Var> {
    let diff = tape.sub(pred, target)?;
    let abs = tape.abs(diff);
    Ok(tape.mean(abs))
}

fn check_same<T>(op: &'static str, pred: &[T], target: &[T]) -> Result<()> {
    if pred.len() != target.len() {
        return Err(Error::shape(op, "elements", target.len(), pred.len()));
    }
    if pred.is_empty() {
        return Err(Error::invalid(op, "empty input"));
    }
    Ok(())
}

/// Element-mean absolute error, accumulated in f64.
pub fn mae_metric<T: Real>(pred: &[T], target: &[T]) -> Result<f64> {
    check_same("mae", pred, target)?;
    let s: f64 = pred.iter().zip(target).map(|(p, t)| (p.as_f64() - t.as_f64()).abs()).sum();
    Ok(s / pred.len() as f64)
}

/// Element-mean squared error, accumulated in f64.
pub fn mse_metric<T: Real>(pred: &[T], target: &[T]) -> Result<f64> {
    check_same("mse", pred, target)?;
    let s: f64 = pred
        .iter()
        .zip(target)
        .map(|(p, t)| (p.as_f64() - t.as_f64()).powi(2))
        .sum();
    Ok(s / pred.len() as f64)
}

/// How evaluation obtains each window's adjacency.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum EvalGraphs {
    Hard,
    /// Relaxed sampling with draws keyed on `(seed, window start)`.
    Sampled { smoothness: f64, seed: u64 },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub mse: f64,
    pub mae: f64,
    pub windows: usize,
    /// Wall time spent in forward passes.
    pub seconds: f64,
}

/// Predictions for one batch, `B×out`.
pub fn predict_batch<T: Real>(model: &TimeGnn<T>, batch: &WindowBatch<T>, graphs: EvalGraphs) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let (_, vars) = model.bind(&mut tape, false)?;
    let tau = model.config.window;
    let (smoothness, seed) = match graphs {
        EvalGraphs::Hard => (None, 0),
        EvalGraphs::Sampled { smoothness, seed } => (Some(T::lit(smoothness)), seed),
    };
    let out = model.forward_batch(&mut tape, &vars, &batch.inputs, smoothness, |k| {
        window_noise(seed, EVAL_SAMPLE_STREAM, batch.starts[k], tau)
    })?;
    Ok(tape.value(out).clone())
}

fn check_model_matches<T: Real>(model: &TimeGnn<T>, windows: &Windows<'_>) -> Result<()> {
    if windows.channels() != model.config.channels {
        return Err(Error::Data(format!(
            "model expects {} channels, data has {}",
            model.config.channels,
            windows.channels()
        )));
    }
    if windows.tau() != model.config.window || windows.output_dim() != model.config.output_dim() {
        return Err(Error::Data("window or horizon differ from the model's".into()));
    }
    Ok(())
}

/// Ordered predictions for every window, with their targets, as flat buffers.
pub fn predict_all<T: Real>(
    model: &TimeGnn<T>,
    windows: &Windows<'_>,
    batch: usize,
    graphs: EvalGraphs,
    threads: usize,
) -> Result<(Vec<T>, Vec<T>)> {
    check_model_matches(model, windows)?;
    let batches: Vec<WindowBatch<T>> = windows.batches(batch, Order::Sequential).collect();
    let run = |b: &WindowBatch<T>| predict_batch(model, b, graphs);
    let preds: Vec<Tensor<T>> = if threads <= 1 {
        batches.iter().map(run).collect::<Result<_>>()?
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        pool.install(|| batches.par_iter().map(run).collect::<Result<_>>())?
    };
    let pred = preds.into_iter().flat_map(Tensor::into_data).collect();
    let target = batches.iter().flat_map(|b| b.targets.data().to_vec()).collect();
    Ok((pred, target))
}

/// Deterministic ordered evaluation over every window of a segment.
pub fn evaluate<T: Real>(
    model: &TimeGnn<T>,
    windows: &Windows<'_>,
    batch: usize,
    graphs: EvalGraphs,
    threads: usize,
) -> Result<EvalMetrics> {
    let start = Instant::now();
    let (pred, target) = predict_all(model, windows, batch, graphs, threads)?;
    let seconds = start.elapsed().as_secs_f64();
    if pred.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("evaluation predictions".into()));
    }
    Ok(EvalMetrics {
        mse: mse_metric(&pred, &target)?,
        mae: mae_metric(&pred, &target)?,
        windows: windows.count(),
        seconds,
    })
}

/// One window's learned graph, as written by graph dumps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphDump {
    pub window_index: usize,
    /// `[i, j, theta, a]` for every forward pair.
    pub edges: Vec<(usize, usize, f64, f64)>,
}

/// Theta and adjacency for the windows starting at `starts`.
pub fn dump_graphs<T: Real>(
    model: &TimeGnn<T>,
    windows: &Windows<'_>,
    starts: &[usize],
    graphs: EvalGraphs,
) -> Result<Vec<GraphDump>> {
    check_model_matches(model, windows)?;
    let tau = model.config.window;
    let mut out = Vec::with_capacity(starts.len());
    for &start in starts {
        let mut tape = Tape::new();
        let (_, vars) = model.bind(&mut tape, false)?;
        let w = tape.constant(windows.input::<T>(start));
        let (policy_s, noise) = match graphs {
            EvalGraphs::Hard => (None, Vec::new()),
            EvalGraphs::Sampled { smoothness, seed } => {
                (Some(T::lit(smoothness)), window_noise(seed, EVAL_SAMPLE_STREAM, start, tau))
            }
        };
        let policy = match policy_s {
            Some(smoothness) => GraphPolicy::Relaxed { smoothness, noise: &noise },
            None => GraphPolicy::Hard,
        };
        let o = model.forward_window(&mut tape, &vars, w, policy)?;
        let (mode, s) = match policy_s {
            Some(s) => (GraphMode::RelaxedTrain, s),
            None => (GraphMode::HardEval, T::zero()),
        };
        let g = TemporalGraph::from_logits(
            tape.value(o.scores.logits).data(),
            tape.value(o.adjacency).clone(),
            s,
            mode,
        );
        out.push(GraphDump {
            window_index: start,
            edges: g.edge_list(),
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mse: f64,
    pub val_mae: f64,
    /// Largest pre-clip global gradient norm seen this epoch.
    pub max_grad_norm: f64,
    pub smoothness: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub seed: u64,
    /// Relaxed-graph training loss of the untrained model.
    pub initial_train_loss: f64,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_mae: f64,
    pub test: EvalMetrics,
    /// Mean wall time of a test-set forward pass per batch, in seconds.
    pub inference_seconds_per_batch: f64,
}

/// Best-so-far parameters and the optimizer state that produced them.
#[derive(Clone, Debug)]
pub struct Snapshot<T> {
    pub model: TimeGnn<T>,
    pub optimizer: OptimizerState<T>,
    pub epoch: usize,
}

pub struct TrainOutcome<T> {
    pub best: Snapshot<T>,
    pub scaler: ScalerState,
    pub report: MetricsReport,
}

fn non_finite(tape: &Tape<impl Real>, what: &str, epoch: usize, batch: usize) -> Error {
    let culprit = match tape.first_non_finite() {
        Some((v, op)) => format!("first non-finite tensor is node {} ({op})", v.index()),
        None => "no non-finite intermediate found".to_string(),
    };
    Error::NonFinite(format!("{what} at epoch {epoch}, batch {batch}; {culprit}"))
}

/// Forward + backward for one batch. Returns the loss and parameter gradients.
fn batch_gradients<T: Real>(
    model: &TimeGnn<T>,
    batch: &WindowBatch<T>,
    smoothness: T,
    seed: u64,
    stream: u64,
    at: (usize, usize),
) -> Result<(f64, Vec<Option<Tensor<T>>>)> {
    let mut tape = Tape::new();
    let (bound, vars) = model.bind(&mut tape, true)?;
    let tau = model.config.window;
    let pred = model.forward_batch(&mut tape, &vars, &batch.inputs, Some(smoothness), |k| {
        window_noise(seed, stream, batch.starts[k], tau)
    })?;
    let target = tape.constant(batch.targets_flat());
    let loss = mae_loss(&mut tape, pred, target)?;
    let value = tape.value(loss).data()[0].as_f64();
    if !value.is_finite() {
        return Err(non_finite(&tape, "loss", at.0, at.1));
    }
    tape.backward(loss)?;
    Ok((value, bound.grads(&tape)))
}

/// Relaxed-graph loss over all windows without updating anything.
fn mean_loss<T: Real>(model: &TimeGnn<T>, windows: &Windows<'_>, cfg: &RunConfig, seed: u64, stream: u64) -> Result<f64> {
    let s = T::lit(cfg.smoothness_at(0));
    let tau = model.config.window;
    let (mut total, mut n) = (0.0, 0usize);
    for batch in windows.batches::<T>(cfg.data.batch, Order::Sequential) {
        let mut tape = Tape::new();
        let (_, vars) = model.bind(&mut tape, false)?;
        let pred = model.forward_batch(&mut tape, &vars, &batch.inputs, Some(s), |k| {
            window_noise(seed, stream, batch.starts[k], tau)
        })?;
        let p = tape.value(pred).data().to_vec();
        total += mae_metric(&p, batch.targets.data())? * batch.len() as f64;
        n += batch.len();
    }
    Ok(total / n as f64)
}

pub fn eval_graphs(cfg: &RunConfig, seed: u64) -> EvalGraphs {
    if cfg.train.sample_eval {
        EvalGraphs::Sampled {
            smoothness: cfg.smoothness_at(cfg.train.epochs - 1),
            seed,
        }
    } else {
        EvalGraphs::Hard
    }
}

/// Trains one model with `seed`, keeping the snapshot with the lowest
/// validation MAE and scoring it once on the test segment.
///
/// `on_flush` receives the current best snapshot every
/// `checkpoint_every` epochs and once at the end.
pub fn train<T: Real>(
    splits: &PreparedSplits,
    cfg: &RunConfig,
    seed: u64,
    mut on_flush: impl FnMut(&Snapshot<T>) -> Result<()>,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    let (tau, h, mode, batch) = (cfg.data.window, cfg.data.horizon, cfg.data.mode, cfg.data.batch);
    let train_w = Windows::new(&splits.train, tau, h, mode)?;
    let val_w = Windows::new(&splits.val, tau, h, mode)?;
    let test_w = Windows::new(&splits.test, tau, h, mode)?;
    let threads = cfg.train.threads;
    let graphs = eval_graphs(cfg, seed);

    let mut model = TimeGnn::<T>::init(cfg.model_config(splits.train.channels()), seed)?;
    let mut opt = OptimizerState::new(&model.params, cfg.train.adam());
    let initial_train_loss = mean_loss(&model, &train_w, cfg, seed, INITIAL_LOSS_STREAM)?;

    let mut epochs = Vec::with_capacity(cfg.train.epochs);
    let mut best: Option<(f64, Snapshot<T>)> = None;
    for epoch in 0..cfg.train.epochs {
        let started = Instant::now();
        let s = cfg.smoothness_at(epoch);
        let (mut total, mut seen, mut max_norm) = (0.0, 0usize, 0.0f64);
        let order = Order::Shuffled { seed, epoch };
        for (b, batch) in train_w.batches::<T>(batch, order).enumerate() {
            let (loss, mut grads) = batch_gradients(&model, &batch, T::lit(s), seed, epoch as u64, (epoch, b))?;
            let norm = if cfg.train.clip_norm > 0.0 {
                clip_global_norm(&mut grads, cfg.train.clip_norm)
            } else {
                crate::optim::global_norm(&grads)
            };
            if !norm.is_finite() {
                return Err(Error::NonFinite(format!(
                    "gradient norm at epoch {epoch}, batch {b}"
                )));
            }
            max_norm = max_norm.max(norm);
            opt.adam_step(&mut model.params, &grads)?;
            if let Some((name, _)) = model.params.iter().find(|(_, t)| !t.all_finite()) {
                return Err(Error::NonFinite(format!(
                    "parameter `{name}` after update at epoch {epoch}, batch {b}"
                )));
            }
            total += loss * batch.len() as f64;
            seen += batch.len();
        }
        let val = evaluate(&model, &val_w, batch, graphs, threads)?;
        epochs.push(EpochRecord {
            epoch,
            train_loss: total / seen as f64,
            val_mse: val.mse,
            val_mae: val.mae,
            max_grad_norm: max_norm,
            smoothness: s,
            seconds: started.elapsed().as_secs_f64(),
        });
        if best.as_ref().is_none_or(|(v, _)| val.mae < *v) {
            best = Some((
                val.mae,
                Snapshot {
                    model: model.clone(),
                    optimizer: opt.clone(),
                    epoch,
                },
            ));
        }
        let every = cfg.train.checkpoint_every;
        if every > 0 && (epoch + 1) % every == 0 && epoch + 1 < cfg.train.epochs {
            on_flush(&best.as_ref().expect("set above").1)?;
        }
    }
    let (best_val_mae, best) = best.expect("at least one epoch");
    on_flush(&best)?;

    let test = evaluate(&best.model, &test_w, batch, graphs, threads)?;
    let batches = test_w.batch_count(batch) as f64;
    Ok(TrainOutcome {
        report: MetricsReport {
            seed,
            initial_train_loss,
            epochs,
            best_epoch: best.epoch,
            best_val_mae,
            test,
            inference_seconds_per_batch: test.seconds / batches,
        },
        best,
        scaler: splits.scaler.clone(),
    })
}

/// Mean and half-range of a metric over runs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub mean: f64,
    pub half_range: f64,
}

impl Spread {
    pub fn of(values: &[f64]) -> Self {
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Self {
            mean: values.iter().sum::<f64>() / values.len() as f64,
            half_range: (hi - lo) / 2.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub runs: Vec<MetricsReport>,
    pub test_mse: Spread,
    pub test_mae: Spread,
}

impl RunSummary {
    pub fn new(runs: Vec<MetricsReport>) -> Self {
        let mse: Vec<f64> = runs.iter().map(|r| r.test.mse).collect();
        let mae: Vec<f64> = runs.iter().map(|r| r.test.mae).collect();
        Self {
            test_mse: Spread::of(&mse),
            test_mae: Spread::of(&mae),
            runs,
        }
    }
}
