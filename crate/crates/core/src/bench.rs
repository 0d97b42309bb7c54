//! Inference and epoch timing over channel-count and window-size sweeps.
//!
//! Inference time covers scaling the raw evaluation segment plus forward
//! passes over all of its windows, reported per batch. Data generation and
//! splitting are excluded. The first repetition is a discarded warm-up.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{pair_count, Tape};
use crate::config::RunConfig;
use crate::data::{split, Order, RawSeries, ScalerState, Windows};
use crate::error::{Error, Result};
use crate::model::{window_noise, TimeGnn};
use crate::optim::{clip_global_norm, OptimizerState};
use crate::seed::derive_seed;
use crate::tensor::{Real, Tensor};
use crate::train::{mae_loss, predict_all, EvalGraphs};

pub const SYNTHETIC_LEN: usize = 5000;
pub const MIN_REPS: usize = 3;

pub const CSV_HEADER: &str = "dataset,m,tau,infer_ms,epoch_s,reps,nodes,pairs,status";

/// Independent Gaussian random walks, one per channel.
pub fn random_walks(len: usize, m: usize, seed: u64) -> RawSeries {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x5741_4c4b, m as u64]));
    let mut level = vec![0.0f64; m];
    let mut values = Vec::with_capacity(len * m);
    for _ in 0..len {
        for x in level.iter_mut() {
            let step: f64 = StandardNormal.sample(&mut rng);
            *x += step;
        }
        values.extend_from_slice(&level);
    }
    RawSeries::new(values, (0..m).map(|c| format!("walk{c}")).collect(), "synthetic").expect("well-formed")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub dataset: String,
    pub m: usize,
    pub tau: usize,
    /// Median warm inference time per batch, milliseconds.
    pub infer_ms: Option<f64>,
    /// Wall time of one training epoch, seconds.
    pub epoch_s: Option<f64>,
    pub reps: usize,
    /// Graph nodes per window; always `tau`.
    pub nodes: usize,
    /// Candidate edges per window, `tau·(tau−1)/2`.
    pub pairs: usize,
    /// `ok` or `skipped: <reason>`.
    pub status: String,
    pub hardware: String,
}

impl BenchRecord {
    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.6}"));
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.dataset,
            self.m,
            self.tau,
            opt(self.infer_ms),
            opt(self.epoch_s),
            self.reps,
            self.nodes,
            self.pairs,
            self.status.replace(',', ";")
        )
    }

    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }
}

#[derive(Clone, Debug)]
pub struct BenchOptions {
    pub reps: usize,
    /// Also time one full training epoch per point.
    pub time_epoch: bool,
    pub threads: usize,
    pub seed: u64,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            reps: 5,
            time_epoch: true,
            threads: 1,
            seed: 0,
        }
    }
}

pub fn hardware_note(threads: usize) -> String {
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    format!(
        "{}-{}, {cores} logical cores available, {threads} thread(s) used",
        std::env::consts::OS,
        std::env::consts::ARCH
    )
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Times one sweep point on `series`. Infeasible points come back skipped.
pub fn bench_point<T: Real>(
    dataset: &str,
    series: &RawSeries,
    tau: usize,
    cfg: &RunConfig,
    opts: &BenchOptions,
) -> BenchRecord {
    let mut record = BenchRecord {
        dataset: dataset.to_string(),
        m: series.channels(),
        tau,
        infer_ms: None,
        epoch_s: None,
        reps: opts.reps.max(MIN_REPS),
        nodes: tau,
        pairs: pair_count(tau),
        status: "ok".into(),
        hardware: hardware_note(opts.threads),
    };
    if let Err(e) = measure::<T>(series, tau, cfg, opts, &mut record) {
        record.status = format!("skipped: {e}");
    }
    record
}

fn measure<T: Real>(
    series: &RawSeries,
    tau: usize,
    cfg: &RunConfig,
    opts: &BenchOptions,
    record: &mut BenchRecord,
) -> Result<()> {
    let mut cfg = cfg.clone();
    cfg.data.window = tau;
    cfg.validate()?;
    let (h, mode, batch) = (cfg.data.horizon, cfg.data.mode, cfg.data.batch);
    let [train_raw, _, eval_raw] = split(series, &cfg.data.split, tau + h)?;
    let scaler = ScalerState::fit(&train_raw, cfg.data.scaler)?;
    let model = TimeGnn::<T>::init(cfg.model_config(series.channels()), opts.seed)?;

    let batches = Windows::new(&eval_raw, tau, h, mode)?.batch_count(batch) as f64;
    let mut times = Vec::with_capacity(record.reps);
    for rep in 0..=record.reps {
        let started = Instant::now();
        let scaled = scaler.transform(&eval_raw)?;
        let windows = Windows::new(&scaled, tau, h, mode)?;
        let (pred, _) = predict_all(&model, &windows, batch, EvalGraphs::Hard, opts.threads)?;
        std::hint::black_box(pred);
        if rep > 0 {
            times.push(started.elapsed().as_secs_f64() * 1e3 / batches);
        }
    }
    record.infer_ms = Some(median(times));

    if opts.time_epoch {
        let train = scaler.transform(&train_raw)?;
        let windows = Windows::new(&train, tau, h, mode)?;
        let mut model = model;
        let mut opt = OptimizerState::new(&model.params, cfg.train.adam());
        let s = T::lit(cfg.model.smoothness);
        let started = Instant::now();
        for b in windows.batches::<T>(batch, Order::Shuffled { seed: opts.seed, epoch: 0 }) {
            let mut tape = Tape::new();
            let (bound, vars) = model.bind(&mut tape, true)?;
            let pred = model.forward_batch(&mut tape, &vars, &b.inputs, Some(s), |k| {
                window_noise(opts.seed, 0, b.starts[k], tau)
            })?;
            let target = tape.constant(b.targets_flat());
            let loss = mae_loss(&mut tape, pred, target)?;
            tape.backward(loss)?;
            let mut grads: Vec<Option<Tensor<T>>> = bound.grads(&tape);
            drop(bound);
            if cfg.train.clip_norm > 0.0 {
                clip_global_norm(&mut grads, cfg.train.clip_norm);
            }
            opt.adam_step(&mut model.params, &grads)?;
        }
        record.epoch_s = Some(started.elapsed().as_secs_f64());
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub enum Sweep {
    /// Vary channel count at the configured window.
    Channels(Vec<usize>),
    /// Vary window size at a fixed channel count.
    Windows { taus: Vec<usize>, channels: usize },
}

/// Runs a sweep over synthetic random walks.
pub fn bench_scaling<T: Real>(cfg: &RunConfig, sweep: &Sweep, opts: &BenchOptions) -> Vec<BenchRecord> {
    match sweep {
        Sweep::Channels(ms) => ms
            .iter()
            .map(|&m| {
                let series = random_walks(SYNTHETIC_LEN, m, opts.seed);
                bench_point::<T>("synthetic-walk", &series, cfg.data.window, cfg, opts)
            })
            .collect(),
        Sweep::Windows { taus, channels } => {
            let series = random_walks(SYNTHETIC_LEN, *channels, opts.seed);
            taus.iter()
                .map(|&tau| bench_point::<T>("synthetic-walk", &series, tau, cfg, opts))
                .collect()
        }
    }
}

pub fn write_csv(records: &[BenchRecord], path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut text = format!("{CSV_HEADER}\n");
    for r in records {
        text.push_str(&r.csv_row());
        text.push('\n');
    }
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.model.d = 4;
        cfg.model.steps = 1;
        cfg.data.batch = 32;
        cfg
    }

    #[test]
    fn walks_are_seeded() {
        let a = random_walks(50, 3, 1);
        assert_eq!(a, random_walks(50, 3, 1));
        assert_ne!(a, random_walks(50, 3, 2));
        assert_eq!((a.len(), a.channels()), (50, 3));
    }

    #[test]
    fn pair_counts_follow_window_size() {
        let pairs: Vec<usize> = [24, 48, 96].iter().map(|&t| pair_count(t)).collect();
        assert_eq!(pairs, vec![276, 1128, 4560]);
    }

    #[test]
    fn records_and_skips() {
        let cfg = tiny_cfg();
        let opts = BenchOptions {
            reps: 3,
            time_epoch: false,
            ..Default::default()
        };
        let series = random_walks(400, 2, 0);
        let ok = bench_point::<f32>("walk", &series, 8, &cfg, &opts);
        assert!(ok.is_ok(), "{}", ok.status);
        assert!(ok.infer_ms.unwrap() > 0.0);
        assert_eq!((ok.nodes, ok.pairs), (8, 28));

        let skipped = bench_point::<f32>("walk", &series, 96, &cfg, &opts);
        assert!(skipped.status.starts_with("skipped"));
        assert!(skipped.csv_row().ends_with(&skipped.status.replace(',', ";")));
        assert_eq!(skipped.csv_row().split(',').count(), CSV_HEADER.split(',').count());
    }

    #[test]
    fn epoch_timing_is_recorded() {
        let cfg = tiny_cfg();
        let opts = BenchOptions {
            reps: 3,
            ..Default::default()
        };
        let series = random_walks(200, 2, 0);
        let r = bench_point::<f32>("walk", &series, 6, &cfg, &opts);
        assert!(r.epoch_s.unwrap() > 0.0);
    }
}
