//! Command-line front end. `main.rs` only forwards `argv` to [`run`].

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use crate::bench::{self, BenchOptions, Sweep};
use crate::checkpoint::{read_header, Checkpoint};
use crate::config::{preset_width, Precision, RunConfig};
use crate::data::{ingest_csv, prepare, split, RawSeries, ScalerPolicy, ScalerState, Windows};
use crate::error::{Error, Result};
use crate::tensor::Real;
use crate::train::{self, dump_graphs, evaluate, predict_batch, EvalGraphs, RunSummary};

const DEFAULT_CHECKPOINT: &str = "timegnn.ckpt";
const DEFAULT_METRICS: &str = "metrics.json";

#[derive(Parser, Debug)]
#[command(name = "timegnn", version, about = "Temporal graph forecasting over multivariate series")]
struct Cli {
    /// TOML config; falls back to $TIMEGNN_CONFIG, then built-in defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train, select the best validation snapshot, and score it on the test split.
    Train(TrainArgs),
    /// Report MSE/MAE of a checkpoint on a CSV file.
    Eval(EvalArgs),
    /// Forecast from the last window of a CSV file.
    Predict(PredictArgs),
    /// Time inference and training epochs over channel or window sweeps.
    Bench(BenchArgs),
    /// Write per-window edge probabilities and adjacencies as JSON.
    DumpGraphs(DumpArgs),
}

#[derive(Args, Debug, Default)]
struct Overrides {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    d: Option<usize>,
    /// Width preset by dataset name (exchange, weather, electricity, solar, traffic).
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    smoothness: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    precision: Option<PrecisionArg>,
    #[arg(long)]
    scaler: Option<ScalerArg>,
    /// Sample graphs at evaluation instead of thresholding theta.
    #[arg(long)]
    sample_eval: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PrecisionArg {
    F32,
    F64,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ScalerArg {
    FitTrain,
    PerSplit,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    overrides: Overrides,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Also dump the best model's test-split graphs here.
    #[arg(long)]
    dump_graphs: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, Default, ValueEnum)]
enum Segment {
    /// The whole file.
    #[default]
    All,
    Train,
    Val,
    Test,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Which chronological split of the file to score.
    #[arg(long, value_enum, default_value_t = Segment::All)]
    segment: Segment,
    #[arg(long, default_value_t = 16)]
    batch: usize,
    #[arg(long, default_value_t = 1)]
    threads: usize,
    #[arg(long)]
    sample_eval: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// CSV with at least `window` rows; the last `window` rows are used.
    #[arg(long)]
    data: PathBuf,
}

#[derive(Args, Debug)]
struct BenchArgs {
    /// Window sizes to sweep, e.g. 24,48,96,192.
    #[arg(long, value_delimiter = ',', conflicts_with = "channels")]
    windows: Option<Vec<usize>>,
    /// Channel counts to sweep, e.g. 8,32,128.
    #[arg(long, value_delimiter = ',')]
    channels: Option<Vec<usize>>,
    /// Channel count used by a window sweep.
    #[arg(long, default_value_t = 8)]
    m: usize,
    #[arg(long, default_value_t = 5)]
    reps: usize,
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// Skip the training-epoch timing.
    #[arg(long)]
    no_epoch: bool,
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long)]
    json: Option<PathBuf>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct DumpArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = Segment::All)]
    segment: Segment,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Dump at most this many windows (from the start of the segment).
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long)]
    sample_eval: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code. Failures print one JSON line on stderr.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return 0;
        }
        Err(e) => {
            let message = e.to_string();
            let first = message.lines().next().unwrap_or("invalid arguments");
            emit_error("usage", first.trim_start_matches("error: "));
            return 2;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            emit_error(e.kind(), &e.to_string());
            1
        }
    }
}

fn emit_error(kind: &str, message: &str) {
    let line = json!({ "error": { "kind": kind, "message": message } });
    eprintln!("{line}");
}

fn dispatch(cli: Cli) -> Result<()> {
    let cfg = || RunConfig::resolve(cli.config.as_deref());
    match cli.command {
        Command::Train(args) => {
            let mut cfg = cfg()?;
            apply_overrides(&mut cfg, &args.overrides)?;
            if let Some(p) = args.checkpoint {
                cfg.output.checkpoint = Some(p);
            }
            if let Some(p) = args.metrics {
                cfg.output.metrics = Some(p);
            }
            if let Some(p) = args.dump_graphs {
                cfg.output.graphs = Some(p);
            }
            cfg.validate()?;
            match cfg.train.precision {
                Precision::F32 => run_train::<f32>(&cfg),
                Precision::F64 => run_train::<f64>(&cfg),
            }
        }
        Command::Eval(args) => with_dtype(&args.checkpoint.clone(), EvalCmd(args)),
        Command::Predict(args) => with_dtype(&args.checkpoint.clone(), PredictCmd(args)),
        Command::DumpGraphs(args) => with_dtype(&args.checkpoint.clone(), DumpCmd(args)),
        Command::Bench(args) => run_bench(cfg()?, args),
    }
}

fn apply_overrides(cfg: &mut RunConfig, o: &Overrides) -> Result<()> {
    if let Some(p) = &o.data {
        cfg.data.path = Some(p.clone());
    }
    if let Some(name) = &o.preset {
        cfg.model.d = preset_width(name).ok_or_else(|| Error::Config(format!("unknown preset `{name}`")))?;
    }
    macro_rules! set {
        ($($src:ident => $($dst:ident).+),* $(,)?) => {
            $(if let Some(v) = o.$src { cfg.$($dst).+ = v; })*
        };
    }
    set!(
        window => data.window,
        horizon => data.horizon,
        batch => data.batch,
        d => model.d,
        steps => model.steps,
        smoothness => model.smoothness,
        lr => train.lr,
        epochs => train.epochs,
        seed => train.seed,
        runs => train.runs,
        threads => train.threads,
    );
    if let Some(p) = o.precision {
        cfg.train.precision = match p {
            PrecisionArg::F32 => Precision::F32,
            PrecisionArg::F64 => Precision::F64,
        };
    }
    if let Some(s) = o.scaler {
        cfg.data.scaler = match s {
            ScalerArg::FitTrain => ScalerPolicy::FitTrain,
            ScalerArg::PerSplit => ScalerPolicy::PerSplit,
        };
    }
    if o.sample_eval {
        cfg.train.sample_eval = true;
    }
    Ok(())
}

fn load_series(cfg: &RunConfig) -> Result<RawSeries> {
    let path = cfg
        .data
        .path
        .as_ref()
        .ok_or_else(|| Error::Config("no dataset: set [data] path or pass --data".into()))?;
    ingest_csv(path, &cfg.data.ingest_options())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn print_json(value: &impl Serialize) -> Result<()> {
    let line = serde_json::to_string(value)?;
    let mut out = std::io::stdout().lock();
    writeln!(out, "{line}").map_err(|e| Error::io("<stdout>", e))
}

/// `model.ckpt` → `model.run2.ckpt` when several runs are requested.
fn run_path(base: &Path, run: usize, runs: usize) -> PathBuf {
    if runs == 1 {
        return base.to_path_buf();
    }
    let stem = base.file_stem().map_or("model".into(), |s| s.to_string_lossy().into_owned());
    let name = match base.extension() {
        Some(ext) => format!("{stem}.run{run}.{}", ext.to_string_lossy()),
        None => format!("{stem}.run{run}"),
    };
    base.with_file_name(name)
}

fn run_train<T: Real>(cfg: &RunConfig) -> Result<()> {
    let series = load_series(cfg)?;
    let (tau, h) = (cfg.data.window, cfg.data.horizon);
    let splits = prepare(&series, &cfg.data.split, tau + h, cfg.data.scaler)?;
    let ckpt_base = cfg.output.checkpoint.clone().unwrap_or_else(|| DEFAULT_CHECKPOINT.into());
    let effective = cfg.effective();
    let hash = cfg.hash();
    let runs = cfg.train.runs;

    let mut reports = Vec::with_capacity(runs);
    let mut checkpoints = Vec::with_capacity(runs);
    for run in 0..runs {
        let seed = cfg.train.seed + run as u64;
        let path = run_path(&ckpt_base, run, runs);
        let save = |snap: &train::Snapshot<T>| {
            Checkpoint {
                model: snap.model.clone(),
                optimizer: snap.optimizer.clone(),
                scaler: splits.scaler.clone(),
                seed,
                epoch: snap.epoch,
                config_hash: hash.clone(),
                run_config: Some(effective.clone()),
            }
            .save(&path)
        };
        let outcome = train::train::<T>(&splits, cfg, seed, save)?;
        if run == 0 {
            if let Some(graphs_path) = &cfg.output.graphs {
                let test_w = Windows::new(&splits.test, tau, h, cfg.data.mode)?;
                let starts: Vec<usize> = (0..test_w.count()).collect();
                let dumps = dump_graphs(&outcome.best.model, &test_w, &starts, train::eval_graphs(cfg, seed))?;
                write_json(graphs_path, &dumps)?;
            }
        }
        checkpoints.push(path.display().to_string());
        reports.push(outcome.report);
    }
    let summary = RunSummary::new(reports);
    let metrics = json!({
        "config_hash": hash,
        "config": effective,
        "checkpoints": checkpoints,
        "summary": summary,
    });
    let metrics_path = cfg.output.metrics.clone().unwrap_or_else(|| DEFAULT_METRICS.into());
    write_json(&metrics_path, &metrics)?;
    print_json(&json!({
        "test_mse": summary.test_mse,
        "test_mae": summary.test_mae,
        "runs": runs,
        "checkpoints": checkpoints,
        "metrics": metrics_path.display().to_string(),
    }))
}

/// Commands that operate on a loaded checkpoint of either dtype.
trait WithModel {
    fn call<T: Real>(self, ckpt: Checkpoint<T>, path: &Path) -> Result<()>;
}

fn with_dtype(path: &Path, cmd: impl WithModel) -> Result<()> {
    match read_header(path)?.dtype.as_str() {
        "f32" => cmd.call(Checkpoint::<f32>::load(path)?, path),
        "f64" => cmd.call(Checkpoint::<f64>::load(path)?, path),
        other => Err(Error::Checkpoint(format!("unsupported dtype `{other}`"))),
    }
}

fn ingest_like<T: Real>(ckpt: &Checkpoint<T>, data: &Path) -> Result<RawSeries> {
    let opts = ckpt
        .run_config
        .as_ref()
        .map(|c| c.data.ingest_options())
        .unwrap_or_default();
    let series = ingest_csv(data, &opts)?;
    if series.channels() != ckpt.model.config.channels {
        return Err(Error::Data(format!(
            "checkpoint expects {} channels, {} has {}",
            ckpt.model.config.channels,
            data.display(),
            series.channels()
        )));
    }
    Ok(series)
}

/// Raw rows of the chosen segment, scaled the way the checkpoint was trained.
fn scaled_segment<T: Real>(ckpt: &Checkpoint<T>, series: &RawSeries, segment: Segment) -> Result<RawSeries> {
    let c = &ckpt.model.config;
    let need = c.window + c.horizon;
    let raw = match segment {
        Segment::All => series.clone(),
        s => {
            let spec = ckpt.run_config.as_ref().map(|r| r.data.split).unwrap_or_default();
            let [a, b, t] = split(series, &spec, need)?;
            match s {
                Segment::Train => a,
                Segment::Val => b,
                _ => t,
            }
        }
    };
    match ckpt.scaler.policy {
        ScalerPolicy::FitTrain => ckpt.scaler.transform(&raw),
        ScalerPolicy::PerSplit => ScalerState::fit(&raw, ScalerPolicy::PerSplit)?.transform(&raw),
    }
}

fn eval_graphs_for<T: Real>(ckpt: &Checkpoint<T>, sample: bool, seed: u64) -> EvalGraphs {
    if sample {
        let s = ckpt.run_config.as_ref().map_or(0.3, |c| c.smoothness_at(c.train.epochs - 1));
        EvalGraphs::Sampled { smoothness: s, seed }
    } else {
        EvalGraphs::Hard
    }
}

struct EvalCmd(EvalArgs);

impl WithModel for EvalCmd {
    fn call<T: Real>(self, ckpt: Checkpoint<T>, path: &Path) -> Result<()> {
        let a = self.0;
        let series = ingest_like(&ckpt, &a.data)?;
        let scaled = scaled_segment(&ckpt, &series, a.segment)?;
        let c = &ckpt.model.config;
        let windows = Windows::new(&scaled, c.window, c.horizon, c.mode)?;
        let graphs = eval_graphs_for(&ckpt, a.sample_eval, a.seed);
        let m = evaluate(&ckpt.model, &windows, a.batch, graphs, a.threads)?;
        print_json(&json!({
            "checkpoint": path.display().to_string(),
            "config_hash": ckpt.config_hash,
            "mse": m.mse,
            "mae": m.mae,
            "windows": m.windows,
            "seconds": m.seconds,
        }))
    }
}

struct PredictCmd(PredictArgs);

impl WithModel for PredictCmd {
    fn call<T: Real>(self, ckpt: Checkpoint<T>, _: &Path) -> Result<()> {
        let series = ingest_like(&ckpt, &self.0.data)?;
        let c = &ckpt.model.config;
        let tail = series.tail(c.window).map_err(|_| {
            Error::Data(format!("need at least {} rows, got {}", c.window, series.len()))
        })?;
        let scaled = match ckpt.scaler.policy {
            ScalerPolicy::FitTrain => ckpt.scaler.transform(&tail)?,
            ScalerPolicy::PerSplit => ScalerState::fit(&tail, ScalerPolicy::PerSplit)?.transform(&tail)?,
        };
        let pred = forecast_last::<T>(&ckpt, &scaled)?;
        let values = ckpt.scaler.inverse_values(&pred)?;
        print_json(&json!({
            "channels": series.channel_names(),
            "horizon": c.horizon,
            "mode": c.mode,
            "scaled": pred,
            "values": values,
        }))
    }
}

/// Hard-graph forecast for a window holding exactly `τ` scaled rows.
pub fn forecast_last<T: Real>(ckpt: &Checkpoint<T>, scaled_window: &RawSeries) -> Result<Vec<f64>> {
    let c = &ckpt.model.config;
    let batch = crate::data::WindowBatch {
        inputs: crate::tensor::Tensor::new(
            vec![1, c.window, c.channels],
            scaled_window.values().iter().map(|&v| T::lit(v)).collect(),
        )?,
        targets: crate::tensor::Tensor::zeros(&[1, c.output_dim()]),
        starts: vec![0],
    };
    let out = predict_batch(&ckpt.model, &batch, EvalGraphs::Hard)?;
    Ok(out.data().iter().map(|v| v.as_f64()).collect())
}

struct DumpCmd(DumpArgs);

impl WithModel for DumpCmd {
    fn call<T: Real>(self, ckpt: Checkpoint<T>, _: &Path) -> Result<()> {
        let a = self.0;
        let series = ingest_like(&ckpt, &a.data)?;
        let scaled = scaled_segment(&ckpt, &series, a.segment)?;
        let c = &ckpt.model.config;
        let windows = Windows::new(&scaled, c.window, c.horizon, c.mode)?;
        let n = a.limit.map_or(windows.count(), |l| l.min(windows.count()));
        let starts: Vec<usize> = (0..n).collect();
        let graphs = eval_graphs_for(&ckpt, a.sample_eval, a.seed);
        let dumps = dump_graphs(&ckpt.model, &windows, &starts, graphs)?;
        match a.out {
            Some(p) => write_json(&p, &dumps),
            None => print_json(&dumps),
        }
    }
}

fn run_bench(mut cfg: RunConfig, a: BenchArgs) -> Result<()> {
    if let Some(d) = a.d {
        cfg.model.d = d;
    }
    let seed = a.seed.unwrap_or(cfg.train.seed);
    let sweep = match (a.windows, a.channels) {
        (Some(taus), _) => Sweep::Windows { taus, channels: a.m },
        (None, Some(ms)) => Sweep::Channels(ms),
        (None, None) => Sweep::Channels(vec![8, 32, 128]),
    };
    if a.reps < bench::MIN_REPS {
        return Err(Error::Config(format!("--reps must be at least {}", bench::MIN_REPS)));
    }
    let opts = BenchOptions {
        reps: a.reps,
        time_epoch: !a.no_epoch,
        threads: a.threads.max(1),
        seed,
    };
    let records = match cfg.train.precision {
        Precision::F32 => bench::bench_scaling::<f32>(&cfg, &sweep, &opts),
        Precision::F64 => bench::bench_scaling::<f64>(&cfg, &sweep, &opts),
    };
    if let Some(p) = &a.csv {
        bench::write_csv(&records, p)?;
    }
    if let Some(p) = &a.json {
        write_json(p, &json!({ "config": cfg.effective(), "records": records }))?;
    }
    println!("{}", bench::CSV_HEADER);
    for r in &records {
        println!("{}", r.csv_row());
    }
    Ok(())
}
