//! CSV ingestion, chronological splitting, standard scaling and sliding windows.

use std::fs::File;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::derive_seed;
use crate::tensor::{Real, Tensor};

/// Smallest standard deviation used when scaling.
pub const STD_FLOOR: f64 = 1e-8;

/// A `T×m` multivariate series, row-major (rows are timesteps).
#[derive(Clone, Debug, PartialEq)]
pub struct RawSeries {
    values: Vec<f64>,
    channels: Vec<String>,
    source: PathBuf,
}

impl RawSeries {
    pub fn new(values: Vec<f64>, channels: Vec<String>, source: impl Into<PathBuf>) -> Result<Self> {
        let m = channels.len();
        if m == 0 {
            return Err(Error::Data("series has no channels".into()));
        }
        if !values.len().is_multiple_of(m) {
            return Err(Error::Data(format!(
                "{} values do not fill rows of {m} channels",
                values.len()
            )));
        }
        Ok(Self {
            values,
            channels,
            source: source.into(),
        })
    }

    /// Unnamed channels `c0, c1, …` built from rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let m = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != m) {
            return Err(Error::Data(format!("ragged rows: {} vs {m} columns", bad.len())));
        }
        Self::new(rows.concat(), default_names(m), PathBuf::new())
    }

    pub fn len(&self) -> usize {
        self.values.len() / self.channels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.channels.len()
    }

    pub fn channel_names(&self) -> &[String] {
        &self.channels
    }

    pub fn source(&self) -> &Path {
        &self.source
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, t: usize) -> &[f64] {
        let m = self.channels();
        &self.values[t * m..(t + 1) * m]
    }

    /// Rows `start..end` as a new series.
    pub fn slice(&self, start: usize, end: usize) -> RawSeries {
        let m = self.channels();
        RawSeries {
            values: self.values[start * m..end * m].to_vec(),
            channels: self.channels.clone(),
            source: self.source.clone(),
        }
    }

    /// The last `rows` timesteps.
    pub fn tail(&self, rows: usize) -> Result<RawSeries> {
        if rows > self.len() {
            return Err(Error::Data(format!(
                "need {rows} rows, series has {}",
                self.len()
            )));
        }
        Ok(self.slice(self.len() - rows, self.len()))
    }

    pub fn concat(parts: &[&RawSeries]) -> Result<RawSeries> {
        let first = parts.first().ok_or_else(|| Error::Data("nothing to concatenate".into()))?;
        let mut values = Vec::new();
        for p in parts {
            if p.channels() != first.channels() {
                return Err(Error::Data("channel count mismatch".into()));
            }
            values.extend_from_slice(&p.values);
        }
        RawSeries::new(values, first.channels.clone(), first.source.clone())
    }

    pub fn require_len(&self, needed: usize, what: &str) -> Result<()> {
        if self.len() < needed {
            return Err(Error::Data(format!(
                "{what} has {} timesteps, need at least {needed} (window + horizon)",
                self.len()
            )));
        }
        Ok(())
    }
}

fn default_names(m: usize) -> Vec<String> {
    (0..m).map(|c| format!("c{c}")).collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Detect {
    #[default]
    Auto,
    Yes,
    No,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MissingPolicy {
    /// Forward-fill, then back-fill leading gaps.
    #[default]
    Fill,
    Error,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IngestOptions {
    pub header: Detect,
    /// Leading timestamp column to drop.
    pub timestamp: Detect,
    pub missing: MissingPolicy,
}

fn is_missing(cell: &str) -> bool {
    matches!(
        cell.trim().to_ascii_lowercase().as_str(),
        "" | "na" | "nan" | "null" | "none" | "?"
    )
}

fn parse_cell(cell: &str) -> Option<f64> {
    cell.trim().parse::<f64>().ok().filter(|v| v.is_finite())
}

/// Reads a comma-delimited numeric table into a [`RawSeries`].
pub fn ingest_csv(path: impl AsRef<Path>, opts: &IngestOptions) -> Result<RawSeries> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(file);
    let mut records = Vec::new();
    for (k, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            row: k + 1,
            col: 0,
            message: e.to_string(),
        })?;
        if rec.iter().all(|c| c.trim().is_empty()) {
            continue;
        }
        records.push((k + 1, rec));
    }
    if records.is_empty() {
        return Err(Error::Data(format!("{}: no rows", path.display())));
    }

    let header = match opts.header {
        Detect::Yes => true,
        Detect::No => false,
        Detect::Auto => records[0]
            .1
            .iter()
            .any(|c| !is_missing(c) && parse_cell(c).is_none()),
    };
    let first_data = usize::from(header);
    let timestamp = match opts.timestamp {
        Detect::Yes => true,
        Detect::No => false,
        Detect::Auto => records
            .get(first_data)
            .and_then(|(_, r)| r.get(0))
            .is_some_and(|c| !is_missing(c) && parse_cell(c).is_none()),
    };
    let skip = usize::from(timestamp);

    let width = records[first_data.min(records.len() - 1)].1.len();
    if width <= skip {
        return Err(Error::Data(format!("{}: no value columns", path.display())));
    }
    let m = width - skip;
    let channels = if header {
        records[0].1.iter().skip(skip).map(|c| c.trim().to_string()).collect()
    } else {
        default_names(m)
    };

    let mut cells: Vec<Option<f64>> = Vec::with_capacity((records.len() - first_data) * m);
    for (line, rec) in &records[first_data..] {
        if rec.len() != width {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                row: *line,
                col: rec.len() + 1,
                message: format!("expected {width} columns, found {}", rec.len()),
            });
        }
        for (c, cell) in rec.iter().enumerate().skip(skip) {
            if is_missing(cell) {
                cells.push(None);
            } else {
                match parse_cell(cell) {
                    Some(v) => cells.push(Some(v)),
                    None => {
                        return Err(Error::Parse {
                            path: path.to_path_buf(),
                            row: *line,
                            col: c + 1,
                            message: format!("cannot parse `{cell}` as a number"),
                        })
                    }
                }
            }
        }
    }
    let values = fill_missing(cells, m, opts.missing, path)?;
    RawSeries::new(values, channels, path)
}

fn fill_missing(cells: Vec<Option<f64>>, m: usize, policy: MissingPolicy, path: &Path) -> Result<Vec<f64>> {
    let rows = cells.len() / m;
    let mut out = vec![0.0; cells.len()];
    for c in 0..m {
        let mut last: Option<f64> = None;
        let mut first_seen: Option<f64> = None;
        let mut leading = 0;
        for t in 0..rows {
            match cells[t * m + c] {
                Some(v) => {
                    out[t * m + c] = v;
                    last = Some(v);
                    first_seen.get_or_insert(v);
                }
                None if policy == MissingPolicy::Error => {
                    return Err(Error::Data(format!(
                        "{}: missing value at data row {}, channel {}",
                        path.display(),
                        t + 1,
                        c + 1
                    )));
                }
                None => match last {
                    Some(v) => out[t * m + c] = v,
                    None => leading += 1,
                },
            }
        }
        match first_seen {
            Some(v) => (0..leading).for_each(|t| out[t * m + c] = v),
            None => {
                return Err(Error::Data(format!(
                    "{}: channel {} has no values",
                    path.display(),
                    c + 1
                )))
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train: 0.7,
            val: 0.1,
            test: 0.2,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|&f| !(f > 0.0)) {
            return Err(Error::Config(format!("split fractions must be positive: {parts:?}")));
        }
        let total: f64 = parts.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split fractions sum to {total}, expected 1")));
        }
        Ok(())
    }

    /// `(⌊train·T⌋, ⌊val·T⌋, remainder)`.
    pub fn lengths(&self, total: usize) -> (usize, usize, usize) {
        let floor = |f: f64| (f * total as f64 + 1e-9).floor() as usize;
        let train = floor(self.train).min(total);
        let val = floor(self.val).min(total - train);
        (train, val, total - train - val)
    }
}

/// Contiguous chronological train/validation/test segments. Each must hold at
/// least `min_len` timesteps.
pub fn split(series: &RawSeries, spec: &SplitSpec, min_len: usize) -> Result<[RawSeries; 3]> {
    spec.validate()?;
    let (a, b, _) = spec.lengths(series.len());
    let parts = [
        series.slice(0, a),
        series.slice(a, a + b),
        series.slice(a + b, series.len()),
    ];
    for (name, p) in ["train", "validation", "test"].iter().zip(&parts) {
        p.require_len(min_len, &format!("{name} segment"))?;
    }
    Ok(parts)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScalerPolicy {
    /// Statistics from the training segment, applied to every split.
    #[default]
    FitTrain,
    /// Each split scaled by its own statistics.
    PerSplit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalerState {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub policy: ScalerPolicy,
}

impl ScalerState {
    /// Per-channel mean and population standard deviation (floored at [`STD_FLOOR`]).
    pub fn fit(segment: &RawSeries, policy: ScalerPolicy) -> Result<Self> {
        if segment.is_empty() {
            return Err(Error::Data("cannot fit scaler on an empty segment".into()));
        }
        let (n, m) = (segment.len() as f64, segment.channels());
        let mut mean = vec![0.0; m];
        for t in 0..segment.len() {
            for (acc, &v) in mean.iter_mut().zip(segment.row(t)) {
                *acc += v;
            }
        }
        mean.iter_mut().for_each(|v| *v /= n);
        let mut var = vec![0.0; m];
        for t in 0..segment.len() {
            for ((acc, &v), &mu) in var.iter_mut().zip(segment.row(t)).zip(&mean) {
                *acc += (v - mu) * (v - mu);
            }
        }
        let std = var.iter().map(|v| (v / n).sqrt().max(STD_FLOOR)).collect();
        Ok(Self { mean, std, policy })
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    fn check(&self, segment: &RawSeries) -> Result<()> {
        if segment.channels() != self.channels() {
            return Err(Error::Data(format!(
                "scaler expects {} channels, segment has {}",
                self.channels(),
                segment.channels()
            )));
        }
        Ok(())
    }

    pub fn transform(&self, segment: &RawSeries) -> Result<RawSeries> {
        self.check(segment)?;
        let m = self.channels();
        let values = segment
            .values()
            .iter()
            .enumerate()
            .map(|(k, &v)| (v - self.mean[k % m]) / self.std[k % m])
            .collect();
        RawSeries::new(values, segment.channel_names().to_vec(), segment.source())
    }

    pub fn inverse_transform(&self, segment: &RawSeries) -> Result<RawSeries> {
        self.check(segment)?;
        let m = self.channels();
        let values = self.inverse_values(segment.values())?;
        debug_assert_eq!(values.len() % m, 0);
        RawSeries::new(values, segment.channel_names().to_vec(), segment.source())
    }

    /// Inverse-scales a flat buffer laid out as rows of `m` channels.
    pub fn inverse_values(&self, values: &[f64]) -> Result<Vec<f64>> {
        let m = self.channels();
        if !values.len().is_multiple_of(m) {
            return Err(Error::Data(format!("{} values are not rows of {m}", values.len())));
        }
        Ok(values
            .iter()
            .enumerate()
            .map(|(k, &v)| v * self.std[k % m] + self.mean[k % m])
            .collect())
    }
}

/// Scaled train/validation/test segments plus the statistics used.
pub struct PreparedSplits {
    pub train: RawSeries,
    pub val: RawSeries,
    pub test: RawSeries,
    /// Training-segment scaler; the one saved with a model.
    pub scaler: ScalerState,
}

/// Splits then scales according to `policy`.
pub fn prepare(series: &RawSeries, spec: &SplitSpec, min_len: usize, policy: ScalerPolicy) -> Result<PreparedSplits> {
    let [train, val, test] = split(series, spec, min_len)?;
    let scaler = ScalerState::fit(&train, policy)?;
    let scale = |seg: &RawSeries| match policy {
        ScalerPolicy::FitTrain => scaler.transform(seg),
        ScalerPolicy::PerSplit => ScalerState::fit(seg, policy)?.transform(seg),
    };
    Ok(PreparedSplits {
        train: scale(&train)?,
        val: scale(&val)?,
        test: scale(&test)?,
        scaler,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ForecastMode {
    /// Predict the single row `h` steps after the window.
    #[default]
    SingleStep,
    /// Predict all `h` rows following the window.
    MultiStep,
}

impl ForecastMode {
    pub fn output_dim(self, m: usize, horizon: usize) -> usize {
        match self {
            ForecastMode::SingleStep => m,
            ForecastMode::MultiStep => horizon * m,
        }
    }
}

/// One batch of windows.
#[derive(Clone, Debug)]
pub struct WindowBatch<T> {
    /// `B×τ×m`.
    pub inputs: Tensor<T>,
    /// `B×m` (single-step) or `B×h×m` (multi-step).
    pub targets: Tensor<T>,
    pub starts: Vec<usize>,
}

impl<T: Real> WindowBatch<T> {
    pub fn len(&self) -> usize {
        self.starts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.starts.is_empty()
    }

    /// Window `b` as a `τ×m` matrix.
    pub fn window(&self, b: usize) -> Tensor<T> {
        let (tau, m) = (self.inputs.shape()[1], self.inputs.shape()[2]);
        let data = self.inputs.data()[b * tau * m..(b + 1) * tau * m].to_vec();
        Tensor::new(vec![tau, m], data).expect("window slice")
    }

    /// Targets reshaped to `B×out`.
    pub fn targets_flat(&self) -> Tensor<T> {
        let b = self.len();
        let out = self.targets.numel() / b;
        self.targets.clone().reshape(vec![b, out]).expect("target reshape")
    }
}

/// Every stride-1 window of a segment together with its horizon target.
#[derive(Clone, Debug)]
pub struct Windows<'a> {
    segment: &'a RawSeries,
    tau: usize,
    horizon: usize,
    mode: ForecastMode,
}

/// Visit order for [`Windows::batches`].
#[derive(Clone, Copy, Debug)]
pub enum Order {
    Sequential,
    /// Start indices permuted by an RNG keyed on `(seed, epoch)`.
    Shuffled { seed: u64, epoch: usize },
}

impl<'a> Windows<'a> {
    pub fn new(segment: &'a RawSeries, tau: usize, horizon: usize, mode: ForecastMode) -> Result<Self> {
        if tau == 0 || horizon == 0 {
            return Err(Error::Config("window and horizon must be positive".into()));
        }
        segment.require_len(tau + horizon, "segment")?;
        Ok(Self {
            segment,
            tau,
            horizon,
            mode,
        })
    }

    /// Number of valid start indices, `len − τ − h + 1`.
    pub fn count(&self) -> usize {
        self.segment.len() - self.tau - self.horizon + 1
    }

    pub fn tau(&self) -> usize {
        self.tau
    }

    pub fn channels(&self) -> usize {
        self.segment.channels()
    }

    pub fn output_dim(&self) -> usize {
        self.mode.output_dim(self.channels(), self.horizon)
    }

    /// Rows `start .. start+τ`.
    pub fn input<T: Real>(&self, start: usize) -> Tensor<T> {
        let m = self.channels();
        let v = &self.segment.values()[start * m..(start + self.tau) * m];
        Tensor::new(vec![self.tau, m], v.iter().map(|&x| T::lit(x)).collect()).expect("window")
    }

    /// Row `start+τ+h−1` (single-step) or rows `start+τ .. start+τ+h`.
    pub fn target<T: Real>(&self, start: usize) -> Vec<T> {
        let m = self.channels();
        let end = start + self.tau + self.horizon;
        let begin = match self.mode {
            ForecastMode::SingleStep => end - 1,
            ForecastMode::MultiStep => start + self.tau,
        };
        self.segment.values()[begin * m..end * m]
            .iter()
            .map(|&x| T::lit(x))
            .collect()
    }

    pub fn start_order(&self, order: Order) -> Vec<usize> {
        let mut starts: Vec<usize> = (0..self.count()).collect();
        if let Order::Shuffled { seed, epoch } = order {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x5348_5546, epoch as u64]));
            starts.shuffle(&mut rng);
        }
        starts
    }

    pub fn make_batch<T: Real>(&self, starts: &[usize]) -> WindowBatch<T> {
        let (tau, m) = (self.tau, self.channels());
        let mut inputs = Vec::with_capacity(starts.len() * tau * m);
        let mut targets = Vec::with_capacity(starts.len() * self.output_dim());
        for &s in starts {
            inputs.extend(self.input::<T>(s).into_data());
            targets.extend(self.target::<T>(s));
        }
        let target_shape = match self.mode {
            ForecastMode::SingleStep => vec![starts.len(), m],
            ForecastMode::MultiStep => vec![starts.len(), self.horizon, m],
        };
        WindowBatch {
            inputs: Tensor::new(vec![starts.len(), tau, m], inputs).expect("batch inputs"),
            targets: Tensor::new(target_shape, targets).expect("batch targets"),
            starts: starts.to_vec(),
        }
    }

    /// `⌈count / batch⌉` batches covering every start once.
    pub fn batches<T: Real>(&self, batch: usize, order: Order) -> impl Iterator<Item = WindowBatch<T>> + '_ {
        let batch = batch.max(1);
        let starts = self.start_order(order);
        let n = starts.len().div_ceil(batch);
        (0..n).map(move |k| {
            let end = ((k + 1) * batch).min(starts.len());
            self.make_batch(&starts[k * batch..end])
        })
    }

    pub fn batch_count(&self, batch: usize) -> usize {
        self.count().div_ceil(batch.max(1))
    }
}
