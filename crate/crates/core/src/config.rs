//! TOML run configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Padding;
use crate::data::{Detect, ForecastMode, IngestOptions, MissingPolicy, ScalerPolicy, SplitSpec};
use crate::error::{Error, Result};
use crate::forecaster::Activation;
use crate::model::ModelConfig;
use crate::optim::AdamConfig;

/// Environment variable naming a default config file.
pub const CONFIG_ENV: &str = "TIMEGNN_CONFIG";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub path: Option<PathBuf>,
    pub header: Detect,
    pub timestamp: Detect,
    pub missing: MissingPolicy,
    pub split: SplitSpec,
    pub scaler: ScalerPolicy,
    pub window: usize,
    pub horizon: usize,
    pub mode: ForecastMode,
    pub batch: usize,
}

impl DataConfig {
    pub fn ingest_options(&self) -> IngestOptions {
        IngestOptions {
            header: self.header,
            timestamp: self.timestamp,
            missing: self.missing,
        }
    }
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            path: None,
            header: Detect::Auto,
            timestamp: Detect::Auto,
            missing: MissingPolicy::Fill,
            split: SplitSpec::default(),
            scaler: ScalerPolicy::FitTrain,
            window: 96,
            horizon: 1,
            mode: ForecastMode::SingleStep,
            batch: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub d: usize,
    /// Link-predictor hidden width; `d` when absent.
    pub d_link: Option<usize>,
    /// Forecasting-head hidden width; `d` when absent.
    pub head_hidden: Option<usize>,
    pub steps: usize,
    pub padding: Padding,
    pub fusion_relu: bool,
    pub activation: Activation,
    /// Gumbel relaxation temperature.
    pub smoothness: f64,
    /// When set, the temperature moves linearly to this value by the last epoch.
    pub smoothness_final: Option<f64>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            d: 64,
            d_link: None,
            head_hidden: None,
            steps: 3,
            padding: Padding::Same,
            fusion_relu: false,
            activation: Activation::Relu,
            smoothness: 0.3,
            smoothness_final: None,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm cap; `0` disables clipping.
    pub clip_norm: f64,
    pub seed: u64,
    pub runs: usize,
    /// Sample graphs at evaluation instead of hardening theta.
    pub sample_eval: bool,
    pub precision: Precision,
    /// Worker threads for evaluation; `1` keeps everything on the caller.
    pub threads: usize,
    /// Best-snapshot flush interval in epochs.
    pub checkpoint_every: usize,
}

impl TrainSection {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

impl Default for TrainSection {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            epochs: 50,
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            clip_norm: 5.0,
            seed: 0,
            runs: 1,
            sample_eval: false,
            precision: Precision::F32,
            threads: 1,
            checkpoint_every: 10,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub checkpoint: Option<PathBuf>,
    pub metrics: Option<PathBuf>,
    pub graphs: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelSection,
    pub train: TrainSection,
    pub output: OutputSection,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// `path`, else the file named by [`CONFIG_ENV`], else defaults.
    pub fn resolve(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => Self::load(p),
            None => match std::env::var_os(CONFIG_ENV) {
                Some(p) => Self::load(Path::new(&p)),
                None => Ok(Self::default()),
            },
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if d.window < 2 {
            return Err(Error::Config(format!("window must be at least 2, got {}", d.window)));
        }
        if d.horizon < 1 {
            return Err(Error::Config("horizon must be at least 1".into()));
        }
        if d.batch < 1 {
            return Err(Error::Config("batch must be at least 1".into()));
        }
        d.split.validate()?;
        let m = &self.model;
        for (name, s) in [("smoothness", Some(m.smoothness)), ("smoothness_final", m.smoothness_final)] {
            if let Some(s) = s {
                if !(s > 0.0 && s.is_finite()) {
                    return Err(Error::Config(format!("{name} must be positive, got {s}")));
                }
            }
        }
        let t = &self.train;
        if t.epochs < 1 || t.runs < 1 || t.threads < 1 {
            return Err(Error::Config("epochs, runs and threads must be at least 1".into()));
        }
        if !(t.lr > 0.0) || !(t.clip_norm >= 0.0) {
            return Err(Error::Config("lr must be positive and clip_norm non-negative".into()));
        }
        Ok(())
    }

    pub fn model_config(&self, channels: usize) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            channels,
            window: self.data.window,
            horizon: self.data.horizon,
            mode: self.data.mode,
            d: m.d,
            d_link: m.d_link.unwrap_or(m.d),
            head_hidden: m.head_hidden.unwrap_or(m.d),
            steps: m.steps,
            padding: m.padding,
            fusion_relu: m.fusion_relu,
            activation: m.activation,
        }
    }

    /// Temperature used during `epoch` (0-based).
    pub fn smoothness_at(&self, epoch: usize) -> f64 {
        let s0 = self.model.smoothness;
        match self.model.smoothness_final {
            Some(s1) if self.train.epochs > 1 => {
                s0 + (s1 - s0) * epoch as f64 / (self.train.epochs - 1) as f64
            }
            _ => s0,
        }
    }

    /// The configuration with output locations cleared; this is what gets
    /// hashed and echoed into artifacts.
    pub fn effective(&self) -> RunConfig {
        RunConfig {
            output: OutputSection::default(),
            ..self.clone()
        }
    }

    /// Hex SHA-256 of the effective configuration.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(&self.effective()).expect("config serialises");
        hex::encode(Sha256::digest(json))
    }
}

/// Standard widths for the benchmark datasets.
pub fn preset_width(dataset: &str) -> Option<usize> {
    match dataset.to_ascii_lowercase().as_str() {
        "exchange" | "exchange-rate" | "exchange_rate" => Some(32),
        "weather" | "wth" => Some(64),
        "electricity" | "solar" | "solar-energy" | "traffic" => Some(128),
        _ => None,
    }
}
