//! Checkpoint container.
//!
//! Layout:
//!
//! ```text
//! b"TGNNCKPT"            8-byte magic
//! u64 (LE)               header length in bytes
//! header                 UTF-8 JSON, see `Header`
//! buffers                raw little-endian values, one per tensor, in header order
//! ```
//!
//! The tensor list holds every model parameter followed by the Adam first and
//! second moments (`adam.m/<name>`, `adam.v/<name>`). Nothing time- or
//! path-dependent is written, so equal inputs give byte-identical files.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::ScalerState;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, TimeGnn};
use crate::optim::{AdamConfig, OptimizerState};
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

pub const MAGIC: &[u8; 8] = b"TGNNCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset from the start of the buffer section.
    pub offset: usize,
    pub bytes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format_version: u32,
    pub dtype: String,
    pub model: ModelConfig,
    pub seed: u64,
    pub config_hash: String,
    /// Epoch at which the stored parameters were selected.
    pub epoch: usize,
    pub scaler: ScalerState,
    pub adam: AdamConfig,
    pub optimizer_step: u64,
    /// Effective run configuration, when the model came from `train`.
    pub run_config: Option<RunConfig>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub model: TimeGnn<T>,
    pub optimizer: OptimizerState<T>,
    pub scaler: ScalerState,
    pub seed: u64,
    pub epoch: usize,
    pub config_hash: String,
    pub run_config: Option<RunConfig>,
}

fn moment_names(params: &ParamStore<impl Real>) -> (Vec<String>, Vec<String>) {
    let m = params.names().iter().map(|n| format!("adam.m/{n}")).collect();
    let v = params.names().iter().map(|n| format!("adam.v/{n}")).collect();
    (m, v)
}

impl<T: Real> Checkpoint<T> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let params = &self.model.params;
        let (m_names, v_names) = moment_names(params);
        let named: Vec<(&str, &Tensor<T>)> = params
            .iter()
            .chain(m_names.iter().map(String::as_str).zip(&self.optimizer.m))
            .chain(v_names.iter().map(String::as_str).zip(&self.optimizer.v))
            .collect();

        let mut tensors = Vec::with_capacity(named.len());
        let mut buffers = Vec::new();
        for (name, t) in &named {
            let offset = buffers.len();
            t.data().iter().for_each(|&x| x.write_le(&mut buffers));
            tensors.push(TensorEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                offset,
                bytes: buffers.len() - offset,
            });
        }
        let header = Header {
            format_version: FORMAT_VERSION,
            dtype: T::DTYPE.to_string(),
            model: self.model.config.clone(),
            seed: self.seed,
            config_hash: self.config_hash.clone(),
            epoch: self.epoch,
            scaler: self.scaler.clone(),
            adam: self.optimizer.config,
            optimizer_step: self.optimizer.step,
            run_config: self.run_config.clone(),
            tensors,
        };
        let json = serde_json::to_vec(&header).expect("header serialises");
        let mut out = Vec::with_capacity(16 + json.len() + buffers.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&buffers);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, body) = split_header(bytes)?;
        if header.dtype != T::DTYPE {
            return Err(Error::Checkpoint(format!(
                "stored dtype is {}, requested {}",
                header.dtype,
                T::DTYPE
            )));
        }
        let mut all = ParamStore::<T>::new();
        for e in &header.tensors {
            let numel: usize = e.shape.iter().product();
            if e.bytes != numel * T::BYTES || e.offset + e.bytes > body.len() {
                return Err(Error::Checkpoint(format!("tensor `{}` has an inconsistent extent", e.name)));
            }
            let data = body[e.offset..e.offset + e.bytes]
                .chunks_exact(T::BYTES)
                .map(T::read_le)
                .collect();
            all.insert(e.name.clone(), Tensor::new(e.shape.clone(), data)?)?;
        }
        let mut params = ParamStore::new();
        let mut m = Vec::new();
        let mut v = Vec::new();
        for (name, t) in all.iter() {
            if let Some(rest) = name.strip_prefix("adam.m/") {
                if params.position(rest).is_none() {
                    return Err(Error::Checkpoint(format!("moment for unknown parameter `{rest}`")));
                }
                m.push(t.clone());
            } else if name.strip_prefix("adam.v/").is_some() {
                v.push(t.clone());
            } else {
                params.insert(name, t.clone())?;
            }
        }
        if m.len() != params.len() || v.len() != params.len() {
            return Err(Error::Checkpoint("optimizer moments do not cover every parameter".into()));
        }
        let model = TimeGnn::from_params(header.model, params)?;
        Ok(Self {
            model,
            optimizer: OptimizerState {
                config: header.adam,
                step: header.optimizer_step,
                m,
                v,
            },
            scaler: header.scaler,
            seed: header.seed,
            epoch: header.epoch,
            config_hash: header.config_hash,
            run_config: header.run_config,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Parses the magic and JSON header, returning the header and buffer section.
pub fn split_header(bytes: &[u8]) -> Result<(Header, &[u8])> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let end = 16usize
        .checked_add(len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
    let header: Header = serde_json::from_slice(&bytes[16..end])?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {}",
            header.format_version
        )));
    }
    Ok((header, &bytes[end..]))
}

/// Reads only the header of a checkpoint file.
pub fn read_header(path: &Path) -> Result<Header> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(split_header(&bytes)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ScalerPolicy;

    fn sample<T: Real>() -> Checkpoint<T> {
        let mut cfg = ModelConfig::new(3, 6, 1, 4);
        cfg.steps = 2;
        let model = TimeGnn::<T>::init(cfg, 11).unwrap();
        let mut optimizer = OptimizerState::new(&model.params, AdamConfig::default());
        optimizer.step = 17;
        for (k, m) in optimizer.m.iter_mut().enumerate() {
            m.data_mut().iter_mut().enumerate().for_each(|(i, x)| *x = T::lit((k * 31 + i) as f64 * 0.1).sin());
        }
        Checkpoint {
            model,
            optimizer,
            scaler: ScalerState {
                mean: vec![0.1, 1.0 / 3.0, -2e-7],
                std: vec![1.0, 0.7, 1e-8],
                policy: ScalerPolicy::FitTrain,
            },
            seed: 11,
            epoch: 4,
            config_hash: "abc".into(),
            run_config: Some(RunConfig::default()),
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let a = sample::<f32>();
        let bytes = a.to_bytes();
        let b = Checkpoint::<f32>::from_bytes(&bytes).unwrap();
        assert_eq!(a, b);
        assert_eq!(bytes, b.to_bytes());
        let c = sample::<f64>();
        assert_eq!(Checkpoint::<f64>::from_bytes(&c.to_bytes()).unwrap(), c);
    }

    #[test]
    fn header_lists_tensors_in_buffer_order() {
        let bytes = sample::<f64>().to_bytes();
        let (h, body) = split_header(&bytes).unwrap();
        assert_eq!(h.dtype, "f64");
        assert!(h.tensors[0].name.starts_with("extractor."));
        let mut offset = 0;
        for e in &h.tensors {
            assert_eq!(e.offset, offset);
            offset += e.bytes;
        }
        assert_eq!(offset, body.len());
    }

    #[test]
    fn rejects_corruption() {
        let bytes = sample::<f32>().to_bytes();
        assert!(Checkpoint::<f64>::from_bytes(&bytes).is_err());
        assert!(Checkpoint::<f32>::from_bytes(&bytes[..bytes.len() - 4]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::<f32>::from_bytes(&bad), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nested/model.ckpt");
        let a = sample::<f32>();
        a.save(&path).unwrap();
        assert_eq!(Checkpoint::<f32>::load(&path).unwrap(), a);
        assert_eq!(read_header(&path).unwrap().seed, 11);
    }
}
