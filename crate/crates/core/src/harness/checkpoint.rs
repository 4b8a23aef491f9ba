//! Checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! | bytes        | content                                   |
//! |--------------|-------------------------------------------|
//! | 8            | magic `RSIRCKPT`                          |
//! | 4 (`u32`)    | format version                            |
//! | 8 (`u64`)    | header length `n`                         |
//! | `n`          | UTF-8 JSON [`Header`]                     |
//! | rest         | tensor payload, little-endian scalars     |
//!
//! Each [`TensorEntry`] locates one tensor in the payload by byte offset.
//! Parameters are stored in model order, followed by the optimizer's first
//! and second moments.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::ModelConfig;
use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::{DType, Element, ParamStore, Tensor};

use super::config::RunConfig;
use super::data::Normalization;
use super::metrics::MetricsRow;
use super::optim::{AdamW, AdamWConfig};

pub const MAGIC: &[u8; 8] = b"RSIRCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorKind {
    Param,
    AdamM,
    AdamV,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub kind: TensorKind,
    pub shape: Vec<usize>,
    pub offset: u64,
}

/// Everything except the tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub run: Option<RunConfig>,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: u64,
    pub rng: RngState,
    pub normalization: Option<Normalization>,
    pub metrics: Vec<MetricsRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub dtype: DType,
    #[serde(flatten)]
    pub meta: CheckpointMeta,
    pub adamw: Option<AdamWConfig>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint<T: Element> {
    pub meta: CheckpointMeta,
    pub params: ParamStore<T>,
    pub optim: Option<AdamW<T>>,
}

impl<T: Element> Checkpoint<T> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut payload = Vec::new();
        let mut tensors = Vec::new();
        let mut push = |name: &str, kind, t: &Tensor<T>| {
            tensors.push(TensorEntry {
                name: name.to_string(),
                kind,
                shape: t.shape().to_vec(),
                offset: payload.len() as u64,
            });
            t.data().iter().for_each(|&v| v.write_le(&mut payload));
        };
        for (_, p) in self.params.iter() {
            push(&p.name, TensorKind::Param, &p.value);
        }
        if let Some(opt) = &self.optim {
            for ((_, p), m) in self.params.iter().zip(&opt.m) {
                push(&p.name, TensorKind::AdamM, m);
            }
            for ((_, p), v) in self.params.iter().zip(&opt.v) {
                push(&p.name, TensorKind::AdamV, v);
            }
        }
        let header = Header {
            dtype: T::DTYPE,
            meta: self.meta.clone(),
            adamw: self.optim.as_ref().map(|o| o.cfg),
            tensors,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(20 + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let header = read_header(bytes)?;
        if header.dtype != T::DTYPE {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {:?} tensors, requested {:?}",
                header.dtype,
                T::DTYPE
            )));
        }
        let start = 20 + u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let payload = &bytes[start..];
        let size = T::DTYPE.size_of();
        let mut params = ParamStore::new();
        let mut m = Vec::new();
        let mut v = Vec::new();
        for e in &header.tensors {
            let n: usize = e.shape.iter().product();
            let lo = e.offset as usize;
            let hi = lo + n * size;
            if hi > payload.len() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{}` spans payload bytes {lo}..{hi}, payload has {}",
                    e.name,
                    payload.len()
                )));
            }
            let data = payload[lo..hi].chunks(size).map(T::read_le).collect();
            let t = Tensor::new(&e.shape, data)?;
            match e.kind {
                TensorKind::Param => {
                    params.add(e.name.clone(), t)?;
                }
                TensorKind::AdamM => m.push(t),
                TensorKind::AdamV => v.push(t),
            }
        }
        let optim = match header.adamw {
            Some(cfg) => {
                if m.len() != params.len() || v.len() != params.len() {
                    return Err(Error::Checkpoint("optimizer moments do not match parameters".into()));
                }
                Some(AdamW {
                    cfg,
                    step: header.meta.step,
                    m,
                    v,
                })
            }
            None => None,
        };
        Ok(Self {
            meta: header.meta,
            params,
            optim,
        })
    }

    /// Write via a temporary file and rename, so an interrupted write never
    /// replaces a good checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        let io = |source| Error::File {
            path: path.to_path_buf(),
            source,
        };
        let mut f = std::fs::File::create(&tmp).map_err(io)?;
        f.write_all(&self.to_bytes()).map_err(io)?;
        f.sync_all().map_err(io)?;
        std::fs::rename(&tmp, path).map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|source| Error::File {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

/// Validate the framing and decode the JSON header.
pub fn read_header(bytes: &[u8]) -> Result<Header> {
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let json = bytes
        .get(20..20 + len)
        .ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
    Ok(serde_json::from_slice(json)?)
}

/// Copy `src` values into `dst`, requiring identical names and shapes.
pub fn copy_params<T: Element>(dst: &mut ParamStore<T>, src: &ParamStore<T>) -> Result<()> {
    if dst.len() != src.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} parameters, model has {}",
            src.len(),
            dst.len()
        )));
    }
    for p in dst.iter_mut() {
        let id = src
            .id(&p.name)
            .ok_or_else(|| Error::Checkpoint(format!("parameter `{}` missing from checkpoint", p.name)))?;
        let value = &src.get(id).value;
        if value.shape() != p.value.shape() {
            return Err(Error::Checkpoint(format!(
                "parameter `{}` has shape {:?} in checkpoint, {:?} in model",
                p.name,
                value.shape(),
                p.value.shape()
            )));
        }
        p.value = value.clone();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedRng;

    fn sample() -> Checkpoint<f32> {
        let mut params = ParamStore::new();
        params.add("a", Tensor::from_f64(&[2], &[1.5, -0.1]).unwrap()).unwrap();
        params.add("b", Tensor::from_f64(&[1, 1], &[f64::MIN_POSITIVE]).unwrap()).unwrap();
        let mut optim = AdamW::new(AdamWConfig::default(), &params);
        optim.step = 7;
        optim.m[0] = Tensor::from_f64(&[2], &[0.25, 1e-30]).unwrap();
        Checkpoint {
            meta: CheckpointMeta {
                model: ModelConfig::desk(),
                run: None,
                epoch: 3,
                step: 7,
                rng: SeedRng::new(5).state(),
                normalization: None,
                metrics: vec![],
            },
            params,
            optim: Some(optim),
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let ck = sample();
        let bytes = ck.to_bytes();
        assert_eq!(&bytes[..8], MAGIC);
        let back = Checkpoint::<f32>::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.meta, ck.meta);
        assert_eq!(back.optim.unwrap().m[0], ck.optim.unwrap().m[0]);
    }

    #[test]
    fn rejects_wrong_dtype_and_magic() {
        let bytes = sample().to_bytes();
        assert!(Checkpoint::<f64>::from_bytes(&bytes).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::<f32>::from_bytes(&bad).is_err());
        assert!(Checkpoint::<f32>::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }
}
