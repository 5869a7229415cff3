//! Binary checkpoint container.
//!
//! Layout: the 8-byte magic `OCTFPNCK`, the header length as a little-endian
//! `u64`, a UTF-8 JSON header, then raw little-endian tensor payloads. The
//! header lists every tensor's section, name, shape and byte range relative
//! to the start of the payload.

use std::fs;
use std::io::Write;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::autodiff::ParamTable;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::rng::Stream;
use crate::tensor::{DType, Scalar, Tensor};
use crate::train::optim::AdamState;
use crate::train::schedule::Schedule;

pub const MAGIC: &[u8; 8] = b"OCTFPNCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub model: ModelConfig,
    /// Current training weights.
    pub params: ParamTable<T>,
    /// Weights at the best validation epoch, when different from `params`.
    pub best_params: Option<ParamTable<T>>,
    pub optimizer: Option<AdamState<T>>,
    /// Completed epochs.
    pub epoch: usize,
    pub best_epoch: Option<usize>,
    pub best_val_loss: Option<f64>,
    pub schedule: Option<Schedule>,
    /// Root of the training run's random streams.
    pub stream: Option<Stream>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Section {
    Param,
    Best,
    AdamM,
    AdamV,
}

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    section: Section,
    name: String,
    shape: Vec<usize>,
    trainable: bool,
    offset: u64,
    bytes: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    dtype: DType,
    model: ModelConfig,
    epoch: usize,
    best_epoch: Option<usize>,
    best_val_loss: Option<f64>,
    schedule: Option<Schedule>,
    stream: Option<Stream>,
    adam_step: Option<u64>,
    tensors: Vec<Entry>,
}

impl<T: Scalar> Checkpoint<T> {
    /// A checkpoint holding only model weights.
    pub fn weights_only(model: ModelConfig, params: ParamTable<T>) -> Self {
        Checkpoint {
            model,
            params,
            best_params: None,
            optimizer: None,
            epoch: 0,
            best_epoch: None,
            best_val_loss: None,
            schedule: None,
            stream: None,
        }
    }

    /// The weights to evaluate: the best snapshot if any, else the current ones.
    pub fn weights(&self) -> &ParamTable<T> {
        self.best_params.as_ref().unwrap_or(&self.params)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::new();
        let mut payload = Vec::new();
        let mut push = |section, name: &str, t: &Tensor<T>, trainable| {
            let offset = payload.len() as u64;
            for &v in t.data() {
                v.write_le(&mut payload);
            }
            entries.push(Entry {
                section,
                name: name.to_string(),
                shape: t.shape().to_vec(),
                trainable,
                offset,
                bytes: payload.len() as u64 - offset,
            });
        };
        for (name, p) in self.params.iter() {
            push(Section::Param, name, &p.value, p.trainable);
        }
        if let Some(best) = &self.best_params {
            for (name, p) in best.iter() {
                push(Section::Best, name, &p.value, p.trainable);
            }
        }
        if let Some(opt) = &self.optimizer {
            for (name, t) in &opt.m {
                push(Section::AdamM, name, t, true);
            }
            for (name, t) in &opt.v {
                push(Section::AdamV, name, t, true);
            }
        }
        let header = Header {
            format_version: FORMAT_VERSION,
            dtype: T::DTYPE,
            model: self.model.clone(),
            epoch: self.epoch,
            best_epoch: self.best_epoch,
            best_val_loss: self.best_val_loss,
            schedule: self.schedule.clone(),
            stream: self.stream,
            adam_step: self.optimizer.as_ref().map(|o| o.t),
            tensors: entries,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let json = bytes.get(16..16 + len).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(json)?;
        if header.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {}", header.format_version)));
        }
        if header.dtype != T::DTYPE {
            return Err(Error::Checkpoint(format!("stored dtype {:?}, requested {:?}", header.dtype, T::DTYPE)));
        }
        let payload = &bytes[16 + len..];
        let width = T::DTYPE.size_of();
        let mut params = ParamTable::new();
        let mut best = ParamTable::new();
        let mut m = IndexMap::new();
        let mut v = IndexMap::new();
        for e in &header.tensors {
            let n: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let end = start.checked_add(n * width).ok_or_else(|| bad("offset overflow"))?;
            if e.bytes as usize != n * width || end > payload.len() {
                return Err(Error::Checkpoint(format!("tensor `{}` has an invalid byte range", e.name)));
            }
            let data = payload[start..end].chunks_exact(width).map(T::read_le).collect();
            let t = Tensor::new(e.shape.clone(), data)?;
            match e.section {
                Section::Param => params.insert(&e.name, t, e.trainable),
                Section::Best => best.insert(&e.name, t, e.trainable),
                Section::AdamM => {
                    m.insert(e.name.clone(), t);
                }
                Section::AdamV => {
                    v.insert(e.name.clone(), t);
                }
            }
        }
        Ok(Checkpoint {
            model: header.model,
            params,
            best_params: (!best.is_empty()).then_some(best),
            optimizer: header.adam_step.map(|t| AdamState { t, m, v }),
            epoch: header.epoch,
            best_epoch: header.best_epoch,
            best_val_loss: header.best_val_loss,
            schedule: header.schedule,
            stream: header.stream,
        })
    }

    /// Writes atomically: a temporary sibling file is renamed into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let name = path.file_name().ok_or_else(|| Error::Checkpoint(format!("{} is not a file path", path.display())))?;
        let tmp = path.with_file_name(format!(".{}.tmp-{}", name.to_string_lossy(), std::process::id()));
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}
