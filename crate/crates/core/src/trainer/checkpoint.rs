//! Binary checkpoint format.
//!
//! ```text
//! "MENT" | version: u32 | header_len: u64 | header (JSON)
//! blob* : name_len: u32 | name | dtype: u8 | ndim: u32 | dims: u64* | payload_len: u64 | payload
//! ```
//!
//! All integers and payloads are little-endian. Blobs are named
//! `param/<tensor>`, `buffer/<tensor>` and, when present, `optim/<tensor>`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{OptimState, TrainConfig};
use crate::element::Element;
use crate::error::{Error, Result};
use crate::model::{MEnetParams, ModelConfig};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MENT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub train: TrainConfig,
    /// Completed optimizer steps.
    pub iteration: u64,
    pub params: MEnetParams<T>,
    pub optim: Option<OptimState<T>>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model: ModelConfig,
    train: TrainConfig,
    iteration: u64,
    dtype: u8,
    has_optimizer: bool,
    blobs: usize,
    weight_decay: String,
    lr_schedule: String,
}

impl<T: Element> Checkpoint<T> {
    /// Parameters only; refuses resume.
    pub fn for_inference(params: MEnetParams<T>, train: TrainConfig, iteration: u64) -> Self {
        Self {
            train,
            iteration,
            params,
            optim: None,
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut blobs: Vec<(String, &Tensor<T>)> = Vec::new();
        blobs.extend(
            self.params
                .named_tensors()
                .into_iter()
                .map(|(n, t)| (format!("param/{n}"), t)),
        );
        blobs.extend(
            self.params
                .named_buffers()
                .into_iter()
                .map(|(n, t)| (format!("buffer/{n}"), t)),
        );
        if let Some(opt) = &self.optim {
            let names = self.params.named_tensors();
            if names.len() != opt.velocity.len() {
                return Err(Error::Checkpoint(
                    "optimizer state does not match the parameters".into(),
                ));
            }
            blobs.extend(
                names
                    .into_iter()
                    .zip(&opt.velocity)
                    .map(|((n, _), v)| (format!("optim/{n}"), v)),
            );
        }
        let header = Header {
            model: self.params.config.clone(),
            train: self.train.clone(),
            iteration: self.iteration,
            dtype: T::DTYPE,
            has_optimizer: self.optim.is_some(),
            blobs: blobs.len(),
            weight_decay: "coupled".into(),
            lr_schedule: "none".into(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (name, t) in blobs {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(T::DTYPE);
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            let payload = T::to_le_bytes_vec(t.data());
            out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
            out.extend_from_slice(&payload);
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::Checkpoint("bad magic, not a checkpoint file".into()));
        }
        let version = r.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {version} is not supported (expected {FORMAT_VERSION})"
            )));
        }
        let len = r.u64("header length")? as usize;
        let header: Header = serde_json::from_slice(r.take(len, "header")?)
            .map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        if header.dtype != T::DTYPE {
            return Err(Error::Checkpoint(format!(
                "stored dtype tag {} does not match the requested element type {}",
                header.dtype,
                T::DTYPE
            )));
        }
        // build a skeleton with the right shapes, then overwrite every tensor
        let mut params = MEnetParams::<T>::build(&header.model, &Rng::new(0, 0))?;
        let param_names: Vec<String> = params.named_tensors().into_iter().map(|(n, _)| n).collect();
        let buffer_names: Vec<String> =
            params.named_buffers().into_iter().map(|(n, _)| n).collect();
        let expected = param_names.len() * (1 + header.has_optimizer as usize) + buffer_names.len();
        if header.blobs != expected {
            return Err(Error::Checkpoint(format!(
                "header lists {} blobs, model needs {expected}",
                header.blobs
            )));
        }
        for (slot, name) in params.tensors_mut().into_iter().zip(&param_names) {
            *slot = r.blob::<T>(&format!("param/{name}"), slot.shape())?;
        }
        for (slot, name) in params.buffers_mut().into_iter().zip(&buffer_names) {
            *slot = r.blob::<T>(&format!("buffer/{name}"), slot.shape())?;
        }
        let optim = if header.has_optimizer {
            let shapes: Vec<Vec<usize>> = params
                .named_tensors()
                .iter()
                .map(|(_, t)| t.shape().to_vec())
                .collect();
            let velocity = param_names
                .iter()
                .zip(&shapes)
                .map(|(name, shape)| r.blob::<T>(&format!("optim/{name}"), shape))
                .collect::<Result<Vec<_>>>()?;
            Some(OptimState {
                iteration: header.iteration,
                velocity,
            })
        } else {
            None
        };
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after the last blob",
                bytes.len() - r.pos
            )));
        }
        Ok(Self {
            train: header.train,
            iteration: header.iteration,
            params,
            optim,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::Checkpoint(format!(
                    "truncated in {what}: needed {n} bytes at offset {}, only {} left",
                    self.pos,
                    self.bytes.len() - self.pos
                ))
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8, what)?.try_into().expect("8 bytes"),
        ))
    }

    fn blob<T: Element>(&mut self, name: &str, shape: &[usize]) -> Result<Tensor<T>> {
        let what = format!("blob `{name}`");
        let len = self.u32(&what)? as usize;
        let stored = self.take(len, &what)?;
        if stored != name.as_bytes() {
            return Err(Error::Checkpoint(format!(
                "expected blob `{name}`, found `{}`",
                String::from_utf8_lossy(stored)
            )));
        }
        let dtype = self.take(1, &what)?[0];
        if dtype != T::DTYPE {
            return Err(Error::Checkpoint(format!("{what} has dtype tag {dtype}")));
        }
        let ndim = self.u32(&what)? as usize;
        let dims = (0..ndim)
            .map(|_| self.u64(&what).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        if dims != shape {
            return Err(Error::Checkpoint(format!(
                "{what} has shape {dims:?}, model expects {shape:?}"
            )));
        }
        let payload_len = self.u64(&what)? as usize;
        let width = std::mem::size_of::<T>();
        if payload_len != dims.iter().product::<usize>() * width {
            return Err(Error::Checkpoint(format!(
                "{what} payload length {payload_len} does not match its shape"
            )));
        }
        let payload = self.take(payload_len, &what)?;
        Tensor::from_vec(&dims, T::from_le_bytes_slice(payload))
    }
}

pub fn save_checkpoint<T: Element>(path: &Path, ckpt: &Checkpoint<T>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    // write-then-rename so a crash never leaves a half-written checkpoint
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, ckpt.encode()?).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Element>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::decode(&bytes).map_err(|e| match e {
        Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
        other => other,
    })
}
