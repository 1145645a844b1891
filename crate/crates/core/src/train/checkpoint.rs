//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "PRECTIME1"
//! u64 metadata length, metadata JSON
//! u32 tensor count
//! per tensor: u32 name length, name, u32 rank, u64 extents..., f64 payload...
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::data::{padded_length, pad_min_value, pad_with_values, Alphabet, Cycle, NormStats};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, PrecTime, Variant};
use crate::substrate::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 9] = b"PRECTIME1";
pub const CHECKPOINT_VERSION: u32 = 1;

/// A trained model plus everything needed to apply it to raw cycles.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: PrecTime,
    pub alphabet: Alphabet,
    /// Whether padding was masked during training.
    pub masked: bool,
    /// Training-set standardisation, applied before padding.
    pub normalization: Option<NormStats>,
    /// Fixed per-sensor padding values; `None` pads with each cycle's minimum.
    pub pad_values: Option<Vec<f64>>,
    pub train: Option<TrainConfig>,
    pub best_val_acc: Option<f64>,
    pub epoch: Option<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    model: ModelConfig,
    variant: Variant,
    alphabet: Alphabet,
    masked: bool,
    normalization: Option<NormStats>,
    pad_values: Option<Vec<f64>>,
    train: Option<TrainConfig>,
    best_val_acc: Option<f64>,
    epoch: Option<usize>,
    tensor_count: usize,
}

impl Checkpoint {
    pub fn new(model: PrecTime, alphabet: Alphabet) -> Self {
        Self {
            model,
            alphabet,
            masked: true,
            normalization: None,
            pad_values: None,
            train: None,
            best_val_acc: None,
            epoch: None,
        }
    }

    /// Normalises and pads a raw cycle the way the training data was.
    pub fn prepare_cycle(&self, cycle: &Cycle) -> Result<Cycle> {
        let c = match &self.normalization {
            Some(stats) => stats.apply(cycle)?,
            None => cycle.clone(),
        };
        let target = padded_length(c.len(), self.model.config().window_length);
        match &self.pad_values {
            Some(v) => pad_with_values(&c, target, v),
            None => pad_min_value(&c, target),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let params = self.model.params();
        let header = Header {
            format_version: CHECKPOINT_VERSION,
            model: self.model.config().clone(),
            variant: self.model.variant(),
            alphabet: self.alphabet.clone(),
            masked: self.masked,
            normalization: self.normalization.clone(),
            pad_values: self.pad_values.clone(),
            train: self.train.clone(),
            best_val_acc: self.best_val_acc,
            epoch: self.epoch,
            tensor_count: params.len(),
        };
        let meta = serde_json::to_vec(&header).map_err(|e| Error::Data(e.to_string()))?;
        let mut out = Vec::with_capacity(64 + meta.len() + 8 * params.numel());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(params.len() as u32).to_le_bytes());
        for p in params.iter() {
            out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
            out.extend_from_slice(p.name.as_bytes());
            out.extend_from_slice(&(p.value.rank() as u32).to_le_bytes());
            for &e in p.value.shape() {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            for v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(CHECKPOINT_MAGIC.len(), "magic")? != CHECKPOINT_MAGIC {
            return Err(r.error_at(0, "not a checkpoint (bad magic)"));
        }
        let meta_len = r.u64("metadata length")? as usize;
        let meta_at = r.pos;
        let header: Header =
            serde_json::from_slice(r.take(meta_len, "metadata")?).map_err(|e| r.error_at(meta_at, format!("metadata: {e}")))?;
        if header.format_version != CHECKPOINT_VERSION {
            return Err(r.error_at(meta_at, format!("unsupported format version {}", header.format_version)));
        }
        let count_at = r.pos;
        let count = r.u32("tensor count")? as usize;
        if count != header.tensor_count {
            return Err(r.error_at(
                count_at,
                format!("metadata declares {} tensors, file has {count}", header.tensor_count),
            ));
        }
        let mut model = PrecTime::with_variant(header.model, header.variant, 0)
            .map_err(|e| r.error_at(meta_at, format!("metadata: {e}")))?;
        if count != model.params().len() {
            return Err(r.error_at(
                count_at,
                format!("model needs {} tensors, file has {count}", model.params().len()),
            ));
        }
        let mut values = Vec::with_capacity(count);
        for i in 0..count {
            let at = r.pos;
            let name_len = r.u32("tensor name length")? as usize;
            let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
                .map_err(|_| r.error_at(at, "tensor name is not UTF-8"))?;
            let expected = &model.params().get(i).name;
            if name != expected {
                return Err(r.error_at(at, format!("tensor {i} is {name:?}, expected {expected:?}")));
            }
            let rank = r.u32("tensor rank")? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64("tensor extent")? as usize);
            }
            let want = model.params().get(i).value.shape();
            if shape != want {
                return Err(r.error_at(at, format!("tensor {name} has shape {shape:?}, expected {want:?}")));
            }
            let numel: usize = shape.iter().product();
            let payload = r.take(numel * 8, "tensor payload")?;
            let data = payload
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
                .collect();
            values.push(Tensor::new(&shape, data)?);
        }
        if r.pos != bytes.len() {
            return Err(r.error_at(r.pos, format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        model.params_mut().load_values(values)?;
        Ok(Self {
            model,
            alphabet: header.alphabet,
            masked: header.masked,
            normalization: header.normalization,
            pad_values: header.pad_values,
            train: header.train,
            best_val_acc: header.best_val_acc,
            epoch: header.epoch,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn error_at(&self, offset: usize, message: impl Into<String>) -> Error {
        Error::Format {
            offset: offset as u64,
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.error_at(self.pos, format!("truncated while reading {what}"))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

pub fn save_checkpoint(checkpoint: &Checkpoint, path: &Path) -> Result<()> {
    std::fs::write(path, checkpoint.to_bytes()?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
