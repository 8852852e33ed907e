use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EpochRecord, TrainConfig};
use crate::emulator::{ArchConfig, ModelParams, NormStats};
use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CKP1";
pub const CHECKPOINT_VERSION: u32 = 1;

/// A trained (or freshly built) model with everything needed to reproduce it.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: ModelParams<f32>,
    pub train_config: Option<TrainConfig>,
    pub history: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub seed: u64,
    pub lead: usize,
    /// Dataset index the model was trained from, when known.
    pub data_index: Option<String>,
}

impl Checkpoint {
    pub fn new(model: ModelParams<f32>, seed: u64, lead: usize) -> Self {
        Checkpoint {
            model,
            train_config: None,
            history: Vec::new(),
            best_epoch: None,
            seed,
            lead,
            data_index: None,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            format_version: CHECKPOINT_VERSION,
            arch: self.model.arch().clone(),
            norm_stats: self.model.norm_stats(),
            train_config: self.train_config.clone(),
            history: self.history.clone(),
            best_epoch: self.best_epoch,
            seed: self.seed,
            lead: self.lead,
            data_index: self.data_index.clone(),
            tensors: self.model.tensors().len(),
        };
        let hdr = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(hdr.len() as u32).to_le_bytes());
        out.extend_from_slice(&hdr);
        for (path, t) in self.model.tensors() {
            out.extend_from_slice(&(path.len() as u32).to_le_bytes());
            out.extend_from_slice(path.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(CoreError::UnrecognizedFormat { expected: "CKP1" });
        }
        let mut r = Cursor { bytes, pos: 4 };
        let hlen = r.u32()? as usize;
        let raw = r.take(hlen)?;
        let probe: VersionProbe = serde_json::from_slice(raw)?;
        if probe.format_version != CHECKPOINT_VERSION {
            return Err(CoreError::UnsupportedVersion {
                found: probe.format_version,
                supported: CHECKPOINT_VERSION,
            });
        }
        let header: Header = serde_json::from_slice(raw)?;
        let mut tensors = BTreeMap::new();
        for _ in 0..header.tensors {
            let plen = r.u32()? as usize;
            let path = std::str::from_utf8(r.take(plen)?)
                .map_err(|_| CoreError::PayloadMismatch("tensor path is not UTF-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = r
                .take(4 * n)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            tensors.insert(path, Tensor::new(shape, data)?);
        }
        if r.pos != bytes.len() {
            return Err(CoreError::PayloadMismatch(format!(
                "{} trailing bytes after tensor blobs",
                bytes.len() - r.pos
            )));
        }
        let model = ModelParams::from_tensors(header.arch, tensors, header.norm_stats)?;
        Ok(Checkpoint {
            model,
            train_config: header.train_config,
            history: header.history,
            best_epoch: header.best_epoch,
            seed: header.seed,
            lead: header.lead,
            data_index: header.data_index,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    arch: ArchConfig,
    norm_stats: Option<NormStats>,
    train_config: Option<TrainConfig>,
    history: Vec<EpochRecord>,
    best_epoch: Option<usize>,
    seed: u64,
    lead: usize,
    data_index: Option<String>,
    tensors: usize,
}

#[derive(Deserialize)]
struct VersionProbe {
    format_version: u32,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or(CoreError::TruncatedPayload {
                expected: self.pos.saturating_add(n),
                found: self.bytes.len(),
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&ckpt.to_bytes()?)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    Checkpoint::from_bytes(&bytes)
}
