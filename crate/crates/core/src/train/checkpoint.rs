//! Binary checkpoint format.
//!
//! ```text
//! "CCEAD\0" | u32 version
//! u32 len | config text (key=value, plus epoch= and adam_step=)
//! u32 len | vocabulary text
//! u32 len | metric log
//! u32 count | count × (u16 name len | name | u8 rank | rank × u32 dim | f32 values)
//! ```
//! Integers and floats are little-endian. Adam moments are stored as extra
//! tensors named `adam.m.<param>` and `adam.v.<param>`.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

use super::{AdamState, EpochMetrics, RunConfig};
use crate::codec::WordVocab;
use crate::model::{Ccead, Model};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 6] = b"CCEAD\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint (bad magic bytes)")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (expected {CHECKPOINT_VERSION})")]
    Version { found: u32 },
    #[error("checkpoint is truncated")]
    Truncated,
    #[error("tensor {name} has shape {found:?}, expected {expected:?}")]
    Shape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("tensor {0} is missing")]
    Missing(String),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub model: Model,
    pub adam: Option<AdamState>,
    pub epoch: usize,
    pub history: Vec<EpochMetrics>,
}

impl Checkpoint {
    /// Values are rounded to `f32` here so that the stored checkpoint and
    /// this in-memory copy agree bit for bit.
    pub fn new(
        mut config: RunConfig,
        mut model: Model,
        mut adam: Option<AdamState>,
        epoch: usize,
        history: Vec<EpochMetrics>,
    ) -> Self {
        config.model = model.config.clone();
        model.params.visit_mut(&mut |_, t| t.round_to_f32());
        if let Some(a) = adam.as_mut() {
            a.m.visit_mut(&mut |_, t| t.round_to_f32());
            a.v.visit_mut(&mut |_, t| t.round_to_f32());
        }
        Self {
            config,
            model,
            adam,
            epoch,
            history,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let mut cfg = self.config.to_text();
        cfg.push_str(&format!("epoch={}\n", self.epoch));
        if let Some(a) = &self.adam {
            cfg.push_str(&format!("adam_step={}\n", a.t));
        }
        for block in [
            cfg,
            self.model.vocab.to_text(),
            EpochMetrics::log_text(&self.history),
        ] {
            out.extend_from_slice(&(block.len() as u32).to_le_bytes());
            out.extend_from_slice(block.as_bytes());
        }
        let mut tensors: Vec<(String, &Tensor)> = self.model.params.leaves();
        if let Some(a) = &self.adam {
            tensors.extend(
                a.m.leaves()
                    .into_iter()
                    .map(|(n, t)| (format!("adam.m.{n}"), t)),
            );
            tensors.extend(
                a.v.leaves()
                    .into_iter()
                    .map(|(n, t)| (format!("adam.v.{n}"), t)),
            );
        }
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, t) in tensors {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.rank() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(CHECKPOINT_MAGIC.len()).ok() != Some(CHECKPOINT_MAGIC.as_slice()) {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version { found: version });
        }
        let cfg_text = r.text()?;
        let vocab_text = r.text()?;
        let log_text = r.text()?;

        let mut epoch = 0;
        let mut adam_step = None;
        let mut run_lines = String::new();
        for line in cfg_text.lines() {
            if let Some(v) = line.strip_prefix("epoch=") {
                epoch = v.parse().map_err(|_| malformed("bad epoch"))?;
            } else if let Some(v) = line.strip_prefix("adam_step=") {
                adam_step = Some(v.parse::<u64>().map_err(|_| malformed("bad adam_step"))?);
            } else {
                run_lines.push_str(line);
                run_lines.push('\n');
            }
        }
        let config = RunConfig::parse(&run_lines).map_err(|e| malformed(&e.to_string()))?;
        config.validate().map_err(|e| malformed(&e.to_string()))?;
        let vocab = WordVocab::from_text(&vocab_text).map_err(|e| malformed(&e.to_string()))?;
        if vocab.len() != config.model.word_vocab {
            return Err(malformed(
                "vocabulary size disagrees with the configuration",
            ));
        }
        let history =
            EpochMetrics::parse_log(&log_text).ok_or_else(|| malformed("bad metric log"))?;

        let count = r.u32()? as usize;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| malformed("tensor name"))?;
            let rank = r.u8()? as usize;
            let shape: Vec<usize> = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<_, _>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(4).ok_or(CheckpointError::Truncated)?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| malformed(&e.to_string()))?;
            if tensors.insert(name.clone(), t).is_some() {
                return Err(malformed(&format!("duplicate tensor {name}")));
            }
        }
        if r.pos != bytes.len() {
            return Err(malformed("trailing bytes"));
        }

        let shapes = Ccead::<Vec<usize>>::shapes(&config.model);
        let mut take_tree = |prefix: &str| -> Result<Ccead<Tensor>, CheckpointError> {
            let mut err = None;
            let tree = shapes.map(&mut |name, shape| {
                let key = format!("{prefix}{name}");
                match tensors.remove(&key) {
                    Some(t) if t.shape() == shape.as_slice() => t,
                    Some(t) => {
                        err.get_or_insert(CheckpointError::Shape {
                            name: key,
                            expected: shape.clone(),
                            found: t.shape().to_vec(),
                        });
                        Tensor::zeros(shape)
                    }
                    None => {
                        err.get_or_insert(CheckpointError::Missing(key));
                        Tensor::zeros(shape)
                    }
                }
            });
            err.map_or(Ok(tree), Err)
        };
        let params = take_tree("")?;
        let adam = match adam_step {
            Some(t) => {
                let m = take_tree("adam.m.")?;
                let v = take_tree("adam.v.")?;
                let mut state = AdamState::new(&params);
                state.m = m;
                state.v = v;
                state.t = t;
                Some(state)
            }
            None => None,
        };
        if let Some(extra) = tensors.keys().next() {
            return Err(malformed(&format!("unexpected tensor {extra}")));
        }
        Ok(Self {
            model: Model {
                config: config.model.clone(),
                params,
                vocab,
            },
            config,
            adam,
            epoch,
            history,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn malformed(detail: &str) -> CheckpointError {
    CheckpointError::Malformed(detail.to_string())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated)?;
        let s = self
            .bytes
            .get(self.pos..end)
            .ok_or(CheckpointError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, CheckpointError> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn text(&mut self) -> Result<String, CheckpointError> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| malformed("text block is not UTF-8"))
    }
}
