//! Single-file checkpoint container.
//!
//! ```text
//! magic "PWCKPT01"                      8 bytes
//! header length n                       u64 LE
//! JSON header                           n bytes, UTF-8
//! 4 × (count u64 LE, count × f64 LE)    student, teacher, detector, bank
//! ```
//!
//! The detector block is empty when the run had no detector. Bank values are
//! stored class by class, oldest entry first, with queue lengths in the header.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::detector::RegionClassifier;
use crate::error::{io_err, Error, Result};
use crate::protobank::{BankLayout, PrototypeBank};
use crate::segmodel::{SegModel, SegModelConfig};

use super::{TrainConfig, TrainState};

pub const MAGIC: &[u8; 8] = b"PWCKPT01";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorHeader {
    pub num_classes: usize,
    pub channels: usize,
    pub trained: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub config: TrainConfig,
    pub epoch: usize,
    pub seed: u64,
    pub num_classes: usize,
    pub model: SegModelConfig,
    pub detector: Option<DetectorHeader>,
    pub bank: BankLayout,
}

/// Decoded checkpoint contents.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub student: SegModel,
    pub teacher: SegModel,
    pub detector: Option<RegionClassifier>,
    pub bank: PrototypeBank,
}

fn push_block(out: &mut Vec<u8>, values: &[f64]) {
    out.extend_from_slice(&(values.len() as u64).to_le_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode(state: &TrainState) -> Result<Vec<u8>> {
    let detector = state.detector.as_ref().map(|d| DetectorHeader {
        num_classes: d.num_classes(),
        channels: state.student.config().channels,
        trained: d.is_trained(),
    });
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        config: state.config.clone(),
        epoch: state.epoch,
        seed: state.config.seed,
        num_classes: state.num_classes,
        model: *state.student.config(),
        detector,
        bank: state.bank.layout(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    push_block(&mut out, state.student.params());
    push_block(&mut out, state.teacher.params());
    push_block(
        &mut out,
        &state
            .detector
            .as_ref()
            .map(RegionClassifier::flat_params)
            .unwrap_or_default(),
    );
    push_block(&mut out, &state.bank.flat_contents());
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn corrupt(&self, reason: impl Into<String>) -> Error {
        Error::CorruptCheckpoint {
            offset: self.pos,
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| self.corrupt(format!("truncated {what} (need {n} bytes)")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn block(&mut self, what: &str) -> Result<Vec<f64>> {
        let start = self.pos;
        let count = self.u64(what)?;
        let len = usize::try_from(count)
            .ok()
            .and_then(|c| c.checked_mul(8))
            .ok_or_else(|| Error::CorruptCheckpoint {
                offset: start,
                reason: format!("{what} length {count} too large"),
            })?;
        let data = self.take(len, what)?;
        let values: Vec<f64> = data
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::CorruptCheckpoint {
                offset: start + 8 + 8 * i,
                reason: format!("non-finite value in {what}"),
            });
        }
        Ok(values)
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8, "magic")? != MAGIC {
        return Err(Error::CorruptCheckpoint {
            offset: 0,
            reason: "bad magic bytes".into(),
        });
    }
    let n = r.u64("header length")?;
    let header_start = r.pos;
    let n = usize::try_from(n).map_err(|_| r.corrupt("header length too large"))?;
    let json = r.take(n, "header")?;
    let header: CheckpointHeader = serde_json::from_slice(json).map_err(|e| Error::CorruptCheckpoint {
        offset: header_start,
        reason: format!("header: {e}"),
    })?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::CorruptCheckpoint {
            offset: header_start,
            reason: format!("unsupported format version {}", header.format_version),
        });
    }
    let at = |offset: usize| {
        move |e: Error| Error::CorruptCheckpoint {
            offset,
            reason: e.to_string(),
        }
    };
    let s_off = r.pos;
    let student = SegModel::from_params(header.model, r.block("student block")?).map_err(at(s_off))?;
    let t_off = r.pos;
    let teacher = SegModel::from_params(header.model, r.block("teacher block")?).map_err(at(t_off))?;
    let d_off = r.pos;
    let det_values = r.block("detector block")?;
    let detector = match &header.detector {
        Some(d) => Some(
            RegionClassifier::from_flat_params(
                header.config.detector.clone(),
                d.num_classes,
                d.channels,
                d.trained,
                &det_values,
            )
            .map_err(at(d_off))?,
        ),
        None if det_values.is_empty() => None,
        None => {
            return Err(at(d_off)(Error::ShapeMismatch(
                "detector block without detector header".into(),
            )))
        }
    };
    let b_off = r.pos;
    let bank = PrototypeBank::from_parts(&header.bank, &r.block("bank block")?).map_err(at(b_off))?;
    if r.pos != bytes.len() {
        return Err(r.corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(Checkpoint {
        header,
        student,
        teacher,
        detector,
        bank,
    })
}

pub fn save_checkpoint(path: &Path, state: &TrainState) -> Result<()> {
    std::fs::write(path, encode(state)?).map_err(io_err(path))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode(&std::fs::read(path).map_err(io_err(path))?)
}
