//! Versioned binary container for model weights.
//!
//! Layout: `"GWMK"` magic, a little-endian `u32` format version, a `u64`
//! header length, a JSON header (model kind, scalar width, model version,
//! config, parameter-slice lengths), then the raw parameters little-endian in
//! slice order. Everything is deterministic, so re-saving an unchanged model
//! reproduces the file byte for byte; files from an incompatible format
//! version or scalar width are rejected with a clear error.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamSet;
use crate::watermark::{DetectorConfig, DetectorModel, GeneratorConfig, GeneratorModel};
use crate::{Scalar, ScalarKind};

pub const MAGIC: [u8; 4] = *b"GWMK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    model: String,
    scalar: ScalarKind,
    version: String,
    fine_tuned_for: Option<String>,
    config: serde_json::Value,
    param_lens: Vec<usize>,
}

fn encode<S: Scalar, P: ParamSet<S>>(header: &Header, params: &P) -> Result<Vec<u8>> {
    let header_bytes = serde_json::to_vec(header)?;
    let mut out = Vec::new();
    out.write_all(&MAGIC)?;
    out.write_u32::<LittleEndian>(FORMAT_VERSION)?;
    out.write_u64::<LittleEndian>(header_bytes.len() as u64)?;
    out.write_all(&header_bytes)?;
    for slice in params.param_slices() {
        for &v in slice {
            match S::KIND {
                ScalarKind::F32 => {
                    out.write_f32::<LittleEndian>(v.to_f32().expect("f32 scalar"))?
                }
                ScalarKind::F64 => {
                    out.write_f64::<LittleEndian>(v.to_f64().expect("f64 scalar"))?
                }
            }
        }
    }
    Ok(out)
}

fn decode_header(bytes: &mut &[u8]) -> Result<Header> {
    let mut magic = [0u8; 4];
    bytes
        .read_exact(&mut magic)
        .map_err(|_| Error::Checkpoint("file too short for a checkpoint".into()))?;
    if magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic {magic:?}; not a genmark checkpoint"
        )));
    }
    let version = bytes
        .read_u32::<LittleEndian>()
        .map_err(|_| Error::Checkpoint("truncated format version".into()))?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint format version {version}; this build reads {FORMAT_VERSION}"
        )));
    }
    let header_len = bytes
        .read_u64::<LittleEndian>()
        .map_err(|_| Error::Checkpoint("truncated header length".into()))?
        as usize;
    if bytes.len() < header_len {
        return Err(Error::Checkpoint("truncated header".into()));
    }
    let (header_bytes, rest) = bytes.split_at(header_len);
    let header: Header = serde_json::from_slice(header_bytes)
        .map_err(|e| Error::Checkpoint(format!("unreadable header: {e}")))?;
    *bytes = rest;
    Ok(header)
}

fn decode_params<S: Scalar, P: ParamSet<S>>(
    header: &Header,
    mut bytes: &[u8],
    model: &mut P,
) -> Result<()> {
    if header.scalar != S::KIND {
        return Err(Error::Checkpoint(format!(
            "scalar width mismatch: file holds {:?}, caller wants {:?}",
            header.scalar,
            S::KIND
        )));
    }
    let mut slices = model.param_slices_mut();
    let lens: Vec<usize> = slices.iter().map(|s| s.len()).collect();
    if lens != header.param_lens {
        return Err(Error::Checkpoint(format!(
            "parameter layout mismatch: file {:?}, model {lens:?}",
            header.param_lens
        )));
    }
    for slice in &mut slices {
        for v in slice.iter_mut() {
            *v = match S::KIND {
                ScalarKind::F32 => bytes
                    .read_f32::<LittleEndian>()
                    .map(|x| crate::sc::<S>(f64::from(x)))
                    .map_err(|_| Error::Checkpoint("truncated parameter data".into()))?,
                ScalarKind::F64 => bytes
                    .read_f64::<LittleEndian>()
                    .map(crate::sc::<S>)
                    .map_err(|_| Error::Checkpoint("truncated parameter data".into()))?,
            };
        }
    }
    if !bytes.is_empty() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after parameter data",
            bytes.len()
        )));
    }
    Ok(())
}

/// Serialize a generator to checkpoint bytes.
pub fn generator_bytes<S: Scalar>(g: &GeneratorModel<S>) -> Result<Vec<u8>> {
    let header = Header {
        model: "generator".into(),
        scalar: S::KIND,
        version: g.version.clone(),
        fine_tuned_for: None,
        config: serde_json::to_value(&g.config)?,
        param_lens: g.param_slices().iter().map(|s| s.len()).collect(),
    };
    encode(&header, g)
}

/// Serialize a detector to checkpoint bytes.
pub fn detector_bytes<S: Scalar>(d: &DetectorModel<S>) -> Result<Vec<u8>> {
    let header = Header {
        model: "detector".into(),
        scalar: S::KIND,
        version: d.version.clone(),
        fine_tuned_for: d.fine_tuned_for.clone(),
        config: serde_json::to_value(&d.config)?,
        param_lens: d.param_slices().iter().map(|s| s.len()).collect(),
    };
    encode(&header, d)
}

pub fn generator_from_bytes<S: Scalar>(mut bytes: &[u8]) -> Result<GeneratorModel<S>> {
    let header = decode_header(&mut bytes)?;
    if header.model != "generator" {
        return Err(Error::Checkpoint(format!(
            "expected a generator checkpoint, found {:?}",
            header.model
        )));
    }
    let config: GeneratorConfig = serde_json::from_value(header.config.clone())
        .map_err(|e| Error::Checkpoint(format!("unreadable generator config: {e}")))?;
    let mut model = GeneratorModel::new(config, 0)?;
    decode_params(&header, bytes, &mut model)?;
    model.version = header.version;
    Ok(model)
}

pub fn detector_from_bytes<S: Scalar>(mut bytes: &[u8]) -> Result<DetectorModel<S>> {
    let header = decode_header(&mut bytes)?;
    if header.model != "detector" {
        return Err(Error::Checkpoint(format!(
            "expected a detector checkpoint, found {:?}",
            header.model
        )));
    }
    let config: DetectorConfig = serde_json::from_value(header.config.clone())
        .map_err(|e| Error::Checkpoint(format!("unreadable detector config: {e}")))?;
    let mut model = DetectorModel::new(config, 0)?;
    decode_params(&header, bytes, &mut model)?;
    model.version = header.version;
    model.fine_tuned_for = header.fine_tuned_for;
    Ok(model)
}

pub fn save_generator<S: Scalar>(g: &GeneratorModel<S>, path: &Path) -> Result<()> {
    write_atomic(path, &generator_bytes(g)?)
}

pub fn load_generator<S: Scalar>(path: &Path) -> Result<GeneratorModel<S>> {
    generator_from_bytes(&std::fs::read(path)?)
}

pub fn save_detector<S: Scalar>(d: &DetectorModel<S>, path: &Path) -> Result<()> {
    write_atomic(path, &detector_bytes(d)?)
}

pub fn load_detector<S: Scalar>(path: &Path) -> Result<DetectorModel<S>> {
    detector_from_bytes(&std::fs::read(path)?)
}

/// Write via a sibling temp file and rename, so a crash never leaves a
/// half-written checkpoint at the target path.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}
