//! Versioned model container.
//!
//! Layout: magic `3DIF`, `u32` version, `u8` variant, length-prefixed JSON
//! architecture descriptor, `u32` tensor count, then for every tensor its
//! name, rank, `u32` extents and little-endian `f32` values, followed by a
//! CRC32 of all preceding bytes.

use std::fs;
use std::path::Path;

use thiserror::Error;

use super::arch::{ArchConfig, Variant};
use super::model::{DenoiserError, DenoiserModel};
use crate::data::io::{ByteReader, ByteWriter, FormatError};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"3DIF";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("architecture descriptor: {0}")]
    Descriptor(String),
    #[error("variant tag {tag} disagrees with descriptor `{descriptor}`")]
    VariantTag { tag: u8, descriptor: &'static str },
    #[error(transparent)]
    Model(#[from] DenoiserError),
}

pub fn encode_checkpoint(model: &DenoiserModel) -> Vec<u8> {
    let mut w = ByteWriter::default();
    w.bytes(CHECKPOINT_MAGIC);
    w.u32(CHECKPOINT_VERSION);
    w.u8(model.variant().tag());
    w.str(&serde_json::to_string(model.arch()).expect("descriptor serializes"));
    w.u32(model.params().len() as u32);
    for (name, t) in model.params().iter() {
        w.str(name);
        w.u32(t.rank() as u32);
        for &d in t.shape() {
            w.u32(d as u32);
        }
        w.f32s(t.data());
    }
    w.finish()
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<DenoiserModel, CheckpointError> {
    if bytes.len() >= 4 && &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(FormatError::BadMagic(bytes[..4].to_vec()).into());
    }
    let mut r = ByteReader::checked(bytes)?;
    let magic = r.take(4)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(FormatError::BadMagic(magic.to_vec()).into());
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(FormatError::Version(version).into());
    }
    let tag = r.u8()?;
    let arch: ArchConfig =
        serde_json::from_str(&r.str()?).map_err(|e| CheckpointError::Descriptor(e.to_string()))?;
    if Variant::from_tag(tag) != Some(arch.variant) {
        return Err(CheckpointError::VariantTag {
            tag,
            descriptor: arch.variant.name(),
        });
    }
    let count = r.u32()? as usize;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let name = r.str()?;
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let len: usize = shape.iter().product();
        let data = r.f32s(len)?;
        let t = Tensor::new(shape, data)
            .map_err(|e| FormatError::Invalid(format!("tensor `{name}`: {e}")))?;
        params.push(&name, t);
    }
    if r.remaining() != 0 {
        return Err(FormatError::Invalid(format!("{} trailing bytes", r.remaining())).into());
    }
    Ok(DenoiserModel::from_parts(arch, params)?)
}

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    model: &DenoiserModel,
) -> Result<(), CheckpointError> {
    fs::write(path, encode_checkpoint(model)).map_err(FormatError::from)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<DenoiserModel, CheckpointError> {
    decode_checkpoint(&fs::read(path).map_err(FormatError::from)?)
}
