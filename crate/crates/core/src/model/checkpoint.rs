//! Single-file checkpoints.
//!
//! Layout: the 8-byte magic `SFAS0001`, a little-endian `u64` byte length,
//! that many bytes of UTF-8 JSON manifest, then every tensor as raw
//! little-endian `f64` in manifest order. Offsets in the manifest are relative
//! to the first blob byte.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::layers::SlotKind;
use super::{ArchConfig, Part, SfasModel};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SFAS0001";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: [usize; 4],
    pub dtype: String,
    pub offset: u64,
    pub buffer: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub num_classes: usize,
    pub seed: u64,
    pub arch: ArchConfig,
    pub tensors: Vec<CheckpointEntry>,
}

pub fn write_checkpoint<T: Scalar, W: Write>(model: &SfasModel<T>, mut w: W) -> Result<()> {
    let mut tensors = Vec::new();
    let mut offset = 0u64;
    let slots = model.all_slots();
    for s in &slots {
        tensors.push(CheckpointEntry {
            name: s.name.clone(),
            shape: s.shape.dims(),
            dtype: "f64".into(),
            offset,
            buffer: s.kind == SlotKind::Buffer,
        });
        offset += 8 * s.value.len() as u64;
    }
    let manifest = CheckpointManifest {
        num_classes: model.num_classes(),
        seed: model.seed(),
        arch: model.arch().clone(),
        tensors,
    };
    let json = serde_json::to_vec(&manifest)?;
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for s in &slots {
        for v in s.value {
            w.write_all(&v.as_f64().to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

struct Counting<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Counting<R> {
    fn exact(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        self.inner.read_exact(buf).map_err(|e| Error::Format {
            what: "checkpoint",
            offset: self.offset,
            msg: format!("reading {what}: {e}"),
        })?;
        self.offset += buf.len() as u64;
        Ok(())
    }
}

fn format_err(offset: u64, msg: impl Into<String>) -> Error {
    Error::Format {
        what: "checkpoint",
        offset,
        msg: msg.into(),
    }
}

/// Reads a checkpoint, validating every tensor against the architecture.
pub fn read_checkpoint<T: Scalar, R: Read>(r: R) -> Result<SfasModel<T>> {
    let mut r = Counting { inner: r, offset: 0 };
    let mut magic = [0u8; 8];
    r.exact(&mut magic, "magic")?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(format_err(0, format!("bad magic {:?}", String::from_utf8_lossy(&magic))));
    }
    let mut len = [0u8; 8];
    r.exact(&mut len, "manifest length")?;
    let len = u64::from_le_bytes(len);
    if len > 64 << 20 {
        return Err(format_err(8, format!("implausible manifest length {len}")));
    }
    let mut json = vec![0u8; len as usize];
    r.exact(&mut json, "manifest")?;
    let manifest: CheckpointManifest =
        serde_json::from_slice(&json).map_err(|e| format_err(16, format!("manifest: {e}")))?;

    let mut model = SfasModel::<T>::zeroed(manifest.num_classes, manifest.arch.clone())?;
    model.seed = manifest.seed;
    let blob_start = r.offset;
    let mut entries = manifest.tensors.iter();
    for part in Part::ALL {
        for slot in model.slots_mut(part) {
            let e = entries
                .next()
                .ok_or_else(|| format_err(blob_start, format!("manifest is missing tensor {}", slot.name)))?;
            if e.name != slot.name {
                return Err(format_err(blob_start + e.offset, format!("expected tensor {}, found {}", slot.name, e.name)));
            }
            if e.shape != slot.shape.dims() {
                return Err(format_err(
                    blob_start + e.offset,
                    format!("{}: shape {:?} does not match architecture {:?}", e.name, e.shape, slot.shape.dims()),
                ));
            }
            if e.dtype != "f64" {
                return Err(format_err(blob_start + e.offset, format!("{}: unsupported dtype {}", e.name, e.dtype)));
            }
            if r.offset != blob_start + e.offset {
                return Err(format_err(r.offset, format!("{}: offset {} is not contiguous", e.name, e.offset)));
            }
            let mut buf = [0u8; 8];
            for v in slot.value.iter_mut() {
                r.exact(&mut buf, &e.name)?;
                *v = T::lit(f64::from_le_bytes(buf));
            }
        }
    }
    if let Some(extra) = entries.next() {
        return Err(format_err(blob_start + extra.offset, format!("unexpected tensor {}", extra.name)));
    }
    Ok(model)
}

pub fn save_checkpoint<T: Scalar>(model: &SfasModel<T>, path: impl AsRef<Path>) -> Result<()> {
    write_checkpoint(model, BufWriter::new(File::create(path)?))
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<SfasModel<T>> {
    read_checkpoint(BufReader::new(File::open(path)?))
}
