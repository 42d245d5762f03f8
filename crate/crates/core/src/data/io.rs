//! Dataset file: magic `SFDS0001`, then little-endian `u32` class count,
//! training count and test count, then every training sample followed by
//! every test sample. A sample is a flags byte (bit 0: label present, bit 1:
//! mask present), an `i32` label (-1 when absent), 6400 `f64` pixels, the
//! optional 6400-byte mask, and a `u32`-length-prefixed JSON metadata record.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::synth::ShapeFamily;
use super::{RawDataset, Sample, SampleMeta};
use crate::error::{Error, Result};
use crate::CHIP_PIXELS;

pub const DATASET_MAGIC: &[u8; 8] = b"SFDS0001";

const HAS_LABEL: u8 = 1;
const HAS_MASK: u8 = 2;
const HEADER_BYTES: u64 = 8 + 3 * 4;

fn format_err(offset: u64, msg: impl Into<String>) -> Error {
    Error::Format {
        what: "dataset",
        offset,
        msg: msg.into(),
    }
}

fn meta_json(meta: &SampleMeta) -> Result<Vec<u8>> {
    Ok(serde_json::to_vec(meta)?)
}

/// Exact size in bytes of the file [`write_dataset`] produces.
pub fn dataset_file_size(raw: &RawDataset) -> Result<u64> {
    let mut total = HEADER_BYTES;
    for s in raw.train.iter().chain(&raw.test) {
        total += 1 + 4 + 8 * CHIP_PIXELS as u64 + 4;
        if s.mask.is_some() {
            total += CHIP_PIXELS as u64;
        }
        total += meta_json(&s.meta)?.len() as u64;
    }
    Ok(total)
}

fn count_u32(what: &str, n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::invalid("write_dataset", format!("{what} {n} does not fit in u32")))
}

pub fn write_dataset<W: Write>(raw: &RawDataset, mut w: W) -> Result<()> {
    w.write_all(DATASET_MAGIC)?;
    w.write_all(&count_u32("class count", raw.num_classes())?.to_le_bytes())?;
    w.write_all(&count_u32("training count", raw.train.len())?.to_le_bytes())?;
    w.write_all(&count_u32("test count", raw.test.len())?.to_le_bytes())?;
    for s in raw.train.iter().chain(&raw.test) {
        if s.image.len() != CHIP_PIXELS {
            return Err(Error::shape("write_dataset", "image pixels", CHIP_PIXELS, s.image.len()));
        }
        let flags = if s.label.is_some() { HAS_LABEL } else { 0 } | if s.mask.is_some() { HAS_MASK } else { 0 };
        w.write_all(&[flags])?;
        let label = match s.label {
            Some(l) => i32::try_from(l).map_err(|_| Error::invalid("write_dataset", format!("label {l} too large")))?,
            None => -1,
        };
        w.write_all(&label.to_le_bytes())?;
        let mut buf = Vec::with_capacity(8 * CHIP_PIXELS);
        for v in &s.image {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        if let Some(m) = &s.mask {
            if m.len() != CHIP_PIXELS {
                return Err(Error::shape("write_dataset", "mask pixels", CHIP_PIXELS, m.len()));
            }
            w.write_all(m)?;
        }
        let json = meta_json(&s.meta)?;
        w.write_all(&count_u32("metadata length", json.len())?.to_le_bytes())?;
        w.write_all(&json)?;
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
        self.inner
            .read_exact(buf)
            .map_err(|e| format_err(self.offset, format!("reading {what}: {e}")))?;
        self.offset += buf.len() as u64;
        Ok(())
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let mut b = [0u8; 4];
        self.exact(&mut b, what)?;
        Ok(u32::from_le_bytes(b))
    }
}

pub fn read_dataset<R: Read>(r: R) -> Result<RawDataset> {
    let mut r = Counting { inner: r, offset: 0 };
    let mut magic = [0u8; 8];
    r.exact(&mut magic, "magic")?;
    if &magic != DATASET_MAGIC {
        return Err(format_err(0, format!("bad magic {:?}", String::from_utf8_lossy(&magic))));
    }
    let num_classes = r.u32("class count")? as usize;
    if num_classes == 0 || num_classes > ShapeFamily::ALL.len() {
        return Err(format_err(8, format!("class count {num_classes} out of range")));
    }
    let n_train = r.u32("training count")? as usize;
    let n_test = r.u32("test count")? as usize;

    let mut samples = Vec::with_capacity((n_train + n_test).min(1 << 16));
    let mut pixels = vec![0u8; 8 * CHIP_PIXELS];
    for idx in 0..n_train + n_test {
        let start = r.offset;
        let mut flags = [0u8];
        r.exact(&mut flags, "sample flags")?;
        let flags = flags[0];
        if flags & !(HAS_LABEL | HAS_MASK) != 0 {
            return Err(format_err(start, format!("sample {idx}: unknown flag bits {flags:#04x}")));
        }
        let mut lb = [0u8; 4];
        r.exact(&mut lb, "label")?;
        let raw_label = i32::from_le_bytes(lb);
        let label = if flags & HAS_LABEL != 0 {
            match usize::try_from(raw_label) {
                Ok(l) if l < num_classes => Some(l),
                _ => return Err(format_err(start + 1, format!("sample {idx}: label {raw_label} out of range"))),
            }
        } else {
            None
        };
        r.exact(&mut pixels, "image")?;
        let image = pixels
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let mask = if flags & HAS_MASK != 0 {
            let at = r.offset;
            let mut m = vec![0u8; CHIP_PIXELS];
            r.exact(&mut m, "mask")?;
            if let Some(p) = m.iter().position(|&v| v > 1) {
                return Err(format_err(at + p as u64, format!("sample {idx}: mask value {} is not binary", m[p])));
            }
            Some(m)
        } else {
            None
        };
        let len = r.u32("metadata length")? as usize;
        if len > 1 << 20 {
            return Err(format_err(r.offset - 4, format!("sample {idx}: implausible metadata length {len}")));
        }
        let at = r.offset;
        let mut json = vec![0u8; len];
        r.exact(&mut json, "metadata")?;
        let meta: SampleMeta =
            serde_json::from_slice(&json).map_err(|e| format_err(at, format!("sample {idx} metadata: {e}")))?;
        samples.push(Sample { image, label, mask, meta });
    }
    let mut probe = [0u8; 1];
    if r.inner.read(&mut probe)? != 0 {
        return Err(format_err(r.offset, "trailing bytes after last sample"));
    }
    let test = samples.split_off(n_train);
    Ok(RawDataset {
        class_names: ShapeFamily::ALL[..num_classes].iter().map(|f| f.name().to_string()).collect(),
        train: samples,
        test,
    })
}

pub fn save_dataset(raw: &RawDataset, path: impl AsRef<Path>) -> Result<()> {
    write_dataset(raw, BufWriter::new(File::create(path)?))
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<RawDataset> {
    read_dataset(BufReader::new(File::open(path)?))
}
