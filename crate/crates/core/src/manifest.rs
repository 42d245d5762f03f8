//! Run manifest: everything needed to reproduce a training run.

use std::fs;
use std::io::{self, Read};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{write_dataset, RawDataset};
use crate::error::Result;
use crate::model::ArchConfig;
use crate::train::TrainConfig;

/// Interpretive choices that shape a run, recorded verbatim.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DesignKnobs {
    pub loop_granularity: String,
    pub residue: String,
    pub alpha_schedule: String,
    pub labeled_sampling: String,
    pub batch_norm_in_residue: String,
    pub precision: String,
}

impl DesignKnobs {
    pub fn current(precision: &str) -> Self {
        DesignKnobs {
            loop_granularity: "one masked batch and one labelled batch per loop".into(),
            residue: "previous loop's batch recomputed through the current extractor and frozen head".into(),
            alpha_schedule: "alpha(t) = 1 - 1/t".into(),
            labeled_sampling: "with replacement when the pool is smaller than a batch".into(),
            batch_norm_in_residue: "batch statistics, running statistics untouched".into(),
            precision: precision.into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub config: TrainConfig,
    pub seeds: Vec<u64>,
    pub dataset_sha256: String,
    pub arch: ArchConfig,
    pub design: DesignKnobs,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint_sha256: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub history_sha256: Option<String>,
}

impl RunManifest {
    pub fn new(config: TrainConfig, seeds: Vec<u64>, dataset_sha256: String, precision: &str) -> Self {
        RunManifest {
            tool_version: env!("CARGO_PKG_VERSION").into(),
            config,
            seeds,
            dataset_sha256,
            arch: ArchConfig::default(),
            design: DesignKnobs::current(precision),
            checkpoint_sha256: None,
            history_sha256: None,
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        fs::write(path, bytes)?;
        Ok(())
    }
}

struct HashWriter(Sha256);

impl io::Write for HashWriter {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        self.0.update(buf);
        Ok(buf.len())
    }

    fn flush(&mut self) -> io::Result<()> {
        Ok(())
    }
}

/// SHA-256 of the dataset's serialized bytes; equals [`file_sha256`] of the
/// file [`crate::data::save_dataset`] writes.
pub fn dataset_sha256(raw: &RawDataset) -> Result<String> {
    let mut w = HashWriter(Sha256::new());
    write_dataset(raw, &mut w)?;
    Ok(hex::encode(w.0.finalize()))
}

pub fn file_sha256(path: impl AsRef<Path>) -> Result<String> {
    let mut f = fs::File::open(path)?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}
