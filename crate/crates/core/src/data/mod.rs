//! Synthetic SAR-like chips, few-shot splits and the on-disk dataset format.

mod io;
mod split;
mod synth;

use serde::{Deserialize, Serialize};

pub use io::{dataset_file_size, load_dataset, read_dataset, save_dataset, write_dataset, DATASET_MAGIC};
pub use split::{balanced_head, few_shot_split, DatasetSplit};
pub use synth::{
    derive_seed, generate_dataset, render_chip, GeneratorConfig, PoseJitter, RenderedChip, ShapeFamily, CLUTTER_MAX, SPECKLE_FLOOR,
};

/// Per-sample provenance; enough to regenerate the chip.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub id: u64,
    pub class_name: String,
    pub pose_deg: f64,
    pub scale: f64,
    pub dx: f64,
    pub dy: f64,
    pub seed: u64,
}

/// One 80x80 chip. Pixel values are row-major in `[0, 1]`; masks use 1 for
/// target pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Vec<f64>,
    pub label: Option<usize>,
    pub mask: Option<Vec<u8>>,
    pub meta: SampleMeta,
}

impl Sample {
    pub fn id(&self) -> u64 {
        self.meta.id
    }
}

/// Generator output before any few-shot split: every sample carries both a
/// class label and a mask.
#[derive(Clone, Debug, PartialEq)]
pub struct RawDataset {
    pub class_names: Vec<String>,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl RawDataset {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }
}
