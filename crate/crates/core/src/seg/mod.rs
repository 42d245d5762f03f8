//! Classical segmentation baselines and auto-generated training masks.

mod canny;
mod otsu;

use serde::{Deserialize, Serialize};

pub use canny::{canny_morph_segment, close, fill_holes, largest_component, CannyParams};
pub use otsu::{histogram_bins, otsu_threshold, OtsuResult, OTSU_BINS, OTSU_MAX_PIXELS};

use crate::data::DatasetSplit;
use crate::error::Result;
use crate::CHIP;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegMethod {
    Otsu,
    Canny,
}

impl SegMethod {
    pub fn name(self) -> &'static str {
        match self {
            SegMethod::Otsu => "otsu",
            SegMethod::Canny => "canny",
        }
    }
}

/// Segments one chip. The flag is set when Otsu meets a constant image.
pub fn segment_chip(image: &[f64], method: SegMethod, canny: &CannyParams) -> Result<(Vec<u8>, bool)> {
    match method {
        SegMethod::Otsu => {
            let r = otsu_threshold(image)?;
            Ok((r.mask, r.degenerate))
        }
        SegMethod::Canny => Ok((canny_morph_segment(image, CHIP, canny)?, false)),
    }
}

/// A split whose unlabelled masks were produced by a classical method.
#[derive(Clone, Debug)]
pub struct AutosegLabels {
    pub split: DatasetSplit,
    pub method: SegMethod,
    /// The replaced masks, in unlabelled-pool order, kept for scoring.
    pub originals: Vec<Vec<u8>>,
    /// Chips the method could not threshold.
    pub degenerate: usize,
}

/// Overwrites every unlabelled mask with `method`'s output.
pub fn make_autoseg_labels(split: &DatasetSplit, method: SegMethod, canny: &CannyParams) -> Result<AutosegLabels> {
    let mut out = split.clone();
    let mut originals = Vec::with_capacity(out.unlabeled.len());
    let mut degenerate = 0;
    for s in &mut out.unlabeled {
        let (mask, flag) = segment_chip(&s.image, method, canny)?;
        degenerate += usize::from(flag);
        if let Some(old) = s.mask.replace(mask) {
            originals.push(old);
        }
    }
    Ok(AutosegLabels {
        split: out,
        method,
        originals,
        degenerate,
    })
}
