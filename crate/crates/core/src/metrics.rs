//! Recognition and segmentation scores, and their CSV/JSON tables.
//!
//! All rates are fractions in `[0, 1]`. A rate whose denominator is zero
//! (for example target accuracy on masks with no target pixels) is reported
//! as 1, the vacuous score.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub class_names: Vec<String>,
    pub per_class_accuracy: Vec<f64>,
    pub per_class_total: Vec<usize>,
    /// Correct predictions over all samples.
    pub overall_accuracy: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

fn rate(num: u64, den: u64) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

pub fn classification_report(predictions: &[usize], labels: &[usize], class_names: &[String]) -> Result<ClassificationReport> {
    const OP: &str = "classification_report";
    if labels.is_empty() {
        return Err(Error::invalid(OP, "no samples"));
    }
    if predictions.len() != labels.len() {
        return Err(Error::shape(OP, "prediction count", labels.len(), predictions.len()));
    }
    let c = class_names.len();
    let mut confusion = vec![vec![0usize; c]; c];
    for (&p, &l) in predictions.iter().zip(labels) {
        if p >= c || l >= c {
            return Err(Error::invalid(OP, format!("class index {} out of range for {c} classes", p.max(l))));
        }
        confusion[l][p] += 1;
    }
    let per_class_total: Vec<usize> = confusion.iter().map(|row| row.iter().sum()).collect();
    let per_class_accuracy = (0..c)
        .map(|i| rate(confusion[i][i] as u64, per_class_total[i] as u64))
        .collect();
    let correct: usize = (0..c).map(|i| confusion[i][i]).sum();
    Ok(ClassificationReport {
        class_names: class_names.to_vec(),
        per_class_accuracy,
        per_class_total,
        overall_accuracy: correct as f64 / labels.len() as f64,
        confusion,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentationReport {
    pub target_acc: f64,
    pub background_acc: f64,
    pub accuracy: f64,
    pub iou: f64,
    pub counts: PixelCounts,
}

impl SegmentationReport {
    pub fn from_counts(counts: PixelCounts) -> Self {
        let PixelCounts { tp, fp, fn_, tn } = counts;
        SegmentationReport {
            target_acc: rate(tp, tp + fn_),
            background_acc: rate(tn, tn + fp),
            accuracy: rate(tp + tn, tp + fp + fn_ + tn),
            iou: rate(tp, tp + fp + fn_),
            counts,
        }
    }
}

/// Pixel counts for concatenated binary masks.
pub fn pixel_counts(pred: &[u8], gt: &[u8]) -> Result<PixelCounts> {
    const OP: &str = "segmentation_report";
    if pred.len() != gt.len() {
        return Err(Error::shape(OP, "mask pixels", gt.len(), pred.len()));
    }
    let mut c = PixelCounts::default();
    for (&p, &g) in pred.iter().zip(gt) {
        match (p, g) {
            (1, 1) => c.tp += 1,
            (1, 0) => c.fp += 1,
            (0, 1) => c.fn_ += 1,
            (0, 0) => c.tn += 1,
            _ => return Err(Error::invalid(OP, format!("mask value {} is not binary", p.max(g)))),
        }
    }
    Ok(c)
}

/// Micro-averaged scores over every pixel of every mask pair.
pub fn segmentation_report(pred: &[u8], gt: &[u8]) -> Result<SegmentationReport> {
    if gt.is_empty() {
        return Err(Error::invalid("segmentation_report", "no pixels"));
    }
    Ok(SegmentationReport::from_counts(pixel_counts(pred, gt)?))
}

/// One finished training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub k_labeled: usize,
    pub seed: u64,
    pub variant: String,
    pub accuracy: f64,
    pub report: ClassificationReport,
}

/// One row of the method comparison table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentationRow {
    pub method: String,
    pub report: SegmentationReport,
}

pub const RUN_COLUMNS: [&str; 4] = ["k_labeled", "seed", "variant", "accuracy"];
pub const SEGMENTATION_COLUMNS: [&str; 5] = ["method", "target_acc", "background_acc", "accuracy", "iou"];

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

/// Median accuracy over seeds for each `(variant, k)`; variants in first
/// appearance order, `k` ascending.
pub fn ablation_matrix(records: &[RunRecord]) -> (Vec<String>, Vec<usize>, Vec<Vec<Option<f64>>>) {
    let mut variants: Vec<String> = Vec::new();
    for r in records {
        if !variants.contains(&r.variant) {
            variants.push(r.variant.clone());
        }
    }
    let mut ks: Vec<usize> = records.iter().map(|r| r.k_labeled).collect();
    ks.sort_unstable();
    ks.dedup();
    let cells = variants
        .iter()
        .map(|v| {
            ks.iter()
                .map(|&k| {
                    let mut acc: Vec<f64> = records
                        .iter()
                        .filter(|r| &r.variant == v && r.k_labeled == k)
                        .map(|r| r.accuracy)
                        .collect();
                    (!acc.is_empty()).then(|| median(&mut acc))
                })
                .collect()
        })
        .collect();
    (variants, ks, cells)
}

fn write_csv<S: AsRef<str>>(path: &Path, header: &[&str], rows: &[Vec<S>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r.iter().map(|s| s.as_ref()))?;
    }
    w.flush()?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes)?;
    Ok(())
}

/// Writes `runs.csv`, `runs.json` and the variant-by-k median matrix
/// `ablation.csv` into `dir`.
pub fn emit_tables(records: &[RunRecord], dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let runs_csv = dir.join("runs.csv");
    let rows: Vec<Vec<String>> = records
        .iter()
        .map(|r| vec![r.k_labeled.to_string(), r.seed.to_string(), r.variant.clone(), r.accuracy.to_string()])
        .collect();
    write_csv(&runs_csv, &RUN_COLUMNS, &rows)?;
    let runs_json = dir.join("runs.json");
    write_json(&runs_json, &records)?;

    let (variants, ks, cells) = ablation_matrix(records);
    let mut header = vec!["variant".to_string()];
    header.extend(ks.iter().map(|k| format!("k={k}")));
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let rows: Vec<Vec<String>> = variants
        .iter()
        .zip(&cells)
        .map(|(v, row)| {
            std::iter::once(v.clone())
                .chain(row.iter().map(|c| c.map(|a| a.to_string()).unwrap_or_default()))
                .collect()
        })
        .collect();
    let matrix = dir.join("ablation.csv");
    write_csv(&matrix, &header, &rows)?;
    Ok(vec![runs_csv, runs_json, matrix])
}

/// Writes the method comparison as `segmentation.csv` and `segmentation.json`.
pub fn emit_segmentation_table(rows: &[SegmentationRow], dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let csv_path = dir.join("segmentation.csv");
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.method.clone(),
                r.report.target_acc.to_string(),
                r.report.background_acc.to_string(),
                r.report.accuracy.to_string(),
                r.report.iou.to_string(),
            ]
        })
        .collect();
    write_csv(&csv_path, &SEGMENTATION_COLUMNS, &body)?;
    let json_path = dir.join("segmentation.json");
    write_json(&json_path, &rows)?;
    Ok(vec![csv_path, json_path])
}

/// Writes a classification report as `recognition.json` plus the confusion
/// matrix as `confusion.csv`.
pub fn emit_classification(report: &ClassificationReport, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let json_path = dir.join("recognition.json");
    write_json(&json_path, report)?;
    let mut header = vec!["class".to_string()];
    header.extend(report.class_names.iter().cloned());
    header.push("accuracy".into());
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let rows: Vec<Vec<String>> = report
        .class_names
        .iter()
        .enumerate()
        .map(|(i, name)| {
            std::iter::once(name.clone())
                .chain(report.confusion[i].iter().map(|c| c.to_string()))
                .chain(std::iter::once(report.per_class_accuracy[i].to_string()))
                .collect()
        })
        .collect();
    let csv_path = dir.join("confusion.csv");
    write_csv(&csv_path, &header, &rows)?;
    Ok(vec![json_path, csv_path])
}
