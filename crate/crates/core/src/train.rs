//! The two-phase training loop, run orchestration and evaluation.
//!
//! Each loop `t` takes one masked (unlabelled) batch and one labelled batch.
//!
//! * Phase 1: the decoder is updated from the plain segmentation loss. The
//!   extractor is updated from the segmentation loss plus `alpha(t)` times
//!   the recognition loss recomputed on loop `t-1`'s labelled batch through
//!   the current extractor and the frozen classifier.
//! * Phase 2: the classifier is updated from the plain recognition loss. The
//!   extractor is updated from the recognition loss plus `alpha(t)` times the
//!   segmentation loss recomputed on loop `t-1`'s masked batch through the
//!   current extractor and the frozen decoder.
//!
//! Residue passes run batch norm in [`BnMode::Probe`], so the frozen head
//! (including its running statistics) is bit-unchanged by the phase that
//! does not own it.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{balanced_head, DatasetSplit, Sample};
use crate::error::{Error, Result};
use crate::loss::{
    alpha, irl_recognition_loss, irl_segmentation_loss, recognition_loss, recognition_loss_grad,
    segmentation_loss_with_grad, LossKind, LossRecord,
};
use crate::metrics::{classification_report, segmentation_report, ClassificationReport, SegmentationReport};
use crate::model::{input_shape, predicted_classes, predicted_masks, Part, SfasModel};
use crate::optim::{Optimizer, OptimizerKind};
use crate::scalar::Scalar;
use crate::seg::{make_autoseg_labels, CannyParams, SegMethod};
use crate::tensor::{BnMode, Tensor};
use crate::CHIP_PIXELS;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskSource {
    #[default]
    Manual,
    Otsu,
    Canny,
}

impl MaskSource {
    pub fn method(self) -> Option<SegMethod> {
        match self {
            MaskSource::Manual => None,
            MaskSource::Otsu => Some(SegMethod::Otsu),
            MaskSource::Canny => Some(SegMethod::Canny),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub loops: usize,
    pub k_labeled_per_class: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    pub use_segmentation: bool,
    pub mask_source: MaskSource,
    /// Loops between periodic test evaluations; 0 disables them.
    pub eval_every: usize,
    /// Test samples scored by each periodic evaluation, balanced over classes.
    pub eval_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            learning_rate: 1e-4,
            loops: 2000,
            k_labeled_per_class: 20,
            seed: 0,
            optimizer: OptimizerKind::default(),
            use_segmentation: true,
            mask_source: MaskSource::Manual,
            eval_every: 50,
            eval_samples: 200,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("TrainConfig", "batch_size must be >= 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("TrainConfig", format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        Ok(())
    }
}

/// Images plus whichever supervision the pool provides.
#[derive(Clone, Debug)]
pub struct Batch<T> {
    pub images: Tensor<T>,
    pub labels: Option<Vec<usize>>,
    pub masks: Option<Vec<u8>>,
    pub ids: Vec<u64>,
    /// Sequence number of the batch within its pool.
    pub batch_ref: u64,
}

impl<T: Scalar> Batch<T> {
    /// Stacks `samples`, keeping labels (masks) only if every sample has one.
    pub fn from_samples(samples: &[&Sample], batch_ref: u64) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::invalid("Batch::from_samples", "empty batch"));
        }
        let mut data = Vec::with_capacity(samples.len() * CHIP_PIXELS);
        for s in samples {
            if s.image.len() != CHIP_PIXELS {
                return Err(Error::shape("Batch::from_samples", "image pixels", CHIP_PIXELS, s.image.len()));
            }
            data.extend(s.image.iter().map(|&v| T::lit(v)));
        }
        let labels = samples.iter().map(|s| s.label).collect::<Option<Vec<_>>>();
        let masks = samples
            .iter()
            .map(|s| s.mask.as_deref())
            .collect::<Option<Vec<_>>>()
            .map(|m| m.concat());
        Ok(Batch {
            images: Tensor::from_vec(input_shape(samples.len()), data)?,
            labels,
            masks,
            ids: samples.iter().map(|s| s.id()).collect(),
            batch_ref,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Cross-loop state: the loop counter and loop `t-1`'s batches and losses.
#[derive(Clone, Debug)]
pub struct IrlState<T> {
    /// Index of the next loop to run, starting at 1.
    pub t: u64,
    pub cached_unlabeled: Option<Batch<T>>,
    pub cached_labeled: Option<Batch<T>>,
    pub prev_l_r: Option<LossRecord>,
    pub prev_l_s: Option<LossRecord>,
}

impl<T> Default for IrlState<T> {
    fn default() -> Self {
        IrlState {
            t: 1,
            cached_unlabeled: None,
            cached_labeled: None,
            prev_l_r: None,
            prev_l_s: None,
        }
    }
}

/// Parameter-and-buffer hashes taken around each phase.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseHashes {
    pub classifier_before_phase1: String,
    pub classifier_after_phase1: String,
    pub decoder_before_phase2: String,
    pub decoder_after_phase2: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub t: u64,
    pub alpha: f64,
    /// Plain recognition cross-entropy on this loop's labelled batch.
    pub ce_r: f64,
    /// Plain segmentation cross-entropy on this loop's masked batch.
    pub ce_s: Option<f64>,
    /// Combined recognition-side loss driving the phase 2 extractor update.
    pub l_r: f64,
    /// Combined segmentation-side loss driving the phase 1 extractor update.
    pub l_s: Option<f64>,
    /// Segmentation loss recomputed on loop `t-1`'s masked batch.
    pub residue_s: Option<f64>,
    /// Recognition loss recomputed on loop `t-1`'s labelled batch.
    pub residue_r: Option<f64>,
    pub hashes: Option<PhaseHashes>,
}

/// One row of the loss history file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub t: u64,
    pub l_r: f64,
    pub l_s: Option<f64>,
    pub alpha: f64,
    pub wall_ms: u64,
    pub ce_r: f64,
    pub ce_s: Option<f64>,
}

pub const HISTORY_COLUMNS: [&str; 7] = ["t", "l_r", "l_s", "alpha", "wall_ms", "ce_r", "ce_s"];

pub struct Trainer<T> {
    pub model: SfasModel<T>,
    pub irl: IrlState<T>,
    optimizer: Optimizer<T>,
    learning_rate: f64,
    use_segmentation: bool,
}

impl<T: Scalar> Trainer<T> {
    /// Wraps `model`. The learning rate may be zero here (a no-op update);
    /// [`train`] requires it to be positive.
    pub fn new(model: SfasModel<T>, cfg: &TrainConfig) -> Result<Self> {
        if !(cfg.learning_rate >= 0.0 && cfg.learning_rate.is_finite()) {
            return Err(Error::invalid("Trainer::new", format!("bad learning rate {}", cfg.learning_rate)));
        }
        Ok(Trainer {
            model,
            irl: IrlState::default(),
            optimizer: Optimizer::new(cfg.optimizer),
            learning_rate: cfg.learning_rate,
            use_segmentation: cfg.use_segmentation,
        })
    }

    pub fn into_model(self) -> SfasModel<T> {
        self.model
    }

    fn labels<'a>(b: &'a Batch<T>, op: &'static str) -> Result<&'a [usize]> {
        b.labels.as_deref().ok_or_else(|| Error::invalid(op, "labelled batch carries no class labels"))
    }

    fn masks<'a>(b: &'a Batch<T>, op: &'static str) -> Result<&'a [u8]> {
        b.masks.as_deref().ok_or_else(|| Error::invalid(op, "masked batch carries no masks"))
    }

    /// Recognition loss of `batch` through the current extractor and frozen
    /// classifier; its gradient, scaled by `weight`, is added to the
    /// extractor's accumulators.
    fn recognition_residue(&mut self, batch: &Batch<T>, weight: f64) -> Result<f64> {
        let labels = Self::labels(batch, "training_loop_step")?;
        let f = self.model.extractor_forward(&batch.images, BnMode::Probe)?;
        let probs = self.model.classifier_forward(&f, BnMode::Probe)?;
        let loss = recognition_loss(&probs, labels)?;
        let g = recognition_loss_grad(&probs, labels)?.scale(T::lit(weight));
        let gf = self.model.classifier_backward(&g, false)?;
        self.model.extractor_backward(&gf, true)?;
        Ok(loss.as_f64())
    }

    /// Segmentation counterpart of [`Self::recognition_residue`].
    fn segmentation_residue(&mut self, batch: &Batch<T>, weight: f64) -> Result<f64> {
        let masks = Self::masks(batch, "training_loop_step")?;
        let f = self.model.extractor_forward(&batch.images, BnMode::Probe)?;
        let logits = self.model.decoder_forward(&f, BnMode::Probe)?;
        let (loss, g) = segmentation_loss_with_grad(&logits, masks)?;
        let gf = self.model.decoder_backward(&g.scale(T::lit(weight)), false)?;
        self.model.extractor_backward(&gf, true)?;
        Ok(loss.as_f64())
    }

    /// Runs loop `self.irl.t` and advances the state. With `instrument`, the
    /// report carries head hashes taken around both phases.
    pub fn training_loop_step(&mut self, unlabeled: Batch<T>, labeled: Batch<T>, instrument: bool) -> Result<StepReport> {
        const OP: &str = "training_loop_step";
        if labeled.is_empty() || (self.use_segmentation && unlabeled.is_empty()) {
            return Err(Error::invalid(OP, "empty batch"));
        }
        let t = self.irl.t;
        let a = alpha(t)?;
        let lr = self.learning_rate;
        let hash = |m: &SfasModel<T>, p: Part| if instrument { m.part_hash(p) } else { String::new() };

        let c_before = hash(&self.model, Part::Classifier);
        let (mut ce_s, mut l_s, mut residue_r) = (None, None, None);
        if self.use_segmentation {
            let masks = Self::masks(&unlabeled, OP)?;
            self.model.zero_grad(Part::Extractor);
            self.model.zero_grad(Part::Decoder);
            let f = self.model.extractor_forward(&unlabeled.images, BnMode::Train)?;
            let logits = self.model.decoder_forward(&f, BnMode::Train)?;
            let (loss, g) = segmentation_loss_with_grad(&logits, masks)?;
            let gf = self.model.decoder_backward(&g, true)?;
            self.model.extractor_backward(&gf, true)?;
            self.optimizer.step(&mut self.model, Part::Decoder, lr)?;
            if t >= 2 {
                let prev = self.irl.cached_labeled.take();
                let prev = prev.ok_or_else(|| Error::invalid(OP, "no cached labelled batch at t >= 2"))?;
                residue_r = Some(self.recognition_residue(&prev, a)?);
                self.irl.cached_labeled = Some(prev);
            }
            let loss = loss.as_f64();
            l_s = Some(irl_segmentation_loss(loss, residue_r, t)?);
            ce_s = Some(loss);
            self.optimizer.step(&mut self.model, Part::Extractor, lr)?;
        }
        let c_after = hash(&self.model, Part::Classifier);

        let d_before = hash(&self.model, Part::Decoder);
        let labels = Self::labels(&labeled, OP)?;
        self.model.zero_grad(Part::Extractor);
        self.model.zero_grad(Part::Classifier);
        let f = self.model.extractor_forward(&labeled.images, BnMode::Train)?;
        let probs = self.model.classifier_forward(&f, BnMode::Train)?;
        let ce_r = recognition_loss(&probs, labels)?.as_f64();
        let g = recognition_loss_grad(&probs, labels)?;
        let gf = self.model.classifier_backward(&g, true)?;
        self.model.extractor_backward(&gf, true)?;
        self.optimizer.step(&mut self.model, Part::Classifier, lr)?;
        let mut residue_s = None;
        let l_r = if self.use_segmentation {
            if t >= 2 {
                let prev = self.irl.cached_unlabeled.take();
                let prev = prev.ok_or_else(|| Error::invalid(OP, "no cached masked batch at t >= 2"))?;
                residue_s = Some(self.segmentation_residue(&prev, a)?);
                self.irl.cached_unlabeled = Some(prev);
            }
            irl_recognition_loss(ce_r, residue_s, t)?
        } else {
            ce_r
        };
        self.optimizer.step(&mut self.model, Part::Extractor, lr)?;
        let d_after = hash(&self.model, Part::Decoder);

        self.irl.prev_l_r = Some(LossRecord {
            t,
            value: l_r,
            kind: LossKind::Recognition,
            batch_ref: labeled.batch_ref,
        });
        self.irl.prev_l_s = l_s.map(|value| LossRecord {
            t,
            value,
            kind: LossKind::Segmentation,
            batch_ref: unlabeled.batch_ref,
        });
        if self.use_segmentation {
            self.irl.cached_unlabeled = Some(unlabeled);
        }
        self.irl.cached_labeled = Some(labeled);
        self.irl.t += 1;

        Ok(StepReport {
            t,
            alpha: a,
            ce_r,
            ce_s,
            l_r,
            l_s,
            residue_s,
            residue_r,
            hashes: instrument.then(|| PhaseHashes {
                classifier_before_phase1: c_before,
                classifier_after_phase1: c_after,
                decoder_before_phase2: d_before,
                decoder_after_phase2: d_after,
            }),
        })
    }
}

/// Endless batches over a pool: shuffled passes without replacement, or
/// draws with replacement when the pool is smaller than a batch.
pub struct BatchSampler<'a> {
    pool: Vec<&'a Sample>,
    order: Vec<usize>,
    cursor: usize,
    batch_size: usize,
    rng: ChaCha8Rng,
    issued: u64,
}

impl<'a> BatchSampler<'a> {
    pub fn new(pool: Vec<&'a Sample>, batch_size: usize, seed: u64) -> Result<Self> {
        if pool.is_empty() {
            return Err(Error::invalid("BatchSampler", "empty pool"));
        }
        let order = (0..pool.len()).collect();
        Ok(BatchSampler {
            pool,
            order,
            cursor: usize::MAX,
            batch_size,
            rng: ChaCha8Rng::seed_from_u64(seed),
            issued: 0,
        })
    }

    pub fn next_batch<T: Scalar>(&mut self) -> Result<Batch<T>> {
        let n = self.pool.len();
        let picks: Vec<&Sample> = if n < self.batch_size {
            (0..self.batch_size).map(|_| self.pool[self.rng.random_range(0..n)]).collect()
        } else {
            if self.cursor.saturating_add(self.batch_size) > n {
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            let picks = self.order[self.cursor..self.cursor + self.batch_size].iter().map(|&i| self.pool[i]).collect();
            self.cursor += self.batch_size;
            picks
        };
        let b = Batch::from_samples(&picks, self.issued)?;
        self.issued += 1;
        Ok(b)
    }
}

/// Test-set scores at one point of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub t: u64,
    pub accuracy: f64,
    pub iou: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub recognition: Option<ClassificationReport>,
    pub segmentation: Option<SegmentationReport>,
}

/// Scores `samples` in eval mode: recognition over samples with labels,
/// segmentation over samples with masks. Parameters are not touched.
pub fn evaluate<T: Scalar>(
    model: &mut SfasModel<T>,
    samples: &[Sample],
    class_names: &[String],
    chunk: usize,
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::invalid("evaluate", "empty split"));
    }
    let chunk = chunk.max(1);
    let mut preds = Vec::new();
    let mut labels = Vec::new();
    let mut pred_masks = Vec::new();
    let mut gt_masks = Vec::new();
    for part in samples.chunks(chunk) {
        let refs: Vec<&Sample> = part.iter().collect();
        let b = Batch::<T>::from_samples(&refs, 0)?;
        let f = model.extractor_forward(&b.images, BnMode::Eval)?;
        let labeled: Vec<usize> = (0..part.len()).filter(|&i| part[i].label.is_some()).collect();
        if !labeled.is_empty() {
            let probs = model.classifier_forward(&f.select_items(&labeled), BnMode::Eval)?;
            preds.extend(predicted_classes(&probs));
            labels.extend(labeled.iter().map(|&i| part[i].label.expect("filtered")));
        }
        let masked: Vec<usize> = (0..part.len()).filter(|&i| part[i].mask.is_some()).collect();
        if !masked.is_empty() {
            let logits = model.decoder_forward(&f.select_items(&masked), BnMode::Eval)?;
            pred_masks.extend(predicted_masks(&logits));
            for &i in &masked {
                gt_masks.extend_from_slice(part[i].mask.as_deref().expect("filtered"));
            }
        }
    }
    let recognition = if labels.is_empty() {
        None
    } else {
        Some(classification_report(&preds, &labels, class_names)?)
    };
    let segmentation = if gt_masks.is_empty() {
        None
    } else {
        Some(segmentation_report(&pred_masks, &gt_masks)?)
    };
    Ok(EvalReport {
        recognition,
        segmentation,
    })
}

pub struct TrainOutcome<T> {
    pub model: SfasModel<T>,
    pub history: Vec<HistoryRow>,
    pub evals: Vec<EvalPoint>,
    /// Mask quality of the auto-generated labels, when they replaced the
    /// manual ones.
    pub autoseg: Option<SegmentationReport>,
}

const EVAL_CHUNK: usize = 32;

/// Trains a fresh model seeded from `cfg.seed` on `split`.
pub fn train<T: Scalar>(cfg: &TrainConfig, split: &DatasetSplit) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if split.labeled.is_empty() {
        return Err(Error::invalid("train", "labelled pool is empty"));
    }
    if cfg.use_segmentation && split.unlabeled.is_empty() {
        return Err(Error::invalid("train", "masked pool is empty; disable the segmentation loss or lower k"));
    }
    let mut autoseg = None;
    let relabeled;
    let split = match cfg.mask_source.method() {
        Some(method) if cfg.use_segmentation => {
            let out = make_autoseg_labels(split, method, &CannyParams::default())?;
            let pred: Vec<u8> = out.split.unlabeled.iter().flat_map(|s| s.mask.clone().unwrap_or_default()).collect();
            autoseg = Some(segmentation_report(&pred, &out.originals.concat())?);
            relabeled = out.split;
            &relabeled
        }
        _ => split,
    };

    let model = SfasModel::<T>::new(split.num_classes(), cfg.seed)?;
    let mut trainer = Trainer::new(model, cfg)?;
    let mut seeds = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_ba7c);
    let mut unl = if cfg.use_segmentation {
        Some(BatchSampler::new(split.unlabeled.iter().collect(), cfg.batch_size, seeds.random())?)
    } else {
        None
    };
    let mut lab = BatchSampler::new(split.labeled.iter().collect(), cfg.batch_size, seeds.random())?;
    let eval_set = balanced_head(&split.test, cfg.eval_samples);

    let mut history = Vec::with_capacity(cfg.loops);
    let mut evals = Vec::new();
    for _ in 0..cfg.loops {
        let start = Instant::now();
        let ub = match unl.as_mut() {
            Some(s) => s.next_batch()?,
            None => Batch {
                images: Tensor::zeros(input_shape(0)),
                labels: None,
                masks: None,
                ids: Vec::new(),
                batch_ref: 0,
            },
        };
        let lb = lab.next_batch()?;
        let r = trainer.training_loop_step(ub, lb, false)?;
        history.push(HistoryRow {
            t: r.t,
            l_r: r.l_r,
            l_s: r.l_s,
            alpha: r.alpha,
            wall_ms: start.elapsed().as_millis() as u64,
            ce_r: r.ce_r,
            ce_s: r.ce_s,
        });
        if cfg.eval_every > 0 && r.t % cfg.eval_every as u64 == 0 && !eval_set.is_empty() {
            let rep = evaluate(&mut trainer.model, &eval_set, &split.class_names, EVAL_CHUNK)?;
            evals.push(EvalPoint {
                t: r.t,
                accuracy: rep.recognition.map_or(0.0, |c| c.overall_accuracy),
                iou: rep.segmentation.map(|s| s.iou),
            });
        }
    }
    Ok(TrainOutcome {
        model: trainer.into_model(),
        history,
        evals,
        autoseg,
    })
}

fn opt_field(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn history_record(r: &HistoryRow) -> [String; 7] {
    [
        r.t.to_string(),
        r.l_r.to_string(),
        opt_field(r.l_s),
        r.alpha.to_string(),
        r.wall_ms.to_string(),
        r.ce_r.to_string(),
        opt_field(r.ce_s),
    ]
}

pub fn write_history<W: Write>(rows: &[HistoryRow], w: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(w);
    w.write_record(HISTORY_COLUMNS)?;
    for r in rows {
        w.write_record(history_record(r))?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_history(rows: &[HistoryRow], path: impl AsRef<Path>) -> Result<()> {
    write_history(rows, fs::File::create(path)?)
}

/// SHA-256 of the history with wall-clock times left out, so identical runs
/// hash identically.
pub fn history_hash(rows: &[HistoryRow]) -> String {
    let mut h = Sha256::new();
    for r in rows {
        let mut rec = history_record(r);
        rec[4].clear();
        h.update(rec.join(",").as_bytes());
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}
