//! Cross-entropy losses for both tasks and the residue coupling between loops.
//!
//! With `n` pixels per chip, the segmentation loss already carries the `1/n`
//! normalization, so the coupled losses reduce to
//!
//! ```text
//! L_r^t = CE_r(labelled batch t)  + alpha(t) * CE_s(masked batch t-1)
//! L_s^t = CE_s(masked batch t)    + alpha(t) * CE_r(labelled batch t-1)
//! alpha(t) = 1 - 1/t
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{softmax_channels, Tensor};

/// Lower clamp on probabilities inside `log`.
pub const LOG_CLAMP: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Recognition,
    Segmentation,
}

/// One loss evaluation, tagged with the loop and batch it came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub t: u64,
    pub value: f64,
    pub kind: LossKind,
    pub batch_ref: u64,
}

#[inline]
fn clamped_ln<T: Scalar>(p: T) -> T {
    p.max(T::lit(LOG_CLAMP)).ln()
}

fn check_labels<T: Scalar>(op: &'static str, probs: &Tensor<T>, labels: &[usize]) -> Result<()> {
    let s = probs.shape();
    ensure_dim(op, "batch (N) vs labels", s.n, labels.len())?;
    ensure_dim(op, "spatial extent of class scores", 1, s.plane())?;
    if s.n == 0 {
        return Err(Error::invalid(op, "empty batch"));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= s.c) {
        return Err(Error::invalid(op, format!("label {bad} out of range for {} classes", s.c)));
    }
    Ok(())
}

/// Mean over the batch of `-log p[label]`, probabilities `N x C x 1 x 1`.
pub fn recognition_loss<T: Scalar>(probs: &Tensor<T>, labels: &[usize]) -> Result<T> {
    check_labels("recognition_loss", probs, labels)?;
    let total: T = labels.iter().enumerate().map(|(n, &l)| -clamped_ln(probs.item(n)[l])).sum();
    Ok(total / T::lit(labels.len() as f64))
}

/// Gradient of [`recognition_loss`] with respect to the logits that produced
/// `probs` through a softmax: `(p - onehot) / N`.
pub fn recognition_loss_grad<T: Scalar>(probs: &Tensor<T>, labels: &[usize]) -> Result<Tensor<T>> {
    check_labels("recognition_loss_grad", probs, labels)?;
    let inv_n = T::one() / T::lit(labels.len() as f64);
    let mut g = probs.scale(inv_n);
    for (n, &l) in labels.iter().enumerate() {
        g.item_mut(n)[l] -= inv_n;
    }
    Ok(g)
}

fn check_mask<T: Scalar>(op: &'static str, logits: &Tensor<T>, mask: &[u8]) -> Result<()> {
    let s = logits.shape();
    ensure_dim(op, "segmentation classes (C)", 2, s.c)?;
    ensure_dim(op, "mask length (N*H*W)", s.n * s.plane(), mask.len())?;
    if s.n == 0 {
        return Err(Error::invalid(op, "empty batch"));
    }
    if let Some(bad) = mask.iter().find(|&&m| m > 1) {
        return Err(Error::invalid(op, format!("mask value {bad} is not binary")));
    }
    Ok(())
}

/// Per-pixel two-class cross-entropy averaged over the `n` pixels of each
/// chip, then over the batch. `mask` is `N x H x W` with 1 marking target.
pub fn segmentation_loss<T: Scalar>(logits: &Tensor<T>, mask: &[u8]) -> Result<T> {
    check_mask("segmentation_loss", logits, mask)?;
    let probs = softmax_channels(logits);
    Ok(segmentation_ce(&probs, mask))
}

fn segmentation_ce<T: Scalar>(probs: &Tensor<T>, mask: &[u8]) -> T {
    let s = probs.shape();
    let p = s.plane();
    let mut total = T::zero();
    for n in 0..s.n {
        let mut per_chip = T::zero();
        for (pos, &m) in mask[n * p..(n + 1) * p].iter().enumerate() {
            per_chip -= clamped_ln(probs.data()[n * s.item() + usize::from(m) * p + pos]);
        }
        total += per_chip / T::lit(p as f64);
    }
    total / T::lit(s.n as f64)
}

/// [`segmentation_loss`] and its gradient with respect to the logits,
/// `(softmax - onehot) / (N n)`.
pub fn segmentation_loss_with_grad<T: Scalar>(logits: &Tensor<T>, mask: &[u8]) -> Result<(T, Tensor<T>)> {
    check_mask("segmentation_loss", logits, mask)?;
    let probs = softmax_channels(logits);
    let loss = segmentation_ce(&probs, mask);
    let s = logits.shape();
    let p = s.plane();
    let k = T::one() / T::lit((s.n * p) as f64);
    let mut g = probs.scale(k);
    for n in 0..s.n {
        for (pos, &m) in mask[n * p..(n + 1) * p].iter().enumerate() {
            g.data_mut()[n * s.item() + usize::from(m) * p + pos] -= k;
        }
    }
    Ok((loss, g))
}

/// Residue weight `1 - 1/t`, computed as `(t-1)/t` so each value is the
/// correctly rounded quotient.
pub fn alpha(t: u64) -> Result<f64> {
    if t < 1 {
        return Err(Error::invalid("alpha", "loop counter t must be >= 1"));
    }
    Ok((t - 1) as f64 / t as f64)
}

fn combine<T: Scalar>(op: &'static str, current: T, residue: Option<T>, t: u64) -> Result<T> {
    let a = alpha(t)?;
    match residue {
        Some(r) => Ok(current + T::lit(a) * r),
        None if t == 1 => Ok(current),
        None => Err(Error::invalid(op, format!("residue from loop {} is required at t = {t}", t - 1))),
    }
}

/// `current + alpha(t) * residue`, where `current` is the recognition loss on
/// this loop's labelled batch and `residue` the segmentation loss on the
/// previous loop's masked batch. The residue may be omitted only at `t = 1`.
pub fn irl_recognition_loss<T: Scalar>(current: T, residue: Option<T>, t: u64) -> Result<T> {
    combine("irl_recognition_loss", current, residue, t)
}

/// Mirror of [`irl_recognition_loss`] with the tasks swapped.
pub fn irl_segmentation_loss<T: Scalar>(current: T, residue: Option<T>, t: u64) -> Result<T> {
    combine("irl_segmentation_loss", current, residue, t)
}
