//! Loss heads: pixel-wise BCE for supervised masks, two-class KL divergence
//! for distillation against sharpened pseudo ground truth, and their
//! unweighted sum over a mixed batch.
//!
//! Both heads are means over pixels (and means over the samples of their
//! subset inside a batch), so the two terms stay comparable regardless of
//! batch composition. Values accumulate in f64 whatever precision the
//! predictions are stored in.

use crate::error::LossError;
use crate::grid::{GtMask, ProbabilityMap};
use crate::nn::Real;

/// Probabilities are clamped to `[EPS, 1 - EPS]` before any logarithm,
/// shared with the sharpening module.
pub const CLAMP_EPS: f64 = 1e-6;

/// Decomposed batch loss: `total = supervised_term + semi_term`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue {
    pub total: f64,
    pub supervised_term: f64,
    pub semi_term: f64,
    pub pixel_count: usize,
}

/// A differentiable objective on a probability-map prediction.
///
/// Both heads share the same gradient w.r.t. the pre-sigmoid logits,
/// `(p - target) / n`, which is what the trainer backpropagates.
#[derive(Debug, Clone, Copy)]
pub enum LossHead<'a> {
    /// Mean pixel-wise binary cross entropy against a binary mask.
    PixelwiseBce(&'a GtMask),
    /// Mean pixel-wise KL(target || prediction) against a soft map.
    DistillKl(&'a ProbabilityMap),
}

#[inline]
fn clamp01(p: f64) -> f64 {
    p.clamp(CLAMP_EPS, 1.0 - CLAMP_EPS)
}

pub(crate) fn bce_value<T: Real>(probs: &[T], mask: &[u8]) -> f64 {
    debug_assert_eq!(probs.len(), mask.len());
    let mut acc = 0.0f64;
    for (&p, &y) in probs.iter().zip(mask) {
        let p = clamp01(p.as_f64());
        acc -= if y == 1 { p.ln() } else { (1.0 - p).ln() };
    }
    acc / probs.len() as f64
}

pub(crate) fn kl_value<T: Real>(probs: &[T], target: &[f32]) -> f64 {
    debug_assert_eq!(probs.len(), target.len());
    let mut acc = 0.0f64;
    for (&p, &t) in probs.iter().zip(target) {
        let p = clamp01(p.as_f64());
        let t = clamp01(t as f64);
        acc += t * (t / p).ln() + (1.0 - t) * ((1.0 - t) / (1.0 - p)).ln();
    }
    acc / probs.len() as f64
}

fn check_shapes(
    (ph, pw): (usize, usize),
    (th, tw): (usize, usize),
) -> Result<(), LossError> {
    if (ph, pw) != (th, tw) {
        return Err(LossError::ShapeMismatch {
            pred_h: ph,
            pred_w: pw,
            target_h: th,
            target_w: tw,
        });
    }
    Ok(())
}

/// Mean over pixels of `-[y ln p + (1 - y) ln(1 - p)]`.
pub fn bce_loss(prediction: &ProbabilityMap, target: &GtMask) -> Result<f64, LossError> {
    check_shapes(
        (prediction.height(), prediction.width()),
        (target.height(), target.width()),
    )?;
    Ok(bce_value(prediction.values(), target.values()))
}

/// Mean over pixels of the two-class KL divergence
/// `y' ln(y'/p) + (1 - y') ln((1 - y')/(1 - p))`.
///
/// Zero iff the maps agree (within the clamp); asymmetric in its arguments.
pub fn kl_loss(
    sharpened_pseudo_gt: &ProbabilityMap,
    student_prediction: &ProbabilityMap,
) -> Result<f64, LossError> {
    check_shapes(
        (student_prediction.height(), student_prediction.width()),
        (sharpened_pseudo_gt.height(), sharpened_pseudo_gt.width()),
    )?;
    Ok(kl_value(
        student_prediction.values(),
        sharpened_pseudo_gt.values(),
    ))
}

/// One sample's contribution to a batch loss.
#[derive(Debug, Clone, Copy)]
pub enum LossItem<'a> {
    /// Region-labeled or negative sample: BCE against its mask.
    Supervised {
        prediction: &'a ProbabilityMap,
        target: &'a GtMask,
    },
    /// Image-level positive sample: KL against the sharpened pseudo-GT.
    Distilled {
        prediction: &'a ProbabilityMap,
        sharpened: &'a ProbabilityMap,
    },
}

/// Batch loss: the supervised term averages BCE over supervised items, the
/// semi term averages KL over distilled items, empty subsets contribute 0.
pub fn total_loss(items: &[LossItem]) -> Result<LossValue, LossError> {
    if items.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    let mut sup = 0.0f64;
    let mut n_sup = 0usize;
    let mut semi = 0.0f64;
    let mut n_semi = 0usize;
    let mut pixels = 0usize;
    for item in items {
        match item {
            LossItem::Supervised { prediction, target } => {
                sup += bce_loss(prediction, target)?;
                n_sup += 1;
                pixels += prediction.values().len();
            }
            LossItem::Distilled {
                prediction,
                sharpened,
            } => {
                semi += kl_loss(sharpened, prediction)?;
                n_semi += 1;
                pixels += prediction.values().len();
            }
        }
    }
    let supervised_term = if n_sup > 0 { sup / n_sup as f64 } else { 0.0 };
    let semi_term = if n_semi > 0 { semi / n_semi as f64 } else { 0.0 };
    Ok(LossValue {
        total: supervised_term + semi_term,
        supervised_term,
        semi_term,
        pixel_count: pixels,
    })
}
