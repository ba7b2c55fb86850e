//! Consistency and certainty masks and the threshold that ties them together.
//!
//! All score tensors are laid out `[N, K, H, W]`. Argmax ties resolve to the
//! lowest class index, and a pixel is certain when its best score is at least
//! the threshold (ties go to the known class).

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autodiff::softmax_values;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Boolean map over the `N x H x W` pixels of a batch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mask {
    pub shape: [usize; 3],
    pub bits: Vec<bool>,
}

impl Mask {
    pub fn filled(shape: [usize; 3], value: bool) -> Self {
        Self {
            shape,
            bits: vec![value; shape.iter().product()],
        }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Fraction of set pixels; zero for an empty mask.
    pub fn fraction(&self) -> f64 {
        if self.bits.is_empty() {
            0.0
        } else {
            self.count() as f64 / self.bits.len() as f64
        }
    }

    /// `1.0` for set pixels, `0.0` otherwise.
    pub fn weights(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }
}

/// The two masks of one training step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskPair {
    pub consistency: Mask,
    pub certainty: Mask,
    /// Continuous certainty weights, present only for the soft-mask variant.
    pub soft_certainty: Option<Vec<f64>>,
    pub gamma_used: f64,
    pub p_consistent: f64,
    pub p_certain: f64,
}

impl MaskPair {
    pub fn new(consistency: Mask, certainty: Mask, gamma_used: f64) -> Self {
        let p_consistent = consistency.fraction();
        let p_certain = certainty.fraction();
        Self {
            consistency,
            certainty,
            soft_certainty: None,
            gamma_used,
            p_consistent,
            p_certain,
        }
    }

    /// Per-pixel weights for the consistency loss.
    pub fn loss_weights(&self) -> Vec<f64> {
        match &self.soft_certainty {
            Some(w) => w.clone(),
            None => self.certainty.weights(),
        }
    }
}

fn dims(scores: &Tensor) -> Result<[usize; 4]> {
    match *scores.shape() {
        [n, k, h, w] if k > 0 => Ok([n, k, h, w]),
        _ => Err(Error::InvalidShape {
            op: "score map",
            shape: scores.shape().to_vec(),
            reason: "expected [N, K, H, W] with K >= 1",
        }),
    }
}

/// Per-pixel `(argmax class, max score)` in `N, H, W` order.
pub fn best_classes(scores: &Tensor) -> Result<Vec<(usize, f64)>> {
    let [n, k, h, w] = dims(scores)?;
    let plane = h * w;
    let data = scores.data();
    let mut out = Vec::with_capacity(n * plane);
    for img in 0..n {
        let base = img * k * plane;
        for p in 0..plane {
            let mut best = (0, data[base + p]);
            for c in 1..k {
                let v = data[base + c * plane + p];
                if v > best.1 {
                    best = (c, v);
                }
            }
            out.push(best);
        }
    }
    Ok(out)
}

/// Pixels whose argmax class agrees between two aligned score maps.
pub fn consistency_mask(a: &Tensor, b: &Tensor) -> Result<Mask> {
    let (da, db) = (dims(a)?, dims(b)?);
    if da != db {
        return Err(Error::ShapeMismatch {
            op: "consistency_mask",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let bits = best_classes(a)?
        .into_iter()
        .zip(best_classes(b)?)
        .map(|((ca, _), (cb, _))| ca == cb)
        .collect();
    Ok(Mask {
        shape: [da[0], da[2], da[3]],
        bits,
    })
}

/// Order-statistic threshold over `values` such that the number of values at
/// or above it equals `consistent` (the count of consistent pixels), with the
/// index clamped to the last element when nothing is consistent.
fn order_statistic(mut values: Vec<f64>, consistent: usize) -> f64 {
    values.sort_by(f64::total_cmp);
    let uncertain = values.len() - consistent;
    values[uncertain.min(values.len() - 1)]
}

/// Threshold on the best prototype score that makes the certain fraction
/// equal the consistent fraction.
///
/// The number of uncertain pixels `(1 - p_c) * N * H * W` is computed as an
/// integer count, which equals the real-valued product exactly.
pub fn calculate_gamma(consistency: &Mask, scores: &Tensor) -> Result<f64> {
    let [n, _, h, w] = dims(scores)?;
    if n * h * w == 0 {
        return Err(Error::Empty("calculate_gamma"));
    }
    check_mask(consistency, n, h, w)?;
    if scores.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("calculate_gamma scores".into()));
    }
    let max_scores = best_classes(scores)?.into_iter().map(|(_, s)| s).collect();
    Ok(order_statistic(max_scores, consistency.count()))
}

fn check_mask(mask: &Mask, n: usize, h: usize, w: usize) -> Result<()> {
    if mask.shape != [n, h, w] || mask.bits.len() != n * h * w {
        return Err(Error::ShapeMismatch {
            op: "mask",
            left: mask.shape.to_vec(),
            right: vec![n, h, w],
        });
    }
    Ok(())
}

/// Pixels whose best score reaches `gamma`.
pub fn certainty_mask(scores: &Tensor, gamma: f64) -> Result<Mask> {
    let [n, _, h, w] = dims(scores)?;
    let bits = best_classes(scores)?.into_iter().map(|(_, s)| s >= gamma).collect();
    Ok(Mask {
        shape: [n, h, w],
        bits,
    })
}

/// Min-max normalises a batch of confidences to `[0, 1]`; a constant batch
/// maps to `0.5` everywhere.
pub fn normalize_confidence(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![0.5; values.len()];
    }
    values.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

/// Continuous certainty: the batch-normalised maximum of `softmax(s / tau)`.
pub fn soft_certainty_mask(scores: &Tensor, tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0) {
        return Err(Error::InvalidTemperature(tau));
    }
    dims(scores)?;
    let probs = softmax_values(scores, 1, tau);
    let max_prob: Vec<f64> = best_classes(&probs)?.into_iter().map(|(_, p)| p).collect();
    Ok(normalize_confidence(&max_prob))
}

/// One threshold per class, each solved by the order-statistic rule over the
/// pixels that class wins by argmax. Classes that win no pixel keep
/// `previous[k]`.
pub fn calculate_gamma_per_class(
    consistency: &Mask,
    scores: &Tensor,
    previous: &[f64],
) -> Result<Vec<f64>> {
    let [n, k, h, w] = dims(scores)?;
    if n * h * w == 0 {
        return Err(Error::Empty("calculate_gamma_per_class"));
    }
    check_mask(consistency, n, h, w)?;
    if previous.len() != k {
        return Err(Error::ShapeMismatch {
            op: "calculate_gamma_per_class previous thresholds",
            left: vec![previous.len()],
            right: vec![k],
        });
    }
    let mut per_class: Vec<(Vec<f64>, usize)> = vec![(Vec::new(), 0); k];
    for ((class, score), &consistent) in best_classes(scores)?.into_iter().zip(&consistency.bits) {
        per_class[class].0.push(score);
        per_class[class].1 += usize::from(consistent);
    }
    Ok(per_class
        .into_iter()
        .zip(previous)
        .map(|((values, consistent), &prev)| {
            if values.is_empty() {
                prev
            } else {
                order_statistic(values, consistent)
            }
        })
        .collect())
}

/// Pixels whose best score reaches the threshold of their argmax class.
pub fn certainty_mask_per_class(scores: &Tensor, gammas: &[f64]) -> Result<Mask> {
    let [n, k, h, w] = dims(scores)?;
    if gammas.len() != k {
        return Err(Error::ShapeMismatch {
            op: "certainty_mask_per_class",
            left: vec![gammas.len()],
            right: vec![k],
        });
    }
    let bits = best_classes(scores)?
        .into_iter()
        .map(|(c, s)| s >= gammas[c])
        .collect();
    Ok(Mask {
        shape: [n, h, w],
        bits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// `[1, K, 1, P]` scores from per-pixel rows.
    fn scores(rows: &[&[f64]]) -> Tensor {
        let k = rows[0].len();
        let p = rows.len();
        Tensor::from_fn([1, k, 1, p], |i| rows[i % p][i / p])
    }

    fn mask(bits: &[bool]) -> Mask {
        Mask {
            shape: [1, 1, bits.len()],
            bits: bits.to_vec(),
        }
    }

    #[test]
    fn identical_maps_are_consistent() {
        let s = scores(&[&[0.1, 0.9], &[0.5, 0.2], &[0.3, 0.3]]);
        assert!(consistency_mask(&s, &s).unwrap().bits.iter().all(|&b| b));
    }

    #[test]
    fn one_flipped_pixel() {
        let a = scores(&[&[0.1, 0.9], &[0.5, 0.2], &[0.3, 0.4]]);
        let b = scores(&[&[0.1, 0.9], &[0.1, 0.2], &[0.3, 0.4]]);
        assert_eq!(consistency_mask(&a, &b).unwrap().bits, [true, false, true]);
    }

    #[test]
    fn single_class_always_consistent() {
        let a = scores(&[&[0.1], &[-0.5]]);
        let b = scores(&[&[0.7], &[0.2]]);
        assert_eq!(consistency_mask(&a, &b).unwrap().count(), 2);
    }

    #[test]
    fn class_count_mismatch_rejected() {
        let a = scores(&[&[0.1, 0.2]]);
        let b = scores(&[&[0.1, 0.2, 0.3]]);
        assert!(matches!(consistency_mask(&a, &b), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn gamma_hand_example() {
        let s = scores(&[&[0.1], &[0.4], &[0.6], &[0.9]]);
        let mc = mask(&[true, false, true, false]);
        let gamma = calculate_gamma(&mc, &s).unwrap();
        assert_eq!(gamma, 0.6);
        let certain = certainty_mask(&s, gamma).unwrap();
        assert_eq!(certain.bits, [false, false, true, true]);
        assert_eq!(certain.fraction(), 0.5);
    }

    #[test]
    fn gamma_boundaries() {
        let s = scores(&[&[0.3], &[0.8], &[0.1], &[0.8]]);
        let all = mask(&[true; 4]);
        let gamma = calculate_gamma(&all, &s).unwrap();
        assert_eq!(gamma, 0.1);
        assert_eq!(certainty_mask(&s, gamma).unwrap().count(), 4);

        let none = mask(&[false; 4]);
        let gamma = calculate_gamma(&none, &s).unwrap();
        assert_eq!(gamma, 0.8);
        // only the pixels tying the maximum stay certain
        assert_eq!(certainty_mask(&s, gamma).unwrap().bits, [false, true, false, true]);
    }

    #[test]
    fn gamma_rejects_empty() {
        let s = Tensor::zeros([0, 2, 4, 4]);
        let mc = Mask::filled([0, 4, 4], true);
        assert_eq!(calculate_gamma(&mc, &s).unwrap_err(), Error::Empty("calculate_gamma"));
    }

    #[test]
    fn certainty_extremes_and_direct_comparison() {
        let s = scores(&[&[0.9, 0.2], &[0.4, 0.2]]);
        assert_eq!(certainty_mask(&s, -2.0).unwrap().count(), 2);
        assert_eq!(certainty_mask(&s, 2.0).unwrap().count(), 0);
        assert_eq!(certainty_mask(&s, 0.5).unwrap().bits, [true, false]);
    }

    #[test]
    fn soft_mask_normalization() {
        assert_eq!(normalize_confidence(&[0.3, 0.9]), [0.0, 1.0]);
        let three = normalize_confidence(&[0.2, 0.5, 0.8]);
        assert_eq!(three[0], 0.0);
        assert!((three[1] - 0.5).abs() < 1e-15);
        assert_eq!(three[2], 1.0);
        assert_eq!(normalize_confidence(&[0.4; 3]), [0.5; 3]);
    }

    #[test]
    fn soft_mask_from_scores_spans_unit_interval() {
        let s = scores(&[&[0.9, 0.1], &[0.5, 0.45], &[0.2, 0.7]]);
        let soft = soft_certainty_mask(&s, 0.07).unwrap();
        assert_eq!(soft.iter().copied().fold(f64::INFINITY, f64::min), 0.0);
        assert_eq!(soft.iter().copied().fold(f64::NEG_INFINITY, f64::max), 1.0);
        assert_eq!(soft[1], 0.0);
    }

    #[test]
    fn per_class_single_class_reduces_to_scalar() {
        let s = scores(&[&[0.1], &[0.4], &[0.6], &[0.9]]);
        let mc = mask(&[true, false, true, false]);
        let per = calculate_gamma_per_class(&mc, &s, &[0.0]).unwrap();
        assert_eq!(per, [calculate_gamma(&mc, &s).unwrap()]);
    }

    #[test]
    fn per_class_boundaries() {
        // class 0 wins pixels 0..2 (all consistent), class 1 wins 2..4 (none)
        let s = scores(&[&[0.5, 0.1], &[0.7, 0.2], &[0.1, 0.3], &[0.2, 0.8]]);
        let mc = mask(&[true, true, false, false]);
        let per = calculate_gamma_per_class(&mc, &s, &[0.0, 0.0]).unwrap();
        assert_eq!(per, [0.5, 0.8]);
    }

    #[test]
    fn per_class_keeps_previous_for_absent_class() {
        let s = scores(&[&[0.5, 0.1, 0.0], &[0.7, 0.2, 0.0]]);
        let mc = mask(&[true, false]);
        let per = calculate_gamma_per_class(&mc, &s, &[0.0, 0.25, -0.5]).unwrap();
        assert_eq!(&per[1..], &[0.25, -0.5]);
    }
}
