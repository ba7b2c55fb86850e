//! Training objectives.
//!
//! * consistency `L_c`: cross-entropy between the two branches over certain
//!   pixels;
//! * uniformity `L_u`: Gaussian-potential spread of pooled embeddings on the
//!   unit sphere;
//! * prototype separation `L_p`: mean nearest-neighbour similarity between
//!   prototypes;
//! * supervised `L_s`: per-pixel cross-entropy of the head on labelled data.
//!
//! Each loss has a graph form (used for training) and a value form.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var, LOG_FLOOR};
use crate::error::{Error, Result};
use crate::model::PrototypeBank;
use crate::tensor::Tensor;

/// Window of the average pooling applied before the uniformity loss.
pub const UNIFORMITY_POOL: usize = 4;

/// Kernel sharpness `t` of the uniformity potential.
pub const UNIFORMITY_T: f64 = 2.0;

const PROB_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub consistency: f64,
    pub uniformity: f64,
    pub prototype: f64,
    pub supervised: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            consistency: 1.0,
            uniformity: 1.0,
            prototype: 1.0,
            supervised: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_c: f64,
    pub l_u: f64,
    pub l_p: f64,
    pub l_s: f64,
    pub total: f64,
    pub weights: LossWeights,
    pub n_certain: usize,
}

/// Weighted sum of the four components; rejects any non-finite component
/// by name.
pub fn total_loss(
    [l_c, l_u, l_p, l_s]: [f64; 4],
    weights: LossWeights,
    n_certain: usize,
) -> Result<LossReport> {
    for (name, v) in [("l_c", l_c), ("l_u", l_u), ("l_p", l_p), ("l_s", l_s)] {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("loss component {name} = {v}")));
        }
    }
    let total = weights.consistency * l_c
        + weights.uniformity * l_u
        + weights.prototype * l_p
        + weights.supervised * l_s;
    Ok(LossReport {
        l_c,
        l_u,
        l_p,
        l_s,
        total,
        weights,
        n_certain,
    })
}

fn check_probs(op: &'static str, t: &Tensor) -> Result<()> {
    match t
        .data()
        .iter()
        .find(|&&p| !(p >= -PROB_SLACK && p <= 1.0 + PROB_SLACK))
    {
        Some(&value) => Err(Error::ProbabilityRange { op, value }),
        None => Ok(()),
    }
}

/// Per-pixel `-sum_k a_k log b_k` over axis 1 of `[N, K, H, W]` maps.
fn cross_entropy_map(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let logb = g.log_clamped(b, LOG_FLOOR);
    let prod = g.mul(a, logb)?;
    let per_pixel = g.sum_axis(prod, 1)?;
    Ok(g.neg(per_pixel))
}

/// `L_c` with `target` as the weighting distribution and `pred` inside the
/// log; `weights` has one entry per `N x H x W` pixel. Zero when no weight
/// is set.
pub fn consistency(g: &mut Graph, target: Var, pred: Var, weights: &[f64]) -> Result<Var> {
    if g.shape(target) != g.shape(pred) || g.shape(pred).len() != 4 {
        return Err(Error::ShapeMismatch {
            op: "loss_consistency",
            left: g.shape(target).to_vec(),
            right: g.shape(pred).to_vec(),
        });
    }
    check_probs("loss_consistency", g.value(target))?;
    check_probs("loss_consistency", g.value(pred))?;
    let ce = cross_entropy_map(g, target, pred)?;
    g.masked_mean(ce, weights)
}

pub fn loss_consistency(target: &Tensor, pred: &Tensor, weights: &[f64]) -> Result<f64> {
    let mut g = Graph::new();
    let (a, b) = (g.constant(target.clone()), g.constant(pred.clone()));
    let l = consistency(&mut g, a, b, weights)?;
    Ok(g.value(l).data()[0])
}

/// `L_u` over rows `[M, F]` of already pooled features; zero for `M < 2`.
pub fn uniformity_rows(g: &mut Graph, rows: Var) -> Result<Var> {
    let m = match g.shape(rows) {
        [m, _] => *m,
        s => {
            return Err(Error::InvalidShape {
                op: "loss_uniformity",
                shape: s.to_vec(),
                reason: "expected [M, F] rows",
            })
        }
    };
    if m < 2 {
        let zero = g.scale(rows, 0.0);
        return Ok(g.sum(zero));
    }
    let d = g.pairwise_sq_dist(rows)?;
    let scaled = g.scale(d, -UNIFORMITY_T);
    let k = g.exp(scaled);
    let off_diagonal = g.constant(Tensor::identity(m).map(|v| 1.0 - v));
    let pairs = g.mul(k, off_diagonal)?;
    let total = g.sum(pairs);
    Ok(g.scale(total, 1.0 / m as f64))
}

/// `L_u` of unit embeddings `[N, F, h, w]`, average-pooled by
/// [`UNIFORMITY_POOL`] first.
pub fn uniformity(g: &mut Graph, z: Var) -> Result<Var> {
    let pooled = g.avg_pool2d(z, UNIFORMITY_POOL)?;
    let s = g.shape(pooled).to_vec();
    let rows = g.permute(pooled, &[0, 2, 3, 1])?;
    let rows = g.reshape(rows, &[s[0] * s[2] * s[3], s[1]])?;
    uniformity_rows(g, rows)
}

pub fn loss_uniformity(z: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let v = g.constant(z.clone());
    let l = uniformity(&mut g, v)?;
    Ok(g.value(l).data()[0])
}

/// `L_p` of a `[F, K]` prototype matrix.
pub fn prototype(g: &mut Graph, protos: Var) -> Result<Var> {
    let k = match g.shape(protos) {
        [_, k] => *k,
        s => {
            return Err(Error::InvalidShape {
                op: "loss_prototype",
                shape: s.to_vec(),
                reason: "expected [F, K] prototypes",
            })
        }
    };
    if k < 2 {
        return Err(Error::InvalidArgument(format!(
            "loss_prototype needs at least two classes, got {k}"
        )));
    }
    let pt = g.transpose(protos)?;
    let gram = g.matmul(pt, protos)?;
    let two_eye = g.constant(Tensor::identity(k).map(|v| 2.0 * v));
    let shifted = g.sub(gram, two_eye)?;
    let row_max = g.max_axis(shifted, 1)?;
    let total = g.sum(row_max);
    Ok(g.scale(total, 1.0 / k as f64))
}

pub fn loss_prototype(bank: &PrototypeBank) -> Result<f64> {
    if let Some(k) = bank.first_unavailable() {
        return Err(Error::UnavailableClass(k));
    }
    let mut g = Graph::new();
    let p = g.constant(bank.vectors.clone());
    let l = prototype(&mut g, p)?;
    Ok(g.value(l).data()[0])
}

/// Outcome of the supervised loss; `all_void` flags a batch without a
/// single labelled pixel (the loss is then zero).
#[derive(Debug, Clone, Copy)]
pub struct Supervised {
    pub loss: Var,
    pub all_void: bool,
}

/// `L_s` of head probabilities `[N, K, H, W]` against labels in `N, H, W`
/// order, `-1` marking void.
pub fn supervised(g: &mut Graph, probs: Var, labels: &[i32]) -> Result<Supervised> {
    let s = g.shape(probs).to_vec();
    if s.len() != 4 || labels.len() != s[0] * s[2] * s[3] {
        return Err(Error::ShapeMismatch {
            op: "loss_supervised",
            left: s,
            right: alloc::vec![labels.len()],
        });
    }
    let (k, plane) = (s[1], s[2] * s[3]);
    if let Some(&bad) = labels.iter().find(|&&l| l < -1 || l >= k as i32) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} outside {{-1, 0..{k}}}"
        )));
    }
    let mut target = Tensor::zeros(s.clone());
    let mut weights = Vec::with_capacity(labels.len());
    for (i, &l) in labels.iter().enumerate() {
        if l >= 0 {
            let (n, p) = (i / plane, i % plane);
            target.data_mut()[(n * k + l as usize) * plane + p] = 1.0;
        }
        weights.push(if l >= 0 { 1.0 } else { 0.0 });
    }
    let target = g.constant(target);
    let ce = cross_entropy_map(g, target, probs)?;
    let loss = g.masked_mean(ce, &weights)?;
    Ok(Supervised {
        loss,
        all_void: weights.iter().all(|&w| w == 0.0),
    })
}

/// Value form of [`supervised`]: `(loss, all_void)`.
pub fn loss_supervised(probs: &Tensor, labels: &[i32]) -> Result<(f64, bool)> {
    let mut g = Graph::new();
    let p = g.constant(probs.clone());
    let s = supervised(&mut g, p, labels)?;
    Ok((g.value(s.loss).data()[0], s.all_void))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pixel(values: &[f64]) -> Tensor {
        Tensor::new([1, values.len(), 1, 1], values.to_vec()).unwrap()
    }

    #[test]
    fn consistency_examples() {
        let a = pixel(&[1.0, 0.0]);
        let b = pixel(&[0.5, 0.5]);
        assert_eq!(loss_consistency(&a, &b, &[0.0]).unwrap(), 0.0);
        assert_eq!(loss_consistency(&a, &a, &[1.0]).unwrap(), 0.0);
        let l = loss_consistency(&a, &b, &[1.0]).unwrap();
        assert!((l - core::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn consistency_rejects_out_of_range_probability() {
        let a = pixel(&[1.2, -0.2]);
        let b = pixel(&[0.5, 0.5]);
        assert!(matches!(
            loss_consistency(&a, &b, &[1.0]),
            Err(Error::ProbabilityRange { .. })
        ));
    }

    #[test]
    fn consistency_ignores_uncertain_pixels() {
        let a = Tensor::new([1, 2, 1, 2], vec![0.9, 0.3, 0.1, 0.7]).unwrap();
        let b = Tensor::new([1, 2, 1, 2], vec![0.6, 0.2, 0.4, 0.8]).unwrap();
        let c = Tensor::new([1, 2, 1, 2], vec![0.6, 0.99, 0.4, 0.01]).unwrap();
        let w = [1.0, 0.0];
        assert_eq!(
            loss_consistency(&a, &b, &w).unwrap(),
            loss_consistency(&a, &c, &w).unwrap()
        );
    }

    #[test]
    fn uniformity_examples() {
        let mut g = Graph::new();
        let one = g.constant(Tensor::new([1, 3], vec![0.0, 1.0, 0.0]).unwrap());
        let l = uniformity_rows(&mut g, one).unwrap();
        assert_eq!(g.value(l).data()[0], 0.0);

        let same = g.constant(Tensor::new([2, 2], vec![0.6, 0.8, 0.6, 0.8]).unwrap());
        let l = uniformity_rows(&mut g, same).unwrap();
        assert_eq!(g.value(l).data()[0], 1.0);

        let opposite = g.constant(Tensor::new([2, 2], vec![1.0, 0.0, -1.0, 0.0]).unwrap());
        let l = uniformity_rows(&mut g, opposite).unwrap();
        assert!((g.value(l).data()[0] - 3.354_626_279_025_119e-4).abs() < 1e-18);
    }

    #[test]
    fn uniformity_pools_embeddings() {
        // a single 4x4 block pools to one feature
        let z = Tensor::from_fn([1, 2, 4, 4], |i| if i < 16 { 1.0 } else { 0.0 });
        assert_eq!(loss_uniformity(&z).unwrap(), 0.0);
        assert!(loss_uniformity(&Tensor::zeros([1, 2, 6, 4])).is_err());
    }

    fn bank(cols: &[[f64; 2]]) -> PrototypeBank {
        let k = cols.len();
        PrototypeBank {
            vectors: Tensor::from_fn([2, k], |i| cols[i % k][i / k]),
            fresh: alloc::vec![true; k],
            available: alloc::vec![true; k],
        }
    }

    #[test]
    fn prototype_examples() {
        assert_eq!(loss_prototype(&bank(&[[1.0, 0.0], [-1.0, 0.0]])).unwrap(), -1.0);
        assert_eq!(loss_prototype(&bank(&[[1.0, 0.0], [0.0, 1.0]])).unwrap(), 0.0);
        let s = libm::sqrt(3.0) / 2.0;
        let l = loss_prototype(&bank(&[[1.0, 0.0], [-0.5, s], [-0.5, -s]])).unwrap();
        assert!((l + 0.5).abs() < 1e-15);
        assert!(matches!(
            loss_prototype(&bank(&[[1.0, 0.0]])),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn supervised_examples() {
        let perfect = pixel(&[0.0, 1.0, 0.0, 0.0]);
        assert_eq!(loss_supervised(&perfect, &[1]).unwrap(), (0.0, false));
        let uniform = pixel(&[0.25; 4]);
        let (l, _) = loss_supervised(&uniform, &[3]).unwrap();
        assert!((l - libm::log(4.0)).abs() < 1e-15);
        assert_eq!(loss_supervised(&uniform, &[-1]).unwrap(), (0.0, true));
        assert!(loss_supervised(&uniform, &[4]).is_err());
    }

    #[test]
    fn total_examples() {
        let w = LossWeights::default();
        assert_eq!(total_loss([0.0; 4], w, 0).unwrap().total, 0.0);
        let only_c = LossWeights {
            consistency: 1.0,
            uniformity: 0.0,
            prototype: 0.0,
            supervised: 0.0,
        };
        assert_eq!(total_loss([0.3, 1.0, 2.0, 4.0], only_c, 0).unwrap().total, 0.3);
        assert_eq!(total_loss([0.5, 1.0, -0.5, 1.0], w, 0).unwrap().total, 2.0);
        let err = total_loss([0.0, f64::NAN, 0.0, 0.0], w, 0).unwrap_err();
        assert!(matches!(err, Error::NonFinite(ref m) if m.contains("l_u")));
    }
}
