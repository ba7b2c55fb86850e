//! Misclassification-detection metrics.
//!
//! Every pixel becomes a [`PixelRecord`]: an uncertainty score (higher means
//! less certain) and whether the segmentation was accurate. A pixel is
//! *certain* at threshold `t` iff its score is below `t`. Accurate-certain
//! pixels are true positives, inaccurate-certain ones false positives.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;
use crate::uncertainty::best_classes;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelRecord {
    pub score: f64,
    pub accurate: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    /// `TP / (TP + FP)`, taken as 1 when nothing is certain.
    pub fn precision(&self) -> f64 {
        ratio_or(self.tp, self.tp + self.fp, 1.0)
    }

    /// `TP / (TP + FN)`, also the true-positive rate.
    pub fn recall(&self) -> f64 {
        ratio_or(self.tp, self.tp + self.fn_, 0.0)
    }

    pub fn fpr(&self) -> f64 {
        ratio_or(self.fp, self.fp + self.tn, 0.0)
    }
}

fn ratio_or(num: usize, den: usize, fallback: f64) -> f64 {
    if den == 0 {
        fallback
    } else {
        num as f64 / den as f64
    }
}

fn check_records(records: &[PixelRecord], op: &'static str) -> Result<()> {
    if records.is_empty() {
        return Err(Error::Empty(op));
    }
    if let Some(r) = records.iter().find(|r| !r.score.is_finite()) {
        return Err(Error::NonFinite(format!("{op}: record score {}", r.score)));
    }
    Ok(())
}

pub fn confusion_at_threshold(records: &[PixelRecord], t: f64) -> Result<Confusion> {
    check_records(records, "confusion_at_threshold")?;
    let mut c = Confusion::default();
    for r in records {
        match (r.accurate, r.score < t) {
            (true, true) => c.tp += 1,
            (true, false) => c.fn_ += 1,
            (false, true) => c.fp += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

pub fn f_beta(tp: usize, fp: usize, fn_: usize, beta: f64) -> Result<f64> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::InvalidArgument(format!("F-beta needs beta > 0, got {beta}")));
    }
    if tp + fp + fn_ == 0 {
        return Err(Error::InvalidArgument("F-beta of all-zero counts".into()));
    }
    let b2 = beta * beta;
    let num = (1.0 + b2) * tp as f64;
    Ok(num / (num + fp as f64 + b2 * fn_ as f64))
}

/// `(A_MD, p(accurate, certain))`.
pub fn a_md_and_pac(c: Confusion) -> Result<(f64, f64)> {
    let total = c.total();
    if total == 0 {
        return Err(Error::Empty("a_md_and_pac"));
    }
    Ok((
        (c.tp + c.tn) as f64 / total as f64,
        c.tp as f64 / total as f64,
    ))
}

/// Cumulative confusion counts at every distinct-score boundary, from the
/// all-uncertain end to the all-certain end.
struct Steps {
    /// Thresholds in increasing order, `-inf` first and `+inf` last.
    thresholds: Vec<f64>,
    counts: Vec<Confusion>,
}

fn steps(records: &[PixelRecord]) -> Steps {
    let mut sorted: Vec<PixelRecord> = records.to_vec();
    sorted.sort_by(|a, b| a.score.total_cmp(&b.score));
    let positives = sorted.iter().filter(|r| r.accurate).count();
    let negatives = sorted.len() - positives;
    let mut thresholds = vec![f64::NEG_INFINITY];
    let mut counts = vec![Confusion {
        tp: 0,
        fp: 0,
        tn: negatives,
        fn_: positives,
    }];
    let mut i = 0;
    while i < sorted.len() {
        let score = sorted[i].score;
        let mut c = *counts.last().expect("seeded above");
        while i < sorted.len() && sorted[i].score == score {
            if sorted[i].accurate {
                c.tp += 1;
                c.fn_ -= 1;
            } else {
                c.fp += 1;
                c.tn -= 1;
            }
            i += 1;
        }
        let t = match sorted.get(i) {
            Some(next) => score + (next.score - score) / 2.0,
            None => f64::INFINITY,
        };
        thresholds.push(t);
        counts.push(c);
    }
    Steps { thresholds, counts }
}

/// Area under the ROC curve (true-positive rate over false-positive rate).
/// Equal to the probability that an inaccurate pixel scores above an
/// accurate one, counting ties as one half.
pub fn auroc(records: &[PixelRecord]) -> Result<f64> {
    check_records(records, "auroc")?;
    let s = steps(records);
    auroc_from_counts(&s.counts)
}

fn auroc_from_counts(counts: &[Confusion]) -> Result<f64> {
    let last = counts.last().ok_or(Error::Empty("auroc"))?;
    let (p, n) = (last.tp as u128, last.fp as u128);
    if p == 0 || n == 0 {
        return Err(Error::InvalidArgument(
            "AUROC needs both accurate and inaccurate records".into(),
        ));
    }
    // twice the trapezoid area in count units, kept exact in integers
    let twice: u128 = counts
        .windows(2)
        .map(|w| (w[1].fp - w[0].fp) as u128 * (w[1].tp + w[0].tp) as u128)
        .sum();
    Ok(twice as f64 / (2 * p * n) as f64)
}

/// Area under the precision-recall curve, with precision held constant at
/// its value at the right end of each recall step.
pub fn aupr(records: &[PixelRecord]) -> Result<f64> {
    check_records(records, "aupr")?;
    aupr_from_counts(&steps(records).counts)
}

fn aupr_from_counts(counts: &[Confusion]) -> Result<f64> {
    let positives = counts.last().map_or(0, |c| c.tp);
    if positives == 0 {
        return Err(Error::InvalidArgument("AUPR needs accurate records".into()));
    }
    Ok(counts
        .windows(2)
        .map(|w| (w[1].tp - w[0].tp) as f64 / positives as f64 * w[1].precision())
        .sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub threshold: f64,
    pub confusion: Confusion,
    pub precision: f64,
    pub recall: f64,
    pub tpr: f64,
    pub fpr: f64,
    /// Zero where F-beta is undefined (no accurate pixels, none certain).
    pub f_beta: f64,
    pub a_md: f64,
    pub p_ac: f64,
}

impl SweepPoint {
    fn new(threshold: f64, c: Confusion, beta: f64) -> Self {
        let (a_md, p_ac) = a_md_and_pac(c).expect("sweeps are non-empty");
        Self {
            threshold,
            confusion: c,
            precision: c.precision(),
            recall: c.recall(),
            tpr: c.recall(),
            fpr: c.fpr(),
            f_beta: f_beta(c.tp, c.fp, c.fn_, beta).unwrap_or(0.0),
            a_md,
            p_ac,
        }
    }
}

/// Best value of a metric over a sweep, where it occurs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Peak {
    pub value: f64,
    pub p_ac: f64,
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub beta: f64,
    pub points: Vec<SweepPoint>,
    /// `None` when one of the two classes is absent.
    pub auroc: Option<f64>,
    /// `None` without accurate records.
    pub aupr: Option<f64>,
    pub max_amd: Peak,
    pub max_f_beta: Peak,
    /// Segmentation accuracy over the records.
    pub accuracy: f64,
    /// Set when all scores are equal and the sweep has only its two
    /// sentinel thresholds.
    pub degenerate: bool,
}

/// Maximum of `metric`, ties going to the larger `p_ac`.
fn peak(points: &[SweepPoint], metric: impl Fn(&SweepPoint) -> f64) -> Peak {
    let mut best = &points[0];
    for p in &points[1..] {
        let (v, b) = (metric(p), metric(best));
        if v > b || (v == b && p.p_ac > best.p_ac) {
            best = p;
        }
    }
    Peak {
        value: metric(best),
        p_ac: best.p_ac,
        threshold: best.threshold,
    }
}

pub fn sweep(records: &[PixelRecord], beta: f64) -> Result<SweepSummary> {
    check_records(records, "sweep")?;
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::InvalidArgument(format!("F-beta needs beta > 0, got {beta}")));
    }
    let s = steps(records);
    let points: Vec<SweepPoint> = s
        .thresholds
        .iter()
        .zip(&s.counts)
        .map(|(&t, &c)| SweepPoint::new(t, c, beta))
        .collect();
    let last = s.counts.last().expect("non-empty");
    Ok(SweepSummary {
        beta,
        auroc: auroc_from_counts(&s.counts).ok(),
        aupr: aupr_from_counts(&s.counts).ok(),
        max_amd: peak(&points, |p| p.a_md),
        max_f_beta: peak(&points, |p| p.f_beta),
        accuracy: last.tp as f64 / last.total() as f64,
        degenerate: points.len() == 2,
        points,
    })
}

/// Threshold on the uncertainty score equivalent to certainty when the best
/// cosine score is at least `gamma`.
pub fn threshold_from_gamma(gamma: f64) -> f64 {
    (-gamma).next_up()
}

/// Per-image records from cosine scores `[N, K, H, W]` and labels in
/// `N, H, W` order. The score of a pixel is minus its best cosine; a pixel
/// is accurate iff its argmax equals a known label (`< num_known`). Void
/// pixels (`-1`) are dropped.
pub fn pixel_records(scores: &Tensor, labels: &[i32], num_known: usize) -> Result<Vec<Vec<PixelRecord>>> {
    let s = scores.shape();
    if s.len() != 4 || labels.len() != s[0] * s[2] * s[3] {
        return Err(Error::ShapeMismatch {
            op: "pixel_records",
            left: s.to_vec(),
            right: vec![labels.len()],
        });
    }
    let plane = s[2] * s[3];
    let best = best_classes(scores)?;
    Ok(best
        .chunks(plane)
        .zip(labels.chunks(plane))
        .map(|(best, labels)| {
            best.iter()
                .zip(labels)
                .filter(|(_, &l)| l >= 0)
                .map(|(&(class, score), &l)| PixelRecord {
                    score: -score,
                    accurate: (l as usize) < num_known && class == l as usize,
                })
                .collect()
        })
        .collect())
}

// ------------------------------------------------------------- protocols

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolConfig {
    /// Numbers of validation images to draw.
    pub validation_sizes: Vec<usize>,
    pub trials: usize,
    pub beta: f64,
    pub seed: u64,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            validation_sizes: vec![1, 2, 5, 10, 20],
            trials: 100,
            beta: 0.5,
            seed: 0,
        }
    }
}

/// Test-set metrics reached by thresholds tuned on one validation draw.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub a_md: f64,
    pub f_beta: f64,
    pub threshold_a_md: f64,
    pub threshold_f_beta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeReport {
    pub size: usize,
    pub trials: Vec<Trial>,
    pub mean_a_md: f64,
    pub var_a_md: f64,
    pub mean_f_beta: f64,
    pub var_f_beta: f64,
}

/// Metrics at a single fixed threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FixedThreshold {
    pub threshold: f64,
    pub confusion: Confusion,
    pub a_md: f64,
    pub f_beta: f64,
    pub p_ac: f64,
}

impl FixedThreshold {
    pub fn evaluate(records: &[PixelRecord], threshold: f64, beta: f64) -> Result<Self> {
        let c = confusion_at_threshold(records, threshold)?;
        let (a_md, p_ac) = a_md_and_pac(c)?;
        Ok(Self {
            threshold,
            confusion: c,
            a_md,
            f_beta: f_beta(c.tp, c.fp, c.fn_, beta).unwrap_or(0.0),
            p_ac,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedThreshold {
    pub gamma: f64,
    #[serde(flatten)]
    pub metrics: FixedThreshold,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolReport {
    pub n_images: usize,
    pub beta: f64,
    /// Best achievable A_MD and F-beta on the full set.
    pub oracle_a_md: Peak,
    pub oracle_f_beta: Peak,
    pub validation: Vec<SizeReport>,
    /// Zero-validation evaluation of the trained threshold.
    pub trained: Option<TrainedThreshold>,
}

fn mean_var(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = values.clone().sum::<f64>() / n as f64;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    (mean, var)
}

/// Threshold-selection protocols over per-image records.
///
/// For each validation size `v < n`, every trial draws `v` images, picks the
/// A_MD- and F-beta-optimal thresholds on them and evaluates both on the
/// other `n - v` images. `v == n` tunes and evaluates on the full set, which
/// reproduces the sweep maxima. Sizes above `n` are rejected.
pub fn threshold_protocols(
    images: &[Vec<PixelRecord>],
    trained_gamma: Option<f64>,
    cfg: &ProtocolConfig,
) -> Result<ProtocolReport> {
    let n = images.len();
    let all: Vec<PixelRecord> = images.iter().flatten().copied().collect();
    let full = sweep(&all, cfg.beta)?;
    if let Some(&v) = cfg.validation_sizes.iter().find(|&&v| v == 0 || v > n) {
        return Err(Error::InvalidArgument(format!(
            "validation size {v} must lie in 1..={n}"
        )));
    }
    if cfg.trials == 0 {
        return Err(Error::InvalidArgument("at least one trial is required".into()));
    }
    let mut validation = Vec::with_capacity(cfg.validation_sizes.len());
    for (si, &size) in cfg.validation_sizes.iter().enumerate() {
        let mut trials = Vec::with_capacity(cfg.trials);
        for trial in 0..cfg.trials {
            let mut rng = rng::stream(cfg.seed, ((si as u64) << 32) | trial as u64);
            let picked = rng::sample_indices(&mut rng, n, size);
            let mut in_val = vec![false; n];
            picked.iter().for_each(|&i| in_val[i] = true);
            let val: Vec<PixelRecord> = picked.iter().flat_map(|&i| images[i].iter().copied()).collect();
            let test: Vec<PixelRecord> = if size == n {
                all.clone()
            } else {
                (0..n)
                    .filter(|&i| !in_val[i])
                    .flat_map(|i| images[i].iter().copied())
                    .collect()
            };
            if val.is_empty() || test.is_empty() {
                return Err(Error::Empty("threshold_protocols split"));
            }
            let tuned = sweep(&val, cfg.beta)?;
            let t_amd = tuned.max_amd.threshold;
            let t_f = tuned.max_f_beta.threshold;
            trials.push(Trial {
                a_md: FixedThreshold::evaluate(&test, t_amd, cfg.beta)?.a_md,
                f_beta: FixedThreshold::evaluate(&test, t_f, cfg.beta)?.f_beta,
                threshold_a_md: t_amd,
                threshold_f_beta: t_f,
            });
        }
        let (mean_a_md, var_a_md) = mean_var(trials.iter().map(|t| t.a_md));
        let (mean_f_beta, var_f_beta) = mean_var(trials.iter().map(|t| t.f_beta));
        validation.push(SizeReport {
            size,
            trials,
            mean_a_md,
            var_a_md,
            mean_f_beta,
            var_f_beta,
        });
    }
    let trained = trained_gamma
        .map(|gamma| -> Result<TrainedThreshold> {
            Ok(TrainedThreshold {
                gamma,
                metrics: FixedThreshold::evaluate(&all, threshold_from_gamma(gamma), cfg.beta)?,
            })
        })
        .transpose()?;
    Ok(ProtocolReport {
        n_images: n,
        beta: cfg.beta,
        oracle_a_md: full.max_amd,
        oracle_f_beta: full.max_f_beta,
        validation,
        trained,
    })
}

/// F-beta on domain B at the threshold that is F-beta-optimal on domain A,
/// against the best F-beta achievable on B.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CrossDomain {
    pub threshold_from_a: f64,
    pub f_beta_b_transferred: f64,
    pub f_beta_b_optimal: f64,
    /// `optimal - transferred`, never negative.
    pub delta: f64,
}

pub fn cross_domain(a: &[PixelRecord], b: &[PixelRecord], beta: f64) -> Result<CrossDomain> {
    let t = sweep(a, beta)?.max_f_beta.threshold;
    let transferred = FixedThreshold::evaluate(b, t, beta)?.f_beta;
    let optimal = sweep(b, beta)?.max_f_beta.value;
    Ok(CrossDomain {
        threshold_from_a: t,
        f_beta_b_transferred: transferred,
        f_beta_b_optimal: optimal,
        delta: optimal - transferred,
    })
}
