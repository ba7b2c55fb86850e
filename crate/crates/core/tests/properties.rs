use gssl_core::augment::{align_scores, crop_view, sample_view_plan, AugmentConfig, ColorParams};
use gssl_core::gradcheck::{check_primitive, gradient_check, loss_case_error, random_case, CASE_NAMES, LOSS_NAMES};
use gssl_core::losses::{loss_consistency, prototype, uniformity_rows};
use gssl_core::metrics::{aupr, auroc, sweep, PixelRecord};
use gssl_core::uncertainty::{calculate_gamma, certainty_mask, consistency_mask, Mask};
use gssl_core::{Graph, Tensor};
use proptest::prelude::*;

const H: f64 = 1e-5;

fn records_strategy(max: usize) -> impl Strategy<Value = Vec<PixelRecord>> {
    // a coarse score grid makes ties common
    prop::collection::vec((0u32..40, any::<bool>()), 2..max).prop_map(|v| {
        v.into_iter()
            .map(|(s, accurate)| PixelRecord {
                score: f64::from(s) / 8.0 - 2.0,
                accurate,
            })
            .collect()
    })
}

fn both_classes(r: &[PixelRecord]) -> bool {
    r.iter().any(|p| p.accurate) && r.iter().any(|p| !p.accurate)
}

fn mann_whitney(r: &[PixelRecord]) -> f64 {
    let (mut num, mut pairs) = (0.0, 0.0);
    for a in r.iter().filter(|p| p.accurate) {
        for b in r.iter().filter(|p| !p.accurate) {
            pairs += 1.0;
            if b.score > a.score {
                num += 1.0;
            } else if b.score == a.score {
                num += 0.5;
            }
        }
    }
    num / pairs
}

/// Step-wise area under precision-recall by brute force over every
/// distinct operating point.
fn aupr_by_enumeration(r: &[PixelRecord]) -> f64 {
    let mut scores: Vec<f64> = r.iter().map(|p| p.score).collect();
    scores.sort_by(f64::total_cmp);
    scores.dedup();
    let positives = r.iter().filter(|p| p.accurate).count() as f64;
    let mut thresholds = vec![f64::NEG_INFINITY];
    thresholds.extend(scores.iter().map(|s| s.next_up()));
    let point = |t: f64| {
        let tp = r.iter().filter(|p| p.accurate && p.score < t).count() as f64;
        let fp = r.iter().filter(|p| !p.accurate && p.score < t).count() as f64;
        let precision = if tp + fp == 0.0 { 1.0 } else { tp / (tp + fp) };
        (tp / positives, precision)
    };
    let mut area = 0.0;
    let mut prev = 0.0;
    for t in thresholds {
        let (recall, precision) = point(t);
        area += (recall - prev) * precision;
        prev = recall;
    }
    area
}

fn scores_strategy() -> impl Strategy<Value = Tensor> {
    (1usize..3, 2usize..5, 1usize..4, 1usize..5).prop_flat_map(|(n, k, h, w)| {
        prop::collection::vec(-1.0f64..1.0, n * k * h * w)
            .prop_map(move |d| Tensor::new([n, k, h, w], d).unwrap())
    })
}

fn rotation(f: usize, seed: &[f64]) -> Vec<f64> {
    // product of Householder reflections: orthogonal
    let mut q: Vec<f64> = (0..f * f).map(|i| if i / f == i % f { 1.0 } else { 0.0 }).collect();
    for r in 0..f.min(seed.len() / f) {
        let v = &seed[r * f..(r + 1) * f];
        let norm2: f64 = v.iter().map(|x| x * x).sum();
        if norm2 < 1e-6 {
            continue;
        }
        let mut next = vec![0.0; f * f];
        for i in 0..f {
            for j in 0..f {
                let hij = if i == j { 1.0 } else { 0.0 } - 2.0 * v[i] * v[j] / norm2;
                for k in 0..f {
                    next[i * f + k] += hij * q[j * f + k];
                }
            }
        }
        q = next;
    }
    q
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn primitive_gradients(seed in any::<u64>()) {
        for (i, name) in CASE_NAMES.iter().enumerate() {
            let (prim, inputs) = random_case(i, seed);
            let err = check_primitive(&prim, &inputs, H).unwrap();
            prop_assert!(err < 1e-5, "{name} {prim:?}: {err}");
        }
    }

    #[test]
    fn loss_gradients(seed in any::<u64>()) {
        for (i, name) in LOSS_NAMES.iter().enumerate() {
            let err = loss_case_error(i, seed, H).unwrap();
            prop_assert!(err < 1e-5, "{name}: {err}");
        }
    }

    #[test]
    fn unit_norm_after_normalising(v in prop::collection::vec(-1.0f64..1.0, 3..12)) {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assume!(norm > 1e-6);
        let mut g = Graph::new();
        let x = g.constant(Tensor::new([1, v.len()], v).unwrap());
        let y = g.l2_normalize(x, 1, 1e-12).unwrap();
        let n2: f64 = g.value(y).data().iter().map(|x| x * x).sum();
        prop_assert!((n2.sqrt() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn auroc_equals_mann_whitney(r in records_strategy(200)) {
        prop_assume!(both_classes(&r));
        prop_assert!((auroc(&r).unwrap() - mann_whitney(&r)).abs() < 1e-12);
    }

    #[test]
    fn aupr_equals_enumeration(r in records_strategy(200)) {
        prop_assume!(r.iter().any(|p| p.accurate));
        prop_assert!((aupr(&r).unwrap() - aupr_by_enumeration(&r)).abs() < 1e-12);
    }

    #[test]
    fn areas_ignore_monotone_transforms(r in records_strategy(100)) {
        prop_assume!(both_classes(&r));
        let t: Vec<PixelRecord> = r
            .iter()
            .map(|p| PixelRecord { score: (3.0 * p.score).exp() - 7.0, accurate: p.accurate })
            .collect();
        prop_assert!((auroc(&r).unwrap() - auroc(&t).unwrap()).abs() < 1e-12);
        prop_assert!((aupr(&r).unwrap() - aupr(&t).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn sweep_ratios_ignore_duplication(r in records_strategy(80)) {
        prop_assume!(both_classes(&r));
        let doubled: Vec<PixelRecord> = r.iter().chain(r.iter()).copied().collect();
        let (a, b) = (sweep(&r, 0.5).unwrap(), sweep(&doubled, 0.5).unwrap());
        prop_assert_eq!(a.points.len(), b.points.len());
        for (p, q) in a.points.iter().zip(&b.points) {
            prop_assert_eq!(q.confusion.tp, 2 * p.confusion.tp);
            prop_assert!((p.f_beta - q.f_beta).abs() < 1e-12);
            prop_assert!((p.a_md - q.a_md).abs() < 1e-12);
            prop_assert!((p.p_ac - q.p_ac).abs() < 1e-12);
        }
        prop_assert_eq!(a.auroc, b.auroc);
    }

    #[test]
    fn max_pac_is_accuracy(r in records_strategy(80)) {
        let s = sweep(&r, 0.5).unwrap();
        let acc = r.iter().filter(|p| p.accurate).count() as f64 / r.len() as f64;
        let max = s.points.iter().map(|p| p.p_ac).fold(0.0, f64::max);
        prop_assert_eq!(max, acc);
        prop_assert_eq!(s.accuracy, acc);
        let total = r.len();
        prop_assert!(s.points.iter().all(|p| p.confusion.total() == total));
    }

    #[test]
    fn gamma_matches_consistent_fraction(s in scores_strategy(), bits in prop::collection::vec(any::<bool>(), 60)) {
        let [n, _, h, w] = [s.shape()[0], s.shape()[1], s.shape()[2], s.shape()[3]];
        let m = n * h * w;
        let mask = Mask { shape: [n, h, w], bits: bits.iter().cycle().take(m).copied().collect() };
        let gamma = calculate_gamma(&mask, &s).unwrap();
        let certain = certainty_mask(&s, gamma).unwrap();
        // continuous scores: maxima are distinct almost surely
        let diff = certain.count() as f64 / m as f64 - mask.count() as f64 / m as f64;
        prop_assert!(diff.abs() <= 1.0 / m as f64 + 1e-15);
        if mask.count() > 0 {
            prop_assert_eq!(certain.count(), mask.count());
        }
    }

    #[test]
    fn consistency_mask_is_symmetric(a in scores_strategy(), shift in -0.5f64..0.5) {
        let b = Tensor::from_fn(a.shape().to_vec(), |i| a.data()[(i * 7 + 3) % a.len()] + shift);
        prop_assert_eq!(consistency_mask(&a, &b).unwrap(), consistency_mask(&b, &a).unwrap());
    }

    #[test]
    fn certainty_is_monotone(s in scores_strategy(), g1 in -1.0f64..1.0, g2 in -1.0f64..1.0) {
        let (lo, hi) = if g1 <= g2 { (g1, g2) } else { (g2, g1) };
        let (a, b) = (certainty_mask(&s, lo).unwrap(), certainty_mask(&s, hi).unwrap());
        prop_assert!(a.bits.iter().zip(&b.bits).all(|(x, y)| *x || !*y));
    }

    #[test]
    fn uniformity_ignores_row_order(rows in prop::collection::vec(-1.0f64..1.0, 12..40), rot in 1usize..7) {
        let f = 3;
        let m = rows.len() / f;
        let t = Tensor::new([m, f], rows[..m * f].to_vec()).unwrap();
        let perm = Tensor::from_fn([m, f], |i| t.data()[((i / f + rot) % m) * f + i % f]);
        let value = |t: &Tensor| {
            let mut g = Graph::new();
            let v = g.constant(t.clone());
            let l = uniformity_rows(&mut g, v).unwrap();
            g.value(l).data()[0]
        };
        prop_assert!((value(&t) - value(&perm)).abs() < 1e-12);
    }

    #[test]
    fn prototype_loss_ignores_rotation(p in prop::collection::vec(-1.0f64..1.0, 12), q in prop::collection::vec(-1.0f64..1.0, 9)) {
        let (f, k) = (3, 4);
        let mut g = Graph::new();
        let raw = g.constant(Tensor::new([f, k], p).unwrap());
        let protos = g.l2_normalize(raw, 0, 1e-12).unwrap();
        let rot = g.constant(Tensor::new([f, f], rotation(f, &q)).unwrap());
        let turned = g.matmul(rot, protos).unwrap();
        let a = prototype(&mut g, protos).unwrap();
        let b = prototype(&mut g, turned).unwrap();
        prop_assert!((g.value(a).data()[0] - g.value(b).data()[0]).abs() < 1e-12);
    }

    #[test]
    fn consistency_ignores_uncertain_pixels(bits in prop::collection::vec(any::<bool>(), 6), noise in prop::collection::vec(0.0f64..1.0, 18)) {
        let probs = |d: &[f64]| {
            let t = Tensor::from_fn([1, 3, 2, 3], |i| d[i] + 0.1);
            let sums: Vec<f64> = (0..6).map(|p| (0..3).map(|c| t.data()[c * 6 + p]).sum()).collect();
            Tensor::from_fn([1, 3, 2, 3], |i| t.data()[i] / sums[i % 6])
        };
        let target = probs(&noise.iter().rev().copied().collect::<Vec<_>>());
        let pred = probs(&noise);
        let w: Vec<f64> = bits.iter().map(|&b| f64::from(u8::from(b))).collect();
        let mut changed = noise.clone();
        for p in 0..6 {
            if !bits[p] {
                for c in 0..3 {
                    changed[c * 6 + p] = 1.0 - changed[c * 6 + p];
                }
            }
        }
        let a = loss_consistency(&target, &pred, &w).unwrap();
        let b = loss_consistency(&target, &probs(&changed), &w).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn aligned_views_see_the_same_source_point(seed in any::<u64>()) {
        let (h, w) = (40usize, 44usize);
        let cfg = AugmentConfig { crop: [24, 32], ..AugmentConfig::default() };
        let plan = sample_view_plan(seed, h, w, &cfg).unwrap();
        // source coordinates as an image
        let coords = Tensor::from_fn([2, h, w], |i| if i < h * w { (i / w) as f64 } else { ((i - h * w) % w) as f64 });
        let first = crop_view(&coords, &plan, plan.local_on_first).unwrap();
        let second = crop_view(&coords, &plan, !plan.local_on_first).unwrap();
        let (a, b) = align_scores(&first, &second, &plan).unwrap();
        let worst = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        prop_assert!(worst < 0.5, "coordinates disagree by {worst}");

        let mut recoloured = plan.clone();
        recoloured.colors = [ColorParams { brightness: 0.7, hue: -0.05, ..ColorParams::IDENTITY }, ColorParams::IDENTITY];
        let (c, d) = align_scores(&first, &second, &recoloured).unwrap();
        prop_assert_eq!(a, c);
        prop_assert_eq!(b, d);
    }

    #[test]
    fn plans_are_reproducible(seed in any::<u64>()) {
        let cfg = AugmentConfig::default();
        prop_assert_eq!(sample_view_plan(seed, 64, 64, &cfg).unwrap(), sample_view_plan(seed, 64, 64, &cfg).unwrap());
    }
}

#[test]
fn local_crop_area_ratios_stay_in_range() {
    let cfg = AugmentConfig::default();
    let [lo, hi] = cfg.local_scale;
    for seed in 0..10_000u64 {
        let plan = sample_view_plan(seed, 64, 80, &cfg).unwrap();
        let r = plan.area_ratio();
        assert!(r >= lo - 1e-12 && r <= hi + 1e-12, "seed {seed}: {r}");
        let l = plan.local;
        assert!(l.top >= 0.0 && l.left >= 0.0);
        assert!(l.bottom <= (plan.global.height - 1) as f64 + 1e-12);
        assert!(l.right <= (plan.global.width - 1) as f64 + 1e-12);
    }
}

#[test]
fn gradient_check_of_composite_is_tight() {
    let x = Tensor::from_fn([2, 3], |i| (i as f64 * 0.37).sin());
    let err = gradient_check(
        |g, v| {
            let e = g.exp(v);
            let s = g.softmax(e, 1, 0.5)?;
            let l = g.log(s);
            Ok(g.sum(l))
        },
        &x,
        H,
    )
    .unwrap();
    assert!(err < 1e-7);
}
