use proptest::prelude::*;

use lesionscreen_core::classifier::{Head, HeadSpec};
use lesionscreen_core::dataset::{
    augment, balance, split, MemoryStore, SplitRatio, TransformBounds, TransformDescriptor,
};
use lesionscreen_core::evaluation::{weighted_metrics, ConfusionMatrix};
use lesionscreen_core::segmentation::stub::FnBackend;
use lesionscreen_core::synthetic::placeholder_records;
use lesionscreen_core::*;
use rand::SeedableRng;

fn image_strategy() -> impl Strategy<Value = ScreeningImage> {
    (1u32..12, 1u32..12, any::<u64>()).prop_map(|(w, h, seed)| {
        ScreeningImage::from_fn(w, h, "p", |x, y| {
            let v = seed.wrapping_mul(6364136223846793005).wrapping_add((x * 31 + y * 17) as u64);
            [(v >> 8) as u8, (v >> 24) as u8, (v >> 40) as u8]
        })
        .unwrap()
    })
}

fn mask_for(img: &ScreeningImage, bits: &[bool]) -> BinaryMask {
    let n = (img.width() * img.height()) as usize;
    BinaryMask::from_bits(img.width(), img.height(), (0..n).map(|i| bits[i % bits.len()]).collect()).unwrap()
}

/// Per-class metrics straight from prediction lists, no confusion matrix.
fn brute_force(actual: &[usize], predicted: &[usize]) -> (f64, f64, f64) {
    let n = actual.len() as f64;
    let mut wp = 0.0;
    let mut wr = 0.0;
    let mut wf = 0.0;
    for c in 0..2 {
        let support = actual.iter().filter(|&&a| a == c).count() as f64;
        let predicted_c = predicted.iter().filter(|&&p| p == c).count() as f64;
        let hits = actual.iter().zip(predicted).filter(|(&a, &p)| a == c && p == c).count() as f64;
        let p = if predicted_c > 0.0 { hits / predicted_c } else { 0.0 };
        let r = if support > 0.0 { hits / support } else { 0.0 };
        let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
        wp += support / n * p;
        wr += support / n * r;
        wf += support / n * f;
    }
    (wp, wr, wf)
}

proptest! {
    #[test]
    fn applying_a_mask_twice_changes_nothing(img in image_strategy(), bits in prop::collection::vec(any::<bool>(), 1..40)) {
        let mask = mask_for(&img, &bits);
        let once = apply_mask(&img, &mask).unwrap();
        prop_assert_eq!(apply_mask(&once, &mask).unwrap(), once);
    }

    #[test]
    fn blackout_and_foreground_fractions_sum_to_one(img in image_strategy(), bits in prop::collection::vec(any::<bool>(), 1..40)) {
        let mask = mask_for(&img, &bits);
        let kept = mask.foreground_count() as f64 / mask.len() as f64;
        prop_assert!((blackout_fraction(&mask).unwrap() + kept - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gate_bypasses_exactly_above_threshold(img in image_strategy(), bits in prop::collection::vec(any::<bool>(), 1..40), t in 0.01f64..0.99) {
        let mask = mask_for(&img, &bits);
        let fraction = blackout_fraction(&mask).unwrap();
        let backend = FnBackend { kind: BackendKind::SkinRegion, f: move |_: &ScreeningImage| Ok(mask.clone()) };
        let (out, d) = gated_segment(&img, &backend, &GateConfig::new(t).unwrap());
        prop_assert_eq!(d.applied, fraction <= t);
        if !d.applied {
            prop_assert_eq!(out, img);
        }
    }

    #[test]
    fn raising_blackout_never_turns_a_bypass_into_an_apply(img in image_strategy(), a in 0.0f64..1.0, b in 0.0f64..1.0) {
        use lesionscreen_core::segmentation::stub::FixedBlackoutBackend;
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let gate = GateConfig::default();
        let run = |blackout| gated_segment(&img, &FixedBlackoutBackend { kind: BackendKind::SalientObject, blackout }, &gate).1.applied;
        prop_assert!(!(run(hi) && !run(lo)));
    }

    #[test]
    fn restoration_never_shrinks(w in 1u32..600, h in 1u32..600) {
        let policy = RestorationPolicy::default();
        if let Some((tw, th)) = policy.target_size(w, h) {
            prop_assert!(tw >= w && th >= h);
            prop_assert!(tw.max(th) <= policy.max_output_side);
            prop_assert!(w.min(h) < policy.min_side_trigger);
        } else {
            prop_assert!(w.min(h) >= policy.min_side_trigger || w.max(h) >= policy.max_output_side);
        }
    }

    #[test]
    fn weighted_metrics_match_brute_force(pairs in prop::collection::vec((0usize..2, 0usize..2), 1..300)) {
        let actual: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let predicted: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        let cm = ConfusionMatrix::from_pairs(pairs.iter().map(|&(a, p)| (Label::from_index(a).unwrap(), Label::from_index(p).unwrap())));
        let r = weighted_metrics(&cm).unwrap();
        let (wp, wr, wf) = brute_force(&actual, &predicted);
        prop_assert!((r.weighted_precision - wp).abs() <= 1e-9);
        prop_assert!((r.weighted_recall - wr).abs() <= 1e-9);
        prop_assert!((r.weighted_f1 - wf).abs() <= 1e-9);
        let correct = pairs.iter().filter(|p| p.0 == p.1).count() as f64;
        prop_assert_eq!(r.accuracy, correct / pairs.len() as f64);
        prop_assert!((r.weighted_recall - r.accuracy).abs() <= 1e-12);
        for v in [r.weighted_precision, r.weighted_recall, r.weighted_f1, r.accuracy] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn head_softmax_is_a_distribution(features in prop::collection::vec(-1e3f64..1e3, 16), seed in any::<u64>()) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let head = Head::new(HeadSpec::default(), 16, &mut rng);
        let p = head.predict_proba(&features);
        prop_assert!(p[0] >= 0.0 && p[1] >= 0.0);
        prop_assert!((p[0] + p[1] - 1.0).abs() <= 1e-6);
        prop_assert_eq!(p, head.predict_proba(&features));
    }

    #[test]
    fn augmentation_keeps_dimensions(img in image_strategy(), seed in any::<u64>()) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let t = TransformDescriptor::sample(&mut rng, &TransformBounds::default());
        let out = augment(&img, &t).unwrap();
        prop_assert_eq!(out.dimensions(), img.dimensions());
        prop_assert_eq!(augment(&img, &t).unwrap(), out);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn split_is_stratified_and_leak_free(mp in 1usize..25, ot in 1usize..25, seed in any::<u64>(), val in 0.0f64..1.0) {
        let mut store = MemoryStore::default();
        let mut recs = placeholder_records(&mut store, "m", Label::Monkeypox, Split::Val, mp).unwrap();
        recs.extend(placeholder_records(&mut store, "o", Label::Others, Split::Val, ot).unwrap());
        let manifest = DatasetManifest::new(recs).unwrap();
        let balanced = balance(&manifest, Split::Val, seed, &mut store).unwrap();
        let c = balanced.counts(Split::Val);
        prop_assert_eq!(c.monkeypox, c.others);

        let ratio = SplitRatio::new(val, 1.0 - val).unwrap();
        let out = split(&balanced, ratio, seed).unwrap();
        prop_assert_eq!(out.len(), balanced.len());
        for label in Label::ALL {
            let n = balanced.records().iter().filter(|r| r.label == label).count();
            let v = out.counts(Split::Val).get(label);
            let t = out.counts(Split::Test).get(label);
            prop_assert_eq!(v + t, n);
            let want = (n as f64 * val + 0.5 + 1e-9).floor() as usize;
            // families are indivisible, so the target may be missed by less than one family
            let mut family = std::collections::HashMap::<&str, usize>::new();
            for r in balanced.records().iter().filter(|r| r.label == label) {
                *family.entry(balanced.root_of(&r.id)).or_default() += 1;
            }
            let largest = family.values().copied().max().unwrap();
            prop_assert!(v <= want && want - v < largest, "label {label}: val {v}, want {want}");
            if largest == 1 {
                prop_assert_eq!(v, want);
            }
        }
        for r in out.records() {
            if let Some(p) = &r.parent_id {
                prop_assert_eq!(out.get(p).unwrap().split, r.split);
            }
        }
    }

    #[test]
    fn manifest_jsonl_round_trips(n in 1usize..20, seed in any::<u64>()) {
        let mut store = MemoryStore::default();
        let mut recs = placeholder_records(&mut store, "m", Label::Monkeypox, Split::Train, n).unwrap();
        recs.extend(placeholder_records(&mut store, "o", Label::Others, Split::Train, n + 3).unwrap());
        let manifest = balance(&DatasetManifest::new(recs).unwrap(), Split::Train, seed, &mut store).unwrap();
        let text = manifest.to_jsonl();
        let back = DatasetManifest::new(DatasetManifest::read_jsonl(text.as_bytes()).unwrap()).unwrap();
        prop_assert_eq!(back.records(), manifest.records());
        prop_assert_eq!(back.checksum(), manifest.checksum());
    }
}
