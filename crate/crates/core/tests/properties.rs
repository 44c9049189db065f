use std::collections::{BTreeMap, BTreeSet, HashSet};

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use workbench_core::augment::{augment, AugmentConfig};
use workbench_core::balance::{balance_classes, make_folds, restore_from_surplus, select_test_set};
use workbench_core::dedup::{digest_bytes, find_duplicates, DedupConfig, DuplicateKind};
use workbench_core::image::ImageTensor;
use workbench_core::objective::{gamma_schedule, generator_loss, softmax};
use workbench_core::triage::{
    apply_verdicts, pipeline_accuracy, ratio_validated, rank_by_loss, select_head_tail, ConfirmationRule, FlagKind,
    FlaggedSample, LossEntry, LossReport, ReviewVerdict, TriageConfig, TriageRound, VerdictAction,
};
use workbench_core::{ClassId, DatasetManifest, Digest256, PHash, SampleRecord, Split, Status};

const CLASSES: usize = 10;

/// (label, kind) per record; kind picks a status/split combination.
fn records() -> impl Strategy<Value = Vec<(u16, u8, Option<f64>)>> {
    prop::collection::vec((0..CLASSES as u16, 0u8..7, prop::option::of(0.0f64..20.0)), 10..120)
}

fn build(spec: &[(u16, u8, Option<f64>)], slack: usize) -> DatasetManifest {
    let mut recs = Vec::new();
    for (i, &(label, kind, loss)) in spec.iter().enumerate() {
        let mut r = SampleRecord::new(format!("r{i:04}"), format!("images/r{i:04}.png"), digest_bytes(&(i as u64).to_le_bytes()), ClassId(label));
        // the first CLASSES records keep every class in the active pool
        let kind = if i < CLASSES { 3 } else { kind };
        r.label = ClassId(if i < CLASSES { i as u16 } else { label });
        r.loss = loss;
        (r.status, r.split) = match kind {
            0 => (Status::Unverified, Split::Unassigned),
            1 => (Status::Rejected, Split::Unassigned),
            2 => (Status::Ambiguous, Split::Unassigned),
            3 | 4 => (Status::Certified, Split::Train),
            5 => (Status::Certified, Split::Validation),
            _ => (Status::Relabeled, Split::Train),
        };
        if r.status == Status::Relabeled {
            r.original_label = Some(ClassId((r.label.0 + 1) % CLASSES as u16));
            r.suggested_label = Some(r.label);
        }
        recs.push(r);
    }
    let active = recs.iter().filter(|r| matches!(r.split, Split::Train | Split::Validation)).count();
    let mut m = DatasetManifest::new(DatasetManifest::roman_classes(), active + slack).unwrap();
    for r in recs {
        m.insert(r).unwrap();
    }
    m
}

fn id_multiset(m: &DatasetManifest) -> BTreeMap<String, ClassId> {
    m.records().map(|r| (r.id.clone(), r.label)).collect()
}

fn report(losses: &[f64]) -> LossReport {
    LossReport {
        entries: losses
            .iter()
            .enumerate()
            .map(|(i, &loss)| LossEntry {
                id: format!("r{i:04}"),
                label: ClassId(0),
                loss,
                predicted: ClassId(1),
                confidence: 0.5,
                probabilities: Vec::new(),
            })
            .collect(),
        ..LossReport::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn manifest_round_trips(spec in records(), slack in 1usize..50) {
        let m = build(&spec, slack);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        m.save(&path).unwrap();
        prop_assert_eq!(DatasetManifest::load(&path).unwrap(), m);
    }

    #[test]
    fn adding_active_records_never_repairs_the_budget(spec in records(), extra in 1usize..5, slack in 0usize..4) {
        let mut m = build(&spec, 1);
        m.n_max = m.n_max.saturating_sub(slack).max(1);
        let before = m.validate_size_constraint().satisfied;
        for i in 0..extra {
            let mut r = SampleRecord::new(format!("x{i}"), "x.png", digest_bytes(&[i as u8]), ClassId(0));
            (r.status, r.split) = (Status::Certified, Split::Train);
            m.insert(r).unwrap();
            let now = m.validate_size_constraint().satisfied;
            prop_assert!(before || !now);
        }
    }

    #[test]
    fn histograms_sum_to_split_counts(spec in records()) {
        let m = build(&spec, 1);
        for split in [Split::Train, Split::Validation, Split::Unassigned] {
            let expect = m.records().filter(|r| r.split == split && r.status != Status::Rejected).count();
            prop_assert_eq!(m.class_histogram(split).iter().sum::<usize>(), expect);
        }
    }

    #[test]
    fn duplicate_groups_partition_and_are_symmetric(
        keys in prop::collection::vec((0u8..6, 0u8..4, any::<u64>(), 0u32..5), 2..60)
    ) {
        let mut m = DatasetManifest::new(DatasetManifest::roman_classes(), 10_000).unwrap();
        for (i, &(b, p, h, flips)) in keys.iter().enumerate() {
            let mut r = SampleRecord::new(format!("d{i:03}"), "x.png", Digest256([b; 32]), ClassId(0));
            // equal bytes must imply equal pixels
            r.pixel_hash = Some(Digest256([b.wrapping_mul(16).wrapping_add(if b < 3 { 0 } else { p }); 32]));
            let base = if b < 3 { u64::from(b) } else { h };
            r.phash = Some(PHash(base ^ ((1u64 << flips) - 1)));
            m.insert(r).unwrap();
        }
        let config = DedupConfig::default();
        let groups = find_duplicates(&m, &config).unwrap();
        let mut exact_seen = HashSet::new();
        let mut near = BTreeSet::new();
        for g in &groups {
            prop_assert!(g.member_ids.windows(2).all(|w| w[0] < w[1]));
            let rec: Vec<&SampleRecord> = g.member_ids.iter().map(|id| m.get(id).unwrap()).collect();
            match g.kind {
                DuplicateKind::ExactBytes => prop_assert!(rec.iter().all(|r| r.byte_hash == rec[0].byte_hash)),
                DuplicateKind::ExactPixels => prop_assert!(rec.iter().all(|r| r.pixel_hash == rec[0].pixel_hash)),
                DuplicateKind::Near => {
                    prop_assert_eq!(rec.len(), 2);
                    let d = rec[0].phash.unwrap().distance(rec[1].phash.unwrap());
                    prop_assert!(d == g.distance && d <= config.hamming_threshold);
                    near.insert((g.member_ids[0].clone(), g.member_ids[1].clone()));
                }
            }
            if g.kind != DuplicateKind::Near {
                for id in &g.member_ids[1..] {
                    prop_assert!(exact_seen.insert(id.clone()), "{} dropped twice", id);
                }
            }
        }
        // symmetric: the relation is stored once per unordered pair
        for (a, b) in &near {
            prop_assert!(!near.contains(&(b.clone(), a.clone())));
        }
        // byte groups never split across different byte hashes
        let mut by_bytes: BTreeMap<Digest256, usize> = BTreeMap::new();
        for r in m.records() {
            *by_bytes.entry(r.byte_hash).or_default() += 1;
        }
        let byte_groups = groups.iter().filter(|g| g.kind == DuplicateKind::ExactBytes).count();
        prop_assert_eq!(byte_groups, by_bytes.values().filter(|&&n| n > 1).count());
    }

    #[test]
    fn augmentation_stays_in_range_and_is_deterministic(seed in any::<u64>(), counter in any::<u64>(), h in 8usize..40, w in 8usize..40) {
        let img: ImageTensor<f32> = ImageTensor::from_fn(h, w, 1, |y, x, _| ((y * 7 + x * 3) % 11) as f32 / 10.0);
        let config = AugmentConfig { seed, ..AugmentConfig::default() };
        let a = augment(&img, &config, counter);
        prop_assert_eq!((a.height(), a.width(), a.channels()), (h, w, 1));
        prop_assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert_eq!(&a, &augment(&img, &config, counter));
        prop_assert_eq!(&augment(&img, &AugmentConfig::disabled(), counter), &img);
    }

    #[test]
    fn head_and_tail_are_disjoint_and_ordered(losses in prop::collection::vec(0.0f64..5.0, 0..200), k in 0usize..200, l in 0usize..200) {
        let n = losses.len();
        let (k, l) = (k.min(n), l.min(n - k.min(n)));
        let r = report(&losses);
        let ranked = rank_by_loss(&r);
        let (head, tail) = select_head_tail(&ranked, &TriageConfig { k, l, require_human_confirmation_of_head: true }).unwrap();
        let hs: HashSet<&String> = head.iter().collect();
        prop_assert!(tail.iter().all(|t| !hs.contains(t)));
        prop_assert_eq!(head.len() + tail.len(), k + l);
        let loss = |id: &String| losses[id[1..].parse::<usize>().unwrap()];
        for a in &head {
            for b in &tail {
                prop_assert!(loss(a) <= loss(b));
            }
        }
    }

    #[test]
    fn verdicts_are_idempotent_and_accuracy_bounded(
        spec in prop::collection::vec((0u16..10, 0u8..4, any::<bool>()), 1..60),
        slack in 1usize..5,
    ) {
        let mut m = DatasetManifest::new(DatasetManifest::roman_classes(), spec.len() + slack).unwrap();
        let mut flagged = Vec::new();
        let mut verdicts = Vec::new();
        for (i, &(label, action, tail)) in spec.iter().enumerate() {
            let id = format!("v{i:03}");
            m.insert(SampleRecord::new(id.clone(), "x.png", digest_bytes(&[i as u8]), ClassId(label))).unwrap();
            let kind = if tail { FlagKind::SuspectTail } else { FlagKind::ConfidentHead };
            let predicted = ClassId((label + 1) % 10);
            flagged.push(FlaggedSample { id: id.clone(), kind, label: ClassId(label), loss: Some(1.0), predicted: Some(predicted) });
            verdicts.push(match action {
                0 => ReviewVerdict::new(&id, VerdictAction::Certify, 1, "p"),
                1 => ReviewVerdict::relabel(&id, predicted, 1, "p"),
                2 => ReviewVerdict::new(&id, VerdictAction::Reject, 1, "p"),
                _ => ReviewVerdict::new(&id, VerdictAction::Ambiguous, 1, "p"),
            });
        }
        let queue = TriageRound { round: 1, flagged: flagged.clone(), training: None };
        let before = ratio_validated(&m);
        let once = apply_verdicts(&m, &queue, &verdicts).unwrap();
        let twice = apply_verdicts(&once, &queue, &verdicts).unwrap();
        prop_assert_eq!(&once, &twice);
        once.validate().unwrap();
        prop_assert!(ratio_validated(&once) >= before);
        for rule in [ConfirmationRule::AnyCorrection, ConfirmationRule::SuggestedLabelMatch] {
            let acc = pipeline_accuracy(&flagged, &verdicts, 1, rule).unwrap();
            prop_assert!((0.0..=1.0).contains(&acc));
        }
        // confirming every assessment gives 1
        let agree: Vec<ReviewVerdict> = flagged
            .iter()
            .map(|f| match f.kind {
                FlagKind::SuspectTail => ReviewVerdict::relabel(&f.id, f.predicted.unwrap(), 1, "p"),
                _ => ReviewVerdict::new(&f.id, VerdictAction::Certify, 1, "p"),
            })
            .collect();
        prop_assert_eq!(pipeline_accuracy(&flagged, &agree, 1, ConfirmationRule::SuggestedLabelMatch).unwrap(), 1.0);
    }

    #[test]
    fn balancing_and_splitting_conserve_records(spec in records(), seed in any::<u64>(), test_size in 0usize..10) {
        let m = build(&spec, 1000);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let balanced = balance_classes(&m, &mut rng).unwrap();
        prop_assert_eq!(id_multiset(&balanced), id_multiset(&m));
        let hist: Vec<usize> = balanced
            .class_histogram(Split::Train)
            .iter()
            .zip(balanced.class_histogram(Split::Validation))
            .map(|(a, b)| a + b)
            .collect();
        prop_assert!(hist.windows(2).all(|w| w[0] == w[1]));
        let restored = restore_from_surplus(&balanced, 5, &mut rng).unwrap();
        prop_assert_eq!(id_multiset(&restored), id_multiset(&m));
        let tested = select_test_set(&restored, test_size, &mut rng).unwrap();
        prop_assert_eq!(id_multiset(&tested), id_multiset(&m));
        let pool = tested
            .records()
            .filter(|r| matches!(r.split, Split::Train | Split::Validation) && !r.status.is_excluded())
            .count();
        let folds = pool.min(8);
        prop_assume!(folds >= 2);
        let plan = make_folds(&tested, folds, seed).unwrap();
        for i in 0..folds {
            let (train, val) = plan.fold(i);
            prop_assert!(train.len() + val.len() < tested.n_max);
            prop_assert!(val.iter().all(|v| !plan.test_ids.contains(&v.to_string())));
            prop_assert_eq!(id_multiset(&plan.materialize(&tested, i).unwrap()), id_multiset(&m));
        }
    }

    #[test]
    fn generator_loss_never_rises_with_gamma(
        batch in prop::collection::vec((0.0f64..1.0, 0u16..4, prop::collection::vec(-3.0f64..3.0, 4)), 1..20),
        g1 in 0.0f64..1.0, g2 in 0.0f64..1.0, delta in 0.0f64..2.0,
    ) {
        let disc: Vec<f64> = batch.iter().map(|b| b.0).collect();
        let labels: Vec<ClassId> = batch.iter().map(|b| ClassId(b.1)).collect();
        let mut probs = Vec::new();
        for b in &batch {
            let p = softmax(&b.2);
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-5 && p.iter().all(|&v| v >= 0.0));
            probs.extend(p);
        }
        let (lo, hi) = if g1 <= g2 { (g1, g2) } else { (g2, g1) };
        prop_assert!(generator_loss(&disc, &probs, &labels, hi, delta) <= generator_loss(&disc, &probs, &labels, lo, delta) + 1e-12);
    }

    #[test]
    fn gamma_schedule_is_monotone_and_bounded(a in 0u64..1_000_000, b in 0u64..1_000_000, ramp in 1u64..500_000, max in 0.0f64..2.0) {
        let (lo, hi) = (a.min(b), a.max(b));
        let (glo, ghi) = (gamma_schedule(lo, max, ramp), gamma_schedule(hi, max, ramp));
        prop_assert!(glo <= ghi && ghi <= max && glo >= 0.0);
    }
}
