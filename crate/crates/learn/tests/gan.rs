mod common;

use std::time::Instant;

use candle_core::DType;
use common::glyphs;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use workbench_core::augment::AugmentConfig;
use workbench_core::objective::{GanOptimizer, GanTrainConfig, SamplerConfig};
use workbench_core::{ClassId, DatasetManifest, Error, Split, Status};
use workbench_learn::gan::{self, GeneratorObjective, DISCRIMINATOR_CONV_LAYERS, GENERATOR_CONV_LAYERS};
use workbench_learn::{
    synthesize, train, train_gan, Classifier, DiscriminatorSpec, GanBundle, GeneratorSpec, LearnError, ModelConfig,
    TrainConfig,
};

fn classifier(data: &[workbench_learn::LabeledImage], classes: usize) -> Classifier {
    let cfg = TrainConfig {
        epochs: 3,
        augment: AugmentConfig::disabled(),
        ..TrainConfig::default()
    };
    let model = Classifier::new(ModelConfig::small_cnn(classes), DType::F32, 1).unwrap();
    train(model, &data[..data.len() - 6], &data[data.len() - 6..], &cfg).unwrap().0
}

fn short(iterations: u64) -> GanTrainConfig {
    GanTrainConfig {
        batch_size: 8,
        max_iterations: iterations,
        gamma_ramp_iterations: iterations,
        log_every: 1,
        checksum_every: 5,
        seed: 3,
        ..GanTrainConfig::default()
    }
}

#[test]
fn smoke_run_keeps_classifier_frozen() {
    let data = glyphs(60, 3, 1);
    let clf = classifier(&data, 3);
    let before = clf.checksum().unwrap();
    let start = Instant::now();
    let (bundle, history) = train_gan(&data, clf, GeneratorSpec::default(), DiscriminatorSpec::default(), &short(20)).unwrap();
    eprintln!("20 iterations at batch 8: {:?}", start.elapsed());
    assert_eq!(history.entries.len(), 20);
    assert!(history.aborted_at.is_none());
    for e in &history.entries {
        assert!(e.generator_loss.is_finite() && e.discriminator_loss.is_finite() && e.classifier_cce.is_finite());
    }
    let gammas: Vec<f64> = history.entries.iter().map(|e| e.gamma).collect();
    assert!(gammas.windows(2).all(|w| w[0] <= w[1]));
    assert_eq!(bundle.classifier.checksum().unwrap(), before);
    assert_eq!(bundle.nets.generator.conv_layers(), GENERATOR_CONV_LAYERS);
    assert_eq!(bundle.nets.discriminator.conv_layers(), DISCRIMINATOR_CONV_LAYERS);
    let images = bundle
        .generate(ClassId(1), 5, &SamplerConfig::default(), &mut ChaCha8Rng::seed_from_u64(0))
        .unwrap();
    for img in images {
        assert_eq!((img.height(), img.width(), img.channels()), (32, 32, 1));
        assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn zero_gamma_matches_plain_bce_run() {
    let data = glyphs(30, 3, 2);
    let clf = classifier(&data, 3);
    let cfg = GanTrainConfig { gamma_max: 0.0, ..short(6) };
    let run = |objective| {
        let (bundle, history) = gan::train_gan_with(
            &data,
            clf.duplicate().unwrap(),
            GeneratorSpec::default(),
            DiscriminatorSpec::default(),
            &cfg,
            objective,
        )
        .unwrap();
        let trace: Vec<(f64, f64)> = history.entries.iter().map(|e| (e.generator_loss, e.discriminator_loss)).collect();
        (trace, bundle.version().unwrap())
    };
    let (full, v_full) = run(GeneratorObjective::ClassifierFeedback);
    let (plain, v_plain) = run(GeneratorObjective::PlainBce);
    assert_eq!(full, plain);
    assert_eq!(v_full, v_plain);
}

#[test]
fn exploding_run_aborts_with_finite_weights() {
    let data = glyphs(30, 3, 4);
    let clf = classifier(&data, 3);
    let cfg = GanTrainConfig {
        learning_rate: 1e30,
        optimizer: GanOptimizer::Sgd,
        ..short(10)
    };
    let (bundle, history) = train_gan(&data, clf, GeneratorSpec::default(), DiscriminatorSpec::default(), &cfg).unwrap();
    assert!(history.aborted_at.is_some(), "expected divergence");
    let img = bundle
        .generate(ClassId(0), 2, &SamplerConfig::default(), &mut ChaCha8Rng::seed_from_u64(0))
        .unwrap();
    assert!(img.iter().all(|i| i.data().iter().all(|v| v.is_finite())));
}

#[test]
fn missing_class_is_rejected() {
    let data: Vec<_> = glyphs(30, 3, 5).into_iter().filter(|s| s.label != ClassId(2)).collect();
    let clf = Classifier::new(ModelConfig::small_cnn(3), DType::F32, 0).unwrap();
    let r = train_gan(&data, clf, GeneratorSpec::default(), DiscriminatorSpec::default(), &short(2));
    assert!(matches!(r, Err(LearnError::Config(_))));
}

fn small_bundle() -> GanBundle {
    let data = glyphs(30, 10, 6);
    let clf = Classifier::new(ModelConfig::small_cnn(10), DType::F32, 0).unwrap();
    train_gan(&data, clf, GeneratorSpec::default(), DiscriminatorSpec::default(), &short(2)).unwrap().0
}

#[test]
fn bundle_round_trip_and_synthesis() {
    let bundle = small_bundle();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bundle.bin");
    bundle.save(&path).unwrap();
    let back = GanBundle::load(&path).unwrap();
    assert_eq!(back.version().unwrap(), bundle.version().unwrap());
    assert_eq!(back.classifier.checksum().unwrap(), bundle.classifier.checksum().unwrap());
    let sampler = SamplerConfig::default();
    let a = bundle.generate(ClassId(3), 3, &sampler, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let b = back.generate(ClassId(3), 3, &sampler, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    assert_eq!(a, b);

    let mut manifest = DatasetManifest::new(DatasetManifest::roman_classes(), 10_000).unwrap();
    assert!(synthesize(&back, &mut manifest, dir.path(), ClassId(2), 0, &sampler, 1).unwrap().is_empty());
    assert_eq!(manifest.len(), 0);
    let mut total = 0;
    for class in 0..10u16 {
        let count = if class < 6 { 123 } else { 122 };
        let ids = synthesize(&back, &mut manifest, dir.path(), ClassId(class), count, &sampler, 1).unwrap();
        total += ids.len();
        for id in ids {
            let r = manifest.get(&id).unwrap();
            assert_eq!(r.label, ClassId(class));
            assert_eq!(r.status, Status::CertifiedSynthetic);
            assert_eq!(r.split, Split::Train);
            assert!(r.note.as_deref().unwrap().contains("seed 1"));
            assert!(dir.path().join(&r.image_path).exists());
        }
    }
    assert_eq!(total, 1226);
    assert_eq!(manifest.len(), 1226);
    manifest.validate().unwrap();
}

#[test]
fn synthesis_respects_budget() {
    let bundle = small_bundle();
    let dir = tempfile::tempdir().unwrap();
    let mut manifest = DatasetManifest::new(DatasetManifest::roman_classes(), 5).unwrap();
    let r = synthesize(&bundle, &mut manifest, dir.path(), ClassId(0), 5, &SamplerConfig::default(), 0);
    assert!(matches!(r, Err(LearnError::Core(Error::Budget { .. }))));
    assert_eq!(manifest.len(), 0);
    assert!(!dir.path().join("synthetic").exists());
    synthesize(&bundle, &mut manifest, dir.path(), ClassId(0), 4, &SamplerConfig::default(), 0).unwrap();
    assert_eq!(manifest.len(), 4);
}
