mod common;

use proptest::prelude::*;
use workbench_core::{ClassId, Image};
use workbench_learn::{infer_losses, Classifier, DType, LabeledImage, ModelConfig};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn loss_entries_are_consistent_with_probabilities(
        seed in any::<u64>(),
        pixels in prop::collection::vec(prop::collection::vec(0.0f32..=1.0, 32 * 32), 1..6),
        labels in prop::collection::vec(0u16..10, 6),
    ) {
        let model = Classifier::new(ModelConfig::small_cnn(10), DType::F32, seed).unwrap();
        let samples: Vec<LabeledImage> = pixels
            .into_iter()
            .enumerate()
            .map(|(i, p)| LabeledImage {
                id: format!("p{i}"),
                label: ClassId(labels[i]),
                image: Image::from_vec(32, 32, 1, p).unwrap(),
            })
            .collect();
        let report = infer_losses(&model, &samples).unwrap();
        prop_assert_eq!(report.entries.len(), samples.len());
        for (e, s) in report.entries.iter().zip(&samples) {
            let sum: f64 = e.probabilities.iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-5 && e.probabilities.iter().all(|&p| p >= 0.0));
            let argmax = (0..10).max_by(|&a, &b| e.probabilities[a].total_cmp(&e.probabilities[b])).unwrap();
            prop_assert_eq!(e.predicted.index(), argmax);
            prop_assert!((e.loss + e.probabilities[s.label.index()].ln()).abs() <= 1e-6);
            prop_assert!(e.loss >= 0.0);
        }
    }
}
