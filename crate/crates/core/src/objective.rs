//! Scalar reference forms of the synthesizer objectives, the γ ramp and the
//! latent noise sampler.
//!
//! The generator objective rewards samples the discriminator accepts as real
//! while raising the frozen classifier's cross-entropy:
//!
//! ```text
//! loss = δ · BCE(real, p_disc) − γ · CCE(onehot(label), p_class)
//! ```
//!
//! Both terms are batch means of natural-log losses. Probabilities are
//! clamped to `[PROB_EPS, 1 − PROB_EPS]` before taking logs.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifest::ClassId;
use crate::scalar::Scalar;

pub const PROB_EPS: f64 = 1e-7;

fn clamp_prob<T: Scalar>(p: T) -> T {
    p.max(T::of(PROB_EPS)).min(T::one() - T::of(PROB_EPS))
}

/// Numerically stable softmax.
pub fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum = exps.iter().copied().fold(T::zero(), |a, b| a + b);
    exps.into_iter().map(|e| e / sum).collect()
}

/// Mean binary cross-entropy of probabilities against a constant target.
pub fn binary_cross_entropy<T: Scalar>(probs: &[T], target_real: bool) -> T {
    let n = T::of(probs.len() as f64);
    let sum = probs.iter().fold(T::zero(), |acc, &p| {
        let p = clamp_prob(p);
        acc - if target_real { p.ln() } else { (T::one() - p).ln() }
    });
    sum / n
}

/// Mean categorical cross-entropy of `batch × classes` probabilities (row
/// major) against one-hot labels.
pub fn categorical_cross_entropy<T: Scalar>(class_probs: &[T], labels: &[ClassId]) -> T {
    let classes = class_probs.len() / labels.len();
    let sum = labels.iter().enumerate().fold(T::zero(), |acc, (i, c)| {
        acc - clamp_prob(class_probs[i * classes + c.index()]).ln()
    });
    sum / T::of(labels.len() as f64)
}

/// `δ · BCE(real, disc_probs) − γ · CCE(labels, class_probs)`.
pub fn generator_loss<T: Scalar>(disc_probs: &[T], class_probs: &[T], labels: &[ClassId], gamma: T, delta: T) -> T {
    assert_eq!(disc_probs.len(), labels.len(), "one discriminator output per sample");
    assert_eq!(class_probs.len() % labels.len(), 0, "class_probs must be batch × classes");
    delta * binary_cross_entropy(disc_probs, true) - gamma * categorical_cross_entropy(class_probs, labels)
}

/// `BCE(real → 1) + BCE(fake → 0)`.
pub fn discriminator_loss<T: Scalar>(real_probs: &[T], fake_probs: &[T]) -> T {
    binary_cross_entropy(real_probs, true) + binary_cross_entropy(fake_probs, false)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum GanOptimizer {
    Adam { beta1: f64, beta2: f64 },
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GanTrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub delta: f64,
    pub gamma_max: f64,
    pub gamma_ramp_iterations: u64,
    pub max_iterations: u64,
    pub optimizer: GanOptimizer,
    pub log_every: u64,
    /// Classifier checksum verification period.
    pub checksum_every: u64,
    pub seed: u64,
}

impl Default for GanTrainConfig {
    fn default() -> Self {
        GanTrainConfig {
            batch_size: 32,
            learning_rate: 1e-4,
            delta: 1.0,
            gamma_max: 0.5,
            gamma_ramp_iterations: 200_000,
            max_iterations: 200_000,
            optimizer: GanOptimizer::Adam { beta1: 0.5, beta2: 0.999 },
            log_every: 100,
            checksum_every: 1_000,
            seed: 0,
        }
    }
}

impl GanTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(self.gamma_max >= 0.0 && self.delta >= 0.0) {
            return Err(Error::Config("gamma_max and delta must be non-negative".into()));
        }
        if self.gamma_ramp_iterations == 0 || self.gamma_ramp_iterations > self.max_iterations.max(1) {
            return Err(Error::Config("gamma_ramp_iterations must be in 1..=max_iterations".into()));
        }
        Ok(())
    }

    pub fn gamma(&self, iteration: u64) -> f64 {
        gamma_schedule(iteration, self.gamma_max, self.gamma_ramp_iterations)
    }
}

/// `gamma_max · min(1, iteration / ramp)`.
pub fn gamma_schedule<T: Scalar>(iteration: u64, gamma_max: T, ramp: u64) -> T {
    if iteration >= ramp {
        return gamma_max;
    }
    gamma_max * T::of(iteration as f64) / T::of(ramp as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub mean: f64,
    pub std: f64,
    /// Bound on each standard normal coordinate; `None` is untruncated.
    pub truncation: Option<f64>,
    pub count: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            mean: 0.0,
            std: 1.0,
            truncation: Some(0.7),
            count: 1,
        }
    }
}

impl SamplerConfig {
    pub fn untruncated(count: usize) -> Self {
        SamplerConfig {
            truncation: None,
            count,
            ..Self::default()
        }
    }
}

/// `count × dim` noise values, row major. Each coordinate is a standard
/// normal draw rejected until `|z| <= truncation`, then scaled by `std` and
/// shifted by `mean`.
pub fn sample_noise<T: Scalar, R: Rng + ?Sized>(config: &SamplerConfig, dim: usize, rng: &mut R) -> Result<Vec<T>> {
    if let Some(t) = config.truncation {
        if !(t > 0.0) {
            return Err(Error::Config("truncation must be positive".into()));
        }
    }
    let bound = config.truncation.unwrap_or(f64::INFINITY);
    let mut out = Vec::with_capacity(config.count * dim);
    for _ in 0..config.count * dim {
        let z = loop {
            let z: f64 = rng.sample(StandardNormal);
            if z.abs() <= bound {
                break z;
            }
        };
        out.push(T::of(config.mean + config.std * z));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn generator_loss_zero_case() {
        let loss = generator_loss(&[0.5f64], &[0.25, 0.75], &[ClassId(0)], 0.5, 1.0);
        assert!(loss.abs() < 1e-12);
    }

    #[test]
    fn zero_gamma_is_plain_bce() {
        let d = [0.3f64, 0.9];
        let c = [0.5, 0.5, 0.1, 0.9];
        let l = [ClassId(0), ClassId(1)];
        assert_eq!(generator_loss(&d, &c, &l, 0.0, 1.0), binary_cross_entropy(&d, true));
    }

    #[test]
    fn discriminator_reference_values() {
        assert!(discriminator_loss(&[1.0f64; 4], &[0.0; 4]) < 1e-6);
        let half = discriminator_loss(&[0.5f64; 4], &[0.5; 4]);
        assert!((half - 2.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn gamma_ramp() {
        let cfg = GanTrainConfig::default();
        assert_eq!(cfg.gamma(0), 0.0);
        assert_eq!(cfg.gamma(100_000), 0.25);
        assert_eq!(cfg.gamma(200_000), 0.5);
        assert_eq!(cfg.gamma(400_000), 0.5);
        assert_eq!(gamma_schedule::<f32>(5, 0.5, 10), 0.25);
    }

    #[test]
    fn gan_config_validation() {
        assert!(GanTrainConfig::default().validate().is_ok());
        let bad = GanTrainConfig {
            gamma_ramp_iterations: 10,
            max_iterations: 5,
            ..GanTrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn truncated_noise_is_bounded_and_reproducible() {
        let cfg = SamplerConfig {
            count: 100,
            ..SamplerConfig::default()
        };
        let a: Vec<f32> = sample_noise(&cfg, 100, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(a.iter().all(|z| z.abs() <= 0.7));
        let b: Vec<f32> = sample_noise(&cfg, 100, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a, b);
        let bad = SamplerConfig {
            truncation: Some(0.0),
            ..cfg
        };
        assert!(sample_noise::<f64, _>(&bad, 1, &mut ChaCha8Rng::seed_from_u64(1)).is_err());
    }

    #[test]
    fn softmax_sums_to_one() {
        let p = softmax(&[1000.0f64, 999.0, -5.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p[0] > p[1] && p[1] > p[2]);
    }
}
