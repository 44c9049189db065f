//! Sources of review verdicts for the orchestrator.

use std::path::Path;

use anyhow::Context;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use workbench_core::glyphs::GroundTruth;
use workbench_core::manifest::load_json;
use workbench_core::triage::{FlaggedSample, ReviewVerdict, TriageRound, VerdictAction};
use workbench_core::{ClassId, DatasetManifest};

pub trait Supervisor {
    /// Verdicts for some or all of `pending`. An empty answer pauses the
    /// round until verdicts arrive from elsewhere.
    fn review(&mut self, manifest: &DatasetManifest, queue: &TriageRound, pending: &[&FlaggedSample]) -> anyhow::Result<Vec<ReviewVerdict>>;
}

/// Never answers; verdicts come through the review service or a verdict file.
pub struct External;

impl Supervisor for External {
    fn review(&mut self, _: &DatasetManifest, _: &TriageRound, _: &[&FlaggedSample]) -> anyhow::Result<Vec<ReviewVerdict>> {
        Ok(Vec::new())
    }
}

/// Answers from ground truth: certify correct labels, relabel wrong ones to
/// the true class. With probability `noise` the verdict is wrong instead.
pub struct Simulated {
    truth: GroundTruth,
    noise: f64,
    seed: u64,
}

pub const SIMULATED_REVIEWER: &str = "simulated";

impl Simulated {
    pub fn new(truth: GroundTruth, noise: f64, seed: u64) -> Self {
        Simulated { truth, noise, seed }
    }

    pub fn load(path: &Path, noise: f64, seed: u64) -> anyhow::Result<Self> {
        let truth: GroundTruth = load_json(path).with_context(|| format!("loading ground truth {}", path.display()))?;
        Ok(Self::new(truth, noise, seed))
    }

    pub fn truth(&self) -> &GroundTruth {
        &self.truth
    }
}

impl Supervisor for Simulated {
    fn review(&mut self, manifest: &DatasetManifest, queue: &TriageRound, pending: &[&FlaggedSample]) -> anyhow::Result<Vec<ReviewVerdict>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(u64::from(queue.round));
        let classes = manifest.num_classes();
        let mut out = Vec::with_capacity(pending.len());
        for f in pending {
            let record = manifest
                .get(&f.id)
                .with_context(|| format!("flagged sample {} is not in the manifest", f.id))?;
            let truth = *self
                .truth
                .labels
                .get(&f.id)
                .with_context(|| format!("no ground truth for {}", f.id))?;
            let mistaken = self.noise > 0.0 && rng.random_bool(self.noise);
            let verdict = match (record.label == truth, mistaken) {
                (true, false) | (false, true) => ReviewVerdict::new(&f.id, VerdictAction::Certify, queue.round, SIMULATED_REVIEWER),
                (false, false) => ReviewVerdict::relabel(&f.id, truth, queue.round, SIMULATED_REVIEWER),
                (true, true) => {
                    let wrong = (truth.index() + rng.random_range(1..classes)) % classes;
                    ReviewVerdict::relabel(&f.id, ClassId::from(wrong), queue.round, SIMULATED_REVIEWER)
                }
            };
            out.push(verdict);
        }
        Ok(out)
    }
}
