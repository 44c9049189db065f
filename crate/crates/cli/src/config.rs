//! The pipeline configuration document. Every `--config` flag takes this
//! same TOML file; each subcommand reads the tables it needs.
//!
//! ```toml
//! [paths]
//! manifest = "work/manifest.jsonl"
//! output_dir = "work/out"
//!
//! [triage]
//! k = 200
//! l = 50
//!
//! [model]
//! architecture = "small_cnn"
//!
//! [train]
//! epochs = 40
//!
//! [supervisor]
//! mode = "simulated"
//! ground_truth = "work/ground_truth.json"
//! ```

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use workbench_core::augment::AugmentConfig;
use workbench_core::dedup::{DedupConfig, ResolvePolicy};
use workbench_core::objective::{GanTrainConfig, SamplerConfig};
use workbench_core::triage::{ConfirmationRule, TriageConfig};
use workbench_learn::model::RESNET_CUT;
use workbench_learn::{Architecture, DiscriminatorSpec, GeneratorSpec, ModelConfig, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub manifest: PathBuf,
    /// Models, bundles, fold plans and reports.
    pub output_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            manifest: PathBuf::from("manifest.jsonl"),
            output_dir: PathBuf::from("out"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub architecture: Architecture,
    pub seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            architecture: Architecture::TruncatedResnet50,
            seed: 0,
        }
    }
}

impl ModelSection {
    pub fn model_config(&self, num_classes: usize) -> ModelConfig {
        ModelConfig {
            architecture: self.architecture,
            input_size: (32, 32, 1),
            num_classes,
            truncation_layer: RESNET_CUT.into(),
        }
    }
}

/// Initial human-certified set and the per-round holdout.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeedSetConfig {
    pub size: usize,
    /// Share of the certified data held out for validation each round.
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for SeedSetConfig {
    fn default() -> Self {
        SeedSetConfig {
            size: 200,
            validation_fraction: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SupervisorMode {
    /// Verdicts come from the review service or `workbench apply`; the
    /// orchestrator pauses until every flagged sample has one.
    External,
    /// Ground-truth backed verdicts.
    Simulated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SupervisorConfig {
    pub mode: SupervisorMode,
    /// JSON ground truth as written by `workbench synth-corpus`.
    pub ground_truth: Option<PathBuf>,
    /// Probability that a simulated verdict is wrong.
    pub noise: f64,
    pub seed: u64,
    pub rule: ConfirmationRule,
}

impl Default for SupervisorConfig {
    fn default() -> Self {
        SupervisorConfig {
            mode: SupervisorMode::External,
            ground_truth: None,
            noise: 0.0,
            seed: 0,
            rule: ConfirmationRule::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DedupSection {
    pub enabled: bool,
    pub policy: ResolvePolicy,
    /// Also reject near duplicates; otherwise they are only reported.
    pub resolve_near: bool,
    #[serde(flatten)]
    pub config: DedupConfig,
}

impl Default for DedupSection {
    fn default() -> Self {
        DedupSection {
            enabled: true,
            policy: ResolvePolicy::KeepFirst,
            resolve_near: false,
            config: DedupConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FoldConfig {
    pub enabled: bool,
    pub folds: usize,
    pub test_size: usize,
    pub seed: u64,
}

impl Default for FoldConfig {
    fn default() -> Self {
        FoldConfig {
            enabled: true,
            folds: 8,
            test_size: 0,
            seed: 13,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BalanceConfig {
    pub enabled: bool,
    /// Surplus samples moved back to train after balancing.
    pub restore: usize,
    pub seed: u64,
}

impl Default for BalanceConfig {
    fn default() -> Self {
        BalanceConfig {
            enabled: true,
            restore: 0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GanSection {
    pub enabled: bool,
    pub generator: GeneratorSpec,
    pub discriminator: DiscriminatorSpec,
    pub train: GanTrainConfig,
    pub sampler: SamplerConfig,
    /// Synthetic samples per class; zero disables sampling.
    pub per_class: usize,
    pub sample_seed: u64,
}

impl Default for GanSection {
    fn default() -> Self {
        GanSection {
            enabled: false,
            generator: GeneratorSpec::default(),
            discriminator: DiscriminatorSpec::default(),
            train: GanTrainConfig::default(),
            sampler: SamplerConfig::default(),
            per_class: 0,
            sample_seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Upper bound on triage rounds in one `run`.
    pub max_rounds: u32,
    /// Stop once the validated ratio reaches this value.
    pub target_ratio: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            max_rounds: 5,
            target_ratio: 1.0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub paths: Paths,
    pub dedup: DedupSection,
    pub seed_set: SeedSetConfig,
    pub triage: TriageConfig,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub supervisor: SupervisorConfig,
    pub balance: BalanceConfig,
    pub folds: FoldConfig,
    pub gan: GanSection,
    pub run: RunConfig,
}

impl PipelineConfig {
    /// Parses a config file; relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut config: PipelineConfig = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut config.paths.manifest);
        resolve(&mut config.paths.output_dir);
        if let Some(p) = config.supervisor.ground_truth.as_mut() {
            resolve(p);
        }
        Ok(config)
    }

    /// Loads `path` when given, otherwise returns the defaults.
    pub fn load_or_default(path: Option<&Path>) -> anyhow::Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    pub fn augment(&self) -> &AugmentConfig {
        &self.train.augment
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.dedup.config.validate()?;
        self.train.validate()?;
        self.gan.train.validate()?;
        self.gan.generator.validate()?;
        self.gan.discriminator.validate()?;
        if !(self.seed_set.validation_fraction > 0.0 && self.seed_set.validation_fraction < 1.0) {
            bail!("seed_set.validation_fraction must be in (0, 1)");
        }
        if self.triage.k + self.triage.l == 0 {
            bail!("triage.k + triage.l must be positive");
        }
        if !(self.run.target_ratio > 0.0 && self.run.target_ratio <= 1.0) {
            bail!("run.target_ratio must be in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.supervisor.noise) {
            bail!("supervisor.noise must be a probability");
        }
        if self.supervisor.mode == SupervisorMode::Simulated && self.supervisor.ground_truth.is_none() {
            bail!("the simulated supervisor needs supervisor.ground_truth");
        }
        if self.folds.folds < 2 {
            bail!("folds.folds must be at least 2");
        }
        Ok(())
    }
}
