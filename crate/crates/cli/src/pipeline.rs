//! Round orchestration. All state lives in the workspace files (manifest,
//! round queues, verdict log, ledger) plus artifacts under the output
//! directory, so any step can be re-run or resumed after an interrupt.

use std::path::PathBuf;

use anyhow::{bail, Context};
use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use workbench_core::balance::{balance_classes, make_folds, restore_from_surplus, select_test_set, FoldPlan};
use workbench_core::dedup::{find_duplicates, DuplicateKind, find_split_leakage, hash_manifest, resolve_duplicates, DedupReport};
use workbench_core::manifest::{load_json, save_json};
use workbench_core::triage::{
    apply_verdicts, auto_head_verdicts, build_round, latest_verdicts, ratio_validated, round_report, FlagKind,
    FlaggedSample, ReviewVerdict, RoundReport, TrainingSummary, TriageConfig, TriageRound,
};
use workbench_core::{DatasetManifest, SizeReport, Split, Status, Workspace};
use workbench_learn::data::load_samples;
use workbench_learn::{infer_losses, train, Classifier, DType, GanBundle, LabeledImage, TrainConfig};

use crate::config::{PipelineConfig, SupervisorMode};
use crate::supervisor::{External, Simulated, Supervisor};

/// Queue number of the initial human-certified seed set.
pub const SEED_ROUND: u32 = 0;

/// Fails when `|train| + |validation| < n_max` does not hold.
pub fn check_budget(manifest: &DatasetManifest) -> anyhow::Result<SizeReport> {
    Ok(manifest.validate_size_constraint().into_result()?)
}

#[derive(Debug, Clone, PartialEq)]
pub enum RoundOutcome {
    Completed(RoundReport),
    /// Flagged samples still lack verdicts; re-run once they are supplied.
    AwaitingVerdicts { round: u32, missing: usize },
    /// No unverified samples are left to triage.
    Exhausted,
}

#[derive(Debug, Clone, PartialEq)]
pub enum RunStatus {
    /// The validated ratio reached the target.
    TargetReached,
    /// `run.max_rounds` rounds were executed.
    RoundLimit,
    AwaitingVerdicts { round: u32, missing: usize },
    Exhausted,
}

/// Certified training data of a round, split into train and holdout.
pub struct RoundData {
    pub train: Vec<LabeledImage>,
    pub validation: Vec<LabeledImage>,
}

pub struct Pipeline {
    config: PipelineConfig,
    workspace: Workspace,
    supervisor: Box<dyn Supervisor>,
}

fn model_path(config: &PipelineConfig, round: u32) -> PathBuf {
    config.paths.output_dir.join(format!("round-{round:03}.model.bin"))
}

impl Pipeline {
    pub fn new(config: PipelineConfig) -> anyhow::Result<Self> {
        config.validate()?;
        let supervisor: Box<dyn Supervisor> = match config.supervisor.mode {
            SupervisorMode::External => Box::new(External),
            SupervisorMode::Simulated => {
                let path = config.supervisor.ground_truth.as_ref().expect("checked by validate");
                Box::new(Simulated::load(path, config.supervisor.noise, config.supervisor.seed)?)
            }
        };
        Ok(Self::with_supervisor(config, supervisor))
    }

    pub fn with_supervisor(config: PipelineConfig, supervisor: Box<dyn Supervisor>) -> Self {
        let workspace = Workspace::new(&config.paths.manifest);
        Pipeline {
            config,
            workspace,
            supervisor,
        }
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn workspace(&self) -> &Workspace {
        &self.workspace
    }

    fn output_dir(&self) -> anyhow::Result<&std::path::Path> {
        let dir = &self.config.paths.output_dir;
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(dir)
    }

    fn save(&self, before: &DatasetManifest, after: &DatasetManifest) -> anyhow::Result<()> {
        check_budget(after)?;
        if before != after {
            self.workspace.save_manifest(after)?;
        }
        Ok(())
    }

    /// Hashes every sample, reports duplicate groups and split leakage, and
    /// rejects all but one member of each exact group (and of near groups
    /// when `dedup.resolve_near` is set).
    pub fn dedup(&self) -> anyhow::Result<DedupReport> {
        let manifest = self.workspace.load_manifest()?;
        let cfg = &self.config.dedup;
        let (hashed, failures) = hash_manifest(&manifest, self.workspace.root(), &cfg.config)?;
        for (id, e) in &failures {
            warn!("dedup: cannot hash {id}: {e}");
        }
        let groups = find_duplicates(&hashed, &cfg.config)?;
        let leakage = find_split_leakage(&hashed, &cfg.config)?;
        let to_resolve: Vec<_> = groups
            .iter()
            .filter(|g| cfg.resolve_near || g.kind != DuplicateKind::Near)
            .cloned()
            .collect();
        let resolved = resolve_duplicates(&hashed, &to_resolve, cfg.policy)?;
        self.save(&manifest, &resolved)?;
        info!("dedup: {} duplicate groups, {} leakage pairs", groups.len(), leakage.len());
        Ok(DedupReport {
            groups,
            leakage,
            unreadable: failures.into_iter().map(|(id, _)| id).collect(),
        })
    }

    /// Creates the seed queue of `seed_set.size` uniformly drawn unverified
    /// samples unless the manifest already holds validated data.
    pub fn ensure_seed_round(&self) -> anyhow::Result<Option<TriageRound>> {
        if let Some(q) = self.workspace.load_queue(SEED_ROUND)? {
            return Ok(Some(q));
        }
        let manifest = self.workspace.load_manifest()?;
        if self.config.seed_set.size == 0 || manifest.records().any(|r| r.status.is_validated()) {
            return Ok(None);
        }
        let mut pool: Vec<_> = manifest.records().filter(|r| r.status == Status::Unverified).collect();
        pool.shuffle(&mut ChaCha8Rng::seed_from_u64(self.config.seed_set.seed));
        let mut flagged: Vec<FlaggedSample> = pool
            .iter()
            .take(self.config.seed_set.size)
            .map(|r| FlaggedSample {
                id: r.id.clone(),
                kind: FlagKind::SeedSample,
                label: r.label,
                loss: None,
                predicted: None,
            })
            .collect();
        flagged.sort_by(|a, b| a.id.cmp(&b.id));
        let queue = TriageRound {
            round: SEED_ROUND,
            flagged,
            training: None,
        };
        self.workspace.save_queue(&queue)?;
        info!("seed round: {} samples queued for review", queue.flagged.len());
        Ok(Some(queue))
    }

    /// Validated records in train or validation, with a seeded holdout of
    /// `seed_set.validation_fraction` drawn from human-verified samples.
    pub fn round_data(&self, manifest: &DatasetManifest, round: u32) -> anyhow::Result<RoundData> {
        let mut human: Vec<&str> = Vec::new();
        let mut synthetic: Vec<&str> = Vec::new();
        for r in manifest.records() {
            if !matches!(r.split, Split::Train | Split::Validation) {
                continue;
            }
            match r.status {
                s if s.is_validated() => human.push(&r.id),
                Status::CertifiedSynthetic => synthetic.push(&r.id),
                _ => {}
            }
        }
        if human.len() < 2 {
            bail!("round {round} needs at least two validated samples to train on, found {}", human.len());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed_set.seed);
        rng.set_stream(u64::from(round));
        human.shuffle(&mut rng);
        let n_val = ((human.len() as f64 * self.config.seed_set.validation_fraction).round() as usize).clamp(1, human.len() - 1);
        let root = self.workspace.root();
        let (validation, f1) = load_samples(manifest, root, human[..n_val].iter().copied());
        let (train, f2) = load_samples(manifest, root, human[n_val..].iter().chain(&synthetic).copied());
        if let Some(f) = f1.iter().chain(&f2).next() {
            bail!("cannot load training sample {}: {}", f.id, f.message);
        }
        Ok(RoundData { train, validation })
    }

    /// Trains the auxiliary classifier of `round` and saves it under the
    /// output directory.
    pub fn train_round(&self, manifest: &DatasetManifest, round: u32) -> anyhow::Result<(Classifier, TrainingSummary)> {
        let data = self.round_data(manifest, round)?;
        let model_config = self.config.model.model_config(manifest.num_classes());
        let model = Classifier::new(model_config, DType::F32, self.config.model.seed.wrapping_add(u64::from(round)))?;
        let train_config = TrainConfig {
            n_max: Some(manifest.n_max),
            ..self.config.train
        };
        info!(
            "round {round}: training {:?} on {} + {} samples",
            self.config.model.architecture,
            data.train.len(),
            data.validation.len()
        );
        let (model, history) = train(model, &data.train, &data.validation, &train_config)?;
        let best = history.returned();
        let summary = TrainingSummary {
            train_size: data.train.len(),
            validation_size: data.validation.len(),
            train_accuracy: best.map_or(0.0, |e| e.train_accuracy),
            validation_accuracy: best.map_or(0.0, |e| e.validation_accuracy),
        };
        self.output_dir()?;
        model.save(&model_path(&self.config, round))?;
        Ok((model, summary))
    }

    /// Verdicts still missing for `queue`.
    fn pending<'q>(&self, queue: &'q TriageRound) -> anyhow::Result<Vec<&'q FlaggedSample>> {
        let log = self.workspace.load_verdicts()?;
        let latest = latest_verdicts(&log, queue.round);
        Ok(queue.flagged.iter().filter(|f| !latest.contains_key(f.id.as_str())).collect())
    }

    /// Applies verdicts and records them in the log.
    pub fn apply(&self, queue: &TriageRound, verdicts: &[ReviewVerdict]) -> anyhow::Result<DatasetManifest> {
        let manifest = self.workspace.load_manifest()?;
        let updated = apply_verdicts(&manifest, queue, verdicts)?;
        self.save(&manifest, &updated)?;
        if let Err(e) = self.workspace.append_verdicts(verdicts) {
            self.workspace.save_manifest(&manifest)?;
            return Err(e.into());
        }
        Ok(updated)
    }

    /// Asks the supervisor for every missing verdict of `queue`; returns how
    /// many are still missing afterwards.
    fn collect_verdicts(&mut self, queue: &TriageRound) -> anyhow::Result<usize> {
        let pending = self.pending(queue)?;
        if pending.is_empty() {
            return Ok(0);
        }
        let manifest = self.workspace.load_manifest()?;
        let verdicts = self.supervisor.review(&manifest, queue, &pending)?;
        if !verdicts.is_empty() {
            self.apply(queue, &verdicts)?;
        }
        Ok(self.pending(queue)?.len())
    }

    /// Completes the seed round if it exists. `Some(missing)` means paused.
    pub fn run_seed_round(&mut self) -> anyhow::Result<Option<usize>> {
        let Some(queue) = self.ensure_seed_round()? else {
            return Ok(None);
        };
        match self.collect_verdicts(&queue)? {
            0 => Ok(None),
            missing => Ok(Some(missing)),
        }
    }

    fn triage_config(&self, pool: usize) -> TriageConfig {
        // tail first: the suspects are where review pays off
        let l = self.config.triage.l.min(pool);
        let k = self.config.triage.k.min(pool - l);
        TriageConfig { k, l, ..self.config.triage }
    }

    /// train-aux → infer → triage → review → apply for one round. Steps
    /// already recorded on disk are skipped.
    pub fn run_round(&mut self, round: u32) -> anyhow::Result<RoundOutcome> {
        if round == SEED_ROUND {
            bail!("round numbers start at 1; the seed set is reviewed by run_seed_round");
        }
        if let Some(missing) = self.run_seed_round()? {
            return Ok(RoundOutcome::AwaitingVerdicts {
                round: SEED_ROUND,
                missing,
            });
        }
        let queue = match self.workspace.load_queue(round)? {
            Some(q) => q,
            None => {
                let manifest = self.workspace.load_manifest()?;
                check_budget(&manifest)?;
                let pool: Vec<&str> = manifest
                    .records()
                    .filter(|r| r.status == Status::Unverified)
                    .map(|r| r.id.as_str())
                    .collect();
                if pool.is_empty() {
                    return Ok(RoundOutcome::Exhausted);
                }
                let (model, summary) = self.train_round(&manifest, round)?;
                let (samples, failures) = load_samples(&manifest, self.workspace.root(), pool.iter().copied());
                let mut report = infer_losses(&model, &samples)?;
                report.failures.extend(failures);
                for f in &report.failures {
                    warn!("round {round}: no loss for {}: {}", f.id, f.message);
                }
                let scored = report.entries.len();
                if scored == 0 {
                    bail!("round {round}: inference produced no losses");
                }
                let triage = self.triage_config(scored);
                let (updated, queue) = build_round(&manifest, &report, &triage, round, Some(summary))?;
                self.save(&manifest, &updated)?;
                self.workspace.save_queue(&queue)?;
                info!(
                    "round {round}: flagged {} head + {} tail of {scored} (train acc {:.3}, val acc {:.3})",
                    triage.k, triage.l, summary.train_accuracy, summary.validation_accuracy
                );
                if !triage.require_human_confirmation_of_head {
                    self.apply(&queue, &auto_head_verdicts(&queue))?;
                }
                queue
            }
        };
        let missing = self.collect_verdicts(&queue)?;
        if missing > 0 {
            return Ok(RoundOutcome::AwaitingVerdicts { round, missing });
        }
        let manifest = self.workspace.load_manifest()?;
        check_budget(&manifest)?;
        let mut ledger = self.workspace.load_ledger()?;
        if let Some(done) = ledger.iter().find(|r| r.round == round) {
            return Ok(RoundOutcome::Completed(*done));
        }
        let log = self.workspace.load_verdicts()?;
        let report = round_report(&manifest, &queue, &log, self.config.supervisor.rule)?;
        ledger.push(report);
        ledger.sort_by_key(|r| r.round);
        self.workspace.save_ledger(&ledger)?;
        info!(
            "round {round}: pipeline accuracy {:.3}, validated {:.3}",
            report.pipeline_accuracy, report.ratio_validated
        );
        Ok(RoundOutcome::Completed(report))
    }

    /// The round to work on next: the newest unfinished round, or the one
    /// after the newest finished round.
    pub fn next_round(&self) -> anyhow::Result<u32> {
        let ledger = self.workspace.load_ledger()?;
        let last_done = ledger.iter().map(|r| r.round).max().unwrap_or(0);
        Ok(last_done + 1)
    }

    /// Runs rounds until the validated ratio reaches `target_ratio`, the
    /// round limit is hit, or the pipeline has to wait for verdicts.
    pub fn run_until_validated(&mut self, target_ratio: f64) -> anyhow::Result<(RunStatus, Vec<RoundReport>)> {
        if !(target_ratio > 0.0 && target_ratio <= 1.0) {
            bail!("target ratio must be in (0, 1]");
        }
        let mut done = Vec::new();
        if let Some(missing) = self.run_seed_round()? {
            return Ok((
                RunStatus::AwaitingVerdicts {
                    round: SEED_ROUND,
                    missing,
                },
                done,
            ));
        }
        loop {
            let manifest = self.workspace.load_manifest()?;
            let ratio = ratio_validated(&manifest);
            if ratio >= target_ratio {
                return Ok((RunStatus::TargetReached, done));
            }
            if done.len() as u32 >= self.config.run.max_rounds {
                return Ok((RunStatus::RoundLimit, done));
            }
            let round = self.next_round()?;
            match self.run_round(round)? {
                RoundOutcome::Completed(report) => {
                    let log = self.workspace.load_verdicts()?;
                    if latest_verdicts(&log, round).is_empty() {
                        bail!("round {round} received no verdicts; halting at validated ratio {ratio:.4}");
                    }
                    done.push(report);
                }
                RoundOutcome::AwaitingVerdicts { round, missing } => {
                    return Ok((RunStatus::AwaitingVerdicts { round, missing }, done))
                }
                RoundOutcome::Exhausted => return Ok((RunStatus::Exhausted, done)),
            }
        }
    }

    /// Balances classes once: skipped when the manifest already has surplus.
    pub fn balance(&self) -> anyhow::Result<DatasetManifest> {
        let manifest = self.workspace.load_manifest()?;
        if manifest.records().any(|r| r.split == Split::Surplus || r.surplus_rank.is_some()) {
            return Ok(manifest);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.balance.seed);
        let balanced = balance_classes(&manifest, &mut rng)?;
        let restored = restore_from_surplus(&balanced, self.config.balance.restore, &mut rng)?;
        self.save(&manifest, &restored)?;
        Ok(restored)
    }

    pub fn folds_path(&self) -> PathBuf {
        self.config.paths.output_dir.join("folds.json")
    }

    /// Test selection and fold planning; reuses an existing plan.
    pub fn split(&self) -> anyhow::Result<FoldPlan> {
        let path = self.folds_path();
        if path.exists() {
            return Ok(load_json(&path)?);
        }
        let cfg = self.config.folds;
        let manifest = self.workspace.load_manifest()?;
        let with_test = if manifest.records().any(|r| r.split == Split::Test) {
            manifest.clone()
        } else {
            select_test_set(&manifest, cfg.test_size, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?
        };
        let plan = make_folds(&with_test, cfg.folds, cfg.seed)?;
        for (i, s) in plan.size_reports(with_test.n_max).into_iter().enumerate() {
            s.into_result().with_context(|| format!("fold {i}"))?;
        }
        self.save(&manifest, &with_test)?;
        self.output_dir()?;
        save_json(&plan, &path)?;
        Ok(plan)
    }

    pub fn bundle_path(&self) -> PathBuf {
        self.config.paths.output_dir.join("gan.bundle")
    }

    /// Latest round classifier, or a fresh one trained on the current data.
    pub fn final_classifier(&self) -> anyhow::Result<Classifier> {
        let ledger = self.workspace.load_ledger()?;
        if let Some(last) = ledger.iter().map(|r| r.round).max() {
            let path = model_path(&self.config, last);
            if path.exists() {
                return Ok(Classifier::load(&path)?);
            }
        }
        let manifest = self.workspace.load_manifest()?;
        Ok(self.train_round(&manifest, self.next_round()?)?.0)
    }

    /// Trains the synthesizer against the frozen classifier and exports
    /// `gan.per_class` samples per class. Both halves are skipped when their
    /// output already exists.
    pub fn synthesize(&self) -> anyhow::Result<Vec<String>> {
        let path = self.bundle_path();
        let bundle = if path.exists() {
            GanBundle::load(&path)?
        } else {
            let manifest = self.workspace.load_manifest()?;
            let ids: Vec<&str> = manifest
                .records()
                .filter(|r| r.split == Split::Train && r.status.is_validated())
                .map(|r| r.id.as_str())
                .collect();
            let (data, failures) = load_samples(&manifest, self.workspace.root(), ids);
            if let Some(f) = failures.first() {
                bail!("cannot load {}: {}", f.id, f.message);
            }
            let gan = &self.config.gan;
            let (bundle, history) =
                workbench_learn::train_gan(&data, self.final_classifier()?, gan.generator, gan.discriminator, &gan.train)?;
            if let Some(it) = history.aborted_at {
                warn!("GAN training diverged at iteration {it}; kept the last finite weights");
            }
            self.output_dir()?;
            bundle.save(&path)?;
            bundle
        };
        let mut manifest = self.workspace.load_manifest()?;
        if self.config.gan.per_class == 0 || manifest.records().any(|r| r.status == Status::CertifiedSynthetic) {
            return Ok(Vec::new());
        }
        let before = manifest.clone();
        let mut ids = Vec::new();
        for c in 0..manifest.num_classes() {
            ids.extend(workbench_learn::synthesize(
                &bundle,
                &mut manifest,
                self.workspace.root(),
                c.into(),
                self.config.gan.per_class,
                &self.config.gan.sampler,
                self.config.gan.sample_seed,
            )?);
        }
        self.save(&before, &manifest)?;
        Ok(ids)
    }

    pub fn report_path(&self) -> PathBuf {
        self.config.paths.output_dir.join("report.md")
    }

    /// The whole pipeline: dedup, seed review, triage rounds, balance,
    /// split, synthesis and the report.
    pub fn run(&mut self) -> anyhow::Result<RunStatus> {
        if self.config.dedup.enabled {
            self.dedup()?;
        }
        let (status, _) = self.run_until_validated(self.config.run.target_ratio)?;
        if let RunStatus::AwaitingVerdicts { round, missing } = status {
            info!("paused: round {round} awaits {missing} verdicts");
            return Ok(status);
        }
        if self.config.balance.enabled {
            self.balance()?;
        }
        if self.config.folds.enabled {
            self.split()?;
        }
        if self.config.gan.enabled {
            self.synthesize()?;
        }
        let summary = crate::report::Summary::collect(&self.workspace)?;
        self.output_dir()?;
        std::fs::write(self.report_path(), summary.to_markdown())?;
        Ok(status)
    }
}
