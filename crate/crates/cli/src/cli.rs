//! Argument parsing and subcommand dispatch for the `workbench` binary.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use workbench_core::augment::augment;
use workbench_core::balance::{make_folds, restore_from_surplus, select_test_set};
use workbench_core::dedup::{digest_bytes, find_duplicates, find_split_leakage, hash_manifest, resolve_duplicates, DedupReport, ResolvePolicy};
use workbench_core::glyphs::write_corpus;
use workbench_core::manifest::{load_json, save_json};
use workbench_core::objective::SamplerConfig;
use workbench_core::triage::{build_round, round_stats, ConfirmationRule, LossReport, ReviewVerdict, TriageConfig};
use workbench_core::{ClassId, DatasetManifest, Image, SampleRecord, Workspace};
use workbench_learn::data::load_samples;
use workbench_learn::{infer_losses, Classifier, GanBundle};
use workbench_review::ReviewService;

use crate::config::PipelineConfig;
use crate::pipeline::{check_budget, Pipeline, RunStatus};
use crate::report::Summary;

#[derive(Debug, Parser)]
#[command(name = "workbench", version, about = "Dataset curation workbench")]
pub struct Cli {
    /// Log level filter (error, warn, info, debug, trace).
    #[arg(long, global = true, default_value = "info")]
    pub log: String,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic glyph corpus with known ground truth.
    SynthCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2000)]
        count: usize,
        /// Share of samples given a wrong label.
        #[arg(long, default_value_t = 0.1)]
        flip: f64,
        #[arg(long, default_value_t = 10_000)]
        n_max: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Build a manifest from `DIR/<class>/*.png`; image paths are stored
    /// relative to DIR and the manifest is written to DIR/manifest.jsonl.
    Import {
        #[arg(long)]
        dir: PathBuf,
        /// Class names in index order; defaults to the sorted subdirectories.
        #[arg(long, value_delimiter = ',')]
        classes: Option<Vec<String>>,
        #[arg(long, default_value_t = 10_000)]
        n_max: usize,
    },
    /// Find exact and near duplicates and optionally resolve them.
    Dedup {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 6)]
        threshold: u32,
        /// Reject all but one member of every group.
        #[arg(long, value_parser = parse_policy)]
        apply: Option<ResolvePolicy>,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Write augmented copies of every PNG in a directory.
    Augment {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        multiplier: usize,
    },
    /// Train the auxiliary classifier on the validated data.
    TrainAux {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 1)]
        round: u32,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-sample losses of the unverified samples (all samples with --all).
    Infer {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        all: bool,
    },
    /// Flag the head and tail of a loss ranking, or print live round stats.
    Triage {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, required_unless_present = "report")]
        losses: Option<PathBuf>,
        #[arg(long, default_value_t = 500)]
        k: usize,
        #[arg(long, default_value_t = 100)]
        l: usize,
        /// Defaults to the round after the newest queue (with --report, the newest).
        #[arg(long)]
        round: Option<u32>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Print the round's stats as JSON, the same payload as the review service.
        #[arg(long)]
        report: bool,
        #[arg(long, value_parser = parse_rule, default_value = "any_correction")]
        rule: ConfirmationRule,
    },
    /// Apply a JSON array (or JSON lines) of verdicts.
    Apply {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        verdicts: PathBuf,
    },
    /// Move excess samples of large classes to the surplus pool.
    Balance {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Surplus samples to move back into train afterwards.
        #[arg(long, default_value_t = 0)]
        restore: usize,
    },
    /// Select a test set and plan stratified folds.
    Split {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 8)]
        folds: usize,
        #[arg(long, default_value_t = 0)]
        test_size: usize,
        #[arg(long, default_value_t = 13)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the conditional synthesizer against a frozen classifier.
    GanTrain {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        classifier: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Add synthetic samples of every class to the manifest.
    GanSample {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        per_class: usize,
        /// Zero disables truncation.
        #[arg(long, default_value_t = 0.7)]
        truncation: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Serve the review API.
    ReviewServe {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, value_parser = parse_rule, default_value = "any_correction")]
        rule: ConfirmationRule,
    },
    /// Run the whole pipeline; resumes where a previous run stopped.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Write the round table and dataset summary.
    Report {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_enum<T: serde::de::DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.into())).map_err(|_| format!("unknown value {s:?}"))
}

fn parse_policy(s: &str) -> Result<ResolvePolicy, String> {
    parse_enum(s)
}

fn parse_rule(s: &str) -> Result<ConfirmationRule, String> {
    parse_enum(s)
}

fn print_json<T: serde::Serialize>(value: &T) -> anyhow::Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

/// Reads verdicts from a JSON array or from JSON lines.
pub fn read_verdicts(path: &Path) -> anyhow::Result<Vec<ReviewVerdict>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    if text.trim_start().starts_with('[') {
        return serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()));
    }
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).with_context(|| format!("{}:{}", path.display(), i + 1)))
        .collect()
}

/// Applies verdicts grouped by round; each group is all or nothing and is
/// appended to the verdict log.
pub fn apply_verdict_file(manifest_path: &Path, verdicts: Vec<ReviewVerdict>) -> anyhow::Result<DatasetManifest> {
    let ws = Workspace::new(manifest_path);
    let mut by_round: BTreeMap<u32, Vec<ReviewVerdict>> = BTreeMap::new();
    for v in verdicts {
        by_round.entry(v.round).or_default().push(v);
    }
    let mut manifest = ws.load_manifest()?;
    for (round, group) in by_round {
        let queue = ws.load_queue(round)?.with_context(|| format!("no triage queue for round {round}"))?;
        let updated = workbench_core::triage::apply_verdicts(&manifest, &queue, &group)?;
        ws.save_manifest(&updated)?;
        if let Err(e) = ws.append_verdicts(&group) {
            ws.save_manifest(&manifest)?;
            return Err(e.into());
        }
        info!("round {round}: applied {} verdicts", group.len());
        manifest = updated;
    }
    Ok(manifest)
}

fn import(dir: &Path, classes: Option<Vec<String>>, n_max: usize) -> anyhow::Result<DatasetManifest> {
    let classes = match classes {
        Some(c) => c,
        None => {
            let mut names = Vec::new();
            for e in std::fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
                let e = e?;
                if e.file_type()?.is_dir() {
                    names.push(e.file_name().to_string_lossy().into_owned());
                }
            }
            names.sort();
            names
        }
    };
    let mut manifest = DatasetManifest::new(classes.clone(), n_max)?;
    for (c, name) in classes.iter().enumerate() {
        let class_dir = dir.join(name);
        let mut files: Vec<PathBuf> = std::fs::read_dir(&class_dir)
            .with_context(|| format!("reading {}", class_dir.display()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
            .collect();
        files.sort();
        for f in files {
            let bytes = std::fs::read(&f)?;
            let stem = f.file_stem().unwrap_or_default().to_string_lossy();
            let rel = format!("{name}/{}", f.file_name().unwrap_or_default().to_string_lossy());
            manifest.insert(SampleRecord::new(format!("{name}-{stem}"), rel, digest_bytes(&bytes), ClassId::from(c)))?;
        }
    }
    Ok(manifest)
}

fn augment_dir(input: &Path, out: &Path, config: &PipelineConfig, seed: u64, multiplier: usize) -> anyhow::Result<usize> {
    let cfg = workbench_core::augment::AugmentConfig {
        seed,
        ..*config.augment()
    };
    cfg.validate()?;
    std::fs::create_dir_all(out)?;
    let mut files: Vec<PathBuf> = std::fs::read_dir(input)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    let mut written = 0;
    for (i, f) in files.iter().enumerate() {
        let img = Image::load(f)?;
        let stem = f.file_stem().unwrap_or_default().to_string_lossy();
        for k in 0..multiplier {
            let counter = (i * multiplier + k) as u64;
            augment(&img, &cfg, counter).save_png(&out.join(format!("{stem}.aug-s{seed}-{k}.png")))?;
            written += 1;
        }
    }
    Ok(written)
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::SynthCorpus {
            out,
            count,
            flip,
            n_max,
            seed,
        } => {
            let (manifest, truth) = write_corpus(&out, count, flip, n_max, seed)?;
            manifest.save(out.join("manifest.jsonl"))?;
            save_json(&truth, out.join("ground_truth.json"))?;
            info!("wrote {} samples ({} flipped) to {}", manifest.len(), truth.flipped.len(), out.display());
        }
        Command::Import { dir, classes, n_max } => {
            let manifest = import(&dir, classes, n_max)?;
            manifest.save(dir.join("manifest.jsonl"))?;
            info!("imported {} samples", manifest.len());
        }
        Command::Dedup {
            manifest,
            threshold,
            apply,
            report,
        } => {
            let ws = Workspace::new(&manifest);
            let config = workbench_core::dedup::DedupConfig {
                hamming_threshold: threshold,
                ..Default::default()
            };
            let m = ws.load_manifest()?;
            let (hashed, failures) = hash_manifest(&m, ws.root(), &config)?;
            let groups = find_duplicates(&hashed, &config)?;
            let leakage = find_split_leakage(&hashed, &config)?;
            let updated = match apply {
                Some(policy) => resolve_duplicates(&hashed, &groups, policy)?,
                None => hashed,
            };
            check_budget(&updated)?;
            if updated != m {
                ws.save_manifest(&updated)?;
            }
            let out = DedupReport {
                groups,
                leakage,
                unreadable: failures.into_iter().map(|(id, _)| id).collect(),
            };
            match report {
                Some(path) => save_json(&out, path)?,
                None => print_json(&out)?,
            }
        }
        Command::Augment {
            input,
            out,
            config,
            seed,
            multiplier,
        } => {
            let config = PipelineConfig::load_or_default(config.as_deref())?;
            let n = augment_dir(&input, &out, &config, seed, multiplier)?;
            info!("wrote {n} augmented images");
        }
        Command::TrainAux {
            manifest,
            round,
            config,
            out,
        } => {
            let mut config = PipelineConfig::load_or_default(config.as_deref())?;
            config.paths.manifest = manifest;
            let pipeline = Pipeline::with_supervisor(config, Box::new(crate::supervisor::External));
            let m = pipeline.workspace().load_manifest()?;
            let (model, summary) = pipeline.train_round(&m, round)?;
            model.save(&out)?;
            print_json(&summary)?;
        }
        Command::Infer {
            model,
            manifest,
            out,
            all,
        } => {
            let ws = Workspace::new(&manifest);
            let m = ws.load_manifest()?;
            let classifier = Classifier::load(&model)?;
            let ids: Vec<&str> = m
                .records()
                .filter(|r| all || r.status == workbench_core::Status::Unverified)
                .map(|r| r.id.as_str())
                .collect();
            let (samples, failures) = load_samples(&m, ws.root(), ids);
            let mut report = infer_losses(&classifier, &samples)?;
            report.failures.extend(failures);
            save_json(&report, out)?;
        }
        Command::Triage {
            manifest,
            losses,
            k,
            l,
            round,
            out,
            report,
            rule,
        } => {
            let ws = Workspace::new(&manifest);
            let rounds = ws.rounds()?;
            if report {
                let round = round.or(rounds.last().copied()).context("no triage rounds yet")?;
                let queue = ws.load_queue(round)?.with_context(|| format!("no triage queue for round {round}"))?;
                let m = ws.load_manifest()?;
                print_json(&round_stats(&m, &queue, &ws.load_verdicts()?, rule))?;
                return Ok(());
            }
            let round = round.unwrap_or_else(|| rounds.last().map_or(1, |r| r + 1).max(1));
            if ws.load_queue(round)?.is_some() {
                bail!("round {round} already has a triage queue");
            }
            let losses: LossReport = load_json(losses.expect("required by clap"))?;
            let m = ws.load_manifest()?;
            let config = TriageConfig {
                k,
                l,
                require_human_confirmation_of_head: true,
            };
            let (updated, queue) = build_round(&m, &losses, &config, round, None)?;
            ws.save_manifest(&updated)?;
            ws.save_queue(&queue)?;
            if let Some(out) = out {
                save_json(&queue, out)?;
            }
            info!("round {round}: flagged {} samples", queue.flagged.len());
        }
        Command::Apply { manifest, verdicts } => {
            apply_verdict_file(&manifest, read_verdicts(&verdicts)?)?;
        }
        Command::Balance { manifest, seed, restore } => {
            let ws = Workspace::new(&manifest);
            let m = ws.load_manifest()?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let balanced = workbench_core::balance::balance_classes(&m, &mut rng)?;
            let restored = restore_from_surplus(&balanced, restore, &mut rng)?;
            check_budget(&restored)?;
            ws.save_manifest(&restored)?;
            print_json(&restored.class_histogram(workbench_core::Split::Train))?;
        }
        Command::Split {
            manifest,
            folds,
            test_size,
            seed,
            out,
        } => {
            let ws = Workspace::new(&manifest);
            let m = ws.load_manifest()?;
            let with_test = select_test_set(&m, test_size, &mut ChaCha8Rng::seed_from_u64(seed))?;
            let plan = make_folds(&with_test, folds, seed)?;
            for (i, s) in plan.size_reports(with_test.n_max).into_iter().enumerate() {
                s.into_result().with_context(|| format!("fold {i}"))?;
            }
            ws.save_manifest(&with_test)?;
            save_json(&plan, out)?;
        }
        Command::GanTrain {
            manifest,
            classifier,
            config,
            out,
        } => {
            let config = PipelineConfig::load_or_default(config.as_deref())?;
            let ws = Workspace::new(&manifest);
            let m = ws.load_manifest()?;
            let ids: Vec<&str> = m
                .records()
                .filter(|r| r.split == workbench_core::Split::Train && r.status.is_validated())
                .map(|r| r.id.as_str())
                .collect();
            let (data, failures) = load_samples(&m, ws.root(), ids);
            if let Some(f) = failures.first() {
                bail!("cannot load {}: {}", f.id, f.message);
            }
            let gan = &config.gan;
            let (bundle, history) =
                workbench_learn::train_gan(&data, Classifier::load(&classifier)?, gan.generator, gan.discriminator, &gan.train)?;
            bundle.save(&out)?;
            print_json(&history)?;
        }
        Command::GanSample {
            bundle,
            manifest,
            per_class,
            truncation,
            seed,
        } => {
            let ws = Workspace::new(&manifest);
            let mut m = ws.load_manifest()?;
            let bundle = GanBundle::load(&bundle)?;
            let sampler = SamplerConfig {
                truncation: (truncation > 0.0).then_some(truncation),
                ..SamplerConfig::default()
            };
            let mut ids = Vec::new();
            for c in 0..m.num_classes() {
                ids.extend(workbench_learn::synthesize(&bundle, &mut m, ws.root(), c.into(), per_class, &sampler, seed)?);
            }
            ws.save_manifest(&m)?;
            info!("added {} synthetic samples", ids.len());
        }
        Command::ReviewServe {
            manifest,
            port,
            host,
            rule,
        } => {
            let service = ReviewService::open(manifest, rule)?;
            let addr: std::net::SocketAddr = format!("{host}:{port}").parse().context("bad host/port")?;
            tokio::runtime::Runtime::new()?.block_on(service.serve(addr))?;
        }
        Command::Run { config } => {
            let config = PipelineConfig::load(&config)?;
            let mut pipeline = Pipeline::new(config)?;
            let status = pipeline.run()?;
            if let RunStatus::AwaitingVerdicts { round, missing } = status {
                eprintln!(
                    "round {round} is waiting for {missing} verdicts; supply them with `workbench apply` or the review service, then run again"
                );
            }
        }
        Command::Report { config, out } => {
            let config = PipelineConfig::load(&config)?;
            let ws = Workspace::new(&config.paths.manifest);
            let md = Summary::collect(&ws)?.to_markdown();
            match out {
                Some(path) => std::fs::write(&path, md).with_context(|| format!("writing {}", path.display()))?,
                None => print!("{md}"),
            }
        }
    }
    Ok(())
}
