//! Loss-ranked triage: pick the confident head and the suspect tail of the
//! unverified pool, apply the supervisor's verdicts and score the round.
//!
//! A head sample counts as *confirmed* when the supervisor certifies it. A
//! tail sample counts as confirmed under [`ConfirmationRule::AnyCorrection`]
//! when the supervisor took any corrective action (reject, ambiguous or
//! relabel). [`ConfirmationRule::SuggestedLabelMatch`] is stricter and only
//! accepts a relabel when it agrees with the model's predicted class.

use std::collections::HashMap;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifest::{ClassId, DatasetManifest, Split, Status};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TriageConfig {
    pub k: usize,
    pub l: usize,
    pub require_human_confirmation_of_head: bool,
}

impl Default for TriageConfig {
    fn default() -> Self {
        TriageConfig {
            k: 500,
            l: 100,
            require_human_confirmation_of_head: true,
        }
    }
}

/// One classifier assessment of one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossEntry {
    pub id: String,
    pub label: ClassId,
    pub loss: f64,
    pub predicted: ClassId,
    pub confidence: f64,
    pub probabilities: Vec<f64>,
}

impl LossEntry {
    /// Builds an entry from a probability vector; `loss = -ln p[label]`.
    pub fn from_probabilities(id: impl Into<String>, label: ClassId, probabilities: Vec<f64>) -> Self {
        let (predicted, confidence) = probabilities
            .iter()
            .copied()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, p)| if p > best.1 { (i, p) } else { best });
        let loss = -probabilities[label.index()].max(f64::MIN_POSITIVE).ln();
        LossEntry {
            id: id.into(),
            label,
            loss,
            predicted: ClassId::from(predicted),
            confidence,
            probabilities,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossFailure {
    pub id: String,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub entries: Vec<LossEntry>,
    /// Samples that could not be scored; never ranked.
    #[serde(default)]
    pub failures: Vec<LossFailure>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlagKind {
    ConfidentHead,
    SuspectTail,
    /// Part of the randomly drawn seed set reviewed before the first round.
    SeedSample,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlaggedSample {
    pub id: String,
    pub kind: FlagKind,
    pub label: ClassId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predicted: Option<ClassId>,
}

/// Sizes and accuracies of the auxiliary model trained for a round.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub train_size: usize,
    pub validation_size: usize,
    pub train_accuracy: f64,
    pub validation_accuracy: f64,
}

/// Everything flagged for review in one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriageRound {
    pub round: u32,
    pub flagged: Vec<FlaggedSample>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub training: Option<TrainingSummary>,
}

impl TriageRound {
    pub fn find(&self, id: &str) -> Option<&FlaggedSample> {
        self.flagged.iter().find(|f| f.id == id)
    }

    pub fn ids_of(&self, kind: FlagKind) -> impl Iterator<Item = &str> {
        self.flagged.iter().filter(move |f| f.kind == kind).map(|f| f.id.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerdictAction {
    Certify,
    Relabel,
    Reject,
    Ambiguous,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewVerdict {
    pub sample_id: String,
    pub action: VerdictAction,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub new_label: Option<ClassId>,
    pub reviewer: String,
    pub round: u32,
    pub timestamp: DateTime<Utc>,
    /// Record version the reviewer saw; a mismatch is a conflict.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expected_version: Option<u64>,
}

impl ReviewVerdict {
    pub fn new(sample_id: impl Into<String>, action: VerdictAction, round: u32, reviewer: impl Into<String>) -> Self {
        ReviewVerdict {
            sample_id: sample_id.into(),
            action,
            new_label: None,
            reviewer: reviewer.into(),
            round,
            timestamp: Utc::now(),
            expected_version: None,
        }
    }

    pub fn relabel(sample_id: impl Into<String>, new_label: ClassId, round: u32, reviewer: impl Into<String>) -> Self {
        ReviewVerdict {
            new_label: Some(new_label),
            ..Self::new(sample_id, VerdictAction::Relabel, round, reviewer)
        }
    }

    pub fn with_expected_version(mut self, version: u64) -> Self {
        self.expected_version = Some(version);
        self
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfirmationRule {
    #[default]
    AnyCorrection,
    SuggestedLabelMatch,
}

/// Table-1 style metrics of one round.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: u32,
    pub train_size: usize,
    pub validation_size: usize,
    pub train_accuracy: f64,
    pub validation_accuracy: f64,
    pub pipeline_accuracy: f64,
    pub ratio_validated: f64,
}

/// Ids ordered by ascending loss, ties broken by id.
pub fn rank_by_loss(report: &LossReport) -> Vec<String> {
    let mut entries: Vec<&LossEntry> = report.entries.iter().collect();
    entries.sort_by(|a, b| a.loss.total_cmp(&b.loss).then_with(|| a.id.cmp(&b.id)));
    entries.into_iter().map(|e| e.id.clone()).collect()
}

/// First `k` ids and last `l` ids of a ranked list.
pub fn select_head_tail(ordered: &[String], config: &TriageConfig) -> Result<(Vec<String>, Vec<String>)> {
    let requested = config.k + config.l;
    if requested > ordered.len() {
        return Err(Error::SelectionTooLarge {
            requested,
            available: ordered.len(),
        });
    }
    let head = ordered[..config.k].to_vec();
    let tail = ordered[ordered.len() - config.l..].to_vec();
    Ok((head, tail))
}

/// Ranks the unverified part of `report`, flags head and tail, and writes
/// each scored record's loss and suggested label into the manifest.
pub fn build_round(
    manifest: &DatasetManifest,
    report: &LossReport,
    config: &TriageConfig,
    round: u32,
    training: Option<TrainingSummary>,
) -> Result<(DatasetManifest, TriageRound)> {
    if round == 0 {
        return Err(Error::Config("triage rounds start at 1".into()));
    }
    let pool = LossReport {
        entries: report
            .entries
            .iter()
            .filter(|e| manifest.get(&e.id).is_some_and(|r| r.status == Status::Unverified))
            .cloned()
            .collect(),
        failures: Vec::new(),
    };
    let ordered = rank_by_loss(&pool);
    let (head, tail) = select_head_tail(&ordered, config)?;
    let by_id: HashMap<&str, &LossEntry> = pool.entries.iter().map(|e| (e.id.as_str(), e)).collect();

    let mut out = manifest.clone();
    for e in &pool.entries {
        let suggestion = (e.predicted != e.label).then_some(e.predicted);
        out.update(&e.id, |r| {
            r.loss = Some(e.loss);
            r.suggested_label = suggestion;
        })?;
    }
    let mut flagged = Vec::with_capacity(head.len() + tail.len());
    for (ids, kind) in [(&head, FlagKind::ConfidentHead), (&tail, FlagKind::SuspectTail)] {
        for id in ids {
            let e = by_id[id.as_str()];
            out.update(id, |r| r.round = Some(round))?;
            flagged.push(FlaggedSample {
                id: id.clone(),
                kind,
                label: e.label,
                loss: Some(e.loss),
                predicted: Some(e.predicted),
            });
        }
    }
    Ok((
        out,
        TriageRound {
            round,
            flagged,
            training,
        },
    ))
}

/// Certify verdicts for the head, used when human confirmation of the head
/// is switched off.
pub fn auto_head_verdicts(queue: &TriageRound) -> Vec<ReviewVerdict> {
    queue
        .ids_of(FlagKind::ConfidentHead)
        .map(|id| ReviewVerdict::new(id, VerdictAction::Certify, queue.round, "auto"))
        .collect()
}

fn already_applied(record: &crate::manifest::SampleRecord, v: &ReviewVerdict) -> bool {
    match v.action {
        VerdictAction::Certify => record.status == Status::Certified && record.split == Split::Train,
        VerdictAction::Relabel => {
            record.status == Status::Relabeled && Some(record.label) == v.new_label && record.split == Split::Train
        }
        VerdictAction::Reject => record.status == Status::Rejected,
        VerdictAction::Ambiguous => record.status == Status::Ambiguous,
    }
}

/// Applies verdicts for samples flagged in `queue`. All or nothing: on any
/// error, including a violated size budget, no change is returned.
pub fn apply_verdicts(
    manifest: &DatasetManifest,
    queue: &TriageRound,
    verdicts: &[ReviewVerdict],
) -> Result<DatasetManifest> {
    let mut out = manifest.clone();
    for v in verdicts {
        let invalid = |message: &str| Error::InvalidVerdict {
            id: v.sample_id.clone(),
            message: message.to_string(),
        };
        if v.round != queue.round || queue.find(&v.sample_id).is_none() {
            return Err(Error::NotFlagged {
                id: v.sample_id.clone(),
                round: v.round,
            });
        }
        let record = out
            .get(&v.sample_id)
            .ok_or_else(|| Error::UnknownSample(v.sample_id.clone()))?;
        if let Some(expected) = v.expected_version {
            if expected != record.version {
                return Err(Error::Conflict {
                    id: v.sample_id.clone(),
                    expected,
                    found: record.version,
                });
            }
        }
        match (v.action, v.new_label) {
            (VerdictAction::Relabel, None) => return Err(invalid("relabel requires new_label")),
            (VerdictAction::Relabel, Some(c)) if c.index() >= out.num_classes() => {
                return Err(invalid("new_label is not a known class"))
            }
            (VerdictAction::Relabel, _) => {}
            (_, Some(_)) => return Err(invalid("new_label is only valid with relabel")),
            (_, None) => {}
        }
        if already_applied(record, v) {
            continue;
        }
        if v.action == VerdictAction::Relabel {
            let new_label = v.new_label.unwrap();
            if new_label == record.label {
                return Err(invalid("new_label equals the current label"));
            }
            if record.original_label.unwrap_or(record.label) == new_label {
                return Err(invalid("new_label restores the original label; certify instead"));
            }
        }
        out.update(&v.sample_id, |r| match v.action {
            VerdictAction::Certify => {
                r.status = Status::Certified;
                r.split = Split::Train;
            }
            VerdictAction::Relabel => {
                r.original_label = Some(r.original_label.unwrap_or(r.label));
                r.label = v.new_label.unwrap();
                r.suggested_label = v.new_label;
                r.status = Status::Relabeled;
                r.split = Split::Train;
            }
            VerdictAction::Reject => {
                r.status = Status::Rejected;
                r.split = Split::Unassigned;
            }
            VerdictAction::Ambiguous => {
                r.status = Status::Ambiguous;
                r.split = Split::Unassigned;
            }
        })?;
    }
    out.validate_size_constraint().into_result()?;
    Ok(out)
}

fn confirms(flag: &FlaggedSample, v: &ReviewVerdict, rule: ConfirmationRule) -> bool {
    match flag.kind {
        FlagKind::ConfidentHead | FlagKind::SeedSample => v.action == VerdictAction::Certify,
        FlagKind::SuspectTail => match (v.action, rule) {
            (VerdictAction::Certify, _) => false,
            (VerdictAction::Reject | VerdictAction::Ambiguous, _) => true,
            (VerdictAction::Relabel, ConfirmationRule::AnyCorrection) => true,
            (VerdictAction::Relabel, ConfirmationRule::SuggestedLabelMatch) => {
                v.new_label.is_some() && v.new_label == flag.predicted
            }
        },
    }
}

/// Latest verdict per sample for one round.
pub fn latest_verdicts(verdicts: &[ReviewVerdict], round: u32) -> HashMap<&str, &ReviewVerdict> {
    let mut out = HashMap::new();
    for v in verdicts.iter().filter(|v| v.round == round) {
        out.insert(v.sample_id.as_str(), v);
    }
    out
}

/// `(confirmed, reviewed, total)` over the head and tail of a round.
pub fn confirmation_counts(flagged: &[FlaggedSample], verdicts: &[ReviewVerdict], round: u32, rule: ConfirmationRule) -> (usize, usize, usize) {
    let latest = latest_verdicts(verdicts, round);
    let mut counts = (0, 0, 0);
    for f in flagged.iter().filter(|f| f.kind != FlagKind::SeedSample) {
        counts.2 += 1;
        if let Some(v) = latest.get(f.id.as_str()) {
            counts.1 += 1;
            if confirms(f, v, rule) {
                counts.0 += 1;
            }
        }
    }
    counts
}

/// Fraction of flagged samples whose model assessment the supervisor
/// confirmed. Every flagged sample needs a verdict; an empty selection
/// scores 1.
pub fn pipeline_accuracy(flagged: &[FlaggedSample], verdicts: &[ReviewVerdict], round: u32, rule: ConfirmationRule) -> Result<f64> {
    let latest = latest_verdicts(verdicts, round);
    if let Some(missing) = flagged
        .iter()
        .filter(|f| f.kind != FlagKind::SeedSample)
        .find(|f| !latest.contains_key(f.id.as_str()))
    {
        return Err(Error::MissingVerdict(missing.id.clone()));
    }
    let (confirmed, _, total) = confirmation_counts(flagged, verdicts, round, rule);
    Ok(if total == 0 { 1.0 } else { confirmed as f64 / total as f64 })
}

/// `(certified + relabeled) / corpus`, where the corpus excludes rejected,
/// ambiguous and synthetic records.
pub fn ratio_validated(manifest: &DatasetManifest) -> f64 {
    let (validated, total) = manifest
        .records()
        .filter(|r| !r.status.is_excluded() && r.status != Status::CertifiedSynthetic)
        .fold((0usize, 0usize), |(v, t), r| (v + r.status.is_validated() as usize, t + 1));
    if total == 0 {
        1.0
    } else {
        validated as f64 / total as f64
    }
}

pub fn round_report(
    manifest: &DatasetManifest,
    queue: &TriageRound,
    verdicts: &[ReviewVerdict],
    rule: ConfirmationRule,
) -> Result<RoundReport> {
    let pipeline_accuracy = pipeline_accuracy(&queue.flagged, verdicts, queue.round, rule)?;
    let t = queue.training.unwrap_or_default();
    Ok(RoundReport {
        round: queue.round,
        train_size: t.train_size,
        validation_size: t.validation_size,
        train_accuracy: t.train_accuracy,
        validation_accuracy: t.validation_accuracy,
        pipeline_accuracy,
        ratio_validated: ratio_validated(manifest),
    })
}

/// Live view of a round that may still be under review.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoundStats {
    pub reviewed: usize,
    pub total: usize,
    /// Metrics so far; pipeline accuracy covers reviewed samples only
    /// (zero before the first verdict).
    pub report: RoundReport,
}

pub fn round_stats(manifest: &DatasetManifest, queue: &TriageRound, verdicts: &[ReviewVerdict], rule: ConfirmationRule) -> RoundStats {
    let (confirmed, reviewed, total) = confirmation_counts(&queue.flagged, verdicts, queue.round, rule);
    let t = queue.training.unwrap_or_default();
    RoundStats {
        reviewed,
        total,
        report: RoundReport {
            round: queue.round,
            train_size: t.train_size,
            validation_size: t.validation_size,
            train_accuracy: t.train_accuracy,
            validation_accuracy: t.validation_accuracy,
            pipeline_accuracy: if reviewed == 0 { 0.0 } else { confirmed as f64 / reviewed as f64 },
            ratio_validated: ratio_validated(manifest),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifest::{Digest256, SampleRecord};

    fn report(losses: &[(&str, f64)]) -> LossReport {
        LossReport {
            entries: losses
                .iter()
                .map(|(id, loss)| LossEntry {
                    id: id.to_string(),
                    label: ClassId(0),
                    loss: *loss,
                    predicted: ClassId(0),
                    confidence: (-loss).exp(),
                    probabilities: vec![],
                })
                .collect(),
            failures: vec![],
        }
    }

    fn manifest(n: usize, n_max: usize) -> DatasetManifest {
        let mut m = DatasetManifest::new(DatasetManifest::roman_classes(), n_max).unwrap();
        for i in 0..n {
            m.insert(SampleRecord::new(format!("s{i:03}"), "x.png", Digest256([0; 32]), ClassId(0)))
                .unwrap();
        }
        m
    }

    fn queue(ids: &[(&str, FlagKind)]) -> TriageRound {
        TriageRound {
            round: 1,
            flagged: ids
                .iter()
                .map(|(id, kind)| FlaggedSample {
                    id: id.to_string(),
                    kind: *kind,
                    label: ClassId(0),
                    loss: Some(0.0),
                    predicted: Some(ClassId(1)),
                })
                .collect(),
            training: None,
        }
    }

    #[test]
    fn ranking_and_ties() {
        assert_eq!(rank_by_loss(&report(&[("a", 0.1), ("b", 0.3), ("c", 0.2)])), vec!["a", "c", "b"]);
        assert_eq!(rank_by_loss(&report(&[("b", 0.5), ("a", 0.5)])), vec!["a", "b"]);
    }

    #[test]
    fn head_tail_selection() {
        let ordered: Vec<String> = ["a", "c", "b"].iter().map(|s| s.to_string()).collect();
        let cfg = |k, l| TriageConfig {
            k,
            l,
            require_human_confirmation_of_head: true,
        };
        assert_eq!(select_head_tail(&ordered, &cfg(1, 1)).unwrap(), (vec!["a".to_string()], vec!["b".to_string()]));
        assert_eq!(select_head_tail(&ordered, &cfg(0, 0)).unwrap(), (vec![], vec![]));
        assert!(matches!(select_head_tail(&ordered, &cfg(2, 2)), Err(Error::SelectionTooLarge { .. })));

        let corpus: Vec<String> = (0..2880).map(|i| format!("s{i:04}")).collect();
        let (h, t) = select_head_tail(&corpus, &TriageConfig::default()).unwrap();
        assert_eq!(h.len() + t.len(), 600);
    }

    #[test]
    fn loss_entry_from_probabilities() {
        let e = LossEntry::from_probabilities("a", ClassId(2), vec![0.0, 0.0, 1.0]);
        assert_eq!(e.loss, 0.0);
        assert_eq!(e.predicted, ClassId(2));
        let u = LossEntry::from_probabilities("b", ClassId(4), vec![0.1; 10]);
        assert!((u.loss - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn certify_and_relabel() {
        let m = manifest(3, 10_000);
        let q = queue(&[("s000", FlagKind::ConfidentHead), ("s001", FlagKind::SuspectTail)]);
        let out = apply_verdicts(
            &m,
            &q,
            &[
                ReviewVerdict::new("s000", VerdictAction::Certify, 1, "r"),
                ReviewVerdict::relabel("s001", ClassId(1), 1, "r"),
            ],
        )
        .unwrap();
        let a = out.get("s000").unwrap();
        assert_eq!((a.status, a.split, a.version), (Status::Certified, Split::Train, 1));
        let b = out.get("s001").unwrap();
        assert_eq!((b.status, b.label, b.original_label), (Status::Relabeled, ClassId(1), Some(ClassId(0))));
    }

    #[test]
    fn verdict_validation() {
        let m = manifest(3, 10_000);
        let q = queue(&[("s000", FlagKind::SuspectTail)]);
        let relabel_without_label = ReviewVerdict::new("s000", VerdictAction::Relabel, 1, "r");
        assert!(matches!(apply_verdicts(&m, &q, &[relabel_without_label]), Err(Error::InvalidVerdict { .. })));
        let same_label = ReviewVerdict::relabel("s000", ClassId(0), 1, "r");
        assert!(apply_verdicts(&m, &q, &[same_label]).is_err());
        let unflagged = ReviewVerdict::new("s002", VerdictAction::Certify, 1, "r");
        assert!(matches!(apply_verdicts(&m, &q, &[unflagged]), Err(Error::NotFlagged { .. })));
        let stale = ReviewVerdict::new("s000", VerdictAction::Reject, 1, "r").with_expected_version(4);
        assert!(matches!(apply_verdicts(&m, &q, &[stale]), Err(Error::Conflict { .. })));
    }

    #[test]
    fn verdicts_are_idempotent() {
        let m = manifest(2, 10_000);
        let q = queue(&[("s000", FlagKind::ConfidentHead), ("s001", FlagKind::SuspectTail)]);
        let vs = vec![
            ReviewVerdict::new("s000", VerdictAction::Certify, 1, "r"),
            ReviewVerdict::relabel("s001", ClassId(3), 1, "r"),
        ];
        let once = apply_verdicts(&m, &q, &vs).unwrap();
        assert_eq!(apply_verdicts(&once, &q, &vs).unwrap(), once);
    }

    #[test]
    fn budget_violation_leaves_manifest_unchanged() {
        // n_max = 3: two samples may enter train, the third breaks the budget.
        let m = manifest(3, 3);
        let q = queue(&[
            ("s000", FlagKind::ConfidentHead),
            ("s001", FlagKind::ConfidentHead),
            ("s002", FlagKind::ConfidentHead),
        ]);
        let vs: Vec<_> = ["s000", "s001", "s002"]
            .iter()
            .map(|id| ReviewVerdict::new(*id, VerdictAction::Certify, 1, "r"))
            .collect();
        assert!(matches!(apply_verdicts(&m, &q, &vs), Err(Error::Budget { .. })));
        assert!(apply_verdicts(&m, &q, &vs[..2]).is_ok());
    }

    #[test]
    fn pipeline_accuracy_reference_round() {
        // 500 head + 100 tail; 48 head samples turn out to be wrong.
        let flagged: Vec<FlaggedSample> = (0..600)
            .map(|i| FlaggedSample {
                id: format!("s{i:03}"),
                kind: if i < 500 { FlagKind::ConfidentHead } else { FlagKind::SuspectTail },
                label: ClassId(0),
                loss: None,
                predicted: Some(ClassId(1)),
            })
            .collect();
        let verdicts: Vec<ReviewVerdict> = flagged
            .iter()
            .enumerate()
            .map(|(i, f)| {
                let action = match (f.kind, i % 500 < 48) {
                    (FlagKind::ConfidentHead, true) => VerdictAction::Reject,
                    (FlagKind::ConfidentHead, false) => VerdictAction::Certify,
                    _ => VerdictAction::Reject,
                };
                ReviewVerdict::new(f.id.clone(), action, 1, "r")
            })
            .collect();
        let acc = pipeline_accuracy(&flagged, &verdicts, 1, ConfirmationRule::AnyCorrection).unwrap();
        assert!((acc - 0.92).abs() < 1e-12);
        assert!(matches!(
            pipeline_accuracy(&flagged, &verdicts[..599], 1, ConfirmationRule::AnyCorrection),
            Err(Error::MissingVerdict(_))
        ));
    }

    #[test]
    fn suggested_label_rule_is_stricter() {
        let q = queue(&[("a", FlagKind::SuspectTail), ("b", FlagKind::SuspectTail)]);
        let vs = vec![ReviewVerdict::relabel("a", ClassId(1), 1, "r"), ReviewVerdict::relabel("b", ClassId(5), 1, "r")];
        assert_eq!(pipeline_accuracy(&q.flagged, &vs, 1, ConfirmationRule::AnyCorrection).unwrap(), 1.0);
        assert_eq!(pipeline_accuracy(&q.flagged, &vs, 1, ConfirmationRule::SuggestedLabelMatch).unwrap(), 0.5);
    }

    #[test]
    fn ratio_validated_reference() {
        let mut m = manifest(0, 10_000);
        for i in 0..2880 {
            let mut r = SampleRecord::new(format!("s{i:04}"), "x.png", Digest256([0; 32]), ClassId(0));
            if i < 200 {
                r.status = Status::Certified;
                r.split = Split::Train;
            }
            m.insert(r).unwrap();
        }
        let ratio = ratio_validated(&m);
        assert!((ratio - 0.069_444).abs() < 1e-4);
        assert_eq!(format!("{:.2}", ratio), "0.07");
    }
}
