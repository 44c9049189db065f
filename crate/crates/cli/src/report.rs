//! Round table and dataset summary of a workspace, rendered as Markdown.

use std::fmt::Write;

use serde::{Deserialize, Serialize};
use workbench_core::triage::{ratio_validated, RoundReport};
use workbench_core::{DatasetManifest, Split, Status, Workspace};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub rounds: Vec<RoundReport>,
    pub records: usize,
    /// Collected (non-synthetic) records: the uncurated corpus size.
    pub baseline: usize,
    pub train: usize,
    pub validation: usize,
    pub test: usize,
    pub surplus: usize,
    pub unassigned: usize,
    pub unverified: usize,
    pub certified: usize,
    pub relabeled: usize,
    pub rejected: usize,
    pub ambiguous: usize,
    pub synthetic: usize,
    pub n_max: usize,
    pub ratio_validated: f64,
}

impl Summary {
    pub fn of(manifest: &DatasetManifest, rounds: Vec<RoundReport>) -> Self {
        let status = |s: Status| manifest.records().filter(|r| r.status == s).count();
        let synthetic = status(Status::CertifiedSynthetic);
        Summary {
            rounds,
            records: manifest.len(),
            baseline: manifest.len() - synthetic,
            train: manifest.count_split(Split::Train),
            validation: manifest.count_split(Split::Validation),
            test: manifest.count_split(Split::Test),
            surplus: manifest.count_split(Split::Surplus),
            unassigned: manifest.count_split(Split::Unassigned),
            unverified: status(Status::Unverified),
            certified: status(Status::Certified),
            relabeled: status(Status::Relabeled),
            rejected: status(Status::Rejected),
            ambiguous: status(Status::Ambiguous),
            synthetic,
            n_max: manifest.n_max,
            ratio_validated: ratio_validated(manifest),
        }
    }

    pub fn collect(workspace: &Workspace) -> anyhow::Result<Self> {
        Ok(Self::of(&workspace.load_manifest()?, workspace.load_ledger()?))
    }

    pub fn curated_size(&self) -> usize {
        self.train + self.validation
    }

    /// How many times smaller the curated set is than the baseline.
    pub fn size_reduction(&self) -> Option<f64> {
        (self.curated_size() > 0).then(|| self.baseline as f64 / self.curated_size() as f64)
    }

    pub fn to_markdown(&self) -> String {
        let pct = |v: f64| format!("{:.1}%", 100.0 * v);
        let mut out = String::from("# Curation report\n\n## Rounds\n\n");
        out.push_str("| round | train | validation | train acc | validation acc | pipeline acc | validated |\n");
        out.push_str("|---:|---:|---:|---:|---:|---:|---:|\n");
        for r in &self.rounds {
            let _ = writeln!(
                out,
                "| {} | {} | {} | {} | {} | {} | {} |",
                r.round,
                r.train_size,
                r.validation_size,
                pct(r.train_accuracy),
                pct(r.validation_accuracy),
                pct(r.pipeline_accuracy),
                pct(r.ratio_validated)
            );
        }
        out.push_str("\n## Dataset\n\n| | samples |\n|---|---:|\n");
        let rows: [(&str, String); 15] = [
            ("records", self.records.to_string()),
            ("baseline (collected)", self.baseline.to_string()),
            ("train", self.train.to_string()),
            ("validation", self.validation.to_string()),
            ("test", self.test.to_string()),
            ("surplus", self.surplus.to_string()),
            ("unassigned", self.unassigned.to_string()),
            ("unverified", self.unverified.to_string()),
            ("certified", self.certified.to_string()),
            ("relabeled", self.relabeled.to_string()),
            ("rejected", self.rejected.to_string()),
            ("ambiguous", self.ambiguous.to_string()),
            ("synthetic", self.synthetic.to_string()),
            ("train + validation", format!("{} (n_max {})", self.curated_size(), self.n_max)),
            ("validated ratio", pct(self.ratio_validated)),
        ];
        for (name, value) in rows {
            let _ = writeln!(out, "| {name} | {value} |");
        }
        if let Some(x) = self.size_reduction() {
            let _ = writeln!(out, "\nCurated set is {x:.2}x smaller than the baseline.");
        }
        out
    }
}
