//! On-disk layout of a curation workspace.
//!
//! ```text
//! <dir>/manifest.jsonl            the manifest (any name)
//! <dir>/rounds/round-001.queue.json
//! <dir>/rounds/verdicts.jsonl     append-only verdict log
//! <dir>/rounds/ledger.json        RoundReports of completed rounds
//! ```
//!
//! Image paths in the manifest are relative to `<dir>`.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::manifest::{load_json, save_json, DatasetManifest};
use crate::triage::{ReviewVerdict, RoundReport, TriageRound};

#[derive(Debug, Clone)]
pub struct Workspace {
    manifest_path: PathBuf,
    dir: PathBuf,
}

impl Workspace {
    pub fn new(manifest_path: impl Into<PathBuf>) -> Self {
        let manifest_path = manifest_path.into();
        let dir = match manifest_path.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        Workspace { manifest_path, dir }
    }

    pub fn manifest_path(&self) -> &Path {
        &self.manifest_path
    }

    /// Directory image paths are relative to.
    pub fn root(&self) -> &Path {
        &self.dir
    }

    pub fn rounds_dir(&self) -> PathBuf {
        self.dir.join("rounds")
    }

    pub fn queue_path(&self, round: u32) -> PathBuf {
        self.rounds_dir().join(format!("round-{round:03}.queue.json"))
    }

    pub fn verdict_log_path(&self) -> PathBuf {
        self.rounds_dir().join("verdicts.jsonl")
    }

    pub fn ledger_path(&self) -> PathBuf {
        self.rounds_dir().join("ledger.json")
    }

    pub fn load_manifest(&self) -> Result<DatasetManifest> {
        DatasetManifest::load(&self.manifest_path)
    }

    pub fn save_manifest(&self, manifest: &DatasetManifest) -> Result<()> {
        manifest.save(&self.manifest_path)
    }

    fn ensure_rounds_dir(&self) -> Result<()> {
        let dir = self.rounds_dir();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(dir, e))
    }

    pub fn save_queue(&self, queue: &TriageRound) -> Result<PathBuf> {
        self.ensure_rounds_dir()?;
        let path = self.queue_path(queue.round);
        save_json(queue, &path)?;
        Ok(path)
    }

    pub fn load_queue(&self, round: u32) -> Result<Option<TriageRound>> {
        let path = self.queue_path(round);
        if !path.exists() {
            return Ok(None);
        }
        load_json(&path).map(Some)
    }

    /// Rounds with a queue file, ascending.
    pub fn rounds(&self) -> Result<Vec<u32>> {
        let dir = self.rounds_dir();
        if !dir.exists() {
            return Ok(Vec::new());
        }
        let mut rounds = Vec::new();
        for entry in std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
            let entry = entry.map_err(|e| Error::io(&dir, e))?;
            let name = entry.file_name();
            let name = name.to_string_lossy();
            if let Some(n) = name
                .strip_prefix("round-")
                .and_then(|s| s.strip_suffix(".queue.json"))
                .and_then(|s| s.parse().ok())
            {
                rounds.push(n);
            }
        }
        rounds.sort_unstable();
        Ok(rounds)
    }

    pub fn load_verdicts(&self) -> Result<Vec<ReviewVerdict>> {
        let path = self.verdict_log_path();
        if !path.exists() {
            return Ok(Vec::new());
        }
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        text.lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|e| Error::Parse {
                    path: path.clone(),
                    line: i + 1,
                    message: e.to_string(),
                })
            })
            .collect()
    }

    /// Appends verdicts and syncs the log to disk.
    pub fn append_verdicts(&self, verdicts: &[ReviewVerdict]) -> Result<()> {
        if verdicts.is_empty() {
            return Ok(());
        }
        self.ensure_rounds_dir()?;
        let path = self.verdict_log_path();
        let mut text = String::new();
        for v in verdicts {
            text.push_str(&serde_json::to_string(v)?);
            text.push('\n');
        }
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        file.write_all(text.as_bytes()).map_err(|e| Error::io(&path, e))?;
        file.sync_all().map_err(|e| Error::io(&path, e))
    }

    pub fn load_ledger(&self) -> Result<Vec<RoundReport>> {
        let path = self.ledger_path();
        if !path.exists() {
            return Ok(Vec::new());
        }
        load_json(&path)
    }

    pub fn save_ledger(&self, ledger: &[RoundReport]) -> Result<()> {
        self.ensure_rounds_dir()?;
        save_json(&ledger, self.ledger_path())
    }
}
