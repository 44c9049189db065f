//! Sample records, the dataset manifest and its line-delimited file format.
//!
//! A manifest file is UTF-8 text. The first line is a JSON header carrying
//! `schema_version`, `n_max` and the ordered class list; every following line
//! is one flat JSON object per [`SampleRecord`]. Optional fields are omitted
//! when absent and hashes are hex encoded. Records are written sorted by id so
//! that successive review rounds diff cleanly.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

/// Index of a class in the manifest's class list.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassId(pub u16);

impl ClassId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl From<usize> for ClassId {
    fn from(v: usize) -> Self {
        ClassId(u16::try_from(v).expect("class index fits in u16"))
    }
}

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// A class index paired with its display name.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassLabel {
    pub index: ClassId,
    pub name: String,
}

/// 256-bit content digest, hex encoded on disk.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Digest256(pub [u8; 32]);

impl fmt::Debug for Digest256 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest256({})", hex::encode(self.0))
    }
}

impl fmt::Display for Digest256 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&hex::encode(self.0))
    }
}

impl Serialize for Digest256 {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(self.0))
    }
}

impl<'de> Deserialize<'de> for Digest256 {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        let mut out = [0u8; 32];
        hex::decode_to_slice(&s, &mut out).map_err(serde::de::Error::custom)?;
        Ok(Digest256(out))
    }
}

/// 64-bit perceptual hash, 16 hex digits on disk.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Debug)]
pub struct PHash(pub u64);

impl PHash {
    pub fn distance(self, other: PHash) -> u32 {
        (self.0 ^ other.0).count_ones()
    }
}

impl Serialize for PHash {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&format!("{:016x}", self.0))
    }
}

impl<'de> Deserialize<'de> for PHash {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        u64::from_str_radix(&s, 16)
            .map(PHash)
            .map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
    Surplus,
    Unassigned,
}

impl Split {
    /// Splits that a rejected or ambiguous record must never occupy.
    pub fn is_evaluated(self) -> bool {
        matches!(self, Split::Train | Split::Validation | Split::Test)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Unverified,
    Certified,
    Relabeled,
    Rejected,
    Ambiguous,
    /// Generated by the synthesizer; trusted by construction.
    CertifiedSynthetic,
}

impl Status {
    /// Carries a human verdict that keeps the sample in the corpus.
    pub fn is_validated(self) -> bool {
        matches!(self, Status::Certified | Status::Relabeled)
    }

    /// Removed from every evaluated split.
    pub fn is_excluded(self) -> bool {
        matches!(self, Status::Rejected | Status::Ambiguous)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub id: String,
    pub image_path: String,
    pub byte_hash: Digest256,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pixel_hash: Option<Digest256>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phash: Option<PHash>,
    pub label: ClassId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub suggested_label: Option<ClassId>,
    /// Label before a relabel verdict was applied.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub original_label: Option<ClassId>,
    pub split: Split,
    pub status: Status,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub round: Option<u32>,
    pub version: u64,
    /// Order in which the record entered the surplus pool.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub surplus_rank: Option<u64>,
    /// Free-form provenance, e.g. rejection reason or synthesizer seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl SampleRecord {
    pub fn new(
        id: impl Into<String>,
        image_path: impl Into<String>,
        byte_hash: Digest256,
        label: ClassId,
    ) -> Self {
        SampleRecord {
            id: id.into(),
            image_path: image_path.into(),
            byte_hash,
            pixel_hash: None,
            phash: None,
            label,
            suggested_label: None,
            original_label: None,
            split: Split::Unassigned,
            status: Status::Unverified,
            loss: None,
            round: None,
            version: 0,
            surplus_rank: None,
            note: None,
        }
    }

    fn check(&self, num_classes: usize) -> Result<()> {
        let bad = |message: &str| {
            Err(Error::InvalidRecord {
                id: self.id.clone(),
                message: message.to_string(),
            })
        };
        if self.id.is_empty() {
            return bad("empty id");
        }
        for c in [Some(self.label), self.suggested_label, self.original_label]
            .into_iter()
            .flatten()
        {
            if c.index() >= num_classes {
                return bad(&format!("label {c} outside the {num_classes} classes"));
            }
        }
        if self.status.is_excluded() && self.split.is_evaluated() {
            return bad("rejected/ambiguous record assigned to an evaluated split");
        }
        if self.status == Status::Relabeled {
            match self.original_label {
                Some(orig) if orig != self.label => {}
                _ => return bad("relabeled record must keep a differing original label"),
            }
        }
        if let Some(loss) = self.loss {
            if !(loss >= 0.0 && loss.is_finite()) {
                return bad("loss must be finite and non-negative");
            }
        }
        if self.round == Some(0) {
            return bad("round numbers start at 1");
        }
        Ok(())
    }
}

/// Counts behind the `|train| + |validation| < n_max` budget.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SizeReport {
    pub train: usize,
    pub validation: usize,
    pub n_max: usize,
    pub satisfied: bool,
}

impl SizeReport {
    pub fn new(train: usize, validation: usize, n_max: usize) -> Self {
        SizeReport {
            train,
            validation,
            n_max,
            satisfied: train + validation < n_max,
        }
    }

    pub fn into_result(self) -> Result<Self> {
        if self.satisfied {
            Ok(self)
        } else {
            Err(Error::Budget {
                train: self.train,
                validation: self.validation,
                n_max: self.n_max,
            })
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    schema_version: u32,
    n_max: usize,
    classes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    records: BTreeMap<String, SampleRecord>,
    classes: Vec<String>,
    pub n_max: usize,
    pub schema_version: u32,
}

impl DatasetManifest {
    pub fn new(classes: Vec<String>, n_max: usize) -> Result<Self> {
        let m = DatasetManifest {
            records: BTreeMap::new(),
            classes,
            n_max,
            schema_version: SCHEMA_VERSION,
        };
        m.check_classes()?;
        Ok(m)
    }

    /// Classes named "i".."x", the handwritten Roman numeral task.
    pub fn roman_classes() -> Vec<String> {
        ["i", "ii", "iii", "iv", "v", "vi", "vii", "viii", "ix", "x"]
            .iter()
            .map(|s| s.to_string())
            .collect()
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn class_label(&self, id: ClassId) -> Option<ClassLabel> {
        self.classes.get(id.index()).map(|name| ClassLabel {
            index: id,
            name: name.clone(),
        })
    }

    pub fn class_by_name(&self, name: &str) -> Option<ClassId> {
        self.classes.iter().position(|c| c == name).map(ClassId::from)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&SampleRecord> {
        self.records.get(id)
    }

    /// Records in id order.
    pub fn records(&self) -> impl Iterator<Item = &SampleRecord> {
        self.records.values()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.records.keys().map(String::as_str)
    }

    pub fn insert(&mut self, record: SampleRecord) -> Result<()> {
        record.check(self.classes.len())?;
        if self.records.contains_key(&record.id) {
            return Err(Error::InvalidRecord {
                id: record.id,
                message: "duplicate id".into(),
            });
        }
        self.records.insert(record.id.clone(), record);
        Ok(())
    }

    /// Mutates one record and bumps its version. The record is re-checked
    /// afterwards; on failure the previous value is restored.
    pub fn update<F>(&mut self, id: &str, f: F) -> Result<&SampleRecord>
    where
        F: FnOnce(&mut SampleRecord),
    {
        let num_classes = self.classes.len();
        let rec = self
            .records
            .get_mut(id)
            .ok_or_else(|| Error::UnknownSample(id.to_string()))?;
        let before = rec.clone();
        f(rec);
        rec.id.clone_from(&before.id);
        if *rec == before {
            return Ok(rec);
        }
        rec.version = before.version + 1;
        if let Err(e) = rec.check(num_classes) {
            *rec = before;
            return Err(e);
        }
        Ok(rec)
    }

    pub fn count_split(&self, split: Split) -> usize {
        self.records
            .values()
            .filter(|r| r.split == split && r.status != Status::Rejected)
            .count()
    }

    /// `|train| + |validation| < n_max`, with the three numbers.
    pub fn validate_size_constraint(&self) -> SizeReport {
        SizeReport::new(
            self.count_split(Split::Train),
            self.count_split(Split::Validation),
            self.n_max,
        )
    }

    /// Non-rejected records per class in `split`, indexed by class.
    pub fn class_histogram(&self, split: Split) -> Vec<usize> {
        let mut counts = vec![0; self.classes.len()];
        for r in self.records.values() {
            if r.split == split && r.status != Status::Rejected {
                counts[r.label.index()] += 1;
            }
        }
        counts
    }

    fn check_classes(&self) -> Result<()> {
        if self.classes.len() < 2 {
            return Err(Error::InvalidManifest("at least two classes required".into()));
        }
        if self.classes.len() > u16::MAX as usize {
            return Err(Error::InvalidManifest("too many classes".into()));
        }
        let mut seen = HashSet::new();
        for c in &self.classes {
            if c.is_empty() || !seen.insert(c.as_str()) {
                return Err(Error::InvalidManifest(format!(
                    "class names must be unique and non-empty, got {c:?}"
                )));
            }
        }
        Ok(())
    }

    /// Checks every manifest invariant, including the size budget.
    pub fn validate(&self) -> Result<()> {
        self.check_classes()?;
        for (id, r) in &self.records {
            if id != &r.id {
                return Err(Error::InvalidRecord {
                    id: id.clone(),
                    message: "key does not match record id".into(),
                });
            }
            r.check(self.classes.len())?;
        }
        self.validate_size_constraint().into_result()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let parse_err = |line: usize, message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header_line) = lines
            .next()
            .ok_or_else(|| parse_err(1, "missing header line".into()))?;
        let header: Header =
            serde_json::from_str(header_line).map_err(|e| parse_err(1, format!("header: {e}")))?;
        if header.schema_version > SCHEMA_VERSION {
            return Err(parse_err(
                1,
                format!("unsupported schema_version {}", header.schema_version),
            ));
        }
        let mut manifest = DatasetManifest {
            records: BTreeMap::new(),
            classes: header.classes,
            n_max: header.n_max,
            schema_version: header.schema_version,
        };
        manifest.check_classes()?;
        for (idx, line) in lines {
            let record: SampleRecord =
                serde_json::from_str(line).map_err(|e| parse_err(idx + 1, e.to_string()))?;
            if manifest.records.contains_key(&record.id) {
                return Err(Error::InvalidRecord {
                    id: record.id,
                    message: format!("duplicate id at line {}", idx + 1),
                });
            }
            manifest.records.insert(record.id.clone(), record);
        }
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn to_text(&self) -> String {
        let header = Header {
            schema_version: self.schema_version,
            n_max: self.n_max,
            classes: self.classes.clone(),
        };
        let mut out = serde_json::to_string(&header).expect("header serializes");
        out.push('\n');
        for r in self.records.values() {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    /// Writes to a temporary file beside `path` and renames it into place,
    /// so the target is either the old or the new manifest, never a mix.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.validate()?;
        write_atomic(path.as_ref(), self.to_text().as_bytes())
    }
}

/// Writes through a temporary file in the same directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(tmp.path(), e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(tmp.path(), e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

/// Writes any serializable value as pretty JSON, atomically.
pub fn save_json<T: Serialize>(value: &T, path: impl AsRef<Path>) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path.as_ref(), &bytes)
}

pub fn load_json<T: serde::de::DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })
}
