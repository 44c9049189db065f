//! Exact and near-duplicate detection with a three stage hashing cascade.
//!
//! Stage one groups records by a SHA-256 digest of the raw file bytes. The
//! representatives of those groups are then grouped by a digest of the
//! canonical pixels (grayscale, resized to `canonical_size`). The remaining
//! representatives are compared by the Hamming distance of a 64-bit
//! difference hash. Small corpora compare all pairs; larger ones generate
//! candidates from hash bands, which finds every pair within the threshold as
//! long as there are more bands than the threshold (pigeonhole).

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use image::imageops::{self, FilterType};
use image::GrayImage;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::image::decode_gray8;
use crate::manifest::{DatasetManifest, Digest256, PHash, SampleRecord, Split, Status};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct DedupConfig {
    pub canonical_size: (u32, u32),
    pub hamming_threshold: u32,
    /// Width in bits of each band used for near-duplicate candidate generation.
    pub prefix_bits: u32,
    /// Corpora up to this many representatives are compared exhaustively.
    pub exhaustive_limit: usize,
}

impl Default for DedupConfig {
    fn default() -> Self {
        DedupConfig {
            canonical_size: (32, 32),
            hamming_threshold: 6,
            prefix_bits: 8,
            exhaustive_limit: 10_000,
        }
    }
}

impl DedupConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hamming_threshold > 64 {
            return Err(Error::Config("hamming_threshold must be at most 64".into()));
        }
        if self.prefix_bits == 0 || self.prefix_bits > 64 {
            return Err(Error::Config("prefix_bits must be in 1..=64".into()));
        }
        if self.canonical_size.0 == 0 || self.canonical_size.1 == 0 {
            return Err(Error::Config("canonical_size must be positive".into()));
        }
        Ok(())
    }

    fn band_count(&self) -> u32 {
        64u32.div_ceil(self.prefix_bits)
    }

    /// Whether banded candidate generation is guaranteed to find every pair.
    pub fn banding_is_exact(&self) -> bool {
        self.band_count() > self.hamming_threshold
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DuplicateKind {
    ExactBytes,
    ExactPixels,
    Near,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DuplicateGroup {
    pub kind: DuplicateKind,
    /// Sorted by id.
    pub member_ids: Vec<String>,
    /// Hamming distance; zero for exact kinds.
    pub distance: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LeakagePair {
    pub train_id: String,
    pub validation_id: String,
    pub kind: DuplicateKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResolvePolicy {
    KeepFirst,
    KeepBestStatus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampleHashes {
    pub byte_hash: Digest256,
    pub pixel_hash: Digest256,
    pub phash: PHash,
}

pub fn digest_bytes(bytes: &[u8]) -> Digest256 {
    Digest256(Sha256::digest(bytes).into())
}

/// Grayscale image resized to the canonical dedup resolution.
pub fn canonicalize(gray: &GrayImage, size: (u32, u32)) -> GrayImage {
    if gray.dimensions() == size {
        gray.clone()
    } else {
        imageops::resize(gray, size.0, size.1, FilterType::Triangle)
    }
}

pub fn pixel_digest(canonical: &GrayImage) -> Digest256 {
    let mut h = Sha256::new();
    h.update(canonical.width().to_le_bytes());
    h.update(canonical.height().to_le_bytes());
    h.update(canonical.as_raw());
    Digest256(h.finalize().into())
}

/// 64-bit difference hash: bit `8 * row + col` is set when a pixel of the
/// 9×8 thumbnail is darker than its right-hand neighbour.
pub fn difference_hash(canonical: &GrayImage) -> PHash {
    let thumb = imageops::resize(canonical, 9, 8, FilterType::Triangle);
    let mut hash = 0u64;
    for row in 0..8u32 {
        for col in 0..8u32 {
            let left = thumb.get_pixel(col, row).0[0];
            let right = thumb.get_pixel(col + 1, row).0[0];
            if left < right {
                hash |= 1 << (row * 8 + col);
            }
        }
    }
    PHash(hash)
}

pub fn hash_bytes(bytes: &[u8], config: &DedupConfig) -> std::result::Result<SampleHashes, String> {
    let gray = decode_gray8(bytes)?;
    let canonical = canonicalize(&gray, config.canonical_size);
    Ok(SampleHashes {
        byte_hash: digest_bytes(bytes),
        pixel_hash: pixel_digest(&canonical),
        phash: difference_hash(&canonical),
    })
}

/// Hashes one sample; `root` is the directory image paths are relative to.
pub fn compute_hashes(root: &Path, sample: &SampleRecord, config: &DedupConfig) -> Result<SampleHashes> {
    let path = root.join(&sample.image_path);
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    hash_bytes(&bytes, config).map_err(|message| Error::Image { path, message })
}

/// Computes hashes for every record in parallel. Undecodable samples are
/// reported and left untouched.
pub fn hash_manifest(
    manifest: &DatasetManifest,
    root: &Path,
    config: &DedupConfig,
) -> Result<(DatasetManifest, Vec<(String, Error)>)> {
    config.validate()?;
    let records: Vec<&SampleRecord> = manifest.records().collect();
    let results: Vec<(String, Result<SampleHashes>)> = records
        .par_iter()
        .map(|r| (r.id.clone(), compute_hashes(root, r, config)))
        .collect();
    let mut out = manifest.clone();
    let mut failures = Vec::new();
    for (id, res) in results {
        match res {
            Ok(h) => {
                out.update(&id, |r| {
                    r.byte_hash = h.byte_hash;
                    r.pixel_hash = Some(h.pixel_hash);
                    r.phash = Some(h.phash);
                })?;
            }
            Err(e) => failures.push((id, e)),
        }
    }
    Ok((out, failures))
}

struct Hashed<'a> {
    id: &'a str,
    byte_hash: Digest256,
    pixel_hash: Digest256,
    phash: PHash,
}

fn hashed(record: &SampleRecord) -> Result<Hashed<'_>> {
    match (record.pixel_hash, record.phash) {
        (Some(pixel_hash), Some(phash)) => Ok(Hashed {
            id: &record.id,
            byte_hash: record.byte_hash,
            pixel_hash,
            phash,
        }),
        _ => Err(Error::InvalidRecord {
            id: record.id.clone(),
            message: "hashes not computed".into(),
        }),
    }
}

/// Groups items by key; returns groups of two or more (sorted) and one
/// representative (the smallest id) per key.
fn group_by_key<'a, K, F>(items: Vec<&'a Hashed<'a>>, key: F) -> (Vec<Vec<String>>, Vec<&'a Hashed<'a>>)
where
    K: std::hash::Hash + Eq,
    F: Fn(&Hashed<'a>) -> K,
{
    let mut buckets: HashMap<K, Vec<&'a Hashed<'a>>> = HashMap::new();
    for item in items {
        buckets.entry(key(item)).or_default().push(item);
    }
    let mut groups = Vec::new();
    let mut reps = Vec::with_capacity(buckets.len());
    for (_, mut members) in buckets {
        members.sort_by(|a, b| a.id.cmp(b.id));
        if members.len() > 1 {
            groups.push(members.iter().map(|m| m.id.to_string()).collect());
        }
        reps.push(members[0]);
    }
    reps.sort_by(|a, b| a.id.cmp(b.id));
    (groups, reps)
}

/// Index pairs `(i, j)`, `i < j`, whose hashes are within the threshold.
fn near_pairs(hashes: &[PHash], config: &DedupConfig) -> Vec<(usize, usize, u32)> {
    let t = config.hamming_threshold;
    let mut out = Vec::new();
    if hashes.len() <= config.exhaustive_limit {
        for i in 0..hashes.len() {
            for j in i + 1..hashes.len() {
                let d = hashes[i].distance(hashes[j]);
                if d <= t {
                    out.push((i, j, d));
                }
            }
        }
        return out;
    }
    if !config.banding_is_exact() {
        log::warn!(
            "{} bands of {} bits cannot guarantee all pairs within distance {}",
            config.band_count(),
            config.prefix_bits,
            t
        );
    }
    let mut seen = BTreeSet::new();
    for band in 0..config.band_count() {
        let shift = band * config.prefix_bits;
        let width = config.prefix_bits.min(64 - shift);
        let mask = if width == 64 { u64::MAX } else { (1u64 << width) - 1 };
        let mut buckets: HashMap<u64, Vec<usize>> = HashMap::new();
        for (i, h) in hashes.iter().enumerate() {
            buckets.entry((h.0 >> shift) & mask).or_default().push(i);
        }
        for members in buckets.values() {
            for (a, &i) in members.iter().enumerate() {
                for &j in &members[a + 1..] {
                    if seen.contains(&(i, j)) {
                        continue;
                    }
                    let d = hashes[i].distance(hashes[j]);
                    if d <= t {
                        seen.insert((i, j));
                        out.push((i, j, d));
                    }
                }
            }
        }
    }
    out.sort_unstable();
    out
}

/// Runs the cascade over all non-rejected records.
pub fn find_duplicates(manifest: &DatasetManifest, config: &DedupConfig) -> Result<Vec<DuplicateGroup>> {
    config.validate()?;
    let items: Vec<Hashed<'_>> = manifest
        .records()
        .filter(|r| r.status != Status::Rejected)
        .map(hashed)
        .collect::<Result<_>>()?;

    let (byte_groups, reps) = group_by_key(items.iter().collect(), |h| h.byte_hash);
    let (pixel_groups, reps) = group_by_key(reps, |h| h.pixel_hash);
    let phashes: Vec<PHash> = reps.iter().map(|h| h.phash).collect();

    let mut groups: Vec<DuplicateGroup> = byte_groups
        .into_iter()
        .map(|member_ids| DuplicateGroup {
            kind: DuplicateKind::ExactBytes,
            member_ids,
            distance: 0,
        })
        .chain(pixel_groups.into_iter().map(|member_ids| DuplicateGroup {
            kind: DuplicateKind::ExactPixels,
            member_ids,
            distance: 0,
        }))
        .chain(near_pairs(&phashes, config).into_iter().map(|(i, j, d)| DuplicateGroup {
            kind: DuplicateKind::Near,
            member_ids: vec![reps[i].id.to_string(), reps[j].id.to_string()],
            distance: d,
        }))
        .collect();
    groups.sort();
    Ok(groups)
}

/// Reports every train/validation pair that meets any duplicate criterion,
/// tagged with the strongest matching kind.
pub fn find_split_leakage(manifest: &DatasetManifest, config: &DedupConfig) -> Result<Vec<LeakagePair>> {
    config.validate()?;
    let collect = |split: Split| -> Result<Vec<Hashed<'_>>> {
        manifest
            .records()
            .filter(|r| r.split == split && r.status != Status::Rejected)
            .map(hashed)
            .collect()
    };
    let train = collect(Split::Train)?;
    let validation = collect(Split::Validation)?;

    let mut by_bytes: HashMap<Digest256, Vec<usize>> = HashMap::new();
    let mut by_pixels: HashMap<Digest256, Vec<usize>> = HashMap::new();
    for (j, v) in validation.iter().enumerate() {
        by_bytes.entry(v.byte_hash).or_default().push(j);
        by_pixels.entry(v.pixel_hash).or_default().push(j);
    }

    let mut found: HashMap<(usize, usize), DuplicateKind> = HashMap::new();
    let mut mark = |i: usize, j: usize, kind: DuplicateKind| {
        found
            .entry((i, j))
            .and_modify(|k| *k = (*k).min(kind))
            .or_insert(kind);
    };
    for (i, t) in train.iter().enumerate() {
        for &j in by_bytes.get(&t.byte_hash).into_iter().flatten() {
            mark(i, j, DuplicateKind::ExactBytes);
        }
        for &j in by_pixels.get(&t.pixel_hash).into_iter().flatten() {
            mark(i, j, DuplicateKind::ExactPixels);
        }
    }

    // Near candidates over the concatenated list, keeping cross-split pairs.
    let mut hashes: Vec<PHash> = train.iter().map(|h| h.phash).collect();
    hashes.extend(validation.iter().map(|h| h.phash));
    let n_train = train.len();
    let cross_config = DedupConfig {
        // All-pairs over train ∪ validation is wasteful once either side is large.
        exhaustive_limit: config.exhaustive_limit.min(2_000),
        ..*config
    };
    for (a, b, _) in near_pairs(&hashes, &cross_config) {
        if a < n_train && b >= n_train {
            mark(a, b - n_train, DuplicateKind::Near);
        }
    }

    let mut out: Vec<LeakagePair> = found
        .into_iter()
        .map(|((i, j), kind)| LeakagePair {
            train_id: train[i].id.to_string(),
            validation_id: validation[j].id.to_string(),
            kind,
        })
        .collect();
    out.sort();
    Ok(out)
}

fn status_rank(s: Status) -> u8 {
    match s {
        Status::Certified | Status::Relabeled | Status::CertifiedSynthetic => 3,
        Status::Unverified => 2,
        Status::Ambiguous => 1,
        Status::Rejected => 0,
    }
}

/// Keeps one survivor per group and marks the others rejected, recording
/// which record they duplicate. Applying the same groups twice is a no-op.
pub fn resolve_duplicates(
    manifest: &DatasetManifest,
    groups: &[DuplicateGroup],
    policy: ResolvePolicy,
) -> Result<DatasetManifest> {
    let mut out = manifest.clone();
    for group in groups {
        let mut members = Vec::with_capacity(group.member_ids.len());
        for id in &group.member_ids {
            let rec = out.get(id).ok_or_else(|| Error::UnknownSample(id.clone()))?;
            members.push((id.as_str(), rec.status));
        }
        members.sort_by(|a, b| a.0.cmp(b.0));
        let live: Vec<_> = members.iter().filter(|(_, s)| *s != Status::Rejected).collect();
        if live.len() < 2 {
            continue;
        }
        let survivor = match policy {
            ResolvePolicy::KeepFirst => live[0].0,
            ResolvePolicy::KeepBestStatus => {
                let best = live.iter().map(|(_, s)| status_rank(*s)).max().unwrap_or(0);
                live.iter().find(|(_, s)| status_rank(*s) == best).unwrap().0
            }
        };
        let kind = match group.kind {
            DuplicateKind::ExactBytes => "exact_bytes",
            DuplicateKind::ExactPixels => "exact_pixels",
            DuplicateKind::Near => "near",
        };
        let survivor = survivor.to_string();
        for (id, _) in live.iter().filter(|(id, _)| *id != survivor) {
            out.update(id, |r| {
                r.status = Status::Rejected;
                r.split = Split::Unassigned;
                r.note = Some(format!("duplicate of {survivor} ({kind})"));
            })?;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DedupReport {
    pub groups: Vec<DuplicateGroup>,
    pub leakage: Vec<LeakagePair>,
    pub unreadable: Vec<String>,
}
