//! Procedurally drawn handwritten-style Roman numerals, used to build
//! synthetic corpora with known ground truth.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dedup::digest_bytes;
use crate::error::{Error, Result};
use crate::image::{clamp01, ImageTensor};
use crate::manifest::{ClassId, DatasetManifest, SampleRecord};
use crate::scalar::Scalar;

pub const NUMERALS: [&str; 10] = ["I", "II", "III", "IV", "V", "VI", "VII", "VIII", "IX", "X"];

fn segment_distance(py: f64, px: f64, a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dy, dx) = (b.0 - a.0, b.1 - a.1);
    let len2 = dy * dy + dx * dx;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((py - a.0) * dy + (px - a.1) * dx) / len2).clamp(0.0, 1.0)
    };
    let (cy, cx) = (a.0 + t * dy, a.1 + t * dx);
    ((py - cy).powi(2) + (px - cx).powi(2)).sqrt()
}

/// Renders numeral `class` (0 = "I" … 9 = "X") on a `size × size` canvas.
pub fn render<T: Scalar, R: Rng + ?Sized>(class: usize, size: usize, rng: &mut R) -> ImageTensor<T> {
    let numeral = NUMERALS[class % NUMERALS.len()];
    let s = size as f64 / 32.0;
    let height = rng.random_range(14.0..21.0) * s;
    let wide = height * rng.random_range(0.5..0.7);
    let gap = rng.random_range(2.0..3.5) * s;
    let thickness = rng.random_range(1.4..2.4) * s;
    let shear = rng.random_range(-0.15..0.15);
    let ink = rng.random_range(0.0..0.2);
    let paper = rng.random_range(0.9..1.0);

    let widths: Vec<f64> = numeral.chars().map(|c| if c == 'I' { 0.0 } else { wide }).collect();
    let natural = widths.iter().sum::<f64>() + gap * (widths.len() as f64 - 1.0);
    let squeeze = ((size as f64 - 6.0 * s) / natural.max(1e-9)).min(1.0);
    let total = natural * squeeze;
    let cy = size as f64 / 2.0 + rng.random_range(-2.0..2.0) * s;
    let cx = size as f64 / 2.0 + rng.random_range(-2.0..2.0) * s;
    let (top, bottom) = (cy - height / 2.0, cy + height / 2.0);

    let mut segments = Vec::new();
    let mut x = cx - total / 2.0;
    for (ch, w) in numeral.chars().zip(&widths) {
        let w = w * squeeze;
        let mut jitter = || rng.random_range(-0.8..0.8) * s;
        match ch {
            'I' => segments.push(((top + jitter(), x + jitter()), (bottom + jitter(), x + jitter()))),
            'V' => {
                let apex = (bottom + jitter(), x + w / 2.0 + jitter());
                segments.push(((top + jitter(), x + jitter()), apex));
                segments.push((apex, (top + jitter(), x + w + jitter())));
            }
            _ => {
                segments.push(((top + jitter(), x + jitter()), (bottom + jitter(), x + w + jitter())));
                segments.push(((top + jitter(), x + w + jitter()), (bottom + jitter(), x + jitter())));
            }
        }
        x += w + gap * squeeze;
    }
    // shear about the vertical centre
    for seg in &mut segments {
        for p in [&mut seg.0, &mut seg.1] {
            p.1 += shear * (cy - p.0);
        }
    }

    ImageTensor::from_fn(size, size, 1, |y, x, _| {
        let (py, px) = (y as f64, x as f64);
        let d = segments
            .iter()
            .map(|&(a, b)| segment_distance(py, px, a, b))
            .fold(f64::INFINITY, f64::min);
        let alpha = (thickness / 2.0 + 0.5 - d).clamp(0.0, 1.0);
        clamp01(T::of(paper * (1.0 - alpha) + ink * alpha))
    })
}

/// Ground truth of a synthetic corpus.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    /// True class per sample id.
    pub labels: BTreeMap<String, ClassId>,
    /// Samples whose manifest label was deliberately corrupted.
    pub flipped: BTreeSet<String>,
}

/// Writes `count` glyph PNGs under `dir/images` and a manifest describing
/// them. A `flip_fraction` share of samples gets a wrong label; all records
/// start unverified and unassigned.
pub fn write_corpus(dir: &Path, count: usize, flip_fraction: f64, n_max: usize, seed: u64) -> Result<(DatasetManifest, GroundTruth)> {
    let images = dir.join("images");
    std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut manifest = DatasetManifest::new(DatasetManifest::roman_classes(), n_max)?;
    let classes = manifest.num_classes();
    let mut truth = GroundTruth::default();
    for i in 0..count {
        let id = format!("g{i:05}");
        let class = i % classes;
        let img: ImageTensor<f32> = render(class, 32, &mut rng);
        let rel = format!("images/{id}.png");
        let path = dir.join(&rel);
        img.save_png(&path)?;
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let mut label = class;
        if rng.random_bool(flip_fraction) {
            label = (class + rng.random_range(1..classes)) % classes;
            truth.flipped.insert(id.clone());
        }
        truth.labels.insert(id.clone(), ClassId::from(class));
        manifest.insert(SampleRecord::new(id, rel, digest_bytes(&bytes), ClassId::from(label)))?;
    }
    Ok((manifest, truth))
}
