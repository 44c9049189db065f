//! Labeled images and their tensor form.
//!
//! Networks see `1 − pixel`, so ink is positive and the white background is
//! zero, which keeps zero padding neutral.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use workbench_core::triage::LossFailure;
use workbench_core::{ClassId, DatasetManifest, Image};

use crate::error::{LearnError, Result};

#[derive(Debug, Clone)]
pub struct LabeledImage {
    pub id: String,
    pub label: ClassId,
    pub image: Image,
}

/// `(N, C, H, W)` network input from same-shaped images.
pub fn to_input(images: &[&Image], dtype: DType, device: &Device) -> Result<Tensor> {
    let first = images.first().ok_or(LearnError::EmptySplit("batch"))?;
    let (h, w, c) = (first.height(), first.width(), first.channels());
    let mut data = Vec::with_capacity(images.len() * h * w * c);
    for img in images {
        if (img.height(), img.width(), img.channels()) != (h, w, c) {
            return Err(LearnError::Mismatch(format!(
                "image shape {}x{}x{} differs from {h}x{w}x{c}",
                img.height(),
                img.width(),
                img.channels()
            )));
        }
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    data.push(1.0 - img.get(y, x, ch));
                }
            }
        }
    }
    Ok(Tensor::from_vec(data, (images.len(), c, h, w), device)?.to_dtype(dtype)?)
}

/// Inverse of [`to_input`] for `(N, C, H, W)` pixel-space tensors in `[0, 1]`.
pub fn to_images(t: &Tensor) -> Result<Vec<Image>> {
    let (n, c, h, w) = t.dims4()?;
    let flat = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    Ok((0..n)
        .map(|i| {
            let base = i * c * h * w;
            Image::from_fn(h, w, c, |y, x, ch| flat[base + ch * h * w + y * w + x])
        })
        .collect())
}

pub fn labels_tensor(labels: &[ClassId], device: &Device) -> Result<Tensor> {
    let v: Vec<u32> = labels.iter().map(|c| c.0 as u32).collect();
    Ok(Tensor::from_vec(v, labels.len(), device)?)
}

/// Loads the listed samples; unreadable or unknown ones become failures.
pub fn load_samples<'a>(
    manifest: &DatasetManifest,
    root: &Path,
    ids: impl IntoIterator<Item = &'a str>,
) -> (Vec<LabeledImage>, Vec<LossFailure>) {
    let mut samples = Vec::new();
    let mut failures = Vec::new();
    for id in ids {
        let Some(record) = manifest.get(id) else {
            failures.push(LossFailure {
                id: id.to_string(),
                message: "not in manifest".into(),
            });
            continue;
        };
        match Image::load(&root.join(&record.image_path)) {
            Ok(image) => samples.push(LabeledImage {
                id: id.to_string(),
                label: record.label,
                image,
            }),
            Err(e) => failures.push(LossFailure {
                id: id.to_string(),
                message: e.to_string(),
            }),
        }
    }
    (samples, failures)
}
