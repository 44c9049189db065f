//! Dataset curation primitives: the sample manifest, hash-based
//! deduplication, seeded augmentation, loss-ranked triage, class balancing
//! and fold planning, and the scalar forms of the synthesizer objectives.
//!
//! Numeric kernels are generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the common choices.

pub mod augment;
pub mod balance;
pub mod dedup;
pub mod error;
pub mod glyphs;
pub mod image;
pub mod manifest;
pub mod objective;
pub mod scalar;
pub mod triage;
pub mod workspace;

pub use error::{Error, Result};
pub use manifest::{ClassId, ClassLabel, DatasetManifest, Digest256, PHash, SampleRecord, SizeReport, Split, Status};
pub use scalar::Scalar;
pub use workspace::Workspace;

/// Single precision image, the training representation.
pub type Image = image::ImageTensor<f32>;
/// Double precision image, used by numerical checks.
pub type Image64 = image::ImageTensor<f64>;
