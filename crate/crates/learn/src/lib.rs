//! Neural components of the workbench on the candle CPU backend: the
//! auxiliary classifier used to rank samples by loss, and the conditional
//! GAN that synthesizes hard examples against a frozen classifier.
//!
//! Networks pick their precision at run time through [`candle_core::DType`];
//! training uses `F32`, numerical checks `F64`.

pub mod container;
pub mod data;
pub mod error;
pub mod gan;
pub mod model;
pub mod params;
pub mod train;

pub use candle_core::DType;
pub use data::LabeledImage;
pub use error::{LearnError, Result};
pub use gan::{
    synthesize, train_gan, DiscriminatorSpec, GanBundle, GanHistory, GanNetworks, GanTrainer, GeneratorObjective,
    GeneratorSpec,
};
pub use model::{build_model, Architecture, Classifier, ModelConfig};
pub use train::{evaluate, infer_losses, train, EarlyStopping, History, Monitor, TrainConfig};
