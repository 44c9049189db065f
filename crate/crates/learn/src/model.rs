//! Auxiliary classifiers: a ResNet50 cut after its third `conv2` bottleneck,
//! and a four-convolution network for quick runs.

use std::path::Path;

use candle_core::{DType, Device, Module, ModuleT, Tensor, D};
use candle_nn::{BatchNorm, Conv2d, Conv2dConfig, Linear, VarBuilder, VarMap};
use serde::{Deserialize, Serialize};

use crate::container::{self, ContainerKind};
use crate::error::{LearnError, Result};
use crate::params::{self, InitScheme};

pub const RESNET_CUT: &str = "conv2_block3_out";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    TruncatedResnet50,
    SmallCnn,
}

impl std::str::FromStr for Architecture {
    type Err = LearnError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "truncated_resnet50" => Ok(Architecture::TruncatedResnet50),
            "small_cnn" => Ok(Architecture::SmallCnn),
            other => Err(LearnError::Config(format!("unknown architecture {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub architecture: Architecture,
    /// `(height, width, channels)`.
    pub input_size: (usize, usize, usize),
    pub num_classes: usize,
    pub truncation_layer: String,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            architecture: Architecture::TruncatedResnet50,
            input_size: (32, 32, 1),
            num_classes: 10,
            truncation_layer: RESNET_CUT.into(),
        }
    }
}

impl ModelConfig {
    pub fn small_cnn(num_classes: usize) -> Self {
        ModelConfig {
            architecture: Architecture::SmallCnn,
            num_classes,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w, c) = self.input_size;
        if self.num_classes < 2 {
            return Err(LearnError::Config("num_classes must be at least 2".into()));
        }
        if h == 0 || w == 0 || c == 0 {
            return Err(LearnError::Config("input dimensions must be positive".into()));
        }
        if h < 8 || w < 8 {
            return Err(LearnError::Config("input must be at least 8x8".into()));
        }
        if self.architecture == Architecture::TruncatedResnet50 && self.truncation_layer != RESNET_CUT {
            return Err(LearnError::Config(format!(
                "unsupported truncation layer {:?}; only {RESNET_CUT} is built",
                self.truncation_layer
            )));
        }
        Ok(())
    }
}

fn conv(cin: usize, cout: usize, k: usize, padding: usize, stride: usize, vb: VarBuilder) -> Result<Conv2d> {
    let cfg = Conv2dConfig {
        padding,
        stride,
        ..Default::default()
    };
    Ok(candle_nn::conv2d(cin, cout, k, cfg, vb)?)
}

fn bn(channels: usize, vb: VarBuilder) -> Result<BatchNorm> {
    let cfg = candle_nn::BatchNormConfig {
        eps: 1.001e-5,
        ..Default::default()
    };
    Ok(candle_nn::batch_norm(channels, cfg, vb)?)
}

/// Max over the last dimension with the whole gradient routed to the first
/// maximal element. Candle's own pooling and max reductions split or
/// duplicate gradients between tied elements.
fn select_max(windows: &Tensor) -> Result<Tensor> {
    let k = windows.dim(D::Minus1)?;
    let idx = windows.argmax_keepdim(D::Minus1)?;
    let positions = Tensor::arange(0u32, k as u32, windows.device())?;
    let mask = idx.broadcast_eq(&positions)?.to_dtype(windows.dtype())?;
    Ok((windows * mask)?.sum(D::Minus1)?)
}

/// Non-overlapping 2×2 max pooling (odd trailing rows and columns dropped).
pub fn max_pool_2x2(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let (oh, ow) = (h / 2, w / 2);
    let x = x.narrow(2, 0, 2 * oh)?.narrow(3, 0, 2 * ow)?;
    let windows = x
        .reshape((n, c, oh, 2, ow, 2))?
        .permute((0, 1, 2, 4, 3, 5))?
        .reshape((n, c, oh, ow, 4))?;
    select_max(&windows)
}

/// 3×3, stride 2 max pooling without padding.
pub fn max_pool_3x3_s2(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    let (oh, ow) = ((h - 1) / 2, (w - 1) / 2);
    let x = x.pad_with_zeros(2, 0, (2 + 2 * oh).saturating_sub(h))?;
    let x = x.pad_with_zeros(3, 0, (2 + 2 * ow).saturating_sub(w))?;
    let (n, c, _, _) = x.dims4()?;
    let mut windows = Vec::with_capacity(9);
    for dy in 0..3 {
        let rows = x
            .narrow(2, dy, 2 * oh)?
            .reshape((n, c, oh, 2, x.dim(3)?))?
            .narrow(3, 0, 1)?
            .squeeze(3)?;
        for dx in 0..3 {
            windows.push(
                rows.narrow(3, dx, 2 * ow)?
                    .reshape((n, c, oh, ow, 2))?
                    .narrow(4, 0, 1)?
                    .squeeze(4)?,
            );
        }
    }
    select_max(&Tensor::stack(&windows, 4)?)
}

struct SmallCnn {
    convs: Vec<Conv2d>,
    head: Linear,
}

impl SmallCnn {
    const WIDTHS: [usize; 4] = [8, 16, 32, 32];

    fn new(config: &ModelConfig, vb: VarBuilder) -> Result<Self> {
        let (h, w, c) = config.input_size;
        let mut cin = c;
        let mut convs = Vec::new();
        for (i, &cout) in Self::WIDTHS.iter().enumerate() {
            convs.push(conv(cin, cout, 3, 1, 1, vb.pp(format!("conv{}", i + 1)))?);
            cin = cout;
        }
        let flat = cin * (h / 8) * (w / 8);
        let head = candle_nn::linear(flat, config.num_classes, vb.pp("head"))?;
        Ok(SmallCnn { convs, head })
    }

    fn features(&self, x: &Tensor) -> Result<Tensor> {
        let mut x = x.clone();
        for (i, c) in self.convs.iter().enumerate() {
            x = c.forward(&x)?.relu()?;
            if i != 2 {
                x = max_pool_2x2(&x)?;
            }
        }
        Ok(x)
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let f = self.features(x)?.flatten_from(1)?;
        Ok(self.head.forward(&f)?)
    }
}

struct Bottleneck {
    conv1: Conv2d,
    bn1: BatchNorm,
    conv2: Conv2d,
    bn2: BatchNorm,
    conv3: Conv2d,
    bn3: BatchNorm,
    shortcut: Option<(Conv2d, BatchNorm)>,
}

impl Bottleneck {
    fn new(cin: usize, width: usize, cout: usize, vb: VarBuilder) -> Result<Self> {
        let shortcut = if cin != cout {
            Some((conv(cin, cout, 1, 0, 1, vb.pp("shortcut"))?, bn(cout, vb.pp("bn_shortcut"))?))
        } else {
            None
        };
        Ok(Bottleneck {
            conv1: conv(cin, width, 1, 0, 1, vb.pp("conv1"))?,
            bn1: bn(width, vb.pp("bn1"))?,
            conv2: conv(width, width, 3, 1, 1, vb.pp("conv2"))?,
            bn2: bn(width, vb.pp("bn2"))?,
            conv3: conv(width, cout, 1, 0, 1, vb.pp("conv3"))?,
            bn3: bn(cout, vb.pp("bn3"))?,
            shortcut,
        })
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let y = self.bn1.forward_t(&self.conv1.forward(x)?, train)?.relu()?;
        let y = self.bn2.forward_t(&self.conv2.forward(&y)?, train)?.relu()?;
        let y = self.bn3.forward_t(&self.conv3.forward(&y)?, train)?;
        let skip = match &self.shortcut {
            Some((c, b)) => b.forward_t(&c.forward(x)?, train)?,
            None => x.clone(),
        };
        Ok((y + skip)?.relu()?)
    }
}

struct TruncatedResnet {
    stem: Conv2d,
    stem_bn: BatchNorm,
    blocks: Vec<Bottleneck>,
    head: Linear,
}

impl TruncatedResnet {
    fn new(config: &ModelConfig, vb: VarBuilder) -> Result<Self> {
        let c = config.input_size.2;
        let blocks = vec![
            Bottleneck::new(64, 64, 256, vb.pp("block1"))?,
            Bottleneck::new(256, 64, 256, vb.pp("block2"))?,
            Bottleneck::new(256, 64, 256, vb.pp("block3"))?,
        ];
        Ok(TruncatedResnet {
            stem: conv(c, 64, 7, 0, 2, vb.pp("stem"))?,
            stem_bn: bn(64, vb.pp("bn_stem"))?,
            blocks,
            head: candle_nn::linear(256, config.num_classes, vb.pp("head"))?,
        })
    }

    fn features(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let x = x.pad_with_zeros(2, 3, 3)?.pad_with_zeros(3, 3, 3)?;
        let x = self.stem_bn.forward_t(&self.stem.forward(&x)?, train)?.relu()?;
        let x = x.pad_with_zeros(2, 1, 1)?.pad_with_zeros(3, 1, 1)?;
        let mut x = max_pool_3x3_s2(&x)?;
        for b in &self.blocks {
            x = b.forward(&x, train)?;
        }
        Ok(x)
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let pooled = self.features(x, train)?.mean(D::Minus1)?.mean(D::Minus1)?;
        Ok(self.head.forward(&pooled)?)
    }
}

enum Net {
    Small(SmallCnn),
    Resnet(TruncatedResnet),
}

/// A classifier with its own parameter store.
pub struct Classifier {
    config: ModelConfig,
    dtype: DType,
    device: Device,
    varmap: VarMap,
    net: Net,
}

#[derive(Serialize, Deserialize)]
struct ClassifierHeader {
    config: ModelConfig,
    dtype: String,
    parameter_count: usize,
}

fn dtype_name(dtype: DType) -> &'static str {
    match dtype {
        DType::F64 => "f64",
        _ => "f32",
    }
}

fn parse_dtype(s: &str) -> Result<DType> {
    match s {
        "f32" => Ok(DType::F32),
        "f64" => Ok(DType::F64),
        other => Err(LearnError::Config(format!("unsupported dtype {other}"))),
    }
}

/// A freshly initialized single-precision classifier.
pub fn build_model(config: &ModelConfig) -> Result<Classifier> {
    Classifier::new(config.clone(), DType::F32, 0)
}

impl Classifier {
    pub fn new(config: ModelConfig, dtype: DType, seed: u64) -> Result<Self> {
        config.validate()?;
        let device = Device::Cpu;
        let varmap = VarMap::new();
        let vb = VarBuilder::from_varmap(&varmap, dtype, &device);
        let net = match config.architecture {
            Architecture::SmallCnn => Net::Small(SmallCnn::new(&config, vb)?),
            Architecture::TruncatedResnet50 => Net::Resnet(TruncatedResnet::new(&config, vb)?),
        };
        params::initialize(&varmap, InitScheme::Kaiming, seed)?;
        Ok(Classifier {
            config,
            dtype,
            device,
            varmap,
            net,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn varmap(&self) -> &VarMap {
        &self.varmap
    }

    pub fn parameter_count(&self) -> usize {
        params::parameter_count(&self.varmap)
    }

    /// Logits for a `(N, C, H, W)` batch; `train` selects batch statistics.
    pub fn logits(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        match &self.net {
            Net::Small(n) => n.forward(x),
            Net::Resnet(n) => n.forward(x, train),
        }
    }

    /// Inference-mode class probabilities.
    pub fn probabilities(&self, x: &Tensor) -> Result<Tensor> {
        Ok(candle_nn::ops::softmax(&self.logits(x, false)?, D::Minus1)?)
    }

    /// Inference-mode feature map before pooling and the head.
    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        match &self.net {
            Net::Small(n) => n.features(x),
            Net::Resnet(n) => n.features(x, false),
        }
    }

    pub fn checksum(&self) -> Result<[u8; 32]> {
        params::checksum(&self.varmap)
    }

    pub(crate) fn tensors(&self) -> Result<Vec<(String, Tensor)>> {
        Ok(params::Snapshot::take(&self.varmap)?.tensors().to_vec())
    }

    pub(crate) fn header(&self) -> serde_json::Value {
        serde_json::to_value(ClassifierHeader {
            config: self.config.clone(),
            dtype: dtype_name(self.dtype).into(),
            parameter_count: self.parameter_count(),
        })
        .expect("header serializes")
    }

    pub(crate) fn from_parts(header: serde_json::Value, tensors: &std::collections::HashMap<String, Tensor>, path: &Path) -> Result<Self> {
        let header: ClassifierHeader = serde_json::from_value(header).map_err(|e| LearnError::Format {
            path: path.to_path_buf(),
            message: format!("bad classifier header: {e}"),
        })?;
        let model = Classifier::new(header.config, parse_dtype(&header.dtype)?, 0)?;
        params::load_into(&model.varmap, tensors)?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        container::write(path, ContainerKind::Classifier, &self.header(), &self.tensors()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = container::read(path)?;
        if c.kind != ContainerKind::Classifier {
            return Err(LearnError::Format {
                path: path.to_path_buf(),
                message: "container does not hold a classifier".into(),
            });
        }
        Self::from_parts(c.header, &c.tensors, path)
    }

    /// An independent copy with identical weights.
    pub fn duplicate(&self) -> Result<Self> {
        let copy = Classifier::new(self.config.clone(), self.dtype, 0)?;
        params::Snapshot::take(&self.varmap)?.restore(&copy.varmap)?;
        Ok(copy)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_input(n: usize, dtype: DType) -> Tensor {
        Tensor::rand(0f32, 1.0, (n, 1, 32, 32), &Device::Cpu)
            .unwrap()
            .to_dtype(dtype)
            .unwrap()
    }

    #[test]
    fn probabilities_are_distributions() {
        for arch in [Architecture::SmallCnn, Architecture::TruncatedResnet50] {
            let cfg = ModelConfig {
                architecture: arch,
                ..ModelConfig::default()
            };
            let m = build_model(&cfg).unwrap();
            let p = m.probabilities(&random_input(3, DType::F32)).unwrap();
            assert_eq!(p.dims(), &[3, 10]);
            for row in p.to_vec2::<f32>().unwrap() {
                assert!(row.iter().all(|v| v.is_finite() && *v >= 0.0));
                assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn resnet_features_are_quarter_resolution() {
        let m = build_model(&ModelConfig::default()).unwrap();
        let f = m.features(&random_input(2, DType::F32)).unwrap();
        assert_eq!(f.dims(), &[2, 256, 8, 8]);
        assert!(m.parameter_count() > 200_000);
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::small_cnn(1).validate().is_err());
        let cut = ModelConfig {
            truncation_layer: "conv3_block4_out".into(),
            ..ModelConfig::default()
        };
        assert!(cut.validate().is_err());
        assert!("vgg16".parse::<Architecture>().is_err());
        assert_eq!("small_cnn".parse::<Architecture>().unwrap(), Architecture::SmallCnn);
    }

    #[test]
    fn max_pool_matches_direct_window_max() {
        let x = Tensor::rand(-1f64, 1.0, (1, 2, 9, 10), &Device::Cpu).unwrap();
        let y = max_pool_3x3_s2(&x).unwrap();
        assert_eq!(y.dims(), &[1, 2, 4, 4]);
        let x4: Vec<Vec<Vec<f64>>> = x.squeeze(0).unwrap().to_vec3().unwrap();
        let y4: Vec<Vec<Vec<f64>>> = y.squeeze(0).unwrap().to_vec3().unwrap();
        for c in 0..2 {
            for i in 0..4 {
                for j in 0..4 {
                    let mut m = f64::NEG_INFINITY;
                    for dy in 0..3 {
                        for dx in 0..3 {
                            m = m.max(x4[c][2 * i + dy][2 * j + dx]);
                        }
                    }
                    assert_eq!(y4[c][i][j], m);
                }
            }
        }
    }

    #[test]
    fn seeded_construction_is_reproducible() {
        let a = Classifier::new(ModelConfig::small_cnn(3), DType::F32, 7).unwrap();
        let b = Classifier::new(ModelConfig::small_cnn(3), DType::F32, 7).unwrap();
        let c = Classifier::new(ModelConfig::small_cnn(3), DType::F32, 8).unwrap();
        assert_eq!(a.checksum().unwrap(), b.checksum().unwrap());
        assert_ne!(a.checksum().unwrap(), c.checksum().unwrap());
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        let m = Classifier::new(ModelConfig::small_cnn(4), DType::F64, 3).unwrap();
        m.save(&path).unwrap();
        let back = Classifier::load(&path).unwrap();
        assert_eq!(back.dtype(), DType::F64);
        assert_eq!(back.config(), m.config());
        assert_eq!(back.checksum().unwrap(), m.checksum().unwrap());
    }
}
