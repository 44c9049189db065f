//! Conditional GAN whose generator is pushed toward samples the
//! discriminator accepts as real but a frozen classifier gets wrong.
//!
//! Generator: label embedding concatenated to the noise vector, a 4×4
//! projection (a transposed convolution on a 1×1 map), then three
//! nearest-neighbour upsamplings each followed by 3×3 convolutions; eight
//! convolutions in all, batch norm and ReLU after every one but the last,
//! `tanh` mapped to `[0, 1]`.
//!
//! Discriminator: five convolutions with leaky ReLU; the label enters as
//! broadcast embedding planes after the first one.

use std::path::Path;

use candle_core::{DType, Device, Module, ModuleT, Tensor, D};
use candle_nn::optim::{AdamW, Optimizer, ParamsAdamW, SGD};
use candle_nn::{BatchNorm, Conv2d, Conv2dConfig, Embedding, VarBuilder, VarMap};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use workbench_core::dedup::{hash_bytes, DedupConfig};
use workbench_core::objective::{sample_noise, GanOptimizer, GanTrainConfig, SamplerConfig, PROB_EPS};
use workbench_core::{ClassId, DatasetManifest, Image, SampleRecord, SizeReport, Split, Status};

use crate::container::{self, ContainerKind};
use crate::data::{labels_tensor, to_images, to_input, LabeledImage};
use crate::error::{io, LearnError, Result};
use crate::model::Classifier;
use crate::params::{self, InitScheme, Snapshot};

pub const GENERATOR_CONV_LAYERS: usize = 8;
pub const DISCRIMINATOR_CONV_LAYERS: usize = 5;
const IMAGE_SIZE: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorSpec {
    pub noise_length: usize,
    pub embedding_dim: usize,
    /// Width of the last hidden layers; earlier layers use 2× and 4×.
    pub base_channels: usize,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        GeneratorSpec {
            noise_length: 64,
            embedding_dim: 16,
            base_channels: 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscriminatorSpec {
    pub base_channels: usize,
    /// Leaky ReLU slope.
    pub alpha: f64,
    pub label_planes: usize,
}

impl Default for DiscriminatorSpec {
    fn default() -> Self {
        DiscriminatorSpec {
            base_channels: 8,
            alpha: 0.2,
            label_planes: 4,
        }
    }
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.noise_length == 0 || self.embedding_dim == 0 || self.base_channels == 0 {
            return Err(LearnError::Config("generator sizes must be positive".into()));
        }
        Ok(())
    }
}

impl DiscriminatorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.label_planes == 0 {
            return Err(LearnError::Config("discriminator sizes must be positive".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(LearnError::Config("leaky ReLU alpha must lie in (0, 1)".into()));
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
    Ok(candle_nn::batch_norm(channels, candle_nn::BatchNormConfig::default(), vb)?)
}

fn embedding(classes: usize, dim: usize, vb: VarBuilder) -> Result<Embedding> {
    Ok(candle_nn::embedding(classes, dim, vb)?)
}

pub struct Generator {
    spec: GeneratorSpec,
    embed: Embedding,
    project_w: Tensor,
    project_b: Tensor,
    /// Seven 3×3 convolutions; `true` marks one preceded by 2× upsampling.
    convs: Vec<(Conv2d, bool)>,
    bns: Vec<BatchNorm>,
}

impl Generator {
    fn new(spec: GeneratorSpec, num_classes: usize, vb: VarBuilder) -> Result<Self> {
        let c = spec.base_channels;
        let input = spec.noise_length + spec.embedding_dim;
        let project_w = vb.pp("project").get((input, 4 * c, 4, 4), "weight")?;
        let project_b = vb.pp("project").get(4 * c, "bias")?;
        let plan = [
            (4 * c, 4 * c, false),
            (4 * c, 2 * c, true),
            (2 * c, 2 * c, false),
            (2 * c, c, true),
            (c, c, false),
            (c, c, true),
            (c, 1, false),
        ];
        let mut convs = Vec::new();
        for (i, &(cin, cout, up)) in plan.iter().enumerate() {
            convs.push((conv(cin, cout, 3, 1, 1, vb.pp(format!("conv{}", i + 2)))?, up));
        }
        let mut bns = vec![bn(4 * c, vb.pp("bn1"))?];
        for (i, &(_, cout, _)) in plan.iter().take(6).enumerate() {
            bns.push(bn(cout, vb.pp(format!("bn{}", i + 2)))?);
        }
        Ok(Generator {
            spec,
            embed: embedding(num_classes, spec.embedding_dim, vb.pp("embed"))?,
            project_w,
            project_b,
            convs,
            bns,
        })
    }

    pub fn spec(&self) -> &GeneratorSpec {
        &self.spec
    }

    pub fn conv_layers(&self) -> usize {
        1 + self.convs.len()
    }

    /// `(N, 1, 32, 32)` pixel-space images in `[0, 1]` from `(N, noise)`
    /// noise and `(N,)` labels.
    pub fn forward(&self, z: &Tensor, labels: &Tensor, train: bool) -> Result<Tensor> {
        let n = z.dim(0)?;
        let c4 = 4 * self.spec.base_channels;
        let x = Tensor::cat(&[z, &self.embed.forward(labels)?], 1)?;
        let w = self.project_w.reshape((x.dim(1)?, c4 * 16))?;
        let mut h = x
            .matmul(&w)?
            .reshape((n, c4, 4, 4))?
            .broadcast_add(&self.project_b.reshape((1, c4, 1, 1))?)?;
        h = self.bns[0].forward_t(&h, train)?.relu()?;
        let last = self.convs.len() - 1;
        for (i, (conv, up)) in self.convs.iter().enumerate() {
            if *up {
                let (_, _, hh, ww) = h.dims4()?;
                h = h.upsample_nearest2d(2 * hh, 2 * ww)?;
            }
            h = conv.forward(&h)?;
            if i != last {
                h = self.bns[i + 1].forward_t(&h, train)?.relu()?;
            }
        }
        Ok(((h.tanh()? + 1.0)? * 0.5)?)
    }
}

pub struct Discriminator {
    spec: DiscriminatorSpec,
    convs: Vec<Conv2d>,
    embed: Embedding,
}

fn leaky_relu(x: &Tensor, alpha: f64) -> Result<Tensor> {
    Ok(x.maximum(&(x * alpha)?)?)
}

impl Discriminator {
    fn new(spec: DiscriminatorSpec, num_classes: usize, vb: VarBuilder) -> Result<Self> {
        let c = spec.base_channels;
        let convs = vec![
            conv(1, c, 4, 1, 2, vb.pp("conv1"))?,
            conv(c + spec.label_planes, 2 * c, 4, 1, 2, vb.pp("conv2"))?,
            conv(2 * c, 4 * c, 4, 1, 2, vb.pp("conv3"))?,
            conv(4 * c, 4 * c, 3, 1, 1, vb.pp("conv4"))?,
            conv(4 * c, 1, 4, 0, 1, vb.pp("conv5"))?,
        ];
        Ok(Discriminator {
            spec,
            convs,
            embed: embedding(num_classes, spec.label_planes, vb.pp("embed"))?,
        })
    }

    pub fn spec(&self) -> &DiscriminatorSpec {
        &self.spec
    }

    pub fn conv_layers(&self) -> usize {
        self.convs.len()
    }

    /// Probability that each `(N, 1, 32, 32)` network-space image is real.
    pub fn forward(&self, x: &Tensor, labels: &Tensor) -> Result<Tensor> {
        let a = self.spec.alpha;
        let h = leaky_relu(&self.convs[0].forward(x)?, a)?;
        let (n, _, hh, ww) = h.dims4()?;
        let planes = self
            .embed
            .forward(labels)?
            .reshape((n, self.spec.label_planes, 1, 1))?
            .broadcast_as((n, self.spec.label_planes, hh, ww))?;
        let mut h = Tensor::cat(&[&h, &planes], 1)?;
        for conv in &self.convs[1..4] {
            h = leaky_relu(&conv.forward(&h)?, a)?;
        }
        let logit = self.convs[4].forward(&h)?.reshape(n)?;
        Ok((logit.neg()?.exp()? + 1.0)?.recip()?)
    }
}

/// Generator and discriminator with separate parameter stores.
pub struct GanNetworks {
    pub generator: Generator,
    pub discriminator: Discriminator,
    gen_map: VarMap,
    disc_map: VarMap,
    num_classes: usize,
    dtype: DType,
}

impl GanNetworks {
    pub fn new(gen: GeneratorSpec, disc: DiscriminatorSpec, num_classes: usize, dtype: DType, seed: u64) -> Result<Self> {
        gen.validate()?;
        disc.validate()?;
        if num_classes < 2 {
            return Err(LearnError::Config("at least two classes are needed".into()));
        }
        let device = Device::Cpu;
        let gen_map = VarMap::new();
        let disc_map = VarMap::new();
        let generator = Generator::new(gen, num_classes, VarBuilder::from_varmap(&gen_map, dtype, &device))?;
        let discriminator = Discriminator::new(disc, num_classes, VarBuilder::from_varmap(&disc_map, dtype, &device))?;
        params::initialize(&gen_map, InitScheme::Dcgan, seed)?;
        params::initialize(&disc_map, InitScheme::Dcgan, seed.wrapping_add(1))?;
        Ok(GanNetworks {
            generator,
            discriminator,
            gen_map,
            disc_map,
            num_classes,
            dtype,
        })
    }

    pub fn generator_vars(&self) -> &VarMap {
        &self.gen_map
    }

    pub fn discriminator_vars(&self) -> &VarMap {
        &self.disc_map
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn noise_tensor(&self, values: Vec<f64>, count: usize) -> Result<Tensor> {
        let len = self.generator.spec.noise_length;
        Ok(Tensor::from_vec(values, (count, len), &Device::Cpu)?.to_dtype(self.dtype)?)
    }
}

fn clamp_prob(p: &Tensor) -> Result<Tensor> {
    Ok(p.clamp(PROB_EPS, 1.0 - PROB_EPS)?)
}

/// Batch-mean binary cross-entropy against a constant target.
pub fn bce(probs: &Tensor, target_real: bool) -> Result<Tensor> {
    let p = clamp_prob(probs)?;
    let logs = if target_real { p.log()? } else { p.affine(-1.0, 1.0)?.log()? };
    Ok(logs.mean_all()?.neg()?)
}

/// Batch-mean categorical cross-entropy of `(N, C)` probabilities.
pub fn cce(class_probs: &Tensor, labels: &Tensor, num_classes: usize) -> Result<Tensor> {
    let onehot = candle_nn::encoding::one_hot(labels.clone(), num_classes, 1f32, 0f32)?.to_dtype(class_probs.dtype())?;
    let picked = (clamp_prob(class_probs)?.log()? * onehot)?.sum(D::Minus1)?;
    Ok(picked.mean_all()?.neg()?)
}

/// Which generator objective a run optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorObjective {
    /// `δ · BCE(real) − γ · CCE(classifier)`.
    ClassifierFeedback,
    /// `δ · BCE(real)` only; the classifier is not consulted.
    PlainBce,
}

enum Opt {
    Adam(AdamW),
    Sgd(SGD),
}

impl Opt {
    fn new(kind: GanOptimizer, lr: f64, vars: Vec<candle_core::Var>) -> Result<Self> {
        Ok(match kind {
            GanOptimizer::Adam { beta1, beta2 } => Opt::Adam(AdamW::new(
                vars,
                ParamsAdamW {
                    lr,
                    beta1,
                    beta2,
                    eps: 1e-8,
                    weight_decay: 0.0,
                },
            )?),
            GanOptimizer::Sgd => Opt::Sgd(SGD::new(vars, lr)?),
        })
    }

    fn step(&mut self, grads: &candle_core::backprop::GradStore) -> Result<()> {
        match self {
            Opt::Adam(o) => o.step(grads)?,
            Opt::Sgd(o) => o.step(grads)?,
        }
        Ok(())
    }
}

/// Per-iteration generator terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeneratorTerms {
    pub loss: f64,
    pub disc_bce: f64,
    pub classifier_cce: f64,
}

/// Alternating GAN updates against a frozen classifier.
pub struct GanTrainer {
    pub nets: GanNetworks,
    pub classifier: Classifier,
    config: GanTrainConfig,
    objective: GeneratorObjective,
    g_opt: Opt,
    d_opt: Opt,
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Network-space view of pixel-space images.
fn to_network(pixels: &Tensor) -> Result<Tensor> {
    Ok(pixels.affine(-1.0, 1.0)?)
}

impl GanTrainer {
    pub fn new(nets: GanNetworks, classifier: Classifier, config: GanTrainConfig, objective: GeneratorObjective) -> Result<Self> {
        config.validate()?;
        if classifier.config().num_classes != nets.num_classes {
            return Err(LearnError::Mismatch(format!(
                "classifier has {} classes, GAN {}",
                classifier.config().num_classes,
                nets.num_classes
            )));
        }
        if classifier.config().input_size != (IMAGE_SIZE, IMAGE_SIZE, 1) {
            return Err(LearnError::Mismatch("classifier must take 32x32x1 input".into()));
        }
        if classifier.dtype() != nets.dtype {
            return Err(LearnError::Mismatch("classifier and GAN dtypes differ".into()));
        }
        let g_opt = Opt::new(config.optimizer, config.learning_rate, params::trainable(&nets.gen_map))?;
        let d_opt = Opt::new(config.optimizer, config.learning_rate, params::trainable(&nets.disc_map))?;
        Ok(GanTrainer {
            nets,
            classifier,
            config,
            objective,
            g_opt,
            d_opt,
        })
    }

    pub fn config(&self) -> &GanTrainConfig {
        &self.config
    }

    /// One discriminator update on a real batch (network space) and fakes
    /// generated from `z`. Returns the loss before the update.
    pub fn discriminator_step(&mut self, real: &Tensor, real_labels: &Tensor, z: &Tensor, fake_labels: &Tensor) -> Result<f64> {
        let fake = self.nets.generator.forward(z, fake_labels, true)?.detach();
        let d_real = self.nets.discriminator.forward(real, real_labels)?;
        let d_fake = self.nets.discriminator.forward(&to_network(&fake)?, fake_labels)?;
        let loss = (bce(&d_real, true)? + bce(&d_fake, false)?)?;
        let value = scalar(&loss)?;
        if value.is_finite() {
            let grads = loss.backward()?;
            self.d_opt.step(&grads)?;
        }
        Ok(value)
    }

    /// Generator objective as a differentiable scalar.
    pub fn generator_objective(&self, z: &Tensor, labels: &Tensor, gamma: f64) -> Result<(Tensor, GeneratorTerms)> {
        let fake = to_network(&self.nets.generator.forward(z, labels, true)?)?;
        let d_out = self.nets.discriminator.forward(&fake, labels)?;
        let disc = (bce(&d_out, true)? * self.config.delta)?;
        let (loss, cce_value) = match self.objective {
            GeneratorObjective::PlainBce => (disc.clone(), f64::NAN),
            GeneratorObjective::ClassifierFeedback => {
                let probs = self.classifier.probabilities(&fake)?;
                let c = cce(&probs, labels, self.nets.num_classes)?;
                let v = scalar(&c)?;
                ((&disc - (c * gamma)?)?, v)
            }
        };
        let terms = GeneratorTerms {
            loss: scalar(&loss)?,
            disc_bce: scalar(&disc)? / self.config.delta.max(f64::MIN_POSITIVE),
            classifier_cce: cce_value,
        };
        Ok((loss, terms))
    }

    /// One generator update; only generator parameters move.
    pub fn generator_step(&mut self, z: &Tensor, labels: &Tensor, gamma: f64) -> Result<GeneratorTerms> {
        let (loss, terms) = self.generator_objective(z, labels, gamma)?;
        if terms.loss.is_finite() {
            let grads = loss.backward()?;
            self.g_opt.step(&grads)?;
        }
        Ok(terms)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GanLogEntry {
    pub iteration: u64,
    pub gamma: f64,
    pub generator_loss: f64,
    pub discriminator_loss: f64,
    /// `NaN` under [`GeneratorObjective::PlainBce`].
    pub classifier_cce: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GanHistory {
    pub entries: Vec<GanLogEntry>,
    /// Iteration at which a non-finite loss stopped training; the returned
    /// weights are the last snapshot before it.
    pub aborted_at: Option<u64>,
    pub iterations: u64,
    pub classifier_checksum: String,
}

/// A trained synthesizer with the classifier it was trained against.
pub struct GanBundle {
    pub nets: GanNetworks,
    pub classifier: Classifier,
    pub config: GanTrainConfig,
    pub iterations: u64,
    pub classifier_checksum: [u8; 32],
}

#[derive(Serialize, Deserialize)]
struct BundleHeader {
    generator: GeneratorSpec,
    discriminator: DiscriminatorSpec,
    config: GanTrainConfig,
    num_classes: usize,
    dtype: String,
    iterations: u64,
    classifier_checksum: String,
    classifier: serde_json::Value,
}

fn prefixed(prefix: &str, tensors: Vec<(String, Tensor)>) -> impl Iterator<Item = (String, Tensor)> + '_ {
    tensors.into_iter().map(move |(n, t)| (format!("{prefix}.{n}"), t))
}

impl GanBundle {
    /// Short identifier derived from the generator weights.
    pub fn version(&self) -> Result<String> {
        let sum = params::checksum(&self.nets.gen_map)?;
        let mut h = Sha256::new();
        h.update(sum);
        h.update(self.iterations.to_le_bytes());
        Ok(hex::encode(&h.finalize()[..6]))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = BundleHeader {
            generator: self.nets.generator.spec,
            discriminator: self.nets.discriminator.spec,
            config: self.config,
            num_classes: self.nets.num_classes,
            dtype: if self.nets.dtype == DType::F64 { "f64" } else { "f32" }.into(),
            iterations: self.iterations,
            classifier_checksum: hex::encode(self.classifier_checksum),
            classifier: self.classifier.header(),
        };
        let mut tensors: Vec<(String, Tensor)> = Vec::new();
        tensors.extend(prefixed("generator", Snapshot::take(&self.nets.gen_map)?.tensors().to_vec()));
        tensors.extend(prefixed("discriminator", Snapshot::take(&self.nets.disc_map)?.tensors().to_vec()));
        tensors.extend(prefixed("classifier", self.classifier.tensors()?));
        container::write(path, ContainerKind::GanBundle, &header, &tensors)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut c = container::read(path)?;
        if c.kind != ContainerKind::GanBundle {
            return Err(LearnError::Format {
                path: path.to_path_buf(),
                message: "container does not hold a GAN bundle".into(),
            });
        }
        let header: BundleHeader = c.header_as(path)?;
        let dtype = if header.dtype == "f64" { DType::F64 } else { DType::F32 };
        let nets = GanNetworks::new(header.generator, header.discriminator, header.num_classes, dtype, 0)?;
        params::load_into(&nets.gen_map, &c.take_prefixed("generator"))?;
        params::load_into(&nets.disc_map, &c.take_prefixed("discriminator"))?;
        let classifier = Classifier::from_parts(header.classifier, &c.take_prefixed("classifier"), path)?;
        let mut checksum = [0u8; 32];
        hex::decode_to_slice(&header.classifier_checksum, &mut checksum).map_err(|e| LearnError::Format {
            path: path.to_path_buf(),
            message: format!("bad classifier checksum: {e}"),
        })?;
        if classifier.checksum()? != checksum {
            return Err(LearnError::Format {
                path: path.to_path_buf(),
                message: "embedded classifier does not match its checksum".into(),
            });
        }
        Ok(GanBundle {
            nets,
            classifier,
            config: header.config,
            iterations: header.iterations,
            classifier_checksum: checksum,
        })
    }

    /// `count` inference-mode samples of `class`.
    pub fn generate<R: Rng + ?Sized>(&self, class: ClassId, count: usize, sampler: &SamplerConfig, rng: &mut R) -> Result<Vec<Image>> {
        if class.index() >= self.nets.num_classes {
            return Err(LearnError::Mismatch(format!("class {} outside {} classes", class.0, self.nets.num_classes)));
        }
        let mut out = Vec::with_capacity(count);
        let len = self.nets.generator.spec.noise_length;
        let mut remaining = count;
        while remaining > 0 {
            let n = remaining.min(64);
            let cfg = SamplerConfig { count: n, ..*sampler };
            let z = self.nets.noise_tensor(sample_noise::<f64, _>(&cfg, len, rng)?, n)?;
            let labels = labels_tensor(&vec![class; n], &Device::Cpu)?;
            out.extend(to_images(&self.nets.generator.forward(&z, &labels, false)?)?);
            remaining -= n;
        }
        Ok(out)
    }
}

fn check_coverage(dataset: &[LabeledImage], num_classes: usize) -> Result<()> {
    let mut seen = vec![false; num_classes];
    for s in dataset {
        let i = s.label.index();
        if i >= num_classes {
            return Err(LearnError::Mismatch(format!("{}: label {} outside {num_classes} classes", s.id, s.label.0)));
        }
        if (s.image.height(), s.image.width(), s.image.channels()) != (IMAGE_SIZE, IMAGE_SIZE, 1) {
            return Err(LearnError::Mismatch(format!("{}: GAN training needs 32x32x1 images", s.id)));
        }
        seen[i] = true;
    }
    if let Some(c) = seen.iter().position(|s| !s) {
        return Err(LearnError::Config(format!("dataset has no samples of class {c}")));
    }
    Ok(())
}

/// Trains with [`GeneratorObjective::ClassifierFeedback`].
pub fn train_gan(
    dataset: &[LabeledImage],
    classifier: Classifier,
    gen_spec: GeneratorSpec,
    disc_spec: DiscriminatorSpec,
    config: &GanTrainConfig,
) -> Result<(GanBundle, GanHistory)> {
    train_gan_with(dataset, classifier, gen_spec, disc_spec, config, GeneratorObjective::ClassifierFeedback)
}

pub fn train_gan_with(
    dataset: &[LabeledImage],
    classifier: Classifier,
    gen_spec: GeneratorSpec,
    disc_spec: DiscriminatorSpec,
    config: &GanTrainConfig,
    objective: GeneratorObjective,
) -> Result<(GanBundle, GanHistory)> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(LearnError::EmptySplit("GAN training"));
    }
    let num_classes = classifier.config().num_classes;
    check_coverage(dataset, num_classes)?;
    let dtype = classifier.dtype();
    let frozen = classifier.checksum()?;
    let nets = GanNetworks::new(gen_spec, disc_spec, num_classes, dtype, config.seed)?;
    let mut trainer = GanTrainer::new(nets, classifier, *config, objective)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let noise_len = gen_spec.noise_length;
    let b = config.batch_size;
    let mut history = GanHistory {
        classifier_checksum: hex::encode(frozen),
        ..GanHistory::default()
    };
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0usize;
    let mut good = (Snapshot::take(&trainer.nets.gen_map)?, Snapshot::take(&trainer.nets.disc_map)?);
    let device = Device::Cpu;

    let mut it = 0u64;
    while it < config.max_iterations {
        let mut real_idx = Vec::with_capacity(b);
        while real_idx.len() < b {
            if cursor == order.len() {
                use rand::seq::SliceRandom;
                order = (0..dataset.len()).collect();
                order.shuffle(&mut rng);
                cursor = 0;
            }
            real_idx.push(order[cursor]);
            cursor += 1;
        }
        let real_images: Vec<&Image> = real_idx.iter().map(|&i| &dataset[i].image).collect();
        let real = to_input(&real_images, dtype, &device)?;
        let real_labels = labels_tensor(&real_idx.iter().map(|&i| dataset[i].label).collect::<Vec<_>>(), &device)?;
        let mut fake_labels = || -> Result<Tensor> {
            let l: Vec<ClassId> = (0..b).map(|_| ClassId::from(rng.random_range(0..num_classes))).collect();
            labels_tensor(&l, &device)
        };
        let y1 = fake_labels()?;
        let y2 = fake_labels()?;
        let z1 = trainer
            .nets
            .noise_tensor(sample_noise::<f64, _>(&SamplerConfig::untruncated(b), noise_len, &mut rng)?, b)?;
        let z2 = trainer
            .nets
            .noise_tensor(sample_noise::<f64, _>(&SamplerConfig::untruncated(b), noise_len, &mut rng)?, b)?;

        let gamma = config.gamma(it);
        let d_loss = trainer.discriminator_step(&real, &real_labels, &z1, &y1)?;
        let g = if d_loss.is_finite() {
            trainer.generator_step(&z2, &y2, gamma)?
        } else {
            GeneratorTerms {
                loss: f64::NAN,
                disc_bce: f64::NAN,
                classifier_cce: f64::NAN,
            }
        };
        let entry = GanLogEntry {
            iteration: it,
            gamma,
            generator_loss: g.loss,
            discriminator_loss: d_loss,
            classifier_cce: g.classifier_cce,
        };
        if !(d_loss.is_finite() && g.loss.is_finite()) {
            log::error!("non-finite loss at iteration {it}; restoring last good weights");
            good.0.restore(&trainer.nets.gen_map)?;
            good.1.restore(&trainer.nets.disc_map)?;
            history.entries.push(entry);
            history.aborted_at = Some(it);
            break;
        }
        it += 1;
        let log_now = config.log_every > 0 && (it % config.log_every == 0 || it == config.max_iterations);
        if log_now {
            log::info!(
                "iteration {it}: gamma {gamma:.4} G {:.4} D {:.4} CCE {:.4}",
                g.loss,
                d_loss,
                g.classifier_cce
            );
            history.entries.push(entry);
            good = (Snapshot::take(&trainer.nets.gen_map)?, Snapshot::take(&trainer.nets.disc_map)?);
        }
        if config.checksum_every > 0 && it % config.checksum_every == 0 && trainer.classifier.checksum()? != frozen {
            return Err(LearnError::ClassifierDrift { iteration: it });
        }
    }
    if trainer.classifier.checksum()? != frozen {
        return Err(LearnError::ClassifierDrift { iteration: it });
    }
    history.iterations = it;
    let GanTrainer { nets, classifier, .. } = trainer;
    Ok((
        GanBundle {
            nets,
            classifier,
            config: *config,
            iterations: it,
            classifier_checksum: frozen,
        },
        history,
    ))
}

/// Writes `count` samples of `class` under `root/synthetic/<version>/` and
/// adds them to `manifest` as certified-synthetic training records. Refuses
/// before writing anything if the training budget would be exceeded.
pub fn synthesize(
    bundle: &GanBundle,
    manifest: &mut DatasetManifest,
    root: &Path,
    class: ClassId,
    count: usize,
    sampler: &SamplerConfig,
    seed: u64,
) -> Result<Vec<String>> {
    if count == 0 {
        return Ok(Vec::new());
    }
    if manifest.num_classes() != bundle.nets.num_classes {
        return Err(LearnError::Mismatch(format!(
            "manifest has {} classes, bundle {}",
            manifest.num_classes(),
            bundle.nets.num_classes
        )));
    }
    let train = manifest.count_split(Split::Train) + count;
    SizeReport::new(train, manifest.count_split(Split::Validation), manifest.n_max).into_result()?;
    let version = bundle.version()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(class.0 as u64);
    let images = bundle.generate(class, count, sampler, &mut rng)?;
    let rel_dir = format!("synthetic/{version}");
    let dir = root.join(&rel_dir);
    std::fs::create_dir_all(&dir).map_err(|e| io(&dir, e))?;
    let hash_cfg = DedupConfig::default();
    let mut records = Vec::with_capacity(count);
    for (i, img) in images.iter().enumerate() {
        let id = format!("syn-{version}-s{seed}-c{}-{i:05}", class.0);
        if manifest.get(&id).is_some() {
            return Err(LearnError::Core(workbench_core::Error::InvalidRecord {
                id,
                message: "synthetic id already present; use another seed".into(),
            }));
        }
        let rel = format!("{rel_dir}/{id}.png");
        let path = root.join(&rel);
        img.save_png(&path)?;
        let bytes = std::fs::read(&path).map_err(|e| io(&path, e))?;
        let hashes = hash_bytes(&bytes, &hash_cfg).map_err(|message| LearnError::Format {
            path: path.clone(),
            message,
        })?;
        let mut r = SampleRecord::new(id, rel, hashes.byte_hash, class);
        r.pixel_hash = Some(hashes.pixel_hash);
        r.phash = Some(hashes.phash);
        r.status = Status::CertifiedSynthetic;
        r.split = Split::Train;
        r.note = Some(format!(
            "synthesized by bundle {version} ({} iterations), seed {seed}, truncation {}",
            bundle.iterations,
            sampler.truncation.map_or("none".to_string(), |t| t.to_string())
        ));
        records.push(r);
    }
    let ids = records.iter().map(|r| r.id.clone()).collect();
    for r in records {
        manifest.insert(r)?;
    }
    Ok(ids)
}
