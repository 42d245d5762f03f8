//! The three networks: shared extractor, segmentation decoder, classifier.
//!
//! Geometry (all convolutions stride 1):
//!
//! * extractor: three residual blocks `conv3x3 (+1x1 projection skip) -> BN
//!   [-> attention on block 3] -> leaky ReLU -> maxpool`, channels
//!   `1 -> 16 -> 32 -> 64`, spatial `80 -> 40 -> 20 -> 10`;
//! * decoder: three `transposed conv3x3 (stride 2) -> BN` stages each followed
//!   by a `conv3x3 -> BN -> attention` stage (the last one is a plain
//!   `conv3x3@8`), then `conv3x3@2` logits at `80 x 80`;
//! * classifier: `conv4x4@128 -> BN -> ReLU -> maxpool -> conv4x4@256 -> BN ->
//!   ReLU -> maxpool -> global average -> linear -> softmax`. The 4x4 kernels
//!   use "same" padding (one row/column before, two after), so the spatial
//!   chain is `10 -> 5 -> 2`, the second pool dropping the odd row/column.

mod checkpoint;
pub mod layers;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CheckpointEntry, CheckpointManifest, CHECKPOINT_MAGIC};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{ensure_dim, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{softmax_channels, BnMode, ConvGeometry, Padding, PoolMode, Shape, Tensor};
use crate::CHIP;
use layers::{BatchNorm, Cbam, Conv, Layer, Linear, Sequential, SlotKind, SlotMut, SlotRef, TransposedConv};

pub const FEATURE_CHANNELS: usize = 64;
pub const FEATURE_SIZE: usize = 10;
/// Segmentation classes (background, target).
pub const SEG_CLASSES: usize = 2;

/// Knobs the architecture leaves open; recorded in every run manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub leaky_slope: f64,
    pub bn_eps: f64,
    pub bn_momentum: f64,
    pub attention_reduction: usize,
    pub spatial_kernel: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            leaky_slope: 0.01,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
            attention_reduction: crate::attention::DEFAULT_REDUCTION,
            spatial_kernel: crate::attention::DEFAULT_SPATIAL_KERNEL,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Part {
    Extractor,
    Decoder,
    Classifier,
}

impl Part {
    pub const ALL: [Part; 3] = [Part::Extractor, Part::Decoder, Part::Classifier];

    pub fn prefix(self) -> &'static str {
        match self {
            Part::Extractor => "extractor",
            Part::Decoder => "decoder",
            Part::Classifier => "classifier",
        }
    }
}

fn same3() -> ConvGeometry {
    ConvGeometry::new(3, 3, 1, Padding::uniform(1))
}

#[derive(Clone, Debug)]
enum Skip<T> {
    Identity,
    Projection(Conv<T>),
}

#[derive(Clone, Debug)]
pub struct ResidualBlock<T> {
    conv: Conv<T>,
    skip: Skip<T>,
    bn: BatchNorm<T>,
    attention: Option<Cbam<T>>,
    act: Layer<T>,
    pool: Layer<T>,
}

impl<T: Scalar> ResidualBlock<T> {
    fn new(c_in: usize, c_out: usize, attention: bool, arch: &ArchConfig) -> Result<Self> {
        let skip = if c_in == c_out {
            Skip::Identity
        } else {
            Skip::Projection(Conv::new(c_in, c_out, ConvGeometry::new(1, 1, 1, Padding::default())))
        };
        Ok(ResidualBlock {
            conv: Conv::new(c_in, c_out, same3()),
            skip,
            bn: BatchNorm::new(c_out, arch.bn_eps, arch.bn_momentum),
            attention: if attention {
                Some(Cbam::new(c_out, arch.attention_reduction, arch.spatial_kernel)?)
            } else {
                None
            },
            act: Layer::leaky_relu(arch.leaky_slope),
            pool: Layer::max_pool(PoolMode::Exact),
        })
    }

    fn forward(&mut self, x: &Tensor<T>, mode: BnMode) -> Result<Tensor<T>> {
        let mut h = self.conv.forward(x)?;
        match &mut self.skip {
            Skip::Identity => h.add_assign(x)?,
            Skip::Projection(p) => h.add_assign(&p.forward(x)?)?,
        }
        h = self.bn.forward(&h, mode)?;
        if let Some(a) = &mut self.attention {
            h = a.forward(&h)?;
        }
        h = self.act.forward(&h, mode)?;
        self.pool.forward(&h, mode)
    }

    fn backward(&mut self, grad: &Tensor<T>, param_grads: bool) -> Result<Tensor<T>> {
        let mut g = self.pool.backward(grad, param_grads)?;
        g = self.act.backward(&g, param_grads)?;
        if let Some(a) = &mut self.attention {
            g = a.backward(&g, param_grads)?;
        }
        g = self.bn.backward(&g, param_grads)?;
        let mut gx = self.conv.backward(&g, param_grads)?;
        match &mut self.skip {
            Skip::Identity => gx.add_assign(&g)?,
            Skip::Projection(p) => gx.add_assign(&p.backward(&g, param_grads)?)?,
        }
        Ok(gx)
    }

    fn reset_parameters(&mut self, rng: &mut ChaCha8Rng) {
        self.conv.reset_parameters(rng);
        if let Skip::Projection(p) = &mut self.skip {
            p.reset_parameters(rng);
        }
        if let Some(a) = &mut self.attention {
            a.reset_parameters(rng);
        }
    }

    fn slots<'a>(&'a self, prefix: &str, out: &mut Vec<SlotRef<'a, T>>) {
        self.conv.slots(&format!("{prefix}.conv"), out);
        if let Skip::Projection(p) = &self.skip {
            p.slots(&format!("{prefix}.skip"), out);
        }
        self.bn.slots(&format!("{prefix}.bn"), out);
        if let Some(a) = &self.attention {
            a.slots(&format!("{prefix}.attention"), out);
        }
    }

    fn slots_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<SlotMut<'a, T>>) {
        self.conv.slots_mut(&format!("{prefix}.conv"), out);
        if let Skip::Projection(p) = &mut self.skip {
            p.slots_mut(&format!("{prefix}.skip"), out);
        }
        self.bn.slots_mut(&format!("{prefix}.bn"), out);
        if let Some(a) = &mut self.attention {
            a.slots_mut(&format!("{prefix}.attention"), out);
        }
    }
}

/// One row of the layer table: which network, the layer, and its normalization.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerRow {
    pub part: Part,
    pub layer: &'static str,
    pub norm: &'static str,
}

/// The layer table the networks are built from.
pub fn layer_inventory() -> Vec<LayerRow> {
    use Part::*;
    let row = |part, layer, norm| LayerRow { part, layer, norm };
    vec![
        row(Extractor, "Conv3x3@16", "BatchNorm"),
        row(Extractor, "LeakyReLU + MaxPool", "Neither"),
        row(Extractor, "Conv3x3@32", "BatchNorm"),
        row(Extractor, "LeakyReLU + MaxPool", "Neither"),
        row(Extractor, "Conv3x3@64", "Both"),
        row(Extractor, "LeakyReLU + MaxPool", "Neither"),
        row(Decoder, "TransConv3x3@64", "BatchNorm"),
        row(Decoder, "Conv3x3@32", "Both"),
        row(Decoder, "TransConv3x3@32", "BatchNorm"),
        row(Decoder, "Conv3x3@16", "Both"),
        row(Decoder, "TransConv3x3@16", "BatchNorm"),
        row(Decoder, "Conv3x3@8", "Neither"),
        row(Decoder, "Conv3x3@2", "Neither"),
        row(Classifier, "Conv4x4@128", "BatchNorm"),
        row(Classifier, "ReLU + MaxPool", "Neither"),
        row(Classifier, "Conv4x4@256", "BatchNorm"),
        row(Classifier, "ReLU + MaxPool", "Neither"),
        row(Classifier, "SoftMax", "Neither"),
    ]
}

#[derive(Clone, Debug)]
pub struct SfasModel<T> {
    num_classes: usize,
    seed: u64,
    arch: ArchConfig,
    blocks: Vec<ResidualBlock<T>>,
    decoder: Sequential<T>,
    classifier: Sequential<T>,
    classifier_probs: Option<Tensor<T>>,
}

/// Builds a freshly initialized model; see [`SfasModel::new`].
pub fn init_model<T: Scalar>(num_classes: usize, seed: u64) -> Result<SfasModel<T>> {
    SfasModel::new(num_classes, seed)
}

impl<T: Scalar> SfasModel<T> {
    /// Fan-in scaled uniform weights, zero biases, unit batch-norm scale;
    /// deterministic in `seed`.
    pub fn new(num_classes: usize, seed: u64) -> Result<Self> {
        Self::with_arch(num_classes, seed, ArchConfig::default())
    }

    pub fn with_arch(num_classes: usize, seed: u64, arch: ArchConfig) -> Result<Self> {
        let mut m = Self::zeroed(num_classes, arch)?;
        m.seed = seed;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for b in &mut m.blocks {
            b.reset_parameters(&mut rng);
        }
        m.decoder.reset_parameters(&mut rng);
        m.classifier.reset_parameters(&mut rng);
        Ok(m)
    }

    /// All weights and biases zero; batch-norm at identity.
    pub fn zeroed(num_classes: usize, arch: ArchConfig) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::invalid("init_model", format!("need at least 2 classes, got {num_classes}")));
        }
        let blocks = vec![
            ResidualBlock::new(1, 16, false, &arch)?,
            ResidualBlock::new(16, 32, false, &arch)?,
            ResidualBlock::new(32, 64, true, &arch)?,
        ];

        let up = |c_in, c_out| {
            Layer::TransposedConv(TransposedConv::new(c_in, c_out, ConvGeometry::new(3, 3, 2, Padding::uniform(1)), 1))
        };
        let conv = |c_in, c_out| Layer::Conv(Conv::new(c_in, c_out, same3()));
        let bn = |c| Layer::BatchNorm(BatchNorm::new(c, arch.bn_eps, arch.bn_momentum));
        let att = |c| -> Result<Layer<T>> { Ok(Layer::Attention(Cbam::new(c, arch.attention_reduction, arch.spatial_kernel)?)) };
        let act = || Layer::leaky_relu(arch.leaky_slope);

        let mut decoder = Sequential::new();
        decoder
            .push("up1", up(64, 64))
            .push("up1_bn", bn(64))
            .push("up1_act", act())
            .push("conv1", conv(64, 32))
            .push("conv1_bn", bn(32))
            .push("conv1_attention", att(32)?)
            .push("conv1_act", act())
            .push("up2", up(32, 32))
            .push("up2_bn", bn(32))
            .push("up2_act", act())
            .push("conv2", conv(32, 16))
            .push("conv2_bn", bn(16))
            .push("conv2_attention", att(16)?)
            .push("conv2_act", act())
            .push("up3", up(16, 16))
            .push("up3_bn", bn(16))
            .push("up3_act", act())
            .push("conv3", conv(16, 8))
            .push("conv3_act", act())
            .push("seg", conv(8, SEG_CLASSES));

        let conv4 = |c_in, c_out| Layer::Conv(Conv::new(c_in, c_out, ConvGeometry::new(4, 4, 1, Padding::same(4))));
        let mut classifier = Sequential::new();
        classifier
            .push("conv1", conv4(64, 128))
            .push("conv1_bn", bn(128))
            .push("conv1_act", Layer::relu())
            .push("pool1", Layer::max_pool(PoolMode::Exact))
            .push("conv2", conv4(128, 256))
            .push("conv2_bn", bn(256))
            .push("conv2_act", Layer::relu())
            .push("pool2", Layer::max_pool(PoolMode::Floor))
            .push("gap", Layer::GlobalAvgPool { input_shape: None })
            .push("fc", Layer::Linear(Linear::new(256, num_classes)));

        Ok(SfasModel {
            num_classes,
            seed: 0,
            arch,
            blocks,
            decoder,
            classifier,
            classifier_probs: None,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    fn check_input(op: &'static str, x: &Tensor<T>) -> Result<()> {
        let s = x.shape();
        ensure_dim(op, "C", 1, s.c)?;
        ensure_dim(op, "H", CHIP, s.h)?;
        ensure_dim(op, "W", CHIP, s.w)
    }

    pub fn extractor_forward(&mut self, x: &Tensor<T>, mode: BnMode) -> Result<Tensor<T>> {
        Self::check_input("extractor_forward", x)?;
        let mut h = self.blocks[0].forward(x, mode)?;
        for b in &mut self.blocks[1..] {
            h = b.forward(&h, mode)?;
        }
        Ok(h)
    }

    /// Output of each residual block in turn; the last is the feature map.
    pub fn extractor_trace(&mut self, x: &Tensor<T>, mode: BnMode) -> Result<Vec<Tensor<T>>> {
        Self::check_input("extractor_trace", x)?;
        let mut out: Vec<Tensor<T>> = Vec::with_capacity(self.blocks.len());
        for b in &mut self.blocks {
            let h = b.forward(out.last().unwrap_or(x), mode)?;
            out.push(h);
        }
        Ok(out)
    }

    /// Named output of every decoder layer; the last is the logits.
    pub fn decoder_trace(&mut self, f: &Tensor<T>, mode: BnMode) -> Result<Vec<(String, Tensor<T>)>> {
        Self::check_features("decoder_forward", f)?;
        self.decoder.forward_trace(f, mode)
    }

    pub fn extractor_backward(&mut self, grad: &Tensor<T>, param_grads: bool) -> Result<Tensor<T>> {
        let mut g = grad.clone();
        for b in self.blocks.iter_mut().rev() {
            g = b.backward(&g, param_grads)?;
        }
        Ok(g)
    }

    fn check_features(op: &'static str, f: &Tensor<T>) -> Result<()> {
        let s = f.shape();
        ensure_dim(op, "C", FEATURE_CHANNELS, s.c)?;
        ensure_dim(op, "H", FEATURE_SIZE, s.h)?;
        ensure_dim(op, "W", FEATURE_SIZE, s.w)
    }

    /// Two-channel segmentation logits at chip resolution.
    pub fn decoder_forward(&mut self, f: &Tensor<T>, mode: BnMode) -> Result<Tensor<T>> {
        Self::check_features("decoder_forward", f)?;
        self.decoder.forward(f, mode)
    }

    pub fn decoder_backward(&mut self, grad_logits: &Tensor<T>, param_grads: bool) -> Result<Tensor<T>> {
        self.decoder.backward(grad_logits, param_grads)
    }

    /// Pre-softmax class scores, `N x C x 1 x 1`.
    pub fn classifier_logits(&mut self, f: &Tensor<T>, mode: BnMode) -> Result<Tensor<T>> {
        Self::check_features("classifier_forward", f)?;
        self.classifier.forward(f, mode)
    }

    /// Class probabilities, `N x C x 1 x 1`, each row summing to one.
    pub fn classifier_forward(&mut self, f: &Tensor<T>, mode: BnMode) -> Result<Tensor<T>> {
        let logits = self.classifier_logits(f, mode)?;
        let probs = softmax_channels(&logits);
        self.classifier_probs = Some(probs.clone());
        Ok(probs)
    }

    /// Backward from the gradient with respect to the classifier logits.
    pub fn classifier_backward(&mut self, grad_logits: &Tensor<T>, param_grads: bool) -> Result<Tensor<T>> {
        self.classifier.backward(grad_logits, param_grads)
    }

    pub fn slots(&self, part: Part) -> Vec<SlotRef<'_, T>> {
        let mut out = Vec::new();
        match part {
            Part::Extractor => {
                for (i, b) in self.blocks.iter().enumerate() {
                    b.slots(&format!("extractor.block{}", i + 1), &mut out);
                }
            }
            Part::Decoder => self.decoder.slots("decoder", &mut out),
            Part::Classifier => self.classifier.slots("classifier", &mut out),
        }
        out
    }

    pub fn slots_mut(&mut self, part: Part) -> Vec<SlotMut<'_, T>> {
        self.slots_mut_of(&[part])
    }

    /// Mutable slots of several parts at once, in extractor, decoder,
    /// classifier order.
    pub fn slots_mut_of(&mut self, parts: &[Part]) -> Vec<SlotMut<'_, T>> {
        let mut out = Vec::new();
        if parts.contains(&Part::Extractor) {
            for (i, b) in self.blocks.iter_mut().enumerate() {
                b.slots_mut(&format!("extractor.block{}", i + 1), &mut out);
            }
        }
        if parts.contains(&Part::Decoder) {
            self.decoder.slots_mut("decoder", &mut out);
        }
        if parts.contains(&Part::Classifier) {
            self.classifier.slots_mut("classifier", &mut out);
        }
        out
    }

    pub fn all_slots(&self) -> Vec<SlotRef<'_, T>> {
        Part::ALL.iter().flat_map(|&p| self.slots(p)).collect()
    }

    pub fn zero_grad(&mut self, part: Part) {
        for s in self.slots_mut(part) {
            if let Some(g) = s.grad {
                g.fill(T::zero());
            }
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.all_slots()
            .iter()
            .filter(|s| s.kind == SlotKind::Param)
            .map(|s| s.value.len())
            .sum()
    }

    /// SHA-256 over every parameter and buffer of `part` (names and values).
    pub fn part_hash(&self, part: Part) -> String {
        let mut h = Sha256::new();
        for s in self.slots(part) {
            h.update(s.name.as_bytes());
            for v in s.value {
                h.update(v.as_f64().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Copies every parameter and buffer into another precision.
    pub fn cast<U: Scalar>(&self) -> Result<SfasModel<U>> {
        let mut out = SfasModel::<U>::zeroed(self.num_classes, self.arch.clone())?;
        out.seed = self.seed;
        for part in Part::ALL {
            let src = self.slots(part);
            for (d, s) in out.slots_mut(part).into_iter().zip(src) {
                debug_assert_eq!(d.name, s.name);
                for (dv, sv) in d.value.iter_mut().zip(s.value) {
                    *dv = U::lit(sv.as_f64());
                }
            }
        }
        Ok(out)
    }
}

/// Argmax over the class axis of an `N x C x 1 x 1` tensor.
pub fn predicted_classes<T: Scalar>(probs: &Tensor<T>) -> Vec<usize> {
    let s = probs.shape();
    (0..s.n)
        .map(|n| {
            let row = probs.item(n);
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Per-pixel argmax of two-channel logits; 1 marks target.
pub fn predicted_masks<T: Scalar>(logits: &Tensor<T>) -> Vec<u8> {
    let s = logits.shape();
    let p = s.plane();
    let mut out = Vec::with_capacity(s.n * p);
    for n in 0..s.n {
        let (bg, fg) = (logits.plane(n, 0), logits.plane(n, 1));
        out.extend(bg.iter().zip(fg).map(|(&b, &f)| u8::from(f > b)));
    }
    out
}

pub(crate) fn input_shape(batch: usize) -> Shape {
    Shape::new(batch, 1, CHIP, CHIP)
}
