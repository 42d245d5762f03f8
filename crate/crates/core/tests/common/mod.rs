//! Finite-difference gradient harness shared by the integration tests and the
//! acceptance runner.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sfas_core::attention::{
    channel_attention_backward, channel_attention_forward, spatial_attention_backward, spatial_attention_forward,
    AttentionParams,
};
use sfas_core::loss::{recognition_loss, recognition_loss_grad, segmentation_loss, segmentation_loss_with_grad};
use sfas_core::model::layers::{BatchNorm, Cbam, Conv, Layer, Linear, SlotKind, SlotMut, TransposedConv};
use sfas_core::model::{Part, SfasModel};
use sfas_core::tensor::{
    leaky_relu, leaky_relu_backward, max_relative_error, softmax_channels, softmax_channels_backward, BnMode,
    ConvGeometry, Padding, PoolMode, Shape, Tensor,
};

pub const FD_EPS: f64 = 1e-5;
/// Gradients below this magnitude are compared absolutely.
pub const FD_FLOOR: f64 = 1e-6;
/// Looser floor for whole-network compositions, whose losses sum many
/// thousands of terms and so carry more rounding noise.
pub const COMPOSITION_FLOOR: f64 = 1e-5;

/// Central difference of `at(delta) = loss(x + delta e_i)` that steps around
/// kinks.
///
/// Max pools and leaky ReLUs make deep compositions piecewise smooth, so a
/// large step may straddle a kink while a tiny one drowns in rounding noise.
/// The step walks down a ladder until two neighbouring estimates agree;
/// failing that, the closest neighbouring pair wins.
pub fn kink_aware_diff(mut at: impl FnMut(f64) -> f64, floor: f64) -> f64 {
    const LADDER: [f64; 6] = [1e-5, 3e-6, 1e-6, 3e-7, 1e-7, 3e-8];
    let mut est: Vec<f64> = Vec::with_capacity(LADDER.len());
    let mut best = (f64::INFINITY, 0.0);
    for h in LADDER {
        est.push((at(h) - at(-h)) / (2.0 * h));
        if let [.., a, b] = est[..] {
            let gap = (a - b).abs() / a.abs().max(b.abs()).max(floor);
            if gap < 2e-5 {
                return b;
            }
            if gap < best.0 {
                best = (gap, 0.5 * (a + b));
            }
        }
    }
    best.1
}

pub fn rand_tensor(shape: Shape, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..shape.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// One compared gradient: a parameter slot or the input.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub name: String,
    pub rel_err: f64,
    pub checked: usize,
}

/// Something with a scalar loss of an input tensor and named parameters.
pub trait Probe {
    fn loss(&mut self, x: &Tensor<f64>) -> f64;
    /// Forward and backward; returns the input gradient and leaves parameter
    /// gradients in the slot accumulators.
    fn analytic(&mut self, x: &Tensor<f64>) -> Tensor<f64>;
    fn slots(&mut self) -> Vec<SlotMut<'_, f64>>;
}

/// Evenly spaced indices plus the position of the largest gradient.
fn sample_indices(grad: &[f64], budget: usize) -> Vec<usize> {
    if grad.len() <= budget {
        return (0..grad.len()).collect();
    }
    let step = grad.len() as f64 / budget as f64;
    let mut idx: Vec<usize> = (0..budget).map(|i| (i as f64 * step) as usize).collect();
    let big = grad
        .iter()
        .enumerate()
        .fold(0, |b, (i, v)| if v.abs() > grad[b].abs() { i } else { b });
    idx.push(big);
    idx.sort_unstable();
    idx.dedup();
    idx
}

/// Compares analytic gradients of `probe` against central differences on at
/// most `budget` entries per slot and of the input.
pub fn check_probe<P: Probe>(probe: &mut P, x: &Tensor<f64>, budget: usize, floor: f64) -> Vec<GradCheck> {
    for s in probe.slots() {
        if let Some(g) = s.grad {
            g.fill(0.0);
        }
    }
    let gx = probe.analytic(x);
    let param_grads: Vec<(String, Vec<f64>)> = probe
        .slots()
        .into_iter()
        .filter(|s| s.kind == SlotKind::Param)
        .map(|s| (s.name, s.grad.expect("param slot has a gradient").to_vec()))
        .collect();
    let mut out = Vec::new();

    let idx = sample_indices(gx.data(), budget);
    let mut probe_x = x.clone();
    let mut fd = Vec::with_capacity(idx.len());
    for &i in &idx {
        let orig = probe_x.data()[i];
        fd.push(kink_aware_diff(
            |d| {
                probe_x.data_mut()[i] = orig + d;
                let l = probe.loss(&probe_x);
                probe_x.data_mut()[i] = orig;
                l
            },
            floor,
        ));
    }
    let an: Vec<f64> = idx.iter().map(|&i| gx.data()[i]).collect();
    out.push(GradCheck {
        name: "input".into(),
        rel_err: max_relative_error(&an, &fd, floor),
        checked: idx.len(),
    });

    for (slot_no, (name, grad)) in param_grads.iter().enumerate() {
        let idx = sample_indices(grad, budget);
        let mut fd = Vec::with_capacity(idx.len());
        for &i in &idx {
            let orig = nudge(probe, slot_no, i, None);
            fd.push(kink_aware_diff(
                |d| {
                    nudge(probe, slot_no, i, Some(orig + d));
                    let l = probe.loss(x);
                    nudge(probe, slot_no, i, Some(orig));
                    l
                },
                floor,
            ));
        }
        let an: Vec<f64> = idx.iter().map(|&i| grad[i]).collect();
        out.push(GradCheck {
            name: name.clone(),
            rel_err: max_relative_error(&an, &fd, floor),
            checked: idx.len(),
        });
    }
    out
}

/// Reads (and optionally overwrites) entry `i` of the `slot_no`-th parameter slot.
fn nudge<P: Probe>(probe: &mut P, slot_no: usize, i: usize, value: Option<f64>) -> f64 {
    let mut slots: Vec<_> = probe.slots().into_iter().filter(|s| s.kind == SlotKind::Param).collect();
    let v = &mut slots[slot_no].value[i];
    let old = *v;
    if let Some(new) = value {
        *v = new;
    }
    old
}

/// `sum(layer(x) * r)` for a fixed random `r`.
pub struct LayerProbe {
    pub layer: Layer<f64>,
    pub mode: BnMode,
    pub r: Option<Tensor<f64>>,
    pub seed: u64,
}

impl LayerProbe {
    pub fn new(layer: Layer<f64>, seed: u64) -> Self {
        LayerProbe {
            layer,
            mode: BnMode::Probe,
            r: None,
            seed,
        }
    }

    fn weights(&mut self, s: Shape) -> &Tensor<f64> {
        self.r.get_or_insert_with(|| rand_tensor(s, self.seed ^ 0x5eed))
    }
}

impl Probe for LayerProbe {
    fn loss(&mut self, x: &Tensor<f64>) -> f64 {
        let y = self.layer.forward(x, self.mode).unwrap();
        y.dot(self.weights(y.shape())).unwrap()
    }

    fn analytic(&mut self, x: &Tensor<f64>) -> Tensor<f64> {
        let y = self.layer.forward(x, self.mode).unwrap();
        let r = self.weights(y.shape()).clone();
        self.layer.backward(&r, true).unwrap()
    }

    fn slots(&mut self) -> Vec<SlotMut<'_, f64>> {
        let mut v = Vec::new();
        self.layer.slots_mut("layer", &mut v);
        v
    }
}

/// Segmentation loss through extractor and decoder.
pub struct SegProbe {
    pub model: SfasModel<f64>,
    pub mask: Vec<u8>,
}

impl Probe for SegProbe {
    fn loss(&mut self, x: &Tensor<f64>) -> f64 {
        let f = self.model.extractor_forward(x, BnMode::Probe).unwrap();
        let logits = self.model.decoder_forward(&f, BnMode::Probe).unwrap();
        segmentation_loss(&logits, &self.mask).unwrap()
    }

    fn analytic(&mut self, x: &Tensor<f64>) -> Tensor<f64> {
        let f = self.model.extractor_forward(x, BnMode::Probe).unwrap();
        let logits = self.model.decoder_forward(&f, BnMode::Probe).unwrap();
        let (_, g) = segmentation_loss_with_grad(&logits, &self.mask).unwrap();
        let gf = self.model.decoder_backward(&g, true).unwrap();
        self.model.extractor_backward(&gf, true).unwrap()
    }

    fn slots(&mut self) -> Vec<SlotMut<'_, f64>> {
        self.model.slots_mut_of(&[Part::Extractor, Part::Decoder])
    }
}

/// Recognition loss through extractor and classifier.
pub struct RecProbe {
    pub model: SfasModel<f64>,
    pub labels: Vec<usize>,
}

impl Probe for RecProbe {
    fn loss(&mut self, x: &Tensor<f64>) -> f64 {
        let f = self.model.extractor_forward(x, BnMode::Probe).unwrap();
        let p = self.model.classifier_forward(&f, BnMode::Probe).unwrap();
        recognition_loss(&p, &self.labels).unwrap()
    }

    fn analytic(&mut self, x: &Tensor<f64>) -> Tensor<f64> {
        let f = self.model.extractor_forward(x, BnMode::Probe).unwrap();
        let p = self.model.classifier_forward(&f, BnMode::Probe).unwrap();
        let g = recognition_loss_grad(&p, &self.labels).unwrap();
        let gf = self.model.classifier_backward(&g, true).unwrap();
        self.model.extractor_backward(&gf, true).unwrap()
    }

    fn slots(&mut self) -> Vec<SlotMut<'_, f64>> {
        self.model.slots_mut_of(&[Part::Extractor, Part::Classifier])
    }
}

/// Random batch-norm affine parameters so the check does not sit at identity.
fn randomize_bn(layer: &mut Layer<f64>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v = Vec::new();
    layer.slots_mut("bn", &mut v);
    for s in v.into_iter().filter(|s| s.kind == SlotKind::Param) {
        for x in s.value.iter_mut() {
            *x = rng.random_range(0.5..1.5);
        }
    }
}

/// Every layer type of the model, on small inputs (at most 2x3x8x8 where the
/// layer allows), with the largest relative error per layer.
pub fn layer_suite() -> Vec<(String, Vec<GradCheck>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut cases: Vec<(&str, Layer<f64>, Shape)> = Vec::new();
    let same3 = ConvGeometry::new(3, 3, 1, Padding::uniform(1));
    cases.push(("conv3x3", Layer::Conv(Conv::new(3, 4, same3)), Shape::new(2, 3, 8, 8)));
    cases.push((
        "conv1x1 projection",
        Layer::Conv(Conv::new(3, 4, ConvGeometry::new(1, 1, 1, Padding::default()))),
        Shape::new(2, 3, 8, 8),
    ));
    cases.push((
        "conv4x4 same",
        Layer::Conv(Conv::new(3, 4, ConvGeometry::new(4, 4, 1, Padding::same(4)))),
        Shape::new(2, 3, 5, 5),
    ));
    cases.push((
        "transposed conv stride 2",
        Layer::TransposedConv(TransposedConv::new(3, 2, ConvGeometry::new(3, 3, 2, Padding::uniform(1)), 1)),
        Shape::new(2, 3, 4, 4),
    ));
    cases.push((
        "batchnorm (batch statistics)",
        Layer::BatchNorm(BatchNorm::new(3, 1e-5, 0.1)),
        Shape::new(2, 3, 8, 8),
    ));
    cases.push(("attention", Layer::Attention(Cbam::new(4, 2, 3).unwrap()), Shape::new(2, 4, 6, 6)));
    cases.push(("leaky relu", Layer::leaky_relu(0.01), Shape::new(2, 3, 8, 8)));
    cases.push(("max pool", Layer::max_pool(PoolMode::Exact), Shape::new(2, 3, 8, 8)));
    cases.push(("max pool floor", Layer::max_pool(PoolMode::Floor), Shape::new(2, 3, 5, 5)));
    cases.push(("global average pool", Layer::GlobalAvgPool { input_shape: None }, Shape::new(2, 3, 4, 4)));
    cases.push(("linear", Layer::Linear(Linear::new(6, 4)), Shape::new(2, 6, 1, 1)));

    let mut out = Vec::new();
    for (i, (name, mut layer, shape)) in cases.into_iter().enumerate() {
        layer.reset_parameters(&mut rng);
        if matches!(layer, Layer::BatchNorm(_)) {
            randomize_bn(&mut layer, i as u64);
        }
        let x = rand_tensor(shape, 100 + i as u64);
        let mut probe = LayerProbe::new(layer, 200 + i as u64);
        out.push((name.to_string(), check_probe(&mut probe, &x, 64, FD_FLOOR)));
    }
    out
}

/// Elementwise ops (leaky ReLU away from its kink, softmax) compared over
/// every entry.
pub fn elementwise_suite() -> Vec<(String, f64)> {
    let shape = Shape::new(2, 3, 4, 4);
    let mut x = rand_tensor(shape, 11);
    for v in x.data_mut() {
        if v.abs() < 1e-2 {
            *v += 0.05;
        }
    }
    let r = rand_tensor(shape, 12);
    let fd = |f: &dyn Fn(&Tensor<f64>) -> f64| {
        sfas_core::tensor::finite_diff_grad(|t: &Tensor<f64>| f(t), &x, FD_EPS)
    };
    let mut out = Vec::new();

    let lrelu = |t: &Tensor<f64>| leaky_relu(t, 0.01).dot(&r).unwrap();
    let an = leaky_relu_backward(&x, &r, 0.01).unwrap();
    out.push(("leaky relu".into(), max_relative_error(an.data(), fd(&lrelu).data(), FD_FLOOR)));

    let soft = |t: &Tensor<f64>| softmax_channels(t).dot(&r).unwrap();
    let an = softmax_channels_backward(&softmax_channels(&x), &r).unwrap();
    out.push(("softmax".into(), max_relative_error(an.data(), fd(&soft).data(), FD_FLOOR)));
    out
}

/// The two attention gates through their functional interface, input and
/// parameter gradients.
pub fn attention_suite() -> Vec<(String, f64)> {
    let shape = Shape::new(2, 8, 5, 5);
    let x = rand_tensor(shape, 21);
    let r = rand_tensor(shape, 22);
    let mut params = AttentionParams::<f64>::zeros(8, 4, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for v in params.channel_w1.iter_mut().chain(params.channel_w2.iter_mut()) {
        *v = rng.random_range(-1.0..1.0);
    }
    for v in params.spatial_kernel.data_mut() {
        *v = rng.random_range(-1.0..1.0);
    }
    let mut out = Vec::new();

    let (_, cache) = channel_attention_forward(&x, &params).unwrap();
    let (dx, dw1, _dw2) = channel_attention_backward(&cache, &params, &r).unwrap();
    let f = |t: &Tensor<f64>| channel_attention_forward(t, &params).unwrap().0.dot(&r).unwrap();
    let fd = sfas_core::tensor::finite_diff_grad(f, &x, FD_EPS);
    out.push(("channel gate input".into(), max_relative_error(dx.data(), fd.data(), FD_FLOOR)));
    let w1 = Tensor::from_vec(Shape::new(1, 1, 1, params.channel_w1.len()), params.channel_w1.clone()).unwrap();
    let fw = |w: &Tensor<f64>| {
        let mut p = params.clone();
        p.channel_w1 = w.data().to_vec();
        channel_attention_forward(&x, &p).unwrap().0.dot(&r).unwrap()
    };
    let fd = sfas_core::tensor::finite_diff_grad(fw, &w1, FD_EPS);
    out.push(("channel gate weights".into(), max_relative_error(&dw1, fd.data(), FD_FLOOR)));

    let (_, cache) = spatial_attention_forward(&x, &params).unwrap();
    let (dx, dk) = spatial_attention_backward(&cache, &params, &r).unwrap();
    let f = |t: &Tensor<f64>| spatial_attention_forward(t, &params).unwrap().0.dot(&r).unwrap();
    let fd = sfas_core::tensor::finite_diff_grad(f, &x, FD_EPS);
    out.push(("spatial gate input".into(), max_relative_error(dx.data(), fd.data(), FD_FLOOR)));
    let fk = |k: &Tensor<f64>| {
        let mut p = params.clone();
        p.spatial_kernel = k.clone();
        spatial_attention_forward(&x, &p).unwrap().0.dot(&r).unwrap()
    };
    let fd = sfas_core::tensor::finite_diff_grad(fk, &params.spatial_kernel, FD_EPS);
    out.push(("spatial gate kernel".into(), max_relative_error(dk.data(), fd.data(), FD_FLOOR)));
    out
}

/// A chip-sized random batch with a random binary mask.
pub fn chip_batch(n: usize, seed: u64) -> (Tensor<f64>, Vec<u8>) {
    let x = rand_tensor(Shape::new(n, 1, 80, 80), seed).map(|v| 0.5 + 0.5 * v);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    let mask = (0..n * 6400).map(|_| u8::from(rng.random_bool(0.2))).collect();
    (x, mask)
}

/// Extractor+decoder under the segmentation loss on a two-sample batch.
pub fn seg_composition(budget: usize) -> Vec<GradCheck> {
    let (x, mask) = chip_batch(2, 31);
    let mut probe = SegProbe {
        model: SfasModel::new(4, 3).unwrap(),
        mask,
    };
    check_probe(&mut probe, &x, budget, COMPOSITION_FLOOR)
}

/// Extractor+classifier under the recognition loss on a four-sample batch.
pub fn rec_composition(budget: usize) -> Vec<GradCheck> {
    let (x, _) = chip_batch(4, 41);
    let mut probe = RecProbe {
        model: SfasModel::new(4, 5).unwrap(),
        labels: vec![0, 1, 2, 3],
    };
    check_probe(&mut probe, &x, budget, COMPOSITION_FLOOR)
}

pub fn worst(checks: &[GradCheck]) -> &GradCheck {
    checks
        .iter()
        .max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
        .expect("at least one gradient compared")
}
