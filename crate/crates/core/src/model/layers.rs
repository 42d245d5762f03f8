//! Stateful layers: parameters, gradient accumulators and forward caches.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    channel_attention_backward, channel_attention_forward, spatial_attention_backward, spatial_attention_forward,
    AttentionParams, ChannelCache, SpatialCache,
};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::conv::{conv2d_backward_with, transposed_conv2d_backward_with};
use crate::tensor::{
    batchnorm2d, batchnorm2d_backward, conv2d_with, global_avg_pool, global_avg_pool_backward, leaky_relu,
    leaky_relu_backward, maxpool2d, maxpool2d_backward, transposed_conv2d_with, BatchNormCache, BnMode,
    ConvGeometry, PoolMode, Shape, Tensor,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SlotKind {
    /// Learnable, updated by the optimizer.
    Param,
    /// Running statistic, updated by forward passes in train mode.
    Buffer,
}

/// Borrowed view of one named parameter or buffer.
pub struct SlotRef<'a, T> {
    pub name: String,
    pub shape: Shape,
    pub kind: SlotKind,
    pub value: &'a [T],
    pub grad: Option<&'a [T]>,
}

pub struct SlotMut<'a, T> {
    pub name: String,
    pub shape: Shape,
    pub kind: SlotKind,
    pub value: &'a mut [T],
    pub grad: Option<&'a mut [T]>,
}

pub(crate) fn vec_shape(len: usize) -> Shape {
    Shape::new(len, 1, 1, 1)
}

fn missing_cache(layer: &str) -> Error {
    Error::invalid("backward", format!("{layer}: backward called without a cached forward pass"))
}

fn accumulate<T: Scalar>(acc: &mut [T], g: &[T]) {
    for (a, &b) in acc.iter_mut().zip(g) {
        *a += b;
    }
}

fn kaiming_uniform<T: Scalar>(values: &mut [T], fan_in: usize, rng: &mut ChaCha8Rng) {
    let bound = (6.0 / fan_in as f64).sqrt();
    for v in values {
        *v = T::lit(rng.random_range(-bound..bound));
    }
}

#[derive(Clone, Debug)]
pub struct Conv<T> {
    pub weight: Tensor<T>,
    pub bias: Vec<T>,
    pub geometry: ConvGeometry,
    grad_w: Vec<T>,
    grad_b: Vec<T>,
    input: Option<Tensor<T>>,
}

impl<T: Scalar> Conv<T> {
    pub fn new(c_in: usize, c_out: usize, geometry: ConvGeometry) -> Self {
        let w = Shape::new(c_out, c_in, geometry.kh, geometry.kw);
        Conv {
            weight: Tensor::zeros(w),
            bias: vec![T::zero(); c_out],
            geometry,
            grad_w: vec![T::zero(); w.len()],
            grad_b: vec![T::zero(); c_out],
            input: None,
        }
    }

    pub fn reset_parameters(&mut self, rng: &mut ChaCha8Rng) {
        let s = self.weight.shape();
        kaiming_uniform(self.weight.data_mut(), s.c * s.h * s.w, rng);
        self.bias.fill(T::zero());
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = conv2d_with(x, &self.weight, Some(&self.bias), &self.geometry)?;
        self.input = Some(x.clone());
        Ok(y)
    }

    pub fn backward(&mut self, grad: &Tensor<T>, param_grads: bool) -> Result<Tensor<T>> {
        let x = self.input.as_ref().ok_or_else(|| missing_cache("conv"))?;
        let (gx, gw) = conv2d_backward_with(x, &self.weight, grad, &self.geometry, param_grads)?;
        if let Some((gw, gb)) = gw {
            accumulate(&mut self.grad_w, gw.data());
            accumulate(&mut self.grad_b, &gb);
        }
        Ok(gx)
    }

    pub(crate) fn slots<'a>(&'a self, prefix: &str, out: &mut Vec<SlotRef<'a, T>>) {
        out.push(SlotRef {
            name: format!("{prefix}.weight"),
            shape: self.weight.shape(),
            kind: SlotKind::Param,
            value: self.weight.data(),
            grad: Some(&self.grad_w),
        });
        out.push(SlotRef {
            name: format!("{prefix}.bias"),
            shape: vec_shape(self.bias.len()),
            kind: SlotKind::Param,
            value: &self.bias,
            grad: Some(&self.grad_b),
        });
    }

    pub(crate) fn slots_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<SlotMut<'a, T>>) {
        let shape = self.weight.shape();
        let blen = self.bias.len();
        out.push(SlotMut {
            name: format!("{prefix}.weight"),
            shape,
            kind: SlotKind::Param,
            value: self.weight.data_mut(),
            grad: Some(&mut self.grad_w),
        });
        out.push(SlotMut {
            name: format!("{prefix}.bias"),
            shape: vec_shape(blen),
            kind: SlotKind::Param,
            value: &mut self.bias,
            grad: Some(&mut self.grad_b),
        });
    }
}

/// Transposed convolution; `weight` is `C_in x C_out x k x k`.
#[derive(Clone, Debug)]
pub struct TransposedConv<T> {
    pub weight: Tensor<T>,
    pub bias: Vec<T>,
    pub geometry: ConvGeometry,
    pub out_pad: usize,
    grad_w: Vec<T>,
    grad_b: Vec<T>,
    input: Option<Tensor<T>>,
}

impl<T: Scalar> TransposedConv<T> {
    pub fn new(c_in: usize, c_out: usize, geometry: ConvGeometry, out_pad: usize) -> Self {
        let w = Shape::new(c_in, c_out, geometry.kh, geometry.kw);
        TransposedConv {
            weight: Tensor::zeros(w),
            bias: vec![T::zero(); c_out],
            geometry,
            out_pad,
            grad_w: vec![T::zero(); w.len()],
            grad_b: vec![T::zero(); c_out],
            input: None,
        }
    }

    pub fn reset_parameters(&mut self, rng: &mut ChaCha8Rng) {
        let s = self.weight.shape();
        // each output pixel of a stride-s transposed conv sees ~k*k/s^2 taps per input channel
        let taps = (s.h * s.w / (self.geometry.stride * self.geometry.stride)).max(1);
        kaiming_uniform(self.weight.data_mut(), s.n * taps, rng);
        self.bias.fill(T::zero());
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = transposed_conv2d_with(x, &self.weight, Some(&self.bias), &self.geometry, self.out_pad)?;
        self.input = Some(x.clone());
        Ok(y)
    }

    pub fn backward(&mut self, grad: &Tensor<T>, param_grads: bool) -> Result<Tensor<T>> {
        let x = self.input.as_ref().ok_or_else(|| missing_cache("transposed conv"))?;
        let (gx, gw) =
            transposed_conv2d_backward_with(x, &self.weight, grad, &self.geometry, self.out_pad, param_grads)?;
        if let Some((gw, gb)) = gw {
            accumulate(&mut self.grad_w, gw.data());
            accumulate(&mut self.grad_b, &gb);
        }
        Ok(gx)
    }

    pub(crate) fn slots<'a>(&'a self, prefix: &str, out: &mut Vec<SlotRef<'a, T>>) {
        out.push(SlotRef {
            name: format!("{prefix}.weight"),
            shape: self.weight.shape(),
            kind: SlotKind::Param,
            value: self.weight.data(),
            grad: Some(&self.grad_w),
        });
        out.push(SlotRef {
            name: format!("{prefix}.bias"),
            shape: vec_shape(self.bias.len()),
            kind: SlotKind::Param,
            value: &self.bias,
            grad: Some(&self.grad_b),
        });
    }

    pub(crate) fn slots_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<SlotMut<'a, T>>) {
        let shape = self.weight.shape();
        let blen = self.bias.len();
        out.push(SlotMut {
            name: format!("{prefix}.weight"),
            shape,
            kind: SlotKind::Param,
            value: self.weight.data_mut(),
            grad: Some(&mut self.grad_w),
        });
        out.push(SlotMut {
            name: format!("{prefix}.bias"),
            shape: vec_shape(blen),
            kind: SlotKind::Param,
            value: &mut self.bias,
            grad: Some(&mut self.grad_b),
        });
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub eps: T,
    pub momentum: T,
    grad_gamma: Vec<T>,
    grad_beta: Vec<T>,
    cache: Option<BatchNormCache<T>>,
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(channels: usize, eps: f64, momentum: f64) -> Self {
        BatchNorm {
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            eps: T::lit(eps),
            momentum: T::lit(momentum),
            grad_gamma: vec![T::zero(); channels],
            grad_beta: vec![T::zero(); channels],
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: BnMode) -> Result<Tensor<T>> {
        let (y, cache) = batchnorm2d(
            x,
            &self.gamma,
            &self.beta,
            &mut self.running_mean,
            &mut self.running_var,
            mode,
            self.eps,
            self.momentum,
        )?;
        self.cache = Some(cache);
        Ok(y)
    }

    pub fn backward(&mut self, grad: &Tensor<T>, param_grads: bool) -> Result<Tensor<T>> {
        let cache = self.cache.as_ref().ok_or_else(|| missing_cache("batchnorm"))?;
        let g = batchnorm2d_backward(cache, &self.gamma, grad)?;
        if param_grads {
            accumulate(&mut self.grad_gamma, &g.gamma);
            accumulate(&mut self.grad_beta, &g.beta);
        }
        Ok(g.x)
    }

    pub(crate) fn slots<'a>(&'a self, prefix: &str, out: &mut Vec<SlotRef<'a, T>>) {
        let s = vec_shape(self.gamma.len());
        out.push(SlotRef {
            name: format!("{prefix}.gamma"),
            shape: s,
            kind: SlotKind::Param,
            value: &self.gamma,
            grad: Some(&self.grad_gamma),
        });
        out.push(SlotRef {
            name: format!("{prefix}.beta"),
            shape: s,
            kind: SlotKind::Param,
            value: &self.beta,
            grad: Some(&self.grad_beta),
        });
        out.push(SlotRef {
            name: format!("{prefix}.running_mean"),
            shape: s,
            kind: SlotKind::Buffer,
            value: &self.running_mean,
            grad: None,
        });
        out.push(SlotRef {
            name: format!("{prefix}.running_var"),
            shape: s,
            kind: SlotKind::Buffer,
            value: &self.running_var,
            grad: None,
        });
    }

    pub(crate) fn slots_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<SlotMut<'a, T>>) {
        let s = vec_shape(self.gamma.len());
        out.push(SlotMut {
            name: format!("{prefix}.gamma"),
            shape: s,
            kind: SlotKind::Param,
            value: &mut self.gamma,
            grad: Some(&mut self.grad_gamma),
        });
        out.push(SlotMut {
            name: format!("{prefix}.beta"),
            shape: s,
            kind: SlotKind::Param,
            value: &mut self.beta,
            grad: Some(&mut self.grad_beta),
        });
        out.push(SlotMut {
            name: format!("{prefix}.running_mean"),
            shape: s,
            kind: SlotKind::Buffer,
            value: &mut self.running_mean,
            grad: None,
        });
        out.push(SlotMut {
            name: format!("{prefix}.running_var"),
            shape: s,
            kind: SlotKind::Buffer,
            value: &mut self.running_var,
            grad: None,
        });
    }
}

/// Channel gate followed by spatial gate.
#[derive(Clone, Debug)]
pub struct Cbam<T> {
    pub params: AttentionParams<T>,
    grad_w1: Vec<T>,
    grad_w2: Vec<T>,
    grad_spatial: Vec<T>,
    cache: Option<(ChannelCache<T>, SpatialCache<T>)>,
}

impl<T: Scalar> Cbam<T> {
    pub fn new(channels: usize, reduction: usize, kernel: usize) -> Result<Self> {
        let params = AttentionParams::zeros(channels, reduction, kernel)?;
        Ok(Cbam {
            grad_w1: vec![T::zero(); params.channel_w1.len()],
            grad_w2: vec![T::zero(); params.channel_w2.len()],
            grad_spatial: vec![T::zero(); params.spatial_kernel.shape().len()],
            params,
            cache: None,
        })
    }

    pub fn reset_parameters(&mut self, rng: &mut ChaCha8Rng) {
        let (c, hid) = (self.params.channels, self.params.hidden());
        kaiming_uniform(&mut self.params.channel_w1, c, rng);
        kaiming_uniform(&mut self.params.channel_w2, hid, rng);
        let k = self.params.spatial_kernel.shape();
        kaiming_uniform(self.params.spatial_kernel.data_mut(), k.c * k.h * k.w, rng);
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (mid, cc) = channel_attention_forward(x, &self.params)?;
        let (y, sc) = spatial_attention_forward(&mid, &self.params)?;
        self.cache = Some((cc, sc));
        Ok(y)
    }

    pub fn backward(&mut self, grad: &Tensor<T>, param_grads: bool) -> Result<Tensor<T>> {
        let (cc, sc) = self.cache.as_ref().ok_or_else(|| missing_cache("attention"))?;
        let (gmid, gk) = spatial_attention_backward(sc, &self.params, grad)?;
        let (gx, gw1, gw2) = channel_attention_backward(cc, &self.params, &gmid)?;
        if param_grads {
            accumulate(&mut self.grad_w1, &gw1);
            accumulate(&mut self.grad_w2, &gw2);
            accumulate(&mut self.grad_spatial, gk.data());
        }
        Ok(gx)
    }

    pub(crate) fn slots<'a>(&'a self, prefix: &str, out: &mut Vec<SlotRef<'a, T>>) {
        let (c, hid) = (self.params.channels, self.params.hidden());
        out.push(SlotRef {
            name: format!("{prefix}.channel_w1"),
            shape: Shape::new(hid, c, 1, 1),
            kind: SlotKind::Param,
            value: &self.params.channel_w1,
            grad: Some(&self.grad_w1),
        });
        out.push(SlotRef {
            name: format!("{prefix}.channel_w2"),
            shape: Shape::new(c, hid, 1, 1),
            kind: SlotKind::Param,
            value: &self.params.channel_w2,
            grad: Some(&self.grad_w2),
        });
        out.push(SlotRef {
            name: format!("{prefix}.spatial_kernel"),
            shape: self.params.spatial_kernel.shape(),
            kind: SlotKind::Param,
            value: self.params.spatial_kernel.data(),
            grad: Some(&self.grad_spatial),
        });
    }

    pub(crate) fn slots_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<SlotMut<'a, T>>) {
        let (c, hid) = (self.params.channels, self.params.hidden());
        let kshape = self.params.spatial_kernel.shape();
        out.push(SlotMut {
            name: format!("{prefix}.channel_w1"),
            shape: Shape::new(hid, c, 1, 1),
            kind: SlotKind::Param,
            value: &mut self.params.channel_w1,
            grad: Some(&mut self.grad_w1),
        });
        out.push(SlotMut {
            name: format!("{prefix}.channel_w2"),
            shape: Shape::new(c, hid, 1, 1),
            kind: SlotKind::Param,
            value: &mut self.params.channel_w2,
            grad: Some(&mut self.grad_w2),
        });
        out.push(SlotMut {
            name: format!("{prefix}.spatial_kernel"),
            shape: kshape,
            kind: SlotKind::Param,
            value: self.params.spatial_kernel.data_mut(),
            grad: Some(&mut self.grad_spatial),
        });
    }
}

/// `y = x W^T + b` on `N x in x 1 x 1` inputs.
#[derive(Clone, Debug)]
pub struct Linear<T> {
    pub weight: Tensor<T>,
    pub bias: Vec<T>,
    grad_w: Vec<T>,
    grad_b: Vec<T>,
    input: Option<Tensor<T>>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(inputs: usize, outputs: usize) -> Self {
        let s = Shape::new(outputs, inputs, 1, 1);
        Linear {
            weight: Tensor::zeros(s),
            bias: vec![T::zero(); outputs],
            grad_w: vec![T::zero(); s.len()],
            grad_b: vec![T::zero(); outputs],
            input: None,
        }
    }

    pub fn reset_parameters(&mut self, rng: &mut ChaCha8Rng) {
        let inputs = self.weight.shape().c;
        kaiming_uniform(self.weight.data_mut(), inputs, rng);
        self.bias.fill(T::zero());
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let ws = self.weight.shape();
        let xs = x.shape();
        crate::error::ensure_dim("linear", "input features", ws.c, xs.item())?;
        let mut y = Tensor::zeros(Shape::new(xs.n, ws.n, 1, 1));
        T::gemm(xs.n, ws.c, ws.n, T::one(), x.data(), (ws.c, 1), self.weight.data(), (1, ws.c), T::zero(), y.data_mut(), (ws.n, 1));
        for n in 0..xs.n {
            for (v, &b) in y.item_mut(n).iter_mut().zip(&self.bias) {
                *v += b;
            }
        }
        self.input = Some(x.clone());
        Ok(y)
    }

    pub fn backward(&mut self, grad: &Tensor<T>, param_grads: bool) -> Result<Tensor<T>> {
        let x = self.input.as_ref().ok_or_else(|| missing_cache("linear"))?;
        let ws = self.weight.shape();
        let n = x.shape().n;
        crate::error::ensure_dim("linear backward", "grad features", ws.n, grad.shape().item())?;
        let mut gx = Tensor::zeros(x.shape());
        T::gemm(n, ws.n, ws.c, T::one(), grad.data(), (ws.n, 1), self.weight.data(), (ws.c, 1), T::zero(), gx.data_mut(), (ws.c, 1));
        if param_grads {
            T::gemm(ws.n, n, ws.c, T::one(), grad.data(), (1, ws.n), x.data(), (ws.c, 1), T::one(), &mut self.grad_w, (ws.c, 1));
            for i in 0..n {
                accumulate(&mut self.grad_b, grad.item(i));
            }
        }
        Ok(gx)
    }

    pub(crate) fn slots<'a>(&'a self, prefix: &str, out: &mut Vec<SlotRef<'a, T>>) {
        out.push(SlotRef {
            name: format!("{prefix}.weight"),
            shape: self.weight.shape(),
            kind: SlotKind::Param,
            value: self.weight.data(),
            grad: Some(&self.grad_w),
        });
        out.push(SlotRef {
            name: format!("{prefix}.bias"),
            shape: vec_shape(self.bias.len()),
            kind: SlotKind::Param,
            value: &self.bias,
            grad: Some(&self.grad_b),
        });
    }

    pub(crate) fn slots_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<SlotMut<'a, T>>) {
        let shape = self.weight.shape();
        let blen = self.bias.len();
        out.push(SlotMut {
            name: format!("{prefix}.weight"),
            shape,
            kind: SlotKind::Param,
            value: self.weight.data_mut(),
            grad: Some(&mut self.grad_w),
        });
        out.push(SlotMut {
            name: format!("{prefix}.bias"),
            shape: vec_shape(blen),
            kind: SlotKind::Param,
            value: &mut self.bias,
            grad: Some(&mut self.grad_b),
        });
    }
}

#[derive(Clone, Debug)]
pub enum Layer<T> {
    Conv(Conv<T>),
    TransposedConv(TransposedConv<T>),
    BatchNorm(BatchNorm<T>),
    Attention(Cbam<T>),
    LeakyRelu { slope: T, input: Option<Tensor<T>> },
    MaxPool { mode: PoolMode, cache: Option<(Shape, Vec<usize>)> },
    GlobalAvgPool { input_shape: Option<Shape> },
    Linear(Linear<T>),
}

impl<T: Scalar> Layer<T> {
    pub fn leaky_relu(slope: f64) -> Self {
        Layer::LeakyRelu {
            slope: T::lit(slope),
            input: None,
        }
    }

    pub fn relu() -> Self {
        Self::leaky_relu(0.0)
    }

    pub fn max_pool(mode: PoolMode) -> Self {
        Layer::MaxPool { mode, cache: None }
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: BnMode) -> Result<Tensor<T>> {
        match self {
            Layer::Conv(l) => l.forward(x),
            Layer::TransposedConv(l) => l.forward(x),
            Layer::BatchNorm(l) => l.forward(x, mode),
            Layer::Attention(l) => l.forward(x),
            Layer::LeakyRelu { slope, input } => {
                let y = leaky_relu(x, *slope);
                *input = Some(x.clone());
                Ok(y)
            }
            Layer::MaxPool { mode, cache } => {
                let p = maxpool2d(x, *mode)?;
                *cache = Some((x.shape(), p.argmax));
                Ok(p.out)
            }
            Layer::GlobalAvgPool { input_shape } => {
                *input_shape = Some(x.shape());
                Ok(global_avg_pool(x))
            }
            Layer::Linear(l) => l.forward(x),
        }
    }

    pub fn backward(&mut self, grad: &Tensor<T>, param_grads: bool) -> Result<Tensor<T>> {
        match self {
            Layer::Conv(l) => l.backward(grad, param_grads),
            Layer::TransposedConv(l) => l.backward(grad, param_grads),
            Layer::BatchNorm(l) => l.backward(grad, param_grads),
            Layer::Attention(l) => l.backward(grad, param_grads),
            Layer::LeakyRelu { slope, input } => {
                let x = input.as_ref().ok_or_else(|| missing_cache("leaky relu"))?;
                leaky_relu_backward(x, grad, *slope)
            }
            Layer::MaxPool { cache, .. } => {
                let (shape, argmax) = cache.as_ref().ok_or_else(|| missing_cache("max pool"))?;
                maxpool2d_backward(*shape, argmax, grad)
            }
            Layer::GlobalAvgPool { input_shape } => {
                let s = input_shape.ok_or_else(|| missing_cache("global average pool"))?;
                Ok(global_avg_pool_backward(s, grad))
            }
            Layer::Linear(l) => l.backward(grad, param_grads),
        }
    }

    pub fn reset_parameters(&mut self, rng: &mut ChaCha8Rng) {
        match self {
            Layer::Conv(l) => l.reset_parameters(rng),
            Layer::TransposedConv(l) => l.reset_parameters(rng),
            Layer::Attention(l) => l.reset_parameters(rng),
            Layer::Linear(l) => l.reset_parameters(rng),
            Layer::BatchNorm(_) | Layer::LeakyRelu { .. } | Layer::MaxPool { .. } | Layer::GlobalAvgPool { .. } => {}
        }
    }

    pub fn slots<'a>(&'a self, prefix: &str, out: &mut Vec<SlotRef<'a, T>>) {
        match self {
            Layer::Conv(l) => l.slots(prefix, out),
            Layer::TransposedConv(l) => l.slots(prefix, out),
            Layer::BatchNorm(l) => l.slots(prefix, out),
            Layer::Attention(l) => l.slots(prefix, out),
            Layer::Linear(l) => l.slots(prefix, out),
            Layer::LeakyRelu { .. } | Layer::MaxPool { .. } | Layer::GlobalAvgPool { .. } => {}
        }
    }

    pub fn slots_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<SlotMut<'a, T>>) {
        match self {
            Layer::Conv(l) => l.slots_mut(prefix, out),
            Layer::TransposedConv(l) => l.slots_mut(prefix, out),
            Layer::BatchNorm(l) => l.slots_mut(prefix, out),
            Layer::Attention(l) => l.slots_mut(prefix, out),
            Layer::Linear(l) => l.slots_mut(prefix, out),
            Layer::LeakyRelu { .. } | Layer::MaxPool { .. } | Layer::GlobalAvgPool { .. } => {}
        }
    }
}

/// Named layers applied in order.
#[derive(Clone, Debug, Default)]
pub struct Sequential<T> {
    layers: Vec<(String, Layer<T>)>,
}

impl<T: Scalar> Sequential<T> {
    pub fn new() -> Self {
        Sequential { layers: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, layer: Layer<T>) -> &mut Self {
        self.layers.push((name.into(), layer));
        self
    }

    pub fn layers(&self) -> impl Iterator<Item = (&str, &Layer<T>)> {
        self.layers.iter().map(|(n, l)| (n.as_str(), l))
    }

    pub fn layers_mut(&mut self) -> impl Iterator<Item = (&str, &mut Layer<T>)> {
        self.layers.iter_mut().map(|(n, l)| (n.as_str(), l))
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: BnMode) -> Result<Tensor<T>> {
        let mut iter = self.layers.iter_mut();
        let Some((_, first)) = iter.next() else {
            return Ok(x.clone());
        };
        let mut h = first.forward(x, mode)?;
        for (_, layer) in iter {
            h = layer.forward(&h, mode)?;
        }
        Ok(h)
    }

    /// Like [`Self::forward`], but keeps every layer's output.
    pub fn forward_trace(&mut self, x: &Tensor<T>, mode: BnMode) -> Result<Vec<(String, Tensor<T>)>> {
        let mut out: Vec<(String, Tensor<T>)> = Vec::with_capacity(self.layers.len());
        for (name, layer) in &mut self.layers {
            let h = layer.forward(out.last().map_or(x, |(_, h)| h), mode)?;
            out.push((name.clone(), h));
        }
        Ok(out)
    }

    pub fn backward(&mut self, grad: &Tensor<T>, param_grads: bool) -> Result<Tensor<T>> {
        let mut g = grad.clone();
        for (_, layer) in self.layers.iter_mut().rev() {
            g = layer.backward(&g, param_grads)?;
        }
        Ok(g)
    }

    pub fn reset_parameters(&mut self, rng: &mut ChaCha8Rng) {
        for (_, l) in &mut self.layers {
            l.reset_parameters(rng);
        }
    }

    pub fn slots<'a>(&'a self, prefix: &str, out: &mut Vec<SlotRef<'a, T>>) {
        for (name, l) in &self.layers {
            l.slots(&format!("{prefix}.{name}"), out);
        }
    }

    pub fn slots_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<SlotMut<'a, T>>) {
        for (name, l) in &mut self.layers {
            l.slots_mut(&format!("{prefix}.{name}"), out);
        }
    }
}
