//! Channel and spatial attention gates (CBAM layout: channel gate first).
//!
//! The channel gate is `sigmoid(MLP(avgpool(x)) + MLP(maxpool(x)))` with a
//! bias-free two-layer MLP `C -> C/r -> C`; the spatial gate is
//! `sigmoid(conv_k([mean_c(x); max_c(x)]))` with a bias-free `2 -> 1` kernel.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{conv2d_with, sigmoid, ConvGeometry, Padding, Shape, Tensor};

pub const DEFAULT_REDUCTION: usize = 4;
pub const DEFAULT_SPATIAL_KERNEL: usize = 7;

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams<T> {
    pub channels: usize,
    pub reduction: usize,
    /// `C/r x C`
    pub channel_w1: Vec<T>,
    /// `C x C/r`
    pub channel_w2: Vec<T>,
    /// `1 x 2 x k x k`
    pub spatial_kernel: Tensor<T>,
}

impl<T: Scalar> AttentionParams<T> {
    /// All-zero parameters, under which both gates are exactly one half.
    pub fn zeros(channels: usize, reduction: usize, kernel: usize) -> Result<Self> {
        if reduction == 0 || channels % reduction != 0 || channels == 0 {
            return Err(Error::invalid(
                "AttentionParams",
                format!("reduction ratio {reduction} must divide channel count {channels}"),
            ));
        }
        if kernel % 2 == 0 {
            return Err(Error::invalid("AttentionParams", format!("spatial kernel {kernel} must be odd")));
        }
        let hidden = channels / reduction;
        Ok(AttentionParams {
            channels,
            reduction,
            channel_w1: vec![T::zero(); hidden * channels],
            channel_w2: vec![T::zero(); channels * hidden],
            spatial_kernel: Tensor::zeros(Shape::new(1, 2, kernel, kernel)),
        })
    }

    pub fn hidden(&self) -> usize {
        self.channels / self.reduction
    }

    fn spatial_geometry(&self) -> ConvGeometry {
        let k = self.spatial_kernel.shape().h;
        ConvGeometry::new(k, k, 1, Padding::same(k))
    }
}

#[derive(Clone, Debug)]
pub struct ChannelCache<T> {
    x: Tensor<T>,
    avg: Vec<T>,
    max: Vec<T>,
    max_at: Vec<usize>,
    pre_avg: Vec<T>,
    pre_max: Vec<T>,
    gate: Vec<T>,
}

#[derive(Clone, Debug)]
pub struct SpatialCache<T> {
    x: Tensor<T>,
    pooled: Tensor<T>,
    max_channel: Vec<usize>,
    gate: Vec<T>,
}

/// Per-channel gate values in `(0, 1)`, one per `(n, c)`.
pub fn channel_gate<T: Scalar>(cache: &ChannelCache<T>) -> &[T] {
    &cache.gate
}

pub fn spatial_gate<T: Scalar>(cache: &SpatialCache<T>) -> &[T] {
    &cache.gate
}

/// `h = W v` for a row-major `rows x cols` matrix.
fn matvec<T: Scalar>(w: &[T], rows: usize, cols: usize, v: &[T], out: &mut [T]) {
    for r in 0..rows {
        out[r] = w[r * cols..(r + 1) * cols].iter().zip(v).map(|(&a, &b)| a * b).sum();
    }
}

pub fn channel_attention<T: Scalar>(x: &Tensor<T>, params: &AttentionParams<T>) -> Result<Tensor<T>> {
    Ok(channel_attention_forward(x, params)?.0)
}

pub fn channel_attention_forward<T: Scalar>(
    x: &Tensor<T>,
    params: &AttentionParams<T>,
) -> Result<(Tensor<T>, ChannelCache<T>)> {
    let s = x.shape();
    crate::error::ensure_dim("channel_attention", "C", params.channels, s.c)?;
    let (c, hid, p) = (s.c, params.hidden(), s.plane());
    let inv = T::one() / T::lit(p as f64);
    let mut avg = vec![T::zero(); s.n * c];
    let mut max = vec![T::zero(); s.n * c];
    let mut max_at = vec![0usize; s.n * c];
    for nc in 0..s.n * c {
        let plane = &x.data()[nc * p..(nc + 1) * p];
        avg[nc] = plane.iter().copied().sum::<T>() * inv;
        let mut best = 0;
        for (i, &v) in plane.iter().enumerate() {
            if v > plane[best] {
                best = i;
            }
        }
        max[nc] = plane[best];
        max_at[nc] = nc * p + best;
    }
    let mut pre_avg = vec![T::zero(); s.n * hid];
    let mut pre_max = vec![T::zero(); s.n * hid];
    let mut gate = vec![T::zero(); s.n * c];
    let (mut h, mut o1, mut o2) = (vec![T::zero(); hid], vec![T::zero(); c], vec![T::zero(); c]);
    for n in 0..s.n {
        for (pre, pooled, o) in [(&mut pre_avg, &avg, &mut o1), (&mut pre_max, &max, &mut o2)] {
            let pre = &mut pre[n * hid..(n + 1) * hid];
            matvec(&params.channel_w1, hid, c, &pooled[n * c..(n + 1) * c], pre);
            for (hv, &pv) in h.iter_mut().zip(pre.iter()) {
                *hv = pv.max(T::zero());
            }
            matvec(&params.channel_w2, c, hid, &h, o);
        }
        for ch in 0..c {
            gate[n * c + ch] = sigmoid(o1[ch] + o2[ch]);
        }
    }
    let mut y = x.clone();
    for (nc, &g) in gate.iter().enumerate() {
        for v in &mut y.data_mut()[nc * p..(nc + 1) * p] {
            *v *= g;
        }
    }
    Ok((
        y,
        ChannelCache {
            x: x.clone(),
            avg,
            max,
            max_at,
            pre_avg,
            pre_max,
            gate,
        },
    ))
}

/// Returns `(dx, dW1, dW2)`.
pub fn channel_attention_backward<T: Scalar>(
    cache: &ChannelCache<T>,
    params: &AttentionParams<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Vec<T>, Vec<T>)> {
    let x = &cache.x;
    x.ensure_same_shape("channel_attention_backward", grad_out)?;
    let s = x.shape();
    let (c, hid, p) = (s.c, params.hidden(), s.plane());
    let inv = T::one() / T::lit(p as f64);
    let mut dx = Tensor::zeros(s);
    let mut dw1 = vec![T::zero(); hid * c];
    let mut dw2 = vec![T::zero(); c * hid];
    let mut dz = vec![T::zero(); c];
    for n in 0..s.n {
        for ch in 0..c {
            let nc = n * c + ch;
            let g = cache.gate[nc];
            let dy = &grad_out.data()[nc * p..(nc + 1) * p];
            let xs = &x.data()[nc * p..(nc + 1) * p];
            let dg: T = dy.iter().zip(xs).map(|(&a, &b)| a * b).sum();
            dz[ch] = dg * g * (T::one() - g);
            for (d, &v) in dx.data_mut()[nc * p..(nc + 1) * p].iter_mut().zip(dy) {
                *d = v * g;
            }
        }
        // The same dz feeds both MLP branches.
        for (pre, pooled, is_max) in [(&cache.pre_avg, &cache.avg, false), (&cache.pre_max, &cache.max, true)] {
            let pre = &pre[n * hid..(n + 1) * hid];
            let mut dpre = vec![T::zero(); hid];
            for j in 0..hid {
                let hj = pre[j].max(T::zero());
                let mut acc = T::zero();
                for ch in 0..c {
                    dw2[ch * hid + j] += dz[ch] * hj;
                    acc += dz[ch] * params.channel_w2[ch * hid + j];
                }
                dpre[j] = if pre[j] > T::zero() { acc } else { T::zero() };
            }
            for ch in 0..c {
                let mut dpool = T::zero();
                for j in 0..hid {
                    dw1[j * c + ch] += dpre[j] * pooled[n * c + ch];
                    dpool += dpre[j] * params.channel_w1[j * c + ch];
                }
                let nc = n * c + ch;
                if is_max {
                    dx.data_mut()[cache.max_at[nc]] += dpool;
                } else {
                    for d in &mut dx.data_mut()[nc * p..(nc + 1) * p] {
                        *d += dpool * inv;
                    }
                }
            }
        }
    }
    Ok((dx, dw1, dw2))
}

pub fn spatial_attention<T: Scalar>(x: &Tensor<T>, params: &AttentionParams<T>) -> Result<Tensor<T>> {
    Ok(spatial_attention_forward(x, params)?.0)
}

pub fn spatial_attention_forward<T: Scalar>(
    x: &Tensor<T>,
    params: &AttentionParams<T>,
) -> Result<(Tensor<T>, SpatialCache<T>)> {
    let s = x.shape();
    let p = s.plane();
    let inv_c = T::one() / T::lit(s.c as f64);
    let mut pooled = Tensor::zeros(Shape::new(s.n, 2, s.h, s.w));
    let mut max_channel = vec![0usize; s.n * p];
    for n in 0..s.n {
        for pos in 0..p {
            let mut sum = T::zero();
            let mut best = 0;
            let mut best_v = x.data()[n * s.item() + pos];
            for c in 0..s.c {
                let v = x.data()[n * s.item() + c * p + pos];
                sum += v;
                if v > best_v {
                    best_v = v;
                    best = c;
                }
            }
            pooled.data_mut()[n * 2 * p + pos] = sum * inv_c;
            pooled.data_mut()[n * 2 * p + p + pos] = best_v;
            max_channel[n * p + pos] = best;
        }
    }
    let z = conv2d_with(&pooled, &params.spatial_kernel, None, &params.spatial_geometry())?;
    let gate: Vec<T> = z.data().iter().map(|&v| sigmoid(v)).collect();
    let mut y = x.clone();
    for n in 0..s.n {
        for c in 0..s.c {
            let start = n * s.item() + c * p;
            for (v, &g) in y.data_mut()[start..start + p].iter_mut().zip(&gate[n * p..(n + 1) * p]) {
                *v *= g;
            }
        }
    }
    Ok((
        y,
        SpatialCache {
            x: x.clone(),
            pooled,
            max_channel,
            gate,
        },
    ))
}

/// Returns `(dx, d_kernel)`.
pub fn spatial_attention_backward<T: Scalar>(
    cache: &SpatialCache<T>,
    params: &AttentionParams<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let x = &cache.x;
    x.ensure_same_shape("spatial_attention_backward", grad_out)?;
    let s = x.shape();
    let p = s.plane();
    let mut dz = Tensor::zeros(Shape::new(s.n, 1, s.h, s.w));
    let mut dx = Tensor::zeros(s);
    for n in 0..s.n {
        for pos in 0..p {
            let g = cache.gate[n * p + pos];
            let mut dg = T::zero();
            for c in 0..s.c {
                let i = n * s.item() + c * p + pos;
                dg += grad_out.data()[i] * x.data()[i];
                dx.data_mut()[i] = grad_out.data()[i] * g;
            }
            dz.data_mut()[n * p + pos] = dg * g * (T::one() - g);
        }
    }
    let geom = params.spatial_geometry();
    let (dpooled, dk) =
        crate::tensor::conv::conv2d_backward_with(&cache.pooled, &params.spatial_kernel, &dz, &geom, true)?;
    let inv_c = T::one() / T::lit(s.c as f64);
    for n in 0..s.n {
        for pos in 0..p {
            let dmean = dpooled.data()[n * 2 * p + pos] * inv_c;
            for c in 0..s.c {
                dx.data_mut()[n * s.item() + c * p + pos] += dmean;
            }
            let dmax = dpooled.data()[n * 2 * p + p + pos];
            dx.data_mut()[n * s.item() + cache.max_channel[n * p + pos] * p + pos] += dmax;
        }
    }
    Ok((dx, dk.expect("kernel gradient requested").0))
}
