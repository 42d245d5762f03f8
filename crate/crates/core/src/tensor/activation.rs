use super::Tensor;
use crate::error::Result;
use crate::scalar::Scalar;

/// `max(x, slope * x)` elementwise.
pub fn leaky_relu<T: Scalar>(x: &Tensor<T>, slope: T) -> Tensor<T> {
    x.map(|v| if v < T::zero() { v * slope } else { v })
}

/// Gradient through [`leaky_relu`]; the kink at zero takes the positive branch.
pub fn leaky_relu_backward<T: Scalar>(x: &Tensor<T>, grad_out: &Tensor<T>, slope: T) -> Result<Tensor<T>> {
    x.ensure_same_shape("leaky_relu_backward", grad_out)?;
    let mut g = grad_out.clone();
    for (gv, &xv) in g.data_mut().iter_mut().zip(x.data()) {
        if xv < T::zero() {
            *gv *= slope;
        }
    }
    Ok(g)
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    leaky_relu(x, T::zero())
}

pub fn relu_backward<T: Scalar>(x: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    leaky_relu_backward(x, grad_out, T::zero())
}

#[inline]
pub fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Softmax across the channel axis at every `(n, h, w)` position, with the
/// per-position maximum subtracted first.
pub fn softmax_channels<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let p = s.plane();
    let mut out = Tensor::zeros(s);
    let src = x.data();
    let dst = out.data_mut();
    let mut buf = vec![T::zero(); s.c];
    for n in 0..s.n {
        let base = n * s.item();
        for pos in 0..p {
            let mut m = T::neg_infinity();
            for c in 0..s.c {
                m = m.max(src[base + c * p + pos]);
            }
            let mut z = T::zero();
            for (c, b) in buf.iter_mut().enumerate() {
                *b = (src[base + c * p + pos] - m).exp();
                z += *b;
            }
            for (c, b) in buf.iter().enumerate() {
                dst[base + c * p + pos] = *b / z;
            }
        }
    }
    out
}

/// Vector-Jacobian product of [`softmax_channels`] given its output `y`.
pub fn softmax_channels_backward<T: Scalar>(y: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    y.ensure_same_shape("softmax_channels_backward", grad_out)?;
    let s = y.shape();
    let p = s.plane();
    let mut gx = Tensor::zeros(s);
    for n in 0..s.n {
        let base = n * s.item();
        for pos in 0..p {
            let mut dot = T::zero();
            for c in 0..s.c {
                let i = base + c * p + pos;
                dot += y.data()[i] * grad_out.data()[i];
            }
            for c in 0..s.c {
                let i = base + c * p + pos;
                gx.data_mut()[i] = y.data()[i] * (grad_out.data()[i] - dot);
            }
        }
    }
    Ok(gx)
}
