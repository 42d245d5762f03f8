//! 2-D convolution and transposed convolution lowered to GEMM via im2col.

use super::{Shape, Tensor};
use crate::error::{ensure_dim, Error, Result};
use crate::scalar::Scalar;

/// Zero padding per border. Even kernels need asymmetric padding to keep
/// "same" geometry.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct Padding {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl Padding {
    pub const fn uniform(p: usize) -> Self {
        Padding {
            top: p,
            bottom: p,
            left: p,
            right: p,
        }
    }

    /// Padding that keeps the spatial size under stride 1; the extra row and
    /// column of an even kernel go to the bottom/right.
    pub const fn same(k: usize) -> Self {
        let lo = (k - 1) / 2;
        let hi = k - 1 - lo;
        Padding {
            top: lo,
            bottom: hi,
            left: lo,
            right: hi,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: Padding,
}

impl ConvGeometry {
    pub fn new(kh: usize, kw: usize, stride: usize, pad: Padding) -> Self {
        ConvGeometry { kh, kw, stride, pad }
    }

    fn validate(&self, op: &'static str) -> Result<()> {
        if self.stride == 0 {
            return Err(Error::invalid(op, "stride must be >= 1"));
        }
        if self.kh == 0 || self.kw == 0 {
            return Err(Error::invalid(op, "kernel must be non-empty"));
        }
        Ok(())
    }

    /// Output `(H, W)` of a convolution over an `h x w` input.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let ph = h + self.pad.top + self.pad.bottom;
        let pw = w + self.pad.left + self.pad.right;
        if ph < self.kh || pw < self.kw {
            return Err(Error::invalid(
                "conv2d",
                format!("kernel {}x{} larger than padded input {ph}x{pw}", self.kh, self.kw),
            ));
        }
        Ok(((ph - self.kh) / self.stride + 1, (pw - self.kw) / self.stride + 1))
    }
}

#[derive(Clone, Debug)]
pub struct ConvGrads<T> {
    pub x: Tensor<T>,
    pub w: Tensor<T>,
    pub b: Vec<T>,
}

/// Spatial extent of a convolution: input plane `(h, w)` and output plane `(oh, ow)`.
#[derive(Clone, Copy)]
struct Planes {
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
}

/// Range of output columns `ox` whose input column `ox*s + k - pad` lies in `[0, size)`.
#[inline]
fn valid_range(out: usize, size: usize, k: usize, pad: usize, stride: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    // largest ox with ox*s + k - pad <= size - 1
    let top = size + pad;
    let hi = if top > k { ((top - k - 1) / stride + 1).min(out) } else { 0 };
    (lo.min(hi), hi)
}

/// Unfolds one `c x h x w` item into `cols[(ci*kh + ki)*kw + kj][oy*ow + ox]`.
fn im2col<T: Scalar>(x: &[T], c: usize, g: &ConvGeometry, p: Planes, cols: &mut [T]) {
    let ohw = p.oh * p.ow;
    let s = g.stride;
    for ci in 0..c {
        let plane = &x[ci * p.h * p.w..(ci + 1) * p.h * p.w];
        for ki in 0..g.kh {
            let (ylo, yhi) = valid_range(p.oh, p.h, ki, g.pad.top, s);
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * ohw..(row + 1) * ohw];
                let (xlo, xhi) = valid_range(p.ow, p.w, kj, g.pad.left, s);
                for oy in 0..p.oh {
                    let out_row = &mut dst[oy * p.ow..(oy + 1) * p.ow];
                    if oy < ylo || oy >= yhi || xlo >= xhi {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let iy = oy * s + ki - g.pad.top;
                    let src = &plane[iy * p.w..(iy + 1) * p.w];
                    out_row[..xlo].fill(T::zero());
                    out_row[xhi..].fill(T::zero());
                    let x0 = xlo * s + kj - g.pad.left;
                    if s == 1 {
                        out_row[xlo..xhi].copy_from_slice(&src[x0..x0 + (xhi - xlo)]);
                    } else {
                        for (k, o) in out_row[xlo..xhi].iter_mut().enumerate() {
                            *o = src[x0 + k * s];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-and-adds columns back into a `c x h x w` item.
fn col2im<T: Scalar>(cols: &[T], c: usize, g: &ConvGeometry, p: Planes, x: &mut [T]) {
    let ohw = p.oh * p.ow;
    let s = g.stride;
    for ci in 0..c {
        let plane = &mut x[ci * p.h * p.w..(ci + 1) * p.h * p.w];
        for ki in 0..g.kh {
            let (ylo, yhi) = valid_range(p.oh, p.h, ki, g.pad.top, s);
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src = &cols[row * ohw..(row + 1) * ohw];
                let (xlo, xhi) = valid_range(p.ow, p.w, kj, g.pad.left, s);
                if xlo >= xhi {
                    continue;
                }
                for oy in ylo..yhi {
                    let iy = oy * s + ki - g.pad.top;
                    let dst = &mut plane[iy * p.w..(iy + 1) * p.w];
                    let x0 = xlo * s + kj - g.pad.left;
                    let seg = &src[oy * p.ow + xlo..oy * p.ow + xhi];
                    for (k, &v) in seg.iter().enumerate() {
                        dst[x0 + k * s] += v;
                    }
                }
            }
        }
    }
}

fn is_pointwise(g: &ConvGeometry) -> bool {
    g.kh == 1 && g.kw == 1 && g.stride == 1 && g.pad == Padding::default()
}

fn check_bias<T>(op: &'static str, bias: Option<&[T]>, k: usize) -> Result<()> {
    match bias {
        Some(b) => ensure_dim(op, "bias length", k, b.len()),
        None => Ok(()),
    }
}

fn add_bias<T: Scalar>(out: &mut Tensor<T>, bias: Option<&[T]>) {
    let Some(b) = bias else { return };
    let s = out.shape();
    for n in 0..s.n {
        let item = out.item_mut(n);
        for (c, &bc) in b.iter().enumerate() {
            for v in &mut item[c * s.plane()..(c + 1) * s.plane()] {
                *v += bc;
            }
        }
    }
}

fn bias_grad<T: Scalar>(grad_out: &Tensor<T>) -> Vec<T> {
    let s = grad_out.shape();
    let mut gb = vec![T::zero(); s.c];
    for n in 0..s.n {
        for (c, g) in gb.iter_mut().enumerate() {
            *g += grad_out.plane(n, c).iter().copied().sum::<T>();
        }
    }
    gb
}

/// Convolution with symmetric padding; `weight` is `K_out x K_in x kh x kw`.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&[T]>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let ws = weight.shape();
    conv2d_with(x, weight, bias, &ConvGeometry::new(ws.h, ws.w, stride, Padding::uniform(pad)))
}

fn conv_planes(op: &'static str, x: Shape, weight: Shape, g: &ConvGeometry) -> Result<Planes> {
    g.validate(op)?;
    ensure_dim(op, "input channels (C)", weight.c, x.c)?;
    ensure_dim(op, "kernel height", g.kh, weight.h)?;
    ensure_dim(op, "kernel width", g.kw, weight.w)?;
    let (oh, ow) = g.output_hw(x.h, x.w)?;
    Ok(Planes { h: x.h, w: x.w, oh, ow })
}

pub fn conv2d_with<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&[T]>,
    g: &ConvGeometry,
) -> Result<Tensor<T>> {
    const OP: &str = "conv2d";
    let xs = x.shape();
    let ws = weight.shape();
    let p = conv_planes(OP, xs, ws, g)?;
    check_bias(OP, bias, ws.n)?;

    let k_out = ws.n;
    let ckk = ws.c * g.kh * g.kw;
    let ohw = p.oh * p.ow;
    let mut out = Tensor::zeros(Shape::new(xs.n, k_out, p.oh, p.ow));
    let pointwise = is_pointwise(g);
    let mut cols = if pointwise { Vec::new() } else { vec![T::zero(); ckk * ohw] };
    for n in 0..xs.n {
        let src: &[T] = if pointwise {
            x.item(n)
        } else {
            im2col(x.item(n), xs.c, g, p, &mut cols);
            &cols
        };
        T::gemm(
            k_out,
            ckk,
            ohw,
            T::one(),
            weight.data(),
            (ckk, 1),
            src,
            (ohw, 1),
            T::zero(),
            out.item_mut(n),
            (ohw, 1),
        );
    }
    add_bias(&mut out, bias);
    Ok(out)
}

/// Gradients of `sum(conv2d(x, w, b) * grad_out)` with respect to `x`, `w` and `b`.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<ConvGrads<T>> {
    let ws = weight.shape();
    let g = ConvGeometry::new(ws.h, ws.w, stride, Padding::uniform(pad));
    let (gx, gw) = conv2d_backward_with(x, weight, grad_out, &g, true)?;
    let (w, b) = gw.expect("weight gradients requested");
    Ok(ConvGrads { x: gx, w, b })
}

/// Backward pass; weight and bias gradients are skipped unless `want_params`.
pub(crate) fn conv2d_backward_with<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    g: &ConvGeometry,
    want_params: bool,
) -> Result<(Tensor<T>, Option<(Tensor<T>, Vec<T>)>)> {
    const OP: &str = "conv2d_backward";
    let xs = x.shape();
    let ws = weight.shape();
    let p = conv_planes(OP, xs, ws, g)?;
    let gs = grad_out.shape();
    ensure_dim(OP, "grad_out N", xs.n, gs.n)?;
    ensure_dim(OP, "grad_out C", ws.n, gs.c)?;
    ensure_dim(OP, "grad_out H", p.oh, gs.h)?;
    ensure_dim(OP, "grad_out W", p.ow, gs.w)?;

    let k_out = ws.n;
    let ckk = ws.c * g.kh * g.kw;
    let ohw = p.oh * p.ow;
    let pointwise = is_pointwise(g);
    let mut gx = Tensor::zeros(xs);
    let mut gw = if want_params { Some(Tensor::zeros(ws)) } else { None };
    let mut cols = vec![T::zero(); ckk * ohw];
    for n in 0..xs.n {
        let go = grad_out.item(n);
        if let Some(gw) = gw.as_mut() {
            let src: &[T] = if pointwise {
                x.item(n)
            } else {
                im2col(x.item(n), xs.c, g, p, &mut cols);
                &cols
            };
            // dW += dY * cols^T
            T::gemm(k_out, ohw, ckk, T::one(), go, (ohw, 1), src, (1, ohw), T::one(), gw.data_mut(), (ckk, 1));
        }
        if pointwise {
            T::gemm(ckk, k_out, ohw, T::one(), weight.data(), (1, ckk), go, (ohw, 1), T::zero(), gx.item_mut(n), (ohw, 1));
        } else {
            // dcols = W^T * dY, folded back onto the input
            T::gemm(ckk, k_out, ohw, T::one(), weight.data(), (1, ckk), go, (ohw, 1), T::zero(), &mut cols, (ohw, 1));
            col2im(&cols, xs.c, g, p, gx.item_mut(n));
        }
    }
    Ok((gx, gw.map(|w| (w, bias_grad(grad_out)))))
}

/// Transposed convolution with symmetric padding; `weight` is `C_in x C_out x kh x kw`.
pub fn transposed_conv2d<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&[T]>,
    stride: usize,
    pad: usize,
    out_pad: usize,
) -> Result<Tensor<T>> {
    let ws = weight.shape();
    transposed_conv2d_with(x, weight, bias, &ConvGeometry::new(ws.h, ws.w, stride, Padding::uniform(pad)), out_pad)
}

/// `(H, W)` produced by a transposed convolution, i.e. `(H-1)*s - pads + k + out_pad`.
fn transposed_planes(op: &'static str, x: Shape, weight: Shape, g: &ConvGeometry, out_pad: usize) -> Result<Planes> {
    g.validate(op)?;
    ensure_dim(op, "input channels (C)", weight.n, x.c)?;
    ensure_dim(op, "kernel height", g.kh, weight.h)?;
    ensure_dim(op, "kernel width", g.kw, weight.w)?;
    if out_pad >= g.stride {
        return Err(Error::invalid(op, format!("out_pad {out_pad} must be smaller than stride {}", g.stride)));
    }
    let size = |n: usize, k: usize, lo: usize, hi: usize| -> Result<usize> {
        let grown = (n.max(1) - 1) * g.stride + k + out_pad;
        grown
            .checked_sub(lo + hi)
            .filter(|&v| v > 0 && n > 0)
            .ok_or_else(|| Error::invalid(op, format!("computed output size {grown} - {} is not positive", lo + hi)))
    };
    let oh = size(x.h, g.kh, g.pad.top, g.pad.bottom)?;
    let ow = size(x.w, g.kw, g.pad.left, g.pad.right)?;
    // A convolution of the output with the same geometry lands back on the input.
    debug_assert_eq!(g.output_hw(oh, ow).ok(), Some((x.h, x.w)));
    Ok(Planes { h: oh, w: ow, oh: x.h, ow: x.w })
}

pub fn transposed_conv2d_with<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&[T]>,
    g: &ConvGeometry,
    out_pad: usize,
) -> Result<Tensor<T>> {
    const OP: &str = "transposed_conv2d";
    let xs = x.shape();
    let ws = weight.shape();
    let p = transposed_planes(OP, xs, ws, g, out_pad)?;
    check_bias(OP, bias, ws.c)?;

    let c_out = ws.c;
    let ckk = c_out * g.kh * g.kw;
    let hw = xs.h * xs.w;
    let mut out = Tensor::zeros(Shape::new(xs.n, c_out, p.h, p.w));
    let mut cols = vec![T::zero(); ckk * hw];
    for n in 0..xs.n {
        // cols = W^T * x
        T::gemm(ckk, xs.c, hw, T::one(), weight.data(), (1, ckk), x.item(n), (hw, 1), T::zero(), &mut cols, (hw, 1));
        col2im(&cols, c_out, g, p, out.item_mut(n));
    }
    add_bias(&mut out, bias);
    Ok(out)
}

pub fn transposed_conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    pad: usize,
    out_pad: usize,
) -> Result<ConvGrads<T>> {
    let ws = weight.shape();
    let g = ConvGeometry::new(ws.h, ws.w, stride, Padding::uniform(pad));
    let (gx, gw) = transposed_conv2d_backward_with(x, weight, grad_out, &g, out_pad, true)?;
    let (w, b) = gw.expect("weight gradients requested");
    Ok(ConvGrads { x: gx, w, b })
}

pub(crate) fn transposed_conv2d_backward_with<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    g: &ConvGeometry,
    out_pad: usize,
    want_params: bool,
) -> Result<(Tensor<T>, Option<(Tensor<T>, Vec<T>)>)> {
    const OP: &str = "transposed_conv2d_backward";
    let xs = x.shape();
    let ws = weight.shape();
    let p = transposed_planes(OP, xs, ws, g, out_pad)?;
    let gs = grad_out.shape();
    ensure_dim(OP, "grad_out N", xs.n, gs.n)?;
    ensure_dim(OP, "grad_out C", ws.c, gs.c)?;
    ensure_dim(OP, "grad_out H", p.h, gs.h)?;
    ensure_dim(OP, "grad_out W", p.w, gs.w)?;

    let c_out = ws.c;
    let ckk = c_out * g.kh * g.kw;
    let hw = xs.h * xs.w;
    let mut gx = Tensor::zeros(xs);
    let mut gw = if want_params { Some(Tensor::zeros(ws)) } else { None };
    let mut cols = vec![T::zero(); ckk * hw];
    for n in 0..xs.n {
        im2col(grad_out.item(n), c_out, g, p, &mut cols);
        // dx = W * cols
        T::gemm(xs.c, ckk, hw, T::one(), weight.data(), (ckk, 1), &cols, (hw, 1), T::zero(), gx.item_mut(n), (hw, 1));
        if let Some(gw) = gw.as_mut() {
            // dW += x * cols^T
            T::gemm(xs.c, hw, ckk, T::one(), x.item(n), (hw, 1), &cols, (1, hw), T::one(), gw.data_mut(), (ckk, 1));
        }
    }
    Ok((gx, gw.map(|w| (w, bias_grad(grad_out)))))
}
