use super::{Shape, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// How a 2x2/stride-2 max pool treats an odd trailing row or column.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolMode {
    /// Odd extents are an error.
    Exact,
    /// The last odd row/column is dropped.
    Floor,
}

#[derive(Clone, Debug)]
pub struct PoolOutput<T> {
    pub out: Tensor<T>,
    /// Flat input index of each output's maximum.
    pub argmax: Vec<usize>,
}

/// 2x2 max pooling with stride 2. Ties go to the first element in row-major
/// order within the window.
pub fn maxpool2d<T: Scalar>(x: &Tensor<T>, mode: PoolMode) -> Result<PoolOutput<T>> {
    let s = x.shape();
    if mode == PoolMode::Exact && (s.h % 2 != 0 || s.w % 2 != 0) {
        return Err(Error::invalid("maxpool2d", format!("odd spatial size {}x{} in exact mode", s.h, s.w)));
    }
    let (oh, ow) = (s.h / 2, s.w / 2);
    if oh == 0 || ow == 0 {
        return Err(Error::invalid("maxpool2d", format!("input {}x{} too small for a 2x2 window", s.h, s.w)));
    }
    let os = Shape::new(s.n, s.c, oh, ow);
    let mut out = Vec::with_capacity(os.len());
    let mut argmax = Vec::with_capacity(os.len());
    let data = x.data();
    for nc in 0..s.n * s.c {
        let base = nc * s.plane();
        for oy in 0..oh {
            for ox in 0..ow {
                let first = base + 2 * oy * s.w + 2 * ox;
                let mut best = first;
                for idx in [first + 1, first + s.w, first + s.w + 1] {
                    if data[idx] > data[best] {
                        best = idx;
                    }
                }
                out.push(data[best]);
                argmax.push(best);
            }
        }
    }
    Ok(PoolOutput {
        out: Tensor::from_vec(os, out)?,
        argmax,
    })
}

/// Routes each output gradient to the input element that won the max.
pub fn maxpool2d_backward<T: Scalar>(input_shape: Shape, argmax: &[usize], grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if argmax.len() != grad_out.shape().len() {
        return Err(Error::shape("maxpool2d_backward", "grad_out length", argmax.len(), grad_out.shape().len()));
    }
    let mut gx = Tensor::zeros(input_shape);
    let gd = gx.data_mut();
    for (&idx, &g) in argmax.iter().zip(grad_out.data()) {
        gd[idx] += g;
    }
    Ok(gx)
}

/// Mean over each `(H, W)` plane, giving `N x C x 1 x 1`.
pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let inv = T::one() / T::lit(s.plane() as f64);
    let data = (0..s.n * s.c)
        .map(|nc| x.data()[nc * s.plane()..(nc + 1) * s.plane()].iter().copied().sum::<T>() * inv)
        .collect();
    Tensor::from_vec(Shape::new(s.n, s.c, 1, 1), data).expect("pooled length")
}

pub fn global_avg_pool_backward<T: Scalar>(input_shape: Shape, grad_out: &Tensor<T>) -> Tensor<T> {
    let p = input_shape.plane();
    let inv = T::one() / T::lit(p as f64);
    let mut gx = Tensor::zeros(input_shape);
    for (nc, &g) in grad_out.data().iter().enumerate() {
        gx.data_mut()[nc * p..(nc + 1) * p].fill(g * inv);
    }
    gx
}
