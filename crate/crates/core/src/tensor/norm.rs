use super::Tensor;
use crate::error::{ensure_dim, Result};
use crate::scalar::Scalar;

/// Where batch normalization takes its statistics from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BnMode {
    /// Batch statistics; running statistics are updated.
    Train,
    /// Batch statistics; running statistics are left untouched.
    Probe,
    /// Running statistics.
    Eval,
}

impl BnMode {
    pub fn uses_batch_stats(self) -> bool {
        !matches!(self, BnMode::Eval)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNormCache<T> {
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
    pub batch_stats: bool,
}

#[derive(Clone, Debug)]
pub struct BatchNormGrads<T> {
    pub x: Tensor<T>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

/// Per-channel batch normalization over `(N, H, W)`.
///
/// Running statistics follow `r = (1 - momentum) * r + momentum * batch`,
/// with the unbiased batch variance.
#[allow(clippy::too_many_arguments)]
pub fn batchnorm2d<T: Scalar>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    running_mean: &mut [T],
    running_var: &mut [T],
    mode: BnMode,
    eps: T,
    momentum: T,
) -> Result<(Tensor<T>, BatchNormCache<T>)> {
    const OP: &str = "batchnorm2d";
    let s = x.shape();
    ensure_dim(OP, "gamma length (C)", s.c, gamma.len())?;
    ensure_dim(OP, "beta length (C)", s.c, beta.len())?;
    ensure_dim(OP, "running_mean length (C)", s.c, running_mean.len())?;
    ensure_dim(OP, "running_var length (C)", s.c, running_var.len())?;

    let p = s.plane();
    let count = s.n * p;
    let mut xhat = Tensor::zeros(s);
    let mut y = Tensor::zeros(s);
    let mut inv_std = vec![T::zero(); s.c];
    for c in 0..s.c {
        let (mean, var) = if mode.uses_batch_stats() {
            let cnt = T::lit(count as f64);
            let mut sum = T::zero();
            for n in 0..s.n {
                sum += x.plane(n, c).iter().copied().sum::<T>();
            }
            let mean = sum / cnt;
            let mut sq = T::zero();
            for n in 0..s.n {
                sq += x.plane(n, c).iter().map(|&v| (v - mean) * (v - mean)).sum::<T>();
            }
            let var = sq / cnt;
            if mode == BnMode::Train {
                let unbiased = if count > 1 { sq / T::lit((count - 1) as f64) } else { var };
                running_mean[c] = (T::one() - momentum) * running_mean[c] + momentum * mean;
                running_var[c] = (T::one() - momentum) * running_var[c] + momentum * unbiased;
            }
            (mean, var)
        } else {
            (running_mean[c], running_var[c])
        };
        let istd = T::one() / (var + eps).sqrt();
        inv_std[c] = istd;
        for n in 0..s.n {
            let start = (n * s.c + c) * p;
            for i in start..start + p {
                let h = (x.data()[i] - mean) * istd;
                xhat.data_mut()[i] = h;
                y.data_mut()[i] = gamma[c] * h + beta[c];
            }
        }
    }
    Ok((
        y,
        BatchNormCache {
            xhat,
            inv_std,
            batch_stats: mode.uses_batch_stats(),
        },
    ))
}

pub fn batchnorm2d_backward<T: Scalar>(
    cache: &BatchNormCache<T>,
    gamma: &[T],
    grad_out: &Tensor<T>,
) -> Result<BatchNormGrads<T>> {
    cache.xhat.ensure_same_shape("batchnorm2d_backward", grad_out)?;
    let s = grad_out.shape();
    ensure_dim("batchnorm2d_backward", "gamma length (C)", s.c, gamma.len())?;
    let p = s.plane();
    let m = T::lit((s.n * p) as f64);
    let mut gx = Tensor::zeros(s);
    let mut gg = vec![T::zero(); s.c];
    let mut gb = vec![T::zero(); s.c];
    for c in 0..s.c {
        let (mut sum_dy, mut sum_dy_xhat) = (T::zero(), T::zero());
        for n in 0..s.n {
            let start = (n * s.c + c) * p;
            for i in start..start + p {
                let dy = grad_out.data()[i];
                sum_dy += dy;
                sum_dy_xhat += dy * cache.xhat.data()[i];
            }
        }
        gg[c] = sum_dy_xhat;
        gb[c] = sum_dy;
        let k = gamma[c] * cache.inv_std[c];
        for n in 0..s.n {
            let start = (n * s.c + c) * p;
            for i in start..start + p {
                let dy = grad_out.data()[i];
                gx.data_mut()[i] = if cache.batch_stats {
                    k * (dy - sum_dy / m - cache.xhat.data()[i] * sum_dy_xhat / m)
                } else {
                    k * dy
                };
            }
        }
    }
    Ok(BatchNormGrads { x: gx, gamma: gg, beta: gb })
}
