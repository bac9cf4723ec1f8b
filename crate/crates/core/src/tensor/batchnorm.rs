use super::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with batch statistics.
    Train,
    /// Normalize with running statistics.
    Eval,
}

/// Running mean/variance of one batchnorm layer, read by eval-mode passes.
#[derive(Debug, Clone, Copy)]
pub struct RunningStats<'a, T> {
    pub mean: &'a [T],
    pub var: &'a [T],
}

#[derive(Debug, Clone)]
pub struct BatchNormCache<T> {
    x_hat: Vec<T>,
    inv_std: Vec<T>,
    mode: BnMode,
    /// Train mode only: per-channel batch mean and unbiased variance.
    batch_mean: Vec<T>,
    batch_var: Vec<T>,
}

impl<T: Scalar> BatchNormCache<T> {
    /// Folds this pass's batch statistics into running statistics:
    /// `running = (1 - rate) * running + rate * batch`. No-op for eval passes.
    pub fn update_running(&self, mean: &mut [T], var: &mut [T], rate: T) {
        if self.mode != BnMode::Train {
            return;
        }
        let keep = T::one() - rate;
        for (m, &b) in mean.iter_mut().zip(&self.batch_mean) {
            *m = keep * *m + rate * b;
        }
        for (v, &b) in var.iter_mut().zip(&self.batch_var) {
            *v = keep * *v + rate * b;
        }
    }
}

/// `(batch, channels, spatial)` extents for a `[B, C, ...]` tensor.
fn layout(shape: &[usize]) -> Option<(usize, usize, usize)> {
    match shape {
        [b, c, rest @ ..] => Some((*b, *c, rest.iter().product())),
        _ => None,
    }
}

pub fn batchnorm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    mode: BnMode,
    running: RunningStats<'_, T>,
    eps: T,
) -> Result<(Tensor<T>, BatchNormCache<T>)> {
    let (b, c, s) = layout(x.shape()).ok_or_else(|| Error::shape("batchnorm", x.shape(), gamma.shape()))?;
    if gamma.len() != c || beta.len() != c || running.mean.len() != c || running.var.len() != c {
        return Err(Error::shape("batchnorm", x.shape(), gamma.shape()));
    }
    if eps <= T::zero() {
        return Err(Error::Config("batchnorm: eps must be positive".into()));
    }
    if mode == BnMode::Train && b < 2 {
        return Err(Error::BatchSize {
            op: "batchnorm",
            min: 2,
            got: b,
        });
    }
    let n = b * s;
    let nf = T::from_usize(n).unwrap();
    let xd = x.data();
    let mut x_hat = vec![T::zero(); xd.len()];
    let mut out = vec![T::zero(); xd.len()];
    let mut inv_std = vec![T::zero(); c];
    let (mut batch_mean, mut batch_var) = (Vec::new(), Vec::new());
    for ch in 0..c {
        let idx = |bi: usize, si: usize| (bi * c + ch) * s + si;
        let (mean, var) = match mode {
            BnMode::Train => {
                let mut sum = T::zero();
                for bi in 0..b {
                    for si in 0..s {
                        sum = sum + xd[idx(bi, si)];
                    }
                }
                let mean = sum / nf;
                let mut sq = T::zero();
                for bi in 0..b {
                    for si in 0..s {
                        let d = xd[idx(bi, si)] - mean;
                        sq = sq + d * d;
                    }
                }
                batch_mean.push(mean);
                batch_var.push(sq / T::from_usize(n - 1).unwrap());
                (mean, sq / nf)
            }
            BnMode::Eval => (running.mean[ch], running.var[ch]),
        };
        let istd = T::one() / (var + eps).sqrt();
        inv_std[ch] = istd;
        let (g, bt) = (gamma.data()[ch], beta.data()[ch]);
        for bi in 0..b {
            for si in 0..s {
                let i = idx(bi, si);
                let h = (xd[i] - mean) * istd;
                x_hat[i] = h;
                out[i] = g * h + bt;
            }
        }
    }
    Ok((
        Tensor::new(x.shape(), out)?,
        BatchNormCache {
            x_hat,
            inv_std,
            mode,
            batch_mean,
            batch_var,
        },
    ))
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn batchnorm_backward<T: Scalar>(
    cache: &BatchNormCache<T>,
    gamma: &Tensor<T>,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Vec<T>, Vec<T>)> {
    let (b, c, s) = layout(dy.shape()).ok_or_else(|| Error::shape("batchnorm_backward", dy.shape(), gamma.shape()))?;
    if c != gamma.len() || dy.len() != cache.x_hat.len() {
        return Err(Error::shape("batchnorm_backward", dy.shape(), gamma.shape()));
    }
    let n = b * s;
    let nf = T::from_usize(n).unwrap();
    let g = dy.data();
    let mut dx = vec![T::zero(); g.len()];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for ch in 0..c {
        let idx = |bi: usize, si: usize| (bi * c + ch) * s + si;
        let mut sum_dy = T::zero();
        let mut sum_dy_xh = T::zero();
        for bi in 0..b {
            for si in 0..s {
                let i = idx(bi, si);
                sum_dy = sum_dy + g[i];
                sum_dy_xh = sum_dy_xh + g[i] * cache.x_hat[i];
            }
        }
        dgamma[ch] = sum_dy_xh;
        dbeta[ch] = sum_dy;
        let scale = gamma.data()[ch] * cache.inv_std[ch];
        for bi in 0..b {
            for si in 0..s {
                let i = idx(bi, si);
                dx[i] = match cache.mode {
                    BnMode::Train => {
                        scale * (g[i] - sum_dy / nf - cache.x_hat[i] * sum_dy_xh / nf)
                    }
                    BnMode::Eval => scale * g[i],
                };
            }
        }
    }
    Ok((Tensor::new(dy.shape(), dx)?, dgamma, dbeta))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(x: &Tensor<f64>, gamma: f64, beta: f64) -> Tensor<f64> {
        let c = x.shape()[1];
        let (m, v) = (vec![0.0; c], vec![1.0; c]);
        let stats = RunningStats { mean: &m, var: &v };
        batchnorm(
            x,
            &Tensor::full(&[c], gamma),
            &Tensor::full(&[c], beta),
            BnMode::Train,
            stats,
            1e-5,
        )
        .unwrap()
        .0
    }

    #[test]
    fn constant_input_maps_to_beta() {
        let x = Tensor::full(&[4, 2, 3, 3], 3.7);
        assert!(run(&x, 1.0, 0.0).data().iter().all(|v| v.abs() <= 1e-12));
        assert!(run(&x, 1.0, 5.0).data().iter().all(|v| (v - 5.0).abs() <= 1e-12));
    }

    #[test]
    fn plus_minus_one_channel() {
        let x = Tensor::new(&[2, 1], vec![-1.0, 1.0]).unwrap();
        let y = run(&x, 1.0, 0.0);
        let e = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((y.data()[0] + e).abs() < 1e-12);
        assert!((y.data()[1] - e).abs() < 1e-12);
    }

    #[test]
    fn single_sample_train_mode_rejected() {
        let x = Tensor::<f64>::zeros(&[1, 3]);
        let (m, v) = (vec![0.0; 3], vec![1.0; 3]);
        let r = batchnorm(
            &x,
            &Tensor::full(&[3], 1.0),
            &Tensor::zeros(&[3]),
            BnMode::Train,
            RunningStats { mean: &m, var: &v },
            1e-5,
        );
        assert!(matches!(r, Err(Error::BatchSize { got: 1, .. })));
    }

    #[test]
    fn running_stats_update_with_rate() {
        let x = Tensor::new(&[2, 1], vec![1.0, 3.0]).unwrap();
        let (mut m, mut v) = (vec![0.0f64], vec![1.0f64]);
        let (_, cache) = batchnorm(
            &x,
            &Tensor::full(&[1], 1.0),
            &Tensor::zeros(&[1]),
            BnMode::Train,
            RunningStats { mean: &m, var: &v },
            1e-5,
        )
        .unwrap();
        cache.update_running(&mut m, &mut v, 0.1);
        // batch mean 2, unbiased variance 2
        assert!((m[0] - 0.2).abs() < 1e-12);
        assert!((v[0] - (0.9 + 0.2)).abs() < 1e-12);
    }

    #[test]
    fn eval_mode_uses_running_stats() {
        let x = Tensor::new(&[1, 1], vec![4.0]).unwrap();
        let (m, v) = (vec![2.0], vec![4.0]);
        let (y, _) = batchnorm(
            &x,
            &Tensor::full(&[1], 1.0),
            &Tensor::zeros(&[1]),
            BnMode::Eval,
            RunningStats { mean: &m, var: &v },
            1e-5,
        )
        .unwrap();
        assert!((y.data()[0] - 2.0 / (4.0f64 + 1e-5).sqrt()).abs() < 1e-12);
    }
}
