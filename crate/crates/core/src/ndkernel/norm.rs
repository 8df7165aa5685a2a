use super::{Mode, Tensor};
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug)]
pub struct BatchNormCache {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    mode: Mode,
}

#[derive(Clone, Debug)]
pub struct BatchNormGrads {
    pub dx: Tensor,
    pub dgamma: Tensor,
    pub dbeta: Tensor,
}

/// Per-channel batch normalization; the channel axis is the last axis and
/// statistics run over all leading axes. Running statistics are updated in
/// place in train mode (unbiased variance, as is conventional).
#[allow(clippy::too_many_arguments)]
pub fn batchnorm(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running_mean: &mut [f64],
    running_var: &mut [f64],
    mode: Mode,
    eps: f64,
    momentum: f64,
) -> Result<(Tensor, BatchNormCache)> {
    let c = *x.shape().last().ok_or_else(|| Error::Dimension("batchnorm on scalar".into()))?;
    gamma.expect_shape(&[c], "batchnorm gamma")?;
    beta.expect_shape(&[c], "batchnorm beta")?;
    if running_mean.len() != c || running_var.len() != c {
        return Err(Error::Dimension("batchnorm running stats length".into()));
    }
    let rows = x.len() / c.max(1);
    let (mean, var) = match mode {
        Mode::Train => {
            if x.dim(0) < 2 {
                return Err(Error::DegenerateBatch(format!(
                    "batch size {} in train mode",
                    x.dim(0)
                )));
            }
            let mut mean = vec![0.0; c];
            for r in x.data().chunks_exact(c) {
                for (m, v) in mean.iter_mut().zip(r) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m /= rows as f64);
            let mut var = vec![0.0; c];
            for r in x.data().chunks_exact(c) {
                for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
                    *s += (v - m) * (v - m);
                }
            }
            var.iter_mut().for_each(|s| *s /= rows as f64);
            let unbias = rows as f64 / (rows as f64 - 1.0);
            for j in 0..c {
                running_mean[j] = (1.0 - momentum) * running_mean[j] + momentum * mean[j];
                running_var[j] = (1.0 - momentum) * running_var[j] + momentum * var[j] * unbias;
            }
            (mean, var)
        }
        Mode::Eval => (running_mean.to_vec(), running_var.to_vec()),
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut xhat = vec![0.0; x.len()];
    let mut out = vec![0.0; x.len()];
    for ((xr, hr), or) in x
        .data()
        .chunks_exact(c)
        .zip(xhat.chunks_exact_mut(c))
        .zip(out.chunks_exact_mut(c))
    {
        for j in 0..c {
            hr[j] = (xr[j] - mean[j]) * inv_std[j];
            or[j] = gamma.data()[j] * hr[j] + beta.data()[j];
        }
    }
    Ok((Tensor::new(x.shape(), out)?, BatchNormCache { xhat, inv_std, mode }))
}

pub fn batchnorm_backward(gamma: &Tensor, cache: &BatchNormCache, dy: &Tensor) -> Result<BatchNormGrads> {
    let c = gamma.len();
    if dy.len() != cache.xhat.len() {
        return Err(Error::Dimension("batchnorm upstream gradient".into()));
    }
    let rows = dy.len() / c;
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for (dr, hr) in dy.data().chunks_exact(c).zip(cache.xhat.chunks_exact(c)) {
        for j in 0..c {
            dgamma[j] += dr[j] * hr[j];
            dbeta[j] += dr[j];
        }
    }
    let g = gamma.data();
    let mut dx = vec![0.0; dy.len()];
    match cache.mode {
        Mode::Train => {
            let m = rows as f64;
            for ((dr, hr), xr) in dy
                .data()
                .chunks_exact(c)
                .zip(cache.xhat.chunks_exact(c))
                .zip(dx.chunks_exact_mut(c))
            {
                for j in 0..c {
                    xr[j] = g[j] * cache.inv_std[j] / m
                        * (m * dr[j] - dbeta[j] - hr[j] * dgamma[j]);
                }
            }
        }
        Mode::Eval => {
            for (dr, xr) in dy.data().chunks_exact(c).zip(dx.chunks_exact_mut(c)) {
                for j in 0..c {
                    xr[j] = dr[j] * g[j] * cache.inv_std[j];
                }
            }
        }
    }
    Ok(BatchNormGrads {
        dx: Tensor::new(dy.shape(), dx)?,
        dgamma: Tensor::vector(dgamma),
        dbeta: Tensor::vector(dbeta),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eval_with_matching_running_mean_gives_zeros() {
        let x = Tensor::full(&[3, 1], 4.0);
        let (y, _) = batchnorm(
            &x,
            &Tensor::full(&[1], 1.0),
            &Tensor::zeros(&[1]),
            &mut [4.0],
            &mut [1.0],
            Mode::Eval,
            BN_EPS,
            BN_MOMENTUM,
        )
        .unwrap();
        assert!(y.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn train_unit_pair() {
        let x = Tensor::new(&[2, 1], vec![-1.0, 1.0]).unwrap();
        let (y, _) = batchnorm(
            &x,
            &Tensor::full(&[1], 1.0),
            &Tensor::zeros(&[1]),
            &mut [0.0],
            &mut [1.0],
            Mode::Train,
            0.0,
            BN_MOMENTUM,
        )
        .unwrap();
        assert_eq!(y.data(), &[-1.0, 1.0]);
    }

    #[test]
    fn single_sample_train_rejected() {
        let x = Tensor::new(&[1, 1], vec![2.0]).unwrap();
        let r = batchnorm(
            &x,
            &Tensor::full(&[1], 1.0),
            &Tensor::zeros(&[1]),
            &mut [0.0],
            &mut [1.0],
            Mode::Train,
            BN_EPS,
            BN_MOMENTUM,
        );
        assert!(matches!(r, Err(Error::DegenerateBatch(_))));
    }

    #[test]
    fn running_stats_move_towards_batch() {
        let x = Tensor::new(&[2, 1], vec![1.0, 3.0]).unwrap();
        let (mut rm, mut rv) = ([0.0], [1.0]);
        batchnorm(&x, &Tensor::full(&[1], 1.0), &Tensor::zeros(&[1]), &mut rm, &mut rv, Mode::Train, BN_EPS, 0.1)
            .unwrap();
        assert!((rm[0] - 0.2).abs() < 1e-15);
        // unbiased batch variance is 2
        assert!((rv[0] - (0.9 + 0.2)).abs() < 1e-15);
    }
}
