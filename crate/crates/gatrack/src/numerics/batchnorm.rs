//! Channel-wise batch normalization over the last tensor axis.
//!
//! Any tensor is treated as `[batch, channels]` with the batch made of all
//! leading axes folded together, so a `[h, w, c]` feature map normalizes each
//! channel over its h*w cells. Train mode standardizes with batch statistics,
//! infer mode applies the affine transform from the running statistics.

use crate::error::{Error, Result};
use crate::numerics::{Mode, Tensor};

#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub momentum: f64,
    pub eps: f64,
}

#[derive(Debug, Clone)]
pub struct BnCache {
    pub x_hat: Tensor,
    pub inv_std: Vec<f64>,
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
    pub mode: Mode,
}

#[derive(Debug, Clone)]
pub struct BnGrads {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            gamma: Tensor::full(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], 1.0),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<(Tensor, BnCache)> {
        let c = self.channels();
        if x.last_dim() != c {
            return Err(Error::ShapeMismatch(format!(
                "batchnorm expects {} channels, got input {:?}",
                c,
                x.shape()
            )));
        }
        let m = x.lead_size();
        if m == 0 {
            return Err(Error::InvalidArgument(
                "batchnorm on an empty batch".into(),
            ));
        }
        let (mean, var) = match mode {
            Mode::Train => {
                let mut mean = vec![0.0; c];
                for r in 0..m {
                    let row = x.row(r);
                    for k in 0..c {
                        mean[k] += row[k];
                    }
                }
                for v in &mut mean {
                    *v /= m as f64;
                }
                let mut var = vec![0.0; c];
                for r in 0..m {
                    let row = x.row(r);
                    for k in 0..c {
                        let d = row[k] - mean[k];
                        var[k] += d * d;
                    }
                }
                for v in &mut var {
                    *v /= m as f64;
                }
                (mean, var)
            }
            Mode::Infer => (
                self.running_mean.data().to_vec(),
                self.running_var.data().to_vec(),
            ),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let mut x_hat = vec![0.0; m * c];
        let mut y = vec![0.0; m * c];
        let g = self.gamma.data();
        let b = self.beta.data();
        for r in 0..m {
            let row = x.row(r);
            for k in 0..c {
                let h = (row[k] - mean[k]) * inv_std[k];
                x_hat[r * c + k] = h;
                y[r * c + k] = g[k] * h + b[k];
            }
        }
        Ok((
            Tensor::from_vec(x.shape(), y)?,
            BnCache {
                x_hat: Tensor::from_vec(x.shape(), x_hat)?,
                inv_std,
                batch_mean: mean,
                batch_var: var,
                mode,
            },
        ))
    }

    pub fn backward(&self, cache: &BnCache, dy: &Tensor) -> Result<(Tensor, BnGrads)> {
        let c = self.channels();
        if dy.shape() != cache.x_hat.shape() {
            return Err(Error::ShapeMismatch(format!(
                "batchnorm backward dy {:?} vs cached {:?}",
                dy.shape(),
                cache.x_hat.shape()
            )));
        }
        let m = dy.lead_size();
        let g = self.gamma.data();
        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        for r in 0..m {
            let grow = dy.row(r);
            let hrow = cache.x_hat.row(r);
            for k in 0..c {
                dgamma[k] += grow[k] * hrow[k];
                dbeta[k] += grow[k];
            }
        }
        let mut dx = vec![0.0; m * c];
        match cache.mode {
            Mode::Train => {
                // Batch statistics depend on every element, so the gradient
                // carries the two mean-correction terms.
                let mf = m as f64;
                for r in 0..m {
                    let grow = dy.row(r);
                    let hrow = cache.x_hat.row(r);
                    for k in 0..c {
                        let term = grow[k] - dbeta[k] / mf - hrow[k] * dgamma[k] / mf;
                        dx[r * c + k] = g[k] * cache.inv_std[k] * term;
                    }
                }
            }
            Mode::Infer => {
                for r in 0..m {
                    let grow = dy.row(r);
                    for k in 0..c {
                        dx[r * c + k] = grow[k] * g[k] * cache.inv_std[k];
                    }
                }
            }
        }
        Ok((
            Tensor::from_vec(dy.shape(), dx)?,
            BnGrads {
                gamma: Tensor::from_vec(&[c], dgamma)?,
                beta: Tensor::from_vec(&[c], dbeta)?,
            },
        ))
    }

    /// Folds the batch statistics recorded in a train-mode cache into the
    /// running statistics.
    pub fn absorb(&mut self, cache: &BnCache) {
        debug_assert_eq!(cache.mode, Mode::Train);
        let mom = self.momentum;
        for (rm, bm) in self
            .running_mean
            .data_mut()
            .iter_mut()
            .zip(&cache.batch_mean)
        {
            *rm = (1.0 - mom) * *rm + mom * bm;
        }
        for (rv, bv) in self
            .running_var
            .data_mut()
            .iter_mut()
            .zip(&cache.batch_var)
        {
            *rv = (1.0 - mom) * *rv + mom * bv;
        }
    }
}

/// One-call form: normalizes `x` and, in train mode, updates the running
/// statistics of `state`.
pub fn batchnorm(x: &Tensor, state: &mut BatchNorm, mode: Mode) -> Result<Tensor> {
    let (y, cache) = state.forward(x, mode)?;
    if mode == Mode::Train {
        state.absorb(&cache);
    }
    Ok(y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn train_mode_standardizes_each_channel() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::randn(&[50, 4], 2.5, &mut rng);
        let bn = BatchNorm::new(4);
        let (y, _) = bn.forward(&x, Mode::Train).unwrap();
        for k in 0..4 {
            let mut mean = 0.0;
            let mut var = 0.0;
            for r in 0..50 {
                mean += y.at2(r, k);
            }
            mean /= 50.0;
            for r in 0..50 {
                var += (y.at2(r, k) - mean).powi(2);
            }
            var /= 50.0;
            assert!(mean.abs() < 1e-10, "channel {k} mean {mean}");
            assert!((var - 1.0).abs() < 1e-3, "channel {k} var {var}");
        }
    }

    #[test]
    fn constant_channel_maps_to_beta() {
        let x = Tensor::full(&[10, 2], 7.0);
        let mut bn = BatchNorm::new(2);
        bn.beta = Tensor::from_vec(&[2], vec![0.5, -0.5]).unwrap();
        let (y, _) = bn.forward(&x, Mode::Train).unwrap();
        for r in 0..10 {
            assert!((y.at2(r, 0) - 0.5).abs() < 1e-12);
            assert!((y.at2(r, 1) + 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn infer_mode_is_a_fixed_affine_map() {
        let mut bn = BatchNorm::new(1);
        bn.running_mean = Tensor::from_vec(&[1], vec![1.0]).unwrap();
        bn.running_var = Tensor::from_vec(&[1], vec![4.0]).unwrap();
        bn.gamma = Tensor::from_vec(&[1], vec![2.0]).unwrap();
        bn.beta = Tensor::from_vec(&[1], vec![3.0]).unwrap();
        let x = Tensor::from_vec(&[3, 1], vec![1.0, 3.0, 5.0]).unwrap();
        let (y, _) = bn.forward(&x, Mode::Infer).unwrap();
        // y = 2*(x-1)/sqrt(4+eps) + 3
        let s = 1.0 / (4.0f64 + 1e-5).sqrt();
        for (i, &xv) in [1.0, 3.0, 5.0].iter().enumerate() {
            assert!((y.data()[i] - (2.0 * (xv - 1.0) * s + 3.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_batch_is_an_error() {
        let x = Tensor::zeros(&[0, 3]);
        let bn = BatchNorm::new(3);
        assert!(bn.forward(&x, Mode::Train).is_err());
    }

    #[test]
    fn train_call_updates_running_stats_and_infer_does_not() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::randn(&[30, 2], 1.0, &mut rng);
        let mut bn = BatchNorm::new(2);
        let before = bn.running_mean.clone();
        batchnorm(&x, &mut bn, Mode::Infer).unwrap();
        assert_eq!(bn.running_mean, before);
        batchnorm(&x, &mut bn, Mode::Train).unwrap();
        assert_ne!(bn.running_mean, before);
        assert!(bn.running_var.data().iter().all(|&v| v >= 0.0));
    }
}
