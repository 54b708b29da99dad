//! Per-channel batch normalization.
//!
//! Train mode normalizes by the batch mean and the biased (1/M) variance over
//! the N, H, W axes, then applies the learned scale/shift. Inference
//! normalizes by the running statistics. The forward never mutates its
//! parameter record; in train mode it returns the proposed running-stat
//! update and the caller decides when to commit it (the training loop does,
//! the gradient checker does not).

use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub epsilon: f64,
    pub momentum: f64,
}

impl BatchNormParams {
    /// Fresh parameters for `channels`: gamma 1, beta 0, running mean 0,
    /// running variance 1.
    pub fn identity(channels: usize, epsilon: f64, momentum: f64) -> Result<Self> {
        let shape = Shape::new([channels])?;
        let p = BatchNormParams {
            gamma: Tensor::filled(shape.clone(), 1.0),
            beta: Tensor::zeros(shape.clone()),
            running_mean: Tensor::zeros(shape.clone()),
            running_var: Tensor::filled(shape, 1.0),
            epsilon,
            momentum,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn channels(&self) -> usize {
        self.gamma.dims()[0]
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.channels();
        for (name, t) in [
            ("beta", &self.beta),
            ("running_mean", &self.running_mean),
            ("running_var", &self.running_var),
        ] {
            if t.rank() != 1 || t.dims()[0] != c {
                return Err(Error::shape_mismatch(
                    "batchnorm params",
                    format!("{name} of shape [{c}]"),
                    t.shape(),
                ));
            }
        }
        if self.epsilon <= 0.0 {
            return Err(Error::InvalidParameter {
                name: "batchnorm epsilon",
                reason: format!("must be > 0, got {}", self.epsilon),
            });
        }
        if self.running_var.data().iter().any(|&v| v < 0.0) {
            return Err(Error::InvalidParameter {
                name: "batchnorm running_var",
                reason: "negative variance".into(),
            });
        }
        Ok(())
    }
}

/// Batch statistics folded with the momentum rule, to be committed by the
/// caller: `running = momentum * running + (1 - momentum) * batch`.
#[derive(Clone, Debug)]
pub struct RunningStatsUpdate {
    pub mean: Tensor,
    pub var: Tensor,
}

#[derive(Clone, Debug)]
pub struct BatchNormCache {
    x_hat: Tensor,
    gamma: Tensor,
    inv_std: Vec<f64>,
    /// Elements per channel; zero marks an inference-mode cache, whose
    /// backward treats the statistics as constants.
    batch_elems: usize,
}

pub fn batchnorm_forward(
    x: &Tensor,
    p: &BatchNormParams,
    mode: Mode,
) -> Result<(Tensor, BatchNormCache, Option<RunningStatsUpdate>)> {
    if x.rank() != 4 {
        return Err(Error::shape_mismatch(
            "batchnorm input",
            "[N,H,W,C]",
            x.shape(),
        ));
    }
    let (n, h, w, c) = (x.dims()[0], x.dims()[1], x.dims()[2], x.dims()[3]);
    if c != p.channels() {
        return Err(Error::shape_mismatch(
            "batchnorm channels",
            p.channels(),
            c,
        ));
    }
    let m = n * h * w;
    let xd = x.data();

    let (mean, var, update) = match mode {
        Mode::Train => {
            if m < 2 {
                return Err(Error::DegenerateBatch { elements: m });
            }
            let mut mean = vec![0.0; c];
            for row in xd.chunks_exact(c) {
                for (acc, &v) in mean.iter_mut().zip(row) {
                    *acc += v;
                }
            }
            for v in mean.iter_mut() {
                *v /= m as f64;
            }
            let mut var = vec![0.0; c];
            for row in xd.chunks_exact(c) {
                for (ch, &v) in row.iter().enumerate() {
                    let d = v - mean[ch];
                    var[ch] += d * d;
                }
            }
            for v in var.iter_mut() {
                *v /= m as f64;
            }
            let update = RunningStatsUpdate {
                mean: fold_running(&p.running_mean, &mean, p.momentum)?,
                var: fold_running(&p.running_var, &var, p.momentum)?,
            };
            (mean, var, Some(update))
        }
        Mode::Infer => (
            p.running_mean.data().to_vec(),
            p.running_var.data().to_vec(),
            None,
        ),
    };

    let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + p.epsilon).sqrt()).collect();
    let gd = p.gamma.data();
    let bd = p.beta.data();
    let mut x_hat = vec![0.0; xd.len()];
    let mut y = vec![0.0; xd.len()];
    for (i, &v) in xd.iter().enumerate() {
        let ch = i % c;
        let xh = (v - mean[ch]) * inv_std[ch];
        x_hat[i] = xh;
        y[i] = gd[ch] * xh + bd[ch];
    }

    let cache = BatchNormCache {
        x_hat: Tensor::from_values(x.shape().clone(), x_hat)?,
        gamma: p.gamma.clone(),
        inv_std,
        batch_elems: if mode == Mode::Train { m } else { 0 },
    };
    Ok((Tensor::from_values(x.shape().clone(), y)?, cache, update))
}

fn fold_running(running: &Tensor, batch: &[f64], momentum: f64) -> Result<Tensor> {
    let folded = running
        .data()
        .iter()
        .zip(batch)
        .map(|(&r, &b)| momentum * r + (1.0 - momentum) * b)
        .collect();
    Tensor::from_values(running.shape().clone(), folded)
}

/// Exact gradients through the batch statistics: returns
/// `(dx, dgamma, dbeta)`. For a train-mode cache the mean and variance are
/// treated as functions of `x`; for an inference cache they are constants.
pub fn batchnorm_backward(dy: &Tensor, cache: &BatchNormCache) -> Result<(Tensor, Tensor, Tensor)> {
    if dy.shape() != cache.x_hat.shape() {
        return Err(Error::shape_mismatch(
            "batchnorm_backward dy",
            cache.x_hat.shape(),
            dy.shape(),
        ));
    }
    let c = cache.gamma.dims()[0];
    let dyd = dy.data();
    let xh = cache.x_hat.data();

    let mut dbeta = vec![0.0; c];
    let mut dgamma = vec![0.0; c];
    for (i, &g) in dyd.iter().enumerate() {
        let ch = i % c;
        dbeta[ch] += g;
        dgamma[ch] += g * xh[i];
    }

    let gd = cache.gamma.data();
    let mut dx = vec![0.0; dyd.len()];
    if cache.batch_elems > 0 {
        let m = cache.batch_elems as f64;
        for (i, &g) in dyd.iter().enumerate() {
            let ch = i % c;
            dx[i] = gd[ch] * cache.inv_std[ch] / m
                * (m * g - dbeta[ch] - xh[i] * dgamma[ch]);
        }
    } else {
        for (i, &g) in dyd.iter().enumerate() {
            let ch = i % c;
            dx[i] = gd[ch] * cache.inv_std[ch] * g;
        }
    }

    Ok((
        Tensor::from_values(cache.x_hat.shape().clone(), dx)?,
        Tensor::from_values(cache.gamma.shape().clone(), dgamma)?,
        Tensor::from_values(cache.gamma.shape().clone(), dbeta)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracles;
    use crate::rng::stream;

    fn params(c: usize) -> BatchNormParams {
        BatchNormParams::identity(c, 1e-5, 0.9).unwrap()
    }

    /// Per-channel standardized copy of `x`, built directly from the
    /// definition, for affine tests.
    fn standardize(x: &Tensor) -> Tensor {
        let c = x.dims()[3];
        let m = x.len() / c;
        let mut mean = vec![0.0; c];
        for (i, v) in x.data().iter().enumerate() {
            mean[i % c] += v / m as f64;
        }
        let mut var = vec![0.0; c];
        for (i, v) in x.data().iter().enumerate() {
            var[i % c] += (v - mean[i % c]).powi(2) / m as f64;
        }
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| (v - mean[i % c]) / (var[i % c] + 1e-5).sqrt())
            .collect();
        Tensor::from_values(x.shape().clone(), data).unwrap()
    }

    #[test]
    fn normalized_input_is_a_fixed_point_up_to_epsilon() {
        let mut rng = stream(2, "bn.fixedpoint");
        let raw = oracles::random_tensor(&mut rng, &[2, 3, 3, 2], 1.0);
        // standardize exactly (epsilon-free) so the layer sees zero-mean,
        // unit-variance channels
        let c = 2;
        let m = raw.len() / c;
        let mut mean = vec![0.0; c];
        for (i, v) in raw.data().iter().enumerate() {
            mean[i % c] += v / m as f64;
        }
        let mut var = vec![0.0; c];
        for (i, v) in raw.data().iter().enumerate() {
            var[i % c] += (v - mean[i % c]).powi(2) / m as f64;
        }
        let x = Tensor::from_values(
            raw.shape().clone(),
            raw.data()
                .iter()
                .enumerate()
                .map(|(i, v)| (v - mean[i % c]) / var[i % c].sqrt())
                .collect(),
        )
        .unwrap();
        let (y, _, _) = batchnorm_forward(&x, &params(c), Mode::Train).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            // off only by the 1/sqrt(1 + eps) factor
            assert!((a - b).abs() <= 2e-5 * b.abs().max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn constant_channel_maps_to_beta() {
        let x = Tensor::filled(Shape::new([2, 2, 2, 3]).unwrap(), 4.2);
        let mut p = params(3);
        p.beta = Tensor::from_values(Shape::new([3]).unwrap(), vec![-1.0, 0.5, 2.0]).unwrap();
        let (y, _, _) = batchnorm_forward(&x, &p, Mode::Train).unwrap();
        for row in y.data().chunks_exact(3) {
            assert_eq!(row, p.beta.data());
        }
    }

    #[test]
    fn affine_definition_gamma_two_beta_one() {
        let mut rng = stream(4, "bn.affine");
        let x = oracles::random_tensor(&mut rng, &[2, 4, 4, 2], 1.0);
        let x_hat = standardize(&x);
        let mut p = params(2);
        p.gamma = Tensor::filled(Shape::new([2]).unwrap(), 2.0);
        p.beta = Tensor::filled(Shape::new([2]).unwrap(), 1.0);
        let (y, _, _) = batchnorm_forward(&x, &p, Mode::Train).unwrap();
        for (a, (h, _)) in y.data().iter().zip(x_hat.data().iter().zip(x.data())) {
            assert!((a - (2.0 * h + 1.0)).abs() <= 1e-12);
        }
    }

    #[test]
    fn train_output_is_standardized_with_identity_params() {
        let mut rng = stream(6, "bn.standardized");
        let x = oracles::random_tensor(&mut rng, &[3, 4, 4, 2], 1.0);
        let (y, _, _) = batchnorm_forward(&x, &params(2), Mode::Train).unwrap();
        let c = 2;
        let m = (y.len() / c) as f64;
        for ch in 0..c {
            let mut mean = 0.0;
            let mut var = 0.0;
            for (i, v) in y.data().iter().enumerate() {
                if i % c == ch {
                    mean += v / m;
                }
            }
            for (i, v) in y.data().iter().enumerate() {
                if i % c == ch {
                    var += (v - mean).powi(2) / m;
                }
            }
            assert!(mean.abs() <= 1e-7, "channel {ch} mean {mean}");
            assert!((var - 1.0).abs() <= 1e-4, "channel {ch} var {var}");
        }
    }

    #[test]
    fn degenerate_batch_is_rejected() {
        let x = Tensor::zeros(Shape::new([1, 1, 1, 4]).unwrap());
        assert!(matches!(
            batchnorm_forward(&x, &params(4), Mode::Train),
            Err(Error::DegenerateBatch { elements: 1 })
        ));
    }

    #[test]
    fn running_stats_fold_with_momentum() {
        let mut rng = stream(9, "bn.running");
        let x = oracles::random_tensor(&mut rng, &[2, 3, 3, 1], 1.0);
        let p = params(1);
        let (_, _, update) = batchnorm_forward(&x, &p, Mode::Train).unwrap();
        let update = update.unwrap();
        let m = x.len() as f64;
        let batch_mean: f64 = x.data().iter().sum::<f64>() / m;
        let batch_var: f64 =
            x.data().iter().map(|v| (v - batch_mean).powi(2)).sum::<f64>() / m;
        assert!((update.mean.data()[0] - (0.9 * 0.0 + 0.1 * batch_mean)).abs() < 1e-12);
        assert!((update.var.data()[0] - (0.9 * 1.0 + 0.1 * batch_var)).abs() < 1e-12);
    }

    #[test]
    fn infer_mode_uses_running_stats() {
        let mut p = params(1);
        p.running_mean = Tensor::from_values(Shape::new([1]).unwrap(), vec![2.0]).unwrap();
        p.running_var = Tensor::from_values(Shape::new([1]).unwrap(), vec![4.0]).unwrap();
        let x = Tensor::filled(Shape::new([1, 2, 2, 1]).unwrap(), 6.0);
        let (y, _, update) = batchnorm_forward(&x, &p, Mode::Infer).unwrap();
        assert!(update.is_none());
        for &v in y.data() {
            assert!((v - (6.0 - 2.0) / (4.0f64 + 1e-5).sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_zero_dy_gives_zeros_and_dbeta_sums_dy() {
        let mut rng = stream(12, "bn.backward");
        let x = oracles::random_tensor(&mut rng, &[2, 3, 3, 2], 1.0);
        let (y, cache, _) = batchnorm_forward(&x, &params(2), Mode::Train).unwrap();

        let zero = Tensor::zeros(y.shape().clone());
        let (dx, dgamma, dbeta) = batchnorm_backward(&zero, &cache).unwrap();
        assert!(dx.data().iter().all(|&v| v == 0.0));
        assert!(dgamma.data().iter().all(|&v| v == 0.0));
        assert!(dbeta.data().iter().all(|&v| v == 0.0));

        let dy = oracles::random_tensor(&mut rng, &[2, 3, 3, 2], 1.0);
        let (_, _, dbeta) = batchnorm_backward(&dy, &cache).unwrap();
        for ch in 0..2 {
            let want: f64 = dy
                .data()
                .iter()
                .enumerate()
                .filter(|(i, _)| i % 2 == ch)
                .map(|(_, v)| v)
                .sum();
            assert!((dbeta.data()[ch] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let report = crate::gradcheck::check_batchnorm(55).unwrap();
        assert!(
            report.max_rel_err <= 1e-5,
            "batchnorm gradcheck error {}",
            report.max_rel_err
        );
    }
}
