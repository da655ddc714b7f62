use std::sync::Mutex;

use super::{join, Module, ParamKind};
use crate::error::{Error, Result};
use crate::tensor::{lit, Scalar, Tensor};

/// Running statistics used in evaluation mode.
pub struct RunningStats<T: Scalar> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
}

/// Per-channel batch normalization over `N x C x H x W`.
///
/// Running statistics sit behind a mutex so a shared model can run
/// forward passes; training-mode updates to one instance must still be
/// serialized by the caller.
pub struct BatchNorm2d<T: Scalar> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    running: Mutex<RunningStats<T>>,
    pub eps: f64,
    pub momentum: f64,
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            gamma: Tensor::ones(&[channels]).requires_grad(true),
            beta: Tensor::zeros(&[channels]).requires_grad(true),
            running: Mutex::new(RunningStats {
                mean: Tensor::zeros(&[channels]),
                var: Tensor::ones(&[channels]),
            }),
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }

    pub fn running_stats(&self) -> (Vec<T>, Vec<T>) {
        let r = self.running.lock().expect("running stats lock");
        (r.mean.to_vec(), r.var.to_vec())
    }

    pub fn set_running_stats(&mut self, mean: Vec<T>, var: Vec<T>) -> Result<()> {
        let c = self.channels();
        let r = self.running.get_mut().expect("running stats lock");
        r.mean = Tensor::from_vec(mean, &[c])?;
        r.var = Tensor::from_vec(var, &[c])?;
        Ok(())
    }

    pub fn forward(&self, x: &Tensor<T>, training: bool) -> Result<Tensor<T>> {
        batch_norm(x, self, training)
    }
}

impl<T: Scalar> Module<T> for BatchNorm2d<T> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor<T>)) {
        f(&join(prefix, "gamma"), ParamKind::Trainable, &mut self.gamma);
        f(&join(prefix, "beta"), ParamKind::Trainable, &mut self.beta);
        let r = self.running.get_mut().expect("running stats lock");
        f(&join(prefix, "running_mean"), ParamKind::Buffer, &mut r.mean);
        f(&join(prefix, "running_var"), ParamKind::Buffer, &mut r.var);
    }
}

/// Training mode normalizes with the biased batch variance and folds the
/// unbiased estimate into the running statistics with `momentum`. Evaluation
/// mode uses the running statistics.
pub fn batch_norm<T: Scalar>(x: &Tensor<T>, p: &BatchNorm2d<T>, training: bool) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.len() != 4 || s[1] != p.channels() {
        return Err(Error::shape(format!(
            "batch_norm over {} channels got input {s:?}",
            p.channels()
        )));
    }
    let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
    let count = n * hw;
    if training && count < 2 {
        return Err(Error::InvalidArgument(format!(
            "batch_norm training needs at least 2 values per channel, got {count}"
        )));
    }
    let xd = x.data();
    let plane = move |ni: usize, ci: usize| (ni * c + ci) * hw;

    let (mean, var): (Vec<f64>, Vec<f64>) = if training {
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ci in 0..c {
            let mut acc = 0.0;
            for ni in 0..n {
                acc += xd[plane(ni, ci)..plane(ni, ci) + hw].iter().map(|v| v.as_f64()).sum::<f64>();
            }
            let m = acc / count as f64;
            let mut sq = 0.0;
            for ni in 0..n {
                sq += xd[plane(ni, ci)..plane(ni, ci) + hw]
                    .iter()
                    .map(|v| (v.as_f64() - m).powi(2))
                    .sum::<f64>();
            }
            mean[ci] = m;
            var[ci] = sq / count as f64;
        }
        let mut r = p.running.lock().expect("running stats lock");
        let mom = p.momentum;
        let unbias = count as f64 / (count as f64 - 1.0);
        let new_mean = r
            .mean
            .data()
            .iter()
            .zip(&mean)
            .map(|(&old, &m)| lit::<T>((1.0 - mom) * old.as_f64() + mom * m))
            .collect();
        let new_var = r
            .var
            .data()
            .iter()
            .zip(&var)
            .map(|(&old, &v)| lit::<T>((1.0 - mom) * old.as_f64() + mom * v * unbias))
            .collect();
        r.mean = Tensor::from_vec(new_mean, &[c])?;
        r.var = Tensor::from_vec(new_var, &[c])?;
        (mean, var)
    } else {
        let r = p.running.lock().expect("running stats lock");
        (
            r.mean.data().iter().map(|v| v.as_f64()).collect(),
            r.var.data().iter().map(|v| v.as_f64()).collect(),
        )
    };

    let inv_std: Vec<T> = var.iter().map(|&v| lit::<T>(1.0 / (v + p.eps).sqrt())).collect();
    let mean_t: Vec<T> = mean.iter().map(|&m| lit::<T>(m)).collect();
    let (gamma, beta) = (p.gamma.data(), p.beta.data());
    let mut xhat = vec![T::zero(); xd.len()];
    let mut out = vec![T::zero(); xd.len()];
    for ni in 0..n {
        for ci in 0..c {
            let r = plane(ni, ci)..plane(ni, ci) + hw;
            for ((h, o), &v) in xhat[r.clone()].iter_mut().zip(&mut out[r.clone()]).zip(&xd[r]) {
                *h = (v - mean_t[ci]) * inv_std[ci];
                *o = gamma[ci] * *h + beta[ci];
            }
        }
    }

    let gamma_t = p.gamma.clone();
    let need = (x.needs_grad(), p.gamma.needs_grad(), p.beta.needs_grad());
    Ok(Tensor::from_op(
        out,
        s.to_vec(),
        vec![x.clone(), p.gamma.clone(), p.beta.clone()],
        move |g| {
            let gamma = gamma_t.data();
            let mut sum_g = vec![T::zero(); c];
            let mut sum_gx = vec![T::zero(); c];
            for ni in 0..n {
                for ci in 0..c {
                    let r = plane(ni, ci)..plane(ni, ci) + hw;
                    for (&gv, &h) in g[r.clone()].iter().zip(&xhat[r]) {
                        sum_g[ci] += gv;
                        sum_gx[ci] += gv * h;
                    }
                }
            }
            let dx = need.0.then(|| {
                let mut dx = vec![T::zero(); g.len()];
                let m = lit::<T>(count as f64);
                for ni in 0..n {
                    for ci in 0..c {
                        let r = plane(ni, ci)..plane(ni, ci) + hw;
                        let scale = gamma[ci] * inv_std[ci];
                        for ((d, &gv), &h) in dx[r.clone()].iter_mut().zip(&g[r.clone()]).zip(&xhat[r]) {
                            *d = if training {
                                scale * (gv - (sum_g[ci] + h * sum_gx[ci]) / m)
                            } else {
                                scale * gv
                            };
                        }
                    }
                }
                dx
            });
            vec![dx, need.1.then(|| sum_gx.clone()), need.2.then(|| sum_g.clone())]
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check_many, GradCheckOptions};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec((0..n).map(|_| rng.random_range(-2.0..3.0)).collect(), shape).unwrap()
    }

    #[test]
    fn training_output_is_standardized() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&mut rng, &[2, 3, 4, 4]);
        let bn = BatchNorm2d::<f64>::new(3);
        let y = bn.forward(&x, true).unwrap();
        for c in 0..3 {
            let vals: Vec<f64> = (0..2)
                .flat_map(|n| y.data()[(n * 3 + c) * 16..(n * 3 + c + 1) * 16].to_vec())
                .collect();
            let m = vals.iter().sum::<f64>() / 32.0;
            let v = vals.iter().map(|a| (a - m).powi(2)).sum::<f64>() / 32.0;
            assert!(m.abs() < 1e-12);
            assert!((v - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn eval_with_default_stats_scales_by_eps() {
        let x = Tensor::<f64>::from_vec((0..8).map(|v| v as f64 - 3.0).collect(), &[1, 2, 2, 2]).unwrap();
        let bn = BatchNorm2d::<f64>::new(2);
        let y = bn.forward(&x, false).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b / (1.0f64 + 1e-5).sqrt()).abs() < 1e-15);
        }
    }

    #[test]
    fn training_stats_match_two_pass_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&mut rng, &[2, 3, 4, 4]);
        let bn = BatchNorm2d::<f64>::new(3);
        bn.forward(&x, true).unwrap();
        let (rm, rv) = bn.running_stats();
        for c in 0..3 {
            let vals: Vec<f64> = (0..2)
                .flat_map(|n| x.data()[(n * 3 + c) * 16..(n * 3 + c + 1) * 16].to_vec())
                .collect();
            let m = vals.iter().sum::<f64>() / 32.0;
            let v_unbiased = vals.iter().map(|a| (a - m).powi(2)).sum::<f64>() / 31.0;
            assert!((rm[c] - 0.1 * m).abs() < 1e-12);
            assert!((rv[c] - (0.9 + 0.1 * v_unbiased)).abs() < 1e-12);
        }
    }

    #[test]
    fn degenerate_training_batch_is_rejected() {
        let bn = BatchNorm2d::<f64>::new(1);
        let err = bn.forward(&Tensor::ones(&[1, 1, 1, 1]), true).unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)));
        assert!(bn.forward(&Tensor::ones(&[1, 1, 1, 1]), false).is_ok());
    }

    #[test]
    fn gradients_match_finite_differences_in_both_modes() {
        for seed in 0..5 {
            for training in [false, true] {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut bn = BatchNorm2d::<f64>::new(2);
                bn.set_running_stats(vec![0.3, -0.2], vec![1.5, 0.7]).unwrap();
                let inputs = vec![
                    ("x".to_string(), random(&mut rng, &[2, 2, 3, 3])),
                    ("gamma".to_string(), random(&mut rng, &[2]).mul_scalar(0.3)),
                    ("beta".to_string(), random(&mut rng, &[2]).mul_scalar(0.3)),
                    ("probe".to_string(), random(&mut rng, &[2, 2, 3, 3]).mul_scalar(0.3)),
                ];
                let report = grad_check_many(
                    |t| {
                        bn.gamma = t[1].clone();
                        bn.beta = t[2].clone();
                        Ok(bn.forward(&t[0], training)?.mul(&t[3])?.sigmoid().sum_all())
                    },
                    &inputs,
                    &GradCheckOptions::default(),
                )
                .unwrap();
                assert!(report.max_rel_error < 1e-5, "training={training}: {report:?}");
            }
        }
    }
}
