use serde::{Deserialize, Serialize};

use super::stats::{affine_normalize, norm_backward, reduce_stats, AffineCache, StatScope, StatSource};
use crate::error::Result;
use crate::nn::{Gradients, Mode, Module, ParamMut};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.1;

/// Batch normalization over `(N, H, W)` per channel.
///
/// Variances are population variances everywhere, running estimates
/// included. The denominator is `sigma + eps`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm2d {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            gamma: Tensor::full(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], 1.0),
            momentum: DEFAULT_MOMENTUM,
            eps: DEFAULT_EPS,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn batchnorm_forward(&mut self, x: &Tensor, mode: Mode) -> Result<(Tensor, AffineCache)> {
        self.forward(x, mode)
    }
}

impl Module for BatchNorm2d {
    type Cache = AffineCache;

    fn apply(&self, x: &Tensor, mode: Mode) -> Result<(Tensor, AffineCache)> {
        let (mu, sigma, source) = match mode {
            Mode::Train => {
                let (mu, sigma) = reduce_stats(x, StatScope::Batch)?;
                (mu, sigma, StatSource::Input)
            }
            Mode::Eval => (
                self.running_mean.clone(),
                self.running_var.map(f64::sqrt),
                StatSource::Fixed,
            ),
        };
        affine_normalize(x, &mu, &sigma, &self.gamma, &self.beta, self.eps, StatScope::Batch, source)
    }

    fn track(&mut self, cache: &AffineCache) {
        let m = self.momentum;
        for ((rm, rv), (&mu, &sigma)) in self
            .running_mean
            .data_mut()
            .iter_mut()
            .zip(self.running_var.data_mut())
            .zip(cache.mu().data().iter().zip(cache.sigma().data()))
        {
            *rm = (1.0 - m) * *rm + m * mu;
            *rv = (1.0 - m) * *rv + m * sigma * sigma;
        }
    }

    fn backward(&self, cache: &AffineCache, dy: &Tensor) -> Result<Gradients> {
        let (dx, dgamma, dbeta) = norm_backward(cache, dy)?;
        Ok(Gradients {
            dx,
            params: vec![dgamma, dbeta],
        })
    }

    fn params(&self) -> Vec<(&'static str, &Tensor)> {
        vec![("gamma", &self.gamma), ("beta", &self.beta)]
    }

    fn params_mut(&mut self) -> Vec<ParamMut<'_>> {
        vec![
            ParamMut::free("gamma", &mut self.gamma),
            ParamMut::free("beta", &mut self.beta),
        ]
    }

    fn buffers(&self) -> Vec<(&'static str, &Tensor)> {
        vec![("running_mean", &self.running_mean), ("running_var", &self.running_var)]
    }

    fn buffers_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![
            ("running_mean", &mut self.running_mean),
            ("running_var", &mut self.running_var),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::grad_check;
    use crate::tensor::Prng;

    #[test]
    fn eval_with_unit_running_stats() {
        let bn = BatchNorm2d::new(3);
        let x = Tensor::gaussian(&[2, 3, 2, 2], &mut Prng::new(1), 0.0, 1.0);
        let (y, _) = bn.apply(&x, Mode::Eval).unwrap();
        let expected = x.map(|v| v / (1.0 + bn.eps));
        assert!(y.max_abs_diff(&expected) < 1e-15);
    }

    #[test]
    fn eval_is_batch_size_independent() {
        let mut bn = BatchNorm2d::new(2);
        bn.running_mean = Tensor::from_vec(vec![0.3, -0.2]);
        bn.running_var = Tensor::from_vec(vec![2.0, 0.5]);
        let row = Tensor::gaussian(&[1, 2, 3, 3], &mut Prng::new(2), 0.0, 1.0);
        let (single, _) = bn.apply(&row, Mode::Eval).unwrap();
        let mut many = Vec::new();
        for _ in 0..5 {
            many.extend_from_slice(row.data());
        }
        let (batch, _) = bn.apply(&Tensor::new(vec![5, 2, 3, 3], many).unwrap(), Mode::Eval).unwrap();
        for chunk in batch.data().chunks(single.len()) {
            assert_eq!(chunk, single.data());
        }
    }

    #[test]
    fn running_mean_converges() {
        let mut bn = BatchNorm2d::new(2);
        let mut p = Prng::new(5);
        for _ in 0..500 {
            let x = Tensor::gaussian(&[8, 2, 4, 4], &mut p, 1.5, 2.0);
            bn.forward(&x, Mode::Train).unwrap();
        }
        for &m in bn.running_mean.data() {
            assert!((m - 1.5).abs() <= 0.05, "running mean {m}");
        }
        for &v in bn.running_var.data() {
            assert!(v >= 0.0);
            assert!((v - 4.0).abs() < 0.4, "running var {v}");
        }
    }

    #[test]
    fn momentum_one_makes_eval_reproduce_train() {
        let mut bn = BatchNorm2d::new(3);
        bn.momentum = 1.0;
        let x = Tensor::gaussian(&[4, 3, 3, 3], &mut Prng::new(6), 2.0, 3.0);
        let (train, _) = bn.forward(&x, Mode::Train).unwrap();
        let (eval, _) = bn.apply(&x, Mode::Eval).unwrap();
        assert!(train.max_abs_diff(&eval) < 1e-12);
    }

    #[test]
    fn eval_does_not_mutate() {
        let mut bn = BatchNorm2d::new(2);
        let before = bn.clone();
        bn.forward(&Tensor::gaussian(&[2, 2, 2, 2], &mut Prng::new(0), 0.0, 1.0), Mode::Eval)
            .unwrap();
        assert_eq!(bn, before);
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..3 {
            let mut p = Prng::new(seed);
            let mut bn = BatchNorm2d::new(8);
            bn.gamma = Tensor::gaussian(&[8], &mut p, 1.0, 0.3);
            bn.beta = Tensor::gaussian(&[8], &mut p, 0.0, 0.3);
            let x = Tensor::gaussian(&[4, 8, 5, 5], &mut p, 0.5, 2.0);
            for mode in [Mode::Train, Mode::Eval] {
                let report = grad_check(&bn, &x, 1e-5, mode, seed).unwrap();
                assert!(report.max() <= 1e-4, "{mode:?} {report:?}");
            }
        }
    }
}
