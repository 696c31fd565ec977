use serde::{Deserialize, Serialize};

use super::batch::DEFAULT_EPS;
use super::stats::{affine_normalize, norm_backward, reduce_stats, AffineCache, StatScope, StatSource};
use crate::error::{Error, Result};
use crate::nn::{Gradients, Mode, Module, ParamMut};
use crate::tensor::Tensor;

pub const DEFAULT_GROUPS: usize = 8;

/// Group count used when none is given: 8, or `C` below 8 channels. For
/// channel counts that 8 does not divide, the largest common divisor.
pub fn default_groups(channels: usize) -> usize {
    if channels < DEFAULT_GROUPS {
        channels
    } else {
        gcd(channels, DEFAULT_GROUPS)
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Layer, instance and group normalization: per-sample statistics, so Train
/// and Eval are the same computation and there is no running state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScopedNorm {
    pub scope: StatScope,
    pub gamma: Tensor,
    pub beta: Tensor,
    pub eps: f64,
}

impl ScopedNorm {
    pub fn new(channels: usize, scope: StatScope) -> Result<Self> {
        if scope == StatScope::Batch {
            return Err(Error::Config(
                "batch scope needs running statistics; use BatchNorm2d".into(),
            ));
        }
        scope.validate(channels)?;
        Ok(ScopedNorm {
            scope,
            gamma: Tensor::full(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
            eps: DEFAULT_EPS,
        })
    }

    pub fn layer_norm(channels: usize) -> Self {
        Self::new(channels, StatScope::Layer).expect("layer scope is always valid")
    }

    pub fn instance_norm(channels: usize) -> Self {
        Self::new(channels, StatScope::Instance).expect("instance scope is always valid")
    }

    pub fn group_norm(channels: usize, groups: usize) -> Result<Self> {
        Self::new(channels, StatScope::Group(groups))
    }
}

impl Module for ScopedNorm {
    type Cache = AffineCache;

    fn apply(&self, x: &Tensor, _mode: Mode) -> Result<(Tensor, AffineCache)> {
        let (mu, sigma) = reduce_stats(x, self.scope)?;
        affine_normalize(x, &mu, &sigma, &self.gamma, &self.beta, self.eps, self.scope, StatSource::Input)
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
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::grad_check;
    use crate::tensor::Prng;

    #[test]
    fn default_group_counts() {
        assert_eq!(default_groups(16), 8);
        assert_eq!(default_groups(32), 8);
        assert_eq!(default_groups(4), 4);
        assert_eq!(default_groups(12), 4);
    }

    #[test]
    fn rejects_batch_scope_and_bad_groups() {
        assert!(ScopedNorm::new(4, StatScope::Batch).is_err());
        assert!(ScopedNorm::group_norm(6, 4).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        for scope in [StatScope::Layer, StatScope::Instance, StatScope::Group(4)] {
            for seed in 0..3 {
                let mut p = Prng::new(seed + 40);
                let mut layer = ScopedNorm::new(8, scope).unwrap();
                layer.gamma = Tensor::gaussian(&[8], &mut p, 1.0, 0.3);
                layer.beta = Tensor::gaussian(&[8], &mut p, 0.0, 0.3);
                let x = Tensor::gaussian(&[4, 8, 6, 6], &mut p, -0.5, 1.5);
                let report = grad_check(&layer, &x, 1e-5, Mode::Train, seed).unwrap();
                assert!(report.max() <= 1e-4, "{scope:?} {report:?}");
            }
        }
    }
}
