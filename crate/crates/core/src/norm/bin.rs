use serde::{Deserialize, Serialize};

use super::batch::{DEFAULT_EPS, DEFAULT_MOMENTUM};
use super::stats::{
    channel_affine, channel_affine_grads, planes, reduce_stats, scale_channels, standardize,
    standardize_backward, stats_backward, StatScope, StatSource,
};
use crate::error::Result;
use crate::nn::{check_grad_shape, Constraint, Gradients, Mode, Module, ParamMut};
use crate::tensor::Tensor;

pub const DEFAULT_RHO: f64 = 0.5;

/// Batch-instance normalization: a per-channel gate `rho` in `[0, 1]`
/// blends the batch-standardized and instance-standardized responses before
/// a shared affine.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinLayer {
    pub rho: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub momentum: f64,
    pub eps: f64,
}

#[derive(Clone, Debug)]
pub struct BinCache {
    x: Tensor,
    x_batch: Tensor,
    x_inst: Tensor,
    mixed: Tensor,
    mu_batch: Tensor,
    sigma_batch: Tensor,
    mu_inst: Tensor,
    sigma_inst: Tensor,
    batch_source: StatSource,
}

impl BinLayer {
    pub fn new(channels: usize) -> Self {
        BinLayer {
            rho: Tensor::full(&[channels], DEFAULT_RHO),
            gamma: Tensor::full(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], 1.0),
            momentum: DEFAULT_MOMENTUM,
            eps: DEFAULT_EPS,
        }
    }

    pub fn bin_forward(&mut self, x: &Tensor, mode: Mode) -> Result<(Tensor, BinCache)> {
        self.forward(x, mode)
    }

    /// Projects the gate back into `[0, 1]`.
    pub fn bin_clip(&mut self) {
        RHO_BOUNDS.apply(&mut self.rho);
    }
}

const RHO_BOUNDS: Constraint = Constraint::Clamp { lo: 0.0, hi: 1.0 };

impl Module for BinLayer {
    type Cache = BinCache;

    fn apply(&self, x: &Tensor, mode: Mode) -> Result<(Tensor, BinCache)> {
        let dims = x.dims4()?;
        let (mu_batch, sigma_batch, batch_source) = match mode {
            Mode::Train => {
                let (m, s) = reduce_stats(x, StatScope::Batch)?;
                (m, s, StatSource::Input)
            }
            Mode::Eval => (
                self.running_mean.clone(),
                self.running_var.map(f64::sqrt),
                StatSource::Fixed,
            ),
        };
        let (mu_inst, sigma_inst) = reduce_stats(x, StatScope::Instance)?;
        let x_batch = standardize(x, mu_batch.data(), sigma_batch.data(), self.eps, StatScope::Batch)?;
        let x_inst = standardize(x, mu_inst.data(), sigma_inst.data(), self.eps, StatScope::Instance)?;

        let rho = self.rho.data();
        let hw = dims[2] * dims[3];
        let mut mixed = Vec::with_capacity(x.len());
        for ((b, _, ch), i) in planes(x_batch.data(), dims).zip(x_inst.data().chunks_exact(hw)) {
            let r = rho[ch];
            mixed.extend(b.iter().zip(i).map(|(&vb, &vi)| r * vb + (1.0 - r) * vi));
        }
        let mixed = Tensor::new(x.shape().to_vec(), mixed)?;
        let y = channel_affine(&mixed, self.gamma.data(), self.beta.data())?;
        Ok((
            y,
            BinCache {
                x: x.clone(),
                x_batch,
                x_inst,
                mixed,
                mu_batch,
                sigma_batch,
                mu_inst,
                sigma_inst,
                batch_source,
            },
        ))
    }

    fn track(&mut self, cache: &BinCache) {
        let m = self.momentum;
        for ((rm, rv), (&mu, &sigma)) in self
            .running_mean
            .data_mut()
            .iter_mut()
            .zip(self.running_var.data_mut())
            .zip(cache.mu_batch.data().iter().zip(cache.sigma_batch.data()))
        {
            *rm = (1.0 - m) * *rm + m * mu;
            *rv = (1.0 - m) * *rv + m * sigma * sigma;
        }
    }

    fn backward(&self, cache: &BinCache, dy: &Tensor) -> Result<Gradients> {
        check_grad_shape(dy, cache.x.shape(), "bin")?;
        let dims = cache.x.dims4()?;
        let hw = dims[2] * dims[3];
        let (dgamma, dbeta) = channel_affine_grads(&cache.mixed, dy)?;
        let dmixed = scale_channels(dy, self.gamma.data())?;

        let rho = self.rho.data();
        let mut drho = vec![0.0; dims[1]];
        for (((dm, _, ch), b), i) in planes(dmixed.data(), dims)
            .zip(cache.x_batch.data().chunks_exact(hw))
            .zip(cache.x_inst.data().chunks_exact(hw))
        {
            drho[ch] += dm.iter().zip(b.iter().zip(i)).map(|(g, (vb, vi))| g * (vb - vi)).sum::<f64>();
        }
        let one_minus: Vec<f64> = rho.iter().map(|r| 1.0 - r).collect();
        let dx_batch = scale_channels(&dmixed, rho)?;
        let dx_inst = scale_channels(&dmixed, &one_minus)?;

        let (mut dx, dmu_b, dsig_b) =
            standardize_backward(&cache.x_batch, cache.sigma_batch.data(), self.eps, StatScope::Batch, &dx_batch)?;
        if cache.batch_source == StatSource::Input {
            stats_backward(
                &cache.x,
                cache.mu_batch.data(),
                cache.sigma_batch.data(),
                &dmu_b,
                &dsig_b,
                StatScope::Batch,
                &mut dx,
            )?;
        }
        let (dx_i, dmu_i, dsig_i) =
            standardize_backward(&cache.x_inst, cache.sigma_inst.data(), self.eps, StatScope::Instance, &dx_inst)?;
        dx.add_assign(&dx_i)?;
        stats_backward(
            &cache.x,
            cache.mu_inst.data(),
            cache.sigma_inst.data(),
            &dmu_i,
            &dsig_i,
            StatScope::Instance,
            &mut dx,
        )?;

        let c = dims[1];
        Ok(Gradients {
            dx,
            params: vec![
                Tensor::new(vec![c], drho)?,
                Tensor::new(vec![c], dgamma)?,
                Tensor::new(vec![c], dbeta)?,
            ],
        })
    }

    fn params(&self) -> Vec<(&'static str, &Tensor)> {
        vec![("rho", &self.rho), ("gamma", &self.gamma), ("beta", &self.beta)]
    }

    fn params_mut(&mut self) -> Vec<ParamMut<'_>> {
        vec![
            ParamMut {
                name: "rho",
                value: &mut self.rho,
                constraint: RHO_BOUNDS,
            },
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
    use crate::norm::{BatchNorm2d, ScopedNorm};
    use crate::tensor::Prng;

    fn layer_with(rho: f64, p: &mut Prng) -> BinLayer {
        let mut bin = BinLayer::new(4);
        bin.rho = Tensor::full(&[4], rho);
        bin.gamma = Tensor::gaussian(&[4], p, 1.0, 0.2);
        bin.beta = Tensor::gaussian(&[4], p, 0.0, 0.2);
        bin
    }

    #[test]
    fn gate_endpoints_reduce_to_bn_and_in() {
        let mut p = Prng::new(3);
        let x = Tensor::gaussian(&[3, 4, 5, 5], &mut p, 1.0, 2.0);
        let bin = layer_with(1.0, &mut p);
        let mut bn = BatchNorm2d::new(4);
        bn.gamma = bin.gamma.clone();
        bn.beta = bin.beta.clone();
        for mode in [Mode::Train, Mode::Eval] {
            let (a, _) = bin.apply(&x, mode).unwrap();
            let (b, _) = bn.apply(&x, mode).unwrap();
            assert_eq!(a, b, "{mode:?}");
        }

        let mut bin0 = bin.clone();
        bin0.rho = Tensor::zeros(&[4]);
        let mut inorm = ScopedNorm::instance_norm(4);
        inorm.gamma = bin.gamma.clone();
        inorm.beta = bin.beta.clone();
        let (a, _) = bin0.apply(&x, Mode::Train).unwrap();
        let (b, _) = inorm.apply(&x, Mode::Train).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn output_is_linear_in_rho() {
        let mut p = Prng::new(4);
        let x = Tensor::gaussian(&[2, 4, 3, 3], &mut p, 0.0, 1.0);
        let lo = layer_with(0.0, &mut Prng::new(9)).apply(&x, Mode::Train).unwrap().0;
        let hi = layer_with(1.0, &mut Prng::new(9)).apply(&x, Mode::Train).unwrap().0;
        let mid = layer_with(0.5, &mut Prng::new(9)).apply(&x, Mode::Train).unwrap().0;
        let avg = lo.zip_map(&hi, |a, b| 0.5 * (a + b)).unwrap();
        assert!(mid.max_abs_diff(&avg) < 1e-12);
    }

    #[test]
    fn clip_bounds_rho() {
        let mut bin = BinLayer::new(3);
        bin.rho = Tensor::from_vec(vec![1.2, -0.3, 0.4]);
        bin.bin_clip();
        assert_eq!(bin.rho.data(), &[1.0, 0.0, 0.4]);
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..3 {
            let mut p = Prng::new(seed + 70);
            let mut bin = BinLayer::new(8);
            bin.rho = Tensor::from_vec((0..8).map(|_| p.uniform(0.1, 0.9)).collect());
            bin.gamma = Tensor::gaussian(&[8], &mut p, 1.0, 0.3);
            bin.running_mean = Tensor::gaussian(&[8], &mut p, 0.0, 0.3);
            let x = Tensor::gaussian(&[4, 8, 5, 5], &mut p, 0.3, 1.2);
            for mode in [Mode::Train, Mode::Eval] {
                let report = grad_check(&bin, &x, 1e-5, mode, seed).unwrap();
                assert!(report.max() <= 1e-4, "{mode:?} {report:?}");
            }
        }
    }
}
