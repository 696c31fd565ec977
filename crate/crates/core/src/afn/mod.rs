//! Adaptive fusion normalization.
//!
//! Pipeline for an `(N, C, H, W)` input:
//!
//! 1. raw statistics `(mu, sigma)` per channel (batch scope) or per sample
//!    and channel (instance scope), as `[rows, C]` matrices;
//! 2. the [`StatNet`] maps them to `(mu_stan, sigma_stan)`;
//! 3. a residual blend `lambda * learned + (1 - lambda) * raw` with
//!    `lambda = sigmoid(logit)` per channel gives `(mu_hat, sigma_hat)`;
//! 4. `xbar = (x - mu_hat) / (sigma_hat + eps)`;
//! 5. the [`RescaleNet`] computes `gamma_hat` from `sigma` and `beta_hat`
//!    from `mu`, and `y = xbar * gamma_hat + beta_hat`.
//!
//! In Eval mode the batch-scope layer feeds its running `(mu, sigma)`
//! through the same pipeline. The instance-scope variant has no running
//! state and computes the same thing in both modes.

mod rescale;
mod stat_net;

use serde::{Deserialize, Serialize};

pub use rescale::{rescale_width, RescaleCache, RescaleGrads, RescaleNet};
pub use stat_net::{stan_width, StatNet, StatNetCache, StatNetGrads};

use crate::error::{Error, Result};
use crate::nn::{check_grad_shape, Gradients, Mode, Module, ParamMut};
use crate::norm::stats::{planes, reduce_stats, standardize, standardize_backward, stats_backward, StatSource};
use crate::norm::{BatchNorm2d, StatScope};
use crate::tensor::{sigmoid, Prng, Tensor};

pub const LAMBDA_STAN_INIT: f64 = -3.0;
pub const LAMBDA_RESCALE_INIT: f64 = -5.0;
pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AfnLayer {
    pub stat_net: StatNet,
    pub rescale_net: RescaleNet,
    pub lambda_mu_logit: Tensor,
    pub lambda_sigma_logit: Tensor,
    pub lambda_gamma_logit: Tensor,
    pub lambda_beta_logit: Tensor,
    pub gamma_bias: Tensor,
    pub beta_bias: Tensor,
    pub running_mu: Tensor,
    pub running_sigma: Tensor,
    pub momentum: f64,
    pub eps: f64,
    /// `Batch` or `Instance`.
    pub scope: StatScope,
    /// Diagnostic switch: drop the gradient that flows into `x` through the
    /// input statistics. Never set during training.
    #[serde(skip)]
    pub detach_stats: bool,
}

#[derive(Clone, Debug)]
pub struct AfnCache {
    x: Tensor,
    source: StatSource,
    mu: Tensor,
    sigma: Tensor,
    mu_stan: Tensor,
    sigma_stan: Tensor,
    mu_hat: Tensor,
    sigma_hat: Tensor,
    xbar: Tensor,
    gamma_hat: Tensor,
    beta_hat: Tensor,
    stat_cache: StatNetCache,
    rescale_cache: RescaleCache,
}

impl AfnCache {
    /// Raw statistics `(mu, sigma)` that entered the pipeline, `[rows, C]`.
    pub fn raw_stats(&self) -> (&Tensor, &Tensor) {
        (&self.mu, &self.sigma)
    }

    pub fn sigma_hat(&self) -> &Tensor {
        &self.sigma_hat
    }

    pub fn gamma_hat(&self) -> &Tensor {
        &self.gamma_hat
    }
}

/// Intermediate values of one forward pass, exposed for inspection.
#[derive(Clone, Debug)]
pub struct AfnTrace {
    pub mu_hat: Tensor,
    pub sigma_hat: Tensor,
    pub gamma_hat: Tensor,
    pub beta_hat: Tensor,
}

/// `(lambda_mu * mu_stan + (1 - lambda_mu) * mu, same for sigma)` with the
/// per-channel lambdas broadcast over rows.
pub fn residual_blend(
    mu: &Tensor,
    mu_stan: &Tensor,
    sigma: &Tensor,
    sigma_stan: &Tensor,
    lambda_mu: &[f64],
    lambda_sigma: &[f64],
) -> Result<(Tensor, Tensor)> {
    let c = lambda_mu.len();
    let blend = |raw: &Tensor, learned: &Tensor, lam: &[f64]| -> Result<Tensor> {
        if raw.shape() != learned.shape() || !raw.len().is_multiple_of(c) {
            return Err(Error::shape("residual blend operands do not line up"));
        }
        let data = raw
            .data()
            .iter()
            .zip(learned.data())
            .enumerate()
            .map(|(i, (&r, &l))| lam[i % c] * l + (1.0 - lam[i % c]) * r)
            .collect();
        Tensor::new(raw.shape().to_vec(), data)
    };
    Ok((blend(mu, mu_stan, lambda_mu)?, blend(sigma, sigma_stan, lambda_sigma)?))
}

fn lambdas(logits: &Tensor) -> Vec<f64> {
    logits.data().iter().map(|&l| sigmoid(l)).collect()
}

fn finite(t: &Tensor, stage: &str) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::numeric("afn", stage))
    }
}

/// Sums a `[rows, C]` matrix over rows.
fn column_sums(m: &Tensor, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; c];
    for row in m.data().chunks_exact(c) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    out
}

impl AfnLayer {
    /// Fresh layer: blend logits at -3 (standardization) and -5 (rescale),
    /// `gamma_bias = 1`, `beta_bias = 0`, running stats `(0, 1)`, net
    /// weights from N(0, 1/fan_in) with zero biases.
    pub fn new(channels: usize, scope: StatScope, prng: &mut Prng) -> Result<Self> {
        if channels == 0 {
            return Err(Error::shape("AFN needs at least one channel"));
        }
        if !matches!(scope, StatScope::Batch | StatScope::Instance) {
            return Err(Error::Config(format!(
                "AFN supports batch or instance statistics, not {scope:?}"
            )));
        }
        let stat_net = StatNet::new(channels, prng);
        let rescale_net = RescaleNet::new(channels, prng);
        Ok(AfnLayer {
            stat_net,
            rescale_net,
            lambda_mu_logit: Tensor::full(&[channels], LAMBDA_STAN_INIT),
            lambda_sigma_logit: Tensor::full(&[channels], LAMBDA_STAN_INIT),
            lambda_gamma_logit: Tensor::full(&[channels], LAMBDA_RESCALE_INIT),
            lambda_beta_logit: Tensor::full(&[channels], LAMBDA_RESCALE_INIT),
            gamma_bias: Tensor::full(&[channels], 1.0),
            beta_bias: Tensor::zeros(&[channels]),
            running_mu: Tensor::zeros(&[channels]),
            running_sigma: Tensor::full(&[channels], 1.0),
            momentum: DEFAULT_MOMENTUM,
            eps: DEFAULT_EPS,
            scope,
            detach_stats: false,
        })
    }

    pub fn channels(&self) -> usize {
        self.gamma_bias.len()
    }

    pub fn has_running_stats(&self) -> bool {
        self.scope == StatScope::Batch
    }

    pub fn set_lambda_logits(&mut self, logit: f64) {
        for t in [
            &mut self.lambda_mu_logit,
            &mut self.lambda_sigma_logit,
            &mut self.lambda_gamma_logit,
            &mut self.lambda_beta_logit,
        ] {
            t.data_mut().fill(logit);
        }
    }

    /// Takes the affine parameters and running statistics of a trained
    /// batch-norm layer. Everything else is left as is.
    pub fn load_from_bn(&mut self, bn: &BatchNorm2d) -> Result<()> {
        if bn.channels() != self.channels() {
            return Err(Error::shape(format!(
                "cannot load a {}-channel batch norm into a {}-channel AFN layer",
                bn.channels(),
                self.channels()
            )));
        }
        self.gamma_bias = bn.gamma.clone();
        self.beta_bias = bn.beta.clone();
        self.running_mu = bn.running_mean.clone();
        self.running_sigma = bn.running_var.map(f64::sqrt);
        Ok(())
    }

    pub fn afn_forward(&mut self, x: &Tensor, mode: Mode) -> Result<(Tensor, AfnCache)> {
        self.forward(x, mode)
    }

    pub fn afn_backward(&self, cache: &AfnCache, dy: &Tensor) -> Result<Gradients> {
        self.backward(cache, dy)
    }

    /// Forward pass returning the blended statistics and affine parameters.
    pub fn trace(&self, x: &Tensor, mode: Mode) -> Result<AfnTrace> {
        let (_, cache) = self.apply(x, mode)?;
        Ok(AfnTrace {
            mu_hat: cache.mu_hat,
            sigma_hat: cache.sigma_hat,
            gamma_hat: cache.gamma_hat,
            beta_hat: cache.beta_hat,
        })
    }

    fn raw_stats(&self, x: &Tensor, mode: Mode) -> Result<(Tensor, Tensor, StatSource)> {
        let [n, c, _, _] = x.dims4()?;
        match (self.scope, mode) {
            (StatScope::Batch, Mode::Train) => {
                let (mu, sigma) = reduce_stats(x, StatScope::Batch)?;
                Ok((mu.reshape(&[1, c])?, sigma.reshape(&[1, c])?, StatSource::Input))
            }
            (StatScope::Batch, Mode::Eval) => Ok((
                self.running_mu.clone().reshape(&[1, c])?,
                self.running_sigma.clone().reshape(&[1, c])?,
                StatSource::Fixed,
            )),
            _ => {
                let (mu, sigma) = reduce_stats(x, StatScope::Instance)?;
                Ok((mu.reshape(&[n, c])?, sigma.reshape(&[n, c])?, StatSource::Input))
            }
        }
    }
}

impl Module for AfnLayer {
    type Cache = AfnCache;

    fn apply(&self, x: &Tensor, mode: Mode) -> Result<(Tensor, AfnCache)> {
        let dims = x.dims4()?;
        let c = dims[1];
        if c != self.channels() {
            return Err(Error::shape(format!(
                "AFN layer has {} channels, input has {c}",
                self.channels()
            )));
        }
        let (mu, sigma, source) = self.raw_stats(x, mode)?;
        finite(&mu, "statistics")?;
        finite(&sigma, "statistics")?;

        let (mu_stan, sigma_stan, stat_cache) = self.stat_net.stat_net_forward(&mu, &sigma)?;
        finite(&mu_stan, "stat_net")?;
        finite(&sigma_stan, "stat_net")?;

        let (mu_hat, sigma_hat) = residual_blend(
            &mu,
            &mu_stan,
            &sigma,
            &sigma_stan,
            &lambdas(&self.lambda_mu_logit),
            &lambdas(&self.lambda_sigma_logit),
        )?;
        let xbar = standardize(x, mu_hat.data(), sigma_hat.data(), self.eps, self.scope)?;
        finite(&xbar, "standardize")?;

        let (gamma_hat, beta_hat, rescale_cache) = self.rescale_net.rescale_forward(
            &mu,
            &sigma,
            &lambdas(&self.lambda_gamma_logit),
            &lambdas(&self.lambda_beta_logit),
            self.gamma_bias.data(),
            self.beta_bias.data(),
        )?;
        finite(&gamma_hat, "rescale")?;
        finite(&beta_hat, "rescale")?;

        let mut y = Vec::with_capacity(x.len());
        for (plane, s, ch) in planes(xbar.data(), dims) {
            let g = self.scope.group_of(s, ch, c);
            let (a, b) = (gamma_hat.data()[g], beta_hat.data()[g]);
            y.extend(plane.iter().map(|v| v * a + b));
        }
        let y = Tensor::new(x.shape().to_vec(), y)?;
        finite(&y, "output")?;

        Ok((
            y,
            AfnCache {
                x: x.clone(),
                source,
                mu,
                sigma,
                mu_stan,
                sigma_stan,
                mu_hat,
                sigma_hat,
                xbar,
                gamma_hat,
                beta_hat,
                stat_cache,
                rescale_cache,
            },
        ))
    }

    fn track(&mut self, cache: &AfnCache) {
        if self.scope != StatScope::Batch || cache.source != StatSource::Input {
            return;
        }
        let m = self.momentum;
        for (r, &v) in self.running_mu.data_mut().iter_mut().zip(cache.mu.data()) {
            *r = (1.0 - m) * *r + m * v;
        }
        for (r, &v) in self.running_sigma.data_mut().iter_mut().zip(cache.sigma.data()) {
            *r = (1.0 - m) * *r + m * v;
        }
    }

    fn backward(&self, cache: &AfnCache, dy: &Tensor) -> Result<Gradients> {
        check_grad_shape(dy, cache.x.shape(), "afn")?;
        let dims = cache.x.dims4()?;
        let c = dims[1];
        if c != self.channels() || cache.mu.shape()[1] != c {
            return Err(Error::Usage("AFN cache does not belong to this layer".into()));
        }
        let hw = dims[2] * dims[3];
        let rows = cache.mu.shape()[0];

        // output affine
        let mut dgamma_hat = vec![0.0; rows * c];
        let mut dbeta_hat = vec![0.0; rows * c];
        let mut dxbar = Vec::with_capacity(cache.x.len());
        for ((plane, s, ch), dplane) in planes(cache.xbar.data(), dims).zip(dy.data().chunks_exact(hw)) {
            let g = self.scope.group_of(s, ch, c);
            let gh = cache.gamma_hat.data()[g];
            for (&xb, &d) in plane.iter().zip(dplane) {
                dgamma_hat[g] += d * xb;
                dbeta_hat[g] += d;
                dxbar.push(d * gh);
            }
        }
        let dxbar = Tensor::new(cache.x.shape().to_vec(), dxbar)?;

        // standardization
        let (mut dx, dmu_hat, dsigma_hat) =
            standardize_backward(&cache.xbar, cache.sigma_hat.data(), self.eps, self.scope, &dxbar)?;

        // residual blend
        let lam_mu = lambdas(&self.lambda_mu_logit);
        let lam_sigma = lambdas(&self.lambda_sigma_logit);
        let mut dmu = vec![0.0; rows * c];
        let mut dsigma = vec![0.0; rows * c];
        let mut dmu_stan = vec![0.0; rows * c];
        let mut dsigma_stan = vec![0.0; rows * c];
        let mut dlam_mu = vec![0.0; c];
        let mut dlam_sigma = vec![0.0; c];
        for i in 0..rows * c {
            let ch = i % c;
            dmu[i] = (1.0 - lam_mu[ch]) * dmu_hat[i];
            dmu_stan[i] = lam_mu[ch] * dmu_hat[i];
            dlam_mu[ch] += dmu_hat[i] * (cache.mu_stan.data()[i] - cache.mu.data()[i]);
            dsigma[i] = (1.0 - lam_sigma[ch]) * dsigma_hat[i];
            dsigma_stan[i] = lam_sigma[ch] * dsigma_hat[i];
            dlam_sigma[ch] += dsigma_hat[i] * (cache.sigma_stan.data()[i] - cache.sigma.data()[i]);
        }
        let stat_shape = [rows, c];
        let stat_grads = self.stat_net.stat_net_backward(
            &cache.stat_cache,
            &Tensor::new(stat_shape.to_vec(), dmu_stan)?,
            &Tensor::new(stat_shape.to_vec(), dsigma_stan)?,
        )?;

        // rescale nets
        let lam_gamma = lambdas(&self.lambda_gamma_logit);
        let lam_beta = lambdas(&self.lambda_beta_logit);
        let dgamma_hat = Tensor::new(stat_shape.to_vec(), dgamma_hat)?;
        let dbeta_hat = Tensor::new(stat_shape.to_vec(), dbeta_hat)?;
        let rescale_grads =
            self.rescale_net
                .rescale_backward(&cache.rescale_cache, &lam_gamma, &lam_beta, &dgamma_hat, &dbeta_hat)?;

        for i in 0..rows * c {
            dmu[i] += stat_grads.dmu.data()[i] + rescale_grads.dmu.data()[i];
            dsigma[i] += stat_grads.dsigma.data()[i] + rescale_grads.dsigma.data()[i];
        }

        if cache.source == StatSource::Input && !self.detach_stats {
            stats_backward(&cache.x, cache.mu.data(), cache.sigma.data(), &dmu, &dsigma, self.scope, &mut dx)?;
        }

        let logit_grad = |dlam: Vec<f64>, lam: &[f64]| -> Result<Tensor> {
            Tensor::new(
                vec![c],
                dlam.iter().zip(lam).map(|(d, l)| d * l * (1.0 - l)).collect(),
            )
        };
        let dlam_gamma = column_sums(&rescale_grads.dlambda_gamma, c);
        let dlam_beta = column_sums(&rescale_grads.dlambda_beta, c);

        let mut params: Vec<Tensor> = Vec::with_capacity(20);
        params.extend(stat_grads.params);
        params.extend(rescale_grads.params);
        params.push(logit_grad(dlam_mu, &lam_mu)?);
        params.push(logit_grad(dlam_sigma, &lam_sigma)?);
        params.push(logit_grad(dlam_gamma, &lam_gamma)?);
        params.push(logit_grad(dlam_beta, &lam_beta)?);
        params.push(Tensor::new(vec![c], column_sums(&dgamma_hat, c))?);
        params.push(Tensor::new(vec![c], column_sums(&dbeta_hat, c))?);
        Ok(Gradients { dx, params })
    }

    fn params(&self) -> Vec<(&'static str, &Tensor)> {
        let mut out: Vec<(&'static str, &Tensor)> = Vec::with_capacity(20);
        out.extend(self.stat_net.tensors());
        out.extend(self.rescale_net.tensors());
        out.extend([
            ("lambda_mu_logit", &self.lambda_mu_logit),
            ("lambda_sigma_logit", &self.lambda_sigma_logit),
            ("lambda_gamma_logit", &self.lambda_gamma_logit),
            ("lambda_beta_logit", &self.lambda_beta_logit),
            ("gamma_bias", &self.gamma_bias),
            ("beta_bias", &self.beta_bias),
        ]);
        out
    }

    fn params_mut(&mut self) -> Vec<ParamMut<'_>> {
        let mut out: Vec<ParamMut<'_>> = Vec::with_capacity(20);
        out.extend(self.stat_net.tensors_mut().into_iter().map(|(n, t)| ParamMut::free(n, t)));
        out.extend(self.rescale_net.tensors_mut().into_iter().map(|(n, t)| ParamMut::free(n, t)));
        out.push(ParamMut::free("lambda_mu_logit", &mut self.lambda_mu_logit));
        out.push(ParamMut::free("lambda_sigma_logit", &mut self.lambda_sigma_logit));
        out.push(ParamMut::free("lambda_gamma_logit", &mut self.lambda_gamma_logit));
        out.push(ParamMut::free("lambda_beta_logit", &mut self.lambda_beta_logit));
        out.push(ParamMut::free("gamma_bias", &mut self.gamma_bias));
        out.push(ParamMut::free("beta_bias", &mut self.beta_bias));
        out
    }

    fn buffers(&self) -> Vec<(&'static str, &Tensor)> {
        if self.has_running_stats() {
            vec![("running_mu", &self.running_mu), ("running_sigma", &self.running_sigma)]
        } else {
            Vec::new()
        }
    }

    fn buffers_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        if self.has_running_stats() {
            vec![
                ("running_mu", &mut self.running_mu),
                ("running_sigma", &mut self.running_sigma),
            ]
        } else {
            Vec::new()
        }
    }
}

#[cfg(test)]
mod tests;
