use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::nn::{Linear, LinearCache};
use crate::tensor::{Activation, Prng, Tensor};

/// Hidden width of the standardization encoder, `max(1, C/2)`.
pub fn stan_width(channels: usize) -> usize {
    (channels / 2).max(1)
}

/// Encoder-decoder that maps raw `(mu, sigma)` rows to learned ones.
///
/// One encoder is shared by both decoders but applied to `mu` and `sigma`
/// separately:
///
/// ```text
/// mu_stan    = dec_mu(relu(enc(mu)))
/// sigma_stan = relu(dec_sigma(relu(enc(sigma))))
/// ```
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatNet {
    pub encoder: Linear,
    pub mu_decoder: Linear,
    pub sigma_decoder: Linear,
}

#[derive(Clone, Debug)]
pub struct StatNetCache {
    enc_mu: LinearCache,
    enc_mu_pre: Tensor,
    dec_mu: LinearCache,
    enc_sigma: LinearCache,
    enc_sigma_pre: Tensor,
    dec_sigma: LinearCache,
    dec_sigma_pre: Tensor,
}

/// Gradients of [`StatNet`] parameters, in `params()` order.
pub struct StatNetGrads {
    pub dmu: Tensor,
    pub dsigma: Tensor,
    pub params: [Tensor; 6],
}

fn relu_mask(pre: &Tensor, grad: &Tensor) -> Result<Tensor> {
    pre.zip_map(grad, |p, g| if p > 0.0 { g } else { 0.0 })
}

impl StatNet {
    pub fn new(channels: usize, prng: &mut Prng) -> Self {
        let hidden = stan_width(channels);
        let enc_std = 1.0 / (channels as f64).sqrt();
        let dec_std = 1.0 / (hidden as f64).sqrt();
        StatNet {
            encoder: Linear::with_std(channels, hidden, enc_std, prng),
            mu_decoder: Linear::with_std(hidden, channels, dec_std, prng),
            sigma_decoder: Linear::with_std(hidden, channels, dec_std, prng),
        }
    }

    /// `mu` and `sigma` are `[rows, C]`.
    pub fn stat_net_forward(&self, mu: &Tensor, sigma: &Tensor) -> Result<(Tensor, Tensor, StatNetCache)> {
        let (enc_mu_pre, enc_mu) = self.encoder.linear_forward(mu)?;
        let (mu_stan, dec_mu) = self.mu_decoder.linear_forward(&enc_mu_pre.pointwise(Activation::Relu))?;
        let (enc_sigma_pre, enc_sigma) = self.encoder.linear_forward(sigma)?;
        let (dec_sigma_pre, dec_sigma) = self
            .sigma_decoder
            .linear_forward(&enc_sigma_pre.pointwise(Activation::Relu))?;
        let sigma_stan = dec_sigma_pre.pointwise(Activation::Relu);
        Ok((
            mu_stan,
            sigma_stan,
            StatNetCache {
                enc_mu,
                enc_mu_pre,
                dec_mu,
                enc_sigma,
                enc_sigma_pre,
                dec_sigma,
                dec_sigma_pre,
            },
        ))
    }

    pub fn stat_net_backward(&self, cache: &StatNetCache, dmu_stan: &Tensor, dsigma_stan: &Tensor) -> Result<StatNetGrads> {
        let (dh_mu, d_dec_mu_w, d_dec_mu_b) = self.mu_decoder.linear_backward(&cache.dec_mu, dmu_stan)?;
        let (dmu, mut d_enc_w, mut d_enc_b) = self
            .encoder
            .linear_backward(&cache.enc_mu, &relu_mask(&cache.enc_mu_pre, &dh_mu)?)?;

        let dz = relu_mask(&cache.dec_sigma_pre, dsigma_stan)?;
        let (dh_sigma, d_dec_s_w, d_dec_s_b) = self.sigma_decoder.linear_backward(&cache.dec_sigma, &dz)?;
        let (dsigma, d_enc_w2, d_enc_b2) = self
            .encoder
            .linear_backward(&cache.enc_sigma, &relu_mask(&cache.enc_sigma_pre, &dh_sigma)?)?;
        d_enc_w.add_assign(&d_enc_w2)?;
        d_enc_b.add_assign(&d_enc_b2)?;

        Ok(StatNetGrads {
            dmu,
            dsigma,
            params: [d_enc_w, d_enc_b, d_dec_mu_w, d_dec_mu_b, d_dec_s_w, d_dec_s_b],
        })
    }

    pub(crate) fn tensors(&self) -> [(&'static str, &Tensor); 6] {
        [
            ("stat.enc_weight", &self.encoder.weight),
            ("stat.enc_bias", &self.encoder.bias),
            ("stat.dec_mu_weight", &self.mu_decoder.weight),
            ("stat.dec_mu_bias", &self.mu_decoder.bias),
            ("stat.dec_sigma_weight", &self.sigma_decoder.weight),
            ("stat.dec_sigma_bias", &self.sigma_decoder.bias),
        ]
    }

    pub(crate) fn tensors_mut(&mut self) -> [(&'static str, &mut Tensor); 6] {
        [
            ("stat.enc_weight", &mut self.encoder.weight),
            ("stat.enc_bias", &mut self.encoder.bias),
            ("stat.dec_mu_weight", &mut self.mu_decoder.weight),
            ("stat.dec_mu_bias", &mut self.mu_decoder.bias),
            ("stat.dec_sigma_weight", &mut self.sigma_decoder.weight),
            ("stat.dec_sigma_bias", &mut self.sigma_decoder.bias),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hidden_width_is_half_the_channels() {
        let net = StatNet::new(32, &mut Prng::new(0));
        assert_eq!(net.encoder.weight.shape(), &[16, 32]);
        assert_eq!(net.mu_decoder.weight.shape(), &[32, 16]);
        assert_eq!(stan_width(1), 1);
        assert_eq!(stan_width(3), 1);
    }

    #[test]
    fn zero_decoders_give_zero_outputs() {
        let mut p = Prng::new(1);
        let mut net = StatNet::new(6, &mut p);
        net.mu_decoder.weight = Tensor::zeros(&[6, 3]);
        net.sigma_decoder.weight = Tensor::zeros(&[6, 3]);
        let mu = Tensor::gaussian(&[2, 6], &mut p, 0.0, 3.0);
        let sigma = Tensor::gaussian(&[2, 6], &mut p, 0.0, 3.0).map(f64::abs);
        let (ms, ss, _) = net.stat_net_forward(&mu, &sigma).unwrap();
        assert!(ms.data().iter().all(|&v| v == 0.0));
        assert!(ss.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sigma_stan_is_non_negative() {
        let mut p = Prng::new(2);
        for _ in 0..1000 {
            let c = 1 + p.below(12);
            let mut net = StatNet::new(c, &mut p);
            net.sigma_decoder.bias = Tensor::gaussian(&[c], &mut p, 0.0, 2.0);
            let mu = Tensor::gaussian(&[1, c], &mut p, 0.0, 2.0);
            let sigma = Tensor::gaussian(&[1, c], &mut p, 0.0, 2.0).map(f64::abs);
            let (_, ss, _) = net.stat_net_forward(&mu, &sigma).unwrap();
            assert!(ss.data().iter().all(|&v| v >= 0.0));
        }
    }
}
