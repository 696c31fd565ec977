use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::nn::{Linear, LinearCache};
use crate::tensor::{sigmoid, Activation, Prng, Tensor};

/// Hidden width of the rescale encoders, `max(1, C/16)`.
pub fn rescale_width(channels: usize) -> usize {
    (channels / 16).max(1)
}

/// Two independent encoder-decoder pairs producing the affine parameters:
///
/// ```text
/// gamma_hat = lambda_gamma * sigmoid(gamma_dec(relu(gamma_enc(sigma)))) + gamma_bias
/// beta_hat  = lambda_beta  * tanh(beta_dec(relu(beta_enc(mu))))        + beta_bias
/// ```
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RescaleNet {
    pub gamma_encoder: Linear,
    pub gamma_decoder: Linear,
    pub beta_encoder: Linear,
    pub beta_decoder: Linear,
}

#[derive(Clone, Debug)]
pub struct RescaleCache {
    gamma_enc: LinearCache,
    gamma_enc_pre: Tensor,
    gamma_dec: LinearCache,
    gamma_act: Tensor,
    beta_enc: LinearCache,
    beta_enc_pre: Tensor,
    beta_dec: LinearCache,
    beta_act: Tensor,
}

pub struct RescaleGrads {
    pub dmu: Tensor,
    pub dsigma: Tensor,
    /// Per-element gradient of the effective `lambda_gamma`, `[rows, C]`.
    pub dlambda_gamma: Tensor,
    pub dlambda_beta: Tensor,
    pub params: [Tensor; 8],
}

/// Scales every row of `m` (`[rows, C]`) by the per-column vector `v`.
fn scale_cols(m: &Tensor, v: &[f64]) -> Tensor {
    let c = v.len();
    let data = m.data().iter().enumerate().map(|(i, x)| x * v[i % c]).collect();
    Tensor::new(m.shape().to_vec(), data).expect("same shape")
}

fn add_row_vector(m: &Tensor, v: &[f64]) -> Tensor {
    let c = v.len();
    let data = m.data().iter().enumerate().map(|(i, x)| x + v[i % c]).collect();
    Tensor::new(m.shape().to_vec(), data).expect("same shape")
}

impl RescaleNet {
    pub fn new(channels: usize, prng: &mut Prng) -> Self {
        let hidden = rescale_width(channels);
        let enc_std = 1.0 / (channels as f64).sqrt();
        let dec_std = 1.0 / (hidden as f64).sqrt();
        RescaleNet {
            gamma_encoder: Linear::with_std(channels, hidden, enc_std, prng),
            gamma_decoder: Linear::with_std(hidden, channels, dec_std, prng),
            beta_encoder: Linear::with_std(channels, hidden, enc_std, prng),
            beta_decoder: Linear::with_std(hidden, channels, dec_std, prng),
        }
    }

    /// `mu`, `sigma` are `[rows, C]`; the lambdas and biases are `[C]`.
    /// Returns `[rows, C]` affine parameters.
    pub fn rescale_forward(
        &self,
        mu: &Tensor,
        sigma: &Tensor,
        lambda_gamma: &[f64],
        lambda_beta: &[f64],
        gamma_bias: &[f64],
        beta_bias: &[f64],
    ) -> Result<(Tensor, Tensor, RescaleCache)> {
        let (gamma_enc_pre, gamma_enc) = self.gamma_encoder.linear_forward(sigma)?;
        let (gz, gamma_dec) = self
            .gamma_decoder
            .linear_forward(&gamma_enc_pre.pointwise(Activation::Relu))?;
        let gamma_act = gz.map(sigmoid);
        let gamma_hat = add_row_vector(&scale_cols(&gamma_act, lambda_gamma), gamma_bias);

        let (beta_enc_pre, beta_enc) = self.beta_encoder.linear_forward(mu)?;
        let (bz, beta_dec) = self
            .beta_decoder
            .linear_forward(&beta_enc_pre.pointwise(Activation::Relu))?;
        let beta_act = bz.map(f64::tanh);
        let beta_hat = add_row_vector(&scale_cols(&beta_act, lambda_beta), beta_bias);

        Ok((
            gamma_hat,
            beta_hat,
            RescaleCache {
                gamma_enc,
                gamma_enc_pre,
                gamma_dec,
                gamma_act,
                beta_enc,
                beta_enc_pre,
                beta_dec,
                beta_act,
            },
        ))
    }

    pub fn rescale_backward(
        &self,
        cache: &RescaleCache,
        lambda_gamma: &[f64],
        lambda_beta: &[f64],
        dgamma_hat: &Tensor,
        dbeta_hat: &Tensor,
    ) -> Result<RescaleGrads> {
        let dlambda_gamma = dgamma_hat.zip_map(&cache.gamma_act, |g, a| g * a)?;
        let dgz = scale_cols(dgamma_hat, lambda_gamma).zip_map(&cache.gamma_act, |g, a| g * a * (1.0 - a))?;
        let (dgh, d_gdec_w, d_gdec_b) = self.gamma_decoder.linear_backward(&cache.gamma_dec, &dgz)?;
        let dgh = cache.gamma_enc_pre.zip_map(&dgh, |p, g| if p > 0.0 { g } else { 0.0 })?;
        let (dsigma, d_genc_w, d_genc_b) = self.gamma_encoder.linear_backward(&cache.gamma_enc, &dgh)?;

        let dlambda_beta = dbeta_hat.zip_map(&cache.beta_act, |g, t| g * t)?;
        let dbz = scale_cols(dbeta_hat, lambda_beta).zip_map(&cache.beta_act, |g, t| g * (1.0 - t * t))?;
        let (dbh, d_bdec_w, d_bdec_b) = self.beta_decoder.linear_backward(&cache.beta_dec, &dbz)?;
        let dbh = cache.beta_enc_pre.zip_map(&dbh, |p, g| if p > 0.0 { g } else { 0.0 })?;
        let (dmu, d_benc_w, d_benc_b) = self.beta_encoder.linear_backward(&cache.beta_enc, &dbh)?;

        Ok(RescaleGrads {
            dmu,
            dsigma,
            dlambda_gamma,
            dlambda_beta,
            params: [
                d_genc_w, d_genc_b, d_gdec_w, d_gdec_b, d_benc_w, d_benc_b, d_bdec_w, d_bdec_b,
            ],
        })
    }

    pub(crate) fn tensors(&self) -> [(&'static str, &Tensor); 8] {
        [
            ("rescale.gamma_enc_weight", &self.gamma_encoder.weight),
            ("rescale.gamma_enc_bias", &self.gamma_encoder.bias),
            ("rescale.gamma_dec_weight", &self.gamma_decoder.weight),
            ("rescale.gamma_dec_bias", &self.gamma_decoder.bias),
            ("rescale.beta_enc_weight", &self.beta_encoder.weight),
            ("rescale.beta_enc_bias", &self.beta_encoder.bias),
            ("rescale.beta_dec_weight", &self.beta_decoder.weight),
            ("rescale.beta_dec_bias", &self.beta_decoder.bias),
        ]
    }

    pub(crate) fn tensors_mut(&mut self) -> [(&'static str, &mut Tensor); 8] {
        [
            ("rescale.gamma_enc_weight", &mut self.gamma_encoder.weight),
            ("rescale.gamma_enc_bias", &mut self.gamma_encoder.bias),
            ("rescale.gamma_dec_weight", &mut self.gamma_decoder.weight),
            ("rescale.gamma_dec_bias", &mut self.gamma_decoder.bias),
            ("rescale.beta_enc_weight", &mut self.beta_encoder.weight),
            ("rescale.beta_enc_bias", &mut self.beta_encoder.bias),
            ("rescale.beta_dec_weight", &mut self.beta_decoder.weight),
            ("rescale.beta_dec_bias", &mut self.beta_decoder.bias),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn widths() {
        assert_eq!(rescale_width(32), 2);
        assert_eq!(rescale_width(16), 1);
        assert_eq!(rescale_width(8), 1);
        let net = RescaleNet::new(32, &mut Prng::new(0));
        assert_eq!(net.gamma_encoder.weight.shape(), &[2, 32]);
        assert_eq!(net.beta_decoder.weight.shape(), &[32, 2]);
    }

    #[test]
    fn zero_decoders_give_half_gamma_and_plain_beta() {
        let mut p = Prng::new(4);
        let mut net = RescaleNet::new(4, &mut p);
        net.gamma_decoder.weight = Tensor::zeros(&[4, 1]);
        net.beta_decoder.weight = Tensor::zeros(&[4, 1]);
        let mu = Tensor::gaussian(&[3, 4], &mut p, 0.0, 1.0);
        let sigma = mu.map(f64::abs);
        let lg = [0.2, 0.4, 0.6, 0.8];
        let lb = [0.1, 0.1, 0.1, 0.1];
        let gb = [1.0, 2.0, 3.0, 4.0];
        let bb = [-1.0, 0.0, 1.0, 2.0];
        let (g, b, _) = net.rescale_forward(&mu, &sigma, &lg, &lb, &gb, &bb).unwrap();
        for (i, (&gv, &bv)) in g.data().iter().zip(b.data()).enumerate() {
            let c = i % 4;
            assert_eq!(gv, lg[c] * 0.5 + gb[c]);
            assert_eq!(bv, bb[c]);
        }
    }

    #[test]
    fn deviation_is_bounded_by_lambda() {
        let mut p = Prng::new(5);
        for _ in 0..1000 {
            let c = 1 + p.below(20);
            let mut net = RescaleNet::new(c, &mut p);
            net.gamma_decoder.bias = Tensor::gaussian(&[c], &mut p, 0.0, 5.0);
            net.beta_decoder.bias = Tensor::gaussian(&[c], &mut p, 0.0, 5.0);
            let mu = Tensor::gaussian(&[2, c], &mut p, 0.0, 10.0);
            let sigma = Tensor::gaussian(&[2, c], &mut p, 0.0, 10.0).map(f64::abs);
            let lg: Vec<f64> = (0..c).map(|_| p.next_f64()).collect();
            let lb: Vec<f64> = (0..c).map(|_| p.next_f64()).collect();
            let gb: Vec<f64> = (0..c).map(|_| p.uniform(-2.0, 2.0)).collect();
            let bb: Vec<f64> = (0..c).map(|_| p.uniform(-2.0, 2.0)).collect();
            let (g, b, _) = net.rescale_forward(&mu, &sigma, &lg, &lb, &gb, &bb).unwrap();
            for (i, (&gv, &bv)) in g.data().iter().zip(b.data()).enumerate() {
                let k = i % c;
                assert!((gv - gb[k]).abs() <= lg[k] + 1e-15);
                assert!((bv - bb[k]).abs() <= lb[k] + 1e-15);
            }
        }
    }
}
