//! Statistic scopes, moment reduction and the shared standardize/affine
//! machinery with its full backward pass.
//!
//! Every scope pools whole `(n, c)` spatial planes, so all loops walk the
//! input plane by plane and look up the plane's group once.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Which positions of an `(N, C, H, W)` tensor share one `(mu, sigma)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StatScope {
    /// Per channel, over `(N, H, W)`.
    Batch,
    /// Per sample, over `(C, H, W)`.
    Layer,
    /// Per sample and channel, over `(H, W)`.
    Instance,
    /// Per sample and channel group, over `(C/G, H, W)`.
    Group(usize),
}

impl StatScope {
    pub fn validate(self, channels: usize) -> Result<()> {
        if let StatScope::Group(g) = self {
            if g == 0 || !channels.is_multiple_of(g) {
                return Err(Error::shape(format!(
                    "group count {g} must be >= 1 and divide {channels} channels"
                )));
            }
        }
        Ok(())
    }

    /// Shape of the statistic tensors for an `(n, c, _, _)` input.
    pub fn stat_shape(self, n: usize, c: usize) -> Vec<usize> {
        match self {
            StatScope::Batch => vec![c],
            StatScope::Layer => vec![n],
            StatScope::Instance => vec![n, c],
            StatScope::Group(g) => vec![n, g],
        }
    }

    pub fn num_groups(self, n: usize, c: usize) -> usize {
        self.stat_shape(n, c).iter().product()
    }

    /// Number of elements pooled into one statistic.
    pub fn group_size(self, [n, c, h, w]: [usize; 4]) -> usize {
        match self {
            StatScope::Batch => n * h * w,
            StatScope::Layer => c * h * w,
            StatScope::Instance => h * w,
            StatScope::Group(g) => c / g * h * w,
        }
    }

    /// Flat statistic index of the `(sample, channel)` plane.
    #[inline]
    pub fn group_of(self, sample: usize, channel: usize, channels: usize) -> usize {
        match self {
            StatScope::Batch => channel,
            StatScope::Layer => sample,
            StatScope::Instance => sample * channels + channel,
            StatScope::Group(g) => sample * g + channel / (channels / g),
        }
    }
}

/// Iterates `(plane_slice, sample, channel)` in storage order.
pub(crate) fn planes(x: &[f64], [n, c, h, w]: [usize; 4]) -> impl Iterator<Item = (&[f64], usize, usize)> {
    x.chunks_exact(h * w)
        .take(n * c)
        .enumerate()
        .map(move |(p, s)| (s, p / c, p % c))
}

/// Mean and population standard deviation per scope group.
///
/// Each group's values are accumulated as offsets from the group's first
/// element, which makes a constant group come out with `sigma == 0` exactly.
pub fn reduce_stats(x: &Tensor, scope: StatScope) -> Result<(Tensor, Tensor)> {
    let dims = x.dims4()?;
    let [n, c, _, _] = dims;
    scope.validate(c)?;
    let groups = scope.num_groups(n, c);
    let m = scope.group_size(dims) as f64;

    let mut shift: Vec<Option<f64>> = vec![None; groups];
    let mut sum = vec![0.0; groups];
    for (plane, s, ch) in planes(x.data(), dims) {
        let g = scope.group_of(s, ch, c);
        let k = *shift[g].get_or_insert(plane[0]);
        sum[g] += plane.iter().map(|v| v - k).sum::<f64>();
    }
    let mu: Vec<f64> = shift
        .iter()
        .zip(&sum)
        .map(|(k, s)| k.unwrap_or(0.0) + s / m)
        .collect();

    let mut sq = vec![0.0; groups];
    for (plane, s, ch) in planes(x.data(), dims) {
        let g = scope.group_of(s, ch, c);
        sq[g] += plane.iter().map(|v| (v - mu[g]).powi(2)).sum::<f64>();
    }
    let sigma: Vec<f64> = sq.iter().map(|v| (v / m).sqrt()).collect();
    let shape = scope.stat_shape(n, c);
    Ok((Tensor::new(shape.clone(), mu)?, Tensor::new(shape, sigma)?))
}

/// `(x - mu) / (sigma + eps)` with statistics broadcast over their groups.
pub fn standardize(x: &Tensor, mu: &[f64], sigma: &[f64], eps: f64, scope: StatScope) -> Result<Tensor> {
    let dims = x.dims4()?;
    let c = dims[1];
    let mut out = Vec::with_capacity(x.len());
    for (plane, s, ch) in planes(x.data(), dims) {
        let g = scope.group_of(s, ch, c);
        let (m, d) = (mu[g], sigma[g] + eps);
        out.extend(plane.iter().map(|v| (v - m) / d));
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Backward of [`standardize`] with the statistics held fixed.
///
/// Returns `(dx_direct, dmu, dsigma)`: the gradient flowing straight into
/// `x`, and the gradients with respect to each group's `mu` and `sigma`.
pub fn standardize_backward(
    xbar: &Tensor,
    sigma: &[f64],
    eps: f64,
    scope: StatScope,
    dxbar: &Tensor,
) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
    let dims = xbar.dims4()?;
    let c = dims[1];
    let mut dx = Vec::with_capacity(xbar.len());
    let mut dmu = vec![0.0; sigma.len()];
    let mut dsigma = vec![0.0; sigma.len()];
    let hw = dims[2] * dims[3];
    for ((plane, s, ch), dplane) in planes(xbar.data(), dims).zip(dxbar.data().chunks_exact(hw)) {
        let g = scope.group_of(s, ch, c);
        let inv = 1.0 / (sigma[g] + eps);
        let mut sum_d = 0.0;
        let mut sum_dx = 0.0;
        for (&xb, &d) in plane.iter().zip(dplane) {
            dx.push(d * inv);
            sum_d += d;
            sum_dx += d * xb;
        }
        dmu[g] -= sum_d * inv;
        dsigma[g] -= sum_dx * inv;
    }
    Ok((Tensor::new(xbar.shape().to_vec(), dx)?, dmu, dsigma))
}

/// Adds the gradient that reaches `x` through `mu(x)` and `sigma(x)`:
/// `dmu / m + dsigma * (x - mu) / (m * sigma)`.
///
/// A group with `sigma == 0` contributes no `sigma` term (the square root is
/// not differentiable there).
pub fn stats_backward(
    x: &Tensor,
    mu: &[f64],
    sigma: &[f64],
    dmu: &[f64],
    dsigma: &[f64],
    scope: StatScope,
    dx: &mut Tensor,
) -> Result<()> {
    let dims = x.dims4()?;
    let c = dims[1];
    let m = scope.group_size(dims) as f64;
    let hw = dims[2] * dims[3];
    for ((plane, s, ch), dplane) in planes(x.data(), dims).zip(dx.data_mut().chunks_exact_mut(hw)) {
        let g = scope.group_of(s, ch, c);
        let a = dmu[g] / m;
        let b = if sigma[g] > 0.0 { dsigma[g] / (m * sigma[g]) } else { 0.0 };
        for (&v, d) in plane.iter().zip(dplane.iter_mut()) {
            *d += a + b * (v - mu[g]);
        }
    }
    Ok(())
}

/// Whether the statistics fed to a normalizer were computed from its input
/// (and so must be differentiated through) or are constants.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StatSource {
    Input,
    Fixed,
}

#[derive(Clone, Debug)]
pub struct AffineCache {
    pub(crate) x: Tensor,
    pub(crate) xbar: Tensor,
    pub(crate) mu: Tensor,
    pub(crate) sigma: Tensor,
    pub(crate) gamma: Tensor,
    pub(crate) eps: f64,
    pub(crate) scope: StatScope,
    pub(crate) source: StatSource,
}

impl AffineCache {
    pub fn mu(&self) -> &Tensor {
        &self.mu
    }

    pub fn sigma(&self) -> &Tensor {
        &self.sigma
    }

    pub fn xbar(&self) -> &Tensor {
        &self.xbar
    }
}

/// `y = gamma * (x - mu) / (sigma + eps) + beta` with per-channel `gamma`
/// and `beta`.
#[allow(clippy::too_many_arguments)]
pub fn affine_normalize(
    x: &Tensor,
    mu: &Tensor,
    sigma: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
    scope: StatScope,
    source: StatSource,
) -> Result<(Tensor, AffineCache)> {
    let [n, c, _, _] = x.dims4()?;
    scope.validate(c)?;
    let stat_shape = scope.stat_shape(n, c);
    if mu.shape() != stat_shape || sigma.shape() != stat_shape {
        return Err(Error::shape(format!(
            "statistics {:?}/{:?} do not fit scope {scope:?} on {:?}",
            mu.shape(),
            sigma.shape(),
            x.shape()
        )));
    }
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::shape(format!("affine parameters must have shape [{c}]")));
    }
    let xbar = standardize(x, mu.data(), sigma.data(), eps, scope)?;
    let y = channel_affine(&xbar, gamma.data(), beta.data())?;
    Ok((
        y,
        AffineCache {
            x: x.clone(),
            xbar,
            mu: mu.clone(),
            sigma: sigma.clone(),
            gamma: gamma.clone(),
            eps,
            scope,
            source,
        },
    ))
}

/// `xbar * gamma[c] + beta[c]`.
pub(crate) fn channel_affine(xbar: &Tensor, gamma: &[f64], beta: &[f64]) -> Result<Tensor> {
    let dims = xbar.dims4()?;
    let mut out = Vec::with_capacity(xbar.len());
    for (plane, _, ch) in planes(xbar.data(), dims) {
        out.extend(plane.iter().map(|v| v * gamma[ch] + beta[ch]));
    }
    Tensor::new(xbar.shape().to_vec(), out)
}

/// Per-channel `sum(dy * xbar)` and `sum(dy)`.
pub(crate) fn channel_affine_grads(xbar: &Tensor, dy: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    let dims = xbar.dims4()?;
    let hw = dims[2] * dims[3];
    let mut dgamma = vec![0.0; dims[1]];
    let mut dbeta = vec![0.0; dims[1]];
    for ((plane, _, ch), dplane) in planes(xbar.data(), dims).zip(dy.data().chunks_exact(hw)) {
        dgamma[ch] += plane.iter().zip(dplane).map(|(a, b)| a * b).sum::<f64>();
        dbeta[ch] += dplane.iter().sum::<f64>();
    }
    Ok((dgamma, dbeta))
}

/// Scales every plane of `t` by a per-channel factor.
pub(crate) fn scale_channels(t: &Tensor, factor: &[f64]) -> Result<Tensor> {
    let dims = t.dims4()?;
    let mut out = Vec::with_capacity(t.len());
    for (plane, _, ch) in planes(t.data(), dims) {
        out.extend(plane.iter().map(|v| v * factor[ch]));
    }
    Tensor::new(t.shape().to_vec(), out)
}

/// Full backward of [`affine_normalize`]: returns `(dx, dgamma, dbeta)`,
/// including the paths through `mu(x)` and `sigma(x)` when the statistics
/// came from the input.
pub fn norm_backward(cache: &AffineCache, dy: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    crate::nn::check_grad_shape(dy, cache.x.shape(), "normalization")?;
    let c = cache.x.shape()[1];
    let (dgamma, dbeta) = channel_affine_grads(&cache.xbar, dy)?;
    let dxbar = scale_channels(dy, cache.gamma.data())?;
    let (mut dx, dmu, dsigma) =
        standardize_backward(&cache.xbar, cache.sigma.data(), cache.eps, cache.scope, &dxbar)?;
    if cache.source == StatSource::Input {
        stats_backward(
            &cache.x,
            cache.mu.data(),
            cache.sigma.data(),
            &dmu,
            &dsigma,
            cache.scope,
            &mut dx,
        )?;
    }
    Ok((dx, Tensor::new(vec![c], dgamma)?, Tensor::new(vec![c], dbeta)?))
}
