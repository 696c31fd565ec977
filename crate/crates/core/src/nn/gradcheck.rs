//! Central-difference verification of analytic backward passes.
//!
//! The probe loss is `L(y) = sum(y * w)` for fixed random `w`, so `dL/dy = w`
//! and a layer with any output shape reduces to one scalar check.

use super::{Mode, Module};
use crate::error::{Error, Result};
use crate::tensor::{Prng, Tensor};

/// Worst relative error per gradient group.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub input: f64,
    pub params: Vec<(String, f64)>,
}

impl GradCheckReport {
    pub fn max(&self) -> f64 {
        self.params
            .iter()
            .map(|(_, e)| *e)
            .fold(self.input, f64::max)
    }

    pub fn groups(&self) -> impl Iterator<Item = (&str, f64)> {
        std::iter::once(("input", self.input)).chain(self.params.iter().map(|(n, e)| (n.as_str(), *e)))
    }
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

pub fn probe_weights(shape: &[usize], seed: u64) -> Tensor {
    Tensor::gaussian(shape, &mut Prng::new(seed ^ 0x5EED_9E0B), 0.0, 1.0)
}

fn probe_loss<M: Module>(layer: &M, x: &Tensor, mode: Mode, w: &Tensor) -> Result<f64> {
    let (y, _) = layer.apply(x, mode)?;
    if !y.is_finite() {
        return Err(Error::numeric("grad_check", "forward output"));
    }
    Ok(y.data().iter().zip(w.data()).map(|(a, b)| a * b).sum())
}

/// Perturbs every input and parameter element by `+-h` and compares the
/// central difference of the probe loss against `layer.backward`.
pub fn grad_check<M: Module + Clone>(layer: &M, x: &Tensor, h: f64, mode: Mode, seed: u64) -> Result<GradCheckReport> {
    if !(h > 0.0) {
        return Err(Error::Input(format!("finite-difference step must be > 0, got {h}")));
    }
    let (y, cache) = layer.apply(x, mode)?;
    if !y.is_finite() {
        return Err(Error::numeric("grad_check", "forward output"));
    }
    let w = probe_weights(y.shape(), seed);
    let analytic = layer.backward(&cache, &w)?;

    let mut xp = x.clone();
    let mut input = 0.0f64;
    for i in 0..x.len() {
        let orig = xp.data()[i];
        xp.data_mut()[i] = orig + h;
        let up = probe_loss(layer, &xp, mode, &w)?;
        xp.data_mut()[i] = orig - h;
        let down = probe_loss(layer, &xp, mode, &w)?;
        xp.data_mut()[i] = orig;
        input = input.max(relative_error(analytic.dx.data()[i], (up - down) / (2.0 * h)));
    }

    let mut work = layer.clone();
    let names: Vec<&'static str> = layer.params().iter().map(|(n, _)| *n).collect();
    let mut params = Vec::with_capacity(names.len());
    for (p, name) in names.iter().enumerate() {
        let len = work.params_mut()[p].value.len();
        let mut worst = 0.0f64;
        for i in 0..len {
            let orig = work.params_mut()[p].value.data()[i];
            work.params_mut()[p].value.data_mut()[i] = orig + h;
            let up = probe_loss(&work, x, mode, &w)?;
            work.params_mut()[p].value.data_mut()[i] = orig - h;
            let down = probe_loss(&work, x, mode, &w)?;
            work.params_mut()[p].value.data_mut()[i] = orig;
            worst = worst.max(relative_error(analytic.params[p].data()[i], (up - down) / (2.0 * h)));
        }
        params.push((name.to_string(), worst));
    }
    Ok(GradCheckReport { input, params })
}
