//! Network primitives with hand-written backward passes.
//!
//! Every layer implements [`Module`]: a pure `apply` that returns the output
//! together with the cache its backward pass needs, an optional `track` hook
//! for running statistics, and a `backward` that returns the input gradient
//! plus one gradient per entry of `params()`, in the same order.

mod activation;
mod conv;
mod gradcheck;
mod linear;
mod loss;
mod pool;

use serde::{Deserialize, Serialize};

pub use activation::{Relu, ReluCache};
pub use conv::{Conv2d, Conv2dCache};
pub use gradcheck::{grad_check, probe_weights, relative_error, GradCheckReport};
pub use linear::{Linear, LinearCache};
pub use loss::softmax_cross_entropy;
pub use pool::{MaxPool2, MaxPool2Cache};

use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// Projection applied to a parameter after every optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Constraint {
    None,
    Clamp { lo: f64, hi: f64 },
}

impl Constraint {
    pub fn apply(self, t: &mut Tensor) {
        if let Constraint::Clamp { lo, hi } = self {
            for v in t.data_mut() {
                *v = v.clamp(lo, hi);
            }
        }
    }
}

pub struct ParamMut<'a> {
    pub name: &'static str,
    pub value: &'a mut Tensor,
    pub constraint: Constraint,
}

impl<'a> ParamMut<'a> {
    pub fn free(name: &'static str, value: &'a mut Tensor) -> Self {
        ParamMut {
            name,
            value,
            constraint: Constraint::None,
        }
    }
}

/// Output of a backward pass.
#[derive(Clone, Debug)]
pub struct Gradients {
    pub dx: Tensor,
    /// Aligned with `Module::params()`.
    pub params: Vec<Tensor>,
}

pub trait Module {
    type Cache;

    /// Pure forward pass. Never mutates the layer.
    fn apply(&self, x: &Tensor, mode: Mode) -> Result<(Tensor, Self::Cache)>;

    /// Folds the statistics recorded in a Train-mode cache into running
    /// estimates.
    fn track(&mut self, _cache: &Self::Cache) {}

    fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<(Tensor, Self::Cache)> {
        let (y, cache) = self.apply(x, mode)?;
        if mode == Mode::Train {
            self.track(&cache);
        }
        Ok((y, cache))
    }

    fn backward(&self, cache: &Self::Cache, dy: &Tensor) -> Result<Gradients>;

    fn params(&self) -> Vec<(&'static str, &Tensor)>;

    fn params_mut(&mut self) -> Vec<ParamMut<'_>>;

    /// Non-trainable state that must survive a checkpoint.
    fn buffers(&self) -> Vec<(&'static str, &Tensor)> {
        Vec::new()
    }

    fn buffers_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        Vec::new()
    }
}

pub(crate) fn check_grad_shape(dy: &Tensor, expected: &[usize], layer: &str) -> Result<()> {
    if dy.shape() != expected {
        return Err(crate::Error::Usage(format!(
            "{layer} backward: upstream gradient {:?} does not match cached output {:?}",
            dy.shape(),
            expected
        )));
    }
    Ok(())
}
