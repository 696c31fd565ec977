use super::{check_grad_shape, Gradients, Mode, Module, ParamMut};
use crate::error::Result;
use crate::tensor::{Activation, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Relu;

#[derive(Clone, Debug)]
pub struct ReluCache {
    x: Tensor,
}

impl Module for Relu {
    type Cache = ReluCache;

    fn apply(&self, x: &Tensor, _mode: Mode) -> Result<(Tensor, ReluCache)> {
        Ok((x.pointwise(Activation::Relu), ReluCache { x: x.clone() }))
    }

    fn backward(&self, cache: &ReluCache, dy: &Tensor) -> Result<Gradients> {
        check_grad_shape(dy, cache.x.shape(), "relu")?;
        let dx = cache
            .x
            .zip_map(dy, |x, g| if x > 0.0 { g } else { 0.0 })?;
        Ok(Gradients {
            dx,
            params: Vec::new(),
        })
    }

    fn params(&self) -> Vec<(&'static str, &Tensor)> {
        Vec::new()
    }

    fn params_mut(&mut self) -> Vec<ParamMut<'_>> {
        Vec::new()
    }
}
