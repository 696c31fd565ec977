use super::{check_grad_shape, Gradients, Mode, Module, ParamMut};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// 2x2 non-overlapping max pooling.
///
/// Ties go to the first cell of the window in row-major order, so the
/// backward routing is deterministic.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MaxPool2;

#[derive(Clone, Debug)]
pub struct MaxPool2Cache {
    input_shape: Vec<usize>,
    output_shape: Vec<usize>,
    /// Flat input index of the winning cell for every output element.
    argmax: Vec<usize>,
}

impl MaxPool2 {
    pub fn maxpool2_forward(x: &Tensor) -> Result<(Tensor, MaxPool2Cache)> {
        let [n, c, h, w] = x.dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape(format!(
                "2x2 pooling needs even spatial dims, got {h}x{w}"
            )));
        }
        let (ho, wo) = (h / 2, w / 2);
        let d = x.data();
        let mut y = Vec::with_capacity(n * c * ho * wo);
        let mut argmax = Vec::with_capacity(n * c * ho * wo);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let first = base + 2 * oy * w + 2 * ox;
                    let mut best = first;
                    for idx in [first + 1, first + w, first + w + 1] {
                        // strict comparison keeps the earliest cell on ties
                        if d[idx] > d[best] {
                            best = idx;
                        }
                    }
                    y.push(d[best]);
                    argmax.push(best);
                }
            }
        }
        let output_shape = vec![n, c, ho, wo];
        Ok((
            Tensor::new(output_shape.clone(), y)?,
            MaxPool2Cache {
                input_shape: x.shape().to_vec(),
                output_shape,
                argmax,
            },
        ))
    }

    pub fn maxpool2_backward(cache: &MaxPool2Cache, dy: &Tensor) -> Result<Tensor> {
        check_grad_shape(dy, &cache.output_shape, "maxpool2")?;
        let mut dx = Tensor::zeros(&cache.input_shape);
        let out = dx.data_mut();
        for (&idx, &g) in cache.argmax.iter().zip(dy.data()) {
            out[idx] += g;
        }
        Ok(dx)
    }
}

impl Module for MaxPool2 {
    type Cache = MaxPool2Cache;

    fn apply(&self, x: &Tensor, _mode: Mode) -> Result<(Tensor, MaxPool2Cache)> {
        Self::maxpool2_forward(x)
    }

    fn backward(&self, cache: &MaxPool2Cache, dy: &Tensor) -> Result<Gradients> {
        Ok(Gradients {
            dx: Self::maxpool2_backward(cache, dy)?,
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
