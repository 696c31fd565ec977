use serde::{Deserialize, Serialize};

use super::{check_grad_shape, Gradients, Mode, Module, ParamMut};
use crate::error::{Error, Result};
use crate::tensor::{Prng, Tensor};

/// Fully-connected layer, `y = x . W^T + b`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug)]
pub struct LinearCache {
    x: Tensor,
}

impl Linear {
    /// Weights drawn from N(0, std^2), zero bias.
    pub fn with_std(inputs: usize, outputs: usize, std: f64, prng: &mut Prng) -> Self {
        Linear {
            weight: Tensor::gaussian(&[outputs, inputs], prng, 0.0, std),
            bias: Tensor::zeros(&[outputs]),
        }
    }

    /// He initialisation, std = sqrt(2 / fan_in).
    pub fn he(inputs: usize, outputs: usize, prng: &mut Prng) -> Self {
        Self::with_std(inputs, outputs, (2.0 / inputs as f64).sqrt(), prng)
    }

    pub fn from_parts(weight: Tensor, bias: Tensor) -> Result<Self> {
        let [out, _] = weight.dims2()?;
        if bias.shape() != [out] {
            return Err(Error::shape(format!(
                "bias {:?} does not match weight {:?}",
                bias.shape(),
                weight.shape()
            )));
        }
        Ok(Linear { weight, bias })
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn linear_forward(&self, x: &Tensor) -> Result<(Tensor, LinearCache)> {
        let [b, inputs] = x.dims2()?;
        if inputs != self.inputs() {
            return Err(Error::shape(format!(
                "linear layer expects {} input columns, got {inputs}",
                self.inputs()
            )));
        }
        let out = self.outputs();
        let w = self.weight.data();
        let mut y = vec![0.0; b * out];
        for (row, y_row) in x.data().chunks_exact(inputs).zip(y.chunks_exact_mut(out)) {
            for (o, y_o) in y_row.iter_mut().enumerate() {
                let w_row = &w[o * inputs..(o + 1) * inputs];
                *y_o = self.bias.data()[o] + dot(row, w_row);
            }
        }
        Ok((Tensor::new(vec![b, out], y)?, LinearCache { x: x.clone() }))
    }

    /// Returns `(dx, dweight, dbias)`.
    pub fn linear_backward(&self, cache: &LinearCache, dy: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        let [b, inputs] = cache.x.dims2()?;
        let out = self.outputs();
        check_grad_shape(dy, &[b, out], "linear")?;
        let w = self.weight.data();
        let mut dx = vec![0.0; b * inputs];
        let mut dw = vec![0.0; out * inputs];
        let mut db = vec![0.0; out];
        for ((x_row, dy_row), dx_row) in cache
            .x
            .data()
            .chunks_exact(inputs)
            .zip(dy.data().chunks_exact(out))
            .zip(dx.chunks_exact_mut(inputs))
        {
            for (o, &g) in dy_row.iter().enumerate() {
                db[o] += g;
                let w_row = &w[o * inputs..(o + 1) * inputs];
                let dw_row = &mut dw[o * inputs..(o + 1) * inputs];
                for i in 0..inputs {
                    dx_row[i] += g * w_row[i];
                    dw_row[i] += g * x_row[i];
                }
            }
        }
        Ok((
            Tensor::new(vec![b, inputs], dx)?,
            Tensor::new(vec![out, inputs], dw)?,
            Tensor::new(vec![out], db)?,
        ))
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl Module for Linear {
    type Cache = LinearCache;

    fn apply(&self, x: &Tensor, _mode: Mode) -> Result<(Tensor, LinearCache)> {
        self.linear_forward(x)
    }

    fn backward(&self, cache: &LinearCache, dy: &Tensor) -> Result<Gradients> {
        let (dx, dw, db) = self.linear_backward(cache, dy)?;
        Ok(Gradients {
            dx,
            params: vec![dw, db],
        })
    }

    fn params(&self) -> Vec<(&'static str, &Tensor)> {
        vec![("weight", &self.weight), ("bias", &self.bias)]
    }

    fn params_mut(&mut self) -> Vec<ParamMut<'_>> {
        vec![
            ParamMut::free("weight", &mut self.weight),
            ParamMut::free("bias", &mut self.bias),
        ]
    }
}
