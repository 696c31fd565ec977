//! SGD with Nesterov momentum, Adam, and a step-decay schedule.
//!
//! Both optimizers apply each parameter's [`Constraint`] right after its
//! update, which is how the BIN gate stays inside `[0, 1]`.

use serde::{Deserialize, Serialize};

pub use crate::nn::Constraint;
use crate::error::{Error, Result};
use crate::nn::ParamMut;
use crate::tensor::Tensor;

pub trait Optimizer {
    fn step(&mut self, params: &mut [ParamMut<'_>], grads: &[Tensor]) -> Result<()>;
    fn lr(&self) -> f64;
    fn set_lr(&mut self, lr: f64);
}

fn check_aligned(params: &[ParamMut<'_>], grads: &[Tensor], buffers: &[Tensor]) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::Usage(format!(
            "{} parameters but {} gradients",
            params.len(),
            grads.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.value.shape() != g.shape() {
            return Err(Error::Usage(format!(
                "gradient {:?} does not match parameter `{}` {:?}",
                g.shape(),
                p.name,
                p.value.shape()
            )));
        }
    }
    if !buffers.is_empty()
        && (buffers.len() != params.len()
            || buffers.iter().zip(params).any(|(b, p)| b.shape() != p.value.shape()))
    {
        return Err(Error::Usage(
            "parameter list changed between optimizer steps".into(),
        ));
    }
    Ok(())
}

fn zeros_like(params: &[ParamMut<'_>]) -> Vec<Tensor> {
    params.iter().map(|p| Tensor::zeros(p.value.shape())).collect()
}

/// `v <- mu * v + g; p <- p - lr * (g + mu * v)`.
#[derive(Clone, Debug)]
pub struct SgdNesterov {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<Tensor>,
}

impl SgdNesterov {
    pub fn new(lr: f64, momentum: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {momentum}")));
        }
        Ok(SgdNesterov {
            lr,
            momentum,
            velocity: Vec::new(),
        })
    }
}

impl Optimizer for SgdNesterov {
    fn step(&mut self, params: &mut [ParamMut<'_>], grads: &[Tensor]) -> Result<()> {
        check_aligned(params, grads, &self.velocity)?;
        if self.velocity.is_empty() {
            self.velocity = zeros_like(params);
        }
        let mu = self.momentum;
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            for ((pv, &gv), vv) in p.value.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vv = mu * *vv + gv;
                *pv -= self.lr * (gv + mu * *vv);
            }
            p.constraint.apply(p.value);
        }
        Ok(())
    }

    fn lr(&self) -> f64 {
        self.lr
    }

    fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }
}

impl Optimizer for Adam {
    fn step(&mut self, params: &mut [ParamMut<'_>], grads: &[Tensor]) -> Result<()> {
        check_aligned(params, grads, &self.m)?;
        if self.m.is_empty() {
            self.m = zeros_like(params);
            self.v = zeros_like(params);
        }
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((pv, &gv), mv), vv) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = b1 * *mv + (1.0 - b1) * gv;
                *vv = b2 * *vv + (1.0 - b2) * gv * gv;
                let m_hat = *mv / c1;
                let v_hat = *vv / c2;
                *pv -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
            p.constraint.apply(p.value);
        }
        Ok(())
    }

    fn lr(&self) -> f64 {
        self.lr
    }

    fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }
}

/// `lr0 * 0.1^floor(epoch / decay_every)`; `decay_every == 0` keeps the
/// rate constant.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepDecay {
    pub lr0: f64,
    pub decay_every: usize,
}

impl StepDecay {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if self.decay_every == 0 {
            return self.lr0;
        }
        self.lr0 * 0.1f64.powi((epoch / self.decay_every) as i32)
    }
}
