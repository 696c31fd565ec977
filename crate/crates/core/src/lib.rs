//! Normalization-layer laboratory.
//!
//! Adaptive fusion normalization ([`afn::AfnLayer`]) next to batch, layer,
//! instance, group and batch-instance normalization, all with hand-written
//! backward passes checked against central differences, plus a small
//! ConvNet training loop and a corruption-severity evaluation harness.

pub mod afn;
pub mod cli;
pub mod data;
pub mod error;
pub mod experiment;
pub mod nn;
pub mod norm;
pub mod optim;
pub mod tensor;

pub use error::{Error, Result};
pub use nn::Mode;
pub use tensor::{Prng, Tensor};
