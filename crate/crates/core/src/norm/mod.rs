//! Baseline normalization layers sharing one statistic-scope abstraction.

mod batch;
mod bin;
mod scoped;
pub mod stats;

pub use batch::{BatchNorm2d, DEFAULT_EPS, DEFAULT_MOMENTUM};
pub use bin::{BinCache, BinLayer, DEFAULT_RHO};
pub use scoped::{default_groups, ScopedNorm, DEFAULT_GROUPS};
pub use stats::{
    affine_normalize, norm_backward, reduce_stats, AffineCache, StatScope, StatSource,
};
