//! Tensor kernels, reverse-mode gradients, parameters and the optimizer.

pub mod checkpoint;
pub mod kernels;
pub mod layer;
pub mod params;
pub mod tape;

pub use layer::{LayerSpec, Padding};
pub use params::{he_uniform, AdamConfig, Param, ParamSet, BN_EPS, BN_MOMENTUM};
pub use tape::{BatchStats, Grads, NormStats, Tape, Var};
