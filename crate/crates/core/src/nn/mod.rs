//! Minimal differentiable-programming toolkit used by the network and losses.

pub mod params;
pub mod tape;
pub mod tensor;

pub use params::{Adam, BoundParams, Param, ParamId, ParamSet};
pub use tape::{Gradients, PoolMask, Tape, Var};
pub use tensor::Tensor;
