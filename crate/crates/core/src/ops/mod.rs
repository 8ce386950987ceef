//! Tape-free numeric kernels behind the differentiable primitives.

pub mod conv;
pub mod norm;
pub mod pool;
pub mod resize;

pub use resize::ResizeMode;
