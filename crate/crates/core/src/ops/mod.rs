//! Numeric kernels behind the [`Graph`](crate::Graph) primitives.

pub mod conv;
mod direct;
pub mod pool;
pub mod resample;

pub use conv::Padding;
