//! Raw forward/backward kernels over [`Tensor`](crate::tensor::Tensor)s.

pub mod conv;
pub mod norm;
pub mod resample;
