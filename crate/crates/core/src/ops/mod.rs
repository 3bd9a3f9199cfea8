//! Forward and backward kernels on flat slices. The tape owns shape checks
//! and wiring; these functions only do arithmetic.

pub mod affine;
pub mod conv;
pub mod guide;
pub mod linear;
pub mod norm;
pub mod slice;
