//! Image enhancement with a learned bilateral grid.
//!
//! A small convolutional network looks at a 256×256 copy of the input and
//! predicts a 16×16×8 grid of 3×4 affine color transforms. At full
//! resolution a learned grayscale guidance map selects a depth in the grid
//! for every pixel; the grid is sliced trilinearly and the resulting
//! per-pixel transform is applied to the input colors.
//!
//! Everything differentiable runs on [`tape::Tape`], a small reverse-mode
//! recorder with exactly the ops the model needs.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod fullres;
pub mod gradcheck;
pub mod net;
pub mod ops;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tape::{Tape, Var};
pub use tensor::{Scalar, Tensor};
