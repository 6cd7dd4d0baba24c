//! Tensors, a reverse-mode tape and residual CNNs for 2D and 3D data.
//!
//! Everything is generic over [`Real`] so gradients can be checked in `f64`
//! while training runs in `f32`.

pub mod adam;
pub mod checkpoint;
pub mod conv;
pub mod error;
pub mod gradcheck;
pub mod net;
pub mod ops;
mod real;
pub mod tape;
pub mod tensor;

pub use adam::{adam_step, AdamState};
pub use checkpoint::Checkpoint;
pub use conv::{conv_backward, conv_forward, ConvDims, ConvGrads};
pub use error::{NnError, Result};
pub use net::{BlockSpec, ConvNetSpec, ResidualCnn};
pub use real::Real;
pub use tape::{Tape, Var};
pub use tensor::Tensor;
