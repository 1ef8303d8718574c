//! Dense tensors, a reverse-mode tape over the handful of operations an
//! episode-embedding network needs, Adam, a plateau scheduler, gradient
//! checking and binary checkpoints.
//!
//! Values are stored as `f64` so that central-difference checks at
//! `eps = 1e-5` are meaningful; checkpoints are written as `f32`.

pub mod checkpoint;
mod error;
pub mod gradcheck;
mod graph;
pub mod nn;
pub mod optim;
mod params;
mod tensor;

pub use error::{NumError, Result};
pub use gradcheck::{grad_check, grad_check_params, relative_error};
pub use graph::{Backward, Graph, Margin, MultiSimilarity, Var};
pub use optim::{Adam, PlateauScheduler};
pub use params::{GradBuf, Gradients, ParamId, ParamStore};
pub use tensor::Tensor;
