//! Dense tensors, a reverse-mode tape, Adam, and a finite-difference oracle.

pub mod checkpoint;
mod gradcheck;
mod graph;
mod optim;
mod params;
mod tensor;

pub use gradcheck::{finite_difference_grad, relative_error};
pub use graph::{broadcast_shape, elu, sigmoid, softplus, Graph, SparseRows, SparseRowsBuilder, Var, EXP_INPUT_MAX, LOG_INPUT_MIN};
pub use optim::{Adam, AdamConfig};
pub use params::{Linear, ParamId, ParamStore};
pub use tensor::{numel, Tensor};
