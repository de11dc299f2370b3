//! Dense matrices, reverse-mode differentiation and the eigen kernels used
//! by the correlation loss.

mod gradcheck;
pub mod linalg;
mod matrix;
mod params;
mod tape;

pub use gradcheck::{finite_diff_check, tape_objective, GradCheck};
pub use linalg::{matrix_inv_sqrt, matrix_inv_sqrt_floored, svd, symmetric_eigen, Svd, SymmetricEigen};
pub use matrix::Matrix;
pub use params::{Param, ParamId, ParamStore};
pub use tape::{sigmoid, Gradients, NodeId, Tape};
