//! Dense-matrix computation core: forward ops, a reverse-mode tape, and
//! finite-difference gradient verification.

mod gradcheck;
mod matrix;
mod tape;

pub use gradcheck::grad_check;
pub use matrix::{cosine_similarity_matrix, l2_normalize_rows, softmax_rows, DenseMatrix};
pub use tape::{Tape, VarId};
