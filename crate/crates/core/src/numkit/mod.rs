//! Dense matrices, kernels, cost accounting and a reverse-mode tape.

pub mod gradcheck;
pub mod ledger;
mod mat;
mod ops;
pub mod tape;

pub use gradcheck::{grad_check, rel_err, GradReport};
pub use ledger::CostLedger;
pub use mat::Mat;
pub use ops::{
    clamp_mat, elu, frob_norm, matmul, matmul_nt, matmul_tn, phi, phi_map, relu, softmax_rows,
};
pub use tape::{vjp, Grads, Tape, Var};
