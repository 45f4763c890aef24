//! Deterministic numerical kernels and statistics shared by every module.

mod gradcheck;
pub(crate) mod matrix;
mod ortho;
mod rng;
mod stats;

pub use gradcheck::{grad_check, grad_check_coords, MAX_CHECKED_COORDS};
pub use matrix::{axpy, dot, matmul, matmul_a_bt, matmul_at_b_acc, norm, Matrix};
pub use ortho::{gram_schmidt, random_unit, GRAM_SCHMIDT_EPS};
pub use rng::{mix_seed, splitmix64, Rng};
pub use stats::{average_ranks, mean, paired_permutation_p, pearson, spearman, std_dev};
