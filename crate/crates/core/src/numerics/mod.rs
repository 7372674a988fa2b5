//! Dense matrix algebra and the linear solvers the rest of the crate builds on.

mod linalg;
mod matrix;
mod poly;

pub use linalg::{
    cholesky, independent_columns, lu_solve, min_singular_value, residualize, singular_values, solve_ols, svd,
    sym_eigen, CholeskyFactor,
};
pub use matrix::{dot, matmul, matmul_t, t_matmul, Matrix};
pub use poly::{monomial_count, monomial_features, monomial_indices};
pub(crate) use poly::expand_with;
