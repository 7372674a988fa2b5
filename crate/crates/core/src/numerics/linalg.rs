use crate::error::{Error, Result};

use super::matrix::{dot, matmul, t_matmul, Matrix};

/// Lower-triangular factor `L` with `L Lᵀ = A`.
#[derive(Clone, Debug, PartialEq)]
pub struct CholeskyFactor {
    pub lower: Matrix,
    pub dim: usize,
}

const SYMMETRY_TOL: f64 = 1e-10;

pub fn cholesky(a: &Matrix) -> Result<CholeskyFactor> {
    let n = a.rows();
    if a.cols() != n {
        return Err(Error::shape("cholesky", format!("{:?} not square", a.shape())));
    }
    let scale = a.max_abs().max(1.0);
    for i in 0..n {
        for j in 0..i {
            if (a.get(i, j) - a.get(j, i)).abs() > SYMMETRY_TOL * scale {
                return Err(Error::Contract(format!(
                    "cholesky input not symmetric at ({i},{j})"
                )));
            }
        }
    }
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let pivot = a.get(j, j) - dot(&l.row(j)[..j], &l.row(j)[..j]);
        if !(pivot > 0.0) {
            return Err(Error::NotPositiveDefinite { index: j, pivot });
        }
        let d = pivot.sqrt();
        l.set(j, j, d);
        for i in j + 1..n {
            let s = a.get(i, j) - dot(&l.row(i)[..j], &l.row(j)[..j]);
            l.set(i, j, s / d);
        }
    }
    Ok(CholeskyFactor { lower: l, dim: n })
}

impl CholeskyFactor {
    /// Solves `A x = b` for every column of `b`.
    pub fn solve(&self, b: &Matrix) -> Result<Matrix> {
        let n = self.dim;
        if b.rows() != n {
            return Err(Error::shape("cholesky solve", format!("rhs has {} rows, need {n}", b.rows())));
        }
        let l = &self.lower;
        let mut x = b.clone();
        let m = b.cols();
        for c in 0..m {
            // forward: L y = b
            for i in 0..n {
                let mut s = x.get(i, c);
                for k in 0..i {
                    s -= l.get(i, k) * x.get(k, c);
                }
                x.set(i, c, s / l.get(i, i));
            }
            // backward: Lᵀ x = y
            for i in (0..n).rev() {
                let mut s = x.get(i, c);
                for k in i + 1..n {
                    s -= l.get(k, i) * x.get(k, c);
                }
                x.set(i, c, s / l.get(i, i));
            }
        }
        Ok(x)
    }

    pub fn inverse(&self) -> Matrix {
        self.solve(&Matrix::identity(self.dim)).expect("square rhs")
    }

    pub fn log_det(&self) -> f64 {
        (0..self.dim).map(|i| 2.0 * self.lower.get(i, i).ln()).sum()
    }

    pub fn reconstruct(&self) -> Matrix {
        matmul(&self.lower, &self.lower.transpose()).expect("square")
    }
}

/// Least squares `argmin ‖Xβ − y‖²` through the normal equations.
pub fn solve_ols(x: &Matrix, y: &Matrix) -> Result<Matrix> {
    let (n, k) = x.shape();
    if y.rows() != n {
        return Err(Error::shape("solve_ols", format!("X has {n} rows, y has {}", y.rows())));
    }
    if n < k {
        return Err(Error::Contract(format!("solve_ols needs n >= k, got n={n}, k={k}")));
    }
    let xtx = t_matmul(x, x)?;
    let xty = t_matmul(x, y)?;
    let chol = guarded_cholesky(&xtx)?;
    chol.solve(&xty)
}

/// Cholesky of a Gram matrix with a relative pivot guard.
pub(crate) fn guarded_cholesky(g: &Matrix) -> Result<CholeskyFactor> {
    let n = g.rows();
    let max_diag = (0..n).map(|i| g.get(i, i)).fold(0.0_f64, f64::max);
    let floor = 1e-10 * max_diag;
    let mut l = Matrix::zeros(n, n);
    let mut worst: Option<(usize, f64)> = None;
    for j in 0..n {
        let pivot = g.get(j, j) - dot(&l.row(j)[..j], &l.row(j)[..j]);
        if !(pivot > floor) || !pivot.is_finite() {
            if worst.is_none_or(|(_, p)| pivot < p) {
                worst = Some((j, pivot));
            }
            // keep going only to find the smallest offending pivot
            l.set(j, j, 1.0);
            continue;
        }
        let d = pivot.sqrt();
        l.set(j, j, d);
        for i in j + 1..n {
            let s = g.get(i, j) - dot(&l.row(i)[..j], &l.row(j)[..j]);
            l.set(i, j, s / d);
        }
    }
    match worst {
        Some((index, pivot)) => Err(Error::Singular { index, pivot }),
        None => Ok(CholeskyFactor { lower: l, dim: n }),
    }
}

/// Residuals of `y` after OLS on `x`.
pub fn residualize(x: &Matrix, y: &Matrix) -> Result<Matrix> {
    let beta = solve_ols(x, y)?;
    y.sub(&matmul(x, &beta)?)
}

/// Indices of a maximal linearly independent prefix-greedy subset of the columns of `a`.
///
/// A column is kept when its residual after projecting out the kept columns exceeds
/// `rel_tol` times the largest column norm (modified Gram-Schmidt).
pub fn independent_columns(a: &Matrix, rel_tol: f64) -> Vec<usize> {
    let (n, k) = a.shape();
    let cols: Vec<Vec<f64>> = (0..k).map(|j| a.col(j)).collect();
    let scale = cols.iter().map(|c| dot(c, c).sqrt()).fold(0.0_f64, f64::max);
    let mut basis: Vec<Vec<f64>> = Vec::new();
    let mut keep = Vec::new();
    for (j, c) in cols.into_iter().enumerate() {
        let mut r = c;
        for q in &basis {
            let proj = dot(&r, q);
            for i in 0..n {
                r[i] -= proj * q[i];
            }
        }
        let norm = dot(&r, &r).sqrt();
        if norm > rel_tol * scale && norm > 0.0 {
            r.iter_mut().for_each(|v| *v /= norm);
            basis.push(r);
            keep.push(j);
        }
    }
    keep
}

/// Symmetric eigen-decomposition by cyclic Jacobi rotations.
///
/// Returns eigenvalues in ascending order and the matching eigenvectors as columns.
pub fn sym_eigen(a: &Matrix) -> Result<(Vec<f64>, Matrix)> {
    let n = a.rows();
    if a.cols() != n {
        return Err(Error::shape("sym_eigen", format!("{:?} not square", a.shape())));
    }
    let mut m = a.clone();
    let mut v = Matrix::identity(n);
    let total = a.frobenius_norm().max(f64::MIN_POSITIVE);
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m.get(i, j).powi(2))
            .sum::<f64>()
            .sqrt();
        if off <= 1e-12 * total {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m.get(p, q);
                if apq == 0.0 {
                    continue;
                }
                let app = m.get(p, p);
                let aqq = m.get(q, q);
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m.get(k, p);
                    let mkq = m.get(k, q);
                    m.set(k, p, c * mkp - s * mkq);
                    m.set(k, q, s * mkp + c * mkq);
                }
                for k in 0..n {
                    let mpk = m.get(p, k);
                    let mqk = m.get(q, k);
                    m.set(p, k, c * mpk - s * mqk);
                    m.set(q, k, s * mpk + c * mqk);
                }
                for k in 0..n {
                    let vkp = v.get(k, p);
                    let vkq = v.get(k, q);
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m.get(i, i).total_cmp(&m.get(j, j)));
    let values = order.iter().map(|&i| m.get(i, i)).collect();
    let vectors = Matrix::from_fn(n, n, |r, c| v.get(r, order[c]));
    Ok((values, vectors))
}

/// One-sided Jacobi SVD of a matrix with `rows >= cols`.
///
/// Returns `(U, s, V)` with `a = U diag(s) Vᵀ`; singular values descending.
fn one_sided_jacobi(a: &Matrix) -> (Matrix, Vec<f64>, Matrix) {
    let (m, n) = a.shape();
    // work on columns: store transposed so each column is a contiguous row
    let mut cols = a.transpose();
    let mut v = Matrix::identity(n);
    for _sweep in 0..80 {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = dot(cols.row(p), cols.row(p));
                let beta = dot(cols.row(q), cols.row(q));
                let gamma = dot(cols.row(p), cols.row(q));
                if gamma == 0.0 || gamma.abs() <= 1e-15 * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for k in 0..m {
                    let xp = cols.get(p, k);
                    let xq = cols.get(q, k);
                    cols.set(p, k, c * xp - s * xq);
                    cols.set(q, k, s * xp + c * xq);
                }
                for k in 0..n {
                    let vp = v.get(k, p);
                    let vq = v.get(k, q);
                    v.set(k, p, c * vp - s * vq);
                    v.set(k, q, s * vp + c * vq);
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let norms: Vec<f64> = (0..n).map(|j| dot(cols.row(j), cols.row(j)).sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]));
    let s: Vec<f64> = order.iter().map(|&j| norms[j]).collect();
    let u = Matrix::from_fn(m, n, |r, c| {
        let j = order[c];
        if norms[j] > 0.0 {
            cols.get(j, r) / norms[j]
        } else {
            0.0
        }
    });
    let vv = Matrix::from_fn(n, n, |r, c| v.get(r, order[c]));
    (u, s, vv)
}

/// Singular values in descending order.
pub fn singular_values(a: &Matrix) -> Vec<f64> {
    if a.rows() == 0 || a.cols() == 0 {
        return Vec::new();
    }
    if a.rows() >= a.cols() {
        one_sided_jacobi(a).1
    } else {
        one_sided_jacobi(&a.transpose()).1
    }
}

pub fn min_singular_value(a: &Matrix) -> f64 {
    singular_values(a).last().copied().unwrap_or(0.0)
}

/// Thin SVD `a = U diag(s) Vᵀ` for `rows >= cols`.
pub fn svd(a: &Matrix) -> Result<(Matrix, Vec<f64>, Matrix)> {
    if a.rows() < a.cols() {
        return Err(Error::shape("svd", "requires rows >= cols"));
    }
    Ok(one_sided_jacobi(a))
}

/// Solves a square system by Gaussian elimination with partial pivoting.
pub fn lu_solve(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    let n = a.rows();
    if a.cols() != n || b.rows() != n {
        return Err(Error::shape("lu_solve", format!("{:?} / {:?}", a.shape(), b.shape())));
    }
    let m = b.cols();
    let mut aug = Matrix::hstack(&[a, b])?;
    let w = n + m;
    let scale = a.max_abs().max(f64::MIN_POSITIVE);
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| aug.get(i, col).abs().total_cmp(&aug.get(j, col).abs()))
            .expect("non-empty");
        let pv = aug.get(piv, col);
        if pv.abs() <= 1e-14 * scale {
            return Err(Error::Singular { index: col, pivot: pv });
        }
        if piv != col {
            for k in 0..w {
                let t = aug.get(col, k);
                aug.set(col, k, aug.get(piv, k));
                aug.set(piv, k, t);
            }
        }
        for r in col + 1..n {
            let f = aug.get(r, col) / pv;
            if f == 0.0 {
                continue;
            }
            for k in col..w {
                let v = aug.get(r, k) - f * aug.get(col, k);
                aug.set(r, k, v);
            }
        }
    }
    let mut x = Matrix::zeros(n, m);
    for c in 0..m {
        for i in (0..n).rev() {
            let mut s = aug.get(i, n + c);
            for k in i + 1..n {
                s -= aug.get(i, k) * x.get(k, c);
            }
            x.set(i, c, s / aug.get(i, i));
        }
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cholesky_identity_and_hand_case() {
        let f = cholesky(&Matrix::identity(4)).unwrap();
        assert_eq!(f.lower, Matrix::identity(4));
        let f = cholesky(&Matrix::from_rows(&[[4.0, 2.0], [2.0, 3.0]])).unwrap();
        let want = Matrix::from_rows(&[[2.0, 0.0], [1.0, 2f64.sqrt()]]);
        assert!(f.lower.max_abs_diff(&want) < 1e-15);
    }

    #[test]
    fn cholesky_rejects_indefinite_with_index() {
        let a = Matrix::from_rows(&[[1.0, 2.0], [2.0, 1.0]]);
        match cholesky(&a) {
            Err(Error::NotPositiveDefinite { index, .. }) => assert_eq!(index, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn ols_trivial_designs() {
        let y = Matrix::from_rows(&[[1.0, -2.0], [0.5, 3.0], [7.0, 0.0]]);
        let b = solve_ols(&Matrix::identity(3), &y).unwrap();
        assert!(b.max_abs_diff(&y) < 1e-14);
        let ones = Matrix::filled(3, 1, 1.0);
        let b = solve_ols(&ones, &Matrix::column(&[2.0, 4.0, 6.0])).unwrap();
        assert!((b.item() - 4.0).abs() < 1e-14);
    }

    #[test]
    fn ols_singular_names_pivot() {
        let x = Matrix::from_rows(&[[1.0, 2.0], [2.0, 4.0], [3.0, 6.0]]);
        match solve_ols(&x, &Matrix::column(&[1.0, 2.0, 3.0])) {
            Err(Error::Singular { index, .. }) => assert_eq!(index, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn singular_value_cases() {
        assert!((min_singular_value(&Matrix::identity(3)) - 1.0).abs() < 1e-15);
        assert_eq!(min_singular_value(&Matrix::from_rows(&[[1.0, 0.0], [0.0, 0.0]])), 0.0);
        let a = Matrix::from_rows(&[[3.0, 0.0], [0.0, 4.0], [0.0, 0.0]]);
        assert!((min_singular_value(&a) - 3.0).abs() < 1e-12);
        assert!((min_singular_value(&a.transpose()) - 3.0).abs() < 1e-12);
    }

    #[test]
    fn eigen_of_known_matrix() {
        let a = Matrix::from_rows(&[[2.0, 1.0], [1.0, 2.0]]);
        let (vals, vecs) = sym_eigen(&a).unwrap();
        assert!((vals[0] - 1.0).abs() < 1e-12 && (vals[1] - 3.0).abs() < 1e-12);
        let av = matmul(&a, &vecs).unwrap();
        for c in 0..2 {
            for r in 0..2 {
                assert!((av.get(r, c) - vals[c] * vecs.get(r, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn svd_reconstructs() {
        let a = Matrix::from_fn(4, 3, |i, j| ((i * 7 + j * 3) % 5) as f64 - 1.5);
        let (u, s, v) = svd(&a).unwrap();
        let back = matmul(&matmul(&u, &Matrix::diag(&s)).unwrap(), &v.transpose()).unwrap();
        assert!(back.max_abs_diff(&a) < 1e-12);
    }

    #[test]
    fn lu_solves_permuted_system() {
        let a = Matrix::from_rows(&[[0.0, 2.0, 1.0], [1.0, 1.0, 0.0], [3.0, 0.0, 1.0]]);
        let x = Matrix::column(&[1.0, -2.0, 0.5]);
        let b = matmul(&a, &x).unwrap();
        assert!(lu_solve(&a, &b).unwrap().max_abs_diff(&x) < 1e-14);
    }
}
