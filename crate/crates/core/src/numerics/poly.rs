use super::matrix::Matrix;

/// Number of monomials of total degree at most `degree` in `vars` variables: C(vars+degree, degree).
pub fn monomial_count(vars: usize, degree: usize) -> usize {
    let mut c: u128 = 1;
    for i in 1..=degree as u128 {
        c = c * (vars as u128 + i) / i;
    }
    c as usize
}

/// Monomials as sorted variable-index multisets, graded lexicographic with the constant first.
///
/// `[[], [0], [1], [0,0], [0,1], [1,1]]` for two variables and degree 2.
pub fn monomial_indices(vars: usize, degree: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new()];
    let mut level: Vec<Vec<usize>> = vec![Vec::new()];
    for _ in 0..degree {
        let mut next = Vec::new();
        for m in &level {
            let start = m.last().copied().unwrap_or(0);
            for v in start..vars {
                let mut mm = m.clone();
                mm.push(v);
                next.push(mm);
            }
        }
        out.extend(next.iter().cloned());
        level = next;
    }
    out
}

/// Row-wise monomial feature expansion.
pub fn monomial_features(u: &Matrix, degree: usize) -> Matrix {
    let monos = monomial_indices(u.cols(), degree);
    expand_with(u, &monos)
}

pub(crate) fn expand_with(u: &Matrix, monos: &[Vec<usize>]) -> Matrix {
    let mut out = Matrix::zeros(u.rows(), monos.len());
    for i in 0..u.rows() {
        let row = u.row(i);
        let orow = out.row_mut(i);
        for (o, m) in orow.iter_mut().zip(monos) {
            *o = m.iter().map(|&v| row[v]).product();
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_match_binomials() {
        assert_eq!(monomial_count(4, 1), 5);
        assert_eq!(monomial_count(4, 2), 15);
        assert_eq!(monomial_count(4, 3), 35);
        for (m, l) in [(1, 3), (3, 2), (6, 3), (4, 0)] {
            assert_eq!(monomial_indices(m, l).len(), monomial_count(m, l));
        }
    }

    #[test]
    fn forced_degree_two_features() {
        let u = Matrix::from_rows(&[[2.0, 3.0]]);
        assert_eq!(monomial_features(&u, 2).data(), &[1.0, 2.0, 3.0, 4.0, 6.0, 9.0]);
    }
}
