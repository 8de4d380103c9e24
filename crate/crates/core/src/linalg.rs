//! Dense helpers shared by the network, oracle and theory modules.

use nalgebra::{DMatrix, DVector};

/// Eigenvalues of a symmetric matrix, sorted in descending order.
pub fn symmetric_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    let mut ev: Vec<f64> = m.clone().symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    ev
}

pub fn is_symmetric(m: &DMatrix<f64>, tol: f64) -> bool {
    m.is_square()
        && (0..m.nrows()).all(|i| (0..i).all(|j| (m[(i, j)] - m[(j, i)]).abs() <= tol))
}

/// Largest singular value. Symmetric input goes through the eigenvalues
/// directly; otherwise through the eigenvalues of `MᵀM`.
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    if is_symmetric(m, 0.0) {
        symmetric_eigenvalues(m)
            .into_iter()
            .fold(0.0_f64, |acc, e| acc.max(e.abs()))
    } else {
        let gram = m.transpose() * m;
        symmetric_eigenvalues(&gram)
            .first()
            .copied()
            .unwrap_or(0.0)
            .max(0.0)
            .sqrt()
    }
}

/// `(1/n) 1 1ᵀ`.
pub fn averaging_matrix(n: usize) -> DMatrix<f64> {
    DMatrix::from_element(n, n, 1.0 / n as f64)
}

/// Arithmetic mean of the rows of `x`.
pub fn row_mean(x: &DMatrix<f64>) -> DVector<f64> {
    let n = x.nrows() as f64;
    DVector::from_iterator(x.ncols(), x.column_iter().map(|c| c.sum() / n))
}

/// Squared Frobenius distance between the rows of `x` and the fixed row `c`.
pub fn row_dispersion(x: &DMatrix<f64>, c: &DVector<f64>) -> f64 {
    let mut acc = 0.0;
    for (j, col) in x.column_iter().enumerate() {
        for v in col.iter() {
            let d = v - c[j];
            acc += d * d;
        }
    }
    acc
}

/// Solve `A x = b` for symmetric positive-definite `A`.
pub fn solve_spd(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    a.clone().cholesky().map(|c| c.solve(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spectral_norm_of_nonsymmetric() {
        // Singular values of [[0, 2], [0, 0]] are {2, 0}.
        let m = DMatrix::from_row_slice(2, 2, &[0.0, 2.0, 0.0, 0.0]);
        assert!((spectral_norm(&m) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn dispersion_zero_for_replicated_rows() {
        let c = DVector::from_vec(vec![1.0, -2.0]);
        let x = DMatrix::from_fn(3, 2, |_, j| c[j]);
        assert_eq!(row_dispersion(&x, &c), 0.0);
        assert_eq!(row_mean(&x), c);
    }
}
