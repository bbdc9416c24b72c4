//! Thin wrappers over nalgebra for the dense symmetric solves the SSL
//! engines need. Inputs and outputs stay in ndarray.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};

fn to_na(a: &Array2<f64>) -> nalgebra::DMatrix<f64> {
    nalgebra::DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[(i, j)])
}

fn from_na(m: &nalgebra::DMatrix<f64>) -> Array2<f64> {
    Array2::from_shape_fn((m.nrows(), m.ncols()), |(i, j)| m[(i, j)])
}

/// Solve the symmetric positive-definite system `a · x = b` by Cholesky
/// factorization.
pub fn cholesky_solve(a: &Array2<f64>, b: &Array2<f64>) -> Result<Array2<f64>> {
    if a.nrows() != a.ncols() || a.nrows() != b.nrows() {
        return Err(Error::invalid("cholesky_solve shape mismatch"));
    }
    let chol = nalgebra::Cholesky::new(to_na(a))
        .ok_or_else(|| Error::numerical("matrix is not positive definite"))?;
    let x = chol.solve(&to_na(b));
    Ok(from_na(&x))
}

/// Eigenvalues and eigenvectors of a symmetric matrix; columns of the
/// returned matrix are the eigenvectors.
pub fn symmetric_eigen(a: &Array2<f64>) -> Result<(Array1<f64>, Array2<f64>)> {
    if a.nrows() != a.ncols() {
        return Err(Error::invalid("symmetric_eigen needs a square matrix"));
    }
    let se = nalgebra::SymmetricEigen::new(to_na(a));
    let vals = Array1::from_iter(se.eigenvalues.iter().copied());
    let vecs = from_na(&se.eigenvectors);
    Ok((vals, vecs))
}

/// Symmetric matrix power a^p via eigendecomposition, with eigenvalues
/// floored at `floor` before exponentiation.
pub fn symmetric_matrix_power(a: &Array2<f64>, p: f64, floor: f64) -> Result<Array2<f64>> {
    let (vals, vecs) = symmetric_eigen(a)?;
    let powed: Array1<f64> = vals.mapv(|v| v.max(floor).powf(p));
    let scaled = &vecs * &powed; // scales columns
    Ok(scaled.dot(&vecs.t()))
}

/// Max absolute entry, for residual checks.
pub fn max_abs(a: &Array2<f64>) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn cholesky_solves_spd_system() {
        let a = array![[4.0, 1.0], [1.0, 3.0]];
        let b = array![[1.0], [2.0]];
        let x = cholesky_solve(&a, &b).unwrap();
        let r = a.dot(&x) - &b;
        assert!(max_abs(&r) < 1e-12);
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let a = array![[1.0, 2.0], [2.0, 1.0]];
        let b = array![[1.0], [1.0]];
        assert!(cholesky_solve(&a, &b).is_err());
    }

    #[test]
    fn matrix_sqrt_squares_back() {
        let a = array![[2.0, 0.5], [0.5, 1.0]];
        let s = symmetric_matrix_power(&a, 0.5, 1e-12).unwrap();
        let back = s.dot(&s);
        for i in 0..2 {
            for j in 0..2 {
                assert_abs_diff_eq!(back[(i, j)], a[(i, j)], epsilon = 1e-10);
            }
        }
    }
}
