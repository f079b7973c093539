//! Small dense linear algebra: Cholesky factorization and triangular solves
//! for the covariance work in the scorer.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Lower-triangular Cholesky factor of a symmetric positive-definite matrix.
///
/// Fails when the matrix is not (numerically) positive definite, which is how
/// callers detect insufficient regularization.
pub fn cholesky<F: Scalar>(a: &Tensor<F>) -> Result<Tensor<F>> {
    assert_eq!(a.rank(), 2);
    let n = a.rows();
    assert_eq!(n, a.cols(), "cholesky needs a square matrix");
    let mut l = Tensor::zeros([n, n]);
    for i in 0..n {
        for j in 0..=i {
            let mut s = a.at2(i, j);
            for k in 0..j {
                s = s - l.at2(i, k) * l.at2(j, k);
            }
            if i == j {
                if s <= F::zero() || !s.is_finite() {
                    return Err(Error::Score(format!(
                        "matrix not positive definite at pivot {i} (value {s})"
                    )));
                }
                l.set2(i, j, s.sqrt());
            } else {
                l.set2(i, j, s / l.at2(j, j));
            }
        }
    }
    Ok(l)
}

/// Solves `L y = b` for lower-triangular `L` by forward substitution.
pub fn solve_lower<F: Scalar>(l: &Tensor<F>, b: &[F]) -> Vec<F> {
    let n = l.rows();
    assert_eq!(b.len(), n);
    let mut y = vec![F::zero(); n];
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s = s - l.at2(i, k) * y[k];
        }
        y[i] = s / l.at2(i, i);
    }
    y
}

/// Solves `L^T x = y` for lower-triangular `L` by back substitution.
pub fn solve_lower_transpose<F: Scalar>(l: &Tensor<F>, y: &[F]) -> Vec<F> {
    let n = l.rows();
    assert_eq!(y.len(), n);
    let mut x = vec![F::zero(); n];
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in i + 1..n {
            s = s - l.at2(k, i) * x[k];
        }
        x[i] = s / l.at2(i, i);
    }
    x
}
