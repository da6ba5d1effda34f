//! Dense symmetric-matrix helpers shared by the estimators.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::{Error, Result};

/// Largest absolute entry of `A - Aᵀ`.
pub fn max_asymmetry(a: &DMatrix<f64>) -> f64 {
    let n = a.nrows();
    let mut worst = 0.0f64;
    for j in 0..n {
        for i in (j + 1)..n {
            worst = worst.max((a[(i, j)] - a[(j, i)]).abs());
        }
    }
    worst
}

/// Replaces `a` with `(a + aᵀ) / 2` in place.
pub fn symmetrize(a: &mut DMatrix<f64>) {
    let n = a.nrows();
    for j in 0..n {
        for i in (j + 1)..n {
            let m = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = m;
            a[(j, i)] = m;
        }
    }
}

pub fn ensure_square(a: &DMatrix<f64>) -> Result<()> {
    if a.nrows() != a.ncols() {
        return Err(Error::Shape {
            expected: (a.nrows(), a.nrows()),
            found: a.shape(),
        });
    }
    Ok(())
}

/// Eigendecomposition of a symmetric matrix, eigenvalues ascending.
pub fn sym_eigen(a: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(a.clone());
    let n = eig.eigenvalues.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    (values, vectors)
}

/// `Q diag(values) Qᵀ`, symmetrized.
pub fn recompose(vectors: &DMatrix<f64>, values: &DVector<f64>) -> DMatrix<f64> {
    let mut scaled = vectors.clone();
    for (j, &v) in values.iter().enumerate() {
        scaled.column_mut(j).scale_mut(v);
    }
    let mut out = scaled * vectors.transpose();
    symmetrize(&mut out);
    out
}

pub fn min_eigenvalue(a: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(a.clone())
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// Cholesky succeeds, i.e. the matrix is numerically positive definite.
pub fn is_positive_definite(a: &DMatrix<f64>) -> bool {
    a.clone().cholesky().is_some()
}

/// Sample covariance of the rows of `x` about their row means, divisor `T`.
pub fn centered_covariance(x: &DMatrix<f64>) -> DMatrix<f64> {
    let t = x.ncols();
    let centered = center_rows(x);
    let mut s = &centered * centered.transpose() / t as f64;
    symmetrize(&mut s);
    s
}

/// Subtracts each row's mean from that row.
pub fn center_rows(x: &DMatrix<f64>) -> DMatrix<f64> {
    let t = x.ncols() as f64;
    let mut out = x.clone();
    for mut row in out.row_iter_mut() {
        let mean = row.sum() / t;
        row.add_scalar_mut(-mean);
    }
    out
}

/// Cross-covariance `(1/T) A H Bᵀ` between the rows of `a` and `b`.
pub fn cross_covariance(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let t = a.ncols() as f64;
    center_rows(a) * center_rows(b).transpose() / t
}

/// Symmetric square root of a PSD matrix, negative eigenvalues clipped to zero.
pub fn sqrt_psd(a: &DMatrix<f64>) -> DMatrix<f64> {
    let (values, vectors) = sym_eigen(a);
    recompose(&vectors, &values.map(|v| v.max(0.0).sqrt()))
}

/// Symmetric inverse square root of a positive definite matrix.
pub fn inverse_sqrt_pd(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (values, vectors) = sym_eigen(a);
    if values[0] <= 0.0 {
        return Err(Error::Domain(format!(
            "inverse square root needs a positive definite matrix (min eigenvalue {:e})",
            values[0]
        )));
    }
    Ok(recompose(&vectors, &values.map(|v| 1.0 / v.sqrt())))
}

/// Frobenius-norm relative difference `‖a - b‖ / ‖b‖`.
pub fn relative_frobenius(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eigen_is_sorted_and_recomposes() {
        let a = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 1.0]);
        let (values, vectors) = sym_eigen(&a);
        assert!(values[0] <= values[1] && values[1] <= values[2]);
        assert!((recompose(&vectors, &values) - &a).norm() < 1e-12);
    }

    #[test]
    fn covariance_uses_divisor_t() {
        let x = DMatrix::from_row_slice(1, 2, &[1.0, -1.0]);
        assert_eq!(centered_covariance(&x)[(0, 0)], 1.0);
    }

    #[test]
    fn inverse_sqrt_of_diagonal() {
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 9.0]));
        let w = inverse_sqrt_pd(&a).unwrap();
        assert!((w[(0, 0)] - 0.5).abs() < 1e-14);
        assert!((w[(1, 1)] - 1.0 / 3.0).abs() < 1e-14);
        assert!(w[(0, 1)].abs() < 1e-14);
    }
}
