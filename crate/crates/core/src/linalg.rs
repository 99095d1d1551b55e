//! Small dense kernels shared by the structured algorithms.

use nalgebra::{DMatrix, DVector};

use crate::error::{MlrError, Result};

/// Symmetric eigendecomposition with eigenvalues sorted in descending order
/// and each eigenvector's first non-negligible entry made positive.
///
/// The input is symmetrized as `(A + Aᵀ) / 2` first.
pub fn sym_eigen(a: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = a.nrows();
    if n == 0 {
        return (DVector::zeros(0), DMatrix::zeros(0, 0));
    }
    let sym = (a + a.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = DMatrix::zeros(n, n);
    for (c, &i) in order.iter().enumerate() {
        let mut col = eig.eigenvectors.column(i).clone_owned();
        let scale = col.amax();
        if let Some(first) = col.iter().find(|v| v.abs() > 1e-12 * scale) {
            if *first < 0.0 {
                col.neg_mut();
            }
        }
        vectors.set_column(c, &col);
    }
    (values, vectors)
}

/// `Q diag(f(λ)) Qᵀ`.
pub fn spectral_map(
    values: &DVector<f64>,
    vectors: &DMatrix<f64>,
    f: impl Fn(f64) -> f64,
) -> DMatrix<f64> {
    let mut scaled = vectors.clone();
    for (j, mut col) in scaled.column_iter_mut().enumerate() {
        col *= f(values[j]);
    }
    scaled * vectors.transpose()
}

/// Solves `A X = B` for symmetric positive definite `A`.
pub fn spd_solve(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sym = (a + a.transpose()) * 0.5;
    let chol = sym
        .cholesky()
        .ok_or_else(|| MlrError::Singular("matrix is not positive definite".into()))?;
    Ok(chol.solve(b))
}

/// `log det A` for symmetric positive definite `A`.
pub fn spd_logdet(a: &DMatrix<f64>) -> Result<f64> {
    let sym = (a + a.transpose()) * 0.5;
    let chol = sym
        .cholesky()
        .ok_or_else(|| MlrError::Singular("matrix is not positive definite".into()))?;
    Ok(2.0
        * chol
            .l_dirty()
            .diagonal()
            .iter()
            .map(|v| v.ln())
            .sum::<f64>())
}

/// Unpivoted `A = R V Rᵀ` with `R` unit lower triangular and `V` diagonal.
/// Returns `None` if a pivot is not strictly positive.
pub fn ldl(a: &DMatrix<f64>) -> Option<(DMatrix<f64>, DVector<f64>)> {
    let n = a.nrows();
    let mut work = (a + a.transpose()) * 0.5;
    let mut r = DMatrix::identity(n, n);
    let mut v = DVector::zeros(n);
    // Right-looking elimination.
    for k in 0..n {
        let pivot = work[(k, k)];
        if !(pivot > 0.0) {
            return None;
        }
        v[k] = pivot;
        for i in k + 1..n {
            r[(i, k)] = work[(i, k)] / pivot;
        }
        for j in k + 1..n {
            let rjk = r[(j, k)];
            for i in j..n {
                let update = r[(i, k)] * rjk * pivot;
                work[(i, j)] -= update;
                work[(j, i)] = work[(i, j)];
            }
        }
    }
    Some((r, v))
}

/// Relative Frobenius distance `‖a − b‖_F / ‖b‖_F` (absolute when `b = 0`).
pub fn rel_frobenius(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let diff = (a - b).norm();
    let scale = b.norm();
    if scale > 0.0 {
        diff / scale
    } else {
        diff
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn eigen_is_sorted_and_sign_fixed() {
        let a = DMatrix::from_row_slice(3, 3, &[2.0, 1.0, 0.0, 1.0, 3.0, 1.0, 0.0, 1.0, 4.0]);
        let (vals, vecs) = sym_eigen(&a);
        assert!(vals[0] >= vals[1] && vals[1] >= vals[2]);
        for c in vecs.column_iter() {
            assert!(c.iter().find(|v| v.abs() > 1e-12).unwrap() > &0.0);
        }
        let back = spectral_map(&vals, &vecs, |x| x);
        assert_relative_eq!(back, a, epsilon = 1e-12);
    }

    #[test]
    fn ldl_reconstructs() {
        let a = DMatrix::from_row_slice(3, 3, &[4.0, 2.0, 0.4, 2.0, 5.0, 1.0, 0.4, 1.0, 3.0]);
        let (r, v) = ldl(&a).unwrap();
        let back = &r * DMatrix::from_diagonal(&v) * r.transpose();
        assert_relative_eq!(back, a, epsilon = 1e-12);
        for i in 0..3 {
            assert_eq!(r[(i, i)], 1.0);
        }
        assert!(ldl(&DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0])).is_none());
    }

    #[test]
    fn spd_helpers() {
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let x = spd_solve(&a, &DMatrix::identity(2, 2)).unwrap();
        assert_relative_eq!(&a * x, DMatrix::identity(2, 2), epsilon = 1e-12);
        assert_relative_eq!(spd_logdet(&a).unwrap(), (1.75f64).ln(), epsilon = 1e-12);
    }
}
