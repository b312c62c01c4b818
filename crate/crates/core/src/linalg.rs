//! Thin wrappers around nalgebra for the few dense factorizations we need:
//! symmetric eigendecomposition, singular values, and linear solves.

use nalgebra::{DMatrix, DVector};

use crate::error::{OlmError, Result};
use crate::ndgrad::Tensor;

pub(crate) fn to_dmatrix(t: &Tensor) -> DMatrix<f64> {
    assert_eq!(t.rank(), 2, "expected rank-2 tensor");
    DMatrix::from_row_slice(t.shape()[0], t.shape()[1], t.data())
}

pub(crate) fn from_dmatrix(m: &DMatrix<f64>) -> Tensor {
    let (r, c) = m.shape();
    let mut data = Vec::with_capacity(r * c);
    for i in 0..r {
        for j in 0..c {
            data.push(m[(i, j)]);
        }
    }
    Tensor::from_raw(vec![r, c], data)
}

/// Eigenpairs of a symmetric matrix, eigenvalue-descending. Returns
/// `(values, vectors)` with eigenvectors as columns of the tensor.
pub fn sym_eig_desc(a: &Tensor) -> (Vec<f64>, Tensor) {
    let m = to_dmatrix(a);
    let n = m.nrows();
    let se = m.symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| se.eigenvalues[j].partial_cmp(&se.eigenvalues[i]).unwrap());
    let values: Vec<f64> = order.iter().map(|&i| se.eigenvalues[i]).collect();
    let mut vectors = DMatrix::zeros(n, n);
    for (col, &i) in order.iter().enumerate() {
        vectors.set_column(col, &se.eigenvectors.column(i));
    }
    (values, from_dmatrix(&vectors))
}

/// Singular values of a rank-2 tensor, descending.
pub fn singular_values(a: &Tensor) -> Vec<f64> {
    let m = to_dmatrix(a);
    let svd = m.svd(false, false);
    let mut s: Vec<f64> = svd.singular_values.iter().copied().collect();
    s.sort_by(|x, y| y.partial_cmp(x).unwrap());
    s
}

/// Solves `A x = b` for square `A`.
pub fn solve(a: &Tensor, b: &[f64]) -> Result<Vec<f64>> {
    let m = to_dmatrix(a);
    let rhs = DVector::from_column_slice(b);
    m.lu()
        .solve(&rhs)
        .map(|x| x.as_slice().to_vec())
        .ok_or_else(|| OlmError::Singular("linear solve".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eig_of_correlated_gaussian_covariance() {
        let c = Tensor::from_rows(&[vec![1.0, 0.8], vec![0.8, 1.0]]);
        let (vals, vecs) = sym_eig_desc(&c);
        assert!((vals[0] - 1.8).abs() < 1e-12);
        assert!((vals[1] - 0.2).abs() < 1e-12);
        // Leading eigenvector along (1, 1)/sqrt(2), up to sign.
        let v = [vecs.data()[0], vecs.data()[2]];
        assert!((v[0].abs() - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert!((v[0] - v[1]).abs() < 1e-12);
    }

    #[test]
    fn solve_matches_known_inverse() {
        let a = Tensor::from_rows(&[vec![2.0, 0.0], vec![0.0, 4.0]]);
        let x = solve(&a, &[1.0, 1.0]).unwrap();
        assert!((x[0] - 0.5).abs() < 1e-14);
        assert!((x[1] - 0.25).abs() < 1e-14);
    }

    #[test]
    fn singular_values_of_orthonormal_are_ones() {
        let q = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 0.0]]);
        let s = singular_values(&q);
        assert!((s[0] - 1.0).abs() < 1e-12 && (s[1] - 1.0).abs() < 1e-12);
    }
}
