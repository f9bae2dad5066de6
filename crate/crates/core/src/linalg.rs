//! Small dense helpers shared by the constraint algebra, the solver and the
//! restricted refits.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// Relative tolerance below which a Gram–Schmidt residual column counts as
/// linearly dependent on the previous ones.
pub(crate) const RANK_TOL: f64 = 1e-10;

/// Orthonormal basis of the column space of `a` by modified Gram–Schmidt with
/// one re-orthogonalization pass.
///
/// Returns the basis together with the indices of the columns that were found
/// to be dependent on earlier columns.
pub(crate) fn orthonormal_columns(a: &DMatrix<f64>) -> (DMatrix<f64>, Vec<usize>) {
    let rows = a.nrows();
    let mut basis: Vec<DVector<f64>> = Vec::with_capacity(a.ncols());
    let mut dependent = Vec::new();
    for k in 0..a.ncols() {
        let original = a.column(k).into_owned();
        let scale = original.norm();
        if scale == 0.0 || !scale.is_finite() {
            dependent.push(k);
            continue;
        }
        let mut v = original;
        for _ in 0..2 {
            for q in &basis {
                let proj = q.dot(&v);
                v.axpy(-proj, q, 1.0);
            }
        }
        let norm = v.norm();
        if norm <= RANK_TOL * scale {
            dependent.push(k);
            continue;
        }
        v /= norm;
        basis.push(v);
    }
    let mut q = DMatrix::zeros(rows, basis.len());
    for (k, v) in basis.iter().enumerate() {
        q.set_column(k, v);
    }
    (q, dependent)
}

/// Orthonormal basis (as columns) of the orthogonal complement of the column
/// space spanned by the orthonormal columns `q` inside `R^dim`.
pub(crate) fn complement_basis(q: &DMatrix<f64>, dim: usize) -> DMatrix<f64> {
    if q.ncols() == 0 {
        return DMatrix::identity(dim, dim);
    }
    let projector = DMatrix::identity(dim, dim) - q * q.transpose();
    let eig = SymmetricEigen::new(projector);
    let keep: Vec<usize> = (0..dim).filter(|&k| eig.eigenvalues[k] > 0.5).collect();
    let mut n = DMatrix::zeros(dim, keep.len());
    for (c, &k) in keep.iter().enumerate() {
        n.set_column(c, &eig.eigenvectors.column(k));
    }
    n
}

pub(crate) fn inf_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

/// Rows `rows` of `m`, in the given order.
pub(crate) fn select_rows(m: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), m.ncols(), |i, j| m[(rows[i], j)])
}

pub(crate) fn select_columns(m: &DMatrix<f64>, cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), cols.len(), |i, j| m[(i, cols[j])])
}

pub(crate) fn select_entries(v: &DVector<f64>, idx: &[usize]) -> DVector<f64> {
    DVector::from_iterator(idx.len(), idx.iter().map(|&i| v[i]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gram_schmidt_detects_dependence() {
        let a = DMatrix::from_row_slice(3, 3, &[1.0, 2.0, 0.0, 1.0, 2.0, 1.0, 1.0, 2.0, 0.0]);
        let (q, dep) = orthonormal_columns(&a);
        assert_eq!(q.ncols(), 2);
        assert_eq!(dep, vec![1]);
        let qtq = q.transpose() * &q;
        assert!((qtq - DMatrix::identity(2, 2)).abs().max() < 1e-14);
    }

    #[test]
    fn complement_is_orthogonal() {
        let a = DMatrix::from_element(4, 1, 1.0);
        let (q, _) = orthonormal_columns(&a);
        let n = complement_basis(&q, 4);
        assert_eq!(n.ncols(), 3);
        assert!((q.transpose() * &n).abs().max() < 1e-12);
        assert!((n.transpose() * &n - DMatrix::identity(3, 3)).abs().max() < 1e-12);
    }
}
