//! Small dense helpers shared by the estimators.

use nalgebra::DMatrix;

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Nearest PSD matrix in Frobenius norm: eigenvalues clipped at zero.
pub fn psd_project(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = symmetrize(m).symmetric_eigen();
    let clipped = eig.eigenvalues.map(|l| l.max(0.0));
    symmetrize(&(&eig.eigenvectors * DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose()))
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    symmetrize(m).symmetric_eigen().eigenvalues.min()
}

/// Kronecker product with index `p = i * b.nrows() + j`.
pub fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    a.kronecker(b)
}

pub fn trace(m: &DMatrix<f64>) -> f64 {
    m.diagonal().sum()
}

pub fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

pub fn from_row_major(rows: usize, cols: usize, data: &[f64]) -> crate::Result<DMatrix<f64>> {
    if data.len() != rows * cols {
        return Err(crate::Error::DimensionMismatch {
            expected: format!("{} entries", rows * cols),
            got: format!("{} entries", data.len()),
        });
    }
    Ok(DMatrix::from_row_slice(rows, cols, data))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kron_indexing() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let b = DMatrix::from_row_slice(2, 2, &[0.0, 5.0, 6.0, 7.0]);
        let k = kron(&a, &b);
        // (i, j) = (1, 0), (i', j') = (0, 1)
        assert_eq!(k[(2, 1)], a[(1, 0)] * b[(0, 1)]);
    }

    #[test]
    fn projection_clips_negative_eigenvalues() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        let p = psd_project(&m);
        assert!(min_eigenvalue(&p) > -1e-12);
        assert!((p[(0, 0)] - 1.5).abs() < 1e-12 && (p[(0, 1)] - 1.5).abs() < 1e-12);
    }
}
