//! Small dense helpers for the d×d systems that appear everywhere
//! (d is the representation rank, typically 2..8).

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Cholesky factor of a symmetric positive-definite matrix.
pub fn cholesky(m: &DMatrix<f64>) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    m.clone()
        .cholesky()
        .ok_or_else(|| Error::Numeric("matrix is not positive definite".into()))
}

pub fn spd_solve(m: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    Ok(cholesky(m)?.solve(b))
}

/// `sqrt(x^T M^{-1} x)` for SPD `M`.
pub fn inverse_norm(m: &DMatrix<f64>, x: &[f64]) -> Result<f64> {
    let chol = cholesky(m)?;
    Ok(inverse_norm_with(&chol, x))
}

pub fn inverse_norm_with(chol: &nalgebra::Cholesky<f64, nalgebra::Dyn>, x: &[f64]) -> f64 {
    let v = DVector::from_column_slice(x);
    let y = chol.solve(&v);
    v.dot(&y).max(0.0).sqrt()
}

/// Ratio of extreme eigenvalues of a symmetric matrix.
pub fn condition_number(m: &DMatrix<f64>) -> f64 {
    let eig = SymmetricEigen::new(m.clone());
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(m.clone()).eigenvalues.min()
}

/// Largest `x^T A x / x^T B x` over x, with `B` possibly singular.
///
/// B is restricted to the span of its eigenvectors with eigenvalue above
/// `threshold`. If `A` puts mass outside that span the ratio is unbounded and
/// `f64::INFINITY` is returned.
pub fn max_generalized_eigenvalue(a: &DMatrix<f64>, b: &DMatrix<f64>, threshold: f64) -> f64 {
    let d = b.nrows();
    let eig = SymmetricEigen::new(b.clone());
    let keep: Vec<usize> = (0..d).filter(|&i| eig.eigenvalues[i] > threshold).collect();

    let mut basis = DMatrix::<f64>::zeros(d, keep.len());
    for (j, &i) in keep.iter().enumerate() {
        basis.set_column(j, &eig.eigenvectors.column(i));
    }
    let projector = &basis * basis.transpose();
    let complement = DMatrix::<f64>::identity(d, d) - projector;
    let leaked = &complement * a * &complement;
    if leaked.abs().max() > threshold {
        return f64::INFINITY;
    }
    if keep.is_empty() {
        return 0.0;
    }

    let mut whiten = basis.clone();
    for (j, &i) in keep.iter().enumerate() {
        let scale = 1.0 / eig.eigenvalues[i].sqrt();
        whiten.column_mut(j).scale_mut(scale);
    }
    let reduced = whiten.transpose() * a * &whiten;
    let reduced = (&reduced + reduced.transpose()) * 0.5;
    SymmetricEigen::new(reduced).eigenvalues.max()
}
