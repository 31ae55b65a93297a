//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Symmetric eigendecomposition with eigenvalues sorted in descending order.
///
/// The input is symmetrized as `(A + Aᵀ)/2` first. Ties keep the solver's
/// original relative order.
pub fn symmetric_eigen_desc(a: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "symmetric_eigen_desc on a non-square matrix");
    if n == 0 {
        return (DVector::zeros(0), DMatrix::zeros(0, 0));
    }
    let sym = symmetrize(a);
    let eig = sym.symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        eig.eigenvalues[j]
            .partial_cmp(&eig.eigenvalues[i])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    (values, vectors)
}

pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

/// Flips column signs so the first entry with magnitude above `tol` is positive.
pub fn canonicalize_first_nonzero(u: &mut DMatrix<f64>) {
    for mut col in u.column_iter_mut() {
        let scale = col.amax();
        let tol = 1e-12 * scale.max(f64::MIN_POSITIVE);
        if let Some(first) = col.iter().copied().find(|v| v.abs() > tol) {
            if first < 0.0 {
                col.neg_mut();
            }
        }
    }
}

/// Flips column signs so the largest-magnitude entry is positive.
/// The first index wins exact magnitude ties.
pub fn canonicalize_largest_abs(u: &mut DMatrix<f64>) {
    for mut col in u.column_iter_mut() {
        let mut best = 0.0f64;
        let mut sign = 1.0;
        for &v in col.iter() {
            if v.abs() > best {
                best = v.abs();
                sign = v.signum();
            }
        }
        if sign < 0.0 {
            col.neg_mut();
        }
    }
}

/// Largest absolute entry of `UᵀU − I`.
pub fn orthonormality_defect(u: &DMatrix<f64>) -> f64 {
    let gram = u.transpose() * u;
    let eye = DMatrix::<f64>::identity(gram.nrows(), gram.ncols());
    (gram - eye).amax()
}

pub fn ensure_orthonormal(u: &DMatrix<f64>, tol: f64, what: &str) -> Result<()> {
    let defect = orthonormality_defect(u);
    if defect.is_finite() && defect <= tol {
        Ok(())
    } else {
        Err(Error::Precondition(format!(
            "{what} is not orthonormal (max |UᵀU − I| = {defect:.3e} > {tol:.0e})"
        )))
    }
}

/// Largest absolute asymmetry `|A − Aᵀ|`.
pub fn asymmetry(a: &DMatrix<f64>) -> f64 {
    (a - a.transpose()).amax()
}

/// Left singular vectors of `b` ordered by descending singular value, with
/// each column's largest-magnitude entry made positive.
pub fn left_singular_basis(b: &DMatrix<f64>) -> DMatrix<f64> {
    let k = b.ncols().min(b.nrows());
    let svd = b.clone().svd(true, false);
    let u = svd.u.expect("requested U");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| {
        svd.singular_values[j]
            .partial_cmp(&svd.singular_values[i])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut basis = DMatrix::zeros(b.nrows(), k);
    for (dst, &src) in order.iter().take(k).enumerate() {
        basis.set_column(dst, &u.column(src));
    }
    canonicalize_largest_abs(&mut basis);
    basis
}

/// Singular values in descending order.
pub fn singular_values_desc(b: &DMatrix<f64>) -> Vec<f64> {
    let mut s: Vec<f64> = b.singular_values().iter().copied().collect();
    s.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    s
}

/// Ratio of extreme singular values; infinite for a singular matrix.
pub fn condition_number(b: &DMatrix<f64>) -> f64 {
    let s = singular_values_desc(b);
    match (s.first(), s.last()) {
        (Some(&hi), Some(&lo)) if lo > 0.0 => hi / lo,
        (Some(_), Some(_)) => f64::INFINITY,
        _ => 1.0,
    }
}

/// Projector `U Uᵀ`.
pub fn projector(u: &DMatrix<f64>) -> DMatrix<f64> {
    u * u.transpose()
}

/// Spectral norm of a symmetric matrix: the largest absolute eigenvalue.
pub fn symmetric_spectral_norm(a: &DMatrix<f64>) -> f64 {
    let (values, _) = symmetric_eigen_desc(a);
    values.iter().fold(0.0f64, |acc, v| acc.max(v.abs()))
}

/// Symmetric inverse square root of a positive definite matrix.
pub fn inverse_sqrt_spd(a: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let (values, vectors) = symmetric_eigen_desc(a);
    let max = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if values.iter().any(|&v| !(v > 1e-12 * max.max(f64::MIN_POSITIVE))) {
        return Err(Error::Singular(format!("{what} is not positive definite")));
    }
    let d = DMatrix::from_diagonal(&values.map(|v| 1.0 / v.sqrt()));
    Ok(&vectors * d * vectors.transpose())
}

/// Least-squares solve of `X β = y` for a full-column-rank design.
pub fn least_squares(x: &DMatrix<f64>, y: &DVector<f64>, what: &str) -> Result<DVector<f64>> {
    if x.nrows() < x.ncols() {
        return Err(Error::Singular(format!(
            "{what}: {} rows cannot determine {} coefficients",
            x.nrows(),
            x.ncols()
        )));
    }
    let s = singular_values_desc(x);
    let (hi, lo) = (s[0], *s.last().unwrap_or(&0.0));
    if !(lo > 1e-10 * hi) {
        return Err(Error::Singular(format!("{what}: design matrix is rank deficient")));
    }
    let qr = x.clone().qr();
    let qty = qr.q().transpose() * y;
    qr.r()
        .solve_upper_triangular(&qty)
        .ok_or_else(|| Error::Singular(format!("{what}: triangular solve failed")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eigen_sorted_descending() {
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 3.0, 2.0]));
        let (vals, vecs) = symmetric_eigen_desc(&a);
        assert_eq!(vals.as_slice(), &[3.0, 2.0, 1.0]);
        assert!((vecs[(1, 0)].abs() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn largest_abs_sign_rule() {
        let mut u = DMatrix::from_column_slice(3, 1, &[0.1, -0.9, 0.2]);
        canonicalize_largest_abs(&mut u);
        assert!(u[(1, 0)] > 0.0);
    }

    #[test]
    fn first_nonzero_sign_rule() {
        let mut u = DMatrix::from_column_slice(3, 1, &[0.0, -0.6, 0.8]);
        canonicalize_first_nonzero(&mut u);
        assert!(u[(1, 0)] > 0.0 && u[(2, 0)] < 0.0);
    }

    #[test]
    fn least_squares_rejects_rank_deficient() {
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 2.0, 4.0, 3.0, 6.0]);
        let y = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        assert!(least_squares(&x, &y, "test").is_err());
    }
}
