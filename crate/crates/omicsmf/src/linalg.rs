//! Small shared matrix helpers for the factorization solvers.

use nalgebra::DMatrix;

/// Relative singular-value cutoff for pseudo-inverses: values below
/// `PINV_RTOL * sigma_max` are treated as zero.
pub(crate) const PINV_RTOL: f64 = 1e-10;

/// Floor applied to denominators of multiplicative update rules.
pub(crate) const DENOM_FLOOR: f64 = 1e-12;

/// Entrywise positive part `(|M| + M) / 2`.
pub(crate) fn positive_part(m: &DMatrix<f64>) -> DMatrix<f64> {
    m.map(|x| if x > 0.0 { x } else { 0.0 })
}

/// Entrywise negative part `(|M| - M) / 2`, itself nonnegative.
pub(crate) fn negative_part(m: &DMatrix<f64>) -> DMatrix<f64> {
    m.map(|x| if x < 0.0 { -x } else { 0.0 })
}

/// Moore-Penrose pseudo-inverse with a relative singular-value cutoff.
pub(crate) fn pseudo_inverse(m: &DMatrix<f64>) -> DMatrix<f64> {
    let svd = m.clone().svd(true, true);
    let sigma_max = svd.singular_values.max();
    let eps = if sigma_max > 0.0 {
        PINV_RTOL * sigma_max
    } else {
        f64::MIN_POSITIVE
    };
    svd.pseudo_inverse(eps)
        .expect("pseudo-inverse cutoff is nonnegative")
}

/// Product of a slice of matrices; `identity_dim` is used when the slice is
/// empty.
pub(crate) fn product_chain(mats: &[DMatrix<f64>], identity_dim: usize) -> DMatrix<f64> {
    match mats.split_first() {
        None => DMatrix::identity(identity_dim, identity_dim),
        Some((first, rest)) => rest.iter().fold(first.clone(), |acc, m| acc * m),
    }
}
