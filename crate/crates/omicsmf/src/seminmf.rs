//! Single-layer Semi-NMF and greedy layer-wise pretraining.
//!
//! Semi-NMF factors a real matrix into an unconstrained basis times a
//! nonnegative coefficient matrix. Stacking factorizations greedily yields the
//! layer stack that both deep solvers start from.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

use crate::linalg::{negative_part, positive_part, product_chain, pseudo_inverse, DENOM_FLOOR};

/// Default iteration cap for a single factorization.
pub const DEFAULT_MAX_ITERS: usize = 500;
/// Default relative-loss-change stopping threshold.
pub const DEFAULT_TOL: f64 = 1e-6;

/// Coefficient floor at initialization; multiplicative updates cannot revive
/// an exactly zero entry.
const COEFF_INIT_FLOOR: f64 = 1e-6;

/// Seeded random coefficient restarts run after the deterministic SVD start.
/// Multiplicative updates stall in poor stationary points on some instances;
/// the best of the runs is returned.
const RANDOM_RESTARTS: usize = 4;

#[derive(Debug, Error)]
pub enum FactorizeError {
    #[error("rank {k} exceeds min(rows, cols) = {max}")]
    RankTooLarge { k: usize, max: usize },
    #[error("rank must be at least 1")]
    ZeroRank,
    #[error("input matrix contains non-finite entries")]
    NonFiniteInput,
    #[error("layer sizes must be strictly decreasing, got {0:?}")]
    NonDecreasingLayers(String),
    #[error("at least one layer size is required")]
    EmptyLayers,
}

/// The two factors of a Semi-NMF: an unconstrained basis and nonnegative
/// coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct SemiNmfFactors {
    /// `D x k`, unconstrained sign.
    pub basis: DMatrix<f64>,
    /// `k x N`, entrywise nonnegative.
    pub coefficients: DMatrix<f64>,
}

impl SemiNmfFactors {
    /// Frobenius norm of the reconstruction residual against `matrix`.
    pub fn residual(&self, matrix: &DMatrix<f64>) -> f64 {
        (matrix - &self.basis * &self.coefficients).norm()
    }
}

/// Factorizes `matrix ~ basis * coefficients` with `coefficients >= 0`.
///
/// The basis is refit by least squares and the coefficients by the
/// multiplicative rule built on the `(|M| +- M) / 2` split, so nonnegativity
/// is preserved exactly. Runs a deterministic SVD-based start plus a few
/// seeded random coefficient restarts and returns the best residual; the loss
/// trace is the winning run's per-iteration residual.
pub fn semi_nmf(
    matrix: &DMatrix<f64>,
    k: usize,
    max_iters: usize,
    tol: f64,
    seed: u64,
) -> Result<(SemiNmfFactors, Vec<f64>), FactorizeError> {
    if k == 0 {
        return Err(FactorizeError::ZeroRank);
    }
    let max_rank = matrix.nrows().min(matrix.ncols());
    if k > max_rank {
        return Err(FactorizeError::RankTooLarge { k, max: max_rank });
    }
    if matrix.iter().any(|x| !x.is_finite()) {
        return Err(FactorizeError::NonFiniteInput);
    }

    let mut best = run_from(matrix, init_from_svd(matrix, k), max_iters, tol);
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    for _ in 0..RANDOM_RESTARTS {
        let coefficients =
            DMatrix::from_fn(k, matrix.ncols(), |_, _| {
                rng.random_range(COEFF_INIT_FLOOR..1.0)
            });
        let basis = least_squares_basis(matrix, &coefficients);
        let candidate = run_from(
            matrix,
            SemiNmfFactors {
                basis,
                coefficients,
            },
            max_iters,
            tol,
        );
        let cur = *candidate.1.last().unwrap();
        if cur < *best.1.last().unwrap() {
            best = candidate;
        }
    }
    Ok(best)
}

fn run_from(
    matrix: &DMatrix<f64>,
    mut factors: SemiNmfFactors,
    max_iters: usize,
    tol: f64,
) -> (SemiNmfFactors, Vec<f64>) {
    let mut trace = vec![factors.residual(matrix)];
    for _ in 0..max_iters {
        factors.basis = least_squares_basis(matrix, &factors.coefficients);
        factors.coefficients =
            multiplicative_coefficient_step(matrix, &factors.basis, &factors.coefficients);

        let loss = factors.residual(matrix);
        let prev = *trace.last().expect("trace is never empty");
        trace.push(loss);
        if relative_change(prev, loss) < tol {
            break;
        }
    }
    (factors, trace)
}

/// Basis from the top-k left singular vectors scaled by singular values;
/// coefficients from the matching right singular vectors floored at a small
/// positive value so multiplicative updates can move every entry. Each
/// singular pair's sign is chosen so the right vector carries most of its
/// mass on the positive side, which loses less structure to the floor.
fn init_from_svd(matrix: &DMatrix<f64>, k: usize) -> SemiNmfFactors {
    let svd = matrix.clone().svd(true, true);
    let u = svd.u.expect("svd requested u");
    let v_t = svd.v_t.expect("svd requested v_t");
    let mut basis = DMatrix::zeros(matrix.nrows(), k);
    let mut coefficients = DMatrix::zeros(k, matrix.ncols());
    for j in 0..k {
        let row = v_t.row(j);
        let pos_mass: f64 = row.iter().map(|x| x.max(0.0)).sum();
        let neg_mass: f64 = row.iter().map(|x| (-x).max(0.0)).sum();
        let sign = if pos_mass >= neg_mass { 1.0 } else { -1.0 };
        basis.set_column(j, &(u.column(j) * (sign * svd.singular_values[j])));
        for c in 0..matrix.ncols() {
            coefficients[(j, c)] = (sign * row[c]).max(COEFF_INIT_FLOOR);
        }
    }
    SemiNmfFactors {
        basis,
        coefficients,
    }
}

/// Least-squares solution of `min_B ||X - B Q||_F` via the pseudo-inverse.
pub(crate) fn least_squares_basis(x: &DMatrix<f64>, q: &DMatrix<f64>) -> DMatrix<f64> {
    x * pseudo_inverse(q)
}

/// One multiplicative coefficient update:
/// `Q <- Q .* sqrt((B+ + C- Q) / (B- + C+ Q))` with `B = O^T X`, `C = O^T O`.
fn multiplicative_coefficient_step(
    x: &DMatrix<f64>,
    basis: &DMatrix<f64>,
    coeff: &DMatrix<f64>,
) -> DMatrix<f64> {
    let b = basis.transpose() * x;
    let c = basis.transpose() * basis;
    multiplicative_update(coeff, &b, &c)
}

/// Shared multiplicative rule for quadratic objectives
/// `Tr(A^T C A) - 2 Tr(A^T B)`: `A <- A .* sqrt((B+ + C- A) / (B- + C+ A))`.
pub(crate) fn multiplicative_update(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    c: &DMatrix<f64>,
) -> DMatrix<f64> {
    let numer = positive_part(b) + negative_part(c) * a;
    let denom = negative_part(b) + positive_part(c) * a;
    let mut out = a.clone();
    for (o, (n, d)) in out.iter_mut().zip(numer.iter().zip(denom.iter())) {
        *o *= (n / d.max(DENOM_FLOOR)).sqrt();
    }
    out
}

pub(crate) fn relative_change(prev: f64, cur: f64) -> f64 {
    (prev - cur).abs() / prev.abs().max(f64::MIN_POSITIVE)
}

/// Per-view layer stack: basis factors `z[i]` of shape `d_{i-1} x d_i` and
/// nonnegative latent representations `h[i]` of shape `d_i x N_v`.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorStack {
    view_name: String,
    z: Vec<DMatrix<f64>>,
    h: Vec<DMatrix<f64>>,
}

impl FactorStack {
    pub(crate) fn from_parts(
        view_name: impl Into<String>,
        z: Vec<DMatrix<f64>>,
        h: Vec<DMatrix<f64>>,
    ) -> Self {
        debug_assert_eq!(z.len(), h.len());
        Self {
            view_name: view_name.into(),
            z,
            h,
        }
    }

    pub fn view_name(&self) -> &str {
        &self.view_name
    }

    /// Number of layers `m`.
    pub fn depth(&self) -> usize {
        self.z.len()
    }

    pub fn basis(&self, layer: usize) -> &DMatrix<f64> {
        &self.z[layer]
    }

    pub fn latent(&self, layer: usize) -> &DMatrix<f64> {
        &self.h[layer]
    }

    /// Deepest latent representation `H_m`.
    pub fn top_latent(&self) -> &DMatrix<f64> {
        self.h.last().expect("stack has at least one layer")
    }

    pub(crate) fn set_basis(&mut self, layer: usize, m: DMatrix<f64>) {
        self.z[layer] = m;
    }

    pub(crate) fn set_latent(&mut self, layer: usize, m: DMatrix<f64>) {
        self.h[layer] = m;
    }

    pub(crate) fn bases(&self) -> &[DMatrix<f64>] {
        &self.z
    }

    /// Product `Z_1 Z_2 ... Z_upto` (1-based `upto`; 0 gives the identity on
    /// the view's feature dimension).
    pub(crate) fn basis_prefix(&self, upto: usize) -> DMatrix<f64> {
        product_chain(&self.z[..upto], self.z[0].nrows())
    }

    /// Product `Z_{from+1} ... Z_m H_m` (0-based `from`; `depth()` gives `H_m`
    /// itself).
    pub(crate) fn latent_suffix(&self, from: usize) -> DMatrix<f64> {
        let tail = product_chain(&self.z[from..], self.z.last().unwrap().ncols());
        tail * self.top_latent()
    }

    /// Linear reconstruction `Z_1 ... Z_m H_m`.
    pub fn reconstruction(&self) -> DMatrix<f64> {
        self.basis_prefix(self.depth()) * self.top_latent()
    }
}

/// Greedy layer-wise pretraining: factorize the input, then keep factorizing
/// the latest coefficient matrix down the (strictly decreasing) layer sizes.
pub fn pretrain_stack(
    view_name: &str,
    matrix: &DMatrix<f64>,
    layer_sizes: &[usize],
    seed: u64,
) -> Result<FactorStack, FactorizeError> {
    if layer_sizes.is_empty() {
        return Err(FactorizeError::EmptyLayers);
    }
    if layer_sizes.windows(2).any(|w| w[1] >= w[0]) {
        return Err(FactorizeError::NonDecreasingLayers(format!(
            "{layer_sizes:?}"
        )));
    }

    let mut z = Vec::with_capacity(layer_sizes.len());
    let mut h = Vec::with_capacity(layer_sizes.len());
    let mut current = matrix.clone();
    for &size in layer_sizes {
        let (factors, _) = semi_nmf(&current, size, DEFAULT_MAX_ITERS, DEFAULT_TOL, seed)?;
        current = factors.coefficients.clone();
        z.push(factors.basis);
        h.push(factors.coefficients);
    }
    Ok(FactorStack::from_parts(view_name, z, h))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn random_matrix(rng: &mut ChaCha20Rng, rows: usize, cols: usize) -> DMatrix<f64> {
        DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    fn random_nonneg(rng: &mut ChaCha20Rng, rows: usize, cols: usize) -> DMatrix<f64> {
        DMatrix::from_fn(rows, cols, |_, _| rng.random_range(0.0..1.0))
    }

    #[test]
    fn recovers_planted_product() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let o0 = random_matrix(&mut rng, 4, 2);
        let q0 = random_nonneg(&mut rng, 2, 6);
        let x = &o0 * &q0;
        let (factors, _) = semi_nmf(&x, 2, 500, 1e-10, 0).unwrap();
        assert!(factors.coefficients.iter().all(|&v| v >= 0.0));
        assert!(factors.residual(&x) < 1e-3 * x.norm());
    }

    /// SVD oracle: the unconstrained rank-k residual lower-bounds the
    /// Semi-NMF residual, and at full rank the solver gets essentially there.
    #[test]
    fn residual_against_svd_tail_at_full_rank() {
        for seed in 0..10 {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let x = random_matrix(&mut rng, 3, 3);
            let k = 3;
            let (factors, _) = semi_nmf(&x, k, 500, 1e-12, seed).unwrap();
            let residual = factors.residual(&x);

            let svd = x.clone().svd(false, false);
            let tail: f64 = svd
                .singular_values
                .iter()
                .skip(k)
                .map(|s| s * s)
                .sum::<f64>()
                .sqrt();
            assert!(residual >= tail - 1e-10);
            assert!(residual - tail <= 0.05 * x.norm(), "seed {seed}: {residual}");
        }
    }

    #[test]
    fn zero_matrix_has_zero_initial_residual() {
        let x = DMatrix::zeros(4, 5);
        let (factors, trace) = semi_nmf(&x, 2, 50, 1e-8, 0).unwrap();
        assert_eq!(trace[0], 0.0);
        assert!(factors.coefficients.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn rejects_bad_inputs() {
        let x = DMatrix::zeros(3, 4);
        assert!(matches!(
            semi_nmf(&x, 4, 10, 1e-6, 0),
            Err(FactorizeError::RankTooLarge { .. })
        ));
        assert!(matches!(
            semi_nmf(&x, 0, 10, 1e-6, 0),
            Err(FactorizeError::ZeroRank)
        ));
        let mut bad = x.clone();
        bad[(0, 0)] = f64::NAN;
        assert!(matches!(
            semi_nmf(&bad, 2, 10, 1e-6, 0),
            Err(FactorizeError::NonFiniteInput)
        ));
    }

    /// Loss trace non-increasing within 1e-8 per step, and coefficients stay
    /// nonnegative, across 100 random instances.
    #[test]
    fn trace_monotone_and_coefficients_nonnegative() {
        for seed in 0..100 {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let rows = rng.random_range(3..8);
            let cols = rng.random_range(3..8);
            let k = rng.random_range(1..=rows.min(cols));
            let x = random_matrix(&mut rng, rows, cols);
            let (factors, trace) = semi_nmf(&x, k, 30, 0.0, seed).unwrap();
            assert!(factors.coefficients.iter().all(|&v| v >= 0.0));
            for w in trace.windows(2) {
                assert!(
                    w[1] <= w[0] + 1e-8,
                    "trace increased: {} -> {} (seed {seed})",
                    w[0],
                    w[1]
                );
            }
        }
    }

    /// Direct least-squares oracle: the basis refit must reach the normal
    /// equation residual.
    #[test]
    fn basis_update_is_least_squares_optimal() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        for _ in 0..20 {
            let x = random_matrix(&mut rng, 6, 7);
            let q = random_nonneg(&mut rng, 3, 7);
            let basis = least_squares_basis(&x, &q);
            let residual = (&x - &basis * &q).norm();

            // Oracle: solve (Q Q^T) B^T = Q X^T row by row via LU.
            let gram = &q * q.transpose();
            let rhs = &q * x.transpose();
            let bt = gram.lu().solve(&rhs).expect("full-rank gram");
            let oracle_residual = (&x - bt.transpose() * &q).norm();
            assert!((residual - oracle_residual).abs() < 1e-8);
        }
    }

    #[test]
    fn single_layer_stack_equals_one_factorization() {
        let mut rng = ChaCha20Rng::seed_from_u64(21);
        let x = random_matrix(&mut rng, 10, 12);
        let stack = pretrain_stack("v", &x, &[3], 9).unwrap();
        let (factors, _) = semi_nmf(&x, 3, DEFAULT_MAX_ITERS, DEFAULT_TOL, 9).unwrap();
        assert_eq!(stack.depth(), 1);
        assert_eq!(stack.basis(0), &factors.basis);
        assert_eq!(stack.top_latent(), &factors.coefficients);
    }

    /// Triangle-inequality oracle computed from the stack itself.
    #[test]
    fn two_layer_stack_satisfies_triangle_bound() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let x = random_matrix(&mut rng, 20, 30);
        let stack = pretrain_stack("v", &x, &[8, 4], 0).unwrap();
        let z1 = stack.basis(0);
        let h1 = stack.latent(0);
        let z2 = stack.basis(1);
        let h2 = stack.latent(1);

        let full = (&x - stack.reconstruction()).norm();
        assert!(full.is_finite());
        let bound = (&x - z1 * h1).norm() + z1.norm() * (h1 - z2 * h2).norm();
        assert!(full <= bound + 1e-9);
    }

    #[test]
    fn stack_latents_stay_nonnegative() {
        for seed in 0..20 {
            let mut rng = ChaCha20Rng::seed_from_u64(seed + 100);
            let x = random_matrix(&mut rng, 12, 15);
            let stack = pretrain_stack("v", &x, &[6, 3], seed).unwrap();
            for layer in 0..stack.depth() {
                assert!(stack.latent(layer).iter().all(|&v| v >= 0.0));
            }
        }
    }

    #[test]
    fn rejects_non_decreasing_layers() {
        let x = DMatrix::zeros(6, 6);
        assert!(matches!(
            pretrain_stack("v", &x, &[3, 3], 0),
            Err(FactorizeError::NonDecreasingLayers(_))
        ));
        assert!(matches!(
            pretrain_stack("v", &x, &[], 0),
            Err(FactorizeError::EmptyLayers)
        ));
    }
}
