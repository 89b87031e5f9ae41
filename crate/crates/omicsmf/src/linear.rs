//! Linear multi-layer factorization with a consensus embedding.
//!
//! Each view's data is approximated by a chain of basis factors applied to a
//! nonnegative deepest latent, with a column-sparsity penalty on that latent
//! and a reconstruction penalty tying it to the columns of a shared consensus
//! embedding selected by the view's indicator. The four updates alternate:
//! basis layers by pseudo-inverse least squares, latents by multiplicative
//! rules, and the consensus by its closed-form minimizer.

use std::time::Instant;

use nalgebra::DMatrix;
use thiserror::Error;

use crate::data::{view_counts, DataError, IndicatorMatrix, MultiOmicsDataset};
use crate::linalg::pseudo_inverse;
use crate::report::{FitReport, Termination};
use crate::seminmf::{
    multiplicative_update, pretrain_stack, relative_change, FactorStack, FactorizeError,
};

#[derive(Debug, Error)]
pub enum SolverError {
    #[error(transparent)]
    Factorize(#[from] FactorizeError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("consensus normal matrix is singular: global sample {0} is covered by no view")]
    SingularNormalMatrix(usize),
    #[error("invalid solver configuration: {0}")]
    InvalidConfig(String),
    #[error("non-finite gradient at iteration {0}")]
    NonFiniteGradient(usize),
}

/// How indicator products are evaluated: exact column gather/scatter, or
/// dense multiplication by the materialized binary matrix. The two routes
/// agree to floating-point reduction order and exist so each can check the
/// other.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum IndicatorRoute {
    #[default]
    Gather,
    Dense,
}

/// Hyperparameters shared by both solvers.
#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    /// Column-sparsity weight on the deepest latents.
    pub lambda1: f64,
    /// Consensus-reconstruction weight.
    pub lambda2: f64,
    /// Strictly decreasing layer widths; the last is the consensus dimension.
    pub layer_sizes: Vec<usize>,
    pub max_iters: usize,
    pub tol: f64,
    pub seed: u64,
    /// Start the consensus from seeded Gaussian noise instead of the
    /// closed-form fit to the pretrained latents (ablation switch).
    pub random_consensus_init: bool,
    pub indicator_route: IndicatorRoute,
}

impl SolverConfig {
    pub fn new(layer_sizes: Vec<usize>, seed: u64) -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 1.0,
            layer_sizes,
            max_iters: 500,
            tol: 1e-6,
            seed,
            random_consensus_init: false,
            indicator_route: IndicatorRoute::Gather,
        }
    }

    pub fn validate(&self) -> Result<(), SolverError> {
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            return Err(SolverError::InvalidConfig(format!(
                "penalty weights must be nonnegative, got lambda1={} lambda2={}",
                self.lambda1, self.lambda2
            )));
        }
        if self.layer_sizes.is_empty() {
            return Err(SolverError::InvalidConfig(
                "layer_sizes must not be empty".to_string(),
            ));
        }
        if !self.tol.is_finite() || self.tol < 0.0 {
            return Err(SolverError::InvalidConfig(format!(
                "tol must be finite and nonnegative, got {}",
                self.tol
            )));
        }
        Ok(())
    }

    /// Consensus dimension (last layer width).
    pub fn embedding_dim(&self) -> usize {
        *self.layer_sizes.last().expect("validated nonempty")
    }
}

/// The shared embedding: one column per global sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsensusEmbedding {
    matrix: DMatrix<f64>,
    global_ids: Vec<String>,
}

impl ConsensusEmbedding {
    pub fn new(matrix: DMatrix<f64>, global_ids: Vec<String>) -> Result<Self, SolverError> {
        if matrix.ncols() != global_ids.len() {
            return Err(SolverError::ShapeMismatch(format!(
                "consensus has {} columns for {} global ids",
                matrix.ncols(),
                global_ids.len()
            )));
        }
        Ok(Self { matrix, global_ids })
    }

    /// `d x N` embedding matrix, columns aligned with `global_ids`.
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn global_ids(&self) -> &[String] {
        &self.global_ids
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn n_samples(&self) -> usize {
        self.matrix.ncols()
    }
}

/// `H * G` for one view under the configured route.
pub(crate) fn consensus_columns(
    h: &DMatrix<f64>,
    indicator: &IndicatorMatrix,
    route: IndicatorRoute,
) -> DMatrix<f64> {
    match route {
        IndicatorRoute::Gather => indicator.select_columns(h),
        IndicatorRoute::Dense => h * indicator.dense(),
    }
}

fn check_alignment(
    stacks: &[FactorStack],
    dataset: &MultiOmicsDataset,
    indicators: &[IndicatorMatrix],
) -> Result<(), SolverError> {
    if stacks.len() != dataset.n_views() || indicators.len() != dataset.n_views() {
        return Err(SolverError::ShapeMismatch(format!(
            "{} stacks / {} indicators for {} views",
            stacks.len(),
            indicators.len(),
            dataset.n_views()
        )));
    }
    for ((stack, view), indicator) in stacks.iter().zip(dataset.views()).zip(indicators) {
        if stack.view_name() != view.name() || indicator.view_name() != view.name() {
            return Err(SolverError::ShapeMismatch(format!(
                "stack `{}` / indicator `{}` paired with view `{}`",
                stack.view_name(),
                indicator.view_name(),
                view.name()
            )));
        }
        if stack.basis(0).nrows() != view.n_features()
            || stack.top_latent().ncols() != view.n_samples()
        {
            return Err(SolverError::ShapeMismatch(format!(
                "stack for `{}` does not match the view's {}x{} matrix",
                view.name(),
                view.n_features(),
                view.n_samples()
            )));
        }
    }
    Ok(())
}

/// Column-sparsity penalty `Tr(A A^T E)` with `E` all ones: the sum of
/// squared column sums.
fn sparsity_trace(a: &DMatrix<f64>) -> f64 {
    (0..a.ncols()).map(|j| a.column(j).sum().powi(2)).sum()
}

/// Full objective: per view, squared reconstruction residual plus
/// `lambda1 * Tr(H_m H_m^T E)` plus `lambda2 * ||H_m - H G||_F^2`.
pub fn linear_loss(
    stacks: &[FactorStack],
    consensus: &ConsensusEmbedding,
    dataset: &MultiOmicsDataset,
    indicators: &[IndicatorMatrix],
    config: &SolverConfig,
) -> Result<f64, SolverError> {
    check_alignment(stacks, dataset, indicators)?;
    let mut total = 0.0;
    for ((stack, view), indicator) in stacks.iter().zip(dataset.views()).zip(indicators) {
        let recon = (view.matrix() - stack.reconstruction()).norm_squared();
        let sparsity = sparsity_trace(stack.top_latent());
        let pulled = consensus_columns(consensus.matrix(), indicator, config.indicator_route);
        let consensus_term = (stack.top_latent() - pulled).norm_squared();
        total += recon + config.lambda1 * sparsity + config.lambda2 * consensus_term;
    }
    Ok(total)
}

/// Refits one basis layer to its least-squares optimum
/// `Z_i = phi^+ X Htilde_i^+` with `phi` the preceding basis product and
/// `Htilde_i` the trailing product ending in the deepest latent.
pub fn update_z(
    stack: &mut FactorStack,
    layer: usize,
    x: &DMatrix<f64>,
) -> Result<(), SolverError> {
    let m = stack.depth();
    if layer >= m {
        return Err(SolverError::ShapeMismatch(format!(
            "layer {layer} out of range for depth {m}"
        )));
    }
    let trailing = stack.latent_suffix(layer + 1);
    let trailing_pinv = pseudo_inverse(&trailing);
    let updated = if layer == 0 {
        x * trailing_pinv
    } else {
        pseudo_inverse(&stack.basis_prefix(layer)) * x * trailing_pinv
    };
    stack.set_basis(layer, updated);
    Ok(())
}

/// Multiplicative update of the deepest latent against the full basis chain,
/// the sparsity penalty, and the consensus pull. `consensus_cols` is `H G`
/// for this view.
pub fn update_hm(
    stack: &mut FactorStack,
    x: &DMatrix<f64>,
    consensus_cols: &DMatrix<f64>,
    lambda1: f64,
    lambda2: f64,
) -> Result<(), SolverError> {
    let m = stack.depth();
    let psi = stack.basis_prefix(m);
    let d = psi.ncols();
    if consensus_cols.nrows() != d || consensus_cols.ncols() != x.ncols() {
        return Err(SolverError::ShapeMismatch(format!(
            "consensus columns are {}x{}, expected {}x{}",
            consensus_cols.nrows(),
            consensus_cols.ncols(),
            d,
            x.ncols()
        )));
    }
    let b = psi.transpose() * x + consensus_cols * lambda2;
    let c = psi.transpose() * &psi
        + DMatrix::from_element(d, d, lambda1)
        + DMatrix::identity(d, d) * lambda2;
    let updated = multiplicative_update(stack.top_latent(), &b, &c);
    stack.set_latent(m - 1, updated);
    Ok(())
}

/// Multiplicative update of an intermediate latent against its layer-local
/// reconstruction `||X - Psi H_i||` with `Psi` the basis chain through layer
/// `i`.
pub fn update_hi(
    stack: &mut FactorStack,
    layer: usize,
    x: &DMatrix<f64>,
) -> Result<(), SolverError> {
    let m = stack.depth();
    if layer + 1 >= m {
        return Err(SolverError::ShapeMismatch(format!(
            "update_hi expects an intermediate layer, got {layer} of depth {m}"
        )));
    }
    let psi = stack.basis_prefix(layer + 1);
    let b = psi.transpose() * x;
    let c = psi.transpose() * psi;
    let updated = multiplicative_update(stack.latent(layer), &b, &c);
    stack.set_latent(layer, updated);
    Ok(())
}

/// Closed-form consensus update: scatter every view's deepest latent into the
/// global slots and divide each column by its view coverage count. This is
/// the exact minimizer of the summed consensus-reconstruction terms.
pub fn update_consensus(
    stacks: &[FactorStack],
    indicators: &[IndicatorMatrix],
    route: IndicatorRoute,
) -> Result<DMatrix<f64>, SolverError> {
    let n = indicators
        .first()
        .ok_or_else(|| SolverError::ShapeMismatch("no views".to_string()))?
        .n_global();
    let d = stacks
        .first()
        .ok_or_else(|| SolverError::ShapeMismatch("no stacks".to_string()))?
        .top_latent()
        .nrows();

    let counts = view_counts(indicators);
    if let Some(i) = counts.iter().position(|&c| c == 0) {
        return Err(SolverError::SingularNormalMatrix(i));
    }

    let mut numerator = DMatrix::zeros(d, n);
    for (stack, indicator) in stacks.iter().zip(indicators) {
        let hm = stack.top_latent();
        if hm.nrows() != d {
            return Err(SolverError::ShapeMismatch(format!(
                "deepest latents disagree on dimension: {} vs {}",
                hm.nrows(),
                d
            )));
        }
        match route {
            IndicatorRoute::Gather => numerator += indicator.scatter_columns(hm),
            IndicatorRoute::Dense => numerator += hm * indicator.dense().transpose(),
        }
    }
    for i in 0..n {
        let scale = 1.0 / counts[i] as f64;
        for r in 0..d {
            numerator[(r, i)] *= scale;
        }
    }
    Ok(numerator)
}

/// Everything `fit_linear` produces.
#[derive(Debug, Clone)]
pub struct LinearFit {
    pub stacks: Vec<FactorStack>,
    pub consensus: ConsensusEmbedding,
    pub report: FitReport,
}

pub(crate) fn initial_consensus_matrix(
    stacks: &[FactorStack],
    indicators: &[IndicatorMatrix],
    config: &SolverConfig,
    n: usize,
) -> Result<DMatrix<f64>, SolverError> {
    if config.random_consensus_init {
        use rand::SeedableRng;
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(config.seed);
        let d = config.embedding_dim();
        Ok(DMatrix::from_fn(d, n, |_, _| {
            StandardNormal.sample(&mut rng)
        }))
    } else {
        update_consensus(stacks, indicators, config.indicator_route)
    }
}

/// One full update cycle in the fixed order: per view, ascending layers
/// (basis then latent, the deepest latent last), then the consensus.
fn cycle(
    stacks: &mut [FactorStack],
    consensus: &mut DMatrix<f64>,
    dataset: &MultiOmicsDataset,
    indicators: &[IndicatorMatrix],
    config: &SolverConfig,
) -> Result<(), SolverError> {
    for (stack, (view, indicator)) in stacks
        .iter_mut()
        .zip(dataset.views().iter().zip(indicators))
    {
        let x = view.matrix();
        let pulled = consensus_columns(consensus, indicator, config.indicator_route);
        let m = stack.depth();
        for layer in 0..m {
            update_z(stack, layer, x)?;
            if layer + 1 < m {
                update_hi(stack, layer, x)?;
            } else {
                update_hm(stack, x, &pulled, config.lambda1, config.lambda2)?;
            }
        }
    }
    *consensus = update_consensus(stacks, indicators, config.indicator_route)?;
    Ok(())
}

/// Alternating solver: pretrain per-view stacks, fit the consensus, then
/// cycle the four updates until the relative loss change drops below `tol`
/// or `max_iters` cycles have run.
pub fn fit_linear(
    dataset: &MultiOmicsDataset,
    config: &SolverConfig,
) -> Result<LinearFit, SolverError> {
    config.validate()?;
    let started = Instant::now();
    let indicators = dataset.indicators()?;

    let mut stacks = Vec::with_capacity(dataset.n_views());
    for view in dataset.views() {
        stacks.push(pretrain_stack(
            view.name(),
            view.matrix(),
            &config.layer_sizes,
            config.seed,
        )?);
    }
    let mut consensus = initial_consensus_matrix(&stacks, &indicators, config, dataset.n_samples())?;

    let embedding = ConsensusEmbedding::new(consensus.clone(), dataset.global_ids().to_vec())?;
    let mut trace = vec![linear_loss(
        &stacks, &embedding, dataset, &indicators, config,
    )?];
    let mut termination = Termination::MaxIters;
    let mut iterations = 0;

    for _ in 0..config.max_iters {
        cycle(&mut stacks, &mut consensus, dataset, &indicators, config)?;
        iterations += 1;
        let embedding = ConsensusEmbedding::new(consensus.clone(), dataset.global_ids().to_vec())?;
        let loss = linear_loss(&stacks, &embedding, dataset, &indicators, config)?;
        let prev = *trace.last().unwrap();
        trace.push(loss);
        if relative_change(prev, loss) < config.tol {
            termination = Termination::Converged;
            break;
        }
    }

    Ok(LinearFit {
        stacks,
        consensus: ConsensusEmbedding::new(consensus, dataset.global_ids().to_vec())?,
        report: FitReport {
            loss_trace: trace,
            iterations,
            wall_clock_secs: started.elapsed().as_secs_f64(),
            termination,
            seed: config.seed,
        },
    })
}
