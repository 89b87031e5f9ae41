//! Nonlinear multi-layer factorization solved by projected gradient descent.
//!
//! The reconstruction threads each view's deepest latent through the basis
//! chain with an elementwise nonnegative activation between layers (none
//! after the outermost basis). Intermediate latents are defined by the
//! forward recursion rather than treated as free variables; the free
//! parameters are the basis factors, the deepest latents, and the consensus.
//! All parameters share one step size per iteration, found by backtracking on
//! the global loss, and the deepest latents are clamped at zero after each
//! step.

use std::time::Instant;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::{IndicatorMatrix, MultiOmicsDataset};
use crate::linear::{
    consensus_columns, ConsensusEmbedding, IndicatorRoute, SolverConfig, SolverError,
};
use crate::report::{FitReport, Termination};
use crate::seminmf::{pretrain_stack, relative_change, FactorStack};

/// Elementwise activation between layers. All variants map into the
/// nonnegative reals so intermediate latents stay nonnegative, and all have a
/// finite derivative everywhere (relu takes subgradient 0 at 0).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Sigmoid,
    Softplus,
    Relu,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Sigmoid => {
                if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                }
            }
            Activation::Softplus => x.max(0.0) + (-x.abs()).exp().ln_1p(),
            Activation::Relu => x.max(0.0),
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Sigmoid => {
                let s = self.apply(x);
                s * (1.0 - s)
            }
            Activation::Softplus => Activation::Sigmoid.apply(x),
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    fn map(self, m: &DMatrix<f64>) -> DMatrix<f64> {
        m.map(|x| self.apply(x))
    }

    fn map_derivative(self, m: &DMatrix<f64>) -> DMatrix<f64> {
        m.map(|x| self.derivative(x))
    }
}

impl std::str::FromStr for Activation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "sigmoid" => Ok(Activation::Sigmoid),
            "softplus" => Ok(Activation::Softplus),
            "relu" => Ok(Activation::Relu),
            other => Err(format!(
                "unknown activation `{other}` (expected sigmoid, softplus, or relu)"
            )),
        }
    }
}

/// Gradient-descent settings on top of the shared solver configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct NonlinearSolverConfig {
    pub base: SolverConfig,
    pub activation: Activation,
    /// Step size tried first on every iteration.
    pub alpha0: f64,
    /// Backtracking shrink factor in (0, 1).
    pub backtrack: f64,
    /// Step size below which backtracking gives up.
    pub min_step: f64,
}

impl NonlinearSolverConfig {
    pub fn new(layer_sizes: Vec<usize>, seed: u64) -> Self {
        Self {
            base: SolverConfig::new(layer_sizes, seed),
            activation: Activation::Sigmoid,
            alpha0: 1e-2,
            backtrack: 0.5,
            min_step: 1e-10,
        }
    }

    pub fn validate(&self) -> Result<(), SolverError> {
        self.base.validate()?;
        if !(self.alpha0 > 0.0) {
            return Err(SolverError::InvalidConfig(format!(
                "alpha0 must be positive, got {}",
                self.alpha0
            )));
        }
        if !(self.backtrack > 0.0 && self.backtrack < 1.0) {
            return Err(SolverError::InvalidConfig(format!(
                "backtracking factor must lie in (0, 1), got {}",
                self.backtrack
            )));
        }
        if !(self.min_step > 0.0) {
            return Err(SolverError::InvalidConfig(format!(
                "min_step must be positive, got {}",
                self.min_step
            )));
        }
        Ok(())
    }
}

/// Forward pass for one view: pre-activations feeding each intermediate
/// latent, the activated latents, and the reconstruction.
struct Forward {
    /// `pre[j]` = `Z_{j+1} H_{j+1}` for `j` in `1..m` (input to latent `j-1`).
    pre: Vec<DMatrix<f64>>,
    /// `latents[i]` = activated latent `H_i`; `latents[m-1]` is the free
    /// deepest latent itself.
    latents: Vec<DMatrix<f64>>,
    reconstruction: DMatrix<f64>,
}

fn forward_view(stack: &FactorStack, activation: Activation) -> Forward {
    let m = stack.depth();
    let mut latents = vec![DMatrix::zeros(0, 0); m];
    let mut pre = vec![DMatrix::zeros(0, 0); m];
    latents[m - 1] = stack.top_latent().clone();
    for j in (1..m).rev() {
        pre[j] = stack.basis(j) * &latents[j];
        latents[j - 1] = activation.map(&pre[j]);
    }
    let reconstruction = stack.basis(0) * &latents[0];
    Forward {
        pre,
        latents,
        reconstruction,
    }
}

/// Writes the forward-recursion latents back into the stack so the returned
/// factors are consistent with the nonlinear model.
fn refresh_intermediate_latents(stack: &mut FactorStack, activation: Activation) {
    let fwd = forward_view(stack, activation);
    for (i, latent) in fwd.latents.into_iter().enumerate().take(stack.depth() - 1) {
        stack.set_latent(i, latent);
    }
}

/// Objective with the nonlinear reconstruction plus the same sparsity and
/// consensus terms as the linear solver.
pub fn nonlinear_loss(
    stacks: &[FactorStack],
    consensus: &ConsensusEmbedding,
    dataset: &MultiOmicsDataset,
    indicators: &[IndicatorMatrix],
    config: &NonlinearSolverConfig,
) -> Result<f64, SolverError> {
    let mut total = 0.0;
    for ((stack, view), indicator) in stacks.iter().zip(dataset.views()).zip(indicators) {
        let fwd = forward_view(stack, config.activation);
        let recon = (view.matrix() - &fwd.reconstruction).norm_squared();
        let hm = stack.top_latent();
        let sparsity: f64 = (0..hm.ncols()).map(|j| hm.column(j).sum().powi(2)).sum();
        let pulled = consensus_columns(
            consensus.matrix(),
            indicator,
            config.base.indicator_route,
        );
        let consensus_term = (hm - pulled).norm_squared();
        total += recon + config.base.lambda1 * sparsity + config.base.lambda2 * consensus_term;
    }
    if !total.is_finite() {
        return Err(SolverError::NonFiniteGradient(0));
    }
    Ok(total)
}

/// Gradients of the full objective for every free parameter.
#[derive(Debug, Clone)]
pub struct Gradients {
    /// Per view: gradients for each basis layer.
    pub basis: Vec<Vec<DMatrix<f64>>>,
    /// Per view: gradient for the deepest latent.
    pub top_latent: Vec<DMatrix<f64>>,
    /// Gradient for the consensus embedding.
    pub consensus: DMatrix<f64>,
}

/// Reverse-mode gradients through the nested activations.
pub fn gradients(
    stacks: &[FactorStack],
    consensus: &ConsensusEmbedding,
    dataset: &MultiOmicsDataset,
    indicators: &[IndicatorMatrix],
    config: &NonlinearSolverConfig,
) -> Result<Gradients, SolverError> {
    let lambda1 = config.base.lambda1;
    let lambda2 = config.base.lambda2;
    let route = config.base.indicator_route;

    let mut basis_grads = Vec::with_capacity(stacks.len());
    let mut top_grads = Vec::with_capacity(stacks.len());
    let mut consensus_grad: DMatrix<f64> =
        DMatrix::zeros(consensus.dim(), consensus.n_samples());

    for ((stack, view), indicator) in stacks.iter().zip(dataset.views()).zip(indicators) {
        let m = stack.depth();
        let fwd = forward_view(stack, config.activation);
        let residual = (&fwd.reconstruction - view.matrix()) * 2.0;

        let mut z_grads = vec![DMatrix::zeros(0, 0); m];
        z_grads[0] = &residual * fwd.latents[0].transpose();
        // Gradient flowing into latent 0, then chained inward.
        let mut upstream = stack.basis(0).transpose() * &residual;
        for j in 1..m {
            let through = upstream.component_mul(&config.activation.map_derivative(&fwd.pre[j]));
            z_grads[j] = &through * fwd.latents[j].transpose();
            upstream = stack.basis(j).transpose() * through;
        }

        // `upstream` is now the reconstruction gradient for the deepest
        // latent; add the sparsity and consensus terms.
        let hm = stack.top_latent();
        let mut hm_grad = upstream;
        for c in 0..hm.ncols() {
            let colsum = hm.column(c).sum();
            for r in 0..hm.nrows() {
                hm_grad[(r, c)] += 2.0 * lambda1 * colsum;
            }
        }
        let pulled = consensus_columns(consensus.matrix(), indicator, route);
        let diff = hm - &pulled;
        hm_grad += &diff * (-2.0 * lambda2);

        // Consensus picks up `2 lambda2 (H G - H_m) G^T` from this view.
        let scaled = &diff * (-2.0 * lambda2);
        match route {
            IndicatorRoute::Gather => consensus_grad += indicator.scatter_columns(&scaled),
            IndicatorRoute::Dense => consensus_grad += &scaled * indicator.dense().transpose(),
        }

        let finite = z_grads.iter().all(|g| g.iter().all(|x| x.is_finite()))
            && hm_grad.iter().all(|x| x.is_finite());
        if !finite {
            return Err(SolverError::NonFiniteGradient(0));
        }
        basis_grads.push(z_grads);
        top_grads.push(hm_grad);
    }
    if consensus_grad.iter().any(|x| !x.is_finite()) {
        return Err(SolverError::NonFiniteGradient(0));
    }
    Ok(Gradients {
        basis: basis_grads,
        top_latent: top_grads,
        consensus: consensus_grad,
    })
}

/// Everything `fit_nonlinear` produces.
#[derive(Debug, Clone)]
pub struct NonlinearFit {
    pub stacks: Vec<FactorStack>,
    pub consensus: ConsensusEmbedding,
    pub report: FitReport,
}

fn step_candidate(
    stacks: &[FactorStack],
    consensus: &DMatrix<f64>,
    grads: &Gradients,
    alpha: f64,
) -> (Vec<FactorStack>, DMatrix<f64>) {
    let new_stacks = stacks
        .iter()
        .enumerate()
        .map(|(v, stack)| {
            let mut s = stack.clone();
            for layer in 0..s.depth() {
                s.set_basis(layer, s.basis(layer) - &grads.basis[v][layer] * alpha);
            }
            let m = s.depth();
            let stepped =
                (s.top_latent() - &grads.top_latent[v] * alpha).map(|x| x.max(0.0));
            s.set_latent(m - 1, stepped);
            s
        })
        .collect();
    let new_consensus = consensus - &grads.consensus * alpha;
    (new_stacks, new_consensus)
}

/// Projected gradient descent with backtracking line search on the global
/// loss. Accepted steps strictly decrease the loss; if no step size above
/// `min_step` decreases it, the solver stops and reports `StepUnderflow`,
/// returning the best point found.
pub fn fit_nonlinear(
    dataset: &MultiOmicsDataset,
    config: &NonlinearSolverConfig,
) -> Result<NonlinearFit, SolverError> {
    config.validate()?;
    let started = Instant::now();
    let indicators = dataset.indicators()?;
    let seed = config.base.seed;

    let mut stacks = Vec::with_capacity(dataset.n_views());
    for view in dataset.views() {
        stacks.push(pretrain_stack(
            view.name(),
            view.matrix(),
            &config.base.layer_sizes,
            seed,
        )?);
    }
    let mut consensus = crate::linear::initial_consensus_matrix(
        &stacks,
        &indicators,
        &config.base,
        dataset.n_samples(),
    )?;

    let ids = dataset.global_ids().to_vec();
    let wrap = |m: &DMatrix<f64>| ConsensusEmbedding::new(m.clone(), ids.clone());

    let mut loss = nonlinear_loss(&stacks, &wrap(&consensus)?, dataset, &indicators, config)?;
    let mut trace = vec![loss];
    let mut termination = Termination::MaxIters;
    let mut iterations = 0;

    for _ in 0..config.base.max_iters {
        let grads = gradients(&stacks, &wrap(&consensus)?, dataset, &indicators, config)?;

        let mut alpha = config.alpha0;
        let mut accepted = None;
        while alpha >= config.min_step {
            let (cand_stacks, cand_consensus) =
                step_candidate(&stacks, &consensus, &grads, alpha);
            match nonlinear_loss(
                &cand_stacks,
                &wrap(&cand_consensus)?,
                dataset,
                &indicators,
                config,
            ) {
                Ok(cand_loss) if cand_loss < loss => {
                    accepted = Some((cand_stacks, cand_consensus, cand_loss));
                    break;
                }
                _ => alpha *= config.backtrack,
            }
        }

        match accepted {
            Some((s, c, l)) => {
                stacks = s;
                consensus = c;
                let prev = loss;
                loss = l;
                trace.push(loss);
                iterations += 1;
                if relative_change(prev, loss) < config.base.tol {
                    termination = Termination::Converged;
                    break;
                }
            }
            None => {
                termination = Termination::StepUnderflow;
                break;
            }
        }
    }

    for stack in &mut stacks {
        refresh_intermediate_latents(stack, config.activation);
    }
    Ok(NonlinearFit {
        stacks,
        consensus: ConsensusEmbedding::new(consensus, ids)?,
        report: FitReport {
            loss_trace: trace,
            iterations,
            wall_clock_secs: started.elapsed().as_secs_f64(),
            termination,
            seed,
        },
    })
}
