//! Metropolis-within-Gibbs sampler.
//!
//! One sweep updates every tree of every ensemble (grow/prune proposal on
//! the structure with the leaf jumps integrated out, then a fresh draw of the
//! jumps), then σ by independence Metropolis-Hastings, then θ_j and η_j for
//! each ensemble. Residuals are kept up to date incrementally so a tree update
//! costs one pass over the data.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{OutcomeScale, PanelDataset};
use crate::error::{Error, Result};
use crate::error_model::CompoundSymmetry;
use crate::priors::{
    eta_from_index, eta_prior_log_pmf, sample_log_dirichlet, sample_log_weights,
    symmetric_dirichlet_log_density, Hyperparameters, SparsityState, ETA_GRID,
};
use crate::tree::{propose, split_counts, DecisionTree, RegressionTree, TreePrior};

/// Smallest σ the sampler will move to.
pub const SIGMA_FLOOR: f64 = 1e-6;
/// Largest σ the sampler will move to.
pub const SIGMA_CEILING: f64 = 1e50;

/// Everything that is sampled.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainState {
    /// `ensembles[j][m]` is tree `m` of coefficient `j` (0 = intercept).
    pub ensembles: Vec<Vec<RegressionTree>>,
    pub sigma: f64,
    pub sparsity: Vec<SparsityState>,
}

impl ChainState {
    /// Root-only trees with zero jumps, σ = 1, uniform θ.
    pub fn initial(p: usize, r: usize, trees: usize) -> Self {
        ChainState {
            ensembles: vec![vec![RegressionTree::default(); trees]; p + 1],
            sigma: 1.0,
            sparsity: vec![SparsityState::uniform(r); p + 1],
        }
    }

    /// β_j(z) on the sampler's (standardized) scale.
    pub fn beta(&self, j: usize, z: &[f64]) -> f64 {
        crate::tree::ensemble_evaluate(&self.ensembles[j], z)
    }

    /// Mean function `Σ_j β_j(z) x_j` with `x` excluding the leading 1.
    pub fn mean(&self, x: &[f64], z: &[f64]) -> f64 {
        self.beta(0, z) + x.iter().enumerate().map(|(j, xv)| xv * self.beta(j + 1, z)).sum::<f64>()
    }

    pub fn split_counts(&self, j: usize, r: usize) -> Vec<usize> {
        split_counts(&self.ensembles[j], r)
    }
}

/// Receives each retained draw of a chain.
pub trait DrawSink {
    fn record(&mut self, iteration: usize, state: &ChainState);
}

impl<F: FnMut(usize, &ChainState)> DrawSink for F {
    fn record(&mut self, iteration: usize, state: &ChainState) {
        self(iteration, state)
    }
}

/// Sink that discards everything.
pub struct NullSink;

impl DrawSink for NullSink {
    fn record(&mut self, _: usize, _: &ChainState) {}
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ChainSummary {
    pub chain: usize,
    pub tree_proposals: usize,
    pub tree_accepts: usize,
    pub sigma_proposals: usize,
    pub sigma_accepts: usize,
    /// σ at each retained iteration, on the sampler's scale.
    pub sigma_trace: Vec<f64>,
}

impl ChainSummary {
    pub fn tree_acceptance(&self) -> f64 {
        self.tree_accepts as f64 / self.tree_proposals.max(1) as f64
    }

    pub fn sigma_acceptance(&self) -> f64 {
        self.sigma_accepts as f64 / self.sigma_proposals.max(1) as f64
    }
}

/// Closed-form acceptance probability of the σ independence proposal.
///
/// The proposal is inverse-gamma on σ² with shape `N/2 + 1`, whose density in
/// σ is proportional to `σ^{-3-N} exp(-S/(2σ²))`. Against the half-t prior the
/// likelihood terms cancel, leaving the prior ratio times `(σ̃/σ)³`.
pub fn sigma_acceptance(sigma: f64, proposal: f64, nu: f64) -> f64 {
    log_sigma_acceptance(sigma, proposal, nu, 1.0).exp().min(1.0)
}

fn log_sigma_acceptance(sigma: f64, proposal: f64, nu: f64, prior_sign: f64) -> f64 {
    let prior = -0.5 * (nu + 1.0) * ((nu + proposal * proposal).ln() - (nu + sigma * sigma).ln());
    prior_sign * prior + 3.0 * (proposal / sigma).ln()
}

/// Which parts of the state a sweep updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SweepOptions {
    pub update_sigma: bool,
    pub update_sparsity: bool,
}

impl Default for SweepOptions {
    fn default() -> Self {
        SweepOptions { update_sigma: true, update_sparsity: true }
    }
}

/// Gaussian system for the leaf jumps of one tree given everything else:
/// posterior precision `P` (factored) and linear term `Θ`.
pub struct LeafSystem {
    pub chol: Cholesky<f64, Dyn>,
    pub theta: DVector<f64>,
    pub counts: Vec<usize>,
}

impl LeafSystem {
    /// Log marginal likelihood of the partial residuals up to a constant
    /// shared by all trees: `½ log|Λ| - L log τ + ½ Θᵀ Λ Θ`, Λ = P⁻¹.
    pub fn log_marginal(&self, tau: f64) -> f64 {
        let l = self.chol.l_dirty();
        let half_log_det_p: f64 = (0..l.nrows()).map(|i| l[(i, i)].ln()).sum();
        let w = l.solve_lower_triangular(&self.theta).expect("nonsingular factor");
        -half_log_det_p - self.theta.len() as f64 * tau.ln() + 0.5 * w.norm_squared()
    }

    pub fn mean(&self) -> DVector<f64> {
        self.chol.solve(&self.theta)
    }

    /// Draw from `N(ΛΘ, Λ)`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let n = self.theta.len();
        let xi = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let l = self.chol.l_dirty();
        let noise = l.tr_solve_lower_triangular(&xi).expect("nonsingular factor");
        (self.mean() + noise).iter().copied().collect()
    }
}

/// Sampler state tied to one dataset.
pub struct Gibbs {
    data: PanelDataset,
    hyper: Hyperparameters,
    prior: TreePrior,
    cs: CompoundSymmetry,
    ones: Vec<f64>,
    kappa: Vec<f64>,
    state: ChainState,
    // leaves[j][m][row]: leaf slot of each row in each tree
    leaves: Vec<Vec<Vec<u32>>>,
    residual: Vec<f64>,
    pub options: SweepOptions,
    prior_sign: f64,
    pub summary: ChainSummary,
}

impl Gibbs {
    pub fn new(data: PanelDataset, hyper: Hyperparameters) -> Result<Self> {
        let state = ChainState::initial(data.p(), data.r(), hyper.trees);
        Gibbs::with_state(data, hyper, state)
    }

    pub fn with_state(data: PanelDataset, hyper: Hyperparameters, state: ChainState) -> Result<Self> {
        hyper.validate(data.p())?;
        if state.ensembles.len() != data.p() + 1 || state.ensembles.iter().any(|e| e.len() != hyper.trees) {
            return Err(crate::error::config_err("chain state does not match model dimensions"));
        }
        let cs = CompoundSymmetry::new(hyper.rho)?;
        let kappa = data.subject_sizes().into_iter().map(|n| cs.kappa(n)).collect();
        let mut g = Gibbs {
            ones: vec![1.0; data.n_obs()],
            prior: hyper.tree_prior(),
            cs,
            kappa,
            leaves: Vec::new(),
            residual: Vec::new(),
            options: SweepOptions::default(),
            prior_sign: 1.0,
            summary: ChainSummary::default(),
            data,
            hyper,
            state,
        };
        g.leaves = (0..g.state.ensembles.len())
            .map(|j| g.state.ensembles[j].iter().map(|t| g.assign(&t.tree)).collect())
            .collect();
        g.refresh_residual();
        Ok(g)
    }

    pub fn state(&self) -> &ChainState {
        &self.state
    }

    pub fn data(&self) -> &PanelDataset {
        &self.data
    }

    pub fn residual(&self) -> &[f64] {
        &self.residual
    }

    pub fn set_sigma(&mut self, sigma: f64) {
        self.state.sigma = sigma;
    }

    /// Replace the outcome vector, keeping the current parameters.
    pub fn set_outcomes(&mut self, y: Vec<f64>) {
        self.data.set_outcomes(y);
        self.refresh_residual();
    }

    /// Use the wrong sign on the σ prior exponent. Only for validating that
    /// the joint-distribution test can see a broken kernel.
    pub(crate) fn flip_sigma_prior(&mut self) {
        self.prior_sign = -1.0;
    }

    fn column(&self, j: usize) -> &[f64] {
        if j == 0 {
            &self.ones
        } else {
            self.data.covariate(j)
        }
    }

    fn assign(&self, tree: &DecisionTree) -> Vec<u32> {
        (0..self.data.n_obs()).map(|row| tree.leaf_index(self.data.modifiers(row)) as u32).collect()
    }

    /// Recompute residuals from scratch.
    pub fn refresh_residual(&mut self) {
        let mut res = self.data.y().to_vec();
        for (j, ens) in self.state.ensembles.iter().enumerate() {
            let x = if j == 0 { &self.ones[..] } else { self.data.covariate(j) };
            for (t, leaves) in ens.iter().zip(&self.leaves[j]) {
                for row in 0..res.len() {
                    res[row] -= x[row] * t.jumps[leaves[row] as usize];
                }
            }
        }
        self.residual = res;
    }

    /// Leaf system for coefficient `j` under the given leaf assignment and
    /// partial residual. `None` if some leaf holds no observations.
    pub fn leaf_system(&self, j: usize, leaves: &[u32], n_leaves: usize, partial: &[f64]) -> Option<LeafSystem> {
        let x = self.column(j);
        let sigma2 = self.state.sigma * self.state.sigma;
        let c = 1.0 / ((1.0 - self.cs.rho()) * sigma2);
        let tau = self.hyper.tau[j];
        let mut p = DMatrix::<f64>::zeros(n_leaves, n_leaves);
        let mut theta = DVector::<f64>::zeros(n_leaves);
        let mut counts = vec![0usize; n_leaves];
        let mut s = vec![0.0; n_leaves];
        let mut touched: Vec<usize> = Vec::new();
        let mut marked = vec![false; n_leaves];
        for (i, &kappa) in self.kappa.iter().enumerate() {
            let mut rsum = 0.0;
            for row in self.data.subject_rows(i) {
                let l = leaves[row] as usize;
                let xv = x[row];
                counts[l] += 1;
                p[(l, l)] += xv * xv;
                theta[l] += xv * partial[row];
                if kappa != 0.0 {
                    rsum += partial[row];
                    s[l] += xv;
                    if !marked[l] {
                        marked[l] = true;
                        touched.push(l);
                    }
                }
            }
            if kappa != 0.0 {
                for &a in &touched {
                    theta[a] -= kappa * s[a] * rsum;
                    for &b in &touched {
                        p[(a, b)] -= kappa * s[a] * s[b];
                    }
                }
                for &a in &touched {
                    s[a] = 0.0;
                    marked[a] = false;
                }
                touched.clear();
            }
        }
        if counts.iter().any(|&n| n == 0) {
            return None;
        }
        p *= c;
        theta *= c;
        let prec = 1.0 / (tau * tau);
        for l in 0..n_leaves {
            p[(l, l)] += prec;
        }
        let chol = Cholesky::new(p)?;
        Some(LeafSystem { chol, theta, counts })
    }

    /// One grow/prune step for tree `m` of ensemble `j`, followed by a draw
    /// of its leaf jumps.
    pub fn update_tree<R: Rng + ?Sized>(&mut self, j: usize, m: usize, rng: &mut R) -> Result<()> {
        let x = if j == 0 { std::mem::take(&mut self.ones) } else { self.data.covariate(j).to_vec() };
        let current = std::mem::take(&mut self.leaves[j][m]);
        {
            let jumps = &self.state.ensembles[j][m].jumps;
            for row in 0..self.residual.len() {
                self.residual[row] += x[row] * jumps[current[row] as usize];
            }
        }
        if j == 0 {
            self.ones = x;
        }
        let partial = std::mem::take(&mut self.residual);
        let tau = self.hyper.tau[j];
        let sp = &self.state.sparsity[j];
        let tree = self.state.ensembles[j][m].tree.clone();
        let proposal = propose(&tree, &self.prior, &sp.theta, &sp.log_theta, rng);
        self.summary.tree_proposals += 1;

        let current_sys = self
            .leaf_system(j, &current, tree.n_leaves(), &partial)
            .ok_or_else(|| Error::Numerical("current tree has an empty leaf or singular system".into()))?;
        let mut accepted = None;
        if proposal.tree.max_depth() <= self.hyper.max_depth {
            let new_leaves = self.assign(&proposal.tree);
            if let Some(sys) = self.leaf_system(j, &new_leaves, proposal.tree.n_leaves(), &partial) {
                let log_prior = |t: &DecisionTree| self.prior.tree_log_prior(t) + self.prior.rule_log_prior(t, &sp.log_theta);
                let log_alpha = sys.log_marginal(tau) - current_sys.log_marginal(tau) + log_prior(&proposal.tree)
                    - log_prior(&tree)
                    + proposal.log_ratio;
                if log_alpha.is_nan() {
                    return Err(Error::Numerical("non-finite tree acceptance ratio".into()));
                }
                if log_alpha >= 0.0 || rng.random::<f64>().ln() < log_alpha {
                    accepted = Some((sys, new_leaves));
                }
            }
        }
        let (sys, leaves, tree) = match accepted {
            Some((sys, leaves)) => {
                self.summary.tree_accepts += 1;
                (sys, leaves, proposal.tree)
            }
            None => (current_sys, current, tree),
        };
        let jumps = sys.sample(rng);
        if jumps.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite leaf jump".into()));
        }
        let x = self.column(j);
        let mut residual = partial;
        for row in 0..residual.len() {
            residual[row] -= x[row] * jumps[leaves[row] as usize];
        }
        self.residual = residual;
        self.leaves[j][m] = leaves;
        self.state.ensembles[j][m] = RegressionTree::new(tree, jumps);
        Ok(())
    }

    /// `Σ_i R_iᵀ Ω_i R_i` over the current residuals.
    pub fn residual_quad_form(&self) -> f64 {
        (0..self.data.n_subjects())
            .map(|i| {
                let r = &self.residual[self.data.subject_rows(i)];
                self.cs.quad_form_unchecked(r, r)
            })
            .sum()
    }

    pub fn update_sigma<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<()> {
        let s = self.residual_quad_form();
        let n = self.data.n_obs() as f64;
        let g = Gamma::new(0.5 * n + 1.0, 1.0).expect("positive shape").sample(rng);
        let proposal = (0.5 * s / g).sqrt();
        self.summary.sigma_proposals += 1;
        if !proposal.is_finite() {
            return Err(Error::Numerical("non-finite sigma proposal".into()));
        }
        if !(SIGMA_FLOOR..=SIGMA_CEILING).contains(&proposal) {
            return Ok(());
        }
        let log_alpha = log_sigma_acceptance(self.state.sigma, proposal, self.hyper.nu, self.prior_sign);
        if log_alpha >= 0.0 || rng.random::<f64>().ln() < log_alpha {
            self.state.sigma = proposal;
            self.summary.sigma_accepts += 1;
        }
        Ok(())
    }

    /// θ_j from its Dirichlet conditional given the split counts of ensemble `j`.
    pub fn update_theta<R: Rng + ?Sized>(&mut self, j: usize, rng: &mut R) {
        let r = self.data.r();
        let counts = self.state.split_counts(j, r);
        let a = self.state.sparsity[j].eta() / r as f64;
        let alpha: Vec<f64> = counts.iter().map(|&c| a + c as f64).collect();
        let lt = sample_log_dirichlet(&alpha, rng);
        let k = self.state.sparsity[j].eta_index;
        self.state.sparsity[j] = SparsityState::from_log_theta(lt, k);
    }

    /// η_j from its conditional on the grid given θ_j.
    pub fn update_eta<R: Rng + ?Sized>(&mut self, j: usize, rng: &mut R) {
        let r = self.data.r();
        let lt = &self.state.sparsity[j].log_theta;
        let lw: Vec<f64> = ETA_GRID
            .clone()
            .map(|k| {
                let eta = eta_from_index(k, r);
                eta_prior_log_pmf(k, r).unwrap() + symmetric_dirichlet_log_density(eta / r as f64, lt)
            })
            .collect();
        self.state.sparsity[j].eta_index = ETA_GRID.start() + sample_log_weights(&lw, rng);
    }

    pub fn sweep<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<()> {
        for j in 0..self.state.ensembles.len() {
            for m in 0..self.hyper.trees {
                self.update_tree(j, m, rng)?;
            }
        }
        if self.options.update_sigma {
            self.update_sigma(rng)?;
        }
        if self.options.update_sparsity {
            for j in 0..self.state.ensembles.len() {
                self.update_theta(j, rng);
                self.update_eta(j, rng);
            }
        }
        Ok(())
    }
}

/// Random stream for chain `chain` of a run seeded with `seed`.
pub fn chain_rng(seed: u64, chain: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chain as u64);
    rng
}

/// Run one chain on data already on the sampler's scale, passing retained
/// draws to `sink`.
pub fn run_chain<S: DrawSink + ?Sized>(
    data: &PanelDataset,
    hyper: &Hyperparameters,
    chain: usize,
    sink: &mut S,
) -> Result<ChainSummary> {
    let mut rng = chain_rng(hyper.seed, chain);
    let mut gibbs = Gibbs::new(data.clone(), hyper.clone())?;
    gibbs.summary.chain = chain;
    for it in 0..hyper.n_iter {
        gibbs.sweep(&mut rng)?;
        if it >= hyper.n_burn {
            gibbs.summary.sigma_trace.push(gibbs.state.sigma);
            sink.record(it, &gibbs.state);
        }
    }
    log::debug!(
        "chain {chain}: tree acceptance {:.3}, sigma acceptance {:.3}",
        gibbs.summary.tree_acceptance(),
        gibbs.summary.sigma_acceptance()
    );
    Ok(gibbs.summary)
}

pub struct FitOutput<S> {
    pub scale: OutcomeScale,
    pub chains: Vec<(S, ChainSummary)>,
}

/// Standardize the outcome, run `hyper.n_chains` chains in parallel and hand
/// each chain's draws to its own sink.
pub fn fit_with<S, F>(data: &PanelDataset, hyper: &Hyperparameters, make_sink: F) -> Result<FitOutput<S>>
where
    S: DrawSink + Send,
    F: Fn(usize, &OutcomeScale) -> S + Sync,
{
    hyper.validate(data.p())?;
    let scale = data.outcome_scale();
    let std_data = data.with_outcome_scale(&scale);
    let chains = (0..hyper.n_chains)
        .into_par_iter()
        .map(|c| {
            let mut sink = make_sink(c, &scale);
            let summary = run_chain(&std_data, hyper, c, &mut sink)?;
            Ok((sink, summary))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FitOutput { scale, chains })
}
