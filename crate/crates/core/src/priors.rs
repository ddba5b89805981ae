//! Hyperparameters and the prior pieces that are not tree-specific: the
//! sparsity hierarchy on splitting probabilities and the half-t kernel on σ.

use rand::Rng;
use rand_distr::{Distribution, Gamma, StudentT};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{config_err, Error, Result};
use crate::tree::{Cutpoints, SplitPrior, TreePrior, MAX_DEPTH};

/// Grid indices `k` with `η/(η+R) = k/100` that the sampler visits. `k = 0`
/// would make the Dirichlet degenerate and `k = 100` has zero prior mass.
pub const ETA_GRID: std::ops::RangeInclusive<usize> = 1..=99;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparameters {
    /// Trees per ensemble (M).
    pub trees: usize,
    /// Prior jump scale τ_j for each of the p+1 ensembles.
    pub tau: Vec<f64>,
    /// Degrees of freedom of the half-t prior on σ.
    pub nu: f64,
    pub split_prior: SplitPrior,
    pub cutpoints: Cutpoints,
    pub max_depth: usize,
    /// Within-subject error correlation; fixed for a run.
    pub rho: f64,
    pub n_iter: usize,
    pub n_burn: usize,
    pub n_chains: usize,
    pub seed: u64,
}

impl Hyperparameters {
    /// M = 50, τ_j = M^{-1/2}, ν = 3, depth-polynomial split prior, ρ = 0,
    /// two chains of 1500 iterations with 500 burn-in.
    pub fn defaults(p: usize) -> Self {
        let trees = 50;
        Hyperparameters {
            trees,
            tau: vec![(trees as f64).powf(-0.5); p + 1],
            nu: 3.0,
            split_prior: SplitPrior::default(),
            cutpoints: Cutpoints::Continuous,
            max_depth: MAX_DEPTH,
            rho: 0.0,
            n_iter: 1500,
            n_burn: 500,
            n_chains: 2,
            seed: 0,
        }
    }

    /// Number of coefficient functions (intercept included).
    pub fn n_coefficients(&self) -> usize {
        self.tau.len()
    }

    pub fn kept_per_chain(&self) -> usize {
        self.n_iter - self.n_burn
    }

    /// Set every τ_j to `scale * M^{-1/2}`.
    pub fn with_tau_scale(mut self, scale: f64) -> Self {
        let base = (self.trees as f64).powf(-0.5);
        self.tau.iter_mut().for_each(|t| *t = scale * base);
        self
    }

    /// Change M, keeping τ_j at its current multiple of M^{-1/2}.
    pub fn with_trees(mut self, trees: usize) -> Self {
        let ratio = ((self.trees as f64) / (trees as f64)).sqrt();
        self.tau.iter_mut().for_each(|t| *t *= ratio);
        self.trees = trees;
        self
    }

    pub fn tree_prior(&self) -> TreePrior {
        TreePrior { split: self.split_prior, cutpoints: self.cutpoints, max_depth: self.max_depth }
    }

    pub fn validate(&self, p: usize) -> Result<()> {
        if self.trees == 0 {
            return Err(config_err("need at least one tree per ensemble"));
        }
        if self.tau.len() != p + 1 {
            return Err(config_err(format!("expected {} tau values, got {}", p + 1, self.tau.len())));
        }
        if self.tau.iter().any(|t| !(*t > 0.0 && t.is_finite())) {
            return Err(config_err("every tau must be positive and finite"));
        }
        if !(self.nu > 1.0) {
            return Err(config_err("nu must exceed 1"));
        }
        if !(0.0..1.0).contains(&self.rho) {
            return Err(config_err("rho must lie in [0, 1)"));
        }
        if self.n_burn >= self.n_iter {
            return Err(config_err("burn-in must be shorter than the chain"));
        }
        if self.n_chains == 0 {
            return Err(config_err("need at least one chain"));
        }
        if self.max_depth == 0 || self.max_depth > MAX_DEPTH {
            return Err(config_err(format!("max_depth must be in 1..={MAX_DEPTH}")));
        }
        if let Cutpoints::Grid { points: 0 } = self.cutpoints {
            return Err(config_err("cutpoint grid needs at least one point"));
        }
        self.split_prior.validate()
    }
}

/// Defaults for `p` covariates; `r` does not affect them.
pub fn default_hyperparameters(p: usize, _r: usize) -> Hyperparameters {
    Hyperparameters::defaults(p)
}

/// Unnormalized log prior mass of `η/(η+R) = k/100` under the discretized
/// Beta(1, R) prior: `(R - 1) log((100 - k) / 100)`.
pub fn eta_prior_log_pmf(k: usize, r: usize) -> Result<f64> {
    if k > 100 {
        return Err(config_err(format!("eta grid index {k} outside 0..=100")));
    }
    if k == 100 {
        return Ok(f64::NEG_INFINITY);
    }
    Ok((r as f64 - 1.0) * ((100 - k) as f64 / 100.0).ln())
}

/// η corresponding to grid index `k`.
pub fn eta_from_index(k: usize, r: usize) -> f64 {
    r as f64 * k as f64 / (100 - k) as f64
}

/// Unnormalized half-t log prior `-(ν+1)/2 · log(ν + σ²)`.
pub fn sigma_log_prior(sigma: f64, nu: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::Numerical(format!("sigma must be positive, got {sigma}")));
    }
    Ok(-0.5 * (nu + 1.0) * (nu + sigma * sigma).ln())
}

/// Draw σ from the half-t prior (absolute value of a Student t).
pub fn sample_sigma_prior<R: Rng + ?Sized>(nu: f64, rng: &mut R) -> f64 {
    StudentT::new(nu).expect("nu > 0").sample(rng).abs()
}

/// Splitting probabilities θ_j and sparsity parameter η_j of one ensemble.
/// θ is kept in log space so that tiny Dirichlet components stay finite.
#[derive(Debug, Clone, PartialEq)]
pub struct SparsityState {
    pub log_theta: Vec<f64>,
    pub theta: Vec<f64>,
    pub eta_index: usize,
}

impl SparsityState {
    /// Uniform θ and η at the grid midpoint (η = R).
    pub fn uniform(r: usize) -> Self {
        let lt = -(r as f64).ln();
        SparsityState { log_theta: vec![lt; r], theta: vec![1.0 / r as f64; r], eta_index: 50 }
    }

    pub fn from_log_theta(log_theta: Vec<f64>, eta_index: usize) -> Self {
        let theta = log_theta.iter().map(|v| v.exp()).collect();
        SparsityState { log_theta, theta, eta_index }
    }

    pub fn r(&self) -> usize {
        self.theta.len()
    }

    pub fn eta(&self) -> f64 {
        eta_from_index(self.eta_index, self.r())
    }

    /// Draw (η, θ) from the prior.
    pub fn sample_prior<R: Rng + ?Sized>(r: usize, rng: &mut R) -> Self {
        let lw: Vec<f64> = ETA_GRID.clone().map(|k| eta_prior_log_pmf(k, r).unwrap()).collect();
        let k = *ETA_GRID.start() + sample_log_weights(&lw, rng);
        let alpha = vec![eta_from_index(k, r) / r as f64; r];
        SparsityState::from_log_theta(sample_log_dirichlet(&alpha, rng), k)
    }
}

/// Log of a Gamma(shape, 1) draw. For shape < 1 uses
/// `G(a) = G(a + 1) · U^{1/a}` so the result stays finite.
pub fn sample_log_gamma<R: Rng + ?Sized>(shape: f64, rng: &mut R) -> f64 {
    if shape >= 1.0 {
        Gamma::new(shape, 1.0).expect("positive shape").sample(rng).ln()
    } else {
        let g = Gamma::new(shape + 1.0, 1.0).expect("positive shape").sample(rng).ln();
        let u: f64 = loop {
            let u: f64 = rng.random();
            if u > 0.0 {
                break u;
            }
        };
        g + u.ln() / shape
    }
}

/// Log of a Dirichlet(alpha) draw, normalized in log space.
pub fn sample_log_dirichlet<R: Rng + ?Sized>(alpha: &[f64], rng: &mut R) -> Vec<f64> {
    let lg: Vec<f64> = alpha.iter().map(|&a| sample_log_gamma(a, rng)).collect();
    let lse = log_sum_exp(&lg);
    lg.into_iter().map(|v| v - lse).collect()
}

/// Dirichlet(a, ..., a) log density at a point given by its logs.
pub fn symmetric_dirichlet_log_density(a: f64, log_theta: &[f64]) -> f64 {
    let r = log_theta.len();
    if r == 1 {
        return 0.0;
    }
    ln_gamma(a * r as f64) - r as f64 * ln_gamma(a) + (a - 1.0) * log_theta.iter().sum::<f64>()
}

pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Index drawn with probability proportional to `exp(log_weights)`.
pub fn sample_log_weights<R: Rng + ?Sized>(log_weights: &[f64], rng: &mut R) -> usize {
    let m = log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = log_weights.iter().map(|v| (v - m).exp()).collect();
    crate::tree::sample_axis(&w, rng)
}
