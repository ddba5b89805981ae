//! Joint-distribution test of the sampler.
//!
//! Two ways of drawing (parameters, data) from the same joint distribution
//! are compared on a small fixed design: independent forward draws from the
//! prior, and a chain that alternates one Gibbs sweep with a fresh draw of
//! the data given the current parameters. Any mistake in a conditional
//! update shows up as a difference in the means of some functional.

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::data::{ColumnNames, ModifierScaling, PanelDataset};
use crate::error::Result;
use crate::priors::{sample_sigma_prior, Hyperparameters, SparsityState};
use crate::sampler::{chain_rng, ChainState, Gibbs};
use crate::tree::RegressionTree;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GewekeMutation {
    None,
    /// Run the chain with the sign of the σ prior exponent flipped.
    FlippedSigmaPrior,
}

#[derive(Debug, Clone)]
pub struct GewekeConfig {
    pub n_subjects: usize,
    pub per_subject: usize,
    pub p: usize,
    pub r: usize,
    pub trees: usize,
    pub rho: f64,
    pub samples: usize,
    pub batches: usize,
    pub seed: u64,
    pub mutation: GewekeMutation,
}

impl Default for GewekeConfig {
    fn default() -> Self {
        GewekeConfig {
            n_subjects: 4,
            per_subject: 3,
            p: 1,
            r: 2,
            trees: 2,
            rho: 0.3,
            samples: 200_000,
            batches: 500,
            seed: 2024,
            mutation: GewekeMutation::None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FunctionalComparison {
    pub name: String,
    pub forward_mean: f64,
    pub chain_mean: f64,
    pub z: f64,
}

#[derive(Debug, Clone)]
pub struct GewekeReport {
    pub functionals: Vec<FunctionalComparison>,
}

impl GewekeReport {
    pub fn max_abs_z(&self) -> f64 {
        self.functionals.iter().map(|f| f.z.abs()).fold(0.0, f64::max)
    }

    pub fn z_of(&self, name: &str) -> Option<f64> {
        self.functionals.iter().find(|f| f.name == name).map(|f| f.z)
    }
}

struct Design {
    data: PanelDataset,
    hyper: Hyperparameters,
    probes: Vec<Vec<f64>>,
}

fn design(cfg: &GewekeConfig) -> Result<Design> {
    let mut rng = chain_rng(cfg.seed, 1000);
    let rows = cfg.n_subjects * cfg.per_subject;
    let x: Vec<f64> = (0..rows * cfg.p).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let z: Vec<f64> = (0..rows * cfg.r).map(|_| rng.random::<f64>()).collect();
    let data = PanelDataset::from_rows(
        (0..cfg.n_subjects).map(|i| format!("g{i}")).collect(),
        &vec![cfg.per_subject; cfg.n_subjects],
        vec![0.0; rows],
        &x,
        z,
        ModifierScaling::identity(cfg.r),
        ColumnNames::generic(cfg.p, cfg.r),
    )?;
    let mut hyper = Hyperparameters::defaults(cfg.p).with_trees(cfg.trees);
    hyper.rho = cfg.rho;
    hyper.n_iter = 2;
    hyper.n_burn = 1;
    hyper.n_chains = 1;
    let probes = vec![vec![0.3; cfg.r], (0..cfg.r).map(|v| if v % 2 == 0 { 0.8 } else { 0.2 }).collect()];
    Ok(Design { data, hyper, probes })
}

fn has_empty_leaf(tree: &crate::tree::DecisionTree, data: &PanelDataset) -> bool {
    let mut seen = vec![false; tree.n_leaves()];
    for row in 0..data.n_obs() {
        seen[tree.leaf_index(data.modifiers(row))] = true;
    }
    seen.iter().any(|s| !s)
}

/// Draw parameters from the prior restricted to trees with no empty leaves
/// on the design. The restriction is applied to each ensemble's
/// (η, θ, trees) jointly so that θ keeps its Dirichlet conditional.
fn forward_parameters<R: Rng + ?Sized>(d: &Design, rng: &mut R) -> ChainState {
    let p = d.data.p();
    let r = d.data.r();
    let prior = d.hyper.tree_prior();
    let mut ensembles = Vec::with_capacity(p + 1);
    let mut sparsity = Vec::with_capacity(p + 1);
    for j in 0..=p {
        let (sp, trees) = loop {
            let sp = SparsityState::sample_prior(r, rng);
            let trees: Vec<_> = (0..d.hyper.trees).map(|_| prior.sample_tree(&sp.theta, rng)).collect();
            if trees.iter().all(|t| !has_empty_leaf(t, &d.data)) {
                break (sp, trees);
            }
        };
        let jump = Normal::new(0.0, d.hyper.tau[j]).unwrap();
        ensembles.push(
            trees
                .into_iter()
                .map(|t| {
                    let jumps = (0..t.n_leaves()).map(|_| jump.sample(rng)).collect();
                    RegressionTree::new(t, jumps)
                })
                .collect(),
        );
        sparsity.push(sp);
    }
    ChainState { ensembles, sigma: sample_sigma_prior(d.hyper.nu, rng), sparsity }
}

fn forward_outcomes<R: Rng + ?Sized>(d: &Design, state: &ChainState, rng: &mut R) -> Vec<f64> {
    let rho = d.hyper.rho;
    let mut y = Vec::with_capacity(d.data.n_obs());
    for i in 0..d.data.n_subjects() {
        let shared: f64 = rng.sample(StandardNormal);
        for row in d.data.subject_rows(i) {
            let e: f64 = rng.sample(StandardNormal);
            let f = state.mean(&d.data.covariate_row(row), d.data.modifiers(row));
            y.push(f + state.sigma * (rho.sqrt() * shared + (1.0 - rho).sqrt() * e));
        }
    }
    y
}

fn functional_names(d: &Design) -> Vec<String> {
    let p = d.data.p();
    let mut names = vec!["sigma".to_string(), "sigma_below_1".to_string()];
    for j in 0..=p {
        for k in 0..d.probes.len() {
            names.push(format!("beta{j}_probe{k}"));
        }
        names.push(format!("beta{j}_probe0_sq"));
        names.push(format!("eta_ratio{j}"));
        names.push(format!("theta{j}_0"));
        names.push(format!("leaves{j}"));
    }
    names.push("mean_y".into());
    names.push("mean_abs_y".into());
    names
}

fn functionals(d: &Design, state: &ChainState, y: &[f64]) -> Vec<f64> {
    let p = d.data.p();
    let mut out = vec![state.sigma, (state.sigma < 1.0) as u8 as f64];
    for j in 0..=p {
        for z in &d.probes {
            out.push(state.beta(j, z));
        }
        out.push(state.beta(j, &d.probes[0]).powi(2));
        out.push(state.sparsity[j].eta_index as f64 / 100.0);
        out.push(state.sparsity[j].theta[0]);
        out.push(state.ensembles[j].iter().map(|t| t.tree.n_leaves()).sum::<usize>() as f64);
    }
    let n = y.len() as f64;
    out.push(y.iter().sum::<f64>() / n);
    out.push(y.iter().map(|v| v.abs()).sum::<f64>() / n);
    out
}

fn mean_var(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (m, v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0))
}

/// Variance of the sample mean of a correlated series by batch means.
fn batch_means_variance(v: &[f64], batches: usize) -> f64 {
    let size = v.len() / batches;
    let means: Vec<f64> = (0..batches).map(|b| v[b * size..(b + 1) * size].iter().sum::<f64>() / size as f64).collect();
    mean_var(&means).1 / batches as f64
}

pub fn run_geweke(cfg: &GewekeConfig) -> Result<GewekeReport> {
    let d = design(cfg)?;
    let names = functional_names(&d);
    let k = names.len();

    let mut rng = chain_rng(cfg.seed, 0);
    let mut forward: Vec<Vec<f64>> = vec![Vec::with_capacity(cfg.samples); k];
    for _ in 0..cfg.samples {
        let st = forward_parameters(&d, &mut rng);
        let y = forward_outcomes(&d, &st, &mut rng);
        for (col, v) in forward.iter_mut().zip(functionals(&d, &st, &y)) {
            col.push(v);
        }
    }

    let mut rng = chain_rng(cfg.seed, 1);
    let start = forward_parameters(&d, &mut rng);
    let y0 = forward_outcomes(&d, &start, &mut rng);
    let mut gibbs = Gibbs::with_state(d.data.clone(), d.hyper.clone(), start)?;
    if cfg.mutation == GewekeMutation::FlippedSigmaPrior {
        gibbs.flip_sigma_prior();
    }
    gibbs.set_outcomes(y0);
    let mut chain: Vec<Vec<f64>> = vec![Vec::with_capacity(cfg.samples); k];
    for _ in 0..cfg.samples {
        gibbs.sweep(&mut rng)?;
        let y = forward_outcomes(&d, gibbs.state(), &mut rng);
        gibbs.set_outcomes(y.clone());
        for (col, v) in chain.iter_mut().zip(functionals(&d, gibbs.state(), &y)) {
            col.push(v);
        }
    }

    let mut out = Vec::new();
    for ((name, f), c) in names.into_iter().zip(&forward).zip(&chain) {
        let (fm, fv) = mean_var(f);
        let (cm, _) = mean_var(c);
        let se2 = fv / f.len() as f64 + batch_means_variance(c, cfg.batches);
        if !(se2 > 0.0) {
            continue;
        }
        out.push(FunctionalComparison { name, forward_mean: fm, chain_mean: cm, z: (fm - cm) / se2.sqrt() });
    }
    Ok(GewekeReport { functionals: out })
}
