//! Synthetic benchmark: five correlated covariates, twenty uniform modifiers
//! (six of them dichotomized) and six known coefficient functions.

use std::f64::consts::PI;
use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{ColumnNames, ModifierScaling, PanelDataset};
use crate::error::{config_err, Error, Result};
use crate::sampler::chain_rng;

pub const P: usize = 5;
pub const R: usize = 20;
/// 0-based modifier columns that are thresholded to {0, 1}.
pub const BINARY_MODIFIERS: [usize; 6] = [1, 15, 16, 17, 18, 19];
pub const GP_GRID: usize = 1001;

/// Modifiers (0-based) each coefficient actually depends on.
pub fn true_support(j: usize) -> &'static [usize] {
    const S: [&[usize]; 6] = [&[0, 1], &[0], &[0], &[0, 2, 3], &[0, 1, 2, 3, 4], &[0, 1, 2, 3]];
    S[j]
}

/// Rows of mean-zero Gaussian covariates with covariance `0.75^{|i-j|}`,
/// returned row-major.
pub fn gen_covariates<G: Rng + ?Sized>(count: usize, p: usize, rng: &mut G) -> Vec<f64> {
    let cov = covariate_covariance(p);
    let l = cov.cholesky().expect("AR(1) covariance is positive definite").unpack();
    let mut out = Vec::with_capacity(count * p);
    for _ in 0..count {
        let e = DVector::from_fn(p, |_, _| rng.sample::<f64, _>(StandardNormal));
        out.extend((&l * e).iter());
    }
    out
}

pub fn covariate_covariance(p: usize) -> DMatrix<f64> {
    DMatrix::from_fn(p, p, |i, j| 0.75f64.powi((i as i32 - j as i32).abs()))
}

/// Uniform modifiers, row-major; the binary columns become `1` when the
/// uniform draw is at least 0.5.
pub fn gen_modifiers<G: Rng + ?Sized>(count: usize, r: usize, rng: &mut G) -> Vec<f64> {
    let mut out = Vec::with_capacity(count * r);
    for _ in 0..count {
        for v in 0..r {
            let u: f64 = rng.random();
            out.push(if BINARY_MODIFIERS.contains(&v) { (u >= 0.5) as u8 as f64 } else { u });
        }
    }
    out
}

/// Closed-form coefficient functions. `β₁` is a Gaussian-process draw and
/// lives in [`Beta1Table`].
pub fn beta_closed_form(j: usize, z: &[f64]) -> Result<f64> {
    let z1 = z[0];
    Ok(match j {
        0 => 3.0 * z1 + (2.0 - 5.0 * z[1]) * (PI * z1).sin() - 2.0 * z[1],
        1 => return Err(config_err("beta 1 is a Gaussian-process draw; use Beta1Table")),
        2 => {
            let hi = if z1 > 0.6 { 3.0 - 3.0 * z1 * z1 * (6.0 * PI * z1).cos() } else { 0.0 };
            let lo = if z1 < 0.25 { 10.0 * z1.sqrt() } else { 0.0 };
            hi - lo
        }
        3 => (1.0 - z[2]).cbrt() * (3.0 * PI * (1.0 - z[3])).sin() - (1.0 - z1).sqrt(),
        4 => 10.0 * (PI * z1 * z[1]).sin() + 20.0 * (z[2] - 0.5).powi(2) + 10.0 * z[3] + 5.0 * z[4],
        5 => (0.9 * (z1 + 0.48)).powi(10).sin().exp() + z[1] * z[2] + z[3],
        _ => return Err(config_err(format!("no coefficient function {j}"))),
    })
}

pub fn gp_kernel(a: f64, b: f64) -> f64 {
    let d2 = (a - b).powi(2);
    2.0 * (-d2 / (2.0 * 0.05f64.powi(2)) - 2.0 / 0.1f64.powi(2) * (PI * d2 / 4.0).sin()).exp()
}

/// Lower Cholesky factor of the kernel matrix on the grid, with the jitter
/// that made it factor.
pub struct GpFactor {
    pub lower: DMatrix<f64>,
    pub jitter: f64,
}

fn factor_kernel(grid: &[f64]) -> Result<GpFactor> {
    let n = grid.len();
    let k = DMatrix::from_fn(n, n, |i, j| gp_kernel(grid[i], grid[j]));
    let mut jitter = 1e-8;
    while jitter <= 1e-2 * (1.0 + 1e-9) {
        let mut kj = k.clone();
        for i in 0..n {
            kj[(i, i)] += jitter;
        }
        if let Some(c) = kj.cholesky() {
            return Ok(GpFactor { lower: c.unpack(), jitter });
        }
        jitter *= 10.0;
    }
    Err(Error::Numerical("kernel matrix not positive definite even with jitter 1e-2".into()))
}

pub fn gp_grid() -> Vec<f64> {
    (0..GP_GRID).map(|i| i as f64 / (GP_GRID - 1) as f64).collect()
}

/// The factor depends only on the fixed grid, so it is computed once.
pub fn gp_factor() -> Result<&'static GpFactor> {
    static FACTOR: OnceLock<std::result::Result<GpFactor, String>> = OnceLock::new();
    FACTOR
        .get_or_init(|| factor_kernel(&gp_grid()).map_err(|e| e.to_string()))
        .as_ref()
        .map_err(|e| Error::Numerical(e.clone()))
}

/// β₁ tabulated on the grid and linearly interpolated between grid points.
#[derive(Debug, Clone, PartialEq)]
pub struct Beta1Table {
    pub values: Vec<f64>,
}

impl Beta1Table {
    pub fn draw<G: Rng + ?Sized>(rng: &mut G) -> Result<Self> {
        let f = gp_factor()?;
        let e = DVector::from_fn(GP_GRID, |_, _| rng.sample::<f64, _>(StandardNormal));
        Ok(Beta1Table { values: (&f.lower * e).iter().copied().collect() })
    }

    pub fn evaluate(&self, z1: f64) -> f64 {
        let n = self.values.len() - 1;
        let pos = z1.clamp(0.0, 1.0) * n as f64;
        let i = (pos.floor() as usize).min(n - 1);
        let w = pos - i as f64;
        self.values[i] * (1.0 - w) + self.values[i + 1] * w
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n: usize,
    pub n_i: usize,
    pub sigma: f64,
    pub rho: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig { n: 500, n_i: 4, sigma: 1.0, rho: 0.0, seed: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticTruth {
    pub config: SyntheticConfig,
    pub beta1: Beta1Table,
    /// `beta[j][row]`: true coefficient values at each generated row.
    pub beta: Vec<Vec<f64>>,
}

impl SyntheticTruth {
    pub fn beta_true(&self, j: usize, z: &[f64]) -> f64 {
        if j == 1 {
            self.beta1.evaluate(z[0])
        } else {
            beta_closed_form(j, z).expect("valid coefficient index")
        }
    }

    pub fn support(&self, j: usize) -> &'static [usize] {
        true_support(j)
    }

    /// Truth restricted to the given subjects, in order, matching
    /// [`PanelDataset::subset`].
    pub fn subset(&self, data: &PanelDataset, subjects: &[usize]) -> SyntheticTruth {
        let rows: Vec<usize> = subjects.iter().flat_map(|&i| data.subject_rows(i)).collect();
        SyntheticTruth {
            config: self.config,
            beta1: self.beta1.clone(),
            beta: self.beta.iter().map(|b| rows.iter().map(|&r| b[r]).collect()).collect(),
        }
    }
}

/// Generate the benchmark panel. All randomness comes from `config.seed`.
pub fn gen_panel(config: &SyntheticConfig) -> Result<(PanelDataset, SyntheticTruth)> {
    if !(0.0..1.0).contains(&config.rho) {
        return Err(config_err("rho must lie in [0, 1)"));
    }
    if config.n == 0 || config.n_i == 0 {
        return Err(config_err("need at least one subject and one observation"));
    }
    let mut rng = chain_rng(config.seed, 0);
    let beta1 = Beta1Table::draw(&mut rng)?;
    let rows = config.n * config.n_i;
    let x = gen_covariates(rows, P, &mut rng);
    let z = gen_modifiers(rows, R, &mut rng);
    let mut truth = SyntheticTruth { config: *config, beta1, beta: vec![Vec::with_capacity(rows); P + 1] };
    let mut y = Vec::with_capacity(rows);
    let (a, b) = (config.rho.sqrt(), (1.0 - config.rho).sqrt());
    for i in 0..config.n {
        let shared: f64 = rng.sample(StandardNormal);
        for t in 0..config.n_i {
            let row = i * config.n_i + t;
            let zr = &z[row * R..(row + 1) * R];
            let mut f = 0.0;
            for j in 0..=P {
                let bj = truth.beta_true(j, zr);
                truth.beta[j].push(bj);
                f += bj * if j == 0 { 1.0 } else { x[row * P + j - 1] };
            }
            let e: f64 = rng.sample(StandardNormal);
            y.push(f + config.sigma * (a * shared + b * e));
        }
    }
    let data = PanelDataset::from_rows(
        (0..config.n).map(|i| format!("{}", i + 1)).collect(),
        &vec![config.n_i; config.n],
        y,
        &x,
        z,
        ModifierScaling::identity(R),
        ColumnNames::generic(P, R),
    )?;
    Ok((data, truth))
}

/// Disjoint random training and test subject sets.
pub fn split_subjects<G: Rng + ?Sized>(
    n: usize,
    n_train: usize,
    n_test: usize,
    rng: &mut G,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if n_train + n_test > n {
        return Err(config_err(format!("cannot draw {n_train} + {n_test} subjects from {n}")));
    }
    let idx = sample_indices(rng, n, n_train + n_test).into_vec();
    Ok((idx[..n_train].to_vec(), idx[n_train..].to_vec()))
}
