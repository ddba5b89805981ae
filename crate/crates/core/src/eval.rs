//! Scoring of fitted models against known truth, cross-validation of ρ and
//! the ordinary least squares comparison model.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::{OutcomeScale, PanelDataset};
use crate::error::{config_err, data_err, Result};
use crate::posterior::{summarize, Band};
use crate::priors::Hyperparameters;
use crate::sampler::{chain_rng, fit_with, ChainState, DrawSink};

/// Default ρ grid for cross-validation.
pub const DEFAULT_RHO_GRID: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 0.9];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryReport {
    pub mse_per_coefficient: Vec<f64>,
    pub mse: f64,
    pub coverage_per_coefficient: Vec<f64>,
    pub coverage: f64,
    pub band_length: f64,
    pub predictive_rmse: f64,
    pub predictive_coverage: f64,
    pub predictive_length: f64,
}

/// `bands[j][k]` is the band for β_j at test point `k` and `truth[j][k]` its
/// true value; `predictions[k]` is the predictive band for `y_test[k]`.
/// Coverage pools every (j, k) evaluation.
pub fn score_recovery(bands: &[Vec<Band>], truth: &[Vec<f64>], predictions: &[Band], y_test: &[f64]) -> Result<RecoveryReport> {
    if bands.len() != truth.len() || bands.iter().zip(truth).any(|(b, t)| b.len() != t.len() || b.is_empty()) {
        return Err(data_err("coefficient bands and truth are not aligned"));
    }
    if predictions.len() != y_test.len() || y_test.is_empty() {
        return Err(data_err("predictions and test outcomes are not aligned"));
    }
    let mut mse_j = Vec::new();
    let mut cov_j = Vec::new();
    let (mut se, mut hits, mut len, mut total) = (0.0, 0usize, 0.0, 0usize);
    for (b, t) in bands.iter().zip(truth) {
        let s: f64 = b.iter().zip(t).map(|(b, t)| (b.mean - t).powi(2)).sum();
        let h = b.iter().zip(t).filter(|(b, t)| b.contains(**t)).count();
        mse_j.push(s / b.len() as f64);
        cov_j.push(h as f64 / b.len() as f64);
        se += s;
        hits += h;
        len += b.iter().map(Band::width).sum::<f64>();
        total += b.len();
    }
    let n = y_test.len() as f64;
    Ok(RecoveryReport {
        mse_per_coefficient: mse_j,
        mse: se / total as f64,
        coverage_per_coefficient: cov_j,
        coverage: hits as f64 / total as f64,
        band_length: len / total as f64,
        predictive_rmse: (predictions.iter().zip(y_test).map(|(p, y)| (p.mean - y).powi(2)).sum::<f64>() / n).sqrt(),
        predictive_coverage: predictions.iter().zip(y_test).filter(|(p, y)| p.contains(**y)).count() as f64 / n,
        predictive_length: predictions.iter().map(Band::width).sum::<f64>() / n,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn add(&mut self, other: &Confusion) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.tn += other.tn;
        self.fn_ += other.fn_;
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub confusion: Confusion,
    pub sensitivity: f64,
    pub specificity: f64,
    pub precision: f64,
    pub accuracy: f64,
}

impl SelectionReport {
    /// Rates from a confusion table; an empty denominator gives 1.0.
    pub fn from_confusion(c: Confusion) -> Self {
        SelectionReport {
            confusion: c,
            sensitivity: ratio(c.tp, c.tp + c.fn_),
            specificity: ratio(c.tn, c.tn + c.fp),
            precision: ratio(c.tp, c.tp + c.fp),
            accuracy: ratio(c.tp + c.tn, c.tp + c.tn + c.fp + c.fn_),
        }
    }
}

/// Pool the `R (p + 1)` include/exclude decisions.
pub fn score_selection(selected: &[Vec<usize>], support: &[Vec<usize>], r: usize) -> Result<SelectionReport> {
    if selected.len() != support.len() {
        return Err(data_err("selected and true supports cover different coefficients"));
    }
    let mut c = Confusion::default();
    for (sel, tru) in selected.iter().zip(support) {
        if sel.iter().chain(tru).any(|&v| v >= r) {
            return Err(data_err(format!("modifier index outside 0..{r}")));
        }
        for v in 0..r {
            match (sel.contains(&v), tru.contains(&v)) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
    }
    Ok(SelectionReport::from_confusion(c))
}

/// Collects, per retained draw, β_j and the mean function at fixed test
/// rows plus σ, all on the original outcome scale, and how often each
/// modifier appears in each ensemble.
pub struct TestPointSink {
    x: Vec<Vec<f64>>,
    z: Vec<Vec<f64>>,
    scale: OutcomeScale,
    r: usize,
    /// `beta[j][k]`: draws of β_j at test row `k`.
    pub beta: Vec<Vec<Vec<f64>>>,
    /// `mean[k]`: draws of the mean function at test row `k`.
    pub mean: Vec<Vec<f64>>,
    pub sigma: Vec<f64>,
    /// `used[j][v]`: draws in which ensemble `j` splits on modifier `v`.
    pub used: Vec<Vec<usize>>,
    pub n_draws: usize,
}

impl TestPointSink {
    pub fn new(test: &PanelDataset, scale: &OutcomeScale) -> Self {
        let n = test.n_obs();
        let p = test.p();
        TestPointSink {
            x: (0..n).map(|k| test.covariate_row(k)).collect(),
            z: (0..n).map(|k| test.modifiers(k).to_vec()).collect(),
            scale: *scale,
            r: test.r(),
            beta: vec![vec![Vec::new(); n]; p + 1],
            mean: vec![Vec::new(); n],
            sigma: Vec::new(),
            used: vec![vec![0; test.r()]; p + 1],
            n_draws: 0,
        }
    }

    /// Pool several chains' sinks.
    pub fn merge(mut sinks: Vec<TestPointSink>) -> TestPointSink {
        let mut out = sinks.remove(0);
        for s in sinks {
            for (a, b) in out.beta.iter_mut().zip(s.beta) {
                for (a, b) in a.iter_mut().zip(b) {
                    a.extend(b);
                }
            }
            for (a, b) in out.mean.iter_mut().zip(s.mean) {
                a.extend(b);
            }
            out.sigma.extend(s.sigma);
            for (a, b) in out.used.iter_mut().zip(s.used) {
                for (a, b) in a.iter_mut().zip(b) {
                    *a += b;
                }
            }
            out.n_draws += s.n_draws;
        }
        out
    }

    pub fn beta_bands(&self, level: f64) -> Result<Vec<Vec<Band>>> {
        self.beta.iter().map(|bj| bj.iter().map(|v| summarize(v, level)).collect()).collect()
    }

    pub fn posterior_mean_predictions(&self) -> Vec<f64> {
        self.mean.iter().map(|v| v.iter().sum::<f64>() / v.len() as f64).collect()
    }

    /// Marginal posterior predictive bands, one normal draw per posterior draw.
    pub fn predictive_bands<G: Rng + ?Sized>(&self, level: f64, rng: &mut G) -> Result<Vec<Band>> {
        self.mean
            .iter()
            .map(|m| {
                let samples: Vec<f64> =
                    m.iter().zip(&self.sigma).map(|(f, s)| f + s * rng.sample::<f64, _>(StandardNormal)).collect();
                let b = summarize(&samples, level)?;
                let mean = m.iter().sum::<f64>() / m.len() as f64;
                Ok(Band { mean, lower: b.lower.min(mean), upper: b.upper.max(mean) })
            })
            .collect()
    }

    pub fn selection_probabilities(&self) -> Vec<Vec<f64>> {
        self.used.iter().map(|u| u.iter().map(|&c| c as f64 / self.n_draws.max(1) as f64).collect()).collect()
    }
}

impl DrawSink for TestPointSink {
    fn record(&mut self, _: usize, state: &ChainState) {
        for (k, (x, z)) in self.x.iter().zip(&self.z).enumerate() {
            let mut f = 0.0;
            for j in 0..self.beta.len() {
                let b = state.beta(j, z);
                f += if j == 0 { b } else { b * x[j - 1] };
                self.beta[j][k].push(self.scale.unstandardize_beta(j, b));
            }
            self.mean[k].push(self.scale.unstandardize(f));
        }
        self.sigma.push(self.scale.sd * state.sigma);
        for (j, u) in self.used.iter_mut().enumerate() {
            for (v, c) in state.split_counts(j, self.r).into_iter().enumerate() {
                if c > 0 {
                    u[v] += 1;
                }
            }
        }
        self.n_draws += 1;
    }
}

/// Fit on `train` and collect draws at the rows of `test`.
pub fn fit_at_test_points(train: &PanelDataset, test: &PanelDataset, hyper: &Hyperparameters) -> Result<TestPointSink> {
    let out = fit_with(train, hyper, |_, scale| TestPointSink::new(test, scale))?;
    Ok(TestPointSink::merge(out.chains.into_iter().map(|(s, _)| s).collect()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    pub chosen: f64,
    /// `(ρ, held-out RMSE per fold)` in grid order.
    pub scores: Vec<(f64, Vec<f64>)>,
}

impl CvResult {
    pub fn mean_rmse(&self) -> Vec<(f64, f64)> {
        self.scores.iter().map(|(rho, s)| (*rho, mean_order_free(s))).collect()
    }
}

// Sum after sorting so that the result does not depend on fold order.
fn mean_order_free(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s.iter().sum::<f64>() / s.len() as f64
}

/// Random by-subject folds of nearly equal size.
pub fn subject_folds<G: Rng + ?Sized>(n_subjects: usize, k: usize, rng: &mut G) -> Result<Vec<Vec<usize>>> {
    if k < 2 || k > n_subjects {
        return Err(config_err(format!("cannot make {k} folds from {n_subjects} subjects")));
    }
    let mut idx: Vec<usize> = (0..n_subjects).collect();
    idx.shuffle(rng);
    Ok((0..k).map(|f| idx.iter().skip(f).step_by(k).copied().collect()).collect())
}

fn fold_seed(base: u64, data: &PanelDataset, held_out: &[usize], rho: f64) -> u64 {
    let mut ids: Vec<&str> = held_out.iter().map(|&i| data.subject_ids()[i].as_str()).collect();
    ids.sort_unstable();
    let mut h = Sha256::new();
    h.update(base.to_le_bytes());
    h.update(rho.to_bits().to_le_bytes());
    for id in ids {
        h.update(id.as_bytes());
        h.update([0u8]);
    }
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("eight bytes"))
}

/// Cross-validate ρ over given by-subject folds. Each fit's seed is derived
/// from the held-out subjects and ρ, so permuting the folds does not change
/// the result. Ties go to the smaller ρ.
pub fn cv_rho_with_folds(data: &PanelDataset, grid: &[f64], folds: &[Vec<usize>], hyper: &Hyperparameters) -> Result<CvResult> {
    if grid.is_empty() {
        return Err(config_err("rho grid is empty"));
    }
    if folds.iter().any(|f| f.is_empty()) {
        return Err(config_err("fold with zero subjects"));
    }
    let mut scores = Vec::new();
    for &rho in grid {
        let mut per_fold = Vec::new();
        for held in folds {
            let train_idx: Vec<usize> = (0..data.n_subjects()).filter(|i| !held.contains(i)).collect();
            if train_idx.is_empty() {
                return Err(config_err("fold leaves no training subjects"));
            }
            let train = data.subset(&train_idx);
            let test = data.subset(held);
            let mut h = hyper.clone();
            h.rho = rho;
            h.seed = fold_seed(hyper.seed, data, held, rho);
            let sink = fit_at_test_points(&train, &test, &h)?;
            let pred = sink.posterior_mean_predictions();
            let mse = pred.iter().zip(test.y()).map(|(p, y)| (p - y).powi(2)).sum::<f64>() / pred.len() as f64;
            per_fold.push(mse.sqrt());
        }
        scores.push((rho, per_fold));
    }
    let res = CvResult { chosen: 0.0, scores };
    Ok(CvResult { chosen: choose_rho(&res.mean_rmse()), ..res })
}

/// ρ with the smallest score; ties go to the smaller ρ.
pub fn choose_rho(scores: &[(f64, f64)]) -> f64 {
    let mut best = (f64::INFINITY, f64::INFINITY);
    for &(rho, m) in scores {
        if m < best.1 || (m == best.1 && rho < best.0) {
            best = (rho, m);
        }
    }
    best.0
}

pub fn cv_rho<G: Rng + ?Sized>(
    data: &PanelDataset,
    grid: &[f64],
    k: usize,
    hyper: &Hyperparameters,
    rng: &mut G,
) -> Result<CvResult> {
    let folds = subject_folds(data.n_subjects(), k, rng)?;
    cv_rho_with_folds(data, grid, &folds, hyper)
}

/// Ordinary least squares of y on (1, x) ignoring the modifiers.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearFit {
    pub coefficients: Vec<f64>,
    pub standard_errors: Vec<f64>,
    /// Residual variance estimate.
    pub sigma2: f64,
    pub ridge: bool,
    xtx_inv: DMatrix<f64>,
}

fn design_row(data: &PanelDataset, row: usize) -> Vec<f64> {
    let mut v = vec![1.0];
    v.extend(data.covariate_row(row));
    v
}

impl LinearFit {
    pub fn fit(train: &PanelDataset) -> Result<Self> {
        let n = train.n_obs();
        let k = train.p() + 1;
        let x = DMatrix::from_fn(n, k, |i, j| if j == 0 { 1.0 } else { train.covariate(j)[i] });
        let y = DVector::from_column_slice(train.y());
        let mut xtx = x.transpose() * &x;
        let xty = x.transpose() * &y;
        let scale = (0..k).map(|i| xtx[(i, i)]).fold(0.0, f64::max).max(1.0);
        // a Cholesky pivot that collapses relative to the largest diagonal
        // entry signals (near) rank deficiency
        let ok = xtx.clone().cholesky().filter(|c| {
            let l = c.l_dirty();
            (0..k).all(|i| l[(i, i)] * l[(i, i)] > 1e-10 * scale)
        });
        let (chol, ridge) = match ok {
            Some(c) => (c, false),
            None => {
                for i in 0..k {
                    xtx[(i, i)] += 1e-8;
                }
                let c = xtx.clone().cholesky().ok_or_else(|| data_err("design matrix is degenerate"))?;
                (c, true)
            }
        };
        let beta = chol.solve(&xty);
        let resid = &y - &x * &beta;
        let dof = (n as f64 - k as f64).max(1.0);
        let sigma2 = resid.norm_squared() / dof;
        let xtx_inv = chol.inverse();
        Ok(LinearFit {
            coefficients: beta.iter().copied().collect(),
            standard_errors: (0..k).map(|j| (sigma2 * xtx_inv[(j, j)]).max(0.0).sqrt()).collect(),
            sigma2,
            ridge,
            xtx_inv,
        })
    }

    pub fn predict_row(&self, x: &[f64]) -> f64 {
        self.coefficients[0] + x.iter().zip(&self.coefficients[1..]).map(|(a, b)| a * b).sum::<f64>()
    }

    pub fn predict(&self, data: &PanelDataset) -> Vec<f64> {
        (0..data.n_obs()).map(|row| self.predict_row(&data.covariate_row(row))).collect()
    }

    /// Normal-theory confidence band for coefficient `j` (constant in z).
    pub fn coefficient_band(&self, j: usize, level: f64) -> Band {
        let q = normal_quantile(0.5 + 0.5 * level);
        let m = self.coefficients[j];
        Band { mean: m, lower: m - q * self.standard_errors[j], upper: m + q * self.standard_errors[j] }
    }

    /// Normal-theory prediction interval at a covariate row.
    pub fn prediction_band(&self, x: &[f64], level: f64) -> Band {
        let q = normal_quantile(0.5 + 0.5 * level);
        let d = DVector::from_iterator(x.len() + 1, std::iter::once(1.0).chain(x.iter().copied()));
        let lev = (d.transpose() * &self.xtx_inv * &d)[(0, 0)];
        let m = self.predict_row(x);
        let half = q * (self.sigma2 * (1.0 + lev)).sqrt();
        Band { mean: m, lower: m - half, upper: m + half }
    }
}

/// Fit OLS on `train`, return predictions on `test` and the coefficients.
pub fn linear_baseline(train: &PanelDataset, test: &PanelDataset) -> Result<(Vec<f64>, LinearFit)> {
    let fit = LinearFit::fit(train)?;
    Ok((fit.predict(test), fit))
}

pub fn linear_baseline_rows(fit: &LinearFit, data: &PanelDataset, level: f64) -> Vec<Band> {
    (0..data.n_obs()).map(|row| fit.prediction_band(&design_row(data, row)[1..], level)).collect()
}

pub fn normal_quantile(p: f64) -> f64 {
    Normal::new(0.0, 1.0).expect("standard normal").inverse_cdf(p)
}

/// Independent seed for replicate `i` of a run seeded with `seed`.
pub fn replicate_rng(seed: u64, i: usize) -> rand_chacha::ChaCha8Rng {
    chain_rng(seed ^ 0x5EED_0000_0000_0000, i)
}
