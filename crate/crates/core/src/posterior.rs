//! Summaries of retained draws: coefficient surfaces with credible bands,
//! posterior predictive intervals and modifier selection.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{ColumnNames, ModifierScaling, OutcomeScale, PanelDataset};
use crate::error::{config_err, data_err, Result};
use crate::error_model::CompoundSymmetry;
use crate::priors::Hyperparameters;
use crate::sampler::{fit_with, ChainState, ChainSummary, DrawSink};

/// Minimum number of draws for quantile summaries.
pub const MIN_DRAWS: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorDraw {
    pub chain: usize,
    pub iteration: usize,
    /// State on the sampler's standardized outcome scale.
    pub state: ChainState,
}

/// Pooled post-burn-in draws with the metadata needed to interpret them.
#[derive(Debug, Clone, PartialEq)]
pub struct Posterior {
    pub draws: Vec<PosteriorDraw>,
    pub hyper: Hyperparameters,
    pub scale: OutcomeScale,
    pub scaling: ModifierScaling,
    pub names: ColumnNames,
    pub data_fingerprint: String,
    pub chains: Vec<ChainSummary>,
}

#[derive(Default)]
struct Collector {
    chain: usize,
    draws: Vec<PosteriorDraw>,
}

impl DrawSink for Collector {
    fn record(&mut self, iteration: usize, state: &ChainState) {
        self.draws.push(PosteriorDraw { chain: self.chain, iteration, state: state.clone() });
    }
}

/// Fit the model and keep every retained draw.
pub fn fit(data: &PanelDataset, hyper: &Hyperparameters) -> Result<Posterior> {
    let out = fit_with(data, hyper, |chain, _| Collector { chain, draws: Vec::new() })?;
    let mut draws = Vec::new();
    let mut chains = Vec::new();
    for (c, s) in out.chains {
        draws.extend(c.draws);
        chains.push(s);
    }
    Ok(Posterior {
        draws,
        hyper: hyper.clone(),
        scale: out.scale,
        scaling: data.scaling.clone(),
        names: data.names.clone(),
        data_fingerprint: data.fingerprint(),
        chains,
    })
}

/// Mean and equal-tailed interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Band {
    pub mean: f64,
    pub lower: f64,
    pub upper: f64,
}

impl Band {
    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }

    pub fn contains(&self, v: f64) -> bool {
        self.lower <= v && v <= self.upper
    }
}

/// Quantile of sorted values by linear interpolation between order
/// statistics: position `(n - 1) q`, zero-based.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    let h = (n - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Mean and equal-tailed `level` interval of a sample.
pub fn summarize(values: &[f64], level: f64) -> Result<Band> {
    if values.len() < MIN_DRAWS {
        return Err(data_err(format!("need at least {MIN_DRAWS} draws, got {}", values.len())));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(config_err(format!("interval level must be in (0, 1), got {level}")));
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    let a = 0.5 * (1.0 - level);
    let band = Band { mean, lower: quantile_sorted(&s, a), upper: quantile_sorted(&s, 1.0 - a) };
    // keep lower ≤ mean ≤ upper even for badly skewed samples
    Ok(Band { lower: band.lower.min(mean), upper: band.upper.max(mean), ..band })
}

/// Fraction of draws whose split counts include each modifier at least once.
pub fn selection_probabilities(counts: &[Vec<usize>]) -> Vec<f64> {
    let Some(first) = counts.first() else {
        return Vec::new();
    };
    let n = counts.len() as f64;
    (0..first.len()).map(|r| counts.iter().filter(|c| c[r] >= 1).count() as f64 / n).collect()
}

/// Modifiers whose selection probability exceeds one half.
pub fn median_probability_model(probs: &[f64]) -> Vec<usize> {
    probs.iter().enumerate().filter(|(_, p)| **p > 0.5).map(|(r, _)| r).collect()
}

/// One earlier observation of the subject being forecast, on the original scales.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub x: Vec<f64>,
    pub z: Vec<f64>,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum PredictMode<'a> {
    /// New subject: noise variance σ².
    Marginal,
    /// Same subject as the given history (`None` is an error).
    Conditional(Option<&'a [Observation]>),
}

impl Posterior {
    pub fn n_draws(&self) -> usize {
        self.draws.len()
    }

    pub fn p(&self) -> usize {
        self.names.covariates.len()
    }

    pub fn r(&self) -> usize {
        self.names.modifiers.len()
    }

    /// β_j(z) in every draw, on the original outcome scale. `z` is on the
    /// rescaled [0, 1] domain.
    pub fn beta_at(&self, j: usize, z: &[f64]) -> Vec<f64> {
        self.draws.iter().map(|d| self.scale.unstandardize_beta(j, d.state.beta(j, z))).collect()
    }

    pub fn beta_summary(&self, j: usize, zs: &[Vec<f64>], level: f64) -> Result<Vec<Band>> {
        if j > self.p() {
            return Err(config_err(format!("no coefficient {j}")));
        }
        zs.iter().map(|z| summarize(&self.beta_at(j, z), level)).collect()
    }

    /// Mean function in a draw, original scale.
    fn mean_in(&self, d: &PosteriorDraw, x: &[f64], z: &[f64]) -> f64 {
        self.scale.unstandardize(d.state.mean(x, z))
    }

    fn check_point(&self, x: &[f64], z: &[f64]) -> Result<()> {
        if x.len() != self.p() || z.len() != self.r() {
            return Err(data_err(format!(
                "expected {} covariates and {} modifiers, got {} and {}",
                self.p(),
                self.r(),
                x.len(),
                z.len()
            )));
        }
        Ok(())
    }

    /// Posterior predictive mean and interval for one new observation. One
    /// standard normal is drawn per posterior draw, so both modes consume
    /// `rng` identically.
    pub fn predict<G: Rng + ?Sized>(
        &self,
        x: &[f64],
        z: &[f64],
        mode: &PredictMode,
        level: f64,
        rng: &mut G,
    ) -> Result<Band> {
        self.check_point(x, z)?;
        let cs = CompoundSymmetry::new(self.hyper.rho)?;
        let history = match mode {
            PredictMode::Marginal => None,
            PredictMode::Conditional(None) => {
                return Err(data_err("conditional prediction needs the subject's residual history"))
            }
            PredictMode::Conditional(Some(h)) => {
                for o in h.iter() {
                    self.check_point(&o.x, &o.z)?;
                }
                Some(*h)
            }
        };
        let mut centers = Vec::with_capacity(self.draws.len());
        let mut samples = Vec::with_capacity(self.draws.len());
        let mut resid = Vec::new();
        for d in &self.draws {
            let sigma = self.scale.sd * d.state.sigma;
            let (shift, var) = match history {
                None => (0.0, sigma * sigma),
                Some(h) => {
                    resid.clear();
                    resid.extend(h.iter().map(|o| o.y - self.mean_in(d, &o.x, &o.z)));
                    cs.conditional_predictive(sigma, &resid)
                }
            };
            let c = self.mean_in(d, x, z) + shift;
            let e: f64 = rng.sample(StandardNormal);
            centers.push(c);
            samples.push(c + var.sqrt() * e);
        }
        let band = summarize(&samples, level)?;
        let mean = centers.iter().sum::<f64>() / centers.len() as f64;
        Ok(Band { mean, lower: band.lower.min(mean), upper: band.upper.max(mean) })
    }

    /// Per-draw split counts for ensemble `j`.
    pub fn split_counts(&self, j: usize) -> Vec<Vec<usize>> {
        let r = self.r();
        self.draws.iter().map(|d| d.state.split_counts(j, r)).collect()
    }

    pub fn selection_probabilities(&self, j: usize) -> Vec<f64> {
        selection_probabilities(&self.split_counts(j))
    }

    pub fn median_probability_model(&self, j: usize) -> Vec<usize> {
        median_probability_model(&self.selection_probabilities(j))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampler::chain_rng;
    use crate::tree::{DecisionTree, DecisionRule, RegressionTree};

    fn posterior_from(states: Vec<ChainState>, p: usize, r: usize, rho: f64, scale: OutcomeScale) -> Posterior {
        let mut hyper = Hyperparameters::defaults(p);
        hyper.trees = states[0].ensembles[0].len();
        hyper.rho = rho;
        Posterior {
            draws: states
                .into_iter()
                .enumerate()
                .map(|(i, state)| PosteriorDraw { chain: 0, iteration: i, state })
                .collect(),
            hyper,
            scale,
            scaling: ModifierScaling::identity(r),
            names: ColumnNames::generic(p, r),
            data_fingerprint: String::new(),
            chains: Vec::new(),
        }
    }

    fn constant_state(p: usize, r: usize, jumps: &[&[f64]], sigma: f64) -> ChainState {
        let mut st = ChainState::initial(p, r, jumps[0].len());
        for (j, js) in jumps.iter().enumerate() {
            st.ensembles[j] = js.iter().map(|&m| RegressionTree::constant(m)).collect();
        }
        st.sigma = sigma;
        st
    }

    #[test]
    fn quantile_convention() {
        let v: Vec<f64> = (1..=100).map(|i| i as f64).collect();
        let b = summarize(&v, 0.95).unwrap();
        assert!((b.lower - 3.475).abs() < 1e-12);
        assert!((b.upper - 97.525).abs() < 1e-12);
        assert_eq!(b.mean, 50.5);
        let c = summarize(&[2.5; 20], 0.9).unwrap();
        assert_eq!((c.lower, c.mean, c.upper), (2.5, 2.5, 2.5));
        assert!(summarize(&[1.0; 9], 0.9).is_err());
        assert!(summarize(&v, 1.0).is_err());
    }

    /// Expected band width approaches its limit from below as draws
    /// accumulate, and its spread across repetitions shrinks.
    #[test]
    fn band_width_settles_with_more_draws() {
        let mut rng = chain_rng(3, 0);
        let mut spread = Vec::new();
        for n in [50, 500, 5000] {
            let widths: Vec<f64> = (0..10)
                .map(|_| {
                    let v: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
                    summarize(&v, 0.95).unwrap().width()
                })
                .collect();
            let m = widths.iter().sum::<f64>() / 10.0;
            spread.push(widths.iter().map(|w| (w - m).abs()).sum::<f64>() / 10.0);
            if n == 5000 {
                assert!((m - 2.0 * 1.959964).abs() < 0.1, "{m}");
            }
        }
        assert!(spread.windows(2).all(|w| w[1] <= w[0]), "{spread:?}");
    }

    #[test]
    fn nested_bands() {
        let mut rng = chain_rng(4, 0);
        let v: Vec<f64> = (0..1000).map(|_| rng.random::<f64>().powi(3)).collect();
        let a = summarize(&v, 0.5).unwrap();
        let b = summarize(&v, 0.95).unwrap();
        assert!(b.lower <= a.lower && a.upper <= b.upper);
        assert!(a.lower <= a.mean && a.mean <= a.upper);
    }

    #[test]
    fn beta_sums_trees_and_destandardizes() {
        let st = constant_state(1, 2, &[&[1.0, 2.0], &[0.5, 0.0]], 1.0);
        let post = posterior_from(vec![st.clone(); 12], 1, 2, 0.0, OutcomeScale::IDENTITY);
        assert_eq!(post.beta_at(0, &[0.1, 0.2]), vec![3.0; 12]);
        let scaled = posterior_from(vec![st; 12], 1, 2, 0.0, OutcomeScale { mean: 10.0, sd: 2.0 });
        assert_eq!(scaled.beta_at(0, &[0.1, 0.2])[0], 16.0);
        assert_eq!(scaled.beta_at(1, &[0.1, 0.2])[0], 1.0);
        let zero = posterior_from(vec![ChainState::initial(1, 2, 3); 12], 1, 2, 0.0, OutcomeScale::IDENTITY);
        assert!(zero.beta_at(1, &[0.5, 0.5]).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn summary_mean_equals_draw_mean() {
        let states: Vec<ChainState> = (0..15).map(|k| constant_state(0, 1, &[&[k as f64 * 0.3]], 1.0)).collect();
        let post = posterior_from(states, 0, 1, 0.0, OutcomeScale { mean: 1.0, sd: 3.0 });
        let per = post.beta_at(0, &[0.4]);
        let s = post.beta_summary(0, &[vec![0.4]], 0.95).unwrap();
        assert_eq!(s[0].mean, per.iter().sum::<f64>() / per.len() as f64);
        assert!(post.beta_summary(1, &[vec![0.4]], 0.95).is_err());
    }

    #[test]
    fn predictive_interval_of_pure_noise() {
        let st = constant_state(0, 1, &[&[0.0]], 1.5);
        let post = posterior_from(vec![st; 40_000], 0, 1, 0.0, OutcomeScale::IDENTITY);
        let b = post.predict(&[], &[0.5], &PredictMode::Marginal, 0.95, &mut chain_rng(1, 0)).unwrap();
        assert!(b.mean.abs() < 1e-12);
        assert!((b.upper - 1.96 * 1.5).abs() < 0.05);
        assert!((b.lower + 1.96 * 1.5).abs() < 0.05);
        // level close to one reaches out toward the extremes of the sample
        let wide = post.predict(&[], &[0.5], &PredictMode::Marginal, 0.9999, &mut chain_rng(1, 0)).unwrap();
        assert!(wide.width() > 1.7 * b.width());
    }

    #[test]
    fn conditional_with_empty_history_matches_marginal_at_rho_zero() {
        let states: Vec<ChainState> = (0..50).map(|k| constant_state(1, 1, &[&[0.1 * k as f64], &[1.0]], 0.5 + 0.01 * k as f64)).collect();
        let post = posterior_from(states, 1, 1, 0.0, OutcomeScale { mean: 2.0, sd: 1.5 });
        let a = post.predict(&[0.7], &[0.3], &PredictMode::Marginal, 0.9, &mut chain_rng(8, 0)).unwrap();
        let b = post.predict(&[0.7], &[0.3], &PredictMode::Conditional(Some(&[])), 0.9, &mut chain_rng(8, 0)).unwrap();
        assert_eq!(a, b);
        assert!(post.predict(&[0.7], &[0.3], &PredictMode::Conditional(None), 0.9, &mut chain_rng(8, 0)).is_err());
        assert!(post.predict(&[0.7, 1.0], &[0.3], &PredictMode::Marginal, 0.9, &mut chain_rng(8, 0)).is_err());
    }

    #[test]
    fn conditional_mode_shifts_toward_history() {
        let st = constant_state(0, 1, &[&[0.0]], 1.0);
        let post = posterior_from(vec![st; 2000], 0, 1, 0.6, OutcomeScale::IDENTITY);
        let hist = [Observation { x: vec![], z: vec![0.2], y: 2.0 }];
        let b = post.predict(&[], &[0.2], &PredictMode::Conditional(Some(&hist)), 0.95, &mut chain_rng(2, 0)).unwrap();
        assert!((b.mean - 1.2).abs() < 1e-12);
        let m = post.predict(&[], &[0.2], &PredictMode::Marginal, 0.95, &mut chain_rng(2, 0)).unwrap();
        assert!(b.width() < m.width());
    }

    #[test]
    fn selection_examples() {
        let split = |axis: usize| {
            let t = DecisionTree::root().grow(0, DecisionRule::new(axis, 0.5));
            RegressionTree::new(t, vec![0.0, 0.0])
        };
        let mut states = Vec::new();
        for axis in [0, 1, 0] {
            let mut st = ChainState::initial(0, 3, 1);
            st.ensembles[0][0] = split(axis);
            states.push(st);
        }
        let post = posterior_from(states, 0, 3, 0.0, OutcomeScale::IDENTITY);
        let probs = post.selection_probabilities(0);
        assert!((probs[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((probs[1] - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(probs[2], 0.0);
        assert_eq!(post.median_probability_model(0), vec![0]);
        assert_eq!(median_probability_model(&[0.6, 0.4]), vec![0]);
        assert!(median_probability_model(&[0.5, 0.5]).is_empty());
        assert_eq!(median_probability_model(&[1.0; 4]), vec![0, 1, 2, 3]);
        assert_eq!(selection_probabilities(&[vec![1, 2], vec![3, 4]]), vec![1.0, 1.0]);
    }

    fn linear_panel(seed: u64, scale_y: f64, shift_y: f64) -> PanelDataset {
        let mut rng = chain_rng(seed, 0);
        let n = 60;
        let mut y = Vec::new();
        let mut x = Vec::new();
        let mut z = Vec::new();
        for _ in 0..n * 3 {
            let xv: f64 = rng.sample(StandardNormal);
            let e: f64 = rng.sample(StandardNormal);
            x.push(xv);
            z.push(rng.random::<f64>());
            y.push(shift_y + scale_y * (2.0 * xv + 0.5 * e));
        }
        PanelDataset::from_rows(
            (0..n).map(|i| i.to_string()).collect(),
            &vec![3; n],
            y,
            &x,
            z,
            ModifierScaling::identity(1),
            ColumnNames::generic(1, 1),
        )
        .unwrap()
    }

    fn quick_hyper() -> Hyperparameters {
        let mut h = Hyperparameters::defaults(1).with_trees(20);
        h.n_iter = 400;
        h.n_burn = 200;
        h
    }

    #[test]
    fn recovers_linear_slope() {
        let post = fit(&linear_panel(1, 1.0, 0.0), &quick_hyper()).unwrap();
        assert_eq!(post.n_draws(), 400);
        let a = post.predict(&[1.0], &[0.5], &PredictMode::Marginal, 0.9, &mut chain_rng(0, 0)).unwrap();
        let b = post.predict(&[-1.0], &[0.5], &PredictMode::Marginal, 0.9, &mut chain_rng(0, 0)).unwrap();
        let slope = (a.mean - b.mean) / 2.0;
        assert!((slope - 2.0).abs() < 0.2, "{slope}");
    }

    /// Standardization is internal, so rescaling the outcome rescales every
    /// summary by exactly the same affine map.
    #[test]
    fn destandardization_round_trip() {
        let h = quick_hyper();
        let a = fit(&linear_panel(5, 1.0, 0.0), &h).unwrap();
        let b = fit(&linear_panel(5, 3.0, -7.0), &h).unwrap();
        for z in [0.1, 0.6] {
            let (a0, b0) = (a.beta_at(0, &[z]), b.beta_at(0, &[z]));
            let (a1, b1) = (a.beta_at(1, &[z]), b.beta_at(1, &[z]));
            for k in 0..a0.len() {
                assert!((b0[k] - (3.0 * a0[k] - 7.0)).abs() < 1e-8);
                assert!((b1[k] - 3.0 * a1[k]).abs() < 1e-8);
            }
        }
    }
}
