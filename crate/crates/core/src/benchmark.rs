//! The synthetic train/test benchmark: repeated random splits of one
//! generated panel, scoring the tree model and the linear baseline.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::PanelDataset;
use crate::error::Result;
use crate::eval::{
    fit_at_test_points, linear_baseline_rows, replicate_rng, score_recovery, score_selection, Confusion,
    LinearFit, RecoveryReport, SelectionReport,
};
use crate::posterior::{median_probability_model, Band};
use crate::priors::Hyperparameters;
use crate::synthetic::{gen_panel, split_subjects, true_support, SyntheticConfig, SyntheticTruth, P, R};

#[derive(Debug, Clone)]
pub struct BenchmarkConfig {
    pub synthetic: SyntheticConfig,
    pub hyper: Hyperparameters,
    pub replicates: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub level: f64,
    pub seed: u64,
}

impl BenchmarkConfig {
    pub fn new(seed: u64) -> Self {
        let mut hyper = Hyperparameters::defaults(P);
        hyper.seed = seed;
        BenchmarkConfig {
            synthetic: SyntheticConfig { seed, ..Default::default() },
            hyper,
            replicates: 25,
            n_train: 75,
            n_test: 25,
            level: 0.95,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateResult {
    pub replicate: usize,
    pub vcbart: RecoveryReport,
    pub baseline: RecoveryReport,
    pub selection: SelectionReport,
}

/// One row of the flat results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub replicate: usize,
    pub method: String,
    pub metric: String,
    pub value: f64,
}

fn recovery_rows(replicate: usize, method: &str, r: &RecoveryReport, out: &mut Vec<ResultRow>) {
    let mut push = |metric: String, value: f64| {
        out.push(ResultRow { replicate, method: method.to_string(), metric, value });
    };
    push("beta_mse".into(), r.mse);
    push("beta_coverage".into(), r.coverage);
    push("beta_band_length".into(), r.band_length);
    push("predictive_rmse".into(), r.predictive_rmse);
    push("predictive_coverage".into(), r.predictive_coverage);
    push("predictive_length".into(), r.predictive_length);
    for (j, v) in r.mse_per_coefficient.iter().enumerate() {
        push(format!("beta{j}_mse"), *v);
    }
    for (j, v) in r.coverage_per_coefficient.iter().enumerate() {
        push(format!("beta{j}_coverage"), *v);
    }
}

impl ReplicateResult {
    pub fn rows(&self) -> Vec<ResultRow> {
        let mut out = Vec::new();
        recovery_rows(self.replicate, "vcbart", &self.vcbart, &mut out);
        recovery_rows(self.replicate, "linear", &self.baseline, &mut out);
        let s = &self.selection;
        for (m, v) in [
            ("sensitivity", s.sensitivity),
            ("specificity", s.specificity),
            ("precision", s.precision),
            ("accuracy", s.accuracy),
        ] {
            out.push(ResultRow { replicate: self.replicate, method: "vcbart".into(), metric: m.into(), value: v });
        }
        out
    }
}

/// Truth at every row of `data`, `[j][row]`.
pub fn truth_at_rows(truth: &SyntheticTruth, data: &PanelDataset) -> Vec<Vec<f64>> {
    (0..=P).map(|j| (0..data.n_obs()).map(|k| truth.beta_true(j, data.modifiers(k))).collect()).collect()
}

/// Fit both methods on one train/test split and score them.
pub fn run_split(
    train: &PanelDataset,
    test: &PanelDataset,
    truth: &SyntheticTruth,
    hyper: &Hyperparameters,
    level: f64,
    replicate: usize,
    rng: &mut impl Rng,
) -> Result<ReplicateResult> {
    let tru = truth_at_rows(truth, test);
    let sink = fit_at_test_points(train, test, hyper)?;
    let bands = sink.beta_bands(level)?;
    let preds = sink.predictive_bands(level, rng)?;
    let vcbart = score_recovery(&bands, &tru, &preds, test.y())?;
    let selected: Vec<Vec<usize>> = sink.selection_probabilities().iter().map(|p| median_probability_model(p)).collect();
    let support: Vec<Vec<usize>> = (0..=P).map(|j| true_support(j).to_vec()).collect();
    let selection = score_selection(&selected, &support, R)?;

    let lin = LinearFit::fit(train)?;
    let lin_bands: Vec<Vec<Band>> = (0..=P).map(|j| vec![lin.coefficient_band(j, level); test.n_obs()]).collect();
    let lin_preds = linear_baseline_rows(&lin, test, level);
    let baseline = score_recovery(&lin_bands, &tru, &lin_preds, test.y())?;
    Ok(ReplicateResult { replicate, vcbart, baseline, selection })
}

pub fn run_replicate(data: &PanelDataset, truth: &SyntheticTruth, cfg: &BenchmarkConfig, i: usize) -> Result<ReplicateResult> {
    let mut rng = replicate_rng(cfg.seed, i);
    let (tr, te) = split_subjects(data.n_subjects(), cfg.n_train, cfg.n_test, &mut rng)?;
    let mut hyper = cfg.hyper.clone();
    hyper.seed = rng.random();
    let (train, test) = (data.subset(&tr), data.subset(&te));
    let res = run_split(&train, &test, truth, &hyper, cfg.level, i, &mut rng)?;
    log::info!(
        "replicate {i}: beta mse {:.3} (linear {:.3}), coverage {:.3}, predictive coverage {:.3}",
        res.vcbart.mse,
        res.baseline.mse,
        res.vcbart.coverage,
        res.vcbart.predictive_coverage
    );
    Ok(res)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkOutcome {
    pub replicates: Vec<ReplicateResult>,
}

impl BenchmarkOutcome {
    pub fn rows(&self) -> Vec<ResultRow> {
        self.replicates.iter().flat_map(|r| r.rows()).collect()
    }

    pub fn wins(&self) -> usize {
        self.replicates.iter().filter(|r| r.vcbart.mse < r.baseline.mse).count()
    }

    pub fn mean_coverage(&self) -> f64 {
        self.replicates.iter().map(|r| r.vcbart.coverage).sum::<f64>() / self.replicates.len() as f64
    }

    pub fn mean_predictive_coverage(&self) -> f64 {
        self.replicates.iter().map(|r| r.vcbart.predictive_coverage).sum::<f64>() / self.replicates.len() as f64
    }

    /// Selection rates pooled over every replicate's decisions.
    pub fn pooled_selection(&self) -> SelectionReport {
        let mut c = Confusion::default();
        for r in &self.replicates {
            c.add(&r.selection.confusion);
        }
        SelectionReport::from_confusion(c)
    }
}

/// Generate the panel and run every replicate, in parallel.
pub fn run_benchmark(cfg: &BenchmarkConfig) -> Result<BenchmarkOutcome> {
    let (data, truth) = gen_panel(&cfg.synthetic)?;
    let replicates = (0..cfg.replicates)
        .into_par_iter()
        .map(|i| run_replicate(&data, &truth, cfg, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(BenchmarkOutcome { replicates })
}
