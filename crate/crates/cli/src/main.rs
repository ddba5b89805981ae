use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use vcbart::benchmark::{run_benchmark, BenchmarkConfig};
use vcbart::config::{config_hash, DataSection, ResolvedRun, RunConfig};
use vcbart::error::{Error, Result};
use vcbart::eval::{cv_rho, DEFAULT_RHO_GRID};
use vcbart::io::results::{synthetic_details, write_csv, write_panel_csv, write_truth_csv};
use vcbart::io::{ingest, read_archive, read_points, write_archive, write_results, RunManifest};
use vcbart::posterior::{fit, summarize, Observation, PredictMode};
use vcbart::sampler::chain_rng;
use vcbart::synthetic::{gen_panel, SyntheticConfig, P};
use vcbart::Hyperparameters;

#[derive(Parser)]
#[command(name = "vcbart", version, about = "Varying-coefficient BART for longitudinal panels")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic benchmark panel with its true coefficients.
    Simulate(SimulateArgs),
    /// Run the sampler and write a draw archive.
    Fit(FitArgs),
    /// Posterior predictive intervals at new rows.
    Predict(PredictArgs),
    /// Coefficient surfaces along one modifier.
    Summarize(SummarizeArgs),
    /// Modifier selection probabilities and the median probability model.
    Select(SelectArgs),
    /// Choose the within-subject correlation by subject-level cross-validation.
    CvRho(CvRhoArgs),
    /// Repeated train/test splits of the synthetic panel against a linear fit.
    Benchmark(BenchmarkArgs),
}

#[derive(Args, Clone, Default)]
struct DataArgs {
    #[arg(long)]
    subject: Option<String>,
    #[arg(long)]
    time: Option<String>,
    #[arg(long)]
    outcome: Option<String>,
    /// Comma-separated covariate columns (default: every `x<digits>` column).
    #[arg(long, value_delimiter = ',')]
    covariates: Vec<String>,
    /// Comma-separated modifier columns (default: every `z<digits>` column).
    #[arg(long, value_delimiter = ',')]
    modifiers: Vec<String>,
}

#[derive(Args, Clone, Default)]
struct ModelArgs {
    /// TOML configuration file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    trees: Option<usize>,
    /// Multiply every τ_j by this factor.
    #[arg(long)]
    tau_scale: Option<f64>,
    #[arg(long)]
    nu: Option<f64>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    max_depth: Option<usize>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    burn: Option<usize>,
    #[arg(long)]
    chains: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 500)]
    n: usize,
    #[arg(long, default_value_t = 4)]
    n_i: usize,
    #[arg(long, default_value_t = 1.0)]
    sigma: f64,
    #[arg(long, default_value_t = 0.0)]
    rho: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct FitArgs {
    #[arg(long)]
    data: PathBuf,
    /// Archive path; a `.gz` suffix compresses it.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    columns: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    draws: PathBuf,
    /// Rows to predict; the outcome column may be absent.
    #[arg(long)]
    data: PathBuf,
    /// Earlier observations; rows of a subject present here are forecast
    /// conditionally on that subject's residuals.
    #[arg(long)]
    history: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.95)]
    level: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    subject: Option<String>,
    #[arg(long)]
    time: Option<String>,
    /// Reject the archive unless it was fit with this configuration.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct SummarizeArgs {
    #[arg(long)]
    draws: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Modifier to vary (default: the first one).
    #[arg(long)]
    modifier: Option<String>,
    #[arg(long, default_value_t = 21)]
    grid: usize,
    /// Fixed values of other modifiers on their original scale, `name=value`;
    /// unlisted modifiers sit at the middle of their range.
    #[arg(long, value_delimiter = ',')]
    at: Vec<String>,
    #[arg(long, default_value_t = 0.95)]
    level: f64,
}

#[derive(Args)]
struct SelectArgs {
    #[arg(long)]
    draws: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CvRhoArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 5)]
    folds: usize,
    #[arg(long, value_delimiter = ',')]
    grid: Vec<f64>,
    #[command(flatten)]
    columns: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Args)]
struct BenchmarkArgs {
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 25)]
    replicates: usize,
    #[arg(long, default_value_t = 75)]
    n_train: usize,
    #[arg(long, default_value_t = 25)]
    n_test: usize,
    /// Subjects in the generated panel the splits are drawn from.
    #[arg(long, default_value_t = 500)]
    n: usize,
    #[arg(long, default_value_t = 0.0)]
    data_rho: f64,
    #[command(flatten)]
    model: ModelArgs,
}

fn config_error(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

/// File config with flags applied, except the τ multiplier.
fn run_config(columns: &DataArgs, model: &ModelArgs) -> Result<RunConfig> {
    let mut c = match &model.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let d = &mut c.data;
    if let Some(v) = &columns.subject {
        d.subject = v.clone();
    }
    if columns.time.is_some() {
        d.time = columns.time.clone();
    }
    if let Some(v) = &columns.outcome {
        d.outcome = v.clone();
    }
    if !columns.covariates.is_empty() {
        d.covariates = columns.covariates.clone();
    }
    if !columns.modifiers.is_empty() {
        d.modifiers = columns.modifiers.clone();
    }
    let m = &mut c.model;
    m.trees = model.trees.or(m.trees);
    m.nu = model.nu.or(m.nu);
    m.rho = model.rho.or(m.rho);
    m.max_depth = model.max_depth.or(m.max_depth);
    let ch = &mut c.chain;
    ch.iterations = model.iterations.or(ch.iterations);
    ch.burn = model.burn.or(ch.burn);
    ch.chains = model.chains.or(ch.chains);
    ch.seed = model.seed.or(ch.seed);
    Ok(c)
}

fn resolve_hyper(c: &RunConfig, model: &ModelArgs, p: usize) -> Result<Hyperparameters> {
    let mut h = c.hyperparameters(p)?;
    if let Some(s) = model.tau_scale {
        if !(s > 0.0 && s.is_finite()) {
            return Err(config_error("--tau-scale must be positive"));
        }
        h.tau.iter_mut().for_each(|t| *t *= s);
    }
    Ok(h)
}

/// Ingest training data and resolve the run; the data section is completed
/// with the columns actually used so the hash pins them.
fn load_run(path: &Path, columns: &DataArgs, model: &ModelArgs) -> Result<(vcbart::PanelDataset, DataSection, Hyperparameters)> {
    let c = run_config(columns, model)?;
    let (data, report) = ingest(path, &c.data)?;
    if report.constant_modifiers.len() == data.r() {
        log::warn!("every modifier is constant; the trees cannot split");
    }
    let mut schema = c.data.clone();
    schema.covariates = data.names.covariates.clone();
    schema.modifiers = data.names.modifiers.clone();
    let hyper = resolve_hyper(&c, model, data.p())?;
    Ok((data, schema, hyper))
}

fn simulate(a: &SimulateArgs) -> Result<()> {
    let cfg = SyntheticConfig { n: a.n, n_i: a.n_i, sigma: a.sigma, rho: a.rho, seed: a.seed };
    if !(a.sigma > 0.0) {
        return Err(config_error("--sigma must be positive"));
    }
    let (data, truth) = gen_panel(&cfg)?;
    std::fs::create_dir_all(&a.out_dir)?;
    let hash = config_hash(&cfg);
    write_panel_csv(&a.out_dir.join("panel.csv"), &hash, &data)?;
    write_truth_csv(&a.out_dir.join("truth.csv"), &hash, &data, &truth)?;
    RunManifest::new("simulate", &hash, a.seed, synthetic_details(&cfg, &data, &truth))
        .write(&a.out_dir.join("manifest.json"))?;
    println!("wrote {} rows for {} subjects to {}", data.n_obs(), data.n_subjects(), a.out_dir.display());
    Ok(())
}

fn fit_command(a: &FitArgs) -> Result<()> {
    let (data, schema, hyper) = load_run(&a.data, &a.columns, &a.model)?;
    let hash = config_hash(&ResolvedRun { data: &schema, hyper: &hyper });
    let post = fit(&data, &hyper)?;
    write_archive(&a.out, &post, &hash)?;
    println!("config_hash {hash}");
    println!("{} draws from {} chains written to {}", post.n_draws(), post.chains.len(), a.out.display());
    for c in &post.chains {
        let mut s: Vec<f64> = c.sigma_trace.iter().map(|v| v * post.scale.sd).collect();
        let first = s.first().copied().unwrap_or(f64::NAN);
        let last = s.last().copied().unwrap_or(f64::NAN);
        s.sort_by(f64::total_cmp);
        let band = summarize(&s, 0.95).ok();
        println!(
            "chain {}: tree acceptance {:.3}, sigma acceptance {:.3}, sigma mean {:.4} (95% {:.4} to {:.4}), first {:.4}, last {:.4}",
            c.chain,
            c.tree_acceptance(),
            c.sigma_acceptance(),
            band.map_or(f64::NAN, |b| b.mean),
            band.map_or(f64::NAN, |b| b.lower),
            band.map_or(f64::NAN, |b| b.upper),
            first,
            last
        );
    }
    Ok(())
}

fn check_config(archive_hash: &str, config: Option<&Path>, header: &vcbart::io::ArchiveHeader) -> Result<()> {
    let Some(path) = config else { return Ok(()) };
    let c = RunConfig::load(path)?;
    let mut schema = c.data.clone();
    schema.covariates = header.names.covariates.clone();
    schema.modifiers = header.names.modifiers.clone();
    let hyper = c.hyperparameters(header.names.covariates.len())?;
    let hash = config_hash(&ResolvedRun { data: &schema, hyper: &hyper });
    if hash != archive_hash {
        return Err(config_error(format!("archive was fit with config {archive_hash}, not {hash}")));
    }
    Ok(())
}

#[derive(Serialize)]
struct PredictionRow {
    row: usize,
    subject_id: String,
    mode: &'static str,
    mean: f64,
    lower: f64,
    upper: f64,
}

fn predict_command(a: &PredictArgs) -> Result<()> {
    let (header, post) = read_archive(&a.draws)?;
    check_config(&header.config_hash, a.config.as_deref(), &header)?;
    let schema = DataSection {
        subject: a.subject.clone().unwrap_or_else(|| DataSection::default().subject),
        time: a.time.clone(),
        outcome: post.names.outcome.clone(),
        covariates: post.names.covariates.clone(),
        modifiers: post.names.modifiers.clone(),
    };
    let (points, _) = read_points(&a.data, &schema, &post.scaling)?;
    let mut history: HashMap<String, Vec<Observation>> = HashMap::new();
    if let Some(h) = &a.history {
        let (table, _) = read_points(h, &schema, &post.scaling)?;
        let (_, groups) = table.groups();
        for k in groups.into_iter().flatten() {
            let row = &table.rows[k];
            let y = row.y.ok_or_else(|| Error::Data("history rows need the outcome column".into()))?;
            history.entry(row.subject.clone()).or_default().push(Observation {
                x: row.x.clone(),
                z: post.scaling.rescale_point(&row.z).0,
                y,
            });
        }
    }
    let mut rng = chain_rng(a.seed, 0);
    let mut out = Vec::with_capacity(points.rows.len());
    for (k, row) in points.rows.iter().enumerate() {
        let z = post.scaling.rescale_point(&row.z).0;
        let (mode, label) = match history.get(&row.subject) {
            Some(h) => (PredictMode::Conditional(Some(h)), "conditional"),
            None => (PredictMode::Marginal, "marginal"),
        };
        let b = post.predict(&row.x, &z, &mode, a.level, &mut rng)?;
        out.push(PredictionRow {
            row: k,
            subject_id: row.subject.clone(),
            mode: label,
            mean: b.mean,
            lower: b.lower,
            upper: b.upper,
        });
    }
    write_csv(&a.out, &header.config_hash, &out)?;
    println!("wrote {} predictions to {}", out.len(), a.out.display());
    Ok(())
}

#[derive(Serialize)]
struct SurfaceRow {
    coefficient: String,
    modifier: String,
    value: f64,
    scaled: f64,
    mean: f64,
    lower: f64,
    upper: f64,
}

fn summarize_command(a: &SummarizeArgs) -> Result<()> {
    let (header, post) = read_archive(&a.draws)?;
    let names = &post.names.modifiers;
    let v = match &a.modifier {
        Some(m) => names.iter().position(|n| n == m).ok_or_else(|| config_error(format!("unknown modifier `{m}`")))?,
        None => 0,
    };
    if a.grid < 2 {
        return Err(config_error("--grid needs at least two points"));
    }
    let mut base = vec![0.5; post.r()];
    for pair in &a.at {
        let (name, value) = pair.split_once('=').ok_or_else(|| config_error(format!("expected name=value, got `{pair}`")))?;
        let w = names.iter().position(|n| n == name).ok_or_else(|| config_error(format!("unknown modifier `{name}`")))?;
        let raw: f64 = value.parse().map_err(|_| config_error(format!("bad value in `{pair}`")))?;
        base[w] = post.scaling.rescale(w, raw).0;
    }
    let grid: Vec<f64> = (0..a.grid).map(|g| g as f64 / (a.grid - 1) as f64).collect();
    let zs: Vec<Vec<f64>> = grid
        .iter()
        .map(|&s| {
            let mut z = base.clone();
            z[v] = s;
            z
        })
        .collect();
    let mut out = Vec::new();
    for j in 0..=post.p() {
        for (b, &s) in post.beta_summary(j, &zs, a.level)?.into_iter().zip(&grid) {
            out.push(SurfaceRow {
                coefficient: post.names.coefficient(j),
                modifier: names[v].clone(),
                value: post.scaling.unscale(v, s),
                scaled: s,
                mean: b.mean,
                lower: b.lower,
                upper: b.upper,
            });
        }
    }
    write_csv(&a.out, &header.config_hash, &out)?;
    println!("wrote {} rows to {}", out.len(), a.out.display());
    Ok(())
}

#[derive(Serialize)]
struct SelectionRow {
    coefficient: String,
    modifier: String,
    probability: f64,
    in_mpm: bool,
}

fn select_command(a: &SelectArgs) -> Result<()> {
    let (header, post) = read_archive(&a.draws)?;
    let mut out = Vec::new();
    for j in 0..=post.p() {
        let probs = post.selection_probabilities(j);
        let mpm = post.median_probability_model(j);
        for (v, p) in probs.iter().enumerate() {
            out.push(SelectionRow {
                coefficient: post.names.coefficient(j),
                modifier: post.names.modifiers[v].clone(),
                probability: *p,
                in_mpm: mpm.contains(&v),
            });
        }
        let chosen: Vec<&str> = mpm.iter().map(|&v| post.names.modifiers[v].as_str()).collect();
        println!("{}: {}", post.names.coefficient(j), if chosen.is_empty() { "-".into() } else { chosen.join(" ") });
    }
    write_csv(&a.out, &header.config_hash, &out)?;
    Ok(())
}

#[derive(Serialize)]
struct CvRow {
    rho: f64,
    fold: usize,
    rmse: f64,
}

fn cv_rho_command(a: &CvRhoArgs) -> Result<()> {
    let (data, schema, hyper) = load_run(&a.data, &a.columns, &a.model)?;
    let grid = if a.grid.is_empty() { DEFAULT_RHO_GRID.to_vec() } else { a.grid.clone() };
    if let Some(r) = grid.iter().find(|r| !(0.0..1.0).contains(*r)) {
        return Err(config_error(format!("rho {r} outside [0, 1)")));
    }
    let hash = config_hash(&serde_json::json!({
        "run": ResolvedRun { data: &schema, hyper: &hyper },
        "grid": grid,
        "folds": a.folds,
    }));
    let mut rng = chain_rng(hyper.seed, 7);
    let res = cv_rho(&data, &grid, a.folds, &hyper, &mut rng)?;
    let mut out = Vec::new();
    for (rho, scores) in &res.scores {
        for (f, s) in scores.iter().enumerate() {
            out.push(CvRow { rho: *rho, fold: f, rmse: *s });
        }
    }
    write_csv(&a.out, &hash, &out)?;
    for (rho, m) in res.mean_rmse() {
        println!("rho {rho}: mean held-out rmse {m:.4}");
    }
    println!("chosen rho {}", res.chosen);
    Ok(())
}

fn benchmark_command(a: &BenchmarkArgs) -> Result<()> {
    let c = run_config(&DataArgs::default(), &a.model)?;
    let hyper = resolve_hyper(&c, &a.model, P)?;
    let mut cfg = BenchmarkConfig::new(hyper.seed);
    cfg.hyper = hyper;
    cfg.replicates = a.replicates;
    cfg.n_train = a.n_train;
    cfg.n_test = a.n_test;
    cfg.synthetic.n = a.n;
    cfg.synthetic.rho = a.data_rho;
    if a.n_train + a.n_test > a.n {
        return Err(config_error("train and test subjects exceed the panel size"));
    }
    let details = serde_json::json!({
        "synthetic": cfg.synthetic,
        "hyper": cfg.hyper,
        "replicates": cfg.replicates,
        "n_train": cfg.n_train,
        "n_test": cfg.n_test,
        "level": cfg.level,
    });
    let hash = config_hash(&details);
    let outcome = run_benchmark(&cfg)?;
    std::fs::create_dir_all(&a.out_dir)?;
    write_results(&a.out_dir.join("results.csv"), &hash, &outcome.rows())?;
    let sel = outcome.pooled_selection();
    let mut details = details;
    details["summary"] = serde_json::json!({
        "wins": outcome.wins(),
        "mean_beta_coverage": outcome.mean_coverage(),
        "mean_predictive_coverage": outcome.mean_predictive_coverage(),
        "selection": sel,
    });
    RunManifest::new("benchmark", &hash, cfg.seed, details).write(&a.out_dir.join("manifest.json"))?;
    println!(
        "tree model beat the linear fit in {}/{} replicates; mean beta coverage {:.3}; mean predictive coverage {:.3}",
        outcome.wins(),
        cfg.replicates,
        outcome.mean_coverage(),
        outcome.mean_predictive_coverage()
    );
    println!(
        "selection: sensitivity {:.3}, specificity {:.3}, precision {:.3}, accuracy {:.3}",
        sel.sensitivity, sel.specificity, sel.precision, sel.accuracy
    );
    Ok(())
}

fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("VCBART_THREADS") else { return Ok(()) };
    let n: usize = v.trim().parse().map_err(|_| config_error(format!("VCBART_THREADS must be a count, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| config_error(format!("cannot start thread pool: {e}")))
}

fn run(cli: Cli) -> Result<()> {
    init_threads()?;
    match &cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Fit(a) => fit_command(a),
        Command::Predict(a) => predict_command(a),
        Command::Summarize(a) => summarize_command(a),
        Command::Select(a) => select_command(a),
        Command::CvRho(a) => cv_rho_command(a),
        Command::Benchmark(a) => benchmark_command(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
