//! Command-line harness: synthetic data, fitting, imputation, evaluation and
//! scripted reproduction runs.

pub mod experiments;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rflvm::baselines::ppca_baseline;
use rflvm::data::{load_csv, read_matrix_csv, write_csv, write_matrix_csv, CsvOptions, Dataset};
use rflvm::engine::{impute, posterior_summary, run_chain, Chain, Config, PosteriorSummary, RunOptions};
use rflvm::latent::LatentUpdate;
use rflvm::likelihood::LikelihoodKind;
use rflvm::metrics::{distance_matrix_error, knn_accuracy, mse, MetricsReport};
use rflvm::synth::{generate, SynthKind};

use experiments::{run_protocol, Protocol, Seeds, Settings};

pub const LATENT_FILE: &str = "latent_mean.csv";
pub const PREDICTIVE_FILE: &str = "predictive_mean.csv";
pub const METRICS_FILE: &str = "metrics.txt";
pub const TRACE_FILE: &str = "trace.jsonl";

#[derive(Debug, Parser)]
#[command(name = "rflvm", version, about = "Random feature latent variable models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a model and write posterior summaries.
    Fit(FitArgs),
    /// Hold out observed entries, fit, and report the imputation error.
    Impute(ImputeArgs),
    /// Write a synthetic dataset and its ground truth.
    Gen(GenArgs),
    /// Score emitted latents against ground truth and labels.
    Eval(EvalArgs),
    /// Run a scripted reproduction protocol.
    Repro(ReproArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum LikelihoodArg {
    Gaussian,
    Poisson,
    Binomial,
    NegativeBinomial,
    Multinomial,
}

impl From<LikelihoodArg> for LikelihoodKind {
    fn from(l: LikelihoodArg) -> Self {
        match l {
            LikelihoodArg::Gaussian => LikelihoodKind::Gaussian,
            LikelihoodArg::Poisson => LikelihoodKind::Poisson,
            LikelihoodArg::Binomial => LikelihoodKind::Binomial,
            LikelihoodArg::NegativeBinomial => LikelihoodKind::NegativeBinomial,
            LikelihoodArg::Multinomial => LikelihoodKind::Multinomial,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum LatentUpdateArg {
    PerRow,
    Joint,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum KindArg {
    ScurveGaussian,
    ScurvePoisson,
    ScurveNegativeBinomial,
    ScurveMultinomial,
    Lorenz,
}

impl From<KindArg> for SynthKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::ScurveGaussian => SynthKind::ScurveGaussian,
            KindArg::ScurvePoisson => SynthKind::ScurvePoisson,
            KindArg::ScurveNegativeBinomial => SynthKind::ScurveNegativeBinomial,
            KindArg::ScurveMultinomial => SynthKind::ScurveMultinomial,
            KindArg::Lorenz => SynthKind::Lorenz,
        }
    }
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    #[arg(long, value_enum, default_value = "gaussian")]
    pub likelihood: LikelihoodArg,
    /// Number of random features M (even).
    #[arg(long, default_value_t = 100)]
    pub m: usize,
    /// Latent dimension D.
    #[arg(long, default_value_t = 2)]
    pub d: usize,
    #[arg(long, default_value_t = 2000)]
    pub iters: usize,
    #[arg(long, default_value_t = 1000)]
    pub burnin: usize,
    #[arg(long, default_value_t = 1)]
    pub thin: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Gaussian-process prior over time on X (needs a time column).
    #[arg(long)]
    pub dynamic: bool,
    /// Inducing times of the dynamic prior.
    #[arg(long, default_value_t = 25)]
    pub inducing: usize,
    /// Trials per entry for the binomial likelihood.
    #[arg(long, default_value_t = 1)]
    pub trials: u64,
    #[arg(long, value_enum, default_value = "per_row")]
    pub latent_update: LatentUpdateArg,
    /// Checkpoint file, written periodically and on failure.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Continue from the checkpoint if it exists.
    #[arg(long, requires = "checkpoint")]
    pub resume: bool,
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
    /// Add wall-clock time to the metrics report (makes it non-reproducible).
    #[arg(long)]
    pub timing: bool,
}

impl ModelArgs {
    pub fn config(&self) -> Result<Config> {
        let config = Config {
            num_features: self.m,
            latent_dim: self.d,
            iterations: self.iters,
            burn_in: self.burnin,
            thinning: self.thin,
            seed: self.seed,
            likelihood: self.likelihood.into(),
            dynamic: self.dynamic,
            num_inducing: self.inducing,
            binomial_trials: self.trials,
            latent_update: match self.latent_update {
                LatentUpdateArg::PerRow => LatentUpdate::PerRow,
                LatentUpdateArg::Joint => LatentUpdate::Joint,
            },
            ..Config::default()
        };
        config.validate()?;
        Ok(config)
    }

    fn run_options(&self) -> RunOptions {
        RunOptions { checkpoint: self.checkpoint.clone(), resume: self.resume }
    }
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Input CSV (rows = observations; optional `label` and `time` columns).
    pub input: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Args)]
pub struct ImputeArgs {
    pub input: PathBuf,
    /// Fraction of observed entries to hold out.
    #[arg(long, default_value_t = 0.2)]
    pub missing_frac: f64,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long, value_enum)]
    pub kind: KindArg,
    #[arg(long, default_value_t = 500)]
    pub n: usize,
    #[arg(long, default_value_t = 100)]
    pub j: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Latent CSV, e.g. latent_mean.csv from `fit`.
    #[arg(long)]
    pub latent: PathBuf,
    /// Ground-truth latent CSV for the distance-matrix error.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// Dataset CSV whose `label` column is used for KNN accuracy.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReproArgs {
    /// fig1-kernel, fig1-mse, fig2, table3-scurve, table3-lorenz, nb-dispersion or multinomial.
    pub protocol: Protocol,
    /// Seeds as `1..5`, `3` or `1,4`.
    #[arg(long, default_value = "1..5")]
    pub seed: Seeds,
    #[arg(long, default_value_t = 2000)]
    pub iters: usize,
    #[arg(long, default_value_t = 1000)]
    pub burnin: usize,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub j: Option<usize>,
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long, default_value_t = 25)]
    pub inducing: usize,
    #[arg(long, default_value_t = 0.2)]
    pub missing_frac: f64,
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub timing: bool,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Fit(a) => fit(&a),
        Command::Impute(a) => impute_cmd(&a),
        Command::Gen(a) => gen(&a),
        Command::Eval(a) => eval(&a),
        Command::Repro(a) => repro(&a),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn numbered(prefix: &str, count: usize) -> Vec<String> {
    (1..=count).map(|k| format!("{prefix}{k}")).collect()
}

fn load_input(path: &Path, model: &ModelArgs) -> Result<Dataset> {
    let data = load_csv(path, &CsvOptions::default())?;
    if model.dynamic && data.time.is_none() {
        bail!("--dynamic needs a `time` column in {}", path.display());
    }
    Ok(data)
}

fn write_fit_outputs(dir: &Path, chain: &Chain, summary: &PosteriorSummary, data: &Dataset) -> Result<()> {
    create_dir(dir)?;
    let d = summary.x_mean.ncols();
    write_matrix_csv(&summary.x_mean, &numbered("x", d), dir.join(LATENT_FILE))?;
    let header = if data.columns.len() == data.j() { data.columns.clone() } else { numbered("y", data.j()) };
    write_matrix_csv(&summary.predictive_mean, &header, dir.join(PREDICTIVE_FILE))?;
    write_text(&dir.join(TRACE_FILE), &chain.trace_jsonl()?)?;
    Ok(())
}

fn fit_report(chain: &Chain, summary: &PosteriorSummary) -> MetricsReport {
    let mut report = MetricsReport::default();
    let c = &chain.config;
    report.push("likelihood", c.likelihood);
    report.push("num_features", c.num_features);
    report.push("latent_dim", c.latent_dim);
    report.push("iterations", c.iterations);
    report.push("burn_in", c.burn_in);
    report.push("seed", c.seed);
    report.push("dynamic", c.dynamic);
    report.push("retained_samples", chain.records.len());
    report.push("initial_log_likelihood", chain.initial_log_likelihood);
    let ll = &summary.loglik_trace;
    report.push("mean_log_likelihood", ll.iter().sum::<f64>() / ll.len() as f64);
    let k = &summary.k_trace;
    report.push("mean_num_clusters", k.iter().sum::<usize>() as f64 / k.len() as f64);
    report.push("mean_alpha", summary.alpha_trace.iter().sum::<f64>() / summary.alpha_trace.len() as f64);
    if !summary.theta_mean.is_empty() {
        let t = &summary.theta_mean;
        report.push("mean_theta", t.iter().sum::<f64>() / t.len() as f64);
    }
    report
}

fn finish_report(mut report: MetricsReport, dir: &Path, start: Instant, timing: bool) -> Result<()> {
    let elapsed = start.elapsed().as_secs_f64();
    log::info!("finished in {elapsed:.2} s");
    if timing {
        report.wall_time_seconds = Some(elapsed);
    }
    report.validate()?;
    write_text(&dir.join(METRICS_FILE), &report.to_string())
}

fn fit(args: &FitArgs) -> Result<()> {
    let start = Instant::now();
    let config = args.model.config()?;
    let data = load_input(&args.input, &args.model)?;
    let chain = run_chain(&config, &data, &args.model.run_options())?;
    let summary = posterior_summary(&chain)?;
    write_fit_outputs(&args.model.out_dir, &chain, &summary, &data)?;
    finish_report(fit_report(&chain, &summary), &args.model.out_dir, start, args.model.timing)
}

fn impute_cmd(args: &ImputeArgs) -> Result<()> {
    let start = Instant::now();
    let config = args.model.config()?;
    let data = load_input(&args.input, &args.model)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (train, held) = data.hold_out(args.missing_frac, &mut rng)?;
    if held.is_empty() {
        bail!("--missing-frac {} holds out no entries", args.missing_frac);
    }
    let chain = run_chain(&config, &train, &args.model.run_options())?;
    let summary = posterior_summary(&chain)?;
    write_fit_outputs(&args.model.out_dir, &chain, &summary, &train)?;

    let observed: Vec<f64> = held.iter().map(|h| h.2).collect();
    let predicted: Vec<f64> = held.iter().map(|&(i, j, _)| summary.predictive_mean[(i, j)]).collect();
    let mut report = fit_report(&chain, &summary);
    report.mse = Some(mse(&predicted, &observed)?);
    report.push("held_out_entries", held.len());
    if config.likelihood == LikelihoodKind::Gaussian && config.latent_dim <= train.j() {
        let ppca = ppca_baseline(&train, config.latent_dim, 500, 1e-8)?;
        let p: Vec<f64> = held.iter().map(|&(i, j, _)| ppca.completed[(i, j)]).collect();
        report.push("ppca_mse", mse(&p, &observed)?);
    }

    let imputed = impute(&summary, &train)?;
    let mut table = DMatrix::zeros(imputed.len(), 4);
    for (r, (&(i, j, v), h)) in imputed.iter().zip(&held).enumerate() {
        table.set_row(r, &nalgebra::RowDVector::from_row_slice(&[i as f64, j as f64, h.2, v]));
    }
    let header: Vec<String> = ["row", "column", "observed", "imputed"].map(String::from).to_vec();
    write_matrix_csv(&table, &header, args.model.out_dir.join("imputed.csv"))?;
    finish_report(report, &args.model.out_dir, start, args.model.timing)
}

fn gen(args: &GenArgs) -> Result<()> {
    let synth = generate(args.kind.into(), args.n, args.j, args.seed)?;
    create_dir(&args.out_dir)?;
    write_csv(&synth.data, args.out_dir.join("data.csv"))?;
    write_matrix_csv(&synth.x_true, &numbered("x", synth.x_true.ncols()), args.out_dir.join("x_true.csv"))?;
    write_matrix_csv(&synth.f_true, &numbered("f", synth.f_true.ncols()), args.out_dir.join("f_true.csv"))?;
    Ok(())
}

fn eval(args: &EvalArgs) -> Result<()> {
    let latent = read_matrix_csv(&args.latent)?;
    let mut report = MetricsReport::default();
    if let Some(path) = &args.truth {
        let truth = read_matrix_csv(path)?;
        report.distance_matrix_error = Some(distance_matrix_error(&latent, &truth)?);
    }
    if let Some(path) = &args.data {
        let data = load_csv(path, &CsvOptions::default())?;
        let labels = data.labels.as_ref().with_context(|| format!("{} has no `label` column", path.display()))?;
        report.knn_accuracy = Some(knn_accuracy(&latent, labels, 5, 5, args.seed)?);
    }
    if args.truth.is_none() && args.data.is_none() {
        bail!("nothing to evaluate: pass --truth and/or --data");
    }
    report.validate()?;
    create_dir(&args.out_dir)?;
    let text = report.to_string();
    print!("{text}");
    write_text(&args.out_dir.join(METRICS_FILE), &text)
}

pub fn repro_settings(args: &ReproArgs) -> Result<Settings> {
    if args.burnin >= args.iters {
        bail!("invalid configuration: burn-in ({}) must be smaller than the number of iterations ({})", args.burnin, args.iters);
    }
    Ok(Settings {
        seeds: args.seed.0.clone(),
        iterations: args.iters,
        burn_in: args.burnin,
        n: args.n,
        j: args.j,
        m: args.m,
        d: args.d,
        num_inducing: args.inducing,
        missing_frac: args.missing_frac,
    })
}

fn repro(args: &ReproArgs) -> Result<()> {
    let start = Instant::now();
    let settings = repro_settings(args)?;
    let outcome = run_protocol(args.protocol, &settings)?;
    create_dir(&args.out_dir)?;
    for table in &outcome.tables {
        write_text(&args.out_dir.join(format!("{}.csv", table.name)), &table.to_csv())?;
    }
    print!("{}", outcome.report);
    finish_report(outcome.report, &args.out_dir, start, args.timing)
}
