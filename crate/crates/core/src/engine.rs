//! Gibbs sweeps over the full model, chains with checkpoints, and
//! posterior summaries.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Gamma, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::baselines::{filled_matrix, pca_init, PcaTransform};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::latent::{
    standardize_latent, update_gp_hypers, update_latent, DynamicPrior, FeatureTarget, LatentPrior, LatentState,
    LatentUpdate, DEFAULT_INDUCING,
};
use crate::likelihood::{
    draw_beta_gaussian, draw_pg_aux, ess_beta_column, log_likelihood, natural_params, predictive_mean,
    softmax_rows, update_beta_pg, update_dispersion, update_multinomial_beta, update_sigma_collapsed,
    ConditionalCache, GaussianMarginalCache, InverseGammaPrior, LikelihoodCache, LikelihoodKind, LikelihoodSpec,
    MappingWeights, Trials,
};
use crate::linalg::logistic;
use crate::rff::{
    assign_clusters, compute_features, propose_frequency, update_cluster_params, update_concentration,
    FeatureBasis, GammaPrior,
};
use crate::samplers::NiwParams;

/// Format version written into checkpoints.
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Config {
    /// M, the number of random features (even).
    pub num_features: usize,
    /// D, the latent dimension.
    pub latent_dim: usize,
    pub iterations: usize,
    pub burn_in: usize,
    pub thinning: usize,
    pub seed: u64,
    pub likelihood: LikelihoodKind,
    pub dynamic: bool,
    /// C, the number of inducing times of the dynamic prior.
    pub num_inducing: usize,
    pub k_init: usize,
    pub alpha_init: f64,
    pub latent_update: LatentUpdate,
    /// Standardize X after every latent update.
    pub standardize: bool,
    pub binomial_trials: u64,
    pub sigma_prior: InverseGammaPrior,
    pub dispersion_prior: GammaPrior,
    pub alpha_prior: GammaPrior,
    pub checkpoint_every: usize,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            num_features: 100,
            latent_dim: 2,
            iterations: 2000,
            burn_in: 1000,
            thinning: 1,
            seed: 0,
            likelihood: LikelihoodKind::Gaussian,
            dynamic: false,
            num_inducing: DEFAULT_INDUCING,
            k_init: 20,
            alpha_init: 1.0,
            latent_update: LatentUpdate::PerRow,
            standardize: true,
            binomial_trials: 1,
            sigma_prior: InverseGammaPrior::default(),
            dispersion_prior: GammaPrior::default(),
            alpha_prior: GammaPrior::default(),
            checkpoint_every: 100,
        }
    }
}

impl Config {
    /// Checks every invariant, including burn-in < iterations.
    pub fn validate(&self) -> Result<()> {
        self.validate_structure()?;
        if self.burn_in >= self.iterations {
            return Err(Error::Config(format!(
                "burn-in ({}) must be smaller than the number of iterations ({})",
                self.burn_in, self.iterations
            )));
        }
        Ok(())
    }

    /// Checks the invariants a chain needs to run; allows burn-in = iterations.
    pub fn validate_structure(&self) -> Result<()> {
        if self.num_features == 0 || self.num_features % 2 != 0 {
            return Err(Error::Config(format!("M must be even and positive, got {}", self.num_features)));
        }
        if self.latent_dim == 0 {
            return Err(Error::Config("D must be at least 1".into()));
        }
        if self.burn_in > self.iterations {
            return Err(Error::Config(format!(
                "burn-in ({}) exceeds the number of iterations ({})",
                self.burn_in, self.iterations
            )));
        }
        if self.thinning == 0 || self.checkpoint_every == 0 {
            return Err(Error::Config("thinning and checkpoint cadence must be at least 1".into()));
        }
        if self.k_init == 0 || !(self.alpha_init > 0.0) {
            return Err(Error::Config("K_init must be ≥ 1 and α_init > 0".into()));
        }
        if self.dynamic && self.num_inducing == 0 {
            return Err(Error::Config("the dynamic prior needs at least one inducing time".into()));
        }
        Ok(())
    }

    fn resumable_from(&self, other: &Config) -> bool {
        let strip = |c: &Config| Config { iterations: 0, checkpoint_every: 1, ..c.clone() };
        strip(self) == strip(other)
    }

    fn spec_for(&self, j: usize) -> LikelihoodSpec {
        match LikelihoodSpec::default_for(self.likelihood, j) {
            LikelihoodSpec::Gaussian { sigma2, .. } => LikelihoodSpec::Gaussian { sigma2, prior: self.sigma_prior },
            LikelihoodSpec::NegativeBinomial { dispersion, .. } => {
                LikelihoodSpec::NegativeBinomial { dispersion, prior: self.dispersion_prior }
            }
            LikelihoodSpec::Binomial { .. } => LikelihoodSpec::Binomial { trials: Trials::Constant(self.binomial_trials) },
            other => other,
        }
    }
}

/// Everything the sampler carries between sweeps, including the random
/// stream, so a snapshot resumes the chain exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    /// Completed sweeps.
    pub iteration: usize,
    pub latent: LatentState,
    pub basis: FeatureBasis,
    pub weights: MappingWeights,
    pub spec: LikelihoodSpec,
    /// Gaussian only: Y with masked entries replaced by their latest draws.
    pub completed: Option<DMatrix<f64>>,
    pub rng: ChaCha8Rng,
}

impl ModelState {
    pub fn features(&self) -> Result<DMatrix<f64>> {
        compute_features(&self.latent.x, &self.basis)
    }

    pub fn log_likelihood(&self, data: &Dataset) -> Result<f64> {
        log_likelihood(&self.features()?, &self.weights, &self.spec, data)
    }

    pub fn predictive_mean(&self, data: &Dataset) -> Result<DMatrix<f64>> {
        predictive_mean(&self.features()?, &self.weights, &self.spec, data)
    }

    /// σ² or r per column; empty for the other likelihoods.
    pub fn theta(&self) -> Vec<f64> {
        match &self.spec {
            LikelihoodSpec::Gaussian { sigma2, .. } => sigma2.clone(),
            LikelihoodSpec::NegativeBinomial { dispersion, .. } => dispersion.clone(),
            _ => Vec::new(),
        }
    }
}

fn check_data(config: &Config, data: &Dataset) -> Result<()> {
    data.validate_shape()?;
    if data.n() == 0 || data.j() == 0 {
        return Err(Error::Data("dataset is empty".into()));
    }
    if config.dynamic && data.time.is_none() {
        return Err(Error::Data("the dynamic prior needs a time column".into()));
    }
    Ok(())
}

/// Initial state: X from standardized PCA scores, W from K_init prior
/// clusters, β from its prior and θ at σ² = 1 or r = 1.
pub fn initialize(config: &Config, data: &Dataset) -> Result<ModelState> {
    config.validate_structure()?;
    check_data(config, data)?;
    let spec = config.spec_for(data.j());
    spec.validate(data)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let d = config.latent_dim;
    let x = pca_init(data, config.likelihood.is_count(), d)?;
    let prior = latent_prior(config, data)?;
    let basis = FeatureBasis::initialize(
        config.num_features,
        d,
        config.k_init,
        config.alpha_init,
        NiwParams::default_prior(d),
        config.alpha_prior,
        &mut rng,
    )?;
    let mut weights = MappingWeights::zeros(config.num_features, data.j());
    weights.sample_prior(&spec, &mut rng)?;
    let completed = (config.likelihood == LikelihoodKind::Gaussian).then(|| filled_matrix(data, PcaTransform::Identity));
    Ok(ModelState { iteration: 0, latent: LatentState { x, prior }, basis, weights, spec, completed, rng })
}

fn latent_prior(config: &Config, data: &Dataset) -> Result<LatentPrior> {
    if !config.dynamic {
        return Ok(LatentPrior::Iid);
    }
    let time = data.time.clone().ok_or_else(|| Error::Data("the dynamic prior needs a time column".into()))?;
    Ok(LatentPrior::Dynamic(DynamicPrior::new(time, config.num_inducing)?))
}

/// One full sweep. On error the state may be partially updated.
pub fn gibbs_step(state: &mut ModelState, data: &Dataset, config: &Config) -> Result<()> {
    let mut rng = std::mem::replace(&mut state.rng, ChaCha8Rng::seed_from_u64(0));
    let result = sweep(state, data, config, &mut rng);
    state.rng = rng;
    result.map_err(|e| e.context(format!("sweep {}", state.iteration + 1)))?;
    state.iteration += 1;
    Ok(())
}

fn sweep(state: &mut ModelState, data: &Dataset, config: &Config, rng: &mut ChaCha8Rng) -> Result<()> {
    if state.spec.kind() == LikelihoodKind::Gaussian {
        return gaussian_sweep(state, config, data, rng);
    }
    let phi = state.features()?;
    let prior = state.weights.prior()?;
    let j = data.j();
    // (1)–(2) augmentation and coefficients
    match state.spec.kind() {
        LikelihoodKind::Poisson => {
            let mut psi = natural_params(&phi, &state.weights)?;
            for jj in 0..j {
                let beta_j = state.weights.beta.column(jj).into_owned();
                let psi_j = psi.column(jj).into_owned();
                let (b, p) = ess_beta_column(&phi, &beta_j, &psi_j, &prior, &state.spec, data, jj, rng)
                    .map_err(|e| e.context(format!("coefficients of column {jj}")))?;
                state.weights.beta.set_column(jj, &b);
                psi.set_column(jj, &p);
            }
        }
        LikelihoodKind::Binomial | LikelihoodKind::NegativeBinomial => {
            let aux = draw_pg_aux(&phi, &state.weights, &state.spec, data, rng)?;
            for jj in 0..j {
                let omega = aux.omega.column(jj).into_owned();
                let kappa = aux.kappa.column(jj).into_owned();
                let b = update_beta_pg(&phi, &omega, &kappa, None, &prior, rng)
                    .map_err(|e| e.context(format!("coefficients of column {jj}")))?;
                state.weights.beta.set_column(jj, &b);
            }
        }
        LikelihoodKind::Multinomial => {
            update_multinomial_beta(&phi, &mut state.weights, data, &prior, rng)?;
        }
        LikelihoodKind::Gaussian => unreachable!(),
    }
    // (3) dispersions
    if let LikelihoodSpec::NegativeBinomial { dispersion, prior } = &mut state.spec {
        let psi = natural_params(&phi, &state.weights)?;
        for jj in 0..j {
            let rows: Vec<usize> = (0..data.n()).filter(|&i| data.observed(i, jj)).collect();
            let y: Vec<f64> = rows.iter().map(|&i| data.y[(i, jj)]).collect();
            let p: Vec<f64> = rows.iter().map(|&i| logistic(psi[(i, jj)])).collect();
            dispersion[jj] = update_dispersion(&y, &p, dispersion[jj], *prior, rng);
        }
    }
    let mut cache =
        LikelihoodCache::Conditional(ConditionalCache::new(phi, state.weights.beta.clone(), &state.spec, data)?);
    latent_and_kernel(&mut state.latent, &mut state.basis, &mut cache, config, rng)
}

/// Gaussian sweep with β integrated out of every update before it is drawn:
/// σ², X, W, z, cluster parameters, α and GP hyperparameters under the
/// marginal; then β given everything; then the masked entries given β.
fn gaussian_sweep(state: &mut ModelState, config: &Config, data: &Dataset, rng: &mut ChaCha8Rng) -> Result<()> {
    let completed = state
        .completed
        .clone()
        .ok_or_else(|| Error::Config("Gaussian state is missing its completed observations".into()))?;
    let LikelihoodSpec::Gaussian { sigma2, prior } = &mut state.spec else {
        unreachable!()
    };
    let phi = compute_features(&state.latent.x, &state.basis)?;
    let mut marginal = GaussianMarginalCache::new(phi, completed.clone(), sigma2.clone(), &state.weights.prior_cov)?;
    let quad = marginal.quadratic_forms();
    let n = completed.nrows();
    for (jj, s) in sigma2.iter_mut().enumerate() {
        *s = update_sigma_collapsed(n, quad[jj], *prior, rng);
    }
    marginal.set_sigma2(sigma2.clone());
    let mut cache = LikelihoodCache::Gaussian(marginal);
    latent_and_kernel(&mut state.latent, &mut state.basis, &mut cache, config, rng)?;
    let phi = cache.phi().clone();
    state.weights.beta = draw_beta_gaussian(&phi, &completed, sigma2, &state.weights.prior_cov, rng)?;
    let mut filled = completed;
    let mut missing: Vec<(usize, usize)> = Vec::new();
    for jj in 0..data.j() {
        for i in 0..data.n() {
            if !data.observed(i, jj) {
                missing.push((i, jj));
            }
        }
    }
    if !missing.is_empty() {
        let psi = &phi * &state.weights.beta;
        for (i, jj) in missing {
            let z: f64 = rng.sample(StandardNormal);
            filled[(i, jj)] = psi[(i, jj)] + sigma2[jj].sqrt() * z;
        }
    }
    state.completed = Some(filled);
    Ok(())
}

/// Steps (4)–(9): X, standardization, frequencies, assignments, cluster
/// parameters, concentration and GP hyperparameters.
fn latent_and_kernel(
    latent: &mut LatentState,
    basis: &mut FeatureBasis,
    cache: &mut LikelihoodCache,
    config: &Config,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    {
        let mut target = FeatureTarget { basis: &*basis, cache };
        update_latent(latent, &mut target, config.latent_update, rng)?;
    }
    if config.standardize {
        latent.x = standardize_latent(&latent.x);
        cache.set_phi(compute_features(&latent.x, basis)?)?;
    }
    for m in 0..basis.num_frequencies() {
        propose_frequency(m, &latent.x, basis, cache, rng).map_err(|e| e.context(format!("frequency {m}")))?;
    }
    assign_clusters(basis, rng)?;
    update_cluster_params(basis, rng)?;
    update_concentration(basis, rng)?;
    if matches!(latent.prior, LatentPrior::Dynamic(_)) {
        let mut target = FeatureTarget { basis: &*basis, cache };
        update_gp_hypers(latent, &mut target, rng)?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainRecord {
    pub iteration: usize,
    pub x: DMatrix<f64>,
    pub num_clusters: usize,
    pub alpha: f64,
    /// σ² or r per column.
    pub theta: Vec<f64>,
    pub log_likelihood: f64,
}

/// One line of the run trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub iter: usize,
    pub loglik: f64,
    #[serde(rename = "K")]
    pub k: usize,
    pub alpha: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Chain {
    pub config: Config,
    pub initial_log_likelihood: f64,
    /// Retained records in iteration order.
    pub records: Vec<ChainRecord>,
    /// Every sweep, burn-in included.
    pub trace: Vec<TraceEntry>,
    /// Sum of the predictive means of the retained records.
    pub predictive_sum: DMatrix<f64>,
    pub state: ModelState,
}

impl Chain {
    pub fn new(config: &Config, data: &Dataset) -> Result<Self> {
        let state = initialize(config, data)?;
        let initial_log_likelihood = state.log_likelihood(data)?;
        Ok(Self {
            config: config.clone(),
            initial_log_likelihood,
            records: Vec::new(),
            trace: Vec::new(),
            predictive_sum: DMatrix::zeros(data.n(), data.j()),
            state,
        })
    }

    fn retained(config: &Config, t: usize) -> bool {
        t > config.burn_in && (t - config.burn_in) % config.thinning == 0
    }

    /// Run one sweep and record its output.
    pub fn advance(&mut self, data: &Dataset) -> Result<()> {
        gibbs_step(&mut self.state, data, &self.config)?;
        let t = self.state.iteration;
        let phi = self.state.features()?;
        let loglik = log_likelihood(&phi, &self.state.weights, &self.state.spec, data)?;
        if !loglik.is_finite() {
            return Err(Error::Data(format!("log-likelihood is {loglik} after sweep {t}")));
        }
        self.trace.push(TraceEntry { iter: t, loglik, k: self.state.basis.num_clusters(), alpha: self.state.basis.alpha });
        if Self::retained(&self.config, t) {
            self.predictive_sum += predictive_mean(&phi, &self.state.weights, &self.state.spec, data)?;
            self.records.push(ChainRecord {
                iteration: t,
                x: self.state.latent.x.clone(),
                num_clusters: self.state.basis.num_clusters(),
                alpha: self.state.basis.alpha,
                theta: self.state.theta(),
                log_likelihood: loglik,
            });
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        {
            let mut w = std::io::BufWriter::new(fs::File::create(&tmp)?);
            serde_json::to_writer(&mut w, &Checkpoint { version: CHECKPOINT_VERSION, chain: self })?;
            w.flush()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let reader = std::io::BufReader::new(fs::File::open(path.as_ref())?);
        let cp: OwnedCheckpoint = serde_json::from_reader(reader)?;
        if cp.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!(
                "checkpoint version {} is not supported (expected {CHECKPOINT_VERSION})",
                cp.version
            )));
        }
        Ok(cp.chain)
    }

    /// The trace as one JSON object per line.
    pub fn trace_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for e in &self.trace {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        Ok(out)
    }
}

#[derive(Serialize)]
struct Checkpoint<'a> {
    version: u32,
    chain: &'a Chain,
}

#[derive(Deserialize)]
struct OwnedCheckpoint {
    version: u32,
    chain: Chain,
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Checkpoint file written every `checkpoint_every` sweeps and on failure.
    pub checkpoint: Option<PathBuf>,
    /// Continue from `checkpoint` when it exists.
    pub resume: bool,
}

/// Run `config.iterations` sweeps from the initial state (or from a
/// checkpoint). A failing sweep flushes the last good chain to the
/// checkpoint before the error is returned.
pub fn run_chain(config: &Config, data: &Dataset, options: &RunOptions) -> Result<Chain> {
    config.validate_structure()?;
    check_data(config, data)?;
    let mut chain = match &options.checkpoint {
        Some(path) if options.resume && path.exists() => {
            let mut chain = Chain::load(path)?;
            if !chain.config.resumable_from(config) {
                return Err(Error::Config("checkpoint was written with a different configuration".into()));
            }
            chain.config = config.clone();
            chain
        }
        _ => Chain::new(config, data)?,
    };
    while chain.state.iteration < config.iterations {
        let backup = options.checkpoint.as_ref().map(|_| chain.clone());
        if let Err(e) = chain.advance(data) {
            if let (Some(path), Some(good)) = (&options.checkpoint, backup) {
                good.save(path).map_err(|io| io.context("flushing the partial chain"))?;
            }
            return Err(e);
        }
        if let Some(path) = &options.checkpoint {
            if chain.state.iteration % config.checkpoint_every == 0 {
                chain.save(path)?;
            }
        }
    }
    if let Some(path) = &options.checkpoint {
        chain.save(path)?;
    }
    Ok(chain)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorSummary {
    pub x_mean: DMatrix<f64>,
    /// Monte Carlo average of E[Y | state].
    pub predictive_mean: DMatrix<f64>,
    pub k_trace: Vec<usize>,
    pub alpha_trace: Vec<f64>,
    pub loglik_trace: Vec<f64>,
    /// Posterior mean of σ² or r per column.
    pub theta_mean: Vec<f64>,
}

pub fn posterior_summary(chain: &Chain) -> Result<PosteriorSummary> {
    let count = chain.records.len();
    if count == 0 {
        return Err(Error::EmptyChain("no retained records: burn-in covers every iteration".into()));
    }
    let first = &chain.records[0];
    let mut x_sum = DMatrix::zeros(first.x.nrows(), first.x.ncols());
    let mut theta_sum = vec![0.0; first.theta.len()];
    for r in &chain.records {
        x_sum += &r.x;
        for (acc, v) in theta_sum.iter_mut().zip(&r.theta) {
            *acc += v;
        }
    }
    let c = count as f64;
    Ok(PosteriorSummary {
        x_mean: x_sum / c,
        predictive_mean: &chain.predictive_sum / c,
        k_trace: chain.records.iter().map(|r| r.num_clusters).collect(),
        alpha_trace: chain.records.iter().map(|r| r.alpha).collect(),
        loglik_trace: chain.records.iter().map(|r| r.log_likelihood).collect(),
        theta_mean: theta_sum.into_iter().map(|v| v / c).collect(),
    })
}

/// Posterior expected value of every masked entry, in row-major order.
pub fn impute(summary: &PosteriorSummary, data: &Dataset) -> Result<Vec<(usize, usize, f64)>> {
    if summary.predictive_mean.shape() != data.y.shape() {
        return Err(Error::Dimension("summary and dataset shapes differ".into()));
    }
    let mut out = Vec::new();
    for i in 0..data.n() {
        for j in 0..data.j() {
            if !data.observed(i, j) {
                out.push((i, j, summary.predictive_mean[(i, j)]));
            }
        }
    }
    Ok(out)
}

/// Draw a complete state from the generative model: X, the whole feature
/// basis, θ and β from their priors. `time` is needed for the dynamic prior.
pub fn sample_prior_state(config: &Config, n: usize, j: usize, time: Option<Vec<f64>>) -> Result<ModelState> {
    config.validate_structure()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let d = config.latent_dim;
    let prior = if config.dynamic {
        let t = time.ok_or_else(|| Error::Data("the dynamic prior needs a time index".into()))?;
        LatentPrior::Dynamic(DynamicPrior::new(t, config.num_inducing)?)
    } else {
        LatentPrior::Iid
    };
    let mut latent = LatentState { x: DMatrix::zeros(n, d), prior };
    let mut spec = config.spec_for(j);
    let basis = FeatureBasis::sample_prior(config.num_features, d, NiwParams::default_prior(d), config.alpha_prior, &mut rng)?;
    let mut weights = MappingWeights::zeros(config.num_features, j);
    let mut state = {
        latent.sample_prior(&mut rng)?;
        resample_theta(&mut spec, &mut rng)?;
        weights.sample_prior(&spec, &mut rng)?;
        ModelState { iteration: 0, latent, basis, weights, spec, completed: None, rng }
    };
    if config.likelihood == LikelihoodKind::Gaussian {
        state.completed = Some(DMatrix::zeros(n, j));
    }
    Ok(state)
}

fn resample_theta(spec: &mut LikelihoodSpec, rng: &mut ChaCha8Rng) -> Result<()> {
    match spec {
        LikelihoodSpec::Gaussian { sigma2, prior } => {
            for s in sigma2.iter_mut() {
                let g = Gamma::new(prior.shape, 1.0 / prior.scale).map_err(|e| Error::Config(e.to_string()))?;
                *s = 1.0 / g.sample(rng);
            }
        }
        LikelihoodSpec::NegativeBinomial { dispersion, prior } => {
            for r in dispersion.iter_mut() {
                let g = Gamma::new(prior.shape, 1.0 / prior.rate).map_err(|e| Error::Config(e.to_string()))?;
                *r = g.sample(rng).max(f64::MIN_POSITIVE);
            }
        }
        _ => {}
    }
    Ok(())
}

/// Replace the observations of `template` with a draw from the likelihood
/// at the current state, keeping its mask, labels and time. Uses and
/// advances the state's random stream.
pub fn simulate_observations(state: &mut ModelState, template: &Dataset) -> Result<Dataset> {
    let psi = natural_params(&state.features()?, &state.weights)?;
    let (n, j) = psi.shape();
    let rng = &mut state.rng;
    let y = match &state.spec {
        LikelihoodSpec::Gaussian { sigma2, .. } => {
            DMatrix::from_fn(n, j, |i, k| psi[(i, k)] + sigma2[k].sqrt() * rng.sample::<f64, _>(StandardNormal))
        }
        LikelihoodSpec::Poisson => DMatrix::from_fn(n, j, |i, k| {
            Poisson::new(psi[(i, k)].exp()).map(|p| p.sample(rng)).unwrap_or(0.0)
        }),
        LikelihoodSpec::Binomial { trials } => DMatrix::from_fn(n, j, |i, k| {
            let t = trials.at(i, k) as u64;
            Binomial::new(t, logistic(psi[(i, k)])).map(|b| b.sample(rng) as f64).unwrap_or(0.0)
        }),
        LikelihoodSpec::NegativeBinomial { dispersion, .. } => DMatrix::from_fn(n, j, |i, k| {
            let rate = Gamma::new(dispersion[k], psi[(i, k)].exp()).map(|g| g.sample(rng)).unwrap_or(0.0);
            Poisson::new(rate).map(|p| p.sample(rng)).unwrap_or(0.0)
        }),
        LikelihoodSpec::Multinomial => {
            let probs = softmax_rows(&psi);
            let mut y = DMatrix::zeros(n, j);
            for i in 0..n {
                let mut left = template.y.row(i).sum().round() as u64;
                let mut mass = 1.0;
                for k in 0..j {
                    let count = if k + 1 == j || left == 0 {
                        left
                    } else {
                        let p = (probs[(i, k)] / mass).clamp(0.0, 1.0);
                        Binomial::new(left, p).map(|b| b.sample(rng)).unwrap_or(0)
                    };
                    y[(i, k)] = count as f64;
                    left -= count;
                    mass -= probs[(i, k)];
                }
            }
            y
        }
    };
    if state.completed.is_some() {
        state.completed = Some(y.clone());
    }
    let mut data = template.clone();
    data.y = y;
    data.with_mask(template.mask.clone())
}
