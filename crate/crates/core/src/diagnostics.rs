//! Joint-distribution ("getting it right") checks of the full Gibbs sweep.
//!
//! Marginal draws from the generative model are compared with a chain that
//! alternates [`gibbs_step`] with fresh observations drawn given the state.
//! Both samples of every monitored statistic must agree within a few
//! standard errors.

use nalgebra::DMatrix;

use crate::data::Dataset;
use crate::engine::{gibbs_step, sample_prior_state, simulate_observations, Config, ModelState};
use crate::error::{Error, Result};
use crate::latent::LatentUpdate;
use crate::likelihood::{InverseGammaPrior, LikelihoodKind};

/// Names of the statistics returned by [`statistics`].
pub const STATISTICS: [&str; 5] = ["mean x", "mean x^2", "mean beta", "mean beta^2", "alpha"];

/// Mean of the draws and its batch-means standard error.
pub fn batch_mean_se(draws: &[f64], batches: usize) -> Result<(f64, f64)> {
    if batches < 2 || draws.len() < batches {
        return Err(Error::Config(format!("{} draws cannot form {batches} batches", draws.len())));
    }
    let size = draws.len() / batches;
    let used = &draws[..size * batches];
    let mean = used.iter().sum::<f64>() / used.len() as f64;
    let means: Vec<f64> = used.chunks(size).map(|c| c.iter().sum::<f64>() / size as f64).collect();
    let var = means.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / (batches - 1) as f64;
    Ok((mean, (var / batches as f64).sqrt()))
}

pub fn statistics(state: &ModelState) -> [f64; 5] {
    let x = &state.latent.x;
    let b = &state.weights.beta;
    let count = b.len() as f64;
    [x.mean(), x.map(|v| v * v).mean(), b.sum() / count, b.map(|v| v * v).sum() / count, state.basis.alpha]
}

#[derive(Clone, Debug, PartialEq)]
pub struct GewekeStat {
    pub name: &'static str,
    pub forward: (f64, f64),
    pub chain: (f64, f64),
}

impl GewekeStat {
    pub fn z(&self) -> f64 {
        let se = (self.forward.1.powi(2) + self.chain.1.powi(2)).sqrt();
        (self.forward.0 - self.chain.0) / se
    }
}

/// Size of the tiny test instance.
#[derive(Clone, Debug)]
pub struct GewekeSetup {
    pub n: usize,
    pub j: usize,
    pub forward_draws: usize,
    pub sweeps: usize,
    pub batches: usize,
    pub config: Config,
}

impl GewekeSetup {
    /// N=8, J=3, M=4, D=1 with per-row latent updates and no standardization
    /// (which would change the target away from the prior).
    pub fn tiny(kind: LikelihoodKind) -> Self {
        Self {
            n: 8,
            j: 3,
            forward_draws: 20_000,
            sweeps: 40_000,
            batches: 50,
            config: Config {
                num_features: 4,
                latent_dim: 1,
                iterations: 1,
                burn_in: 0,
                seed: 7,
                likelihood: kind,
                k_init: 1,
                standardize: false,
                latent_update: LatentUpdate::PerRow,
                binomial_trials: 5,
                sigma_prior: InverseGammaPrior { shape: 3.0, scale: 2.0 },
                ..Config::default()
            },
        }
    }
}

pub fn geweke(setup: &GewekeSetup) -> Result<Vec<GewekeStat>> {
    let config = &setup.config;
    let fill = if config.likelihood == LikelihoodKind::Binomial { config.binomial_trials as f64 } else { 0.0 };
    let template = Dataset::new(DMatrix::from_element(setup.n, setup.j, fill));
    let mut forward = vec![Vec::with_capacity(setup.forward_draws); STATISTICS.len()];
    for s in 0..setup.forward_draws {
        let c = Config { seed: config.seed.wrapping_add(1_000_000 + s as u64), ..config.clone() };
        let state = sample_prior_state(&c, setup.n, setup.j, None)?;
        for (acc, v) in forward.iter_mut().zip(statistics(&state)) {
            acc.push(v);
        }
    }

    let mut state = sample_prior_state(config, setup.n, setup.j, None)?;
    let mut data = simulate_observations(&mut state, &template)?;
    let warmup = setup.sweeps / 20;
    let mut chain = vec![Vec::with_capacity(setup.sweeps); STATISTICS.len()];
    for t in 0..setup.sweeps {
        gibbs_step(&mut state, &data, config)?;
        data = simulate_observations(&mut state, &template)?;
        if t >= warmup {
            for (acc, v) in chain.iter_mut().zip(statistics(&state)) {
                acc.push(v);
            }
        }
    }

    STATISTICS
        .iter()
        .enumerate()
        .map(|(k, &name)| {
            Ok(GewekeStat {
                name,
                forward: batch_mean_se(&forward[k], setup.batches)?,
                chain: batch_mean_se(&chain[k], setup.batches)?,
            })
        })
        .collect()
}
