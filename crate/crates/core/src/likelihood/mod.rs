//! Observation models linking features to data and their conditional
//! updates.
//!
//! Every model is written in terms of the natural parameter
//! `ψ_ij = φ(x_i)ᵀβ_j`. The logistic-family models (binomial, negative
//! binomial, multinomial) share the form `a·ψ − b·log(1 + e^ψ)` and are
//! sampled with Pólya-gamma augmentation.

mod cache;
mod gaussian;
mod pg;

pub use cache::{ConditionalCache, LikelihoodCache, RowTarget};
pub use gaussian::{
    draw_beta_gaussian, gaussian_marginal_loglik, update_sigma, update_sigma_collapsed,
    GaussianMarginalCache,
};
pub use pg::{
    draw_pg_aux, kappa_from_ab, multinomial_xi, pg_ab_mapping, update_beta_pg, update_dispersion,
    update_multinomial_beta, xi_from_psi, AuxState, DISPERSION_FLOOR,
};

use std::fmt;
use std::str::FromStr;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg::{cholesky, log_sum_exp, logistic, mvn_from_factor, softplus, standard_normal_vector};
use crate::rff::GammaPrior;
use crate::samplers::{ess_step, EllipseState};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LikelihoodKind {
    Gaussian,
    Poisson,
    Binomial,
    NegativeBinomial,
    Multinomial,
}

impl LikelihoodKind {
    pub const ALL: [LikelihoodKind; 5] = [
        LikelihoodKind::Gaussian,
        LikelihoodKind::Poisson,
        LikelihoodKind::Binomial,
        LikelihoodKind::NegativeBinomial,
        LikelihoodKind::Multinomial,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LikelihoodKind::Gaussian => "gaussian",
            LikelihoodKind::Poisson => "poisson",
            LikelihoodKind::Binomial => "binomial",
            LikelihoodKind::NegativeBinomial => "negative_binomial",
            LikelihoodKind::Multinomial => "multinomial",
        }
    }

    pub fn is_count(self) -> bool {
        !matches!(self, LikelihoodKind::Gaussian)
    }

    /// Updated through Pólya-gamma augmentation.
    pub fn uses_pg(self) -> bool {
        matches!(
            self,
            LikelihoodKind::Binomial | LikelihoodKind::NegativeBinomial | LikelihoodKind::Multinomial
        )
    }
}

impl fmt::Display for LikelihoodKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LikelihoodKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.to_ascii_lowercase().replace('-', "_");
        Self::ALL
            .iter()
            .copied()
            .find(|k| k.name() == norm || (norm == "nb" && *k == LikelihoodKind::NegativeBinomial))
            .ok_or_else(|| Error::Config(format!("unknown likelihood `{s}`")))
    }
}

/// Inverse-gamma hyperprior with density ∝ x^{−shape−1} e^{−scale/x}.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InverseGammaPrior {
    pub shape: f64,
    pub scale: f64,
}

impl Default for InverseGammaPrior {
    fn default() -> Self {
        Self { shape: 1.0, scale: 1.0 }
    }
}

/// Binomial trial counts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Trials {
    Constant(u64),
    PerEntry(DMatrix<f64>),
}

impl Trials {
    pub fn at(&self, i: usize, j: usize) -> f64 {
        match self {
            Trials::Constant(n) => *n as f64,
            Trials::PerEntry(m) => m[(i, j)],
        }
    }
}

/// Observation model and its parameters θ.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LikelihoodSpec {
    /// Per-column noise variances σ_j².
    Gaussian { sigma2: Vec<f64>, prior: InverseGammaPrior },
    Poisson,
    Binomial { trials: Trials },
    /// Per-column dispersions r_j.
    NegativeBinomial { dispersion: Vec<f64>, prior: GammaPrior },
    Multinomial,
}

impl LikelihoodSpec {
    /// Default parameters for `j` columns: σ² = 1, r = 1, one trial.
    pub fn default_for(kind: LikelihoodKind, j: usize) -> Self {
        match kind {
            LikelihoodKind::Gaussian => LikelihoodSpec::Gaussian {
                sigma2: vec![1.0; j],
                prior: InverseGammaPrior::default(),
            },
            LikelihoodKind::Poisson => LikelihoodSpec::Poisson,
            LikelihoodKind::Binomial => LikelihoodSpec::Binomial { trials: Trials::Constant(1) },
            LikelihoodKind::NegativeBinomial => LikelihoodSpec::NegativeBinomial {
                dispersion: vec![1.0; j],
                prior: GammaPrior::default(),
            },
            LikelihoodKind::Multinomial => LikelihoodSpec::Multinomial,
        }
    }

    pub fn kind(&self) -> LikelihoodKind {
        match self {
            LikelihoodSpec::Gaussian { .. } => LikelihoodKind::Gaussian,
            LikelihoodSpec::Poisson => LikelihoodKind::Poisson,
            LikelihoodSpec::Binomial { .. } => LikelihoodKind::Binomial,
            LikelihoodSpec::NegativeBinomial { .. } => LikelihoodKind::NegativeBinomial,
            LikelihoodSpec::Multinomial => LikelihoodKind::Multinomial,
        }
    }

    /// Check parameters and their compatibility with `data`.
    pub fn validate(&self, data: &Dataset) -> Result<()> {
        let j = data.j();
        let per_column = |v: &[f64], what: &str| -> Result<()> {
            if v.len() != j {
                return Err(Error::Dimension(format!("{} {what} values for {j} columns", v.len())));
            }
            if let Some(bad) = v.iter().position(|x| !(*x > 0.0) || !x.is_finite()) {
                return Err(Error::Config(format!("{what} of column {bad} must be positive, got {}", v[bad])));
            }
            Ok(())
        };
        match self {
            LikelihoodSpec::Gaussian { sigma2, .. } => per_column(sigma2, "noise variance")?,
            LikelihoodSpec::NegativeBinomial { dispersion, .. } => {
                per_column(dispersion, "dispersion")?;
                data.validate_counts()?;
            }
            LikelihoodSpec::Poisson | LikelihoodSpec::Multinomial => data.validate_counts()?,
            LikelihoodSpec::Binomial { trials } => {
                data.validate_counts()?;
                if let Trials::PerEntry(m) = trials {
                    if m.shape() != data.y.shape() {
                        return Err(Error::Dimension("trial matrix shape differs from observations".into()));
                    }
                }
                for i in 0..data.n() {
                    for jj in 0..j {
                        if data.observed(i, jj) && data.y[(i, jj)] > trials.at(i, jj) {
                            return Err(Error::Data(format!(
                                "entry ({i}, {jj}) exceeds its trial count {}",
                                trials.at(i, jj)
                            )));
                        }
                    }
                }
            }
        }
        if self.kind() == LikelihoodKind::Multinomial && j < 2 {
            return Err(Error::Data("multinomial data needs at least two categories".into()));
        }
        Ok(())
    }
}

/// Gaussian prior N(mean, cov) on each coefficient vector with the derived
/// quantities the updates need.
#[derive(Clone, Debug)]
pub struct CoefficientPrior {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub cov_factor: DMatrix<f64>,
    pub precision: DMatrix<f64>,
    /// B0⁻¹β0.
    pub precision_mean: DVector<f64>,
}

impl CoefficientPrior {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        if cov.nrows() != mean.len() || !cov.is_square() {
            return Err(Error::Dimension("coefficient prior mean and covariance disagree".into()));
        }
        let chol: Cholesky<f64, Dyn> = cholesky(&cov, "coefficient prior covariance")?;
        let precision = chol.inverse();
        let precision_mean = &precision * &mean;
        Ok(Self { cov_factor: chol.l(), mean, cov, precision, precision_mean })
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        mvn_from_factor(&self.mean, &self.cov_factor, rng)
    }
}

/// Coefficients β (M × J) and their prior. For the Gaussian likelihood the
/// prior covariance of β_j is `σ_j² · prior_cov`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MappingWeights {
    pub beta: DMatrix<f64>,
    pub prior_mean: DVector<f64>,
    pub prior_cov: DMatrix<f64>,
}

impl MappingWeights {
    /// Zero coefficients with the default prior N(0, I).
    pub fn zeros(m: usize, j: usize) -> Self {
        Self {
            beta: DMatrix::zeros(m, j),
            prior_mean: DVector::zeros(m),
            prior_cov: DMatrix::identity(m, m),
        }
    }

    pub fn prior(&self) -> Result<CoefficientPrior> {
        CoefficientPrior::new(self.prior_mean.clone(), self.prior_cov.clone())
    }

    /// Draw every column from its prior; the multinomial reference column
    /// stays zero.
    pub fn sample_prior<R: Rng + ?Sized>(
        &mut self,
        spec: &LikelihoodSpec,
        rng: &mut R,
    ) -> Result<()> {
        let prior = self.prior()?;
        let j = self.beta.ncols();
        for jj in 0..j {
            let mut b = prior.draw(rng);
            if let LikelihoodSpec::Gaussian { sigma2, .. } = spec {
                b = &prior.mean + (b - &prior.mean) * sigma2[jj].sqrt();
            }
            if spec.kind() == LikelihoodKind::Multinomial && jj == j - 1 {
                b.fill(0.0);
            }
            self.beta.set_column(jj, &b);
        }
        Ok(())
    }

    pub fn num_features(&self) -> usize {
        self.beta.nrows()
    }

    pub fn validate(&self, kind: LikelihoodKind) -> Result<()> {
        let m = self.beta.nrows();
        if self.prior_mean.len() != m || self.prior_cov.shape() != (m, m) {
            return Err(Error::Dimension("coefficient prior does not match β".into()));
        }
        if kind == LikelihoodKind::Multinomial {
            let last = self.beta.ncols() - 1;
            if self.beta.column(last).iter().any(|&v| v != 0.0) {
                return Err(Error::Config("multinomial reference column must be zero".into()));
            }
        }
        Ok(())
    }
}

/// Natural parameters Ψ = Φ B, with a hard error at the first non-finite entry.
pub fn natural_params(phi: &DMatrix<f64>, weights: &MappingWeights) -> Result<DMatrix<f64>> {
    if phi.ncols() != weights.beta.nrows() {
        return Err(Error::Dimension(format!(
            "features have {} columns, β has {} rows",
            phi.ncols(),
            weights.beta.nrows()
        )));
    }
    let psi = phi * &weights.beta;
    check_finite(&psi, "natural parameter")?;
    Ok(psi)
}

pub(crate) fn check_finite(m: &DMatrix<f64>, what: &'static str) -> Result<()> {
    for j in 0..m.ncols() {
        for i in 0..m.nrows() {
            if !m[(i, j)].is_finite() {
                return Err(Error::NonFinite { what, row: i, col: j });
            }
        }
    }
    Ok(())
}

/// ψ-dependent part of the log density of one entry (not multinomial).
#[inline]
pub(crate) fn entry_kernel(spec: &LikelihoodSpec, i: usize, j: usize, y: f64, psi: f64) -> f64 {
    match spec {
        LikelihoodSpec::Gaussian { sigma2, .. } => {
            let r = y - psi;
            -0.5 * r * r / sigma2[j]
        }
        LikelihoodSpec::Poisson => y * psi - psi.exp(),
        LikelihoodSpec::Binomial { trials } => y * psi - trials.at(i, j) * softplus(psi),
        LikelihoodSpec::NegativeBinomial { dispersion, .. } => {
            y * psi - (y + dispersion[j]) * softplus(psi)
        }
        LikelihoodSpec::Multinomial => unreachable!("multinomial densities are per row"),
    }
}

/// ψ-independent part of the log density of one entry (not multinomial).
pub(crate) fn entry_constant(spec: &LikelihoodSpec, i: usize, j: usize, y: f64) -> f64 {
    match spec {
        LikelihoodSpec::Gaussian { sigma2, .. } => {
            -0.5 * (2.0 * std::f64::consts::PI * sigma2[j]).ln()
        }
        LikelihoodSpec::Poisson => -ln_gamma(y + 1.0),
        LikelihoodSpec::Binomial { trials } => {
            let n = trials.at(i, j);
            ln_gamma(n + 1.0) - ln_gamma(y + 1.0) - ln_gamma(n - y + 1.0)
        }
        LikelihoodSpec::NegativeBinomial { dispersion, .. } => {
            let r = dispersion[j];
            ln_gamma(y + r) - ln_gamma(r) - ln_gamma(y + 1.0)
        }
        LikelihoodSpec::Multinomial => unreachable!("multinomial densities are per row"),
    }
}

/// log n! − Σ log y_j! for a multinomial row.
pub(crate) fn multinomial_row_constant(y: impl Iterator<Item = f64>) -> f64 {
    let mut total = 0.0;
    let mut c = 0.0;
    for v in y {
        total += v;
        c -= ln_gamma(v + 1.0);
    }
    c + ln_gamma(total + 1.0)
}

/// Σ y_j ψ_j − n·logΣexp ψ, the ψ-dependent part of a multinomial row.
pub(crate) fn multinomial_row_kernel(y: &[f64], psi: &[f64]) -> f64 {
    let n: f64 = y.iter().sum();
    let dot: f64 = y.iter().zip(psi).map(|(a, b)| a * b).sum();
    dot - n * log_sum_exp(psi.iter().copied())
}

/// Log-likelihood of the observed entries given features Φ and coefficients.
/// Multinomial rows with any unobserved category are skipped.
pub fn log_likelihood(
    phi: &DMatrix<f64>,
    weights: &MappingWeights,
    spec: &LikelihoodSpec,
    data: &Dataset,
) -> Result<f64> {
    let psi = natural_params(phi, weights)?;
    Ok(log_likelihood_from_psi(&psi, spec, data))
}

pub fn log_likelihood_from_psi(psi: &DMatrix<f64>, spec: &LikelihoodSpec, data: &Dataset) -> f64 {
    let (n, j) = psi.shape();
    let mut total = 0.0;
    if spec.kind() == LikelihoodKind::Multinomial {
        for i in 0..n {
            if !data.row_fully_observed(i) {
                continue;
            }
            let y: Vec<f64> = data.y.row(i).iter().copied().collect();
            let p: Vec<f64> = psi.row(i).iter().copied().collect();
            total += multinomial_row_constant(y.iter().copied()) + multinomial_row_kernel(&y, &p);
        }
        return total;
    }
    for jj in 0..j {
        for i in 0..n {
            if data.observed(i, jj) {
                let y = data.y[(i, jj)];
                total += entry_constant(spec, i, jj, y) + entry_kernel(spec, i, jj, y, psi[(i, jj)]);
            }
        }
    }
    total
}

/// E[Y | Φ, β, θ] for every entry.
pub fn predictive_mean(
    phi: &DMatrix<f64>,
    weights: &MappingWeights,
    spec: &LikelihoodSpec,
    data: &Dataset,
) -> Result<DMatrix<f64>> {
    let psi = natural_params(phi, weights)?;
    Ok(predictive_mean_from_psi(&psi, spec, data))
}

pub fn predictive_mean_from_psi(psi: &DMatrix<f64>, spec: &LikelihoodSpec, data: &Dataset) -> DMatrix<f64> {
    let (n, j) = psi.shape();
    match spec {
        LikelihoodSpec::Gaussian { .. } => psi.clone(),
        LikelihoodSpec::Poisson => psi.map(f64::exp),
        LikelihoodSpec::Binomial { trials } => {
            DMatrix::from_fn(n, j, |i, k| trials.at(i, k) * logistic(psi[(i, k)]))
        }
        LikelihoodSpec::NegativeBinomial { dispersion, .. } => {
            // r·p/(1−p) = r·e^ψ
            DMatrix::from_fn(n, j, |i, k| dispersion[k] * psi[(i, k)].exp())
        }
        LikelihoodSpec::Multinomial => {
            let probs = softmax_rows(psi);
            let mut out = probs;
            for i in 0..n {
                let total: f64 = (0..j).filter(|&k| data.observed(i, k)).map(|k| data.y[(i, k)]).sum();
                for k in 0..j {
                    out[(i, k)] *= total;
                }
            }
            out
        }
    }
}

/// Row-wise softmax.
pub fn softmax_rows(psi: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, j) = psi.shape();
    let mut out = DMatrix::zeros(n, j);
    for i in 0..n {
        let lse = log_sum_exp(psi.row(i).iter().copied());
        for k in 0..j {
            out[(i, k)] = (psi[(i, k)] - lse).exp();
        }
    }
    out
}

/// Log-likelihood of the entries that depend on column `j` of Ψ.
fn column_log_lik(psi: &DMatrix<f64>, spec: &LikelihoodSpec, data: &Dataset, j: usize) -> f64 {
    let n = psi.nrows();
    if spec.kind() == LikelihoodKind::Multinomial {
        let mut total = 0.0;
        let mut y = vec![0.0; psi.ncols()];
        let mut p = vec![0.0; psi.ncols()];
        for i in 0..n {
            if !data.row_fully_observed(i) {
                continue;
            }
            for k in 0..psi.ncols() {
                y[k] = data.y[(i, k)];
                p[k] = psi[(i, k)];
            }
            total += multinomial_row_kernel(&y, &p);
        }
        return total;
    }
    (0..n)
        .filter(|&i| data.observed(i, j))
        .map(|i| entry_kernel(spec, i, j, data.y[(i, j)], psi[(i, j)]))
        .sum()
}

/// One elliptical slice transition of β_j under its Gaussian prior, for any
/// likelihood. Non-finite likelihood values are rejected inside the slice.
pub fn update_beta_generic<R: Rng + ?Sized>(
    phi: &DMatrix<f64>,
    weights: &MappingWeights,
    spec: &LikelihoodSpec,
    data: &Dataset,
    j: usize,
    rng: &mut R,
) -> Result<DVector<f64>> {
    let prior = weights.prior()?;
    let mut factor = prior.cov_factor.clone();
    if let LikelihoodSpec::Gaussian { sigma2, .. } = spec {
        factor *= sigma2[j].sqrt();
    }
    let mut psi = natural_params(phi, weights)?;
    let current = weights.beta.column(j).into_owned();
    let state = EllipseState {
        current,
        prior_factor: &factor,
        prior_mean: &prior.mean,
        log_lik: |b: &DVector<f64>| {
            psi.set_column(j, &(phi * b));
            column_log_lik(&psi, spec, data, j)
        },
    };
    crate::samplers::ess_update(state, rng)
}

/// ESS update of β_j given a precomputed prior and the current column of Ψ,
/// for column-separable likelihoods. Returns the new β_j and ψ_j.
pub(crate) fn ess_beta_column<R: Rng + ?Sized>(
    phi: &DMatrix<f64>,
    beta_j: &DVector<f64>,
    psi_j: &DVector<f64>,
    prior: &CoefficientPrior,
    spec: &LikelihoodSpec,
    data: &Dataset,
    j: usize,
    rng: &mut R,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let n = phi.nrows();
    let observed: Vec<usize> = (0..n).filter(|&i| data.observed(i, j)).collect();
    let ll = |psi: &DVector<f64>| -> f64 {
        observed.iter().map(|&i| entry_kernel(spec, i, j, data.y[(i, j)], psi[i])).sum()
    };
    let current_ll = ll(psi_j);
    let mut last_psi = psi_j.clone();
    let (b, _) = ess_step(
        beta_j,
        current_ll,
        &prior.mean,
        |r| &prior.cov_factor * standard_normal_vector(prior.mean.len(), r),
        |b| {
            let p = phi * b;
            let v = ll(&p);
            last_psi = p;
            v
        },
        rng,
    )?;
    Ok((b, last_psi))
}

#[cfg(test)]
mod tests;
