//! Random Fourier features and the Dirichlet-process mixture prior over
//! their frequencies.
//!
//! Feature columns are interleaved: column `2m` holds `sin(w_mᵀx)` and column
//! `2m + 1` holds `cos(w_mᵀx)`, both scaled by `√(2/M)`.

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Beta, Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{cholesky, mvn_from_factor, sample_log_weights};
use crate::samplers::{gaussian_log_density, niw_draw, niw_marginal_log_density, NiwParams};

/// Gamma(shape, rate) hyperprior.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GammaPrior {
    pub shape: f64,
    pub rate: f64,
}

impl Default for GammaPrior {
    fn default() -> Self {
        Self { shape: 1.0, rate: 1.0 }
    }
}

/// One instantiated mixture component over frequencies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cluster {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub count: usize,
}

/// Frequencies of the feature map together with their DP-mixture state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureBasis {
    /// (M/2) × D matrix; row m is w_m.
    pub frequencies: DMatrix<f64>,
    /// Cluster index of each frequency row.
    pub assignments: Vec<usize>,
    pub clusters: Vec<Cluster>,
    pub alpha: f64,
    pub niw_prior: NiwParams,
    pub alpha_prior: GammaPrior,
    /// Auxiliary variable of the last concentration update.
    pub eta: f64,
}

impl FeatureBasis {
    /// Initial basis: `k_init` clusters drawn from the NIW prior, uniform
    /// random assignments, and frequencies drawn from their assigned cluster.
    pub fn initialize<R: Rng + ?Sized>(
        num_features: usize,
        dim: usize,
        k_init: usize,
        alpha: f64,
        niw_prior: NiwParams,
        alpha_prior: GammaPrior,
        rng: &mut R,
    ) -> Result<Self> {
        if num_features == 0 || num_features % 2 != 0 {
            return Err(Error::Config(format!(
                "number of random features must be even and positive, got {num_features}"
            )));
        }
        if k_init == 0 {
            return Err(Error::Config("initial cluster count must be >= 1".into()));
        }
        if !(alpha > 0.0) {
            return Err(Error::Config(format!("concentration must be > 0, got {alpha}")));
        }
        if niw_prior.dim() != dim {
            return Err(Error::Dimension(format!(
                "NIW prior has dimension {}, latent dimension is {dim}",
                niw_prior.dim()
            )));
        }
        let m_prime = num_features / 2;
        let labels: Vec<usize> = (0..m_prime).map(|_| rng.random_range(0..k_init)).collect();
        Self::from_labels(labels, dim, alpha, niw_prior, alpha_prior, rng)
    }

    /// Draw the whole basis from the generative model: α from its prior,
    /// assignments from a CRP(α), component parameters from the NIW prior.
    pub fn sample_prior<R: Rng + ?Sized>(
        num_features: usize,
        dim: usize,
        niw_prior: NiwParams,
        alpha_prior: GammaPrior,
        rng: &mut R,
    ) -> Result<Self> {
        let alpha = Gamma::new(alpha_prior.shape, 1.0 / alpha_prior.rate)
            .map_err(|e| Error::Config(format!("alpha prior: {e}")))?
            .sample(rng);
        let m_prime = num_features / 2;
        let mut counts: Vec<usize> = Vec::new();
        let mut labels = Vec::with_capacity(m_prime);
        for m in 0..m_prime {
            let mut lw: Vec<f64> = counts.iter().map(|&c| (c as f64).ln()).collect();
            lw.push(alpha.ln());
            let k = if m == 0 { 0 } else { sample_log_weights(&lw, rng) };
            if k == counts.len() {
                counts.push(0);
            }
            counts[k] += 1;
            labels.push(k);
        }
        Self::from_labels(labels, dim, alpha, niw_prior, alpha_prior, rng)
    }

    fn from_labels<R: Rng + ?Sized>(
        labels: Vec<usize>,
        dim: usize,
        alpha: f64,
        niw_prior: NiwParams,
        alpha_prior: GammaPrior,
        rng: &mut R,
    ) -> Result<Self> {
        // relabel to 0..K in order of first appearance so every cluster is occupied
        let mut remap: Vec<Option<usize>> = vec![None; labels.iter().max().map_or(0, |m| m + 1)];
        let mut assignments = Vec::with_capacity(labels.len());
        let mut clusters: Vec<Cluster> = Vec::new();
        for &l in &labels {
            let k = match remap[l] {
                Some(k) => k,
                None => {
                    let (mean, cov) = niw_draw(&niw_prior, rng)?;
                    clusters.push(Cluster { mean, cov, count: 0 });
                    remap[l] = Some(clusters.len() - 1);
                    clusters.len() - 1
                }
            };
            clusters[k].count += 1;
            assignments.push(k);
        }
        let mut frequencies = DMatrix::zeros(labels.len(), dim);
        for (m, &k) in assignments.iter().enumerate() {
            let c = &clusters[k];
            let l = cholesky(&c.cov, "cluster covariance")?.l();
            let w = mvn_from_factor(&c.mean, &l, rng);
            frequencies.set_row(m, &w.transpose());
        }
        Ok(Self {
            frequencies,
            assignments,
            clusters,
            alpha,
            niw_prior,
            alpha_prior,
            eta: 0.5,
        })
    }

    /// M, the length of each feature vector.
    pub fn num_features(&self) -> usize {
        2 * self.frequencies.nrows()
    }

    /// M/2, the number of frequency vectors.
    pub fn num_frequencies(&self) -> usize {
        self.frequencies.nrows()
    }

    pub fn dim(&self) -> usize {
        self.frequencies.ncols()
    }

    /// K, the number of occupied clusters.
    pub fn num_clusters(&self) -> usize {
        self.clusters.iter().filter(|c| c.count > 0).count()
    }

    pub fn frequency(&self, m: usize) -> DVector<f64> {
        self.frequencies.row(m).transpose()
    }

    pub fn validate(&self) -> Result<()> {
        if self.assignments.len() != self.frequencies.nrows() {
            return Err(Error::Dimension("one assignment per frequency row".into()));
        }
        let mut counts = vec![0usize; self.clusters.len()];
        for &k in &self.assignments {
            if k >= self.clusters.len() {
                return Err(Error::Config(format!("assignment to missing cluster {k}")));
            }
            counts[k] += 1;
        }
        for (k, c) in self.clusters.iter().enumerate() {
            if c.count != counts[k] || c.count == 0 {
                return Err(Error::Config(format!(
                    "cluster {k} records {} members, has {}",
                    c.count, counts[k]
                )));
            }
        }
        if !(self.alpha > 0.0) {
            return Err(Error::Config(format!("concentration {} is not positive", self.alpha)));
        }
        Ok(())
    }
}

/// `√(2/M)·(sin(wᵀx), cos(wᵀx))` for every row of `x`.
pub fn feature_pair(x: &DMatrix<f64>, w: &DVector<f64>, num_features: usize) -> (DVector<f64>, DVector<f64>) {
    let scale = (2.0 / num_features as f64).sqrt();
    let proj = x * w;
    let sin = proj.map(|p| scale * p.sin());
    let cos = proj.map(|p| scale * p.cos());
    (sin, cos)
}

/// Feature row of a single latent point.
pub fn feature_row(x: &[f64], basis: &FeatureBasis) -> DVector<f64> {
    let m = basis.num_features();
    let scale = (2.0 / m as f64).sqrt();
    let mut out = DVector::zeros(m);
    for k in 0..basis.num_frequencies() {
        let p: f64 = (0..x.len()).map(|d| basis.frequencies[(k, d)] * x[d]).sum();
        let (s, c) = p.sin_cos();
        out[2 * k] = scale * s;
        out[2 * k + 1] = scale * c;
    }
    out
}

/// N × M random feature matrix Φ.
pub fn compute_features(x: &DMatrix<f64>, basis: &FeatureBasis) -> Result<DMatrix<f64>> {
    if x.ncols() != basis.dim() {
        return Err(Error::Dimension(format!(
            "latent matrix has {} columns, frequencies have {}",
            x.ncols(),
            basis.dim()
        )));
    }
    let m = basis.num_features();
    let scale = (2.0 / m as f64).sqrt();
    let proj = x * basis.frequencies.transpose();
    let mut phi = DMatrix::zeros(x.nrows(), m);
    for k in 0..basis.num_frequencies() {
        for i in 0..x.nrows() {
            let (s, c) = proj[(i, k)].sin_cos();
            phi[(i, 2 * k)] = scale * s;
            phi[(i, 2 * k + 1)] = scale * c;
        }
    }
    Ok(phi)
}

/// K̂ = Φ Φᵀ.
pub fn approx_kernel_matrix(phi: &DMatrix<f64>) -> DMatrix<f64> {
    phi * phi.transpose()
}

/// exp(−½‖x − x'‖²), the kernel approximated by standard-normal frequencies.
pub fn rbf_kernel(x: &[f64], y: &[f64], lengthscale: f64) -> f64 {
    let d2: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
    (-0.5 * d2 / (lengthscale * lengthscale)).exp()
}

pub fn rbf_kernel_matrix(x: &DMatrix<f64>, lengthscale: f64) -> DMatrix<f64> {
    let n = x.nrows();
    let rows: Vec<Vec<f64>> = (0..n).map(|i| x.row(i).iter().cloned().collect()).collect();
    DMatrix::from_fn(n, n, |i, j| rbf_kernel(&rows[i], &rows[j], lengthscale))
}

/// A likelihood whose value depends on the feature matrix, able to score a
/// replacement of one sin/cos column pair without a full recomputation.
pub trait FrequencyTarget {
    /// Log-likelihood at the current features.
    fn current_log_lik(&self) -> f64;
    /// Log-likelihood if columns `2m` and `2m+1` were replaced.
    fn propose_pair(&mut self, m: usize, sin: &DVector<f64>, cos: &DVector<f64>) -> f64;
    /// Make the last proposal current.
    fn accept_pair(&mut self) -> Result<()>;
}

/// min{1, exp(ll_new − ll_old)}.
pub fn mh_accept_prob(ll_new: f64, ll_old: f64) -> f64 {
    if !ll_new.is_finite() {
        return 0.0;
    }
    (ll_new - ll_old).exp().min(1.0)
}

/// Metropolis–Hastings update of w_m with its cluster's Gaussian as the
/// proposal, so the acceptance ratio reduces to the likelihood ratio.
pub fn propose_frequency<T, R>(
    m: usize,
    x: &DMatrix<f64>,
    basis: &mut FeatureBasis,
    target: &mut T,
    rng: &mut R,
) -> Result<bool>
where
    T: FrequencyTarget + ?Sized,
    R: Rng + ?Sized,
{
    let cluster = &basis.clusters[basis.assignments[m]];
    let l = cholesky(&cluster.cov, "cluster covariance")?.l();
    let proposal = mvn_from_factor(&cluster.mean, &l, rng);
    let (sin, cos) = feature_pair(x, &proposal, basis.num_features());
    let ll_old = target.current_log_lik();
    let ll_new = target.propose_pair(m, &sin, &cos);
    if !ll_new.is_finite() {
        warn!("non-finite log-likelihood for frequency proposal {m}; rejecting");
        return Ok(false);
    }
    let u: f64 = rng.random();
    if u.ln() < ll_new - ll_old {
        target.accept_pair()?;
        basis.frequencies.set_row(m, &proposal.transpose());
        Ok(true)
    } else {
        Ok(false)
    }
}

/// Log weights of the assignment conditional for `w`, excluding the vector
/// itself from the counts: existing clusters first, then a new cluster.
pub fn assignment_log_weights(
    w: &DVector<f64>,
    clusters: &[Cluster],
    alpha: f64,
    niw_prior: &NiwParams,
) -> Result<Vec<f64>> {
    let mut lw = Vec::with_capacity(clusters.len() + 1);
    for c in clusters {
        if c.count == 0 {
            lw.push(f64::NEG_INFINITY);
            continue;
        }
        let chol = cholesky(&c.cov, "cluster covariance")?;
        lw.push((c.count as f64).ln() + gaussian_log_density(w, &c.mean, &chol));
    }
    lw.push(alpha.ln() + niw_marginal_log_density(w, niw_prior)?);
    Ok(lw)
}

/// Resample every assignment z_m. Counts exclude w_m; a vector whose cluster
/// empties removes that cluster; a new cluster takes parameters drawn from
/// the NIW posterior given its single member.
pub fn assign_clusters<R: Rng + ?Sized>(basis: &mut FeatureBasis, rng: &mut R) -> Result<()> {
    for m in 0..basis.num_frequencies() {
        let old = basis.assignments[m];
        basis.clusters[old].count -= 1;
        if basis.clusters[old].count == 0 {
            remove_cluster(basis, old);
        }
        let w = basis.frequency(m);
        let lw = assignment_log_weights(&w, &basis.clusters, basis.alpha, &basis.niw_prior)?;
        let k = sample_log_weights(&lw, rng);
        if k == basis.clusters.len() {
            let post = basis.niw_prior.posterior([&w]);
            let (mean, cov) = niw_draw(&post, rng)?;
            basis.clusters.push(Cluster { mean, cov, count: 0 });
        }
        basis.clusters[k].count += 1;
        basis.assignments[m] = k;
    }
    Ok(())
}

fn remove_cluster(basis: &mut FeatureBasis, k: usize) {
    let last = basis.clusters.len() - 1;
    basis.clusters.swap_remove(k);
    if k != last {
        for z in basis.assignments.iter_mut() {
            if *z == last {
                *z = k;
            }
        }
    }
}

/// Posterior NIW hyperparameters of cluster `k` given its members.
pub fn cluster_posterior(basis: &FeatureBasis, k: usize) -> NiwParams {
    let members: Vec<DVector<f64>> = basis
        .assignments
        .iter()
        .enumerate()
        .filter(|(_, &z)| z == k)
        .map(|(m, _)| basis.frequency(m))
        .collect();
    basis.niw_prior.posterior(members.iter())
}

/// Redraw (μ_k, Σ_k) from the conjugate posterior for every occupied cluster.
pub fn update_cluster_params<R: Rng + ?Sized>(basis: &mut FeatureBasis, rng: &mut R) -> Result<()> {
    for k in 0..basis.clusters.len() {
        let post = cluster_posterior(basis, k);
        let (mean, cov) = niw_draw(&post, rng)?;
        basis.clusters[k].mean = mean;
        basis.clusters[k].cov = cov;
    }
    Ok(())
}

/// Mixture weight π_η and the shared rate of the two Gamma components.
pub fn concentration_mixture(
    alpha_prior: GammaPrior,
    k: usize,
    m_prime: usize,
    eta: f64,
) -> (f64, f64) {
    let rate = alpha_prior.rate - eta.ln();
    let odds = (alpha_prior.shape + k as f64 - 1.0) / (m_prime as f64 * rate);
    (odds / (1.0 + odds), rate)
}

/// Auxiliary-variable Gibbs update of the DP concentration α.
pub fn update_concentration<R: Rng + ?Sized>(basis: &mut FeatureBasis, rng: &mut R) -> Result<f64> {
    let k = basis.num_clusters();
    if k == 0 {
        return Err(Error::Config("concentration update needs an occupied cluster".into()));
    }
    let m_prime = basis.num_frequencies();
    let mut eta = Beta::new(basis.alpha + 1.0, m_prime as f64)
        .map_err(|e| Error::Config(format!("beta for eta: {e}")))?
        .sample(rng);
    if eta <= 0.0 || !eta.ln().is_finite() {
        eta = f64::MIN_POSITIVE;
    }
    let (pi, rate) = concentration_mixture(basis.alpha_prior, k, m_prime, eta);
    let shape = if rng.random::<f64>() < pi {
        basis.alpha_prior.shape + k as f64
    } else {
        basis.alpha_prior.shape + k as f64 - 1.0
    };
    let alpha = Gamma::new(shape, 1.0 / rate)
        .map_err(|e| Error::Config(format!("gamma for alpha: {e}")))?
        .sample(rng);
    basis.eta = eta;
    basis.alpha = alpha.max(f64::MIN_POSITIVE);
    Ok(basis.alpha)
}
