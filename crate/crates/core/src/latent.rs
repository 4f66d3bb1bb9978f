//! Priors over the latent matrix X and their elliptical slice updates.
//!
//! The independent prior puts x_i ~ N(0, I). The dynamic prior puts each
//! latent dimension x_d ~ N(0, K̂_T), a low-rank-plus-diagonal approximation
//! of an RBF Gaussian process over time built from fixed inducing times.

use log::warn;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::likelihood::{LikelihoodCache, RowTarget};
use crate::linalg::standard_normal_vector;
use crate::rff::{compute_features, feature_row, FeatureBasis};
use crate::samplers::ess_step;

/// Default number of inducing times.
pub const DEFAULT_INDUCING: usize = 25;
/// Diagonal jitter of the dynamic prior covariance.
pub const DEFAULT_JITTER: f64 = 1e-6;
/// Prior standard deviation of the log lengthscale and log variance.
pub const HYPER_PRIOR_SD: f64 = 1.5;
/// Relative eigenvalue cutoff used when inverting the inducing block.
const EIGEN_CUTOFF: f64 = 1e-10;

/// RBF Gaussian-process prior over time shared by every latent dimension.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DynamicPrior {
    pub time: Vec<f64>,
    pub log_lengthscale: f64,
    pub log_variance: f64,
    pub inducing: Vec<f64>,
    pub jitter: f64,
}

impl DynamicPrior {
    /// Inducing times evenly spaced over the observed range.
    pub fn new(time: Vec<f64>, num_inducing: usize) -> Result<Self> {
        if time.is_empty() {
            return Err(Error::Data("dynamic prior needs a time index".into()));
        }
        if time.windows(2).any(|w| w[1] < w[0]) || time.iter().any(|t| !t.is_finite()) {
            return Err(Error::Data("time index must be finite and sorted".into()));
        }
        if num_inducing == 0 {
            return Err(Error::Config("need at least one inducing time".into()));
        }
        let c = num_inducing.min(time.len());
        let (lo, hi) = (time[0], time[time.len() - 1]);
        let inducing = if c == 1 {
            vec![0.5 * (lo + hi)]
        } else {
            (0..c).map(|k| lo + (hi - lo) * k as f64 / (c - 1) as f64).collect()
        };
        Ok(Self {
            time,
            log_lengthscale: (0.1f64).ln(),
            log_variance: 0.0,
            inducing,
            jitter: DEFAULT_JITTER,
        })
    }

    pub fn lengthscale(&self) -> f64 {
        self.log_lengthscale.exp()
    }

    pub fn variance(&self) -> f64 {
        self.log_variance.exp()
    }

    pub fn factor(&self) -> Result<DynamicFactor> {
        prior_factor(&self.time, &self.inducing, self.lengthscale(), self.variance(), self.jitter)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum LatentPrior {
    Iid,
    Dynamic(DynamicPrior),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentState {
    pub x: DMatrix<f64>,
    pub prior: LatentPrior,
}

impl LatentState {
    pub fn validate(&self) -> Result<()> {
        if self.x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("latent matrix has non-finite entries".into()));
        }
        if let LatentPrior::Dynamic(p) = &self.prior {
            if p.time.len() != self.x.nrows() {
                return Err(Error::Dimension("one time point per latent row".into()));
            }
            if p.inducing.len() > p.time.len() || !(p.jitter > 0.0) {
                return Err(Error::Config("invalid inducing set or jitter".into()));
            }
        }
        Ok(())
    }

    /// Draw X from its prior.
    pub fn sample_prior<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<()> {
        let (n, d) = self.x.shape();
        match &self.prior {
            LatentPrior::Iid => {
                for v in self.x.iter_mut() {
                    *v = rng.sample(rand_distr::StandardNormal);
                }
            }
            LatentPrior::Dynamic(p) => {
                let f = p.factor()?;
                for k in 0..d {
                    self.x.set_column(k, &f.apply(&standard_normal_vector(n, rng)));
                }
            }
        }
        Ok(())
    }
}

/// k(t, t') = v·exp(−(t − t')²/2ℓ²).
pub fn rbf_time_kernel(t: f64, s: f64, lengthscale: f64, variance: f64) -> f64 {
    let d = (t - s) / lengthscale;
    variance * (-0.5 * d * d).exp()
}

/// Square-root factor F of K̂ = UUᵀ + Λ, so K̂ = F Fᵀ. Stored as
/// F = Λ^{1/2}(I + P diag(up) Pᵀ) with orthonormal P.
#[derive(Clone, Debug)]
pub struct DynamicFactor {
    sqrt_diag: DVector<f64>,
    p: DMatrix<f64>,
    up: DVector<f64>,
    down: DVector<f64>,
}

impl DynamicFactor {
    /// F z.
    pub fn apply(&self, z: &DVector<f64>) -> DVector<f64> {
        let coef = self.p.tr_mul(z).component_mul(&self.up);
        (z + &self.p * coef).component_mul(&self.sqrt_diag)
    }

    /// F⁻¹ x.
    pub fn whiten(&self, x: &DVector<f64>) -> DVector<f64> {
        let v = x.component_div(&self.sqrt_diag);
        let coef = self.p.tr_mul(&v).component_mul(&self.down);
        &v + &self.p * coef
    }

    /// Per-row Gaussian conditionals of K̂ as the precision diagonal
    /// diag(K̂⁻¹) and the helpers [`RowConditionals`] needs. `floor` bounds
    /// the diagonal below (1/k(t, t) is exact).
    pub fn conditionals(&self, x: &DMatrix<f64>, floor: f64) -> RowConditionals<'_> {
        let shrink = self.down.map(|d| 1.0 - (1.0 + d) * (1.0 + d));
        let q_diag = DVector::from_fn(self.sqrt_diag.len(), |i, _| {
            let lev: f64 = self.p.row(i).iter().zip(shrink.iter()).map(|(a, g)| a * a * g).sum();
            ((1.0 - lev) / (self.sqrt_diag[i] * self.sqrt_diag[i])).max(floor)
        });
        let proj = x
            .column_iter()
            .map(|col| self.p.tr_mul(&col.component_div(&self.sqrt_diag)))
            .collect();
        RowConditionals { factor: self, shrink, q_diag, proj }
    }

    /// The implied dense covariance F Fᵀ.
    pub fn covariance(&self) -> DMatrix<f64> {
        let n = self.sqrt_diag.len();
        let mut f = DMatrix::identity(n, n) + &self.p * DMatrix::from_diagonal(&self.up) * self.p.transpose();
        for i in 0..n {
            f.row_mut(i).scale_mut(self.sqrt_diag[i]);
        }
        &f * f.transpose()
    }
}

/// Conditionals x_i | x_{−i} ~ N(μ_i, I/Q_ii) of every row under K̂,
/// kept current as rows change. Q = Λ^{-1/2}(I − P diag(g) Pᵀ)Λ^{-1/2}.
pub struct RowConditionals<'a> {
    factor: &'a DynamicFactor,
    shrink: DVector<f64>,
    q_diag: DVector<f64>,
    /// Pᵀ Λ^{-1/2} x_d per latent dimension.
    proj: Vec<DVector<f64>>,
}

impl RowConditionals<'_> {
    /// (μ_i, conditional standard deviation) for row `i` of `x`.
    pub fn row(&self, x: &DMatrix<f64>, i: usize) -> (DVector<f64>, f64) {
        let f = self.factor;
        let si = f.sqrt_diag[i];
        let q = self.q_diag[i];
        let mean = DVector::from_fn(x.ncols(), |d, _| {
            let low: f64 = (0..self.shrink.len()).map(|k| f.p[(i, k)] * self.shrink[k] * self.proj[d][k]).sum();
            let qx = (x[(i, d)] / si - low) / si;
            x[(i, d)] - qx / q
        });
        (mean, q.sqrt().recip())
    }

    /// Record that row `i` moved from `old` to `new`.
    pub fn update(&mut self, i: usize, old: &DVector<f64>, new: &DVector<f64>) {
        let f = self.factor;
        for (d, proj) in self.proj.iter_mut().enumerate() {
            let delta = (new[d] - old[d]) / f.sqrt_diag[i];
            for k in 0..proj.len() {
                proj[k] += f.p[(i, k)] * delta;
            }
        }
    }
}

/// Low-rank-plus-diagonal factor of the RBF covariance over `time` through
/// the `inducing` times: K̂ = K_nc K_cc⁺ K_cn + diag(k_nn − that) + jitter·I.
pub fn prior_factor(
    time: &[f64],
    inducing: &[f64],
    lengthscale: f64,
    variance: f64,
    jitter: f64,
) -> Result<DynamicFactor> {
    if !(lengthscale > 0.0 && lengthscale.is_finite() && variance > 0.0 && variance.is_finite()) {
        return Err(Error::Config(format!(
            "GP hyperparameters must be positive and finite, got ℓ = {lengthscale}, v = {variance}"
        )));
    }
    let n = time.len();
    let c = inducing.len();
    let kcc = DMatrix::from_fn(c, c, |a, b| rbf_time_kernel(inducing[a], inducing[b], lengthscale, variance));
    let eig = SymmetricEigen::try_new(kcc, 1e-14, 0)
        .ok_or_else(|| Error::NotPositiveDefinite("inducing covariance eigendecomposition".into()))?;
    let max = eig.eigenvalues.max();
    let keep: Vec<usize> = (0..c).filter(|&k| eig.eigenvalues[k] > EIGEN_CUTOFF * max).collect();
    let kept = keep.len();
    let knc = DMatrix::from_fn(n, c, |i, a| rbf_time_kernel(time[i], inducing[a], lengthscale, variance));
    let basis = DMatrix::from_fn(c, kept, |a, k| eig.eigenvectors[(a, keep[k])] / eig.eigenvalues[keep[k]].sqrt());
    let u = knc * basis;
    let mut sqrt_diag = DVector::zeros(n);
    for i in 0..n {
        let resid = (variance - u.row(i).norm_squared()).max(0.0);
        sqrt_diag[i] = (resid + jitter).sqrt();
    }
    let mut v = u;
    for i in 0..n {
        v.row_mut(i).unscale_mut(sqrt_diag[i]);
    }
    let gram = v.tr_mul(&v);
    let eg = SymmetricEigen::new(gram);
    let gmax = eg.eigenvalues.max().max(0.0);
    let cols: Vec<usize> = (0..kept).filter(|&k| eg.eigenvalues[k] > 1e-14 * gmax && eg.eigenvalues[k] > 0.0).collect();
    let r = cols.len();
    let mut p = DMatrix::zeros(n, r);
    let mut up = DVector::zeros(r);
    let mut down = DVector::zeros(r);
    for (k, &col) in cols.iter().enumerate() {
        let s2 = eg.eigenvalues[col];
        let s = s2.sqrt();
        p.set_column(k, &(&v * eg.eigenvectors.column(col) / s));
        let root = (1.0 + s2).sqrt();
        up[k] = root - 1.0;
        down[k] = 1.0 / root - 1.0;
    }
    Ok(DynamicFactor { sqrt_diag, p, up, down })
}

/// Center every column and scale it to unit (population) variance. A
/// zero-variance column is only centered.
pub fn standardize_latent(x: &DMatrix<f64>) -> DMatrix<f64> {
    let n = x.nrows() as f64;
    let mut out = x.clone();
    for (d, mut col) in out.column_iter_mut().enumerate() {
        let mean = col.sum() / n;
        col.add_scalar_mut(-mean);
        let var = col.norm_squared() / n;
        if var > 0.0 && var.is_finite() {
            col.unscale_mut(var.sqrt());
        } else {
            warn!("latent dimension {d} has zero variance; centering only");
        }
    }
    out
}

/// Log-likelihood as a function of X.
pub trait LatentTarget {
    /// Evaluate at the full matrix `x` without changing the target.
    fn log_lik(&mut self, x: &DMatrix<f64>) -> f64;
    /// Make `x` current.
    fn set_latent(&mut self, x: &DMatrix<f64>) -> Result<()>;
    /// Value comparable with [`LatentTarget::propose_row`] at the current X.
    fn current_row(&self, i: usize) -> f64;
    fn propose_row(&mut self, i: usize, x_row: &DVector<f64>) -> f64;
    fn accept_row(&mut self) -> Result<()>;
}

/// Adapts a feature basis and a likelihood cache to a [`LatentTarget`].
pub struct FeatureTarget<'a> {
    pub basis: &'a FeatureBasis,
    pub cache: &'a mut LikelihoodCache,
}

impl LatentTarget for FeatureTarget<'_> {
    fn log_lik(&mut self, x: &DMatrix<f64>) -> f64 {
        match compute_features(x, self.basis) {
            Ok(phi) => self.cache.evaluate(&phi),
            Err(_) => f64::NEG_INFINITY,
        }
    }

    fn set_latent(&mut self, x: &DMatrix<f64>) -> Result<()> {
        self.cache.set_phi(compute_features(x, self.basis)?)
    }

    fn current_row(&self, i: usize) -> f64 {
        self.cache.current_row_log_lik(i)
    }

    fn propose_row(&mut self, i: usize, x_row: &DVector<f64>) -> f64 {
        let phi_row = feature_row(x_row.as_slice(), self.basis);
        self.cache.propose_row(i, &phi_row)
    }

    fn accept_row(&mut self) -> Result<()> {
        self.cache.accept_row()
    }
}

/// A [`LatentTarget`] defined by a closure over the full matrix.
pub struct ClosureTarget<F> {
    pub x: DMatrix<f64>,
    pub f: F,
    pending: Option<(usize, DVector<f64>)>,
}

impl<F: FnMut(&DMatrix<f64>) -> f64> ClosureTarget<F> {
    pub fn new(x: DMatrix<f64>, f: F) -> Self {
        Self { x, f, pending: None }
    }
}

impl<F: FnMut(&DMatrix<f64>) -> f64> LatentTarget for ClosureTarget<F> {
    fn log_lik(&mut self, x: &DMatrix<f64>) -> f64 {
        (self.f)(x)
    }

    fn set_latent(&mut self, x: &DMatrix<f64>) -> Result<()> {
        self.x = x.clone();
        Ok(())
    }

    fn current_row(&self, _i: usize) -> f64 {
        // evaluated lazily by callers that need it; see `row_value`
        f64::NAN
    }

    fn propose_row(&mut self, i: usize, x_row: &DVector<f64>) -> f64 {
        let mut x = self.x.clone();
        x.set_row(i, &x_row.transpose());
        self.pending = Some((i, x_row.clone()));
        (self.f)(&x)
    }

    fn accept_row(&mut self) -> Result<()> {
        let (i, row) = self.pending.take().ok_or_else(|| Error::Config("no pending row".into()))?;
        self.x.set_row(i, &row.transpose());
        Ok(())
    }
}

/// Granularity of the elliptical slice update under the independent prior.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentUpdate {
    /// One transition on vec(X).
    Joint,
    /// One transition per row x_i (under the dynamic prior, per row given
    /// the others and then per dimension).
    PerRow,
}

/// One sweep of elliptical slice updates of X. Under the independent prior
/// `mode` picks one transition per row or one on vec(X). The dynamic prior
/// always makes one transition per latent dimension; with
/// [`LatentUpdate::PerRow`] these are preceded by one transition per row
/// under its conditional prior given the other rows.
/// `target` must be current at `state.x` on entry and is current at the new
/// X on return.
pub fn update_latent<T, R>(
    state: &mut LatentState,
    target: &mut T,
    mode: LatentUpdate,
    rng: &mut R,
) -> Result<()>
where
    T: LatentTarget + ?Sized,
    R: Rng + ?Sized,
{
    let (n, d) = state.x.shape();
    match &state.prior {
        LatentPrior::Iid if mode == LatentUpdate::PerRow => {
            let zero = DVector::zeros(d);
            for i in 0..n {
                let current = state.x.row(i).transpose();
                let mut ll0 = target.current_row(i);
                if ll0.is_nan() {
                    ll0 = target.propose_row(i, &current);
                }
                let (next, _) = ess_step(
                    &current,
                    ll0,
                    &zero,
                    |r| standard_normal_vector(d, r),
                    |v| target.propose_row(i, v),
                    rng,
                )
                .map_err(|e| e.context(format!("latent row {i}")))?;
                target.accept_row()?;
                state.x.set_row(i, &next.transpose());
            }
        }
        LatentPrior::Iid => {
            let current = DVector::from_column_slice(state.x.as_slice());
            let ll0 = target.log_lik(&state.x);
            let zero = DVector::zeros(n * d);
            let (next, _) = ess_step(
                &current,
                ll0,
                &zero,
                |r| standard_normal_vector(n * d, r),
                |v| target.log_lik(&DMatrix::from_column_slice(n, d, v.as_slice())),
                rng,
            )
            .map_err(|e| e.context("joint latent update"))?;
            state.x = DMatrix::from_column_slice(n, d, next.as_slice());
            target.set_latent(&state.x)?;
        }
        LatentPrior::Dynamic(p) => {
            let factor = p.factor()?;
            let mut cond = factor.conditionals(&state.x, 1.0 / (p.variance() + p.jitter));
            for i in (0..n).filter(|_| mode == LatentUpdate::PerRow) {
                let current = state.x.row(i).transpose();
                let (mean, sd) = cond.row(&state.x, i);
                let mut ll0 = target.current_row(i);
                if ll0.is_nan() {
                    ll0 = target.propose_row(i, &current);
                }
                let (next, _) = ess_step(
                    &current,
                    ll0,
                    &mean,
                    |r| standard_normal_vector(d, r) * sd,
                    |v| target.propose_row(i, v),
                    rng,
                )
                .map_err(|e| e.context(format!("latent row {i}")))?;
                target.accept_row()?;
                cond.update(i, &current, &next);
                state.x.set_row(i, &next.transpose());
            }
            let zero = DVector::zeros(n);
            for k in 0..d {
                let current = state.x.column(k).into_owned();
                let ll0 = target.log_lik(&state.x);
                let mut x = state.x.clone();
                let (next, _) = ess_step(
                    &current,
                    ll0,
                    &zero,
                    |r| factor.apply(&standard_normal_vector(n, r)),
                    |v| {
                        x.set_column(k, v);
                        target.log_lik(&x)
                    },
                    rng,
                )
                .map_err(|e| e.context(format!("latent dimension {k}")))?;
                state.x.set_column(k, &next);
            }
            target.set_latent(&state.x)?;
        }
    }
    Ok(())
}

/// Whitened elliptical slice update of (log ℓ, log v) under independent
/// N(0, 1.5²) priors: u = F⁻¹x_d stays fixed and X is rebuilt from the
/// proposed hyperparameters. A factorization failure rejects the point.
pub fn update_gp_hypers<T, R>(state: &mut LatentState, target: &mut T, rng: &mut R) -> Result<()>
where
    T: LatentTarget + ?Sized,
    R: Rng + ?Sized,
{
    let prior = match &state.prior {
        LatentPrior::Dynamic(p) => p.clone(),
        LatentPrior::Iid => {
            return Err(Error::Config("GP hyperparameter update needs the dynamic prior".into()));
        }
    };
    let (n, d) = state.x.shape();
    let factor = prior.factor()?;
    let whitened: Vec<DVector<f64>> = (0..d).map(|k| factor.whiten(&state.x.column(k).into_owned())).collect();
    let rebuild = |theta: &DVector<f64>| -> Option<DMatrix<f64>> {
        let f = prior_factor(&prior.time, &prior.inducing, theta[0].exp(), theta[1].exp(), prior.jitter).ok()?;
        let mut x = DMatrix::zeros(n, d);
        for k in 0..d {
            x.set_column(k, &f.apply(&whitened[k]));
        }
        x.iter().all(|v| v.is_finite()).then_some(x)
    };
    let current = DVector::from_vec(vec![prior.log_lengthscale, prior.log_variance]);
    let ll0 = target.log_lik(&state.x);
    let zero = DVector::zeros(2);
    let (theta, _) = ess_step(
        &current,
        ll0,
        &zero,
        |r| standard_normal_vector(2, r) * HYPER_PRIOR_SD,
        |t| match rebuild(t) {
            Some(x) => target.log_lik(&x),
            None => f64::NEG_INFINITY,
        },
        rng,
    )
    .map_err(|e| e.context("GP hyperparameter update"))?;
    let x = rebuild(&theta).ok_or_else(|| Error::NotPositiveDefinite("accepted GP factor".into()))?;
    if let LatentPrior::Dynamic(p) = &mut state.prior {
        p.log_lengthscale = theta[0];
        p.log_variance = theta[1];
    }
    state.x = x;
    target.set_latent(&state.x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn grid(n: usize) -> Vec<f64> {
        (0..n).map(|i| i as f64 / (n - 1) as f64).collect()
    }

    fn exact_kernel(t: &[f64], l: f64, v: f64) -> DMatrix<f64> {
        DMatrix::from_fn(t.len(), t.len(), |a, b| rbf_time_kernel(t[a], t[b], l, v))
    }

    #[test]
    fn full_inducing_set_recovers_exact_kernel() {
        let t = grid(8);
        let f = prior_factor(&t, &t, 0.2, 1.3, 1e-6).unwrap();
        let want = exact_kernel(&t, 0.2, 1.3) + DMatrix::identity(8, 8) * 1e-6;
        assert!((f.covariance() - want).amax() < 1e-8);
    }

    #[test]
    fn inducing_approximation_error_is_small() {
        let t = grid(200);
        let ind = grid(25);
        let f = prior_factor(&t, &ind, 0.1, 1.0, 1e-6).unwrap();
        let exact = exact_kernel(&t, 0.1, 1.0);
        let err = (f.covariance() - &exact).norm() / exact.norm();
        assert!(err <= 0.05, "{err}");
    }

    #[test]
    fn implied_covariance_is_psd_and_whitening_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = grid(60);
        let ind = grid(10);
        for &(l, v) in &[(0.05, 1.0), (0.5, 2.0), (50.0, 0.3)] {
            let f = prior_factor(&t, &ind, l, v, 1e-6).unwrap();
            let eig = SymmetricEigen::new(f.covariance());
            assert!(eig.eigenvalues.min() >= -1e-8);
            let x = standard_normal_vector(60, &mut rng);
            let back = f.apply(&f.whiten(&x));
            assert!((back - &x).norm() <= 1e-8 * x.norm());
        }
    }

    #[test]
    fn long_lengthscale_gives_flat_paths() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = grid(100);
        let ind = grid(25);
        let v: f64 = 2.0;
        let f = prior_factor(&t, &ind, 1e3, v, 1e-6).unwrap();
        for _ in 0..20 {
            let x = f.apply(&standard_normal_vector(100, &mut rng));
            let mean = x.mean();
            let sd = ((x.add_scalar(-mean)).norm_squared() / 100.0).sqrt();
            assert!(sd < 0.01 * v.sqrt(), "{sd}");
        }
    }

    #[test]
    fn prior_draws_match_factor_covariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = grid(6);
        let f = prior_factor(&t, &grid(3), 0.3, 1.0, 1e-6).unwrap();
        let target = f.covariance();
        let n = 100_000;
        let mut acc = DMatrix::zeros(6, 6);
        for _ in 0..n {
            let x = f.apply(&standard_normal_vector(6, &mut rng));
            acc += &x * x.transpose();
        }
        acc /= n as f64;
        // var of a sample covariance entry ≈ (K_ab² + K_aa K_bb)/n
        for a in 0..6 {
            for b in 0..6 {
                let se = ((target[(a, b)].powi(2) + target[(a, a)] * target[(b, b)]) / n as f64).sqrt();
                assert!((acc[(a, b)] - target[(a, b)]).abs() < 4.0 * se);
            }
        }
    }

    #[test]
    fn dynamic_update_with_constant_likelihood_samples_prior() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let prior = DynamicPrior { log_lengthscale: 0.3f64.ln(), ..DynamicPrior::new(grid(5), 3).unwrap() };
        let cov = prior.factor().unwrap().covariance();
        let mut state = LatentState { x: DMatrix::zeros(5, 1), prior: LatentPrior::Dynamic(prior) };
        let mut target = ClosureTarget::new(state.x.clone(), |_: &DMatrix<f64>| 0.0);
        let n = 60_000;
        let mut acc = DMatrix::zeros(5, 5);
        for _ in 0..n {
            update_latent(&mut state, &mut target, LatentUpdate::PerRow, &mut rng).unwrap();
            let x = state.x.column(0).into_owned();
            acc += &x * x.transpose();
        }
        acc /= n as f64;
        assert!((acc - cov).amax() < 0.04);
    }

    #[test]
    fn iid_constant_likelihood_gives_identity_covariance() {
        for mode in [LatentUpdate::Joint, LatentUpdate::PerRow] {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let mut state = LatentState { x: DMatrix::zeros(3, 2), prior: LatentPrior::Iid };
            let mut target = ClosureTarget::new(state.x.clone(), |_: &DMatrix<f64>| 0.0);
            let n = 40_000;
            let mut acc = DMatrix::zeros(6, 6);
            for _ in 0..n {
                update_latent(&mut state, &mut target, mode, &mut rng).unwrap();
                let v = DVector::from_column_slice(state.x.as_slice());
                acc += &v * v.transpose();
            }
            acc /= n as f64;
            assert!((acc - DMatrix::identity(6, 6)).amax() < 0.05, "{mode:?}");
        }
    }

    /// Unnormalised posterior of (x1, x2) for D = 1, N = 2 with y_i ~ N(sin x_i, 0.3²).
    fn toy_log_post(x: &[f64; 2], y: &[f64; 2]) -> f64 {
        let s2 = 0.09;
        (0..2).map(|i| -0.5 * x[i] * x[i] - 0.5 * (y[i] - x[i].sin()).powi(2) / s2).sum()
    }

    #[test]
    fn toy_posterior_moments_match_grid() {
        let y = [0.6, -0.9];
        // grid oracle
        let (lo, hi, steps) = (-6.0, 6.0, 600);
        let h = (hi - lo) / steps as f64;
        let mut z = 0.0;
        let mut m = [0.0; 2];
        let mut m2 = [0.0; 2];
        for a in 0..steps {
            for b in 0..steps {
                let x = [lo + (a as f64 + 0.5) * h, lo + (b as f64 + 0.5) * h];
                let p = toy_log_post(&x, &y).exp();
                z += p;
                for k in 0..2 {
                    m[k] += p * x[k];
                    m2[k] += p * x[k] * x[k];
                }
            }
        }
        let mut want = [0.0; 2];
        let mut var = [0.0; 2];
        for k in 0..2 {
            want[k] = m[k] / z;
            var[k] = m2[k] / z - want[k] * want[k];
        }
        for mode in [LatentUpdate::Joint, LatentUpdate::PerRow] {
            let mut rng = ChaCha8Rng::seed_from_u64(6);
            let mut state = LatentState { x: DMatrix::zeros(2, 1), prior: LatentPrior::Iid };
            let ll = |x: &DMatrix<f64>| {
                (0..2).map(|i| -0.5 * (y[i] - x[(i, 0)].sin()).powi(2) / 0.09).sum::<f64>()
            };
            let mut target = ClosureTarget::new(state.x.clone(), ll);
            let n = 100_000;
            let mut draws = vec![Vec::with_capacity(n); 2];
            for _ in 0..n {
                update_latent(&mut state, &mut target, mode, &mut rng).unwrap();
                for k in 0..2 {
                    draws[k].push(state.x[(k, 0)]);
                }
            }
            for k in 0..2 {
                let mean = draws[k].iter().sum::<f64>() / n as f64;
                let batch = 1000;
                let bm: Vec<f64> = draws[k].chunks(batch).map(|c| c.iter().sum::<f64>() / batch as f64).collect();
                let bvar = bm.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (bm.len() - 1) as f64;
                let se = (bvar / bm.len() as f64).sqrt();
                assert!((mean - want[k]).abs() < 3.0 * se, "{mode:?} x{k}: {mean} vs {}", want[k]);
                let v = draws[k].iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n as f64;
                assert!((v / var[k] - 1.0).abs() < 0.05);
            }
        }
    }

    #[test]
    fn row_conditionals_match_dense_precision() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let t = grid(12);
        for &(l, v) in &[(0.05, 1.0), (0.3, 1.7), (3.0, 0.5)] {
            let f = prior_factor(&t, &grid(5), l, v, 1e-6).unwrap();
            let q = f.covariance().try_inverse().unwrap();
            let mut x = DMatrix::from_fn(12, 2, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal));
            let mut cond = f.conditionals(&x, 0.0);
            for step in 0..3 {
                for i in 0..12 {
                    let (mean, sd) = cond.row(&x, i);
                    assert!((sd * sd * q[(i, i)] - 1.0).abs() < 1e-6, "{l} {step} {i}");
                    for d in 0..2 {
                        let qx: f64 = (0..12).filter(|&j| j != i).map(|j| q[(i, j)] * x[(j, d)]).sum();
                        let want = -qx / q[(i, i)];
                        assert!((mean[d] - want).abs() < 1e-6 * (1.0 + want.abs()), "{l} {i} {d}");
                    }
                    let old = x.row(i).transpose();
                    let new = standard_normal_vector(2, &mut rng);
                    cond.update(i, &old, &new);
                    x.set_row(i, &new.transpose());
                }
            }
        }
    }

    #[test]
    fn dynamic_toy_posterior_matches_grid() {
        let prior = DynamicPrior { log_lengthscale: 0.8f64.ln(), ..DynamicPrior::new(vec![0.0, 1.0], 2).unwrap() };
        let q = prior.factor().unwrap().covariance().try_inverse().unwrap();
        let y = [0.6, -0.9];
        let log_lik = |x: &[f64; 2]| -> f64 { (0..2).map(|i| -0.5 * (y[i] - x[i].sin()).powi(2) / 0.09).sum() };
        let log_post = |x: &[f64; 2]| {
            let quad = q[(0, 0)] * x[0] * x[0] + 2.0 * q[(0, 1)] * x[0] * x[1] + q[(1, 1)] * x[1] * x[1];
            log_lik(x) - 0.5 * quad
        };
        let (lo, hi, steps) = (-6.0, 6.0, 600);
        let h = (hi - lo) / steps as f64;
        let (mut z, mut m, mut m2) = (0.0, [0.0; 2], [0.0; 2]);
        for a in 0..steps {
            for b in 0..steps {
                let x = [lo + (a as f64 + 0.5) * h, lo + (b as f64 + 0.5) * h];
                let p = log_post(&x).exp();
                z += p;
                for k in 0..2 {
                    m[k] += p * x[k];
                    m2[k] += p * x[k] * x[k];
                }
            }
        }
        for mode in [LatentUpdate::Joint, LatentUpdate::PerRow] {
            let mut rng = ChaCha8Rng::seed_from_u64(12);
            let mut state = LatentState { x: DMatrix::zeros(2, 1), prior: LatentPrior::Dynamic(prior.clone()) };
            let mut target = ClosureTarget::new(state.x.clone(), |x: &DMatrix<f64>| log_lik(&[x[(0, 0)], x[(1, 0)]]));
            let n = 400_000;
            let mut draws = vec![Vec::with_capacity(n); 2];
            for _ in 0..n {
                update_latent(&mut state, &mut target, mode, &mut rng).unwrap();
                for k in 0..2 {
                    draws[k].push(state.x[(k, 0)]);
                }
            }
            for k in 0..2 {
                let want = m[k] / z;
                let var = m2[k] / z - want * want;
                let mean = draws[k].iter().sum::<f64>() / n as f64;
                let bm: Vec<f64> = draws[k].chunks(4000).map(|c| c.iter().sum::<f64>() / 4000.0).collect();
                let bvar = bm.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (bm.len() - 1) as f64;
                let se = (bvar / bm.len() as f64).sqrt();
                assert!((mean - want).abs() < 3.0 * se, "{mode:?} x{k}: {mean} vs {want}");
                let v = draws[k].iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n as f64;
                assert!((v / var - 1.0).abs() < 0.05, "{mode:?} x{k}: {v} vs {var}");
            }
        }
    }

    #[test]
    fn standardization() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = DMatrix::from_fn(50, 3, |_, _| rng.random_range(-3.0..5.0));
        let s = standardize_latent(&x);
        for col in s.column_iter() {
            assert!(col.mean().abs() < 1e-12);
            assert!((col.norm_squared() / 50.0 - 1.0).abs() < 1e-12);
        }
        assert!((standardize_latent(&s) - &s).amax() < 1e-12);
        let mut affine = x.clone();
        for (k, mut col) in affine.column_iter_mut().enumerate() {
            col.scale_mut(2.0 + k as f64);
            col.add_scalar_mut(-7.0 * k as f64);
        }
        assert!((standardize_latent(&affine) - &s).amax() < 1e-10);
        let flat = DMatrix::from_element(4, 1, 3.0);
        assert!(standardize_latent(&flat).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn hyper_chain_with_flat_likelihood_matches_prior() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let prior = DynamicPrior::new(grid(20), 5).unwrap();
        let mut state = LatentState { x: DMatrix::zeros(20, 1), prior: LatentPrior::Dynamic(prior) };
        state.sample_prior(&mut rng).unwrap();
        let mut target = ClosureTarget::new(state.x.clone(), |_: &DMatrix<f64>| 0.0);
        let n = 40_000;
        let mut draws = vec![Vec::with_capacity(n); 2];
        for _ in 0..n {
            update_gp_hypers(&mut state, &mut target, &mut rng).unwrap();
            if let LatentPrior::Dynamic(p) = &state.prior {
                draws[0].push(p.log_lengthscale);
                draws[1].push(p.log_variance);
            }
        }
        for d in &draws {
            let mean = d.iter().sum::<f64>() / n as f64;
            let sd = (d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
            assert!(mean.abs() < 0.1, "mean {mean}");
            assert!((sd - HYPER_PRIOR_SD).abs() < 0.1, "sd {sd}");
        }
    }

    #[test]
    fn hyper_update_is_deterministic() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let prior = DynamicPrior::new(grid(15), 5).unwrap();
            let mut state = LatentState { x: DMatrix::zeros(15, 2), prior: LatentPrior::Dynamic(prior) };
            state.sample_prior(&mut rng).unwrap();
            let mut target = ClosureTarget::new(state.x.clone(), |x: &DMatrix<f64>| -0.5 * x.norm_squared());
            for _ in 0..30 {
                update_gp_hypers(&mut state, &mut target, &mut rng).unwrap();
            }
            state
        };
        assert_eq!(run(), run());
    }
}
