//! Normal–inverse-Wishart draws, posteriors and the multivariate Student-t
//! marginal used for new mixture components.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::linalg::{cholesky, log_det, mvn_from_factor, symmetrize};

/// NIW(mean, lambda, nu, scale): Σ ~ W⁻¹(scale, nu), μ | Σ ~ N(mean, Σ / lambda).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NiwParams {
    pub mean: DVector<f64>,
    pub lambda: f64,
    pub nu: f64,
    pub scale: DMatrix<f64>,
}

impl NiwParams {
    pub fn new(mean: DVector<f64>, lambda: f64, nu: f64, scale: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if scale.nrows() != d || scale.ncols() != d {
            return Err(Error::Dimension(format!(
                "NIW scale is {}x{}, mean has length {d}",
                scale.nrows(),
                scale.ncols()
            )));
        }
        if !(lambda > 0.0) {
            return Err(Error::Config(format!("NIW lambda must be > 0, got {lambda}")));
        }
        if !(nu > d as f64 - 1.0) {
            return Err(Error::Config(format!("NIW nu must exceed D-1 = {}, got {nu}", d - 1)));
        }
        cholesky(&scale, "NIW scale")?;
        Ok(Self { mean, lambda, nu, scale })
    }

    /// μ0 = 0, λ0 = 1, ν0 = D + 2, Ψ0 = I.
    pub fn default_prior(dim: usize) -> Self {
        Self {
            mean: DVector::zeros(dim),
            lambda: 1.0,
            nu: dim as f64 + 2.0,
            scale: DMatrix::identity(dim, dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Conjugate posterior given the member vectors.
    pub fn posterior<'a, I>(&self, members: I) -> NiwParams
    where
        I: IntoIterator<Item = &'a DVector<f64>>,
    {
        let members: Vec<&DVector<f64>> = members.into_iter().collect();
        let n = members.len();
        if n == 0 {
            return self.clone();
        }
        let d = self.dim();
        let nf = n as f64;
        let mut mean_w = DVector::zeros(d);
        for w in &members {
            mean_w += *w;
        }
        mean_w /= nf;
        let mut scatter = DMatrix::zeros(d, d);
        for w in &members {
            let dev = *w - &mean_w;
            scatter += &dev * dev.transpose();
        }
        let prior_dev = &mean_w - &self.mean;
        let shrink = self.lambda * nf / (self.lambda + nf);
        let mut scale = &self.scale + scatter + prior_dev.clone() * prior_dev.transpose() * shrink;
        symmetrize(&mut scale);
        NiwParams {
            mean: (&self.mean * self.lambda + mean_w * nf) / (self.lambda + nf),
            lambda: self.lambda + nf,
            nu: self.nu + nf,
            scale,
        }
    }

    /// Degrees of freedom, location and scale of the predictive Student-t.
    pub fn predictive(&self) -> (f64, &DVector<f64>, DMatrix<f64>) {
        let d = self.dim() as f64;
        let df = self.nu - d + 1.0;
        let scale = &self.scale * ((self.lambda + 1.0) / (self.lambda * df));
        (df, &self.mean, scale)
    }
}

/// Σ ~ W⁻¹(scale, nu) by the Bartlett decomposition of the Wishart draw Σ⁻¹.
pub fn inverse_wishart_draw<R: Rng + ?Sized>(
    scale: &DMatrix<f64>,
    nu: f64,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    let d = scale.nrows();
    let l = cholesky(scale, "inverse-Wishart scale")?.l();
    // A lower triangular with chi-square diagonal; Σ = (L A⁻ᵀ)(L A⁻ᵀ)ᵀ.
    let mut a = DMatrix::zeros(d, d);
    for i in 0..d {
        let chi2 = Gamma::new(0.5 * (nu - i as f64), 2.0)
            .map_err(|e| Error::Config(format!("inverse-Wishart degrees of freedom: {e}")))?
            .sample(rng);
        a[(i, i)] = chi2.sqrt();
        for j in 0..i {
            a[(i, j)] = rng.sample::<f64, _>(StandardNormal);
        }
    }
    let a_inv_t = a
        .transpose()
        .solve_upper_triangular(&DMatrix::identity(d, d))
        .ok_or_else(|| Error::NotPositiveDefinite("Bartlett factor".into()))?;
    let t = l * a_inv_t;
    let mut sigma = &t * t.transpose();
    symmetrize(&mut sigma);
    Ok(sigma)
}

/// (μ, Σ) ~ NIW(hyper).
pub fn niw_draw<R: Rng + ?Sized>(
    hyper: &NiwParams,
    rng: &mut R,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let sigma = inverse_wishart_draw(&hyper.scale, hyper.nu, rng)?;
    let cov = &sigma / hyper.lambda;
    let l = cholesky(&cov, "NIW mean covariance")?.l();
    let mu = mvn_from_factor(&hyper.mean, &l, rng);
    Ok((mu, sigma))
}

/// log of ∫ N(w | μ, Σ) NIW(μ, Σ) dμ dΣ, a multivariate Student-t density.
pub fn niw_marginal_log_density(w: &DVector<f64>, hyper: &NiwParams) -> Result<f64> {
    let (df, loc, scale) = hyper.predictive();
    student_t_log_density(w, df, loc, &scale)
}

pub fn niw_marginal_density(w: &DVector<f64>, hyper: &NiwParams) -> Result<f64> {
    niw_marginal_log_density(w, hyper).map(f64::exp)
}

pub fn student_t_log_density(
    w: &DVector<f64>,
    df: f64,
    loc: &DVector<f64>,
    scale: &DMatrix<f64>,
) -> Result<f64> {
    let d = w.len() as f64;
    let chol = cholesky(scale, "Student-t scale")?;
    let dev = w - loc;
    let maha = dev.dot(&chol.solve(&dev));
    Ok(ln_gamma(0.5 * (df + d)) - ln_gamma(0.5 * df)
        - 0.5 * d * (df * PI).ln()
        - 0.5 * log_det(&chol)
        - 0.5 * (df + d) * (maha / df).ln_1p())
}

/// log N(w | mean, cov) given the Cholesky factor of `cov`.
pub fn gaussian_log_density(
    w: &DVector<f64>,
    mean: &DVector<f64>,
    chol: &nalgebra::Cholesky<f64, nalgebra::Dyn>,
) -> f64 {
    let d = w.len() as f64;
    let dev = w - mean;
    let z = chol
        .l_dirty()
        .solve_lower_triangular(&dev)
        .expect("cholesky factor has a positive diagonal");
    -0.5 * (d * (2.0 * PI).ln() + log_det(chol) + z.norm_squared())
}
