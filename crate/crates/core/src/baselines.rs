//! Linear baselines: PCA (used for initialization and as a comparison) and
//! probabilistic PCA with EM imputation of masked entries.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::latent::standardize_latent;
use crate::linalg::{cholesky, symmetrize};

/// Transform applied to Y before PCA.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PcaTransform {
    Identity,
    Log1p,
}

#[derive(Clone, Debug)]
pub struct PcaFit {
    /// N×D scores.
    pub scores: DMatrix<f64>,
    /// J×D orthonormal loadings.
    pub components: DMatrix<f64>,
    pub mean: DVector<f64>,
    /// Variances along each component, descending.
    pub variances: DVector<f64>,
}

/// Eigenpairs of a symmetric matrix sorted by decreasing eigenvalue.
fn sorted_eigen(s: DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(s);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = DVector::from_iterator(order.len(), order.iter().map(|&k| eig.eigenvalues[k]));
    let vectors = DMatrix::from_fn(eig.eigenvectors.nrows(), order.len(), |r, c| eig.eigenvectors[(r, order[c])]);
    (values, vectors)
}

fn column_means(y: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_iterator(y.ncols(), y.column_iter().map(|c| c.mean()))
}

fn centered(y: &DMatrix<f64>, mean: &DVector<f64>) -> DMatrix<f64> {
    let mut out = y.clone();
    for (j, mut col) in out.column_iter_mut().enumerate() {
        col.add_scalar_mut(-mean[j]);
    }
    out
}

fn sample_covariance(yc: &DMatrix<f64>) -> DMatrix<f64> {
    yc.tr_mul(yc) / yc.nrows() as f64
}

fn check_rank(d: usize, j: usize) -> Result<()> {
    if d == 0 || d > j {
        return Err(Error::Config(format!("latent dimension {d} must be in 1..={j}")));
    }
    Ok(())
}

/// PCA of a fully observed matrix.
pub fn pca(y: &DMatrix<f64>, d: usize) -> Result<PcaFit> {
    check_rank(d, y.ncols())?;
    let mean = column_means(y);
    let yc = centered(y, &mean);
    let (values, vectors) = sorted_eigen(sample_covariance(&yc));
    let components = vectors.columns(0, d).into_owned();
    Ok(PcaFit {
        scores: &yc * &components,
        components,
        mean,
        variances: values.rows(0, d).map(|v| v.max(0.0)),
    })
}

/// Y after `transform`, with masked entries replaced by observed column means.
pub fn filled_matrix(data: &Dataset, transform: PcaTransform) -> DMatrix<f64> {
    let mut y = data.y.map(|v| match transform {
        PcaTransform::Identity => v,
        PcaTransform::Log1p => v.ln_1p(),
    });
    for j in 0..data.j() {
        let (sum, count) = (0..data.n())
            .filter(|&i| data.mask[(i, j)])
            .fold((0.0, 0usize), |(s, c), i| (s + y[(i, j)], c + 1));
        let fill = if count > 0 { sum / count as f64 } else { 0.0 };
        for i in 0..data.n() {
            if !data.mask[(i, j)] {
                y[(i, j)] = fill;
            }
        }
    }
    y
}

/// PCA scores of a (possibly masked) dataset.
pub fn pca_scores(data: &Dataset, transform: PcaTransform, d: usize) -> Result<DMatrix<f64>> {
    Ok(pca(&filled_matrix(data, transform), d)?.scores)
}

/// Standardized PCA scores, log1p-transformed for count data.
pub fn pca_init(data: &Dataset, counts: bool, d: usize) -> Result<DMatrix<f64>> {
    let transform = if counts { PcaTransform::Log1p } else { PcaTransform::Identity };
    if d > data.j() {
        // fewer features than latent dimensions: pad with zeros
        let mut x = DMatrix::zeros(data.n(), d);
        let s = pca_scores(data, transform, data.j())?;
        x.columns_mut(0, data.j()).copy_from(&s);
        return Ok(standardize_latent(&x));
    }
    Ok(standardize_latent(&pca_scores(data, transform, d)?))
}

/// Maximum-likelihood PPCA parameters: y ~ N(μ, WWᵀ + σ²I).
#[derive(Clone, Debug)]
pub struct PpcaModel {
    pub w: DMatrix<f64>,
    pub mean: DVector<f64>,
    pub sigma2: f64,
}

impl PpcaModel {
    /// Closed-form fit from a mean and covariance.
    pub fn from_moments(mean: DVector<f64>, cov: DMatrix<f64>, d: usize) -> Result<Self> {
        let j = cov.nrows();
        check_rank(d, j)?;
        let (values, vectors) = sorted_eigen(cov);
        let sigma2 = if d < j { (values.rows(d, j - d).sum() / (j - d) as f64).max(0.0) } else { 0.0 };
        let mut w = vectors.columns(0, d).into_owned();
        for k in 0..d {
            w.column_mut(k).scale_mut((values[k] - sigma2).max(0.0).sqrt());
        }
        Ok(Self { w, mean, sigma2 })
    }

    pub fn fit(y: &DMatrix<f64>, d: usize) -> Result<Self> {
        let mean = column_means(y);
        let cov = sample_covariance(&centered(y, &mean));
        Self::from_moments(mean, cov, d)
    }

    pub fn dim(&self) -> usize {
        self.w.ncols()
    }

    /// Posterior means E[x_i | y_i] for fully observed rows.
    pub fn scores(&self, y: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let m = self.w.tr_mul(&self.w) + DMatrix::identity(self.dim(), self.dim()) * self.sigma2;
        let chol = cholesky(&m, "PPCA latent precision")?;
        let rhs = centered(y, &self.mean) * &self.w;
        Ok(chol.solve(&rhs.transpose()).transpose())
    }

    /// W E[x | y] + μ.
    pub fn reconstruct(&self, scores: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = scores * self.w.transpose();
        for (j, mut col) in out.column_iter_mut().enumerate() {
            col.add_scalar_mut(self.mean[j]);
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct PpcaResult {
    pub model: PpcaModel,
    /// N×D posterior mean scores.
    pub scores: DMatrix<f64>,
    /// Y with masked entries replaced by their conditional expectations.
    pub completed: DMatrix<f64>,
    /// (i, j, value) for each masked entry, row-major order.
    pub imputed: Vec<(usize, usize, f64)>,
    pub iterations: usize,
    /// Observed-data log-likelihood at the start of each EM sweep.
    pub log_likelihood: Vec<f64>,
}

/// Floor on σ² during EM so the conditional precisions stay invertible.
const EM_SIGMA_FLOOR: f64 = 1e-8;

/// PPCA on a masked dataset. Fully observed data use the closed form;
/// otherwise EM over the masked entries runs until the log-likelihood gain
/// falls below `tol` or `max_iter` sweeps.
pub fn ppca_baseline(data: &Dataset, d: usize, max_iter: usize, tol: f64) -> Result<PpcaResult> {
    let (n, j) = (data.n(), data.j());
    check_rank(d, j)?;
    if data.fully_observed() {
        let model = PpcaModel::fit(&data.y, d)?;
        let scores = model.scores(&data.y)?;
        return Ok(PpcaResult { model, scores, completed: data.y.clone(), imputed: Vec::new(), iterations: 0, log_likelihood: Vec::new() });
    }
    let filled = filled_matrix(data, PcaTransform::Identity);
    let mut model = PpcaModel::fit(&filled, d)?;
    model.sigma2 = model.sigma2.max(EM_SIGMA_FLOOR);
    let mut iterations = 0;
    let mut previous = f64::NEG_INFINITY;
    let mut completed = filled;
    let mut scores = DMatrix::zeros(n, d);
    let mut trace = Vec::new();
    loop {
        // E-step: conditional moments of x_i and of the missing y given the observed entries
        let mut sum_y = DVector::zeros(j);
        let mut second = DMatrix::zeros(j, j);
        let mut loglik = 0.0;
        let mut rows = Vec::with_capacity(n);
        for i in 0..n {
            let obs: Vec<usize> = (0..j).filter(|&c| data.mask[(i, c)]).collect();
            let wo = DMatrix::from_fn(obs.len(), d, |r, k| model.w[(obs[r], k)]);
            let resid = DVector::from_iterator(obs.len(), obs.iter().map(|&c| data.y[(i, c)] - model.mean[c]));
            let mo = wo.tr_mul(&wo) + DMatrix::identity(d, d) * model.sigma2;
            let chol = cholesky(&mo, "PPCA conditional precision")?;
            let xbar = chol.solve(&wo.tr_mul(&resid));
            let xcov = chol.inverse() * model.sigma2;
            // log N(y_o; μ_o, W_o W_oᵀ + σ²I) via the matrix determinant lemma
            let logdet = obs.len() as f64 * model.sigma2.ln() + 2.0 * chol.l().diagonal().map(f64::ln).sum()
                - d as f64 * model.sigma2.ln();
            let quad = (resid.norm_squared() - resid.dot(&(&wo * &xbar))) / model.sigma2;
            loglik -= 0.5 * (logdet + quad + obs.len() as f64 * (2.0 * std::f64::consts::PI).ln());

            let ey = &model.w * &xbar + &model.mean;
            let mut yi = ey.clone();
            for &c in &obs {
                yi[c] = data.y[(i, c)];
            }
            // Cov[y_i]: zero on observed coordinates, W_m xcov W_mᵀ + σ²I on missing ones
            let mut cov_m = &model.w * &xcov * model.w.transpose();
            for &c in &obs {
                cov_m.row_mut(c).fill(0.0);
                cov_m.column_mut(c).fill(0.0);
            }
            for c in 0..j {
                if !data.mask[(i, c)] {
                    cov_m[(c, c)] += model.sigma2;
                }
            }
            sum_y += &yi;
            second += &yi * yi.transpose() + cov_m;
            scores.set_row(i, &xbar.transpose());
            rows.push(yi);
        }
        for (i, yi) in rows.into_iter().enumerate() {
            completed.set_row(i, &yi.transpose());
        }
        iterations += 1;
        trace.push(loglik);
        if iterations >= max_iter || (loglik - previous).abs() <= tol * loglik.abs().max(1.0) {
            break;
        }
        previous = loglik;
        // M-step: closed-form PPCA on the expected moments
        let mean = sum_y / n as f64;
        let mut cov = second / n as f64 - &mean * mean.transpose();
        symmetrize(&mut cov);
        model = PpcaModel::from_moments(mean, cov, d)?;
        model.sigma2 = model.sigma2.max(EM_SIGMA_FLOOR);
    }
    let imputed = (0..n)
        .flat_map(|i| (0..j).map(move |c| (i, c)))
        .filter(|&(i, c)| !data.mask[(i, c)])
        .map(|(i, c)| (i, c, completed[(i, c)]))
        .collect();
    Ok(PpcaResult { model, scores, completed, imputed, iterations, log_likelihood: trace })
}
