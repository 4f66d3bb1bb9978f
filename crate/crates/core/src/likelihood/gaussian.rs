//! Gaussian observations with the coefficients integrated out.
//!
//! With β_j ~ N(β0, σ_j² S0) the marginal of column j is
//! N(Φβ0, σ_j²(Φ S0 Φᵀ + I)). Everything is evaluated through the M × M
//! matrix A = S0⁻¹ + ΦᵀΦ so a column costs O(N M²), never O(N³).

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Gamma};

use super::{InverseGammaPrior, LikelihoodSpec};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg::{cholesky, log_det, standard_normal_vector};
use crate::rff::FrequencyTarget;

fn sigma2_of(spec: &LikelihoodSpec) -> Result<&[f64]> {
    match spec {
        LikelihoodSpec::Gaussian { sigma2, .. } => Ok(sigma2),
        other => Err(Error::Unsupported { kind: other.kind().to_string(), op: "gaussian marginal" }),
    }
}

/// Σ_j log N(y_j | Φβ0, σ_j²(Φ S0 Φᵀ + I)) over the observed rows of each
/// column, where S0 is `prior_cov`.
pub fn gaussian_marginal_loglik(
    phi: &DMatrix<f64>,
    spec: &LikelihoodSpec,
    data: &Dataset,
    prior_mean: &DVector<f64>,
    prior_cov: &DMatrix<f64>,
) -> Result<f64> {
    let sigma2 = sigma2_of(spec)?;
    let m = phi.ncols();
    if prior_cov.shape() != (m, m) || prior_mean.len() != m {
        return Err(Error::Dimension("coefficient prior does not match the features".into()));
    }
    let s0 = cholesky(prior_cov, "coefficient prior covariance")?;
    let s0_inv = s0.inverse();
    let logdet_s0 = log_det(&s0);
    let offset = phi * prior_mean;
    let mut centered = data.y.clone();
    for mut col in centered.column_iter_mut() {
        col -= &offset;
    }

    let column_term = |a: &DMatrix<f64>, rows: &[usize], j: usize| -> Result<f64> {
        let chol = cholesky(a, "marginal middle matrix")?;
        let mut c = DVector::zeros(m);
        let mut yty = 0.0;
        for &i in rows {
            let y = centered[(i, j)];
            yty += y * y;
            c += phi.row(i).transpose() * y;
        }
        let w = chol.l().solve_lower_triangular(&c).expect("nonsingular factor");
        let quad = yty - w.norm_squared();
        let n = rows.len() as f64;
        Ok(-0.5 * n * (2.0 * PI * sigma2[j]).ln()
            - 0.5 * (logdet_s0 + log_det(&chol))
            - 0.5 * quad / sigma2[j])
    };

    let all: Vec<usize> = (0..data.n()).collect();
    let mut total = 0.0;
    let shared = data.fully_observed().then(|| &s0_inv + phi.tr_mul(phi));
    for j in 0..data.j() {
        if let Some(a) = &shared {
            total += column_term(a, &all, j)?;
        } else {
            let rows: Vec<usize> = (0..data.n()).filter(|&i| data.observed(i, j)).collect();
            if rows.is_empty() {
                continue;
            }
            let mut a = s0_inv.clone();
            for &i in &rows {
                let r = phi.row(i);
                a += r.transpose() * r;
            }
            total += column_term(&a, &rows, j)?;
        }
    }
    Ok(total)
}

/// σ_j² ~ IG(a + n/2, b + ½ Σ residual²) for independent residuals.
pub fn update_sigma<R: Rng + ?Sized>(residuals: &[f64], prior: InverseGammaPrior, rng: &mut R) -> f64 {
    let ss: f64 = residuals.iter().map(|r| r * r).sum();
    inverse_gamma_draw(prior.shape + 0.5 * residuals.len() as f64, prior.scale + 0.5 * ss, rng)
}

/// σ_j² from its conditional with β_j integrated out: the marginal is
/// N(0, σ²(I + Φ S0 Φᵀ)) so the update is IG(a + n/2, b + quad/2) where
/// `quad = yᵀ(I + Φ S0 Φᵀ)⁻¹y`.
pub fn update_sigma_collapsed<R: Rng + ?Sized>(
    n: usize,
    quad: f64,
    prior: InverseGammaPrior,
    rng: &mut R,
) -> f64 {
    inverse_gamma_draw(prior.shape + 0.5 * n as f64, prior.scale + 0.5 * quad.max(0.0), rng)
}

pub(crate) fn inverse_gamma_draw<R: Rng + ?Sized>(shape: f64, scale: f64, rng: &mut R) -> f64 {
    let g = Gamma::new(shape, 1.0).expect("positive shape").sample(rng);
    (scale / g).max(f64::MIN_POSITIVE)
}

/// β_j ~ N(A⁻¹Φᵀy_j, σ_j² A⁻¹) with A = S0⁻¹ + ΦᵀΦ, for complete `y`.
pub fn draw_beta_gaussian<R: Rng + ?Sized>(
    phi: &DMatrix<f64>,
    y: &DMatrix<f64>,
    sigma2: &[f64],
    prior_cov: &DMatrix<f64>,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    let m = phi.ncols();
    let s0_inv = cholesky(prior_cov, "coefficient prior covariance")?.inverse();
    let a = s0_inv + phi.tr_mul(phi);
    let chol = cholesky(&a, "coefficient posterior precision")?;
    let c = phi.tr_mul(y);
    let mean = chol.solve(&c);
    let l = chol.l();
    let mut beta = mean;
    for j in 0..y.ncols() {
        let z = standard_normal_vector(m, rng);
        let v = l.tr_solve_lower_triangular(&z).expect("nonsingular factor");
        let mut col = beta.column_mut(j);
        col.axpy(sigma2[j].sqrt(), &v, 1.0);
    }
    Ok(beta)
}

struct RowProposal {
    row: usize,
    phi_row: DVector<f64>,
    g: DMatrix<f64>,
    k_inv: nalgebra::Matrix2<f64>,
    p_plus: DMatrix<f64>,
    q: DVector<f64>,
    logdet_a: f64,
    total: f64,
}

struct PairProposal {
    m: usize,
    sin: DVector<f64>,
    cos: DVector<f64>,
    a: DMatrix<f64>,
    c: DMatrix<f64>,
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    q: DVector<f64>,
    total: f64,
}

/// Incrementally updated Gaussian marginal likelihood for a complete
/// observation matrix, supporting cheap single-row and column-pair changes
/// of Φ. Assumes β0 = 0.
pub struct GaussianMarginalCache {
    phi: DMatrix<f64>,
    y: DMatrix<f64>,
    yty: DVector<f64>,
    sigma2: Vec<f64>,
    s0_inv: DMatrix<f64>,
    logdet_s0: f64,
    a: DMatrix<f64>,
    g: DMatrix<f64>,
    logdet_a: f64,
    c: DMatrix<f64>,
    z: DMatrix<f64>,
    q: DVector<f64>,
    total: f64,
    row_pending: Option<RowProposal>,
    pair_pending: Option<PairProposal>,
}

impl GaussianMarginalCache {
    pub fn new(
        phi: DMatrix<f64>,
        y: DMatrix<f64>,
        sigma2: Vec<f64>,
        prior_cov: &DMatrix<f64>,
    ) -> Result<Self> {
        if phi.nrows() != y.nrows() || sigma2.len() != y.ncols() {
            return Err(Error::Dimension("features, observations and noise variances disagree".into()));
        }
        let s0 = cholesky(prior_cov, "coefficient prior covariance")?;
        let s0_inv = s0.inverse();
        let logdet_s0 = log_det(&s0);
        let yty = DVector::from_iterator(y.ncols(), y.column_iter().map(|c| c.norm_squared()));
        let mut cache = Self {
            a: DMatrix::zeros(0, 0),
            g: DMatrix::zeros(0, 0),
            logdet_a: 0.0,
            c: DMatrix::zeros(0, 0),
            z: DMatrix::zeros(0, 0),
            q: DVector::zeros(0),
            total: 0.0,
            phi,
            y,
            yty,
            sigma2,
            s0_inv,
            logdet_s0,
            row_pending: None,
            pair_pending: None,
        };
        cache.rebuild()?;
        Ok(cache)
    }

    /// Recompute every derived quantity from Φ and Y.
    pub fn rebuild(&mut self) -> Result<()> {
        self.a = &self.s0_inv + self.phi.tr_mul(&self.phi);
        let chol = cholesky(&self.a, "marginal middle matrix")?;
        self.logdet_a = log_det(&chol);
        self.g = chol.inverse();
        self.c = self.phi.tr_mul(&self.y);
        self.z = &self.g * &self.c;
        self.q = DVector::from_iterator(
            self.y.ncols(),
            (0..self.y.ncols()).map(|j| self.c.column(j).dot(&self.z.column(j))),
        );
        self.total = self.total_for(self.logdet_a, &self.q);
        self.row_pending = None;
        self.pair_pending = None;
        Ok(())
    }

    fn total_for(&self, logdet_a: f64, q: &DVector<f64>) -> f64 {
        let n = self.y.nrows() as f64;
        (0..self.y.ncols())
            .map(|j| {
                let s = self.sigma2[j];
                -0.5 * n * (2.0 * PI * s).ln()
                    - 0.5 * (self.logdet_s0 + logdet_a)
                    - 0.5 * (self.yty[j] - q[j]) / s
            })
            .sum()
    }

    pub fn total(&self) -> f64 {
        self.total
    }

    pub fn phi(&self) -> &DMatrix<f64> {
        &self.phi
    }

    /// yᵀ(I + Φ S0 Φᵀ)⁻¹y for every column.
    pub fn quadratic_forms(&self) -> DVector<f64> {
        DVector::from_iterator(self.y.ncols(), (0..self.y.ncols()).map(|j| self.yty[j] - self.q[j]))
    }

    /// Marginal log-likelihood at a different Φ, leaving the cache untouched.
    pub fn evaluate(&self, phi: &DMatrix<f64>) -> f64 {
        let a = &self.s0_inv + phi.tr_mul(phi);
        let chol = match cholesky(&a, "marginal middle matrix") {
            Ok(c) => c,
            Err(_) => return f64::NEG_INFINITY,
        };
        let c = phi.tr_mul(&self.y);
        let w = chol.l().solve_lower_triangular(&c).expect("nonsingular factor");
        let q = DVector::from_iterator(c.ncols(), w.column_iter().map(|col| col.norm_squared()));
        self.total_for(log_det(&chol), &q)
    }

    /// Replace Φ and recompute.
    pub fn set_phi(&mut self, phi: DMatrix<f64>) -> Result<()> {
        self.phi = phi;
        self.rebuild()
    }

    pub fn set_sigma2(&mut self, sigma2: Vec<f64>) {
        self.sigma2 = sigma2;
        self.total = self.total_for(self.logdet_a, &self.q);
    }

    /// Marginal log-likelihood with row `i` of Φ replaced, by a rank-two
    /// update of A⁻¹.
    pub fn propose_row(&mut self, i: usize, phi_row: &DVector<f64>) -> f64 {
        let old = self.phi.row(i).transpose();
        let m = old.len();
        let mut u = DMatrix::zeros(m, 2);
        u.set_column(0, phi_row);
        u.set_column(1, &old);
        let g = &self.g * &u;
        let h = u.tr_mul(&g);
        // K = S + UᵀGU with S = diag(1, −1)
        let k = nalgebra::Matrix2::new(1.0 + h[(0, 0)], h[(0, 1)], h[(1, 0)], -1.0 + h[(1, 1)]);
        let det_k = k.determinant();
        // det A' / det A = −det K
        let ratio = -det_k;
        if !(ratio > 0.0) || !ratio.is_finite() {
            return f64::NEG_INFINITY;
        }
        let k_inv = match k.try_inverse() {
            Some(v) => v,
            None => return f64::NEG_INFINITY,
        };
        let logdet_a = self.logdet_a + ratio.ln();
        let p = u.tr_mul(&self.z);
        let j = self.y.ncols();
        let mut q = DVector::zeros(j);
        let mut p_plus = DMatrix::zeros(2, j);
        for jj in 0..j {
            let yij = self.y[(i, jj)];
            let e = nalgebra::Vector2::new(yij, -yij);
            let he = nalgebra::Vector2::new(h[(0, 0)] * e[0] + h[(0, 1)] * e[1], h[(1, 0)] * e[0] + h[(1, 1)] * e[1]);
            let pj = nalgebra::Vector2::new(p[(0, jj)], p[(1, jj)]);
            let v = pj + he;
            q[jj] = self.q[jj] + 2.0 * e.dot(&pj) + e.dot(&he) - v.dot(&(k_inv * v));
            p_plus[(0, jj)] = v[0];
            p_plus[(1, jj)] = v[1];
        }
        let total = self.total_for(logdet_a, &q);
        self.row_pending = Some(RowProposal {
            row: i,
            phi_row: phi_row.clone(),
            g,
            k_inv,
            p_plus,
            q,
            logdet_a,
            total,
        });
        total
    }

    /// Make the last row proposal current.
    pub fn accept_row(&mut self) -> Result<()> {
        let p = self
            .row_pending
            .take()
            .ok_or_else(|| Error::Config("no pending row proposal".into()))?;
        let i = p.row;
        let old = self.phi.row(i).transpose();
        let yi = self.y.row(i).into_owned();
        // Z' = Z + gE − gK⁻¹(P + HE), with E = [y_i; −y_i]
        let kp = DMatrix::from_column_slice(2, 2, p.k_inv.as_slice()) * &p.p_plus;
        self.z -= &p.g * kp;
        self.z += p.g.column(0) * &yi;
        self.z -= p.g.column(1) * &yi;
        let kg = DMatrix::from_column_slice(2, 2, p.k_inv.as_slice()) * p.g.transpose();
        self.g -= &p.g * kg;
        self.c += &p.phi_row * &yi;
        self.c -= &old * &yi;
        self.a += &p.phi_row * p.phi_row.transpose() - &old * old.transpose();
        self.phi.set_row(i, &p.phi_row.transpose());
        self.q = p.q;
        self.logdet_a = p.logdet_a;
        self.total = p.total;
        Ok(())
    }
}

impl FrequencyTarget for GaussianMarginalCache {
    fn current_log_lik(&self) -> f64 {
        self.total
    }

    fn propose_pair(&mut self, m: usize, sin: &DVector<f64>, cos: &DVector<f64>) -> f64 {
        let (ks, kc) = (2 * m, 2 * m + 1);
        let mut a = self.a.clone();
        let mut vs = self.phi.tr_mul(sin);
        let mut vc = self.phi.tr_mul(cos);
        vs[ks] = sin.norm_squared();
        vs[kc] = sin.dot(cos);
        vc[ks] = vs[kc];
        vc[kc] = cos.norm_squared();
        for r in 0..a.nrows() {
            a[(r, ks)] = vs[r] + self.s0_inv[(r, ks)];
            a[(ks, r)] = a[(r, ks)];
            a[(r, kc)] = vc[r] + self.s0_inv[(r, kc)];
            a[(kc, r)] = a[(r, kc)];
        }
        let chol = match cholesky(&a, "marginal middle matrix") {
            Ok(c) => c,
            Err(_) => return f64::NEG_INFINITY,
        };
        let mut c = self.c.clone();
        c.set_row(ks, &sin.tr_mul(&self.y));
        c.set_row(kc, &cos.tr_mul(&self.y));
        let w = chol.l().solve_lower_triangular(&c).expect("nonsingular factor");
        let q = DVector::from_iterator(c.ncols(), w.column_iter().map(|col| col.norm_squared()));
        let total = self.total_for(log_det(&chol), &q);
        self.pair_pending = Some(PairProposal {
            m,
            sin: sin.clone(),
            cos: cos.clone(),
            a,
            c,
            chol,
            q,
            total,
        });
        total
    }

    fn accept_pair(&mut self) -> Result<()> {
        let p = self
            .pair_pending
            .take()
            .ok_or_else(|| Error::Config("no pending frequency proposal".into()))?;
        self.phi.set_column(2 * p.m, &p.sin);
        self.phi.set_column(2 * p.m + 1, &p.cos);
        self.logdet_a = log_det(&p.chol);
        self.g = p.chol.inverse();
        self.z = &self.g * &p.c;
        self.a = p.a;
        self.c = p.c;
        self.q = p.q;
        self.total = p.total;
        Ok(())
    }
}
