//! Small dense linear-algebra helpers shared by the samplers.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Jitter added to the diagonal when a Cholesky factorization fails.
pub const CHOLESKY_JITTER: f64 = 1e-8;

/// Cholesky factor of a symmetric matrix. On failure one retry is made with
/// `CHOLESKY_JITTER * I` added; a second failure is a hard error.
pub fn cholesky(matrix: &DMatrix<f64>, what: &str) -> Result<Cholesky<f64, Dyn>> {
    if let Some(chol) = Cholesky::new(matrix.clone()) {
        return Ok(chol);
    }
    let n = matrix.nrows();
    let jittered = matrix + DMatrix::<f64>::identity(n, n) * CHOLESKY_JITTER;
    Cholesky::new(jittered).ok_or_else(|| Error::NotPositiveDefinite(what.to_string()))
}

pub fn log_det(chol: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

pub fn standard_normal_vector<R: Rng + ?Sized>(n: usize, rng: &mut R) -> DVector<f64> {
    DVector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)))
}

/// Draw from N(mean, L Lᵀ) given the lower factor `l`.
pub fn mvn_from_factor<R: Rng + ?Sized>(
    mean: &DVector<f64>,
    l: &DMatrix<f64>,
    rng: &mut R,
) -> DVector<f64> {
    let z = standard_normal_vector(mean.len(), rng);
    mean + l * z
}

/// Draw from N(P⁻¹ h, P⁻¹) given the Cholesky factor of the precision P.
pub fn mvn_from_precision<R: Rng + ?Sized>(
    precision: &Cholesky<f64, Dyn>,
    h: &DVector<f64>,
    rng: &mut R,
) -> DVector<f64> {
    let mean = precision.solve(h);
    let z = standard_normal_vector(h.len(), rng);
    // L Lᵀ = P, so Lᵀ v = z gives v ~ N(0, P⁻¹).
    let v = precision
        .l_dirty()
        .tr_solve_lower_triangular(&z)
        .expect("cholesky factor has a positive diagonal");
    mean + v
}

pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

pub fn log_sum_exp(values: impl IntoIterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().into_iter().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.into_iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// `log(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Sample an index proportionally to `exp(log_weights)`.
pub fn sample_log_weights<R: Rng + ?Sized>(log_weights: &[f64], rng: &mut R) -> usize {
    let max = log_weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = log_weights.iter().map(|w| (w - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (k, w) in weights.iter().enumerate() {
        if u < *w {
            return k;
        }
        u -= w;
    }
    weights.len() - 1
}
