//! Elliptical slice sampling for parameters with a Gaussian prior.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::linalg::standard_normal_vector;

/// Smallest angle bracket tolerated before the update is declared stuck.
pub const MIN_BRACKET: f64 = 1e-12;

/// A parameter with prior N(prior_mean, L Lᵀ) and a log-likelihood callback.
pub struct EllipseState<'a, F> {
    pub current: DVector<f64>,
    pub prior_factor: &'a DMatrix<f64>,
    pub prior_mean: &'a DVector<f64>,
    pub log_lik: F,
}

/// One transition of `state`; returns the new point.
pub fn ess_update<F, R>(state: EllipseState<'_, F>, rng: &mut R) -> Result<DVector<f64>>
where
    F: FnMut(&DVector<f64>) -> f64,
    R: Rng + ?Sized,
{
    let EllipseState {
        current,
        prior_factor,
        prior_mean,
        mut log_lik,
    } = state;
    let current_ll = log_lik(&current);
    let n = current.len();
    let (next, _) = ess_step(
        &current,
        current_ll,
        prior_mean,
        |rng| prior_factor * standard_normal_vector(n, rng),
        log_lik,
        rng,
    )?;
    Ok(next)
}

/// One elliptical slice transition.
///
/// `draw_prior` returns a zero-mean draw from the prior covariance. Returns
/// the accepted point together with its log-likelihood so callers can skip a
/// re-evaluation. NaN log-likelihoods are treated as −∞.
pub fn ess_step<D, F, R>(
    current: &DVector<f64>,
    current_ll: f64,
    prior_mean: &DVector<f64>,
    draw_prior: D,
    mut log_lik: F,
    rng: &mut R,
) -> Result<(DVector<f64>, f64)>
where
    D: FnOnce(&mut R) -> DVector<f64>,
    F: FnMut(&DVector<f64>) -> f64,
    R: Rng + ?Sized,
{
    if !current_ll.is_finite() {
        return Err(Error::NonFiniteStart);
    }
    let nu = draw_prior(rng);
    let centered = current - prior_mean;
    let threshold = current_ll + rng.random::<f64>().ln();

    let mut theta = rng.random::<f64>() * 2.0 * PI;
    let mut lo = theta - 2.0 * PI;
    let mut hi = theta;
    loop {
        let proposal = prior_mean + &centered * theta.cos() + &nu * theta.sin();
        let ll = log_lik(&proposal);
        if ll > threshold {
            return Ok((proposal, ll));
        }
        if theta < 0.0 {
            lo = theta;
        } else {
            hi = theta;
        }
        if hi - lo < MIN_BRACKET {
            return Err(Error::SliceCollapsed(MIN_BRACKET));
        }
        theta = lo + rng.random::<f64>() * (hi - lo);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar(v: f64) -> DVector<f64> {
        DVector::from_element(1, v)
    }

    #[test]
    fn conjugate_gaussian_posterior() {
        // prior N(0,1), likelihood N(1 | x, 1) => posterior N(0.5, 0.5)
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let l = DMatrix::identity(1, 1);
        let m = DVector::zeros(1);
        let mut x = scalar(0.0);
        let n = 100_000;
        let mut sum = 0.0;
        let mut sq = 0.0;
        for _ in 0..n {
            x = ess_update(
                EllipseState {
                    current: x,
                    prior_factor: &l,
                    prior_mean: &m,
                    log_lik: |v: &DVector<f64>| -0.5 * (1.0 - v[0]).powi(2),
                },
                &mut rng,
            )
            .unwrap();
            sum += x[0];
            sq += x[0] * x[0];
        }
        let mean = sum / n as f64;
        let var = sq / n as f64 - mean * mean;
        assert!((mean - 0.5).abs() < 0.02, "mean {mean}");
        assert!((var - 0.5).abs() < 0.05, "var {var}");
    }

    #[test]
    fn flat_likelihood_recovers_prior() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let l = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.6, 0.8]);
        let m = DVector::from_vec(vec![1.0, -2.0]);
        let mut x = m.clone();
        let n = 100_000;
        let mut mean = DVector::zeros(2);
        let mut second = DMatrix::zeros(2, 2);
        for _ in 0..n {
            let prev = x.clone();
            x = ess_update(
                EllipseState {
                    current: x,
                    prior_factor: &l,
                    prior_mean: &m,
                    log_lik: |_: &DVector<f64>| 0.0,
                },
                &mut rng,
            )
            .unwrap();
            assert_ne!(prev, x);
            mean += &x;
            second += &x * x.transpose();
        }
        mean /= n as f64;
        let cov = second / n as f64 - &mean * mean.transpose();
        let target = &l * l.transpose();
        assert!((mean - m).amax() < 0.03);
        assert!((cov - target).amax() < 0.03);
    }

    #[test]
    fn invariance_from_exact_posterior() {
        // start each short chain at an exact posterior draw; marginal moments stay put
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let l = DMatrix::identity(1, 1);
        let m = DVector::zeros(1);
        let chains = 2_000;
        let mut sum = 0.0;
        let mut sq = 0.0;
        for _ in 0..chains {
            let start = 0.5 + 0.5f64.sqrt() * standard_normal_vector(1, &mut rng)[0];
            let mut x = scalar(start);
            for _ in 0..1_000 / 20 {
                x = ess_update(
                    EllipseState {
                        current: x,
                        prior_factor: &l,
                        prior_mean: &m,
                        log_lik: |v: &DVector<f64>| -0.5 * (1.0 - v[0]).powi(2),
                    },
                    &mut rng,
                )
                .unwrap();
            }
            sum += x[0];
            sq += x[0] * x[0];
        }
        let mean = sum / chains as f64;
        let var = sq / chains as f64 - mean * mean;
        let se = (0.5 / chains as f64).sqrt();
        assert!((mean - 0.5).abs() < 3.0 * se + 1e-3);
        assert!((var - 0.5).abs() < 0.06);
    }

    #[test]
    fn nonfinite_start_and_collapse_are_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = DVector::zeros(1);
        let err = ess_step(
            &scalar(0.0),
            f64::NEG_INFINITY,
            &m,
            |r| standard_normal_vector(1, r),
            |_| 0.0,
            &mut rng,
        );
        assert!(matches!(err, Err(Error::NonFiniteStart)));
        // a log-likelihood that rejects everything except the exact start collapses
        let err = ess_step(
            &scalar(0.0),
            0.0,
            &m,
            |r| standard_normal_vector(1, r),
            |_| f64::NAN,
            &mut rng,
        );
        assert!(matches!(err, Err(Error::SliceCollapsed(_))));
    }

    #[test]
    fn deterministic_given_seed() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let m = DVector::zeros(3);
            let mut x: DVector<f64> = DVector::from_element(3, 0.3);
            let mut ll = -x.norm_squared();
            for _ in 0..50 {
                let (nx, nll) = ess_step(
                    &x,
                    ll,
                    &m,
                    |r| standard_normal_vector(3, r),
                    |v| -v.norm_squared(),
                    &mut rng,
                )
                .unwrap();
                x = nx;
                ll = nll;
            }
            x
        };
        assert_eq!(run(), run());
    }
}
