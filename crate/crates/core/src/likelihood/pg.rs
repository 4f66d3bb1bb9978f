//! Pólya-gamma augmentation for the logistic-family likelihoods and the
//! negative-binomial dispersion update.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use super::{natural_params, CoefficientPrior, LikelihoodKind, LikelihoodSpec, MappingWeights};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg::{cholesky, log_sum_exp, mvn_from_precision};
use crate::rff::GammaPrior;
use crate::samplers::{crt_draw, pg_draw_or_zero};

/// Lower bound on 1 − p before taking logs in the dispersion update.
pub const DISPERSION_FLOOR: f64 = 1e-10;

/// Augmentation variables: ω_ij, κ_ij = a_ij − b_ij/2 and, for the
/// multinomial model, the offsets ξ_ij.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuxState {
    pub omega: DMatrix<f64>,
    pub kappa: DMatrix<f64>,
    pub xi: Option<DMatrix<f64>>,
}

/// (a_ij, b_ij) such that the entry likelihood is ∝ e^{aψ}/(1 + e^ψ)^b.
/// Unobserved entries (and, for the multinomial model, rows with any
/// unobserved category) get a = b = 0.
pub fn pg_ab_mapping(spec: &LikelihoodSpec, data: &Dataset) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let (n, j) = data.y.shape();
    let mut a = DMatrix::zeros(n, j);
    let mut b = DMatrix::zeros(n, j);
    match spec {
        LikelihoodSpec::Binomial { trials } => {
            for jj in 0..j {
                for i in 0..n {
                    if data.observed(i, jj) {
                        a[(i, jj)] = data.y[(i, jj)];
                        b[(i, jj)] = trials.at(i, jj);
                    }
                }
            }
        }
        LikelihoodSpec::NegativeBinomial { dispersion, .. } => {
            for jj in 0..j {
                for i in 0..n {
                    if data.observed(i, jj) {
                        a[(i, jj)] = data.y[(i, jj)];
                        b[(i, jj)] = data.y[(i, jj)] + dispersion[jj];
                    }
                }
            }
        }
        LikelihoodSpec::Multinomial => {
            for i in 0..n {
                if !data.row_fully_observed(i) {
                    continue;
                }
                let total: f64 = data.y.row(i).sum();
                for jj in 0..j {
                    a[(i, jj)] = data.y[(i, jj)];
                    b[(i, jj)] = total;
                }
            }
        }
        other => {
            return Err(Error::Unsupported { kind: other.kind().to_string(), op: "pg_ab_mapping" });
        }
    }
    Ok((a, b))
}

pub fn kappa_from_ab(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    a - b * 0.5
}

/// ξ_ij = log Σ_{k≠j} exp ψ_ik for every row.
pub fn xi_from_psi(psi: &DMatrix<f64>, j: usize) -> DVector<f64> {
    DVector::from_iterator(
        psi.nrows(),
        (0..psi.nrows()).map(|i| {
            log_sum_exp((0..psi.ncols()).filter(|&k| k != j).map(|k| psi[(i, k)]))
        }),
    )
}

pub fn multinomial_xi(phi: &DMatrix<f64>, weights: &MappingWeights, j: usize) -> Result<DVector<f64>> {
    Ok(xi_from_psi(&natural_params(phi, weights)?, j))
}

/// ω_ij ~ PG(b_ij, ψ_ij − ξ_ij), with ξ = 0 outside the multinomial model.
pub fn draw_pg_aux<R: Rng + ?Sized>(
    phi: &DMatrix<f64>,
    weights: &MappingWeights,
    spec: &LikelihoodSpec,
    data: &Dataset,
    rng: &mut R,
) -> Result<AuxState> {
    let (a, b) = pg_ab_mapping(spec, data)?;
    let psi = natural_params(phi, weights)?;
    let (n, j) = psi.shape();
    let xi = (spec.kind() == LikelihoodKind::Multinomial).then(|| {
        let mut xi = DMatrix::zeros(n, j);
        for jj in 0..j {
            xi.set_column(jj, &xi_from_psi(&psi, jj));
        }
        xi
    });
    let mut omega = DMatrix::zeros(n, j);
    for jj in 0..j {
        for i in 0..n {
            let tilt = psi[(i, jj)] - xi.as_ref().map_or(0.0, |x| x[(i, jj)]);
            omega[(i, jj)] = pg_draw_or_zero(b[(i, jj)], tilt, rng);
        }
    }
    Ok(AuxState { omega, kappa: kappa_from_ab(&a, &b), xi })
}

/// β_j ~ N(V h, V) with V⁻¹ = ΦᵀΩ_jΦ + B0⁻¹ and h = Φᵀ(κ_j + Ω_jξ_j) + B0⁻¹β0.
pub fn update_beta_pg<R: Rng + ?Sized>(
    phi: &DMatrix<f64>,
    omega_j: &DVector<f64>,
    kappa_j: &DVector<f64>,
    xi_j: Option<&DVector<f64>>,
    prior: &CoefficientPrior,
    rng: &mut R,
) -> Result<DVector<f64>> {
    let n = phi.nrows();
    if omega_j.len() != n || kappa_j.len() != n {
        return Err(Error::Dimension("augmentation vectors do not match the features".into()));
    }
    let mut scaled = phi.clone();
    for i in 0..n {
        let w = omega_j[i].max(0.0).sqrt();
        scaled.row_mut(i).scale_mut(w);
    }
    let precision = scaled.tr_mul(&scaled) + &prior.precision;
    let mut target = kappa_j.clone();
    if let Some(xi) = xi_j {
        target += omega_j.component_mul(xi);
    }
    let h = phi.tr_mul(&target) + &prior.precision_mean;
    let chol = cholesky(&precision, "coefficient posterior precision")?;
    Ok(mvn_from_precision(&chol, &h, rng))
}

/// Sequential multinomial sweep over categories 0..J−1: for each category
/// recompute ξ_j from the freshest coefficients, draw ω_j, then β_j. The
/// last category is the reference and stays at zero. Returns the final
/// augmentation state.
pub fn update_multinomial_beta<R: Rng + ?Sized>(
    phi: &DMatrix<f64>,
    weights: &mut MappingWeights,
    data: &Dataset,
    prior: &CoefficientPrior,
    rng: &mut R,
) -> Result<AuxState> {
    let (a, b) = pg_ab_mapping(&LikelihoodSpec::Multinomial, data)?;
    let kappa = kappa_from_ab(&a, &b);
    let mut psi = natural_params(phi, weights)?;
    let (n, j) = psi.shape();
    let mut omega = DMatrix::zeros(n, j);
    let mut xi = DMatrix::zeros(n, j);
    for jj in 0..j - 1 {
        let xi_j = xi_from_psi(&psi, jj);
        let mut omega_j = DVector::zeros(n);
        for i in 0..n {
            omega_j[i] = pg_draw_or_zero(b[(i, jj)], psi[(i, jj)] - xi_j[i], rng);
        }
        let kappa_j = kappa.column(jj).into_owned();
        let beta_j = update_beta_pg(phi, &omega_j, &kappa_j, Some(&xi_j), prior, rng)?;
        psi.set_column(jj, &(phi * &beta_j));
        weights.beta.set_column(jj, &beta_j);
        omega.set_column(jj, &omega_j);
        xi.set_column(jj, &xi_j);
    }
    xi.set_column(j - 1, &xi_from_psi(&psi, j - 1));
    Ok(AuxState { omega, kappa, xi: Some(xi) })
}

/// r_j ~ Gamma(a_r + L_j, b_r − Σ log(1 − p_nj)) with L_j = Σ_n CRT(y_nj, r_j).
/// `p` holds the success probabilities of the observed entries of column j.
pub fn update_dispersion<R: Rng + ?Sized>(
    y: &[f64],
    p: &[f64],
    r: f64,
    prior: GammaPrior,
    rng: &mut R,
) -> f64 {
    let tables: u64 = y.iter().map(|&v| crt_draw(v as u64, r, rng)).sum();
    let log_q: f64 = p.iter().map(|&pn| (1.0 - pn).max(DISPERSION_FLOOR).ln()).sum();
    let shape = prior.shape + tables as f64;
    let rate = prior.rate - log_q;
    Gamma::new(shape, 1.0 / rate)
        .expect("positive shape and rate")
        .sample(rng)
        .max(f64::MIN_POSITIVE)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::likelihood::{entry_constant, entry_kernel, Trials};
    use crate::linalg::logistic;
    use crate::samplers::PolyaGammaParams;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use statrs::function::gamma::ln_gamma;

    fn one(y: f64) -> Dataset {
        Dataset::new(DMatrix::from_element(1, 1, y))
    }

    #[test]
    fn ab_mappings() {
        let spec = LikelihoodSpec::Binomial { trials: Trials::Constant(1) };
        let (a, b) = pg_ab_mapping(&spec, &one(1.0)).unwrap();
        assert_eq!((a[(0, 0)], b[(0, 0)]), (1.0, 1.0));
        assert_eq!(kappa_from_ab(&a, &b)[(0, 0)], 0.5);

        let spec = LikelihoodSpec::NegativeBinomial { dispersion: vec![2.0], prior: GammaPrior::default() };
        let (a, b) = pg_ab_mapping(&spec, &one(3.0)).unwrap();
        assert_eq!((a[(0, 0)], b[(0, 0)]), (3.0, 5.0));
        assert_eq!(kappa_from_ab(&a, &b)[(0, 0)], 0.5);

        let ds = Dataset::new(DMatrix::from_row_slice(1, 3, &[2.0, 0.0, 1.0]));
        let (a, b) = pg_ab_mapping(&LikelihoodSpec::Multinomial, &ds).unwrap();
        assert!(b.iter().all(|&v| v == 3.0));
        let k = kappa_from_ab(&a, &b);
        assert_eq!(k.row(0).iter().copied().collect::<Vec<_>>(), vec![0.5, -1.5, -0.5]);

        assert!(matches!(pg_ab_mapping(&LikelihoodSpec::Poisson, &ds), Err(Error::Unsupported { .. })));
    }

    #[test]
    fn masked_entries_have_zero_shape() {
        let mut mask = DMatrix::from_element(2, 2, true);
        mask[(0, 1)] = false;
        let ds = Dataset::new(DMatrix::from_element(2, 2, 1.0)).with_mask(mask).unwrap();
        let spec = LikelihoodSpec::Binomial { trials: Trials::Constant(2) };
        let (_, b) = pg_ab_mapping(&spec, &ds).unwrap();
        assert_eq!(b[(0, 1)], 0.0);
        let w = MappingWeights::zeros(3, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let aux = draw_pg_aux(&DMatrix::from_element(2, 3, 0.2), &w, &spec, &ds, &mut rng).unwrap();
        assert_eq!(aux.omega[(0, 1)], 0.0);
        assert_eq!(aux.kappa[(0, 1)], 0.0);
        assert!(aux.omega[(1, 1)] > 0.0);
    }

    #[test]
    fn pg_aux_mean_for_b3_psi1() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let spec = LikelihoodSpec::Binomial { trials: Trials::Constant(3) };
        let ds = one(1.0);
        let mut w = MappingWeights::zeros(1, 1);
        w.beta[(0, 0)] = 1.0;
        let phi = DMatrix::from_element(1, 1, 1.0);
        let n = 50_000;
        let mut sum = 0.0;
        for _ in 0..n {
            sum += draw_pg_aux(&phi, &w, &spec, &ds, &mut rng).unwrap().omega[(0, 0)];
        }
        let p = PolyaGammaParams::new(3.0, 1.0).unwrap();
        let want = 1.5 * 0.5f64.tanh();
        assert!((want - 0.6928).abs() < 1e-3);
        assert!((sum / n as f64 - want).abs() < 3.0 * (p.variance() / n as f64).sqrt());
    }

    #[test]
    fn beta_pg_prior_when_uninformed() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let prior = CoefficientPrior::new(DVector::from_vec(vec![1.0, -1.0]), DMatrix::identity(2, 2) * 2.0).unwrap();
        let phi = DMatrix::from_element(5, 2, 0.3);
        let zero = DVector::zeros(5);
        let n = 40_000;
        let mut acc = DVector::zeros(2);
        let mut sq = DMatrix::zeros(2, 2);
        for _ in 0..n {
            let b = update_beta_pg(&phi, &zero, &zero, None, &prior, &mut rng).unwrap();
            sq += &b * b.transpose();
            acc += b;
        }
        acc /= n as f64;
        let cov = sq / n as f64 - &acc * acc.transpose();
        assert!((acc - &prior.mean).amax() < 0.03);
        assert!((cov - &prior.cov).amax() < 0.06);
    }

    #[test]
    fn beta_pg_scalar_arithmetic() {
        // V = 1/(φ²ω + 1/B0), m = V(φκ + β0/B0)
        let (phi_v, omega, kappa, b0, beta0): (f64, f64, f64, f64, f64) = (0.7, 0.4, 0.5, 2.0, 0.3);
        let v = 1.0 / (phi_v * phi_v * omega + 1.0 / b0);
        let m = v * (phi_v * kappa + beta0 / b0);
        let prior = CoefficientPrior::new(DVector::from_element(1, beta0), DMatrix::from_element(1, 1, b0)).unwrap();
        let phi = DMatrix::from_element(1, 1, phi_v);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 200_000;
        let draws: Vec<f64> = (0..n)
            .map(|_| {
                update_beta_pg(&phi, &DVector::from_element(1, omega), &DVector::from_element(1, kappa), None, &prior, &mut rng).unwrap()[0]
            })
            .collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n as f64;
        assert!((mean - m).abs() < 3.0 * (v / n as f64).sqrt());
        assert!((var / v - 1.0).abs() < 0.02);
    }

    #[test]
    fn augmented_density_integrates_to_likelihood() {
        // e^{aψ}/(1+e^ψ)^b = 2^{−b} e^{κψ} E_{ω∼PG(b,0)}[e^{−ωψ²/2}]
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for &(y, trials, psi) in &[(1.0, 1.0, 0.8), (2.0, 5.0, -1.2), (0.0, 3.0, 0.4)] {
            let spec = LikelihoodSpec::Binomial { trials: Trials::Constant(trials as u64) };
            let exact = entry_kernel(&spec, 0, 0, y, psi);
            let kappa = y - trials / 2.0;
            let n = 200_000;
            let p = PolyaGammaParams::new(trials, 0.0).unwrap();
            let vals: Vec<f64> = (0..n).map(|_| (-0.5 * crate::samplers::pg_draw(p, &mut rng) * psi * psi).exp()).collect();
            let mean = vals.iter().sum::<f64>() / n as f64;
            let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
            let approx = -trials * 2f64.ln() + kappa * psi + mean.ln();
            let tol = 3.0 * sd / (n as f64).sqrt() / mean;
            assert!((approx - exact).abs() < tol + 1e-4, "y={y} n={trials} psi={psi}");
        }
    }

    #[test]
    fn xi_examples() {
        let psi = DMatrix::from_row_slice(1, 2, &[0.7, 0.0]);
        assert_eq!(xi_from_psi(&psi, 0)[0], 0.0);
        let psi = DMatrix::from_row_slice(1, 3, &[0.0, 1.0, 2.0]);
        let want = (1f64.exp() + 2f64.exp()).ln();
        assert!((xi_from_psi(&psi, 0)[0] - want).abs() < 1e-12);
        assert!((want - 2.3133).abs() < 1e-4);
        let psi = DMatrix::from_row_slice(1, 3, &[1000.0, 999.0, -1000.0]);
        let v = xi_from_psi(&psi, 2)[0];
        assert!(v.is_finite() && (v - (1000.0 + (1.0 + (-1f64).exp()).ln())).abs() < 1e-9);
    }

    #[test]
    fn multinomial_sweep_keeps_reference_column() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ds = Dataset::new(DMatrix::from_row_slice(4, 3, &[2.0, 0.0, 1.0, 0.0, 3.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0, 4.0]));
        let phi = DMatrix::from_fn(4, 4, |i, k| ((i + k) as f64).sin() * 0.5);
        let mut w = MappingWeights::zeros(4, 3);
        let prior = w.prior().unwrap();
        for _ in 0..20 {
            let aux = update_multinomial_beta(&phi, &mut w, &ds, &prior, &mut rng).unwrap();
            assert!(w.beta.column(2).iter().all(|&v| v == 0.0));
            assert_eq!(aux.omega.column(2).iter().filter(|&&v| v != 0.0).count(), 0);
        }
        w.validate(LikelihoodKind::Multinomial).unwrap();
    }

    #[test]
    fn dispersion_with_zero_counts_keeps_prior_shape() {
        // L = 0: Gamma(a_r, b_r − Σ log(1 − p))
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let prior = GammaPrior { shape: 2.0, rate: 1.0 };
        let y = vec![0.0; 5];
        let p = vec![0.3; 5];
        let rate = 1.0 - 5.0 * 0.7f64.ln();
        let n = 100_000;
        let mean = (0..n).map(|_| update_dispersion(&y, &p, 1.0, prior, &mut rng)).sum::<f64>() / n as f64;
        let want = 2.0 / rate;
        let sd = 2f64.sqrt() / rate;
        assert!((mean - want).abs() < 3.0 * sd / (n as f64).sqrt());
        // probabilities at 1 are floored
        let r = update_dispersion(&[1.0], &[1.0], 1.0, prior, &mut rng);
        assert!(r.is_finite() && r > 0.0);
    }

    #[test]
    fn dispersion_chain_matches_grid_posterior() {
        // β frozen: y_n ~ NB(r, p) with known p; the r chain targets
        // Ga(r | a, b) Π_n NB(y_n | r, p).
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = 0.4f64;
        let r_true = 5.0;
        let y: Vec<f64> = (0..100)
            .map(|_| {
                let lam = Gamma::new(r_true, p / (1.0 - p)).unwrap().sample(&mut rng);
                rand_distr::Poisson::new(lam.max(1e-300)).unwrap().sample(&mut rng)
            })
            .collect();
        let probs = vec![p; y.len()];
        let prior = GammaPrior::default();
        let log_post = |r: f64| -> f64 {
            let lp = -r; // Ga(1, 1)
            lp + y
                .iter()
                .map(|&v| ln_gamma(v + r) - ln_gamma(r) - ln_gamma(v + 1.0) + v * p.ln() + r * (1.0 - p).ln())
                .sum::<f64>()
        };
        let (steps, hi) = (20_000, 40.0);
        let h = hi / steps as f64;
        let grid: Vec<(f64, f64)> = (0..steps).map(|k| {
            let r = (k as f64 + 0.5) * h;
            (r, log_post(r))
        }).collect();
        let max = grid.iter().map(|g| g.1).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = grid.iter().map(|g| (g.1 - max).exp()).sum();
        let target: f64 = grid.iter().map(|g| g.0 * (g.1 - max).exp()).sum::<f64>() / z;

        let mut r = 1.0;
        let n = 60_000;
        let mut draws = Vec::with_capacity(n);
        for k in 0..n + 1000 {
            r = update_dispersion(&y, &probs, r, prior, &mut rng);
            if k >= 1000 {
                draws.push(r);
            }
        }
        let mean = draws.iter().sum::<f64>() / n as f64;
        let batch = 1000;
        let bm: Vec<f64> = draws.chunks(batch).map(|c| c.iter().sum::<f64>() / batch as f64).collect();
        let bvar = bm.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / (bm.len() - 1) as f64;
        let se = (bvar / bm.len() as f64).sqrt();
        assert!((mean - target).abs() < 3.0 * se, "mean {mean} grid {target} se {se}");
    }

    #[test]
    fn nb_log_density_is_normalised() {
        let spec = LikelihoodSpec::NegativeBinomial { dispersion: vec![2.0], prior: GammaPrior::default() };
        let psi = 0.3;
        let total: f64 = (0..400)
            .map(|y| {
                let y = y as f64;
                (entry_constant(&spec, 0, 0, y) + entry_kernel(&spec, 0, 0, y, psi)).exp()
            })
            .sum();
        assert!((total - 1.0).abs() < 1e-10);
        // mean r·p/(1−p)
        let mean: f64 = (0..400)
            .map(|y| {
                let y = y as f64;
                y * (entry_constant(&spec, 0, 0, y) + entry_kernel(&spec, 0, 0, y, psi)).exp()
            })
            .sum();
        let pr = logistic(psi);
        assert!((mean - 2.0 * pr / (1.0 - pr)).abs() < 1e-9);
    }
}
