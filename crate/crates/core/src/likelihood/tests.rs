use super::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use std::f64::consts::PI;

fn single(y: f64) -> Dataset {
    Dataset::new(DMatrix::from_element(1, 1, y))
}

#[test]
fn gaussian_exact_fit_density() {
    let spec = LikelihoodSpec::default_for(LikelihoodKind::Gaussian, 1);
    let phi = DMatrix::from_element(1, 1, 1.0);
    let mut w = MappingWeights::zeros(1, 1);
    w.beta[(0, 0)] = 0.7;
    let ll = log_likelihood(&phi, &w, &spec, &single(0.7)).unwrap();
    assert!((ll + 0.5 * (2.0 * PI).ln()).abs() < 1e-14);
}

#[test]
fn poisson_zero_count_at_unit_rate() {
    let ll = log_likelihood(&DMatrix::zeros(1, 2), &MappingWeights::zeros(2, 1), &LikelihoodSpec::Poisson, &single(0.0)).unwrap();
    assert!((ll + 1.0).abs() < 1e-15);
}

#[test]
fn multinomial_pmf_with_equal_logits() {
    let data = Dataset::new(DMatrix::from_row_slice(1, 3, &[2.0, 0.0, 1.0]));
    let ll = log_likelihood(&DMatrix::zeros(1, 2), &MappingWeights::zeros(2, 3), &LikelihoodSpec::Multinomial, &data).unwrap();
    let want = (6.0f64 / 2.0).ln() + 3.0 * (1.0f64 / 3.0).ln();
    assert!((ll - want).abs() < 1e-12);
}

#[test]
fn binomial_log_density_matches_pmf() {
    let spec = LikelihoodSpec::Binomial { trials: Trials::Constant(4) };
    let phi = DMatrix::from_element(1, 1, 1.0);
    let mut w = MappingWeights::zeros(1, 1);
    w.beta[(0, 0)] = -0.3;
    let p = logistic(-0.3);
    let ll = log_likelihood(&phi, &w, &spec, &single(1.0)).unwrap();
    let want = (4.0 * p * (1.0 - p).powi(3)).ln();
    assert!((ll - want).abs() < 1e-12);
}

#[test]
fn nonfinite_natural_parameter_names_entry() {
    let mut phi = DMatrix::from_element(3, 2, 0.1);
    phi[(1, 0)] = f64::NAN;
    let err = log_likelihood(&phi, &MappingWeights::zeros(2, 2), &LikelihoodSpec::Poisson, &Dataset::new(DMatrix::zeros(3, 2)));
    match err {
        Err(Error::NonFinite { row: 1, col: 0, .. }) => {}
        other => panic!("{other:?}"),
    }
}

#[test]
fn masked_entries_do_not_contribute() {
    let mut mask = DMatrix::from_element(2, 1, true);
    mask[(1, 0)] = false;
    let data = Dataset::new(DMatrix::from_row_slice(2, 1, &[0.0, 7.0])).with_mask(mask).unwrap();
    let ll = log_likelihood(&DMatrix::zeros(2, 2), &MappingWeights::zeros(2, 1), &LikelihoodSpec::Poisson, &data).unwrap();
    assert!((ll + 1.0).abs() < 1e-15);
}

#[test]
fn predictive_means() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let phi = DMatrix::from_fn(4, 3, |_, _| StandardNormal.sample(&mut rng));
    let mut w = MappingWeights::zeros(3, 2);
    w.beta = DMatrix::from_fn(3, 2, |_, _| StandardNormal.sample(&mut rng));
    let data = Dataset::new(DMatrix::from_element(4, 2, 1.0));
    let g = predictive_mean(&phi, &w, &LikelihoodSpec::default_for(LikelihoodKind::Gaussian, 2), &data).unwrap();
    assert!((g - &phi * &w.beta).amax() < 1e-14);

    let zero = MappingWeights::zeros(3, 2);
    let p = predictive_mean(&phi, &zero, &LikelihoodSpec::Poisson, &data).unwrap();
    assert!(p.iter().all(|&v| (v - 1.0).abs() < 1e-15));

    let nb = LikelihoodSpec::NegativeBinomial { dispersion: vec![2.0, 2.0], prior: GammaPrior::default() };
    let m = predictive_mean(&phi, &zero, &nb, &data).unwrap();
    assert!(m.iter().all(|&v| (v - 2.0).abs() < 1e-14));
}

#[test]
fn negative_binomial_mean_matches_simulation() {
    // y ~ NB(r = 2, p = ½) as a gamma-Poisson mixture
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let n = 1_000_000;
    let (r, p) = (2.0, 0.5);
    let gamma = rand_distr::Gamma::new(r, p / (1.0 - p)).unwrap();
    let mut sum = 0.0;
    for _ in 0..n {
        let lam: f64 = gamma.sample(&mut rng);
        sum += rand_distr::Poisson::new(lam.max(1e-300)).unwrap().sample(&mut rng);
    }
    let mean = sum / n as f64;
    // Var = r p / (1 − p)² = 4
    assert!((mean - 2.0).abs() < 3.0 * (4.0 / n as f64).sqrt());
}

#[test]
fn multinomial_probabilities_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let psi = DMatrix::from_fn(50, 4, |_, _| 30.0 * rng.sample::<f64, _>(StandardNormal));
    let probs = softmax_rows(&psi);
    for i in 0..50 {
        assert!((probs.row(i).sum() - 1.0).abs() < 1e-10);
    }
    let data = Dataset::new(DMatrix::from_element(50, 4, 2.0));
    let mean = predictive_mean_from_psi(&psi, &LikelihoodSpec::Multinomial, &data);
    for i in 0..50 {
        assert!((mean.row(i).sum() - 8.0).abs() < 1e-9);
    }
}

#[test]
fn kind_names_round_trip() {
    for k in LikelihoodKind::ALL {
        assert_eq!(k.name().parse::<LikelihoodKind>().unwrap(), k);
    }
    assert!("zip".parse::<LikelihoodKind>().is_err());
}

#[test]
fn spec_validation() {
    let counts = Dataset::new(DMatrix::from_row_slice(1, 2, &[3.0, 1.0]));
    assert!(LikelihoodSpec::Binomial { trials: Trials::Constant(2) }.validate(&counts).is_err());
    assert!(LikelihoodSpec::Binomial { trials: Trials::Constant(3) }.validate(&counts).is_ok());
    let bad = LikelihoodSpec::Gaussian { sigma2: vec![1.0, 0.0], prior: Default::default() };
    assert!(bad.validate(&counts).is_err());
    let real = Dataset::new(DMatrix::from_row_slice(1, 2, &[0.5, 1.0]));
    assert!(LikelihoodSpec::Poisson.validate(&real).is_err());
}

#[test]
fn generic_update_with_flat_likelihood_draws_prior() {
    // every entry unobserved, so the likelihood is constant
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let phi = DMatrix::from_element(3, 2, 0.5);
    let data = Dataset::new(DMatrix::zeros(3, 1)).with_mask(DMatrix::from_element(3, 1, false)).unwrap();
    let mut w = MappingWeights::zeros(2, 1);
    w.prior_cov = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
    let n = 50_000;
    let mut acc = DVector::zeros(2);
    let mut sq = DMatrix::zeros(2, 2);
    for _ in 0..n {
        let b = update_beta_generic(&phi, &w, &LikelihoodSpec::Poisson, &data, 0, &mut rng).unwrap();
        w.beta.set_column(0, &b);
        sq += &b * b.transpose();
        acc += b;
    }
    acc /= n as f64;
    let cov = sq / n as f64 - &acc * acc.transpose();
    assert!(acc.amax() < 0.05);
    assert!((cov - &w.prior_cov).amax() < 0.08);
}

/// Random-walk Metropolis reference for the Poisson coefficient posterior.
fn rw_mh_reference(phi: &DMatrix<f64>, y: &[f64], steps: usize, seed: u64) -> DVector<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = phi.ncols();
    let log_post = |b: &DVector<f64>| -> f64 {
        let psi = phi * b;
        let ll: f64 = (0..y.len()).map(|i| y[i] * psi[i] - psi[i].exp()).sum();
        ll - 0.5 * b.norm_squared()
    };
    let mut b = DVector::zeros(m);
    let mut lp = log_post(&b);
    let mut mean_f = DVector::zeros(phi.nrows());
    let burn = steps / 10;
    for t in 0..steps {
        let prop = &b + crate::linalg::standard_normal_vector(m, &mut rng) * 0.25;
        let lq = log_post(&prop);
        if rng.random::<f64>().ln() < lq - lp {
            b = prop;
            lp = lq;
        }
        if t >= burn {
            mean_f += phi * &b;
        }
    }
    mean_f / (steps - burn) as f64
}

#[test]
fn poisson_generic_update_matches_random_walk_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (n, m) = (20, 4);
    let x: Vec<f64> = (0..n).map(|i| -2.0 + 4.0 * i as f64 / (n - 1) as f64).collect();
    let freqs = [0.7, 1.3];
    let scale = (2.0 / m as f64).sqrt();
    let phi = DMatrix::from_fn(n, m, |i, k| {
        let p = freqs[k / 2] * x[i];
        scale * if k % 2 == 0 { p.sin() } else { p.cos() }
    });
    let truth = DVector::from_vec(vec![0.8, 1.0, -0.5, 0.4]);
    let rates = (&phi * &truth).map(f64::exp);
    let y: Vec<f64> = rates.iter().map(|&l| rand_distr::Poisson::new(l).unwrap().sample(&mut rng)).collect();
    let data = Dataset::new(DMatrix::from_column_slice(n, 1, &y));

    let reference = rw_mh_reference(&phi, &y, 400_000, 6);

    let mut w = MappingWeights::zeros(m, 1);
    let steps = 60_000;
    let burn = 2_000;
    let mut draws: Vec<DVector<f64>> = Vec::with_capacity(steps);
    for t in 0..steps + burn {
        let b = update_beta_generic(&phi, &w, &LikelihoodSpec::Poisson, &data, 0, &mut rng).unwrap();
        w.beta.set_column(0, &b);
        if t >= burn {
            draws.push(&phi * &b);
        }
    }
    let batch = 1000;
    for i in 0..n {
        let vals: Vec<f64> = draws.iter().map(|f| f[i]).collect();
        let mean = vals.iter().sum::<f64>() / steps as f64;
        let bm: Vec<f64> = vals.chunks(batch).map(|c| c.iter().sum::<f64>() / batch as f64).collect();
        let bvar = bm.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (bm.len() - 1) as f64;
        let se = (bvar / bm.len() as f64).sqrt();
        // allow for the reference chain's own error with a generous floor
        assert!((mean - reference[i]).abs() < 3.0 * se + 0.02, "row {i}: {mean} vs {}", reference[i]);
    }
}

#[test]
fn generic_update_is_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let phi = DMatrix::from_fn(5, 2, |i, k| ((i + 2 * k) as f64).cos() * 0.5);
        let data = Dataset::new(DMatrix::from_column_slice(5, 1, &[0.0, 1.0, 3.0, 0.0, 2.0]));
        let mut w = MappingWeights::zeros(2, 1);
        for _ in 0..100 {
            let b = update_beta_generic(&phi, &w, &LikelihoodSpec::Poisson, &data, 0, &mut rng).unwrap();
            w.beta.set_column(0, &b);
        }
        w.beta
    };
    assert_eq!(run(), run());
}

#[test]
fn ess_column_helper_agrees_with_generic_target() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let phi = DMatrix::from_fn(6, 2, |i, k| ((i * 3 + k) as f64).sin() * 0.5);
    let data = Dataset::new(DMatrix::from_column_slice(6, 1, &[0.0, 1.0, 3.0, 0.0, 2.0, 1.0]));
    let w = MappingWeights::zeros(2, 1);
    let prior = w.prior().unwrap();
    let b0 = DVector::zeros(2);
    let psi0 = &phi * &b0;
    let (b, psi) = ess_beta_column(&phi, &b0, &psi0, &prior, &LikelihoodSpec::Poisson, &data, 0, &mut rng).unwrap();
    assert!((psi - &phi * &b).amax() < 1e-14);
}
