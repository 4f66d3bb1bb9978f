//! Synthetic datasets with known latent structure.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Gamma, Normal, Poisson, StandardNormal};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::rff::{compute_features, FeatureBasis};

/// Random features used to draw the generating functions.
pub const TRUTH_FEATURES: usize = 1000;
/// Target mean count for the count-valued S-curves.
pub const MEAN_COUNT: f64 = 3.0;
/// Dispersion of the negative-binomial S-curve.
pub const NB_DISPERSION: f64 = 5.0;
/// Trials per row of the multinomial S-curve.
pub const MULTINOMIAL_TRIALS: u64 = 20;
/// Lorenz integration step and discarded transient.
pub const LORENZ_STEP: f64 = 0.01;
pub const LORENZ_BURN: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SynthKind {
    ScurveGaussian,
    ScurvePoisson,
    ScurveNegativeBinomial,
    ScurveMultinomial,
    Lorenz,
}

impl SynthKind {
    pub const ALL: [SynthKind; 5] = [
        SynthKind::ScurveGaussian,
        SynthKind::ScurvePoisson,
        SynthKind::ScurveNegativeBinomial,
        SynthKind::ScurveMultinomial,
        SynthKind::Lorenz,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SynthKind::ScurveGaussian => "scurve_gaussian",
            SynthKind::ScurvePoisson => "scurve_poisson",
            SynthKind::ScurveNegativeBinomial => "scurve_negative_binomial",
            SynthKind::ScurveMultinomial => "scurve_multinomial",
            SynthKind::Lorenz => "lorenz",
        }
    }
}

impl fmt::Display for SynthKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SynthKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown synthetic kind `{s}`")))
    }
}

/// A generated dataset with its ground truth.
#[derive(Clone, Debug)]
pub struct Synthetic {
    pub data: Dataset,
    pub x_true: DMatrix<f64>,
    /// Natural parameters of the emission model.
    pub f_true: DMatrix<f64>,
}

/// Points on the S-curve sorted by the curve parameter u ∈ [−3π/2, 3π/2].
/// Returns (X, u).
pub fn scurve(n: usize, rng: &mut impl Rng) -> (DMatrix<f64>, Vec<f64>) {
    let mut u: Vec<f64> = (0..n).map(|_| rng.random_range(-1.5 * PI..=1.5 * PI)).collect();
    u.sort_by(f64::total_cmp);
    let x = DMatrix::from_fn(n, 2, |i, k| {
        if k == 0 {
            u[i].sin()
        } else {
            u[i].signum() * (u[i].cos() - 1.0)
        }
    });
    (x, u)
}

/// J functions drawn from an approximate unit RBF-kernel GP evaluated at `x`.
pub fn gp_functions(x: &DMatrix<f64>, j: usize, rng: &mut impl Rng) -> Result<DMatrix<f64>> {
    let d = x.ncols();
    let mut basis = FeatureBasis::initialize(
        TRUTH_FEATURES,
        d,
        1,
        1.0,
        crate::samplers::NiwParams::default_prior(d),
        Default::default(),
        rng,
    )?;
    for v in basis.frequencies.iter_mut() {
        *v = rng.sample(StandardNormal);
    }
    let phi = compute_features(x, &basis)?;
    let beta = DMatrix::from_fn(TRUTH_FEATURES, j, |_, _| rng.sample(StandardNormal));
    Ok(phi * beta)
}

fn standardized(f: &DMatrix<f64>) -> DMatrix<f64> {
    let n = f.len() as f64;
    let mean = f.sum() / n;
    let sd = (f.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    f.map(|v| (v - mean) / sd)
}

/// log of rates exp(F_std) rescaled to have mean `target`.
fn log_rates(f: &DMatrix<f64>, target: f64) -> DMatrix<f64> {
    let s = standardized(f);
    let mean = s.iter().map(|v| v.exp()).sum::<f64>() / s.len() as f64;
    s.map(|v| v + (target / mean).ln())
}

fn check_size(n: usize, j: usize) -> Result<()> {
    if n < 2 || j < 2 {
        return Err(Error::Config(format!("synthetic data needs N, J ≥ 2, got {n}×{j}")));
    }
    Ok(())
}

/// Generate `kind` with N rows and J features.
pub fn generate(kind: SynthKind, n: usize, j: usize, seed: u64) -> Result<Synthetic> {
    check_size(n, j)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if kind == SynthKind::Lorenz {
        return lorenz_dataset(n, j, &mut rng, seed);
    }
    let (x, u) = scurve(n, &mut rng);
    let f = gp_functions(&x, j, &mut rng)?;
    let (y, f_true) = match kind {
        SynthKind::ScurveGaussian => {
            let y = f.map(|v| v + rng.sample::<f64, _>(StandardNormal));
            (y, f)
        }
        SynthKind::ScurvePoisson => {
            let psi = log_rates(&f, MEAN_COUNT);
            let y = psi.map(|v| Poisson::new(v.exp()).map(|p| p.sample(&mut rng)).unwrap_or(0.0));
            (y, psi)
        }
        SynthKind::ScurveNegativeBinomial => {
            // NB(r, logistic ψ) as a gamma-Poisson mixture with mean r·e^ψ
            let psi = log_rates(&f, MEAN_COUNT).map(|v| v - NB_DISPERSION.ln());
            let y = psi.map(|v| {
                let rate = Gamma::new(NB_DISPERSION, v.exp()).expect("valid gamma").sample(&mut rng);
                Poisson::new(rate).map(|p| p.sample(&mut rng)).unwrap_or(0.0)
            });
            (y, psi)
        }
        SynthKind::ScurveMultinomial => {
            let mut psi = f.clone();
            for i in 0..n {
                let last = f[(i, j - 1)];
                for c in 0..j {
                    psi[(i, c)] -= last;
                }
            }
            let y = multinomial_rows(&psi, MULTINOMIAL_TRIALS, &mut rng);
            (y, psi)
        }
        SynthKind::Lorenz => unreachable!(),
    };
    let labels = u.iter().map(|&v| (v > 0.0) as i64).collect();
    let time = u.iter().map(|&v| (v + 1.5 * PI) / (3.0 * PI)).collect();
    let data = Dataset::new(y)
        .with_labels(labels)
        .with_time(time)
        .with_provenance(format!("synthetic {kind} seed {seed}"));
    Ok(Synthetic { data, x_true: x, f_true })
}

fn multinomial_rows(psi: &DMatrix<f64>, trials: u64, rng: &mut impl Rng) -> DMatrix<f64> {
    let (n, j) = psi.shape();
    let mut y = DMatrix::zeros(n, j);
    for i in 0..n {
        let max = psi.row(i).max();
        let w: Vec<f64> = (0..j).map(|c| (psi[(i, c)] - max).exp()).collect();
        let mut left = trials;
        let mut mass: f64 = w.iter().sum();
        for c in 0..j {
            if left == 0 {
                break;
            }
            let count = if c + 1 == j {
                left
            } else {
                let p = (w[c] / mass).clamp(0.0, 1.0);
                Binomial::new(left, p).expect("valid binomial").sample(rng)
            };
            y[(i, c)] = count as f64;
            left -= count;
            mass -= w[c];
        }
    }
    y
}

/// Lorenz vector field with σ = 10, ρ = 28, β = 8/3.
pub fn lorenz_field(s: [f64; 3]) -> [f64; 3] {
    let (sigma, rho, beta) = (10.0, 28.0, 8.0 / 3.0);
    [sigma * (s[1] - s[0]), s[0] * (rho - s[2]) - s[1], s[0] * s[1] - beta * s[2]]
}

/// One classical Runge–Kutta step.
pub fn rk4_step(s: [f64; 3], h: f64) -> [f64; 3] {
    let add = |a: [f64; 3], b: [f64; 3], c: f64| [a[0] + c * b[0], a[1] + c * b[1], a[2] + c * b[2]];
    let k1 = lorenz_field(s);
    let k2 = lorenz_field(add(s, k1, h / 2.0));
    let k3 = lorenz_field(add(s, k2, h / 2.0));
    let k4 = lorenz_field(add(s, k3, h));
    let mut out = s;
    for k in 0..3 {
        out[k] += h / 6.0 * (k1[k] + 2.0 * k2[k] + 2.0 * k3[k] + k4[k]);
    }
    out
}

/// `steps` states after `start`, each `substeps` RK4 steps of size h/substeps apart.
pub fn lorenz_trajectory(start: [f64; 3], h: f64, steps: usize, substeps: usize) -> Vec<[f64; 3]> {
    let mut s = start;
    let mut out = Vec::with_capacity(steps);
    for _ in 0..steps {
        for _ in 0..substeps {
            s = rk4_step(s, h / substeps as f64);
        }
        out.push(s);
    }
    out
}

/// Start of the emitted Lorenz window for a seed.
pub fn lorenz_start(rng: &mut impl Rng) -> [f64; 3] {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let s0 = [1.0 + normal.sample(rng), 1.0 + normal.sample(rng), 1.0 + normal.sample(rng)];
    *lorenz_trajectory(s0, LORENZ_STEP, LORENZ_BURN, 1).last().expect("nonempty burn-in")
}

fn lorenz_dataset(n: usize, j: usize, rng: &mut ChaCha8Rng, seed: u64) -> Result<Synthetic> {
    let start = lorenz_start(rng);
    let traj = lorenz_trajectory(start, LORENZ_STEP, n, 1);
    let x = DMatrix::from_fn(n, 3, |i, k| traj[i][k]);
    let xs = DMatrix::from_columns(
        &x.column_iter()
            .map(|c| {
                let m = c.mean();
                let sd = (c.map(|v| (v - m).powi(2)).sum() / n as f64).sqrt();
                c.map(|v| (v - m) / sd)
            })
            .collect::<Vec<_>>(),
    );
    let linear = DMatrix::from_fn(3, j, |_, _| rng.sample::<f64, _>(StandardNormal) / 3f64.sqrt());
    let inner = DMatrix::from_fn(3, j, |_, _| rng.sample::<f64, _>(StandardNormal));
    let phase: Vec<f64> = (0..j).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
    let mut f = &xs * linear;
    let arg = &xs * inner;
    for c in 0..j {
        for i in 0..n {
            f[(i, c)] += (arg[(i, c)] + phase[c]).sin();
        }
    }
    let y = f.map(|v| v + rng.sample::<f64, _>(StandardNormal));
    let time = (0..n).map(|i| i as f64 / (n - 1) as f64).collect();
    let data = Dataset::new(y).with_time(time).with_provenance(format!("synthetic lorenz seed {seed}"));
    Ok(Synthetic { data, x_true: x, f_true: f })
}
