use rand::Rng;
use rand_distr::{Distribution, Gamma};
use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Number of gamma terms kept from the infinite-sum representation.
pub const PG_TERMS: usize = 200;

/// Parameters of a Pólya-gamma distribution PG(b, c).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PolyaGammaParams {
    pub b: f64,
    pub c: f64,
}

impl PolyaGammaParams {
    pub fn new(b: f64, c: f64) -> Result<Self> {
        if !(b > 0.0) || !b.is_finite() {
            return Err(Error::Config(format!("Pólya-gamma shape must be > 0, got {b}")));
        }
        if !c.is_finite() {
            return Err(Error::Config(format!("Pólya-gamma tilt must be finite, got {c}")));
        }
        Ok(Self { b, c })
    }

    pub fn mean(&self) -> f64 {
        let c = self.c.abs();
        if c < 1e-6 {
            self.b / 4.0 * (1.0 - c * c / 12.0)
        } else {
            self.b / (2.0 * c) * (0.5 * c).tanh()
        }
    }

    pub fn variance(&self) -> f64 {
        let c = self.c.abs();
        if c < 1e-3 {
            // Taylor expansion around c = 0.
            self.b * (1.0 / 24.0 - c * c / 240.0)
        } else {
            // (sinh c − c)·sech²(c/2) rewritten in e^{−c} so it never overflows.
            let e = (-c).exp();
            let core = (2.0 * (1.0 - e * e) - 4.0 * c * e) / ((1.0 + e) * (1.0 + e));
            self.b / (4.0 * c * c * c) * core
        }
    }

    /// Mean of the series terms beyond `PG_TERMS`.
    fn tail_mean(&self) -> f64 {
        let shift = self.c * self.c / (4.0 * PI * PI);
        let head: f64 = (1..=PG_TERMS)
            .map(|k| {
                let h = k as f64 - 0.5;
                1.0 / (h * h + shift)
            })
            .sum();
        (self.mean() - self.b * head / (2.0 * PI * PI)).max(0.0)
    }
}

/// Draw ω ~ PG(b, c) from the gamma-series representation truncated at
/// `PG_TERMS`, with the mean of the discarded tail added back.
pub fn pg_draw<R: Rng + ?Sized>(params: PolyaGammaParams, rng: &mut R) -> f64 {
    let gamma = Gamma::new(params.b, 1.0).expect("validated shape");
    let shift = params.c * params.c / (4.0 * PI * PI);
    let mut acc = 0.0;
    for k in 1..=PG_TERMS {
        let h = k as f64 - 0.5;
        acc += gamma.sample(rng) / (h * h + shift);
    }
    acc / (2.0 * PI * PI) + params.tail_mean()
}

/// PG draw that treats b = 0 as the point mass at zero.
pub fn pg_draw_or_zero<R: Rng + ?Sized>(b: f64, c: f64, rng: &mut R) -> f64 {
    if b <= 0.0 {
        0.0
    } else {
        pg_draw(PolyaGammaParams { b, c }, rng)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Mean of the untruncated series computed term by term.
    fn series_mean(b: f64, c: f64, terms: usize) -> f64 {
        let shift = c * c / (4.0 * PI * PI);
        let s: f64 = (1..=terms)
            .map(|k| {
                let h = k as f64 - 0.5;
                b / (h * h + shift)
            })
            .sum();
        s / (2.0 * PI * PI)
    }

    #[test]
    fn closed_form_mean_matches_long_series() {
        for &(b, c) in &[(1.0, 0.0), (2.0, 0.0), (1.0, 2.0), (3.0, 1.0), (10.0, 3.0)] {
            let series = series_mean(b, c, 10_000);
            let p = PolyaGammaParams::new(b, c).unwrap();
            // the 10⁴-term series has a tail of order b / (2π² · 10⁴)
            assert!((series - p.mean()).abs() < b * 1e-5, "b={b} c={c}");
        }
        assert!((PolyaGammaParams::new(1.0, 0.0).unwrap().mean() - 0.25).abs() < 1e-15);
        assert!((PolyaGammaParams::new(2.0, 0.0).unwrap().mean() - 0.5).abs() < 1e-15);
        let tanh1 = 1f64.tanh() / 4.0;
        assert!((PolyaGammaParams::new(1.0, 2.0).unwrap().mean() - tanh1).abs() < 1e-15);
    }

    #[test]
    fn sample_mean_matches_oracle_for_b1_c2() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = PolyaGammaParams::new(1.0, 2.0).unwrap();
        let n = 100_000;
        let draws: Vec<f64> = (0..n).map(|_| pg_draw(p, &mut rng)).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let oracle = series_mean(1.0, 2.0, 10_000);
        let se = (p.variance() / n as f64).sqrt();
        assert!((mean - oracle).abs() < 3.0 * se, "mean {mean} oracle {oracle}");
        assert!(draws.iter().all(|w| *w > 0.0));
    }

    #[test]
    fn moments_over_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for &(b, c) in &[(1.0, 0.0), (4.0, -2.5), (0.5, 1.0)] {
            let p = PolyaGammaParams::new(b, c).unwrap();
            let n = 40_000;
            let draws: Vec<f64> = (0..n).map(|_| pg_draw(p, &mut rng)).collect();
            let mean = draws.iter().sum::<f64>() / n as f64;
            let var = draws.iter().map(|w| (w - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            let se = (p.variance() / n as f64).sqrt();
            assert!((mean - p.mean()).abs() < 3.0 * se, "b={b} c={c}");
            assert!((var / p.variance() - 1.0).abs() < 0.05, "b={b} c={c} var={var}");
        }
    }

    #[test]
    fn rejects_nonpositive_shape() {
        assert!(PolyaGammaParams::new(0.0, 1.0).is_err());
        assert!(PolyaGammaParams::new(-1.0, 1.0).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(pg_draw_or_zero(0.0, 3.0, &mut rng), 0.0);
    }

    #[test]
    fn variance_branches_agree_near_thresholds() {
        let v = |c: f64| PolyaGammaParams { b: 1.0, c }.variance();
        assert!((v(0.999e-3) - v(1.001e-3)).abs() < 1e-8);
        assert!((v(49.999) / v(50.001) - 1.0).abs() < 1e-3);
    }
}
