//! Incremental likelihood evaluation for the latent and frequency updates.

use nalgebra::{DMatrix, DVector};

use super::gaussian::GaussianMarginalCache;
use super::{
    entry_constant, entry_kernel, multinomial_row_constant, multinomial_row_kernel, LikelihoodKind,
    LikelihoodSpec,
};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::rff::FrequencyTarget;

/// A likelihood that can score a replacement of one row of Φ.
pub trait RowTarget {
    /// Value comparable with [`RowTarget::propose_row`] at the current row.
    fn current_row_log_lik(&self, i: usize) -> f64;
    fn propose_row(&mut self, i: usize, phi_row: &DVector<f64>) -> f64;
    fn accept_row(&mut self) -> Result<()>;
}

struct RowPending {
    row: usize,
    phi_row: DVector<f64>,
    psi_row: DVector<f64>,
    kernel: f64,
}

struct PairPending {
    m: usize,
    sin: DVector<f64>,
    cos: DVector<f64>,
    psi: DMatrix<f64>,
    kernels: Vec<f64>,
    total: f64,
}

/// Log-likelihood given fixed coefficients β, cached per row of Ψ = Φβ.
pub struct ConditionalCache {
    spec: LikelihoodSpec,
    y: DMatrix<f64>,
    mask: DMatrix<bool>,
    row_complete: Vec<bool>,
    phi: DMatrix<f64>,
    beta: DMatrix<f64>,
    psi: DMatrix<f64>,
    row_const: Vec<f64>,
    row_kernel: Vec<f64>,
    total: f64,
    row_pending: Option<RowPending>,
    pair_pending: Option<PairPending>,
}

impl ConditionalCache {
    pub fn new(phi: DMatrix<f64>, beta: DMatrix<f64>, spec: &LikelihoodSpec, data: &Dataset) -> Result<Self> {
        if phi.ncols() != beta.nrows() || phi.nrows() != data.n() || beta.ncols() != data.j() {
            return Err(Error::Dimension("features, coefficients and data disagree".into()));
        }
        let n = data.n();
        let row_complete: Vec<bool> = (0..n).map(|i| data.row_fully_observed(i)).collect();
        let mut cache = Self {
            spec: spec.clone(),
            y: data.y.clone(),
            mask: data.mask.clone(),
            row_complete,
            psi: &phi * &beta,
            phi,
            beta,
            row_const: vec![0.0; n],
            row_kernel: vec![0.0; n],
            total: 0.0,
            row_pending: None,
            pair_pending: None,
        };
        for i in 0..n {
            cache.row_const[i] = cache.row_constant(i);
            let psi_row: Vec<f64> = cache.psi.row(i).iter().copied().collect();
            cache.row_kernel[i] = cache.row_kernel_of(i, &psi_row);
        }
        cache.total = cache.sum_total(&cache.row_kernel);
        Ok(cache)
    }

    fn row_constant(&self, i: usize) -> f64 {
        let j = self.y.ncols();
        if self.spec.kind() == LikelihoodKind::Multinomial {
            if !self.row_complete[i] {
                return 0.0;
            }
            return multinomial_row_constant((0..j).map(|k| self.y[(i, k)]));
        }
        (0..j)
            .filter(|&k| self.mask[(i, k)])
            .map(|k| entry_constant(&self.spec, i, k, self.y[(i, k)]))
            .sum()
    }

    fn row_kernel_of(&self, i: usize, psi_row: &[f64]) -> f64 {
        let j = self.y.ncols();
        if self.spec.kind() == LikelihoodKind::Multinomial {
            if !self.row_complete[i] {
                return 0.0;
            }
            let y: Vec<f64> = (0..j).map(|k| self.y[(i, k)]).collect();
            return multinomial_row_kernel(&y, psi_row);
        }
        let mut s = 0.0;
        for k in 0..j {
            if self.mask[(i, k)] {
                s += entry_kernel(&self.spec, i, k, self.y[(i, k)], psi_row[k]);
            }
        }
        s
    }

    fn sum_total(&self, kernels: &[f64]) -> f64 {
        let s: f64 = kernels.iter().sum::<f64>() + self.row_const.iter().sum::<f64>();
        if s.is_nan() {
            f64::NEG_INFINITY
        } else {
            s
        }
    }

    pub fn total(&self) -> f64 {
        self.total
    }

    pub fn phi(&self) -> &DMatrix<f64> {
        &self.phi
    }

    pub fn psi(&self) -> &DMatrix<f64> {
        &self.psi
    }

    /// Log-likelihood at a different Φ, leaving the cache untouched.
    pub fn evaluate(&self, phi: &DMatrix<f64>) -> f64 {
        let psi = phi * &self.beta;
        let kernels: Vec<f64> = (0..psi.nrows())
            .map(|i| {
                let row: Vec<f64> = psi.row(i).iter().copied().collect();
                self.row_kernel_of(i, &row)
            })
            .collect();
        self.sum_total(&kernels)
    }

    pub fn set_phi(&mut self, phi: DMatrix<f64>) {
        self.psi = &phi * &self.beta;
        self.phi = phi;
        for i in 0..self.psi.nrows() {
            let row: Vec<f64> = self.psi.row(i).iter().copied().collect();
            self.row_kernel[i] = self.row_kernel_of(i, &row);
        }
        self.total = self.sum_total(&self.row_kernel);
        self.row_pending = None;
        self.pair_pending = None;
    }
}

impl RowTarget for ConditionalCache {
    fn current_row_log_lik(&self, i: usize) -> f64 {
        self.row_kernel[i]
    }

    fn propose_row(&mut self, i: usize, phi_row: &DVector<f64>) -> f64 {
        let psi_row = self.beta.tr_mul(phi_row);
        let kernel = self.row_kernel_of(i, psi_row.as_slice());
        self.row_pending = Some(RowPending { row: i, phi_row: phi_row.clone(), psi_row, kernel });
        kernel
    }

    fn accept_row(&mut self) -> Result<()> {
        let p = self
            .row_pending
            .take()
            .ok_or_else(|| Error::Config("no pending row proposal".into()))?;
        self.phi.set_row(p.row, &p.phi_row.transpose());
        self.psi.set_row(p.row, &p.psi_row.transpose());
        self.row_kernel[p.row] = p.kernel;
        self.total = self.sum_total(&self.row_kernel);
        Ok(())
    }
}

impl FrequencyTarget for ConditionalCache {
    fn current_log_lik(&self) -> f64 {
        self.total
    }

    fn propose_pair(&mut self, m: usize, sin: &DVector<f64>, cos: &DVector<f64>) -> f64 {
        let (ks, kc) = (2 * m, 2 * m + 1);
        let ds = sin - self.phi.column(ks);
        let dc = cos - self.phi.column(kc);
        let bs = self.beta.row(ks).transpose();
        let bc = self.beta.row(kc).transpose();
        let mut psi = self.psi.clone();
        psi.ger(1.0, &ds, &bs, 1.0);
        psi.ger(1.0, &dc, &bc, 1.0);
        let j = psi.ncols();
        let mut buf = vec![0.0; j];
        let kernels: Vec<f64> = (0..psi.nrows())
            .map(|i| {
                for k in 0..j {
                    buf[k] = psi[(i, k)];
                }
                self.row_kernel_of(i, &buf)
            })
            .collect();
        let total = self.sum_total(&kernels);
        self.pair_pending = Some(PairPending { m, sin: sin.clone(), cos: cos.clone(), psi, kernels, total });
        total
    }

    fn accept_pair(&mut self) -> Result<()> {
        let p = self
            .pair_pending
            .take()
            .ok_or_else(|| Error::Config("no pending frequency proposal".into()))?;
        self.phi.set_column(2 * p.m, &p.sin);
        self.phi.set_column(2 * p.m + 1, &p.cos);
        self.psi = p.psi;
        self.row_kernel = p.kernels;
        self.total = p.total;
        Ok(())
    }
}

/// The likelihood seen by the latent and frequency updates: the Gaussian
/// marginal with β integrated out, or the conditional given β.
pub enum LikelihoodCache {
    Gaussian(GaussianMarginalCache),
    Conditional(ConditionalCache),
}

impl LikelihoodCache {
    pub fn total(&self) -> f64 {
        match self {
            LikelihoodCache::Gaussian(c) => c.total(),
            LikelihoodCache::Conditional(c) => c.total(),
        }
    }

    pub fn phi(&self) -> &DMatrix<f64> {
        match self {
            LikelihoodCache::Gaussian(c) => c.phi(),
            LikelihoodCache::Conditional(c) => c.phi(),
        }
    }

    pub fn evaluate(&self, phi: &DMatrix<f64>) -> f64 {
        match self {
            LikelihoodCache::Gaussian(c) => c.evaluate(phi),
            LikelihoodCache::Conditional(c) => c.evaluate(phi),
        }
    }

    pub fn set_phi(&mut self, phi: DMatrix<f64>) -> Result<()> {
        match self {
            LikelihoodCache::Gaussian(c) => c.set_phi(phi),
            LikelihoodCache::Conditional(c) => {
                c.set_phi(phi);
                Ok(())
            }
        }
    }
}

impl RowTarget for LikelihoodCache {
    fn current_row_log_lik(&self, i: usize) -> f64 {
        match self {
            LikelihoodCache::Gaussian(c) => c.total(),
            LikelihoodCache::Conditional(c) => c.current_row_log_lik(i),
        }
    }

    fn propose_row(&mut self, i: usize, phi_row: &DVector<f64>) -> f64 {
        match self {
            LikelihoodCache::Gaussian(c) => c.propose_row(i, phi_row),
            LikelihoodCache::Conditional(c) => c.propose_row(i, phi_row),
        }
    }

    fn accept_row(&mut self) -> Result<()> {
        match self {
            LikelihoodCache::Gaussian(c) => c.accept_row(),
            LikelihoodCache::Conditional(c) => c.accept_row(),
        }
    }
}

impl FrequencyTarget for LikelihoodCache {
    fn current_log_lik(&self) -> f64 {
        self.total()
    }

    fn propose_pair(&mut self, m: usize, sin: &DVector<f64>, cos: &DVector<f64>) -> f64 {
        match self {
            LikelihoodCache::Gaussian(c) => c.propose_pair(m, sin, cos),
            LikelihoodCache::Conditional(c) => c.propose_pair(m, sin, cos),
        }
    }

    fn accept_pair(&mut self) -> Result<()> {
        match self {
            LikelihoodCache::Gaussian(c) => c.accept_pair(),
            LikelihoodCache::Conditional(c) => c.accept_pair(),
        }
    }
}
