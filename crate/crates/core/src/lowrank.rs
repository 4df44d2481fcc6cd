//! Gaussians with pattern-dictionary covariance `U diag(s)^2 U^T + xi I`.
//!
//! `U` (T x V) is shared by every component a model produces; only the mean
//! and the auxiliary standard deviations `s` vary per latent draw. When no
//! dictionary is configured the covariance falls back to `diag(s)^2 + xi I`
//! with one auxiliary deviation per time step.

use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// The shared covariance basis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatternBasis {
    /// Learned T x V pattern dictionary.
    Dictionary(DMatrix<f64>),
    /// No dictionary: auxiliary deviations act per time step.
    Diagonal(usize),
}

impl PatternBasis {
    /// Dictionary with N(0, 1/V) entries.
    pub fn random<R: Rng + ?Sized>(dim: usize, size: usize, rng: &mut R) -> Self {
        if size == 0 {
            return PatternBasis::Diagonal(dim);
        }
        let scale = 1.0 / (size as f64).sqrt();
        PatternBasis::Dictionary(DMatrix::from_fn(dim, size, |_, _| {
            scale * rng.sample::<f64, _>(StandardNormal)
        }))
    }

    pub fn dim(&self) -> usize {
        match self {
            PatternBasis::Dictionary(u) => u.nrows(),
            PatternBasis::Diagonal(t) => *t,
        }
    }

    /// Number of auxiliary deviations a component needs.
    pub fn aux_len(&self) -> usize {
        match self {
            PatternBasis::Dictionary(u) => u.ncols(),
            PatternBasis::Diagonal(t) => *t,
        }
    }

    pub fn is_learned(&self) -> bool {
        matches!(self, PatternBasis::Dictionary(_))
    }

    /// Learnable entries (column-major), empty for the diagonal fallback.
    pub fn learnable_len(&self) -> usize {
        match self {
            PatternBasis::Dictionary(u) => u.len(),
            PatternBasis::Diagonal(_) => 0,
        }
    }

    pub fn learnable_mut(&mut self) -> &mut [f64] {
        match self {
            PatternBasis::Dictionary(u) => u.as_mut_slice(),
            PatternBasis::Diagonal(_) => &mut [],
        }
    }

    /// The basis as an explicit matrix (identity for the diagonal fallback).
    pub fn matrix(&self) -> DMatrix<f64> {
        match self {
            PatternBasis::Dictionary(u) => u.clone(),
            PatternBasis::Diagonal(t) => DMatrix::identity(*t, *t),
        }
    }
}

/// N(mu, U diag(aux_std)^2 U^T + jitter I).
#[derive(Clone, Debug, PartialEq)]
pub struct LowRankGaussian {
    mu: Vec<f64>,
    basis: Arc<PatternBasis>,
    aux_std: Vec<f64>,
    jitter: f64,
}

/// Gradients of `log N(x; mu, Sigma)`.
#[derive(Clone, Debug)]
pub struct DensityGradient {
    pub log_density: f64,
    pub mu: Vec<f64>,
    pub aux_std: Vec<f64>,
    /// Column-major like the dictionary; `None` for the diagonal fallback.
    pub dict: Option<DMatrix<f64>>,
}

/// Diagonal band of the covariance matrix: `rows = 2 * half_width + 1`,
/// entry `(i, t)` is `Cov(x_t, x_{t - i + half_width})` or `None` when that
/// index falls outside `[0, T)`.
#[derive(Clone, Debug, PartialEq)]
pub struct CovarianceBand {
    pub half_width: usize,
    pub dim: usize,
    pub values: Vec<Option<f64>>,
}

impl CovarianceBand {
    pub fn rows(&self) -> usize {
        2 * self.half_width + 1
    }

    pub fn get(&self, row: usize, t: usize) -> Option<f64> {
        self.values[row * self.dim + t]
    }

    pub fn row(&self, row: usize) -> &[Option<f64>] {
        &self.values[row * self.dim..(row + 1) * self.dim]
    }
}

enum Factor {
    Dense(Cholesky<f64, Dyn>),
    Capacitance {
        // W = U diag(s)
        w: DMatrix<f64>,
        chol: Cholesky<f64, Dyn>,
    },
    Diagonal(Vec<f64>),
}

impl LowRankGaussian {
    pub fn new(mu: Vec<f64>, basis: Arc<PatternBasis>, aux_std: Vec<f64>, jitter: f64) -> Result<Self> {
        if let Some(i) = aux_std.iter().position(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::argument(format!(
                "auxiliary standard deviation {i} must be positive and finite, got {}",
                aux_std[i]
            )));
        }
        if !(jitter > 0.0 && jitter.is_finite()) {
            return Err(Error::argument(format!("jitter must be positive, got {jitter}")));
        }
        Self::new_unchecked(mu, basis, aux_std, jitter)
    }

    /// Like [`LowRankGaussian::new`] but admits zero deviations and zero
    /// jitter. Density evaluation on such a component fails; sampling returns
    /// the mean.
    pub fn new_unchecked(
        mu: Vec<f64>,
        basis: Arc<PatternBasis>,
        aux_std: Vec<f64>,
        jitter: f64,
    ) -> Result<Self> {
        if mu.len() != basis.dim() {
            return Err(Error::config(format!(
                "mean has {} entries, basis has {} rows",
                mu.len(),
                basis.dim()
            )));
        }
        if aux_std.len() != basis.aux_len() {
            return Err(Error::config(format!(
                "expected {} auxiliary deviations, got {}",
                basis.aux_len(),
                aux_std.len()
            )));
        }
        if jitter < 0.0 || aux_std.iter().any(|s| *s < 0.0) {
            return Err(Error::argument("negative scale"));
        }
        Ok(LowRankGaussian {
            mu,
            basis,
            aux_std,
            jitter,
        })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn aux_std(&self) -> &[f64] {
        &self.aux_std
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn basis(&self) -> &Arc<PatternBasis> {
        &self.basis
    }

    /// `W = U diag(s)` (T x V); for the diagonal fallback, `diag(s)`.
    fn scaled_basis(&self) -> DMatrix<f64> {
        match &*self.basis {
            PatternBasis::Dictionary(u) => {
                let mut w = u.clone();
                for (mut col, s) in w.column_iter_mut().zip(&self.aux_std) {
                    col *= *s;
                }
                w
            }
            PatternBasis::Diagonal(t) => {
                DMatrix::from_diagonal(&DVector::from_column_slice(&self.aux_std[..*t]))
            }
        }
    }

    /// Dense T x T covariance.
    pub fn covariance(&self) -> DMatrix<f64> {
        let w = self.scaled_basis();
        let mut sigma = &w * w.transpose();
        for i in 0..self.dim() {
            sigma[(i, i)] += self.jitter;
        }
        sigma
    }

    /// Marginal variances `diag(Sigma)`.
    pub fn variances(&self) -> Vec<f64> {
        match &*self.basis {
            PatternBasis::Dictionary(u) => (0..u.nrows())
                .map(|t| {
                    u.row(t)
                        .iter()
                        .zip(&self.aux_std)
                        .map(|(a, s)| (a * s).powi(2))
                        .sum::<f64>()
                        + self.jitter
                })
                .collect(),
            PatternBasis::Diagonal(_) => self.aux_std.iter().map(|s| s * s + self.jitter).collect(),
        }
    }

    fn residual(&self, x: &[f64]) -> Result<DVector<f64>> {
        if x.len() != self.dim() {
            return Err(Error::config(format!(
                "point has {} entries, distribution has dimension {}",
                x.len(),
                self.dim()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                location: "density argument".into(),
            });
        }
        Ok(DVector::from_iterator(
            x.len(),
            x.iter().zip(&self.mu).map(|(a, b)| a - b),
        ))
    }

    fn dense_factor(&self) -> Result<Factor> {
        Cholesky::new(self.covariance())
            .map(Factor::Dense)
            .ok_or_else(|| Error::Factorization("covariance is not positive definite".into()))
    }

    /// Matrix inversion lemma: work with the V x V capacitance matrix
    /// `I + W^T W / xi` instead of the T x T covariance.
    fn capacitance_factor(&self) -> Result<Factor> {
        if !(self.jitter > 0.0) {
            return Err(Error::Factorization("jitter must be positive for the lemma path".into()));
        }
        let w = self.scaled_basis();
        let mut cap = w.transpose() * &w / self.jitter;
        for i in 0..cap.nrows() {
            cap[(i, i)] += 1.0;
        }
        let chol = Cholesky::new(cap)
            .ok_or_else(|| Error::Factorization("capacitance matrix is not positive definite".into()))?;
        Ok(Factor::Capacitance { w, chol })
    }

    fn factor(&self) -> Result<Factor> {
        match &*self.basis {
            PatternBasis::Diagonal(_) => {
                let var = self.variances();
                if var.iter().any(|v| !(*v > 0.0)) {
                    return Err(Error::Factorization("zero variance".into()));
                }
                Ok(Factor::Diagonal(var))
            }
            // With V >= T the capacitance matrix is at least as large as the
            // covariance itself, so the lemma buys nothing; factor Sigma.
            PatternBasis::Dictionary(u) if u.ncols() >= u.nrows() => self.dense_factor(),
            PatternBasis::Dictionary(_) => self.capacitance_factor(),
        }
    }

    fn log_density_with(&self, factor: &Factor, r: &DVector<f64>) -> f64 {
        let t = self.dim() as f64;
        let (log_det, quad) = match factor {
            Factor::Dense(chol) => {
                let y = chol.l_dirty().solve_lower_triangular(r).expect("triangular solve");
                let log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
                (log_det, y.norm_squared())
            }
            Factor::Capacitance { w, chol } => {
                let b = w.transpose() * r;
                let cb = chol.solve(&b);
                let log_det = t * self.jitter.ln()
                    + 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
                let quad = (r.norm_squared() - b.dot(&cb) / self.jitter) / self.jitter;
                (log_det, quad)
            }
            Factor::Diagonal(var) => {
                let log_det = var.iter().map(|v| v.ln()).sum();
                let quad = r.iter().zip(var).map(|(a, v)| a * a / v).sum();
                (log_det, quad)
            }
        };
        -0.5 * (t * LN_2PI + log_det + quad)
    }

    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        let r = self.residual(x)?;
        let factor = self.factor()?;
        let lp = self.log_density_with(&factor, &r);
        finite(lp, "log density")
    }

    /// Log-density through a Cholesky factorization of the dense covariance.
    pub fn log_density_dense(&self, x: &[f64]) -> Result<f64> {
        let r = self.residual(x)?;
        let lp = self.log_density_with(&self.dense_factor()?, &r);
        finite(lp, "log density")
    }

    /// Log-density through the matrix inversion and determinant lemmas.
    pub fn log_density_lemma(&self, x: &[f64]) -> Result<f64> {
        let r = self.residual(x)?;
        let lp = self.log_density_with(&self.capacitance_factor()?, &r);
        finite(lp, "log density")
    }

    /// Log-density and its gradient with respect to the mean, the auxiliary
    /// deviations and the dictionary.
    ///
    /// With `alpha = Sigma^-1 r` and `G = (alpha alpha^T - Sigma^-1) / 2`:
    /// `d/dmu = alpha`, `d/dU = 2 G U diag(s)^2`, `d/ds_v = 2 s_v u_v^T G u_v`.
    pub fn log_density_grad(&self, x: &[f64]) -> Result<DensityGradient> {
        let r = self.residual(x)?;
        let factor = self.factor()?;
        let log_density = finite(self.log_density_with(&factor, &r), "log density")?;
        if let Factor::Diagonal(var) = &factor {
            let mut g_mu = Vec::with_capacity(var.len());
            let mut g_s = Vec::with_capacity(var.len());
            for ((a, v), s) in r.iter().zip(var).zip(&self.aux_std) {
                let alpha = a / v;
                g_mu.push(alpha);
                g_s.push(s * (alpha * alpha - 1.0 / v));
            }
            return Ok(DensityGradient {
                log_density,
                mu: g_mu,
                aux_std: g_s,
                dict: None,
            });
        }
        let precision = match &factor {
            Factor::Dense(chol) => chol.inverse(),
            Factor::Capacitance { w, chol } => {
                // Sigma^-1 = (I - W C^-1 W^T / xi) / xi
                let cw = chol.solve(&w.transpose());
                let mut p = -(w * cw) / self.jitter;
                for i in 0..p.nrows() {
                    p[(i, i)] += 1.0;
                }
                p / self.jitter
            }
            Factor::Diagonal(_) => unreachable!(),
        };
        let alpha = &precision * &r;
        let g = (&alpha * alpha.transpose() - &precision) * 0.5;
        let u = match &*self.basis {
            PatternBasis::Dictionary(u) => u,
            PatternBasis::Diagonal(_) => unreachable!(),
        };
        let gu = &g * u;
        let mut g_dict = gu.clone();
        let mut g_s = Vec::with_capacity(self.aux_std.len());
        for (v, s) in self.aux_std.iter().enumerate() {
            let quad: f64 = u.column(v).dot(&gu.column(v));
            g_s.push(2.0 * s * quad);
            let mut col = g_dict.column_mut(v);
            col *= 2.0 * s * s;
        }
        Ok(DensityGradient {
            log_density,
            mu: alpha.iter().copied().collect(),
            aux_std: g_s,
            dict: Some(g_dict),
        })
    }

    /// `mu + U diag(s) e_V + sqrt(xi) e_T` with independent standard normals.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let mut out = self.mu.clone();
        match &*self.basis {
            PatternBasis::Dictionary(u) => {
                let e: Vec<f64> = self
                    .aux_std
                    .iter()
                    .map(|s| s * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                for (v, ev) in e.iter().enumerate() {
                    for (o, a) in out.iter_mut().zip(u.column(v).iter()) {
                        *o += a * ev;
                    }
                }
            }
            PatternBasis::Diagonal(_) => {
                for (o, s) in out.iter_mut().zip(&self.aux_std) {
                    *o += s * rng.sample::<f64, _>(StandardNormal);
                }
            }
        }
        let sd = self.jitter.sqrt();
        for o in out.iter_mut() {
            *o += sd * rng.sample::<f64, _>(StandardNormal);
        }
        out
    }

    pub fn covariance_band(&self, half_width: usize) -> Result<CovarianceBand> {
        let dim = self.dim();
        if dim == 0 || half_width + 1 > dim {
            return Err(Error::argument(format!(
                "band of half width {half_width} does not fit a {dim}-dimensional covariance"
            )));
        }
        let sigma = self.covariance();
        let rows = 2 * half_width + 1;
        let mut values = Vec::with_capacity(rows * dim);
        for i in 0..rows {
            for t in 0..dim {
                let s = t as isize - i as isize + half_width as isize;
                values.push((0..dim as isize).contains(&s).then(|| sigma[(t, s as usize)]));
            }
        }
        Ok(CovarianceBand {
            half_width,
            dim,
            values,
        })
    }
}

fn finite(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite {
            location: what.into(),
        })
    }
}

/// Log-density of N(x; mean, diag(std^2)).
pub fn diag_normal_log_density(x: &[f64], mean: &[f64], std: &[f64]) -> f64 {
    x.iter()
        .zip(mean)
        .zip(std)
        .map(|((x, m), s)| {
            let u = (x - m) / s;
            -0.5 * u * u - s.ln() - 0.5 * LN_2PI
        })
        .sum()
}
