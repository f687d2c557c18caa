//! Expert densities evaluated on task-map outputs.
//!
//! Every family exposes a normalized log-density (the CDF gate is the one
//! deliberately unnormalized member), gradients in the observation and in an
//! unconstrained parameter vector, and a moment-based fit used for
//! initialization. Scale-like parameters are stored as logarithms so that
//! gradient steps cannot leave the feasible set.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest standard deviation kept by fits and parameter updates.
pub const SIGMA_FLOOR: f64 = 1e-4;

pub const LN_2PI: f64 = 1.8378770664093453;

/// Classes of parameters, used for situation binding and freezing.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamField {
    /// Means, bounds, weight-space means: where the expert sits.
    Location,
    /// Standard deviations, Cholesky factors, low-rank factors.
    Scale,
    /// Mixture weight of the gated family.
    MixWeight,
}

/// Lower-triangular Cholesky factor stored row-major with log diagonal.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CholFactor {
    dim: usize,
    data: Vec<f64>,
}

impl CholFactor {
    pub fn len(dim: usize) -> usize {
        dim * (dim + 1) / 2
    }

    fn idx(r: usize, c: usize) -> usize {
        r * (r + 1) / 2 + c
    }

    pub fn identity_scaled(dim: usize, std: f64) -> Self {
        let mut data = vec![0.0; Self::len(dim)];
        for r in 0..dim {
            data[Self::idx(r, r)] = std.ln();
        }
        Self { dim, data }
    }

    pub fn from_diag_stds(stds: &[f64]) -> Self {
        let dim = stds.len();
        let mut data = vec![0.0; Self::len(dim)];
        for r in 0..dim {
            data[Self::idx(r, r)] = stds[r].ln();
        }
        Self { dim, data }
    }

    /// Cholesky of a symmetric positive definite matrix.
    pub fn from_spd(sigma: &DMatrix<f64>) -> Result<Self> {
        let dim = sigma.nrows();
        let chol = sigma
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Numerical("covariance not positive definite".into()))?;
        let l = chol.l();
        let mut data = vec![0.0; Self::len(dim)];
        for r in 0..dim {
            for c in 0..=r {
                data[Self::idx(r, c)] = if r == c { l[(r, c)].ln() } else { l[(r, c)] };
            }
        }
        Ok(Self { dim, data })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entries(&self) -> &[f64] {
        &self.data
    }

    pub fn entries_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn lower(&self) -> DMatrix<f64> {
        let mut l = DMatrix::zeros(self.dim, self.dim);
        for r in 0..self.dim {
            for c in 0..=r {
                let v = self.data[Self::idx(r, c)];
                l[(r, c)] = if r == c { v.exp() } else { v };
            }
        }
        l
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        let l = self.lower();
        &l * l.transpose()
    }

    pub fn half_logdet(&self) -> f64 {
        (0..self.dim).map(|r| self.data[Self::idx(r, r)]).sum()
    }

    /// Multiply all standard deviations by `c`.
    pub fn scale(&self, c: f64) -> Self {
        let mut out = self.clone();
        for r in 0..self.dim {
            for col in 0..=r {
                let i = Self::idx(r, col);
                if r == col {
                    out.data[i] += c.ln();
                } else {
                    out.data[i] *= c;
                }
            }
        }
        out
    }

    /// log N(r | 0, L L^T) together with alpha = Sigma^-1 r.
    fn gauss_eval(&self, r: &DVector<f64>) -> (f64, DVector<f64>, DVector<f64>) {
        let l = self.lower();
        let z = l
            .clone()
            .solve_lower_triangular(r)
            .expect("positive diagonal");
        let alpha = l.transpose().solve_upper_triangular(&z).expect("positive diagonal");
        let lp = -0.5 * z.norm_squared() - self.half_logdet() - 0.5 * self.dim as f64 * LN_2PI;
        (lp, z, alpha)
    }

    /// Gradient of log N(y | mu, LL^T) with respect to the stored entries,
    /// given z = L^-1 r and alpha = Sigma^-1 r.
    pub(crate) fn grad_entries(&self, z: &DVector<f64>, alpha: &DVector<f64>) -> Vec<f64> {
        let mut g = vec![0.0; Self::len(self.dim)];
        for r in 0..self.dim {
            for c in 0..=r {
                let i = Self::idx(r, c);
                let raw = alpha[r] * z[c];
                if r == c {
                    let ell = self.data[i].exp();
                    g[i] = raw * ell - 1.0;
                } else {
                    g[i] = raw;
                }
            }
        }
        g
    }
}

/// Direction of the cumulative constraint: mass below or above the bound.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Le,
    Ge,
}

/// Per-step basis matrices of a trajectory-marginal expert.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PrompBasis {
    /// One (n_weights x obs_dim) matrix per time step.
    pub mats: Vec<DMatrix<f64>>,
}

impl PrompBasis {
    /// Normalized radial basis functions with centers equispaced on [0, 1]
    /// and width 1.5x the center spacing, block-repeated over `obs_dim`.
    pub fn normalized_rbf(n_basis: usize, n_steps: usize, obs_dim: usize) -> Result<Self> {
        if n_basis < 1 || n_steps < 1 || obs_dim < 1 {
            return Err(Error::Invalid("basis sizes must be positive".into()));
        }
        let spacing = if n_basis > 1 {
            1.0 / (n_basis as f64 - 1.0)
        } else {
            1.0
        };
        let width = 1.5 * spacing;
        let mut mats = Vec::with_capacity(n_steps);
        for t in 0..n_steps {
            let phase = if n_steps > 1 {
                t as f64 / (n_steps as f64 - 1.0)
            } else {
                0.0
            };
            let mut phi = DVector::zeros(n_basis);
            for b in 0..n_basis {
                let center = b as f64 * spacing;
                phi[b] = (-0.5 * ((phase - center) / width).powi(2)).exp();
            }
            phi /= phi.sum();
            let mut m = DMatrix::zeros(n_basis * obs_dim, obs_dim);
            for d in 0..obs_dim {
                for b in 0..n_basis {
                    m[(d * n_basis + b, d)] = phi[b];
                }
            }
            mats.push(m);
        }
        Ok(Self { mats })
    }

    pub fn n_weights(&self) -> usize {
        self.mats.first().map_or(0, |m| m.nrows())
    }

    pub fn obs_dim(&self) -> usize {
        self.mats.first().map_or(0, |m| m.ncols())
    }

    pub fn n_steps(&self) -> usize {
        self.mats.len()
    }
}

/// Marginal of a weight-space trajectory distribution at one time step.
pub fn promp_marginal(
    psi: &DMatrix<f64>,
    mu_w: &DVector<f64>,
    sigma_w: &DMatrix<f64>,
    sigma_x: f64,
) -> (DVector<f64>, DMatrix<f64>) {
    let mean = psi.transpose() * mu_w;
    let cov = psi.transpose() * sigma_w * psi
        + sigma_x * sigma_x * DMatrix::identity(psi.ncols(), psi.ncols());
    (mean, cov)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum ExpertParams {
    /// Full-covariance normal.
    Gaussian { mean: Vec<f64>, chol: CholFactor },
    /// Normal with a single shared standard deviation.
    Isotropic { mean: Vec<f64>, log_sigma: f64 },
    /// Normal with covariance diag(sigma^2) + F F^T.
    LowRank {
        mean: Vec<f64>,
        log_sigma: Vec<f64>,
        factor: DMatrix<f64>,
    },
    /// One-dimensional normal.
    Scalar { mean: f64, log_sigma: f64 },
    /// Soft inequality: P(x <= bound) (or >=) of a normal around the value.
    Cdf {
        bound: f64,
        log_sigma: f64,
        direction: Direction,
    },
    /// Gated expert: with probability pi the inner expert applies, otherwise
    /// a flat surrogate (the inner family with stds inflated).
    UniGauss {
        inner: Box<ExpertParams>,
        logit_pi: f64,
        inflate: f64,
    },
    /// Product of per-step trajectory marginals in weight space.
    Promp {
        mu_w: Vec<f64>,
        chol_w: CholFactor,
        log_sigma_x: f64,
        basis: PrompBasis,
    },
}

impl ExpertParams {
    pub fn family_name(&self) -> &'static str {
        match self {
            ExpertParams::Gaussian { .. } => "gaussian",
            ExpertParams::Isotropic { .. } => "isotropic",
            ExpertParams::LowRank { .. } => "low_rank",
            ExpertParams::Scalar { .. } => "scalar",
            ExpertParams::Cdf { .. } => "cdf",
            ExpertParams::UniGauss { .. } => "uni_gauss",
            ExpertParams::Promp { .. } => "promp",
        }
    }

    /// Family descriptor with the same shape as this parameterization,
    /// suitable for refitting from data.
    pub fn family(&self) -> ExpertFamily {
        match self {
            ExpertParams::Gaussian { mean, .. } => ExpertFamily::Gaussian { dim: mean.len() },
            ExpertParams::Isotropic { mean, .. } => ExpertFamily::Isotropic { dim: mean.len() },
            ExpertParams::LowRank { mean, factor, .. } => ExpertFamily::LowRank {
                dim: mean.len(),
                rank: factor.ncols(),
            },
            ExpertParams::Scalar { .. } => ExpertFamily::Scalar,
            ExpertParams::Cdf { direction, .. } => ExpertFamily::Cdf {
                direction: *direction,
            },
            ExpertParams::UniGauss { inner, inflate, .. } => ExpertFamily::UniGauss {
                inner: Box::new(inner.family()),
                inflate: *inflate,
            },
            ExpertParams::Promp { mu_w, basis, .. } => ExpertFamily::Promp {
                n_basis: mu_w.len() / basis.obs_dim().max(1),
                n_steps: basis.n_steps(),
                obs_dim: basis.obs_dim(),
            },
        }
    }

    /// Dimension of observations this expert evaluates.
    pub fn dim(&self) -> usize {
        match self {
            ExpertParams::Gaussian { mean, .. } => mean.len(),
            ExpertParams::Isotropic { mean, .. } => mean.len(),
            ExpertParams::LowRank { mean, .. } => mean.len(),
            ExpertParams::Scalar { .. } | ExpertParams::Cdf { .. } => 1,
            ExpertParams::UniGauss { inner, .. } => inner.dim(),
            ExpertParams::Promp { basis, .. } => basis.n_steps() * basis.obs_dim(),
        }
    }

    fn check_dim(&self, y: &DVector<f64>) -> Result<()> {
        if y.len() != self.dim() {
            return Err(Error::Dimension(format!(
                "{} expert of dim {} got observation of dim {}",
                self.family_name(),
                self.dim(),
                y.len()
            )));
        }
        Ok(())
    }

    pub fn logpdf(&self, y: &DVector<f64>) -> Result<f64> {
        self.check_dim(y)?;
        Ok(match self {
            ExpertParams::Gaussian { mean, chol } => {
                let r = y - DVector::from_column_slice(mean);
                chol.gauss_eval(&r).0
            }
            ExpertParams::Isotropic { mean, log_sigma } => {
                let r = y - DVector::from_column_slice(mean);
                let d = mean.len() as f64;
                let s2 = (2.0 * log_sigma).exp();
                -0.5 * r.norm_squared() / s2 - d * log_sigma - 0.5 * d * LN_2PI
            }
            ExpertParams::LowRank {
                mean,
                log_sigma,
                factor,
            } => {
                let r = y - DVector::from_column_slice(mean);
                let chol = CholFactor::from_spd(&low_rank_cov(log_sigma, factor))?;
                chol.gauss_eval(&r).0
            }
            ExpertParams::Scalar { mean, log_sigma } => {
                let z = (y[0] - mean) / log_sigma.exp();
                -0.5 * z * z - log_sigma - 0.5 * LN_2PI
            }
            ExpertParams::Cdf {
                bound,
                log_sigma,
                direction,
            } => log_ndtr(cdf_z(y[0], *bound, *log_sigma, *direction)),
            ExpertParams::UniGauss {
                inner,
                logit_pi,
                inflate,
            } => {
                let (la, lb) = uni_gauss_branches(inner, *logit_pi, *inflate, y)?;
                log_sum_exp2(la, lb)
            }
            ExpertParams::Promp { .. } => {
                let mut total = 0.0;
                for (yt, mean, chol) in self.promp_steps(y)? {
                    let r = yt - mean;
                    total += chol.gauss_eval(&r).0;
                }
                total
            }
        })
    }

    pub fn grad_y(&self, y: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_dim(y)?;
        Ok(match self {
            ExpertParams::Gaussian { mean, chol } => {
                let r = y - DVector::from_column_slice(mean);
                let (_, _, alpha) = chol.gauss_eval(&r);
                -alpha
            }
            ExpertParams::Isotropic { mean, log_sigma } => {
                let r = y - DVector::from_column_slice(mean);
                -r / (2.0 * log_sigma).exp()
            }
            ExpertParams::LowRank {
                mean,
                log_sigma,
                factor,
            } => {
                let r = y - DVector::from_column_slice(mean);
                let chol = CholFactor::from_spd(&low_rank_cov(log_sigma, factor))?;
                let (_, _, alpha) = chol.gauss_eval(&r);
                -alpha
            }
            ExpertParams::Scalar { mean, log_sigma } => {
                let s2 = (2.0 * log_sigma).exp();
                DVector::from_element(1, -(y[0] - mean) / s2)
            }
            ExpertParams::Cdf {
                bound,
                log_sigma,
                direction,
            } => {
                let z = cdf_z(y[0], *bound, *log_sigma, *direction);
                let dzdx = match direction {
                    Direction::Le => -(-log_sigma).exp(),
                    Direction::Ge => (-log_sigma).exp(),
                };
                DVector::from_element(1, ndtr_ratio(z) * dzdx)
            }
            ExpertParams::UniGauss {
                inner,
                logit_pi,
                inflate,
            } => {
                let (la, lb) = uni_gauss_branches(inner, *logit_pi, *inflate, y)?;
                let lp = log_sum_exp2(la, lb);
                let wa = (la - lp).exp();
                let wb = (lb - lp).exp();
                let flat = inner.inflated(*inflate);
                wa * inner.grad_y(y)? + wb * flat.grad_y(y)?
            }
            ExpertParams::Promp { .. } => {
                let mut g = DVector::zeros(y.len());
                let mut off = 0;
                for (yt, mean, chol) in self.promp_steps(y)? {
                    let r = &yt - &mean;
                    let (_, _, alpha) = chol.gauss_eval(&r);
                    for i in 0..yt.len() {
                        g[off + i] = -alpha[i];
                    }
                    off += yt.len();
                }
                g
            }
        })
    }

    /// Hessian of the log-density in the observation.
    pub fn hessian_y(&self, y: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.check_dim(y)?;
        Ok(match self {
            ExpertParams::Gaussian { chol, .. } => {
                -precision_of(&chol.covariance())
            }
            ExpertParams::Isotropic { mean, log_sigma } => {
                let d = mean.len();
                -DMatrix::identity(d, d) / (2.0 * log_sigma).exp()
            }
            ExpertParams::LowRank {
                log_sigma, factor, ..
            } => -precision_of(&low_rank_cov(log_sigma, factor)),
            ExpertParams::Scalar { log_sigma, .. } => {
                DMatrix::from_element(1, 1, -(-2.0 * log_sigma).exp())
            }
            ExpertParams::Cdf {
                bound,
                log_sigma,
                direction,
            } => {
                let z = cdf_z(y[0], *bound, *log_sigma, *direction);
                let ratio = ndtr_ratio(z);
                let s2 = (2.0 * log_sigma).exp();
                DMatrix::from_element(1, 1, -ratio * (z + ratio) / s2)
            }
            ExpertParams::UniGauss {
                inner,
                logit_pi,
                inflate,
            } => {
                let (la, lb) = uni_gauss_branches(inner, *logit_pi, *inflate, y)?;
                let lp = log_sum_exp2(la, lb);
                let wa = (la - lp).exp();
                let wb = (lb - lp).exp();
                let flat = inner.inflated(*inflate);
                let ga = inner.grad_y(y)?;
                let gb = flat.grad_y(y)?;
                let g = wa * &ga + wb * &gb;
                wa * (inner.hessian_y(y)? + &ga * ga.transpose())
                    + wb * (flat.hessian_y(y)? + &gb * gb.transpose())
                    - &g * g.transpose()
            }
            ExpertParams::Promp { .. } => {
                let mut h = DMatrix::zeros(y.len(), y.len());
                let mut off = 0;
                for (yt, _, chol) in self.promp_steps(y)? {
                    let prec = precision_of(&chol.covariance());
                    let d = yt.len();
                    h.view_mut((off, off), (d, d)).copy_from(&(-prec));
                    off += d;
                }
                h
            }
        })
    }

    pub fn n_params(&self) -> usize {
        match self {
            ExpertParams::Gaussian { mean, .. } => mean.len() + CholFactor::len(mean.len()),
            ExpertParams::Isotropic { mean, .. } => mean.len() + 1,
            ExpertParams::LowRank { mean, factor, .. } => {
                2 * mean.len() + factor.nrows() * factor.ncols()
            }
            ExpertParams::Scalar { .. } | ExpertParams::Cdf { .. } => 2,
            ExpertParams::UniGauss { inner, .. } => inner.n_params() + 1,
            ExpertParams::Promp { mu_w, .. } => {
                mu_w.len() + CholFactor::len(mu_w.len()) + 1
            }
        }
    }

    /// Current unconstrained parameter vector. Layout per family:
    /// location entries first, then scale entries, then the gate weight.
    pub fn flat(&self) -> DVector<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        match self {
            ExpertParams::Gaussian { mean, chol } => {
                out.extend_from_slice(mean);
                out.extend_from_slice(chol.entries());
            }
            ExpertParams::Isotropic { mean, log_sigma } => {
                out.extend_from_slice(mean);
                out.push(*log_sigma);
            }
            ExpertParams::LowRank {
                mean,
                log_sigma,
                factor,
            } => {
                out.extend_from_slice(mean);
                out.extend_from_slice(log_sigma);
                out.extend(factor.iter());
            }
            ExpertParams::Scalar { mean, log_sigma } => {
                out.push(*mean);
                out.push(*log_sigma);
            }
            ExpertParams::Cdf {
                bound, log_sigma, ..
            } => {
                out.push(*bound);
                out.push(*log_sigma);
            }
            ExpertParams::UniGauss {
                inner, logit_pi, ..
            } => {
                out.extend(inner.flat().iter());
                out.push(*logit_pi);
            }
            ExpertParams::Promp {
                mu_w,
                chol_w,
                log_sigma_x,
                ..
            } => {
                out.extend_from_slice(mu_w);
                out.extend_from_slice(chol_w.entries());
                out.push(*log_sigma_x);
            }
        }
        DVector::from_vec(out)
    }

    pub fn set_flat(&mut self, v: &DVector<f64>) -> Result<()> {
        if v.len() != self.n_params() {
            return Err(Error::Dimension(format!(
                "{} expert has {} parameters, got {}",
                self.family_name(),
                self.n_params(),
                v.len()
            )));
        }
        let s = v.as_slice();
        match self {
            ExpertParams::Gaussian { mean, chol } => {
                let d = mean.len();
                mean.copy_from_slice(&s[..d]);
                chol.entries_mut().copy_from_slice(&s[d..]);
            }
            ExpertParams::Isotropic { mean, log_sigma } => {
                let d = mean.len();
                mean.copy_from_slice(&s[..d]);
                *log_sigma = s[d];
            }
            ExpertParams::LowRank {
                mean,
                log_sigma,
                factor,
            } => {
                let d = mean.len();
                mean.copy_from_slice(&s[..d]);
                log_sigma.copy_from_slice(&s[d..2 * d]);
                for (dst, src) in factor.iter_mut().zip(&s[2 * d..]) {
                    *dst = *src;
                }
            }
            ExpertParams::Scalar { mean, log_sigma } => {
                *mean = s[0];
                *log_sigma = s[1];
            }
            ExpertParams::Cdf {
                bound, log_sigma, ..
            } => {
                *bound = s[0];
                *log_sigma = s[1];
            }
            ExpertParams::UniGauss {
                inner, logit_pi, ..
            } => {
                let n = inner.n_params();
                inner.set_flat(&DVector::from_column_slice(&s[..n]))?;
                *logit_pi = s[n];
            }
            ExpertParams::Promp {
                mu_w,
                chol_w,
                log_sigma_x,
                ..
            } => {
                let n = mu_w.len();
                let t = CholFactor::len(n);
                mu_w.copy_from_slice(&s[..n]);
                chol_w.entries_mut().copy_from_slice(&s[n..n + t]);
                *log_sigma_x = s[n + t];
            }
        }
        Ok(())
    }

    /// Field class of each flat parameter entry, in layout order.
    pub fn field_spans(&self) -> Vec<(ParamField, std::ops::Range<usize>)> {
        match self {
            ExpertParams::Gaussian { mean, .. } => {
                let d = mean.len();
                vec![
                    (ParamField::Location, 0..d),
                    (ParamField::Scale, d..d + CholFactor::len(d)),
                ]
            }
            ExpertParams::Isotropic { mean, .. } => {
                let d = mean.len();
                vec![(ParamField::Location, 0..d), (ParamField::Scale, d..d + 1)]
            }
            ExpertParams::LowRank { mean, factor, .. } => {
                let d = mean.len();
                let n = 2 * d + factor.nrows() * factor.ncols();
                vec![(ParamField::Location, 0..d), (ParamField::Scale, d..n)]
            }
            ExpertParams::Scalar { .. } | ExpertParams::Cdf { .. } => vec![
                (ParamField::Location, 0..1),
                (ParamField::Scale, 1..2),
            ],
            ExpertParams::UniGauss { inner, .. } => {
                let mut spans = inner.field_spans();
                let n = inner.n_params();
                spans.push((ParamField::MixWeight, n..n + 1));
                spans
            }
            ExpertParams::Promp { mu_w, .. } => {
                let n = mu_w.len();
                let t = CholFactor::len(n);
                vec![
                    (ParamField::Location, 0..n),
                    (ParamField::Scale, n..n + t + 1),
                ]
            }
        }
    }

    /// Same family with every standard deviation multiplied by `c`.
    pub fn inflated(&self, c: f64) -> ExpertParams {
        match self {
            ExpertParams::Gaussian { mean, chol } => ExpertParams::Gaussian {
                mean: mean.clone(),
                chol: chol.scale(c),
            },
            ExpertParams::Isotropic { mean, log_sigma } => ExpertParams::Isotropic {
                mean: mean.clone(),
                log_sigma: log_sigma + c.ln(),
            },
            ExpertParams::LowRank {
                mean,
                log_sigma,
                factor,
            } => ExpertParams::LowRank {
                mean: mean.clone(),
                log_sigma: log_sigma.iter().map(|s| s + c.ln()).collect(),
                factor: factor * c,
            },
            ExpertParams::Scalar { mean, log_sigma } => ExpertParams::Scalar {
                mean: *mean,
                log_sigma: log_sigma + c.ln(),
            },
            ExpertParams::Cdf {
                bound,
                log_sigma,
                direction,
            } => ExpertParams::Cdf {
                bound: *bound,
                log_sigma: log_sigma + c.ln(),
                direction: *direction,
            },
            ExpertParams::UniGauss {
                inner,
                logit_pi,
                inflate,
            } => ExpertParams::UniGauss {
                inner: Box::new(inner.inflated(c)),
                logit_pi: *logit_pi,
                inflate: *inflate,
            },
            ExpertParams::Promp {
                mu_w,
                chol_w,
                log_sigma_x,
                basis,
            } => ExpertParams::Promp {
                mu_w: mu_w.clone(),
                chol_w: chol_w.scale(c),
                log_sigma_x: log_sigma_x + c.ln(),
                basis: basis.clone(),
            },
        }
    }

    /// Raise all log-stored standard deviations to at least `min_log`.
    pub fn clamp_scales(&mut self, min_log: f64) {
        match self {
            ExpertParams::Gaussian { chol, .. } => clamp_chol_diag(chol, min_log),
            ExpertParams::Isotropic { log_sigma, .. }
            | ExpertParams::Scalar { log_sigma, .. }
            | ExpertParams::Cdf { log_sigma, .. } => {
                *log_sigma = log_sigma.max(min_log);
            }
            ExpertParams::LowRank { log_sigma, .. } => {
                for s in log_sigma.iter_mut() {
                    *s = s.max(min_log);
                }
            }
            ExpertParams::UniGauss { inner, .. } => inner.clamp_scales(min_log),
            ExpertParams::Promp {
                chol_w,
                log_sigma_x,
                ..
            } => {
                clamp_chol_diag(chol_w, min_log);
                *log_sigma_x = log_sigma_x.max(min_log);
            }
        }
    }

    /// d(inflated entry)/d(base entry) for each flat slot: 1 for entries in
    /// log storage, `c` for linearly stored ones.
    fn inflation_chain(&self, c: f64) -> DVector<f64> {
        let mut f = DVector::from_element(self.n_params(), 1.0);
        match self {
            ExpertParams::Gaussian { mean, chol } => {
                let d = mean.len();
                for r in 0..chol.dim() {
                    for col in 0..r {
                        f[d + CholFactor::idx(r, col)] = c;
                    }
                }
            }
            ExpertParams::LowRank { mean, factor, .. } => {
                let d = mean.len();
                for i in 0..factor.nrows() * factor.ncols() {
                    f[2 * d + i] = c;
                }
            }
            ExpertParams::UniGauss { inner, .. } => {
                let fi = inner.inflation_chain(c);
                for i in 0..fi.len() {
                    f[i] = fi[i];
                }
            }
            ExpertParams::Promp { mu_w, chol_w, .. } => {
                let n = mu_w.len();
                for r in 0..chol_w.dim() {
                    for col in 0..r {
                        f[n + CholFactor::idx(r, col)] = c;
                    }
                }
            }
            _ => {}
        }
        f
    }

    /// Gradient of the log-density with respect to the flat parameters.
    pub fn grad_params(&self, y: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_dim(y)?;
        Ok(match self {
            ExpertParams::Gaussian { mean, chol } => {
                let r = y - DVector::from_column_slice(mean);
                let (_, z, alpha) = chol.gauss_eval(&r);
                let mut g = Vec::with_capacity(self.n_params());
                g.extend(alpha.iter());
                g.extend(chol.grad_entries(&z, &alpha));
                DVector::from_vec(g)
            }
            ExpertParams::Isotropic { mean, log_sigma } => {
                let r = y - DVector::from_column_slice(mean);
                let d = mean.len() as f64;
                let s2 = (2.0 * log_sigma).exp();
                let mut g = Vec::with_capacity(self.n_params());
                g.extend((&r / s2).iter());
                g.push(r.norm_squared() / s2 - d);
                DVector::from_vec(g)
            }
            ExpertParams::LowRank {
                mean,
                log_sigma,
                factor,
            } => {
                let r = y - DVector::from_column_slice(mean);
                let cov = low_rank_cov(log_sigma, factor);
                let prec = precision_of(&cov);
                let alpha = &prec * &r;
                let outer = &alpha * alpha.transpose() - prec;
                let mut g = Vec::with_capacity(self.n_params());
                g.extend(alpha.iter());
                for (i, s) in log_sigma.iter().enumerate() {
                    g.push(outer[(i, i)] * (2.0 * s).exp());
                }
                let gf = &outer * factor;
                g.extend(gf.iter());
                DVector::from_vec(g)
            }
            ExpertParams::Scalar { mean, log_sigma } => {
                let s2 = (2.0 * log_sigma).exp();
                let r = y[0] - mean;
                DVector::from_vec(vec![r / s2, r * r / s2 - 1.0])
            }
            ExpertParams::Cdf {
                bound,
                log_sigma,
                direction,
            } => {
                let z = cdf_z(y[0], *bound, *log_sigma, *direction);
                let ratio = ndtr_ratio(z);
                let dzdb = match direction {
                    Direction::Le => (-log_sigma).exp(),
                    Direction::Ge => -(-log_sigma).exp(),
                };
                DVector::from_vec(vec![ratio * dzdb, -ratio * z])
            }
            ExpertParams::UniGauss {
                inner,
                logit_pi,
                inflate,
            } => {
                let (la, lb) = uni_gauss_branches(inner, *logit_pi, *inflate, y)?;
                let lp = log_sum_exp2(la, lb);
                let wa = (la - lp).exp();
                let wb = (lb - lp).exp();
                let pi = sigmoid(*logit_pi);
                let flat = inner.inflated(*inflate);
                let chain = inner.inflation_chain(*inflate);
                let gi = inner.grad_params(y)?;
                let gu = flat.grad_params(y)?.component_mul(&chain);
                let mut g = Vec::with_capacity(self.n_params());
                g.extend((wa * gi + wb * gu).iter());
                g.push(wa * (1.0 - pi) - wb * pi);
                DVector::from_vec(g)
            }
            ExpertParams::Promp {
                mu_w,
                chol_w,
                log_sigma_x,
                basis,
            } => {
                let nw = mu_w.len();
                let mu = DVector::from_column_slice(mu_w);
                let sw = chol_w.covariance();
                let sx2 = (2.0 * log_sigma_x).exp();
                let lw = chol_w.lower();
                let mut g_mu = DVector::zeros(nw);
                let mut g_l = DMatrix::zeros(nw, nw);
                let mut g_sx = 0.0;
                let d_obs = basis.obs_dim();
                for (t, psi) in basis.mats.iter().enumerate() {
                    let yt = y.rows(t * d_obs, d_obs).into_owned();
                    let (mean, cov) = promp_marginal(psi, &mu, &sw, log_sigma_x.exp());
                    let prec = precision_of(&cov);
                    let alpha = &prec * (yt - mean);
                    let outer = &alpha * alpha.transpose() - &prec;
                    g_mu += psi * &alpha;
                    g_l += psi * &outer * psi.transpose() * &lw;
                    g_sx += outer.trace() * sx2;
                }
                let mut g = Vec::with_capacity(self.n_params());
                g.extend(g_mu.iter());
                for r in 0..nw {
                    for c in 0..=r {
                        let v = g_l[(r, c)];
                        if r == c {
                            let ell = chol_w.entries()[CholFactor::idx(r, r)].exp();
                            g.push(v * ell);
                        } else {
                            g.push(v);
                        }
                    }
                }
                g.push(g_sx);
                DVector::from_vec(g)
            }
        })
    }

    fn promp_steps(
        &self,
        y: &DVector<f64>,
    ) -> Result<Vec<(DVector<f64>, DVector<f64>, CholFactor)>> {
        let ExpertParams::Promp {
            mu_w,
            chol_w,
            log_sigma_x,
            basis,
        } = self
        else {
            return Err(Error::Invalid("not a trajectory expert".into()));
        };
        let mu = DVector::from_column_slice(mu_w);
        let sw = chol_w.covariance();
        let d_obs = basis.obs_dim();
        let mut out = Vec::with_capacity(basis.n_steps());
        for (t, psi) in basis.mats.iter().enumerate() {
            let yt = y.rows(t * d_obs, d_obs).into_owned();
            let (mean, cov) = promp_marginal(psi, &mu, &sw, log_sigma_x.exp());
            out.push((yt, mean, CholFactor::from_spd(&cov)?));
        }
        Ok(out)
    }
}

fn clamp_chol_diag(chol: &mut CholFactor, min_log: f64) {
    let dim = chol.dim();
    for r in 0..dim {
        let i = CholFactor::idx(r, r);
        let e = &mut chol.entries_mut()[i];
        *e = e.max(min_log);
    }
}

fn low_rank_cov(log_sigma: &[f64], factor: &DMatrix<f64>) -> DMatrix<f64> {
    let d = log_sigma.len();
    let mut cov = factor * factor.transpose();
    for i in 0..d {
        cov[(i, i)] += (2.0 * log_sigma[i]).exp();
    }
    cov
}

fn precision_of(cov: &DMatrix<f64>) -> DMatrix<f64> {
    cov.clone()
        .cholesky()
        .map(|c| c.inverse())
        .unwrap_or_else(|| {
            let d = cov.nrows();
            let damped = cov + DMatrix::identity(d, d) * 1e-12;
            damped.cholesky().expect("damped covariance").inverse()
        })
}

fn cdf_z(x: f64, bound: f64, log_sigma: f64, direction: Direction) -> f64 {
    let s = log_sigma.exp();
    match direction {
        Direction::Le => (bound - x) / s,
        Direction::Ge => (x - bound) / s,
    }
}

fn uni_gauss_branches(
    inner: &ExpertParams,
    logit_pi: f64,
    inflate: f64,
    y: &DVector<f64>,
) -> Result<(f64, f64)> {
    let pi = sigmoid(logit_pi);
    let flat = inner.inflated(inflate);
    let la = pi.max(1e-300).ln() + inner.logpdf(y)?;
    let lb = (1.0 - pi).max(1e-300).ln() + flat.logpdf(y)?;
    Ok((la, lb))
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn log_sum_exp2(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}

pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// log of the standard normal CDF, stable in the far left tail.
pub fn log_ndtr(z: f64) -> f64 {
    if z > -30.0 {
        let phi = 0.5 * statrs::function::erf::erfc(-z / std::f64::consts::SQRT_2);
        if z > 6.0 {
            // ln(1 - eps) with eps computed from the complementary side
            let eps = 0.5 * statrs::function::erf::erfc(z / std::f64::consts::SQRT_2);
            (-eps).ln_1p()
        } else {
            phi.ln()
        }
    } else {
        // asymptotic expansion of the Mills ratio
        let z2 = z * z;
        -0.5 * z2 - (-z).ln() - 0.5 * LN_2PI + (1.0 - 1.0 / z2 + 3.0 / (z2 * z2)).ln()
    }
}

/// phi(z) / Phi(z), the score of the normal CDF.
pub fn ndtr_ratio(z: f64) -> f64 {
    let log_phi = -0.5 * z * z - 0.5 * LN_2PI;
    (log_phi - log_ndtr(z)).exp()
}

/// Family descriptors for fits and model construction.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum ExpertFamily {
    Gaussian { dim: usize },
    Isotropic { dim: usize },
    LowRank { dim: usize, rank: usize },
    Scalar,
    Cdf { direction: Direction },
    UniGauss { inner: Box<ExpertFamily>, inflate: f64 },
    Promp { n_basis: usize, n_steps: usize, obs_dim: usize },
}

impl ExpertFamily {
    pub fn dim(&self) -> usize {
        match self {
            ExpertFamily::Gaussian { dim }
            | ExpertFamily::Isotropic { dim }
            | ExpertFamily::LowRank { dim, .. } => *dim,
            ExpertFamily::Scalar | ExpertFamily::Cdf { .. } => 1,
            ExpertFamily::UniGauss { inner, .. } => inner.dim(),
            ExpertFamily::Promp {
                n_steps, obs_dim, ..
            } => n_steps * obs_dim,
        }
    }
}

/// Moment-based in-family fit of `rows` (one observation per row).
pub fn mle_fit(family: &ExpertFamily, rows: &DMatrix<f64>) -> Result<ExpertParams> {
    let n = rows.nrows();
    if rows.ncols() != family.dim() {
        return Err(Error::Dimension(format!(
            "family of dim {} fit on rows of dim {}",
            family.dim(),
            rows.ncols()
        )));
    }
    match family {
        ExpertFamily::Gaussian { dim } => {
            if n < dim + 1 {
                return Err(Error::TooFewSamples { need: dim + 1, got: n });
            }
            let (mean, cov) = sample_moments(rows);
            let cov = floor_spd(&cov, SIGMA_FLOOR * SIGMA_FLOOR);
            Ok(ExpertParams::Gaussian {
                mean: mean.as_slice().to_vec(),
                chol: CholFactor::from_spd(&cov)?,
            })
        }
        ExpertFamily::Isotropic { dim } => {
            if n < 2 {
                return Err(Error::TooFewSamples { need: 2, got: n });
            }
            let (mean, cov) = sample_moments(rows);
            let var = (cov.trace() / *dim as f64).max(SIGMA_FLOOR * SIGMA_FLOOR);
            Ok(ExpertParams::Isotropic {
                mean: mean.as_slice().to_vec(),
                log_sigma: 0.5 * var.ln(),
            })
        }
        ExpertFamily::LowRank { dim, rank } => {
            if *rank >= *dim {
                return Err(Error::Invalid(format!(
                    "low-rank factor rank {rank} must be below dim {dim}"
                )));
            }
            if n < dim + 1 {
                return Err(Error::TooFewSamples { need: dim + 1, got: n });
            }
            let (mean, cov) = sample_moments(rows);
            let eig = nalgebra::SymmetricEigen::new(cov);
            let mut idx: Vec<usize> = (0..*dim).collect();
            idx.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
            let residual: f64 = idx[*rank..]
                .iter()
                .map(|&i| eig.eigenvalues[i].max(0.0))
                .sum::<f64>()
                / (*dim - *rank) as f64;
            let var = residual.max(SIGMA_FLOOR * SIGMA_FLOOR);
            let mut factor = DMatrix::zeros(*dim, *rank);
            for (c, &i) in idx[..*rank].iter().enumerate() {
                let scale = (eig.eigenvalues[i] - var).max(0.0).sqrt();
                factor.set_column(c, &(eig.eigenvectors.column(i) * scale));
            }
            Ok(ExpertParams::LowRank {
                mean: mean.as_slice().to_vec(),
                log_sigma: vec![0.5 * var.ln(); *dim],
                factor,
            })
        }
        ExpertFamily::Scalar => {
            if n < 2 {
                return Err(Error::TooFewSamples { need: 2, got: n });
            }
            let (mean, cov) = sample_moments(rows);
            let var = cov[(0, 0)].max(SIGMA_FLOOR * SIGMA_FLOOR);
            Ok(ExpertParams::Scalar {
                mean: mean[0],
                log_sigma: 0.5 * var.ln(),
            })
        }
        ExpertFamily::Cdf { direction } => {
            if n < 2 {
                return Err(Error::TooFewSamples { need: 2, got: n });
            }
            let (_, cov) = sample_moments(rows);
            let sigma = cov[(0, 0)].sqrt().max(SIGMA_FLOOR);
            let bound = match direction {
                Direction::Le => rows.column(0).max(),
                Direction::Ge => rows.column(0).min(),
            };
            Ok(ExpertParams::Cdf {
                bound,
                log_sigma: sigma.ln(),
                direction: *direction,
            })
        }
        ExpertFamily::UniGauss { inner, inflate } => {
            if *inflate <= 1.0 {
                return Err(Error::Invalid("inflate must exceed 1".into()));
            }
            Ok(ExpertParams::UniGauss {
                inner: Box::new(mle_fit(inner, rows)?),
                logit_pi: 0.0,
                inflate: *inflate,
            })
        }
        ExpertFamily::Promp {
            n_basis,
            n_steps,
            obs_dim,
        } => {
            if n < 2 {
                return Err(Error::TooFewSamples { need: 2, got: n });
            }
            let basis = PrompBasis::normalized_rbf(*n_basis, *n_steps, *obs_dim)?;
            let nw = basis.n_weights();
            // stacked regression matrix: rows are psi_t^T per observation dim
            let mut big = DMatrix::zeros(n_steps * obs_dim, nw);
            for (t, psi) in basis.mats.iter().enumerate() {
                big.view_mut((t * obs_dim, 0), (*obs_dim, nw))
                    .copy_from(&psi.transpose());
            }
            let gram = big.transpose() * &big + 1e-6 * DMatrix::identity(nw, nw);
            let gram_inv = precision_of(&gram);
            let mut ws = DMatrix::zeros(n, nw);
            let mut resid = 0.0;
            for i in 0..n {
                let yi = rows.row(i).transpose();
                let w = &gram_inv * (big.transpose() * &yi);
                resid += (&big * &w - &yi).norm_squared();
                ws.row_mut(i).copy_from(&w.transpose());
            }
            let (mu_w, cov_w) = sample_moments(&ws);
            let cov_w = floor_spd(&cov_w, SIGMA_FLOOR * SIGMA_FLOOR);
            let sigma_x = (resid / (n * n_steps * obs_dim) as f64)
                .sqrt()
                .max(SIGMA_FLOOR);
            Ok(ExpertParams::Promp {
                mu_w: mu_w.as_slice().to_vec(),
                chol_w: CholFactor::from_spd(&cov_w)?,
                log_sigma_x: sigma_x.ln(),
                basis,
            })
        }
    }
}

/// Mean and (1/N-normalized) covariance of the rows.
pub fn sample_moments(rows: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = rows.nrows();
    let d = rows.ncols();
    let mut mean = DVector::zeros(d);
    for i in 0..n {
        mean += rows.row(i).transpose();
    }
    mean /= n as f64;
    let mut cov = DMatrix::zeros(d, d);
    for i in 0..n {
        let r = rows.row(i).transpose() - &mean;
        cov += &r * r.transpose();
    }
    cov /= n as f64;
    (mean, cov)
}

/// Raise eigenvalues to at least `min_eig`.
pub fn floor_spd(cov: &DMatrix<f64>, min_eig: f64) -> DMatrix<f64> {
    let eig = nalgebra::SymmetricEigen::new(cov.clone());
    let vals = eig.eigenvalues.map(|v| v.max(min_eig));
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}
