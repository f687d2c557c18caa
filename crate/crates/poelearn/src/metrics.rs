//! Distribution comparison metrics.
//!
//! Low-dimensional densities are compared with the alpha = 1/2 divergence
//! on a trapezoid grid; it equals minus twice the log Bhattacharyya
//! coefficient, so identical densities score zero and disjoint ones blow
//! up. Sample sets are compared with the unbiased RBF MMD estimator, which
//! can legitimately go negative. Above three dimensions grids are hopeless
//! and the divergence is estimated by importance sampling against mixture
//! proposals instead, reported with its Monte Carlo error.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experts::log_sum_exp;
use crate::variational::Mixture;

/// Density floor applied after grid normalization.
const GRID_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct GridDim {
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
}

/// Rectangular evaluation grid, at most three dimensions.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GridSpec {
    pub dims: Vec<GridDim>,
}

impl GridSpec {
    pub fn new(dims: Vec<GridDim>) -> Result<Self> {
        if dims.is_empty() || dims.len() > 3 {
            return Err(Error::Invalid(format!(
                "grids support 1 to 3 dimensions, got {}",
                dims.len()
            )));
        }
        for d in &dims {
            if !(d.lo < d.hi) {
                return Err(Error::Invalid(format!(
                    "grid bounds [{}, {}] are not increasing",
                    d.lo, d.hi
                )));
            }
            if d.n < 16 {
                return Err(Error::Invalid(format!(
                    "grid needs at least 16 points per dimension, got {}",
                    d.n
                )));
            }
        }
        Ok(Self { dims })
    }

    pub fn dim(&self) -> usize {
        self.dims.len()
    }

    pub fn n_points(&self) -> usize {
        self.dims.iter().map(|d| d.n).product()
    }

    fn axis(&self, k: usize) -> (f64, f64) {
        let d = &self.dims[k];
        (d.lo, (d.hi - d.lo) / (d.n - 1) as f64)
    }

    /// Calls `f` with every grid point and its trapezoid quadrature weight.
    pub fn for_each_point<F: FnMut(&DVector<f64>, f64)>(&self, mut f: F) {
        let dim = self.dim();
        let mut idx = vec![0usize; dim];
        let mut x = DVector::zeros(dim);
        loop {
            let mut w = 1.0;
            for k in 0..dim {
                let (lo, h) = self.axis(k);
                x[k] = lo + h * idx[k] as f64;
                let edge = idx[k] == 0 || idx[k] == self.dims[k].n - 1;
                w *= if edge { 0.5 * h } else { h };
            }
            f(&x, w);
            let mut k = 0;
            loop {
                idx[k] += 1;
                if idx[k] < self.dims[k].n {
                    break;
                }
                idx[k] = 0;
                k += 1;
                if k == dim {
                    return;
                }
            }
        }
    }
}

/// Normalizes log-density values against the grid weights, in log space.
fn normalize_on_grid(logs: &mut [f64], weights: &[f64]) -> Result<()> {
    let shifted: Vec<f64> = logs
        .iter()
        .zip(weights)
        .map(|(l, w)| l + w.ln())
        .collect();
    let log_z = log_sum_exp(&shifted);
    if !log_z.is_finite() {
        return Err(Error::Numerical(
            "density vanishes everywhere on the grid".into(),
        ));
    }
    for l in logs.iter_mut() {
        *l -= log_z;
    }
    Ok(())
}

/// Alpha = 1/2 divergence between two unnormalized log-densities, evaluated
/// on `grid` with trapezoid weights. Both densities are normalized on the
/// grid first, so constant offsets in either argument cancel.
pub fn alpha_half_divergence<P, Q>(log_p: P, log_q: Q, grid: &GridSpec) -> Result<f64>
where
    P: Fn(&DVector<f64>) -> f64,
    Q: Fn(&DVector<f64>) -> f64,
{
    let n = grid.n_points();
    let mut lp = Vec::with_capacity(n);
    let mut lq = Vec::with_capacity(n);
    let mut weights = Vec::with_capacity(n);
    grid.for_each_point(|x, w| {
        lp.push(log_p(x));
        lq.push(log_q(x));
        weights.push(w);
    });
    if lp.iter().chain(lq.iter()).any(|v| v.is_nan() || *v == f64::INFINITY) {
        return Err(Error::Numerical("density not evaluable on the grid".into()));
    }
    normalize_on_grid(&mut lp, &weights)?;
    normalize_on_grid(&mut lq, &weights)?;
    let mut terms = Vec::with_capacity(n);
    for i in 0..n {
        let p = lp[i].exp().max(GRID_FLOOR);
        let q = lq[i].exp().max(GRID_FLOOR);
        terms.push((p * q).sqrt() * weights[i]);
    }
    let bc: f64 = terms.iter().sum();
    Ok(-2.0 * bc.ln())
}

/// Unbiased MMD^2 with the RBF kernel exp(-gamma * ||a - b||^2) between two
/// row-major sample sets. Unbiasedness makes small negative values normal.
pub fn mmd_u(x: &DMatrix<f64>, y: &DMatrix<f64>, gamma: f64) -> Result<f64> {
    if x.nrows() < 2 || y.nrows() < 2 {
        return Err(Error::TooFewSamples {
            need: 2,
            got: x.nrows().min(y.nrows()),
        });
    }
    if x.ncols() != y.ncols() {
        return Err(Error::Dimension(format!(
            "sample dims {} and {}",
            x.ncols(),
            y.ncols()
        )));
    }
    if !(gamma > 0.0) {
        return Err(Error::Invalid(format!("kernel width {gamma} must be positive")));
    }
    let k = |a: &DMatrix<f64>, i: usize, b: &DMatrix<f64>, j: usize| {
        let mut d2 = 0.0;
        for c in 0..a.ncols() {
            let d = a[(i, c)] - b[(j, c)];
            d2 += d * d;
        }
        (-gamma * d2).exp()
    };
    let (n, m) = (x.nrows(), y.nrows());
    let mut sxx = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            sxx += k(x, i, x, j);
        }
    }
    let mut syy = 0.0;
    for i in 0..m {
        for j in i + 1..m {
            syy += k(y, i, y, j);
        }
    }
    let mut sxy = 0.0;
    for i in 0..n {
        for j in 0..m {
            sxy += k(x, i, y, j);
        }
    }
    Ok(2.0 * sxx / (n * (n - 1)) as f64 + 2.0 * syy / (m * (m - 1)) as f64
        - 2.0 * sxy / (n * m) as f64)
}

/// 95% permutation threshold for |mmd| under the null that both sets share a
/// distribution: the pooled samples are reshuffled and the statistic
/// recomputed `n_perms` times.
pub fn mmd_permutation_threshold(
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    gamma: f64,
    n_perms: usize,
    seed: u64,
) -> Result<f64> {
    use rand::seq::SliceRandom;
    let (n, m) = (x.nrows(), y.nrows());
    let d = x.ncols();
    let mut pooled = DMatrix::zeros(n + m, d);
    pooled.view_mut((0, 0), (n, d)).copy_from(x);
    pooled.view_mut((n, 0), (m, d)).copy_from(y);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..n + m).collect();
    let mut stats = Vec::with_capacity(n_perms);
    for _ in 0..n_perms {
        idx.shuffle(&mut rng);
        let take = |rows: &[usize]| {
            DMatrix::from_fn(rows.len(), d, |r, c| pooled[(rows[r], c)])
        };
        let stat = mmd_u(&take(&idx[..n]), &take(&idx[n..]), gamma)?;
        stats.push(stat.abs());
    }
    stats.sort_by(|a, b| a.partial_cmp(b).expect("finite statistics"));
    let rank = ((n_perms as f64) * 0.95).ceil() as usize - 1;
    Ok(stats[rank.min(n_perms - 1)])
}

/// Importance-sampled divergence with its Monte Carlo error.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct IsDivergence {
    pub value: f64,
    pub mc_std: f64,
}

const IS_BATCHES: usize = 20;

/// Alpha = 1/2 divergence in spaces too large for grids: both unnormalized
/// densities are integrated by importance sampling against the uniform
/// blend of `proposals` (equal draws from each), normalizers included, so
/// neither argument needs to be normalized. The error is the standard
/// deviation of batch-mean estimates.
pub fn alpha_half_divergence_is<P, Q>(
    log_p: P,
    log_q: Q,
    proposals: &[&Mixture],
    n: usize,
    seed: u64,
) -> Result<IsDivergence>
where
    P: Fn(&DVector<f64>) -> f64,
    Q: Fn(&DVector<f64>) -> f64,
{
    if proposals.is_empty() {
        return Err(Error::Invalid("need at least one proposal".into()));
    }
    let n_prop = proposals.len();
    let per = (n / (n_prop * IS_BATCHES)).max(2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut batch_values = Vec::with_capacity(IS_BATCHES);
    let mut log_bc_all = Vec::new();
    let mut log_zp_all = Vec::new();
    let mut log_zq_all = Vec::new();
    for _ in 0..IS_BATCHES {
        let mut log_bc = Vec::with_capacity(per * n_prop);
        let mut log_zp = Vec::with_capacity(per * n_prop);
        let mut log_zq = Vec::with_capacity(per * n_prop);
        for mix in proposals {
            let draws = mix.sample(per, &mut rng);
            for r in 0..per {
                let q_pt = draws.row(r).transpose();
                let lm = log_sum_exp(
                    &proposals
                        .iter()
                        .map(|m| m.logpdf(&q_pt))
                        .collect::<Vec<_>>(),
                ) - (n_prop as f64).ln();
                let lp = log_p(&q_pt);
                let lq = log_q(&q_pt);
                if lm.is_nan() || lp.is_nan() || lq.is_nan() {
                    return Err(Error::Numerical("density not evaluable at a draw".into()));
                }
                log_bc.push(0.5 * (lp + lq) - lm);
                log_zp.push(lp - lm);
                log_zq.push(lq - lm);
            }
        }
        let count = (per * n_prop) as f64;
        let b = log_sum_exp(&log_bc) - count.ln();
        let zp = log_sum_exp(&log_zp) - count.ln();
        let zq = log_sum_exp(&log_zq) - count.ln();
        batch_values.push(-2.0 * (b - 0.5 * zp - 0.5 * zq));
        log_bc_all.extend(log_bc);
        log_zp_all.extend(log_zp);
        log_zq_all.extend(log_zq);
    }
    let total = log_bc_all.len() as f64;
    let b = log_sum_exp(&log_bc_all) - total.ln();
    let zp = log_sum_exp(&log_zp_all) - total.ln();
    let zq = log_sum_exp(&log_zq_all) - total.ln();
    let value = -2.0 * (b - 0.5 * zp - 0.5 * zq);
    if !value.is_finite() {
        return Err(Error::Numerical("importance estimate diverged".into()));
    }
    let mean = batch_values.iter().sum::<f64>() / IS_BATCHES as f64;
    let var = batch_values
        .iter()
        .map(|v| (v - mean) * (v - mean))
        .sum::<f64>()
        / (IS_BATCHES - 1) as f64;
    Ok(IsDivergence {
        value,
        mc_std: (var / IS_BATCHES as f64).sqrt(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experts::{CholFactor, LN_2PI};
    use approx::assert_relative_eq;
    use rand_distr::{Distribution, StandardNormal};

    fn grid1(lo: f64, hi: f64, n: usize) -> GridSpec {
        GridSpec::new(vec![GridDim { lo, hi, n }]).unwrap()
    }

    fn log_normal(mu: f64, sigma: f64) -> impl Fn(&DVector<f64>) -> f64 {
        move |x: &DVector<f64>| {
            let z = (x[0] - mu) / sigma;
            -0.5 * z * z - sigma.ln() - 0.5 * LN_2PI
        }
    }

    #[test]
    fn grid_validation_rejects_bad_specs() {
        assert!(GridSpec::new(vec![]).is_err());
        assert!(GridSpec::new(vec![GridDim { lo: 1.0, hi: 0.0, n: 32 }]).is_err());
        assert!(GridSpec::new(vec![GridDim { lo: 0.0, hi: 1.0, n: 8 }]).is_err());
        let d = GridDim { lo: 0.0, hi: 1.0, n: 16 };
        assert!(GridSpec::new(vec![d; 4]).is_err());
        assert!(GridSpec::new(vec![d; 3]).is_ok());
    }

    #[test]
    fn trapezoid_weights_integrate_a_constant() {
        let grid = GridSpec::new(vec![
            GridDim { lo: -1.0, hi: 2.0, n: 31 },
            GridDim { lo: 0.0, hi: 0.5, n: 16 },
        ])
        .unwrap();
        let mut total = 0.0;
        grid.for_each_point(|_, w| total += w);
        assert_relative_eq!(total, 3.0 * 0.5, epsilon = 1e-12);
    }

    #[test]
    fn identical_densities_have_zero_divergence() {
        let grid = grid1(-6.0, 6.0, 400);
        let d = alpha_half_divergence(log_normal(0.3, 0.8), log_normal(0.3, 0.8), &grid).unwrap();
        assert!(d.abs() <= 1e-6, "{d}");
    }

    #[test]
    fn shifted_unit_gaussians_match_the_closed_form() {
        // Bhattacharyya distance of equal-variance normals is (dmu)^2 / 8,
        // so the divergence is (dmu)^2 / 4.
        let grid = grid1(-8.0, 9.0, 2000);
        let d = alpha_half_divergence(log_normal(0.0, 1.0), log_normal(1.0, 1.0), &grid).unwrap();
        assert_relative_eq!(d, 0.25, epsilon = 1e-3);
    }

    #[test]
    fn disjoint_supports_score_at_least_twenty() {
        let left = |x: &DVector<f64>| if x[0] < 0.0 { 0.0 } else { f64::NEG_INFINITY };
        let right = |x: &DVector<f64>| if x[0] > 0.0 { 0.0 } else { f64::NEG_INFINITY };
        let grid = grid1(-1.0, 1.0, 200);
        let d = alpha_half_divergence(left, right, &grid).unwrap();
        assert!(d >= 20.0, "{d}");
    }

    #[test]
    fn divergence_is_symmetric() {
        let grid = grid1(-7.0, 7.0, 500);
        let a = alpha_half_divergence(log_normal(-0.5, 0.7), log_normal(1.1, 1.4), &grid).unwrap();
        let b = alpha_half_divergence(log_normal(1.1, 1.4), log_normal(-0.5, 0.7), &grid).unwrap();
        assert!((a - b).abs() <= 1e-10, "{a} vs {b}");
    }

    #[test]
    fn doubling_the_grid_barely_moves_a_smooth_divergence() {
        let coarse = grid1(-8.0, 9.0, 1000);
        let fine = grid1(-8.0, 9.0, 2000);
        let d_c =
            alpha_half_divergence(log_normal(0.0, 1.0), log_normal(1.0, 1.0), &coarse).unwrap();
        let d_f =
            alpha_half_divergence(log_normal(0.0, 1.0), log_normal(1.0, 1.0), &fine).unwrap();
        assert!((d_c - d_f).abs() < 1e-3, "{d_c} vs {d_f}");
    }

    #[test]
    fn vanishing_density_is_an_error() {
        let grid = grid1(-1.0, 1.0, 64);
        let dead = |_: &DVector<f64>| f64::NEG_INFINITY;
        assert!(alpha_half_divergence(dead, log_normal(0.0, 1.0), &grid).is_err());
    }

    #[test]
    fn mmd_matches_the_hand_computed_example() {
        let x = DMatrix::from_column_slice(2, 1, &[0.0, 0.0]);
        let y = DMatrix::from_column_slice(2, 1, &[1.0, 1.0]);
        let v = mmd_u(&x, &y, 0.1).unwrap();
        assert_relative_eq!(v, 2.0 * (1.0 - (-0.1f64).exp()), epsilon = 1e-15);
        assert_relative_eq!(v, 0.19032516392808096, epsilon = 1e-15);
    }

    #[test]
    fn mmd_of_identical_sets_is_zero() {
        let x = DMatrix::from_column_slice(2, 1, &[0.0, 0.0]);
        assert_eq!(mmd_u(&x, &x.clone(), 0.1).unwrap(), 0.0);
    }

    #[test]
    fn mmd_is_translation_invariant() {
        // dyadic coordinates and an integer shift keep every pairwise
        // difference bit-identical
        let x = DMatrix::from_row_slice(3, 2, &[0.25, -0.5, 1.75, 0.125, -2.25, 0.75]);
        let y = DMatrix::from_row_slice(3, 2, &[0.5, 0.5, -1.25, 2.0, 0.375, -0.625]);
        let shift = |m: &DMatrix<f64>| m.map(|v| v + 3.0);
        let a = mmd_u(&x, &y, 0.1).unwrap();
        let b = mmd_u(&shift(&x), &shift(&y), 0.1).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mmd_is_symmetric() {
        let x = DMatrix::from_row_slice(3, 1, &[0.1, 0.4, -0.2]);
        let y = DMatrix::from_row_slice(4, 1, &[0.3, -0.1, 0.7, 0.0]);
        let a = mmd_u(&x, &y, 0.5).unwrap();
        let b = mmd_u(&y, &x, 0.5).unwrap();
        assert!((a - b).abs() <= 1e-12);
    }

    #[test]
    fn mmd_rejects_degenerate_input() {
        let x = DMatrix::from_row_slice(1, 1, &[0.0]);
        let y = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        assert!(mmd_u(&x, &y, 0.1).is_err());
        let x2 = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 1.0, 1.0]);
        assert!(mmd_u(&x2, &y, 0.1).is_err());
        assert!(mmd_u(&y, &y.clone(), 0.0).is_err());
    }

    #[test]
    fn same_distribution_stays_below_the_permutation_threshold() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut below = 0;
        let trials = 50;
        for _ in 0..trials {
            let draw = |rng: &mut ChaCha8Rng| {
                DMatrix::from_fn(500, 2, |_, _| StandardNormal.sample(rng))
            };
            let x = draw(&mut rng);
            let y = draw(&mut rng);
            let stat = mmd_u(&x, &y, 0.1).unwrap().abs();
            let thr = mmd_permutation_threshold(&x, &y, 0.1, 40, 99).unwrap();
            if stat < thr {
                below += 1;
            }
        }
        assert!(below >= 45, "{below}/{trials} below threshold");
    }

    fn mixture2(mu: [f64; 2], sigma: f64) -> Mixture {
        Mixture {
            logits: vec![0.0],
            means: vec![DVector::from_column_slice(&mu)],
            chols: vec![CholFactor::from_diag_stds(&[sigma, sigma])],
        }
    }

    fn log_normal2(mu: [f64; 2], sigma: f64) -> impl Fn(&DVector<f64>) -> f64 {
        move |x: &DVector<f64>| {
            let dx = (x[0] - mu[0]) / sigma;
            let dy = (x[1] - mu[1]) / sigma;
            -0.5 * (dx * dx + dy * dy)
        }
    }

    #[test]
    fn importance_sampling_agrees_with_the_grid_in_2d() {
        let p = log_normal2([0.0, 0.0], 1.0);
        let q = log_normal2([0.8, -0.4], 1.0);
        let grid = GridSpec::new(vec![
            GridDim { lo: -7.0, hi: 7.5, n: 300 },
            GridDim { lo: -7.5, hi: 7.0, n: 300 },
        ])
        .unwrap();
        let on_grid = alpha_half_divergence(&p, &q, &grid).unwrap();
        let prop_p = mixture2([0.0, 0.0], 1.0);
        let prop_q = mixture2([0.8, -0.4], 1.0);
        let est =
            alpha_half_divergence_is(&p, &q, &[&prop_p, &prop_q], 200_000, 13).unwrap();
        let tol = (3.0 * est.mc_std).max(1e-2);
        assert!(
            (est.value - on_grid).abs() <= tol,
            "is {} vs grid {} (tol {tol})",
            est.value,
            on_grid
        );
    }

    #[test]
    fn importance_sampling_is_zero_for_identical_densities() {
        let p = log_normal2([0.3, 0.1], 0.7);
        let prop = mixture2([0.3, 0.1], 0.8);
        let est = alpha_half_divergence_is(&p, &p, &[&prop], 100_000, 5).unwrap();
        assert!(est.value.abs() <= 1e-9, "{}", est.value);
    }

    #[test]
    fn importance_sampling_is_deterministic() {
        let p = log_normal2([0.0, 0.0], 1.0);
        let q = log_normal2([0.5, 0.5], 1.2);
        let prop = mixture2([0.2, 0.2], 1.5);
        let a = alpha_half_divergence_is(&p, &q, &[&prop], 50_000, 21).unwrap();
        let b = alpha_half_divergence_is(&p, &q, &[&prop], 50_000, 21).unwrap();
        assert_eq!(a.value, b.value);
        assert_eq!(a.mc_std, b.mc_std);
    }
}
