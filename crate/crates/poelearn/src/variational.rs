//! Mixture-of-Gaussians variational approximation of an unnormalized target.
//!
//! The fit minimizes L(lambda) = E_q[log q(x) - log p̃(x)], estimated per
//! component with the reparametrization q = mu_k + L_k eta. Minimizing L is
//! minimizing KL(q || p) up to the unknown normalizer, so L >= -log C and the
//! approximation is zero-forcing. Targets that expose only a gradient (the
//! hierarchy case) are fitted with the pathwise terms alone; mixture weights
//! stay frozen because their gradient needs density values (the computable
//! score part has zero mean).

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experts::{log_sum_exp, CholFactor, SIGMA_FLOOR};
use crate::opt::Adam;
use crate::poe::Target;

/// Mixture weight below which a component counts as dead.
const DEAD_WEIGHT: f64 = 1e-4;
/// Steps a component may stay dead before it is re-seeded.
const DEAD_PATIENCE: usize = 200;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Mixture {
    pub logits: Vec<f64>,
    pub means: Vec<DVector<f64>>,
    pub chols: Vec<CholFactor>,
}

#[derive(Clone, Copy, Debug)]
pub struct FitOptions {
    pub steps: usize,
    pub lr: f64,
    pub n_samples: usize,
    pub seed: u64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            steps: 3000,
            lr: 5e-3,
            n_samples: 64,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct FitResult {
    pub mixture: Mixture,
    /// Per-step objective estimate; NaN when the target has no density.
    pub elbo_trace: Vec<f64>,
    pub rescued_components: usize,
}

/// Resumable fit state. `Mixture::fit` drives it to completion in one go;
/// callers that interleave variational refreshes with other updates (the
/// trainer does) keep one of these per posterior and call `run` in slices.
/// Optimizer moments and the sample stream survive across calls, so n calls
/// of m steps reproduce one call of n*m steps bit for bit.
pub struct OnlineFit {
    mix: Mixture,
    adam: Adam,
    rng: ChaCha8Rng,
    n_samples: usize,
    params: DVector<f64>,
    trace: Vec<f64>,
    dead_for: Vec<usize>,
    rescued: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct ElboEstimate {
    pub value: f64,
    pub mc_std: f64,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LogNormEstimate {
    pub value: f64,
    pub ess: f64,
    pub ess_warning: bool,
}

impl OnlineFit {
    /// Learning rate for subsequent steps; optimizer moments are kept.
    /// Annealed fits drop the rate near the end to shrink the stationary
    /// jitter of the component means.
    pub fn set_lr(&mut self, lr: f64) {
        self.adam.lr = lr;
    }

    /// Relocates component k and clears its optimizer moments; the
    /// mixture weight is untouched. Callers use this to pull components
    /// out of basins they can rule out by model structure.
    pub fn move_component(&mut self, k: usize, mean: DVector<f64>, chol: CholFactor) -> Result<()> {
        let d = self.mix.dim();
        if k >= self.mix.n_components() || mean.len() != d || chol.dim() != d {
            return Err(Error::Dimension(
                "component relocation does not match the mixture".into(),
            ));
        }
        let k_n = self.mix.n_components();
        let tri = CholFactor::len(d);
        self.mix.means[k] = mean;
        self.mix.chols[k] = chol;
        self.adam.reset_range(k_n + k * (d + tri), d + tri);
        self.params = self.mix.flatten();
        self.rescued += 1;
        Ok(())
    }

    /// Translates each mean coordinate by whole multiples of its limit
    /// span back into the box. Exact relabeling for targets invariant
    /// under such shifts (joint angles entering only through sin and
    /// cos over a full circle), so optimizer moments are kept.
    pub fn wrap_means(&mut self, limits: &[[f64; 2]]) -> Result<()> {
        let d = self.mix.dim();
        if limits.len() != d {
            return Err(Error::Dimension(format!(
                "{} limits for a {d}-dimensional mixture",
                limits.len()
            )));
        }
        let k_n = self.mix.n_components();
        let tri = CholFactor::len(d);
        for k in 0..k_n {
            let off = k_n + k * (d + tri);
            for j in 0..d {
                let [lo, hi] = limits[j];
                let wrapped = (self.params[off + j] - lo).rem_euclid(hi - lo) + lo;
                self.params[off + j] = wrapped;
                self.mix.means[k][j] = wrapped;
            }
        }
        Ok(())
    }

    pub fn new(mix: Mixture, opts: &FitOptions) -> Self {
        let params = mix.flatten();
        let k_n = mix.n_components();
        OnlineFit {
            adam: Adam::new(params.len(), opts.lr),
            rng: ChaCha8Rng::seed_from_u64(opts.seed),
            n_samples: opts.n_samples,
            params,
            trace: Vec::new(),
            dead_for: vec![0; k_n],
            rescued: 0,
            mix,
        }
    }

    pub fn mixture(&self) -> &Mixture {
        &self.mix
    }

    pub fn trace(&self) -> &[f64] {
        &self.trace
    }

    pub fn into_result(self) -> FitResult {
        FitResult {
            mixture: self.mix,
            elbo_trace: self.trace,
            rescued_components: self.rescued,
        }
    }

    /// Advances the fit by `steps` iterations against `target`. The target
    /// may change between calls (the trainer moves it); the sample stream
    /// and optimizer state do not.
    pub fn run<T: Target + ?Sized>(&mut self, target: &T, steps: usize) -> Result<()> {
        if target.dim() != self.mix.dim() {
            return Err(Error::Dimension(format!(
                "mixture dim {} vs target dim {}",
                self.mix.dim(),
                target.dim()
            )));
        }
        let mix = &mut self.mix;
        let k_n = mix.n_components();
        let d = mix.dim();
        let tri = CholFactor::len(d);
        let has_logpdf = target.logpdf(&mix.means[0]).is_some();
        let s = (self.n_samples / k_n).max(1);

        for _step in 0..steps {
            let caches = mix.caches();
            let weights = mix.weights();
            let mut grad = DVector::zeros(self.params.len());
            let mut e_hat = vec![0.0; k_n];
            // best re-seed candidate: highest density, or flattest gradient
            let mut best_q: Option<(f64, DVector<f64>)> = None;

            for k in 0..k_n {
                let pi_k = weights[k];
                let w = pi_k / s as f64;
                for _ in 0..s {
                    let eta = DVector::from_fn(d, |_, _| StandardNormal.sample(&mut self.rng));
                    let q = &mix.means[k] + &caches[k].lower * eta.clone();
                    let logs = mix.component_logs(&caches, &q);
                    let lq = log_sum_exp(&logs);
                    let gp = target.grad(&q);
                    let mut gq = DVector::zeros(d);
                    for j in 0..k_n {
                        let r_j = (logs[j] - lq).exp();
                        gq += r_j * (&caches[j].prec * (&mix.means[j] - &q));
                    }
                    let dfdq = &gq - &gp;

                    // pathwise route through component k
                    let mean_off = k_n + k * (d + tri);
                    for i in 0..d {
                        grad[mean_off + i] += w * dfdq[i];
                    }
                    let chol_off = mean_off + d;
                    let entries = mix.chols[k].entries();
                    let mut idx = 0;
                    for r in 0..d {
                        for c in 0..=r {
                            let mut g = dfdq[r] * eta[c];
                            if r == c {
                                g *= entries[idx].exp();
                            }
                            grad[chol_off + idx] += w * g;
                            idx += 1;
                        }
                    }

                    // direct dependence of log q on every component
                    for j in 0..k_n {
                        let r_j = (logs[j] - lq).exp();
                        let alpha = &caches[j].prec * (&q - &mix.means[j]);
                        let m_off = k_n + j * (d + tri);
                        for i in 0..d {
                            grad[m_off + i] += w * r_j * alpha[i];
                        }
                        let z = caches[j]
                            .lower
                            .clone()
                            .solve_lower_triangular(&(&q - &mix.means[j]))
                            .expect("positive diagonal");
                        let entriesterm = mix.chols[j].grad_entries(&z, &alpha);
                        let c_off = m_off + d;
                        for (idx, g) in entriesterm.iter().enumerate() {
                            grad[c_off + idx] += w * r_j * g;
                        }
                        if has_logpdf {
                            grad[j] += w * (r_j - weights[j]);
                        }
                    }

                    if has_logpdf {
                        let lp = target.logpdf(&q).expect("density probed above");
                        e_hat[k] += (lq - lp) / s as f64;
                        let score = lp;
                        if best_q.as_ref().map_or(true, |(b, _)| score > *b) {
                            best_q = Some((score, q.clone()));
                        }
                    } else {
                        let score = -gp.norm();
                        if best_q.as_ref().map_or(true, |(b, _)| score > *b) {
                            best_q = Some((score, q.clone()));
                        }
                    }
                }
            }

            if has_logpdf {
                let l_hat: f64 = (0..k_n).map(|k| weights[k] * e_hat[k]).sum();
                for k in 0..k_n {
                    grad[k] += weights[k] * (e_hat[k] - l_hat);
                }
                self.trace.push(l_hat);
            } else {
                self.trace.push(f64::NAN);
            }

            self.adam.step(&mut self.params, &grad);
            if self.params.iter().any(|p| !p.is_finite()) {
                return Err(Error::Numerical(format!(
                    "variational fit diverged at step {}",
                    self.trace.len()
                )));
            }
            mix.unflatten(&self.params);
            for c in mix.chols.iter_mut() {
                clamp_diag(c, SIGMA_FLOOR.ln());
            }

            // dead-component bookkeeping
            let weights = mix.weights();
            for k in 0..k_n {
                if weights[k] < DEAD_WEIGHT {
                    self.dead_for[k] += 1;
                } else {
                    self.dead_for[k] = 0;
                }
                if self.dead_for[k] >= DEAD_PATIENCE {
                    if let Some((_, q)) = &best_q {
                        let live_scale = median_diag_log(mix, &weights);
                        mix.means[k] = q.clone();
                        mix.chols[k] = CholFactor::identity_scaled(d, live_scale.exp());
                        mix.logits[k] = mix.logits.iter().sum::<f64>() / k_n as f64;
                        self.adam.reset_range(k, 1);
                        self.adam.reset_range(k_n + k * (d + tri), d + tri);
                        self.dead_for[k] = 0;
                        self.rescued += 1;
                    }
                }
            }
            self.params = mix.flatten();
        }
        Ok(())
    }
}

/// Per-component quantities fixed during one gradient step.
struct CompCache {
    lower: DMatrix<f64>,
    prec: DMatrix<f64>,
    /// log of the component's normalization constant (negative).
    log_const: f64,
}

impl Mixture {
    /// K components with means uniform inside the joint-limit box and
    /// standard deviations 0.3x the box ranges.
    pub fn init_in_box(k: usize, limits: &[[f64; 2]], rng: &mut ChaCha8Rng) -> Result<Self> {
        if k == 0 || limits.is_empty() {
            return Err(Error::Invalid("mixture needs k >= 1 and dim >= 1".into()));
        }
        let mut means = Vec::with_capacity(k);
        let mut chols = Vec::with_capacity(k);
        for _ in 0..k {
            let mean = DVector::from_fn(limits.len(), |i, _| {
                rng.random_range(limits[i][0]..limits[i][1])
            });
            let stds: Vec<f64> = limits.iter().map(|l| 0.3 * (l[1] - l[0])).collect();
            means.push(mean);
            chols.push(CholFactor::from_diag_stds(&stds));
        }
        Ok(Self {
            logits: vec![0.0; k],
            means,
            chols,
        })
    }

    pub fn n_components(&self) -> usize {
        self.logits.len()
    }

    pub fn dim(&self) -> usize {
        self.means.first().map_or(0, |m| m.len())
    }

    pub fn weights(&self) -> Vec<f64> {
        let z = log_sum_exp(&self.logits);
        self.logits.iter().map(|l| (l - z).exp()).collect()
    }

    fn caches(&self) -> Vec<CompCache> {
        let d = self.dim() as f64;
        self.chols
            .iter()
            .map(|c| {
                let lower = c.lower();
                let prec = {
                    let cov = &lower * lower.transpose();
                    cov.cholesky().expect("mixture covariance SPD").inverse()
                };
                CompCache {
                    lower,
                    prec,
                    log_const: -c.half_logdet() - 0.5 * d * crate::experts::LN_2PI,
                }
            })
            .collect()
    }

    /// Component log-densities log(pi_k) + log N_k(q), reused everywhere.
    fn component_logs(&self, caches: &[CompCache], q: &DVector<f64>) -> Vec<f64> {
        let z = log_sum_exp(&self.logits);
        (0..self.n_components())
            .map(|k| {
                let r = q - &self.means[k];
                let quad = (r.transpose() * &caches[k].prec * &r)[(0, 0)];
                self.logits[k] - z + caches[k].log_const - 0.5 * quad
            })
            .collect()
    }

    pub fn logpdf(&self, q: &DVector<f64>) -> f64 {
        log_sum_exp(&self.component_logs(&self.caches(), q))
    }

    /// Gradient of `logpdf` in q.
    pub fn grad_logpdf(&self, q: &DVector<f64>) -> DVector<f64> {
        let caches = self.caches();
        let logs = self.component_logs(&caches, q);
        let lp = log_sum_exp(&logs);
        let mut g = DVector::zeros(self.dim());
        for k in 0..self.n_components() {
            let r_k = (logs[k] - lp).exp();
            g += r_k * (&caches[k].prec * (&self.means[k] - q));
        }
        g
    }

    /// Draw n samples; component by categorical draw, then mu + L eta.
    pub fn sample(&self, n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        let caches = self.caches();
        let weights = self.weights();
        let mut out = DMatrix::zeros(n, self.dim());
        for i in 0..n {
            let k = categorical(&weights, rng);
            let q = self.sample_component(&caches[k], k, rng);
            out.row_mut(i).copy_from(&q.transpose());
        }
        out
    }

    fn sample_component(&self, cache: &CompCache, k: usize, rng: &mut ChaCha8Rng) -> DVector<f64> {
        let eta = DVector::from_fn(self.dim(), |_, _| StandardNormal.sample(rng));
        &self.means[k] + &cache.lower * eta
    }

    /// Monte Carlo estimate of L(lambda) with its standard error.
    pub fn elbo<T: Target + ?Sized>(&self, target: &T, n: usize, seed: u64) -> Result<ElboEstimate> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let caches = self.caches();
        let weights = self.weights();
        let k_n = self.n_components();
        let s = (n / k_n).max(1);
        let mut value = 0.0;
        let mut var = 0.0;
        for k in 0..k_n {
            let mut fs = Vec::with_capacity(s);
            for _ in 0..s {
                let q = self.sample_component(&caches[k], k, &mut rng);
                let lp = target
                    .logpdf(&q)
                    .ok_or_else(|| Error::Invalid("elbo needs a target density".into()))?;
                fs.push(log_sum_exp(&self.component_logs(&caches, &q)) - lp);
            }
            let mean = fs.iter().sum::<f64>() / s as f64;
            let v = fs.iter().map(|f| (f - mean).powi(2)).sum::<f64>() / s as f64;
            value += weights[k] * mean;
            var += weights[k] * weights[k] * v / s as f64;
        }
        Ok(ElboEstimate {
            value,
            mc_std: var.sqrt(),
        })
    }

    /// Importance-sampled log-normalizer of the target, proposal = self.
    pub fn log_normalizer<T: Target + ?Sized>(
        &self,
        target: &T,
        n: usize,
        seed: u64,
    ) -> Result<LogNormEstimate> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let caches = self.caches();
        let weights = self.weights();
        let mut logw = Vec::with_capacity(n);
        for _ in 0..n {
            let k = categorical(&weights, &mut rng);
            let q = self.sample_component(&caches[k], k, &mut rng);
            let lp = target
                .logpdf(&q)
                .ok_or_else(|| Error::Invalid("log_normalizer needs a target density".into()))?;
            logw.push(lp - log_sum_exp(&self.component_logs(&caches, &q)));
        }
        let lse = log_sum_exp(&logw);
        let value = lse - (n as f64).ln();
        let lse2 = log_sum_exp(&logw.iter().map(|w| 2.0 * w).collect::<Vec<_>>());
        let ess = (2.0 * lse - lse2).exp();
        Ok(LogNormEstimate {
            value,
            ess,
            ess_warning: ess < 0.01 * n as f64,
        })
    }

    /// Stochastic minimization of L(lambda). See module docs for the
    /// estimator; all randomness comes from the seed, reductions are in
    /// fixed order, so the result is reproducible bit for bit.
    pub fn fit<T: Target + ?Sized>(&self, target: &T, opts: &FitOptions) -> Result<FitResult> {
        let mut state = OnlineFit::new(self.clone(), opts);
        state.run(target, opts.steps)?;
        Ok(state.into_result())
    }

    fn flatten(&self) -> DVector<f64> {
        let d = self.dim();
        let tri = CholFactor::len(d);
        let k_n = self.n_components();
        let mut v = DVector::zeros(k_n * (1 + d + tri));
        for k in 0..k_n {
            v[k] = self.logits[k];
            let off = k_n + k * (d + tri);
            for i in 0..d {
                v[off + i] = self.means[k][i];
            }
            for (i, e) in self.chols[k].entries().iter().enumerate() {
                v[off + d + i] = *e;
            }
        }
        v
    }

    fn unflatten(&mut self, v: &DVector<f64>) {
        let d = self.dim();
        let tri = CholFactor::len(d);
        let k_n = self.n_components();
        for k in 0..k_n {
            self.logits[k] = v[k];
            let off = k_n + k * (d + tri);
            for i in 0..d {
                self.means[k][i] = v[off + i];
            }
            for i in 0..tri {
                self.chols[k].entries_mut()[i] = v[off + d + i];
            }
        }
    }
}

fn categorical(weights: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random_range(0.0..1.0);
    let mut acc = 0.0;
    for (k, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return k;
        }
    }
    weights.len() - 1
}

fn clamp_diag(chol: &mut CholFactor, min_log: f64) {
    let d = chol.dim();
    let mut idx = 0;
    for r in 0..d {
        for c in 0..=r {
            if r == c {
                let e = &mut chol.entries_mut()[idx];
                *e = e.max(min_log);
            }
            idx += 1;
        }
    }
}

fn median_diag_log(mix: &Mixture, weights: &[f64]) -> f64 {
    let mut logs: Vec<f64> = Vec::new();
    for (k, chol) in mix.chols.iter().enumerate() {
        if weights[k] >= DEAD_WEIGHT {
            let d = chol.dim();
            let mut idx = 0;
            for r in 0..d {
                for c in 0..=r {
                    if r == c {
                        logs.push(chol.entries()[idx]);
                    }
                    idx += 1;
                }
            }
        }
    }
    if logs.is_empty() {
        return 0.0;
    }
    logs.sort_by(f64::total_cmp);
    logs[logs.len() / 2]
}
