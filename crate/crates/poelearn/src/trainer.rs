//! Maximum-likelihood training of product models.
//!
//! The log-likelihood gradient splits into a data term, the dataset average
//! of d log p_tilde / d theta, and a model term, the same expectation under
//! the normalized model density. The model term is intractable; it is
//! estimated either purely from short Metropolis-adjusted Langevin chains
//! started at data points (contrastive divergence) or from a mixture of such
//! chains and self-normalized importance-weighted samples drawn from a
//! variational approximation that is refreshed alongside the experts.
//!
//! Hierarchical models train on nullspace-filtered gradients. Those do not
//! integrate to a density, so importance weights and Metropolis corrections
//! are unavailable: the variational part of the model term then averages
//! mixture samples unweighted and any chains run uncorrected Langevin, which
//! is flagged in the report warnings.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experts::mle_fit;
use crate::kinematics::TaskMap;
use crate::opt::Adam;
use crate::poe::{FixedFields, ParamLayout, PoeTarget, PoensTarget, ProductModel};
use crate::variational::{FitOptions, LogNormEstimate, Mixture, OnlineFit};

/// Joint-configuration observations, optionally labeled by situation.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Dataset {
    /// One configuration per row.
    pub samples: DMatrix<f64>,
    pub situations: Option<Vec<usize>>,
}

impl Dataset {
    pub fn new(samples: DMatrix<f64>, situations: Option<Vec<usize>>) -> Result<Self> {
        if samples.nrows() < 2 {
            return Err(Error::Invalid(format!(
                "dataset needs at least 2 samples, got {}",
                samples.nrows()
            )));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("dataset contains non-finite values".into()));
        }
        if let Some(labels) = &situations {
            if labels.len() != samples.nrows() {
                return Err(Error::Dimension(format!(
                    "{} samples but {} situation labels",
                    samples.nrows(),
                    labels.len()
                )));
            }
        }
        Ok(Self {
            samples,
            situations,
        })
    }

    pub fn n(&self) -> usize {
        self.samples.nrows()
    }

    pub fn dof(&self) -> usize {
        self.samples.ncols()
    }

    pub fn row(&self, i: usize) -> DVector<f64> {
        self.samples.row(i).transpose()
    }

    pub fn situation_of(&self, i: usize) -> usize {
        self.situations.as_ref().map_or(0, |s| s[i])
    }

    /// Per-situation sample indices, in dataset order.
    pub fn indices_by_situation(&self, n_situations: usize) -> Vec<Vec<usize>> {
        let mut by_sit = vec![Vec::new(); n_situations];
        for i in 0..self.n() {
            by_sit[self.situation_of(i)].push(i);
        }
        by_sit
    }

    /// Joint limits hold up to slack, labels fit the model's situations.
    pub fn check_model(&self, model: &ProductModel) -> Result<()> {
        let tree = &model.tree;
        if self.dof() != tree.dof() {
            return Err(Error::Dimension(format!(
                "dataset dof {} vs model dof {}",
                self.dof(),
                tree.dof()
            )));
        }
        let limits = tree.limits();
        for i in 0..self.n() {
            for j in 0..self.dof() {
                let v = self.samples[(i, j)];
                if v < limits[j][0] - 1e-6 || v > limits[j][1] + 1e-6 {
                    return Err(Error::Invalid(format!(
                        "sample {i} joint {j} = {v} outside limits"
                    )));
                }
            }
        }
        if let Some(labels) = &self.situations {
            let n_sit = model.n_situations();
            if let Some(&bad) = labels.iter().find(|&&l| l >= n_sit) {
                return Err(Error::SituationOutOfRange {
                    index: bad,
                    count: n_sit,
                });
            }
        }
        Ok(())
    }

    /// Deterministic 80/20 split: every fifth sample is held out when
    /// N >= 25, otherwise everything trains.
    pub fn split_holdout(&self) -> (Dataset, Option<Dataset>) {
        if self.n() < 25 {
            return (self.clone(), None);
        }
        let train_idx: Vec<usize> = (0..self.n()).filter(|i| i % 5 != 4).collect();
        let test_idx: Vec<usize> = (0..self.n()).filter(|i| i % 5 == 4).collect();
        (self.subset(&train_idx), Some(self.subset(&test_idx)))
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let samples = DMatrix::from_fn(idx.len(), self.dof(), |r, c| self.samples[(idx[r], c)]);
        let situations = self
            .situations
            .as_ref()
            .map(|s| idx.iter().map(|&i| s[i]).collect());
        Dataset {
            samples,
            situations,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMethod {
    Vi,
    Cd,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainOptions {
    pub method: TrainMethod,
    pub outer_steps: usize,
    pub expert_lr: f64,
    /// Variational steps per expert update.
    pub vi_refresh_steps: usize,
    /// Variational steps before the first expert update.
    pub vi_prewarm_steps: usize,
    /// Model-term sample budget per situation and step.
    pub model_samples: usize,
    /// Fraction of the budget drawn from data-initialized chains.
    pub chain_fraction: f64,
    pub cd_steps: usize,
    pub cd_step_size: f64,
    pub seed: u64,
    pub vi_components: usize,
    pub vi_lr: f64,
    pub vi_samples: usize,
    /// Parameter fields excluded from training.
    pub fixed: Vec<FixedFields>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            method: TrainMethod::Vi,
            outer_steps: 1000,
            expert_lr: 1e-2,
            vi_refresh_steps: 20,
            vi_prewarm_steps: 500,
            model_samples: 64,
            chain_fraction: 0.5,
            cd_steps: 5,
            cd_step_size: 1e-2,
            seed: 0,
            vi_components: 20,
            vi_lr: 5e-3,
            vi_samples: 64,
            fixed: Vec::new(),
        }
    }
}

impl TrainOptions {
    pub fn validate(&self) -> Result<()> {
        if self.outer_steps == 0 || self.model_samples == 0 || self.cd_steps == 0 {
            return Err(Error::Invalid("step and sample counts must be positive".into()));
        }
        if !(self.expert_lr > 0.0 && self.cd_step_size > 0.0 && self.vi_lr > 0.0) {
            return Err(Error::Invalid("learning rates must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.chain_fraction) {
            return Err(Error::Invalid(format!(
                "chain fraction {} outside [0, 1]",
                self.chain_fraction
            )));
        }
        if self.method == TrainMethod::Vi
            && (self.vi_refresh_steps == 0 || self.vi_components == 0 || self.vi_samples == 0)
        {
            return Err(Error::Invalid("variational settings must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainReport {
    pub method: TrainMethod,
    /// Expert updates actually applied.
    pub steps: usize,
    pub data_norms: Vec<f64>,
    pub model_norms: Vec<f64>,
    /// data term minus model term at the last step.
    pub grad_gap_vec: Vec<f64>,
    pub grad_gap: f64,
    pub warnings: Vec<String>,
    pub aborted: bool,
    pub wallclock_s: f64,
}

#[derive(Clone, Debug)]
pub struct TrainResult {
    pub model: ProductModel,
    /// Fitted variational mixture per situation; empty for CD.
    pub mixtures: Vec<Mixture>,
    /// Variational objective trace per situation; empty for CD.
    pub elbo_traces: Vec<Vec<f64>>,
    pub report: TrainReport,
}

/// Fits each expert to its own transformed view of the data, ignoring the
/// coupling through the product. Situation-bound fields are fitted on the
/// matching subset, tied fields on the pooled data. Trainable tool offsets
/// start at zero.
pub fn init_independent(model: &ProductModel, dataset: &Dataset) -> Result<ProductModel> {
    dataset.check_model(model)?;
    let mut out = model.clone();
    let n_sit = model.n_situations();
    let by_sit = dataset.indices_by_situation(n_sit);
    for &ei in &out.trainable_maps {
        if let TaskMap::Tool { offset, .. } = &mut out.entries[ei].map {
            *offset = [0.0, 0.0];
        }
    }
    for ei in 0..out.entries.len() {
        let map = out.entries[ei].map.clone();
        let od = map.output_dim(&out.tree)?;
        let mut rows = DMatrix::zeros(dataset.n(), od);
        for i in 0..dataset.n() {
            let y = map.apply(&out.tree, &dataset.row(i))?;
            rows.row_mut(i).copy_from(&y.transpose());
        }
        let family = out.entries[ei].expert[0].family();
        match out.entries[ei].situation.clone() {
            None => {
                out.entries[ei].expert = vec![mle_fit(&family, &rows)?];
            }
            Some(binding) => {
                let pooled = mle_fit(&family, &rows)?;
                let pooled_flat = pooled.flat();
                let mut variants = Vec::with_capacity(n_sit);
                for idx in by_sit.iter() {
                    let fit_s = if idx.len() >= 2 {
                        let sub = DMatrix::from_fn(idx.len(), od, |r, c| rows[(idx[r], c)]);
                        mle_fit(&family, &sub)?
                    } else {
                        pooled.clone()
                    };
                    let mut flat = fit_s.flat();
                    for (field, span) in fit_s.field_spans() {
                        if binding.tied.contains(&field) {
                            for i in span {
                                flat[i] = pooled_flat[i];
                            }
                        }
                    }
                    let mut p = fit_s;
                    p.set_flat(&flat)?;
                    variants.push(p);
                }
                out.entries[ei].expert = variants;
            }
        }
    }
    out.validate()?;
    Ok(out)
}

/// Dataset average of the trainable-parameter gradient: per-situation sums
/// in dataset order, combined in situation order, divided once. Splitting
/// the dataset by situation and recombining reproduces this bit for bit.
pub fn data_term(
    layout: &ParamLayout,
    model: &ProductModel,
    dataset: &Dataset,
) -> Result<DVector<f64>> {
    let n_sit = model.n_situations();
    let by_sit = dataset.indices_by_situation(n_sit);
    let mut total = DVector::zeros(layout.n_params());
    for idx in by_sit.iter() {
        let mut sum = DVector::zeros(layout.n_params());
        for &i in idx {
            sum += layout.grad(model, &dataset.row(i), dataset.situation_of(i))?;
        }
        total += sum;
    }
    Ok(total / dataset.n() as f64)
}

/// k steps of a Langevin chain on the situation's unnormalized log-density,
/// Metropolis-corrected when the model has one. Hierarchical gradients have
/// no matching density, so their chains stay uncorrected.
fn chain_sample(
    model: &ProductModel,
    situation: usize,
    mut q: DVector<f64>,
    steps: usize,
    tau: f64,
    hierarchy: bool,
    rng: &mut ChaCha8Rng,
) -> Result<DVector<f64>> {
    let d = q.len();
    for _ in 0..steps {
        let g = if hierarchy {
            model.grad_q_ns(&q, situation)?
        } else {
            model.grad_q(&q, situation)?
        };
        let eta = DVector::from_fn(d, |_, _| StandardNormal.sample(rng));
        let prop = &q + tau * &g + (2.0 * tau).sqrt() * eta;
        if hierarchy {
            q = prop;
            continue;
        }
        let lp_q = model.log_unnorm(&q, situation)?;
        let lp_p = model.log_unnorm(&prop, situation)?;
        let g_p = model.grad_q(&prop, situation)?;
        let fwd = (&prop - &q - tau * &g).norm_squared();
        let bwd = (&q - &prop - tau * &g_p).norm_squared();
        let log_acc = lp_p - lp_q + (fwd - bwd) / (4.0 * tau);
        let u: f64 = rng.random();
        if log_acc >= 0.0 || u.ln() < log_acc {
            q = prop;
        }
    }
    Ok(q)
}

pub fn train(model: &ProductModel, dataset: &Dataset, opts: &TrainOptions) -> Result<TrainResult> {
    train_impl(model, dataset, opts, opts.method)
}

pub fn train_vi(
    model: &ProductModel,
    dataset: &Dataset,
    opts: &TrainOptions,
) -> Result<TrainResult> {
    train_impl(model, dataset, opts, TrainMethod::Vi)
}

pub fn train_cd(
    model: &ProductModel,
    dataset: &Dataset,
    opts: &TrainOptions,
) -> Result<TrainResult> {
    train_impl(model, dataset, opts, TrainMethod::Cd)
}

fn train_impl(
    model: &ProductModel,
    dataset: &Dataset,
    opts: &TrainOptions,
    method: TrainMethod,
) -> Result<TrainResult> {
    opts.validate()?;
    dataset.check_model(model)?;
    if !model.differentiable() {
        return Err(Error::UnsupportedGradient("projection"));
    }
    let hierarchy = model.has_hierarchy();
    if method == TrainMethod::Cd && hierarchy {
        return Err(Error::Invalid(
            "contrastive divergence needs a density; hierarchical gradients define none".into(),
        ));
    }
    let t0 = Instant::now();
    let mut model = model.clone();
    let layout = ParamLayout::new(&model, &opts.fixed)?;
    if layout.n_params() == 0 {
        return Err(Error::Invalid("no trainable parameters".into()));
    }
    let n_sit = model.n_situations();
    let by_sit = dataset.indices_by_situation(n_sit);
    let n_total = dataset.n() as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);

    let mut warnings = Vec::new();
    if hierarchy && opts.chain_fraction > 0.0 {
        warnings.push(
            "hierarchical chains are uncorrected Langevin (no density to correct against)"
                .to_string(),
        );
    }

    let mut fits: Vec<OnlineFit> = Vec::new();
    if method == TrainMethod::Vi {
        for s in 0..n_sit {
            let mix = Mixture::init_in_box(opts.vi_components, model.tree.limits(), &mut rng)?;
            let fit_opts = FitOptions {
                steps: 0,
                lr: opts.vi_lr,
                n_samples: opts.vi_samples,
                seed: opts.seed.wrapping_add(0x9e37 + s as u64),
            };
            fits.push(OnlineFit::new(mix, &fit_opts));
        }
    }

    let budget = opts.model_samples;
    let (n_chain, n_is) = match method {
        TrainMethod::Cd => (budget, 0),
        TrainMethod::Vi => {
            let c = ((opts.chain_fraction * budget as f64).round() as usize).min(budget);
            (c, budget - c)
        }
    };

    let mut params = layout.read(&model);
    let mut adam = Adam::new(params.len(), opts.expert_lr);
    let mut data_norms = Vec::with_capacity(opts.outer_steps);
    let mut model_norms = Vec::with_capacity(opts.outer_steps);
    let mut gap_vec = DVector::zeros(layout.n_params());
    let mut aborted = false;
    let mut steps_run = 0;

    // One variational prewarm against the initial model, before any expert
    // update sees the model term.
    if method == TrainMethod::Vi && opts.vi_prewarm_steps > 0 {
        for s in 0..n_sit {
            if by_sit[s].is_empty() && n_sit > 1 {
                continue;
            }
            let r = refresh(&model, &mut fits[s], s, hierarchy, opts.vi_prewarm_steps);
            if r.is_err() {
                warnings.push(format!("variational prewarm diverged for situation {s}"));
                aborted = true;
            }
        }
    }

    for _step in 0..opts.outer_steps {
        if aborted {
            break;
        }
        let step_result = (|| -> Result<(DVector<f64>, DVector<f64>)> {
            if method == TrainMethod::Vi {
                for s in 0..n_sit {
                    if by_sit[s].is_empty() && n_sit > 1 {
                        continue;
                    }
                    refresh(&model, &mut fits[s], s, hierarchy, opts.vi_refresh_steps)?;
                }
            }
            let data = data_term(&layout, &model, dataset)?;

            let mut model_t = DVector::zeros(layout.n_params());
            for s in 0..n_sit {
                if by_sit[s].is_empty() {
                    continue;
                }
                let w_s = by_sit[s].len() as f64 / n_total;
                if n_chain > 0 {
                    let mut sum = DVector::zeros(layout.n_params());
                    for _ in 0..n_chain {
                        let start = by_sit[s][rng.random_range(0..by_sit[s].len())];
                        let q = chain_sample(
                            &model,
                            s,
                            dataset.row(start),
                            opts.cd_steps,
                            opts.cd_step_size,
                            hierarchy,
                            &mut rng,
                        )?;
                        sum += layout.grad(&model, &q, s)?;
                    }
                    let frac = n_chain as f64 / budget as f64;
                    model_t += w_s * frac / n_chain as f64 * sum;
                }
                if n_is > 0 {
                    let mix = fits[s].mixture();
                    let draws = mix.sample(n_is, &mut rng);
                    let frac = n_is as f64 / budget as f64;
                    if hierarchy {
                        // Mixture stands in for the model; no weights exist.
                        let mut sum = DVector::zeros(layout.n_params());
                        for i in 0..n_is {
                            let q = draws.row(i).transpose();
                            sum += layout.grad(&model, &q, s)?;
                        }
                        model_t += w_s * frac / n_is as f64 * sum;
                    } else {
                        let mut logw = Vec::with_capacity(n_is);
                        let mut grads = Vec::with_capacity(n_is);
                        for i in 0..n_is {
                            let q = draws.row(i).transpose();
                            logw.push(model.log_unnorm(&q, s)? - mix.logpdf(&q));
                            grads.push(layout.grad(&model, &q, s)?);
                        }
                        let m = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let wsum: f64 = logw.iter().map(|l| (l - m).exp()).sum();
                        let mut est = DVector::zeros(layout.n_params());
                        for (l, g) in logw.iter().zip(&grads) {
                            est += (l - m).exp() / wsum * g;
                        }
                        model_t += w_s * frac * est;
                    }
                }
            }
            Ok((data, model_t))
        })();

        let (data, model_t) = match step_result {
            Ok(v) => v,
            Err(e) => {
                warnings.push(format!("step {_step} failed: {e}"));
                aborted = true;
                break;
            }
        };
        data_norms.push(data.norm());
        model_norms.push(model_t.norm());
        gap_vec = &data - &model_t;
        if gap_vec.iter().any(|v| !v.is_finite()) {
            warnings.push(format!("step {_step} produced a non-finite gradient"));
            aborted = true;
            break;
        }

        // The model still holds the last written snapshot, so a bad step
        // only needs to stop before the write.
        let ascent = &model_t - &data;
        adam.step(&mut params, &ascent);
        if params.iter().any(|v| !v.is_finite()) {
            warnings.push(format!("step {_step} produced non-finite parameters"));
            aborted = true;
            break;
        }
        layout.write(&mut model, &params)?;
        steps_run += 1;
    }

    let mut mixtures = Vec::new();
    let mut elbo_traces = Vec::new();
    for f in fits {
        let r = f.into_result();
        mixtures.push(r.mixture);
        elbo_traces.push(r.elbo_trace);
    }
    let grad_gap = gap_vec.norm();
    Ok(TrainResult {
        model,
        mixtures,
        elbo_traces,
        report: TrainReport {
            method,
            steps: steps_run,
            data_norms,
            model_norms,
            grad_gap_vec: gap_vec.iter().cloned().collect(),
            grad_gap,
            warnings,
            aborted,
            wallclock_s: t0.elapsed().as_secs_f64(),
        },
    })
}

fn refresh(
    model: &ProductModel,
    fit: &mut OnlineFit,
    situation: usize,
    hierarchy: bool,
    steps: usize,
) -> Result<()> {
    if hierarchy {
        let t = PoensTarget::new(model, situation)?;
        fit.run(&t, steps)
    } else {
        let t = PoeTarget::new(model, situation)?;
        fit.run(&t, steps)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LoglikReport {
    /// Estimated mean normalized log-likelihood of the dataset.
    pub value: f64,
    /// Normalizer estimate per situation.
    pub log_normalizers: Vec<LogNormEstimate>,
    pub ess_warning: bool,
}

/// (1/N) sum of log p_tilde minus the importance-sampled log-normalizer,
/// weighted per situation. `mixtures` holds one fitted proposal per
/// situation.
pub fn loglik_report(
    model: &ProductModel,
    mixtures: &[Mixture],
    dataset: &Dataset,
    n_norm: usize,
    seed: u64,
) -> Result<LoglikReport> {
    dataset.check_model(model)?;
    let n_sit = model.n_situations();
    if mixtures.len() != n_sit {
        return Err(Error::Dimension(format!(
            "{} mixtures for {} situations",
            mixtures.len(),
            n_sit
        )));
    }
    let mut sum = 0.0;
    for i in 0..dataset.n() {
        sum += model.log_unnorm(&dataset.row(i), dataset.situation_of(i))?;
    }
    let mut value = sum / dataset.n() as f64;
    let by_sit = dataset.indices_by_situation(n_sit);
    let mut log_normalizers = Vec::with_capacity(n_sit);
    let mut ess_warning = false;
    for s in 0..n_sit {
        let target = PoeTarget::new(model, s)?;
        let est = mixtures[s].log_normalizer(&target, n_norm, seed.wrapping_add(s as u64))?;
        ess_warning |= est.ess_warning;
        value -= by_sit[s].len() as f64 / dataset.n() as f64 * est.value;
        log_normalizers.push(est);
    }
    Ok(LoglikReport {
        value,
        log_normalizers,
        ess_warning,
    })
}

/// Draws exact joint samples from a model that factorizes into independent
/// Gaussian views of the identity map; used by fixed-point tests and ground
/// truth pipelines where the product collapses to one Gaussian.
pub fn gaussian_product_moments(
    model: &ProductModel,
    situation: usize,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let d = model.dof();
    let mut prec = DMatrix::zeros(d, d);
    let mut info = DVector::zeros(d);
    for e in &model.entries {
        if !matches!(e.map, TaskMap::Identity) {
            return Err(Error::Invalid("entry is not an identity-map view".into()));
        }
        let (mean, cov) = match e.expert_for(situation)? {
            crate::experts::ExpertParams::Gaussian { mean, chol } => {
                (DVector::from_column_slice(mean), chol.covariance())
            }
            crate::experts::ExpertParams::Isotropic { mean, log_sigma } => {
                let v = (2.0 * log_sigma).exp();
                (
                    DVector::from_column_slice(mean),
                    DMatrix::identity(mean.len(), mean.len()) * v,
                )
            }
            _ => return Err(Error::Invalid("entry is not Gaussian".into())),
        };
        let p = cov
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Numerical("degenerate covariance".into()))?
            .inverse();
        info += &p * mean;
        prec += p;
    }
    let cov = prec
        .cholesky()
        .ok_or_else(|| Error::Numerical("degenerate product precision".into()))?
        .inverse();
    let mean = &cov * info;
    Ok((mean, cov))
}

/// Exact sampler for the product of identity-map Gaussians.
pub fn sample_gaussian_product(
    model: &ProductModel,
    situation: usize,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<DMatrix<f64>> {
    let (mean, cov) = gaussian_product_moments(model, situation)?;
    let l = cov
        .cholesky()
        .ok_or_else(|| Error::Numerical("degenerate covariance".into()))?
        .l();
    let d = mean.len();
    let mut out = DMatrix::zeros(n, d);
    for i in 0..n {
        let eta = DVector::from_fn(d, |_, _| StandardNormal.sample(rng));
        let q = &mean + &l * eta;
        out.row_mut(i).copy_from(&q.transpose());
    }
    Ok(out)
}
