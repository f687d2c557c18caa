//! Scenario configuration and ground-truth data generation.
//!
//! A scenario bundles a ground-truth product model with everything needed
//! to reproduce an experiment end to end: dataset size and seed, trainer
//! settings, the evaluation metric, and the pipelines to compare. Presets
//! cover the benchmark suite; configs are plain JSON so variants are a
//! text edit away.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experts::{ExpertParams, ParamField};
use crate::kinematics::{Joint, KinematicTree, TaskMap};
use crate::poe::{
    BoxedTarget, FixedFields, ModelEntry, PoeTarget, PoensTarget, ProductModel, SituationBinding,
};
use crate::trainer::{Dataset, TrainOptions};
use crate::variational::{FitOptions, Mixture, OnlineFit};

/// Components in the mixture approximation of a ground-truth density.
pub const GT_COMPONENTS: usize = 50;

/// Optimizer budget for ground-truth mixture fits. Narrow task ridges
/// (deviations around 0.02 over a multi-turn joint box) need the full
/// annealing ladder plus a long cold polish to pull component means
/// under the ridge width.
pub const GT_FIT_STEPS: usize = 32_000;

/// Step size for ground-truth mixture fits; decayed by the annealing
/// ladder down to 2 percent of this for the final polish.
pub const GT_FIT_LR: f64 = 1e-2;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub n_per_situation: usize,
    pub seed: u64,
    /// Extra dataset sizes to sweep in the report, if any.
    #[serde(default)]
    pub n_sweep: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MetricSpec {
    /// Alpha-divergence on a joint-limit grid; configuration space must
    /// have at most 3 dimensions.
    Grid { n_per_dim: usize },
    /// Alpha-divergence by importance sampling with mixture proposals.
    ImportanceSampled { n: usize },
    /// Unbiased MMD between tool positions of model and ground-truth
    /// samples, optionally on a target never seen during training.
    Mmd {
        gamma: f64,
        n: usize,
        held_out_target: Option<[f64; 2]>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitSpec {
    /// Draw expert locations uniformly in the workspace or joint box and
    /// scales log-uniformly in [0.1, 1.0].
    Random,
    /// Fit each expert independently to its own view of the data.
    Independent,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pipeline {
    /// Independent per-expert fit, no joint training.
    Independent,
    PoeVi,
    PoeCd,
    PoensVi,
}

impl Pipeline {
    pub fn label(self) -> &'static str {
        match self {
            Pipeline::Independent => "independent",
            Pipeline::PoeVi => "poe_vi",
            Pipeline::PoeCd => "poe_cd",
            Pipeline::PoensVi => "poens_vi",
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub name: String,
    /// Ground-truth model; doubles as the structure handed to training.
    pub model: ProductModel,
    /// Generate and evaluate with nullspace-filtered gradients.
    pub hierarchy: bool,
    pub dataset: DatasetSpec,
    pub train: TrainOptions,
    pub metric: MetricSpec,
    pub pipelines: Vec<Pipeline>,
    pub init: InitSpec,
    /// Experiment repetitions; each gets its own data and training seed.
    pub seeds: usize,
    /// Reference values for the report, labelled by pipeline.
    #[serde(default)]
    pub reference: Vec<(String, f64)>,
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.dataset.n_per_situation < 2 {
            return Err(Error::Invalid("need at least 2 samples per situation".into()));
        }
        if self.seeds == 0 {
            return Err(Error::Invalid("need at least one repetition".into()));
        }
        if self.pipelines.is_empty() {
            return Err(Error::Invalid("no pipelines requested".into()));
        }
        match &self.metric {
            MetricSpec::Grid { n_per_dim } => {
                if self.model.dof() > 3 {
                    return Err(Error::Invalid(
                        "grid metric limited to 3 configuration dimensions".into(),
                    ));
                }
                if *n_per_dim < 16 {
                    return Err(Error::Invalid("grid resolution below 16".into()));
                }
            }
            MetricSpec::ImportanceSampled { n } => {
                if *n < 1000 {
                    return Err(Error::Invalid("importance sample budget below 1000".into()));
                }
            }
            MetricSpec::Mmd { gamma, n, .. } => {
                if *gamma <= 0.0 || *n < 2 {
                    return Err(Error::Invalid("MMD needs gamma > 0 and n >= 2".into()));
                }
            }
        }
        if self.hierarchy && self.pipelines.contains(&Pipeline::PoeCd) {
            return Err(Error::Invalid(
                "contrastive divergence has no nullspace-filtered form".into(),
            ));
        }
        Ok(())
    }

    pub fn preset_names() -> &'static [&'static str] {
        &[
            "reach2d_config",
            "reach2d_task",
            "reach2d_both",
            "bimanual",
            "manipulability",
            "tool",
            "tool_conditional",
        ]
    }

    pub fn preset(name: &str) -> Result<ScenarioConfig> {
        let config = match name {
            "reach2d_config" => reach2d(
                name,
                ExpertParams::Isotropic {
                    mean: vec![0.0, 0.0],
                    log_sigma: 20f64.ln(),
                },
                ExpertParams::Isotropic {
                    mean: vec![0.7, 0.6],
                    log_sigma: 0.15f64.ln(),
                },
            ),
            "reach2d_task" => reach2d(
                name,
                ExpertParams::Isotropic {
                    mean: vec![1.0, 0.8],
                    log_sigma: 0.1f64.ln(),
                },
                ExpertParams::Isotropic {
                    mean: vec![0.0, 0.0],
                    log_sigma: 20f64.ln(),
                },
            ),
            "reach2d_both" => reach2d(
                name,
                ExpertParams::Isotropic {
                    mean: vec![1.0, 0.8],
                    log_sigma: 0.1f64.ln(),
                },
                ExpertParams::Isotropic {
                    mean: vec![0.3, 0.5],
                    log_sigma: 1.0f64.ln(),
                },
            ),
            "bimanual" => bimanual(),
            "manipulability" => manipulability(),
            "tool" => tool(),
            "tool_conditional" => tool_conditional(),
            other => {
                return Err(Error::Invalid(format!(
                    "unknown preset {other:?}; available: {}",
                    Self::preset_names().join(", ")
                )))
            }
        }?;
        config.validate()?;
        Ok(config)
    }
}

fn iso(mean: &[f64], sigma: f64) -> ExpertParams {
    ExpertParams::Isotropic {
        mean: mean.to_vec(),
        log_sigma: sigma.ln(),
    }
}

/// Planar 2-link reacher with a workspace-position expert and a
/// configuration expert; a standard deviation of 20 marks a view without
/// a target.
fn reach2d(name: &str, task: ExpertParams, config: ExpertParams) -> Result<ScenarioConfig> {
    let tree = KinematicTree::chain(&[1.0, 1.0], [-std::f64::consts::PI, std::f64::consts::PI])?;
    let model = ProductModel::new(
        tree,
        vec![
            ModelEntry::single(TaskMap::Position { link: 1 }, task, 0),
            ModelEntry::single(TaskMap::Identity, config, 0),
        ],
    )?;
    Ok(ScenarioConfig {
        name: name.to_string(),
        model,
        hierarchy: false,
        dataset: DatasetSpec {
            n_per_situation: 30,
            seed: 101,
            n_sweep: Vec::new(),
        },
        train: TrainOptions::default(),
        metric: MetricSpec::Grid { n_per_dim: 300 },
        pipelines: vec![Pipeline::PoeVi, Pipeline::PoeCd],
        init: InitSpec::Random,
        seeds: 5,
        reference: vec![
            ("reach2d_config poe_vi".into(), 0.067),
            ("reach2d_config poe_cd".into(), 0.837),
            ("reach2d_task poe_vi".into(), 0.016),
            ("reach2d_task poe_cd".into(), 0.039),
            ("reach2d_both poe_vi".into(), 0.014),
            ("reach2d_both poe_cd".into(), 0.063),
        ],
    })
}

/// Torso plus two 2-link arms. The right hand tracks a per-situation
/// target; the left hand is pulled toward a point just outside its reach,
/// so only the hierarchy explains the data spread with the true scale.
fn bimanual() -> Result<ScenarioConfig> {
    let joints = vec![
        Joint { parent: None, length: 0.5, offset: 0.0 },
        Joint { parent: Some(0), length: 0.6, offset: 0.0 },
        Joint { parent: Some(1), length: 0.5, offset: 0.0 },
        Joint { parent: Some(0), length: 0.6, offset: 0.0 },
        Joint { parent: Some(3), length: 0.5, offset: 0.0 },
    ];
    let pi = std::f64::consts::PI;
    let tree = KinematicTree::new(
        joints,
        [0.0, 0.0],
        pi / 2.0,
        vec![[-pi, pi]; 5],
    )?;
    let targets = [[0.9, 0.9], [-0.2, 1.3], [0.7, -0.1]];
    let right = ModelEntry {
        map: TaskMap::Position { link: 2 },
        expert: targets.iter().map(|t| iso(t, 0.02)).collect(),
        priority: 0,
        situation: Some(SituationBinding {
            tied: vec![ParamField::Scale],
            per_situation: vec![ParamField::Location],
        }),
    };
    let left = ModelEntry::single(
        TaskMap::Position { link: 4 },
        iso(&[-1.9, 0.4], 0.02),
        1,
    );
    let model = ProductModel::new(tree, vec![right, left])?;
    Ok(ScenarioConfig {
        name: "bimanual".to_string(),
        model,
        hierarchy: true,
        dataset: DatasetSpec {
            n_per_situation: 30,
            seed: 202,
            n_sweep: Vec::new(),
        },
        train: TrainOptions::default(),
        metric: MetricSpec::ImportanceSampled { n: 200_000 },
        pipelines: vec![Pipeline::Independent, Pipeline::PoeVi, Pipeline::PoensVi],
        init: InitSpec::Independent,
        seeds: 5,
        reference: vec![
            ("bimanual independent".into(), 1.814),
            ("bimanual poe_vi".into(), 0.258),
            ("bimanual poens_vi".into(), 0.094),
        ],
    })
}

/// 3-link arm tracking four targets with a secondary manipulability
/// preference resolved in the task nullspace.
fn manipulability() -> Result<ScenarioConfig> {
    let tree = KinematicTree::chain(
        &[1.0, 1.0, 1.0],
        [-std::f64::consts::PI, std::f64::consts::PI],
    )?;
    let targets = [[2.0, 0.6], [1.2, 1.4], [0.6, 2.0], [-1.0, 1.6]];
    let position = ModelEntry {
        map: TaskMap::Position { link: 2 },
        expert: targets.iter().map(|t| iso(t, 0.02)).collect(),
        priority: 0,
        situation: Some(SituationBinding {
            tied: vec![ParamField::Scale],
            per_situation: vec![ParamField::Location],
        }),
    };
    let manip = ModelEntry::single(
        TaskMap::LogManipulability { link: 2 },
        ExpertParams::Scalar {
            mean: 1.6,
            log_sigma: 0.1f64.ln(),
        },
        1,
    );
    let model = ProductModel::new(tree, vec![position, manip])?;
    Ok(ScenarioConfig {
        name: "manipulability".to_string(),
        model,
        hierarchy: true,
        dataset: DatasetSpec {
            n_per_situation: 30,
            seed: 303,
            n_sweep: Vec::new(),
        },
        train: TrainOptions::default(),
        metric: MetricSpec::ImportanceSampled { n: 200_000 },
        pipelines: vec![Pipeline::Independent, Pipeline::PoeVi, Pipeline::PoensVi],
        init: InitSpec::Independent,
        seeds: 5,
        reference: vec![
            ("manipulability independent".into(), 0.812),
            ("manipulability poe_vi".into(), 0.630),
            ("manipulability poens_vi".into(), 0.202),
        ],
    })
}

const TOOL_LINKS: [f64; 7] = [0.4, 0.35, 0.3, 0.3, 0.25, 0.2, 0.2];
const TOOL_OFFSET_GT: [f64; 2] = [0.12, 0.08];

fn tool_model(task_experts: Vec<ExpertParams>, binding: Option<SituationBinding>) -> Result<ProductModel> {
    let tree = KinematicTree::chain(&TOOL_LINKS, [-std::f64::consts::PI, std::f64::consts::PI])?;
    let tool = ModelEntry {
        map: TaskMap::Tool {
            link: 6,
            offset: TOOL_OFFSET_GT,
        },
        expert: task_experts,
        priority: 0,
        situation: binding,
    };
    let posture = ModelEntry::single(TaskMap::Identity, iso(&[0.3; 7], 0.4), 0);
    ProductModel::new(tree, vec![tool, posture])?.with_trainable_maps(vec![0])
}

/// 7-link arm with an unknown in-hand tool offset to identify from data.
fn tool() -> Result<ScenarioConfig> {
    let model = tool_model(vec![iso(&[1.1, 0.9], 0.02)], None)?;
    Ok(ScenarioConfig {
        name: "tool".to_string(),
        model,
        hierarchy: false,
        dataset: DatasetSpec {
            n_per_situation: 30,
            seed: 404,
            n_sweep: vec![10, 30, 100, 1000],
        },
        train: TrainOptions::default(),
        metric: MetricSpec::Mmd {
            gamma: 0.1,
            n: 500,
            held_out_target: None,
        },
        pipelines: vec![Pipeline::PoeVi],
        init: InitSpec::Independent,
        seeds: 3,
        reference: Vec::new(),
    })
}

/// Conditional variant: tool targets are given per situation and pinned
/// during training; evaluation swaps in a target never seen in the data.
fn tool_conditional() -> Result<ScenarioConfig> {
    let targets = [[1.2, 0.5], [0.8, 1.0], [0.3, 1.3]];
    let model = tool_model(
        targets.iter().map(|t| iso(t, 0.02)).collect(),
        Some(SituationBinding {
            tied: vec![ParamField::Scale],
            per_situation: vec![ParamField::Location],
        }),
    )?;
    let mut train = TrainOptions::default();
    train.fixed = vec![FixedFields {
        entry: 0,
        fields: vec![ParamField::Location],
    }];
    Ok(ScenarioConfig {
        name: "tool_conditional".to_string(),
        model,
        hierarchy: false,
        dataset: DatasetSpec {
            n_per_situation: 30,
            seed: 505,
            n_sweep: Vec::new(),
        },
        train,
        metric: MetricSpec::Mmd {
            gamma: 0.1,
            n: 500,
            held_out_target: Some([1.0, 0.85]),
        },
        pipelines: vec![Pipeline::PoeVi],
        init: InitSpec::Independent,
        seeds: 3,
        reference: Vec::new(),
    })
}

/// Same model with every expert standard deviation multiplied by `c`.
fn inflate_model(model: &ProductModel, c: f64) -> ProductModel {
    let mut out = model.clone();
    for entry in &mut out.entries {
        for expert in &mut entry.expert {
            *expert = expert.inflated(c);
        }
    }
    out
}

/// Teleports components whose means violate the top-priority tasks onto
/// jittered copies of components that satisfy them. Under a strict
/// hierarchy the top level alone is an ordinary density, and a mean many
/// deviations below the best component is stuck in a stratum the tasks
/// rule out; the primary residual there is orthogonal to the attainable
/// directions, so its gradient cannot recover on its own.
fn respawn_primary_outliers(
    fit: &mut OnlineFit,
    primary: &ProductModel,
    situation: usize,
    rng: &mut ChaCha8Rng,
) -> Result<usize> {
    const RESPAWN_GAP: f64 = 8.0;
    const DONOR_GAP: f64 = 2.0;
    let k_n = fit.mixture().n_components();
    let mut lp = Vec::with_capacity(k_n);
    for k in 0..k_n {
        lp.push(primary.log_unnorm(&fit.mixture().means[k], situation)?);
    }
    let best = lp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !best.is_finite() {
        return Ok(0);
    }
    let donors: Vec<usize> = (0..k_n).filter(|&k| lp[k] >= best - DONOR_GAP).collect();
    let victims: Vec<usize> = (0..k_n).filter(|&k| lp[k] < best - RESPAWN_GAP).collect();
    if donors.is_empty() {
        return Ok(0);
    }
    let d = fit.mixture().dim();
    for (i, &k) in victims.iter().enumerate() {
        let donor = donors[i % donors.len()];
        let chol = fit.mixture().chols[donor].clone();
        let eps = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let mean = &fit.mixture().means[donor] + chol.lower() * eps * 0.5;
        fit.move_component(k, mean, chol)?;
    }
    Ok(victims.len())
}

/// Entries at the top priority level, as a standalone product model.
fn primary_level(model: &ProductModel) -> Result<ProductModel> {
    let top = model
        .entries
        .iter()
        .map(|e| e.priority)
        .min()
        .ok_or_else(|| Error::Invalid("model has no entries".into()))?;
    let entries = model
        .entries
        .iter()
        .filter(|e| e.priority == top)
        .cloned()
        .collect();
    ProductModel::new(model.tree.clone(), entries)
}

/// Configuration space is a torus chart: periodic density over limits
/// spanning one full turn per joint.
fn on_torus(model: &ProductModel) -> bool {
    let tau = 2.0 * std::f64::consts::PI;
    model.periodic()
        && model
            .tree
            .limits()
            .iter()
            .all(|[lo, hi]| (hi - lo - tau).abs() < 1e-9)
}

/// Fits a mixture to one situation of the model, nullspace-filtered when
/// `hierarchy` is set. The target is boxed to the joint limits, and the
/// fit anneals from an inflated model down to the true scales so that
/// components find narrow task ridges before tightening onto them.
pub fn approximate_model(
    model: &ProductModel,
    hierarchy: bool,
    situation: usize,
    components: usize,
    opts: &FitOptions,
) -> Result<(Mixture, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x6d69_7874);
    let init = Mixture::init_in_box(components, model.tree.limits(), &mut rng)?;
    let mut fit = OnlineFit::new(init, opts);
    let ladder = [
        (16.0, 1.0, 0.1),
        (8.0, 1.0, 0.1),
        (4.0, 1.0, 0.12),
        (2.0, 0.5, 0.14),
        (1.0, 0.2, 0.18),
        (1.0, 0.05, 0.18),
        (1.0, 0.02, 0.18),
    ];
    let mut used = 0;
    let limits = model.tree.limits();
    let wrap = on_torus(model);
    let mut respawn_rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x7265_7370);
    for (i, &(c, lr_scale, fraction)) in ladder.iter().enumerate() {
        let steps = if i + 1 == ladder.len() {
            opts.steps - used
        } else {
            (opts.steps as f64 * fraction) as usize
        };
        used += steps;
        fit.set_lr(opts.lr * lr_scale);
        let stage = inflate_model(model, c);
        if hierarchy {
            let target = PoensTarget::new(&stage, situation)?;
            fit.run(&BoxedTarget::new(&target, limits)?, steps)?;
        } else {
            let target = PoeTarget::new(&stage, situation)?;
            fit.run(&BoxedTarget::new(&target, limits)?, steps)?;
        }
        if wrap {
            fit.wrap_means(limits)?;
        }
        if hierarchy && i + 2 < ladder.len() {
            let primary = primary_level(&stage)?;
            respawn_primary_outliers(&mut fit, &primary, situation, &mut respawn_rng)?;
        }
    }
    let result = fit.into_result();
    Ok((result.mixture, result.elbo_trace))
}

/// Draws n mixture samples inside the joint limits. On torus models the
/// tails are wrapped back in, which is the same distribution; otherwise
/// out-of-limit draws are rejected.
fn sample_in_limits(
    mix: &Mixture,
    n: usize,
    limits: &[[f64; 2]],
    wrap: bool,
    rng: &mut ChaCha8Rng,
) -> Result<DMatrix<f64>> {
    let d = mix.dim();
    let mut rows = Vec::with_capacity(n);
    let mut attempts = 0;
    while rows.len() < n {
        let mut batch = mix.sample(n, rng);
        for r in 0..batch.nrows() {
            if wrap {
                for c in 0..d {
                    let [lo, hi] = limits[c];
                    batch[(r, c)] = (batch[(r, c)] - lo).rem_euclid(hi - lo) + lo;
                }
            }
            let inside = (0..d).all(|c| {
                let v = batch[(r, c)];
                v >= limits[c][0] && v <= limits[c][1]
            });
            if inside {
                rows.push(batch.row(r).transpose());
                if rows.len() == n {
                    break;
                }
            }
        }
        attempts += 1;
        if attempts > 100 {
            return Err(Error::Numerical(
                "ground-truth mass concentrated outside joint limits".into(),
            ));
        }
    }
    Ok(DMatrix::from_rows(
        &rows.iter().map(|r| r.transpose()).collect::<Vec<_>>(),
    ))
}

#[derive(Clone, Debug)]
pub struct GeneratedScenario {
    pub dataset: Dataset,
    /// Ground-truth mixture approximation per situation.
    pub mixtures: Vec<Mixture>,
    pub elbo_traces: Vec<Vec<f64>>,
}

/// Approximates the ground-truth density of every situation with a
/// mixture, then draws the dataset from those mixtures inside the joint
/// limits.
pub fn generate_scenario(config: &ScenarioConfig, n_per_situation: usize) -> Result<GeneratedScenario> {
    config.validate()?;
    let model = &config.model;
    let n_sit = model.n_situations();
    let fit_opts = FitOptions {
        steps: GT_FIT_STEPS,
        lr: GT_FIT_LR,
        n_samples: 64,
        seed: config.dataset.seed,
    };
    let mut mixtures = Vec::with_capacity(n_sit);
    let mut traces = Vec::with_capacity(n_sit);
    let mut blocks = Vec::with_capacity(n_sit);
    let mut labels = Vec::new();
    for s in 0..n_sit {
        let opts = FitOptions {
            seed: fit_opts.seed.wrapping_add(s as u64),
            ..fit_opts
        };
        let (mix, trace) = approximate_model(model, config.hierarchy, s, GT_COMPONENTS, &opts)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.dataset.seed.wrapping_mul(0x9e37_79b9).wrapping_add(s as u64));
        let block = sample_in_limits(&mix, n_per_situation, model.tree.limits(), on_torus(model), &mut rng)?;
        labels.extend(std::iter::repeat_n(s, n_per_situation));
        blocks.push(block);
        mixtures.push(mix);
        traces.push(trace);
    }
    let total: usize = blocks.iter().map(|b| b.nrows()).sum();
    let mut samples = DMatrix::zeros(total, model.dof());
    let mut row = 0;
    for block in &blocks {
        samples.rows_mut(row, block.nrows()).copy_from(block);
        row += block.nrows();
    }
    let dataset = Dataset::new(samples, (n_sit > 1).then_some(labels))?;
    Ok(GeneratedScenario {
        dataset,
        mixtures,
        elbo_traces: traces,
    })
}

/// Random starting point for training: locations uniform in the reach or
/// joint box, scales log-uniform in [0.1, 1.0].
pub fn random_init(model: &ProductModel, seed: u64) -> Result<ProductModel> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x696e_6974);
    let mut out = model.clone();
    let reach: f64 = out.tree.joints().iter().map(|j| j.length).sum();
    let limits = out.tree.limits().to_vec();
    for entry in &mut out.entries {
        for expert in &mut entry.expert {
            let mut flat = expert.flat();
            let sigma = rng.random_range(0.1f64.ln()..=0.0);
            for (field, span) in expert.field_spans() {
                for i in span {
                    match field {
                        ParamField::Location => {
                            flat[i] = match entry.map {
                                TaskMap::Identity => {
                                    let j = i.min(limits.len() - 1);
                                    rng.random_range(limits[j][0]..=limits[j][1])
                                }
                                TaskMap::LogManipulability { .. } => rng.random_range(-1.0..=2.0),
                                _ => rng.random_range(-reach..=reach),
                            };
                        }
                        ParamField::Scale => flat[i] = sigma,
                        ParamField::MixWeight => flat[i] = 0.0,
                    }
                }
            }
            expert.set_flat(&flat)?;
        }
    }
    Ok(out)
}

/// Copies the pinned parameter fields from the reference model into the
/// initial model, so conditioning information enters training exactly as
/// given.
pub fn copy_fixed_fields(
    init: &mut ProductModel,
    reference: &ProductModel,
    fixed: &[FixedFields],
) -> Result<()> {
    for fix in fixed {
        let src = reference
            .entries
            .get(fix.entry)
            .ok_or_else(|| Error::Invalid(format!("fixed entry {} out of range", fix.entry)))?;
        let dst = init
            .entries
            .get_mut(fix.entry)
            .ok_or_else(|| Error::Invalid(format!("fixed entry {} out of range", fix.entry)))?;
        if src.expert.len() != dst.expert.len() {
            return Err(Error::Dimension(format!(
                "entry {}: {} reference experts vs {}",
                fix.entry,
                src.expert.len(),
                dst.expert.len()
            )));
        }
        for (se, de) in src.expert.iter().zip(dst.expert.iter_mut()) {
            let sf = se.flat();
            let mut df = de.flat();
            for (field, span) in se.field_spans() {
                if fix.fields.contains(&field) {
                    for i in span {
                        df[i] = sf[i];
                    }
                }
            }
            de.set_flat(&df)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn presets_build_and_validate() {
        for name in ScenarioConfig::preset_names() {
            let config = ScenarioConfig::preset(name).unwrap();
            assert_eq!(&config.name, name);
            config.validate().unwrap();
        }
        assert!(ScenarioConfig::preset("nope").is_err());
    }

    #[test]
    fn preset_json_round_trips() {
        let config = ScenarioConfig::preset("bimanual").unwrap();
        let text = serde_json::to_string(&config).unwrap();
        let back: ScenarioConfig = serde_json::from_str(&text).unwrap();
        back.validate().unwrap();
        assert_eq!(back.pipelines, config.pipelines);
    }

    #[test]
    fn empty_pipeline_list_is_rejected() {
        let mut config = ScenarioConfig::preset("reach2d_config").unwrap();
        config.pipelines.clear();
        assert!(config.validate().is_err());
    }

    #[test]
    fn hierarchy_with_cd_is_rejected() {
        let mut config = ScenarioConfig::preset("bimanual").unwrap();
        config.pipelines.push(Pipeline::PoeCd);
        assert!(config.validate().is_err());
    }

    #[test]
    fn generated_config_samples_match_the_target_mean() {
        let config = ScenarioConfig::preset("reach2d_config").unwrap();
        let gen = generate_scenario(&config, 30).unwrap();
        assert_eq!(gen.dataset.n(), 30);
        let mean = gen.dataset.samples.row_mean();
        assert_relative_eq!(mean[0], 0.7, epsilon = 0.1);
        assert_relative_eq!(mean[1], 0.6, epsilon = 0.1);
    }

    #[test]
    fn generation_is_deterministic() {
        let config = ScenarioConfig::preset("reach2d_task").unwrap();
        let a = generate_scenario(&config, 10).unwrap();
        let b = generate_scenario(&config, 10).unwrap();
        assert_eq!(a.dataset.samples, b.dataset.samples);
    }

    #[test]
    fn bimanual_samples_satisfy_the_primary_task() {
        let config = ScenarioConfig::preset("bimanual").unwrap();
        let gen = generate_scenario(&config, 100).unwrap();
        let model = &config.model;
        let labels = gen.dataset.situations.as_ref().unwrap();
        let mut hits = 0;
        let mut total = 0;
        for r in 0..gen.dataset.n() {
            let q = gen.dataset.samples.row(r).transpose();
            let y = model.entries[0].map.apply(&model.tree, &q).unwrap();
            let target = match &model.entries[0].expert[labels[r]] {
                ExpertParams::Isotropic { mean, .. } => {
                    nalgebra::DVector::from_column_slice(mean)
                }
                other => panic!("unexpected family {other:?}"),
            };
            if (y - target).amax() <= 3.0 * 0.02 {
                hits += 1;
            }
            total += 1;
        }
        assert!(
            hits as f64 >= 0.99 * total as f64,
            "{hits}/{total} samples within 3 sigma of the primary target per axis"
        );
    }

    #[test]
    fn random_init_respects_boxes_and_is_seeded() {
        let config = ScenarioConfig::preset("reach2d_both").unwrap();
        let a = random_init(&config.model, 7).unwrap();
        let b = random_init(&config.model, 7).unwrap();
        let c = random_init(&config.model, 8).unwrap();
        for (ea, eb) in a.entries.iter().zip(&b.entries) {
            assert_eq!(ea.expert[0].flat(), eb.expert[0].flat());
        }
        assert_ne!(a.entries[0].expert[0].flat(), c.entries[0].expert[0].flat());
        match &a.entries[1].expert[0] {
            ExpertParams::Isotropic { mean, log_sigma } => {
                let pi = std::f64::consts::PI;
                assert!(mean.iter().all(|&m| (-pi..=pi).contains(&m)));
                assert!((0.1f64.ln()..=0.0).contains(log_sigma));
            }
            other => panic!("unexpected family {other:?}"),
        }
    }

    #[test]
    fn fixed_fields_are_copied_from_the_reference() {
        let config = ScenarioConfig::preset("tool_conditional").unwrap();
        let mut init = random_init(&config.model, 3).unwrap();
        copy_fixed_fields(
            &mut init,
            &config.model,
            &[FixedFields {
                entry: 0,
                fields: vec![ParamField::Location],
            }],
        )
        .unwrap();
        for (ie, ge) in init.entries[0].expert.iter().zip(&config.model.entries[0].expert) {
            match (ie, ge) {
                (
                    ExpertParams::Isotropic { mean: mi, log_sigma: si },
                    ExpertParams::Isotropic { mean: mg, log_sigma: sg },
                ) => {
                    assert_eq!(mi, mg);
                    assert_ne!(si, sg);
                }
                other => panic!("unexpected families {other:?}"),
            }
        }
    }
}
