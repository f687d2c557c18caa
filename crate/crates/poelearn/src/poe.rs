//! Product-of-experts density over joint configurations.
//!
//! Each entry pushes the configuration through a task map and scores the
//! result with an expert; the unnormalized log-density is the sum. Priorities
//! declare a strict hierarchy: gradients of lower-priority entries can be
//! filtered through the nullspace of all higher-priority task Jacobians.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experts::{ExpertParams, ParamField, SIGMA_FLOOR};
use crate::kinematics::{nullspace_projector, KinematicTree, TaskMap};

/// Damping used for hierarchy nullspace projectors.
pub const NS_DAMPING: f64 = 1e-8;

/// Split of an expert's parameter fields into situation-shared and
/// situation-specific sets. Every field class the family exposes must appear
/// in exactly one of the two lists.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SituationBinding {
    pub tied: Vec<ParamField>,
    pub per_situation: Vec<ParamField>,
}

impl SituationBinding {
    pub fn is_per_situation(&self, field: ParamField) -> bool {
        self.per_situation.contains(&field)
    }

    fn validate(&self, expert: &ExpertParams) -> Result<()> {
        for (field, _) in expert.field_spans() {
            let t = self.tied.contains(&field);
            let p = self.per_situation.contains(&field);
            if t == p {
                return Err(Error::Invalid(format!(
                    "field {field:?} of {} must be either tied or per-situation",
                    expert.family_name()
                )));
            }
        }
        Ok(())
    }
}

/// One expert attached to one task map.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelEntry {
    pub map: TaskMap,
    /// One element without a binding; one per situation with one.
    pub expert: Vec<ExpertParams>,
    /// 0 is the highest priority level.
    pub priority: usize,
    pub situation: Option<SituationBinding>,
}

impl ModelEntry {
    pub fn single(map: TaskMap, expert: ExpertParams, priority: usize) -> Self {
        Self {
            map,
            expert: vec![expert],
            priority,
            situation: None,
        }
    }

    pub fn expert_for(&self, situation: usize) -> Result<&ExpertParams> {
        if self.situation.is_none() {
            return Ok(&self.expert[0]);
        }
        self.expert.get(situation).ok_or(Error::SituationOutOfRange {
            index: situation,
            count: self.expert.len(),
        })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProductModel {
    pub tree: KinematicTree,
    pub entries: Vec<ModelEntry>,
    /// Entry indices whose map carries trainable parameters (tool offsets).
    pub trainable_maps: Vec<usize>,
}

impl ProductModel {
    pub fn new(tree: KinematicTree, entries: Vec<ModelEntry>) -> Result<Self> {
        let model = Self {
            tree,
            entries,
            trainable_maps: Vec::new(),
        };
        model.validate()?;
        Ok(model)
    }

    pub fn with_trainable_maps(mut self, entries: Vec<usize>) -> Result<Self> {
        self.trainable_maps = entries;
        self.validate()?;
        Ok(self)
    }

    pub fn dof(&self) -> usize {
        self.tree.dof()
    }

    /// Number of situation labels the bound entries expect (1 if none bound).
    pub fn n_situations(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.situation.is_some())
            .map(|e| e.expert.len())
            .max()
            .unwrap_or(1)
    }

    pub fn n_levels(&self) -> usize {
        self.entries.iter().map(|e| e.priority).max().unwrap_or(0) + 1
    }

    pub fn has_hierarchy(&self) -> bool {
        self.n_levels() > 1
    }

    /// True when the density is invariant under full-turn joint shifts:
    /// every expert view is trigonometric in q. On such models and
    /// full-circle limits, configuration space is a torus and samples or
    /// component means may be wrapped into the limit box exactly.
    pub fn periodic(&self) -> bool {
        self.entries.iter().all(|e| e.map.periodic())
    }

    pub fn validate(&self) -> Result<()> {
        if self.entries.is_empty() {
            return Err(Error::Invalid("product model needs at least one entry".into()));
        }
        let n_situations = self.n_situations();
        for (i, e) in self.entries.iter().enumerate() {
            let out = e.map.output_dim(&self.tree)?;
            for variant in &e.expert {
                if variant.dim() != out {
                    return Err(Error::Dimension(format!(
                        "entry {i}: map {} outputs dim {} but expert has dim {}",
                        e.map.kind_name(),
                        out,
                        variant.dim()
                    )));
                }
            }
            match &e.situation {
                None => {
                    if e.expert.len() != 1 {
                        return Err(Error::Invalid(format!(
                            "entry {i}: unbound entries carry exactly one expert"
                        )));
                    }
                }
                Some(binding) => {
                    if e.expert.len() != n_situations {
                        return Err(Error::Invalid(format!(
                            "entry {i}: {} situation variants, model has {}",
                            e.expert.len(),
                            n_situations
                        )));
                    }
                    binding.validate(&e.expert[0])?;
                }
            }
        }
        let levels = self.n_levels();
        for l in 0..levels {
            if !self.entries.iter().any(|e| e.priority == l) {
                return Err(Error::Invalid(format!(
                    "priority levels must be contiguous; level {l} is empty"
                )));
            }
        }
        for &i in &self.trainable_maps {
            let entry = self.entries.get(i).ok_or_else(|| {
                Error::Invalid(format!("trainable map index {i} out of range"))
            })?;
            if !matches!(entry.map, TaskMap::Tool { .. }) {
                return Err(Error::Invalid(format!(
                    "entry {i} has no trainable map parameters ({})",
                    entry.map.kind_name()
                )));
            }
        }
        Ok(())
    }

    /// Unnormalized log-density. For hierarchical models this is the plain
    /// sum over all entries; it is NOT the density whose gradient is
    /// [`grad_q_ns`](Self::grad_q_ns).
    pub fn log_unnorm(&self, q: &DVector<f64>, situation: usize) -> Result<f64> {
        self.check_q(q, situation)?;
        let mut total = 0.0;
        for e in &self.entries {
            let y = e.map.apply(&self.tree, q)?;
            total += e.expert_for(situation)?.logpdf(&y)?;
        }
        Ok(total)
    }

    /// Exact chain-rule gradient of `log_unnorm` in q.
    pub fn grad_q(&self, q: &DVector<f64>, situation: usize) -> Result<DVector<f64>> {
        self.check_q(q, situation)?;
        let mut g = DVector::zeros(self.dof());
        for e in &self.entries {
            g += self.entry_grad_q(e, q, situation)?;
        }
        Ok(g)
    }

    /// Hierarchy-filtered gradient: level-0 contributions pass unchanged, a
    /// level-l contribution is projected into the nullspace of the stacked
    /// Jacobians of every level above it, all evaluated at q.
    pub fn grad_q_ns(&self, q: &DVector<f64>, situation: usize) -> Result<DVector<f64>> {
        self.check_q(q, situation)?;
        let dof = self.dof();
        let mut g = DVector::zeros(dof);
        for level in 0..self.n_levels() {
            let mut g_level = DVector::zeros(dof);
            for e in self.entries.iter().filter(|e| e.priority == level) {
                g_level += self.entry_grad_q(e, q, situation)?;
            }
            if level == 0 {
                g += g_level;
            } else {
                let stacked = self.stacked_jacobian_above(q, level)?;
                g += nullspace_projector(&stacked, NS_DAMPING) * g_level;
            }
        }
        Ok(g)
    }

    fn entry_grad_q(
        &self,
        e: &ModelEntry,
        q: &DVector<f64>,
        situation: usize,
    ) -> Result<DVector<f64>> {
        let y = e.map.apply(&self.tree, q)?;
        let j = e.map.jacobian(&self.tree, q)?;
        let gy = e.expert_for(situation)?.grad_y(&y)?;
        Ok(j.transpose() * gy)
    }

    /// Row-stacked Jacobians of all entries with priority below `level`.
    fn stacked_jacobian_above(&self, q: &DVector<f64>, level: usize) -> Result<DMatrix<f64>> {
        let dof = self.dof();
        let mut rows = Vec::new();
        for e in self.entries.iter().filter(|e| e.priority < level) {
            rows.push(e.map.jacobian(&self.tree, q)?);
        }
        let total: usize = rows.iter().map(|j| j.nrows()).sum();
        let mut stacked = DMatrix::zeros(total, dof);
        let mut r = 0;
        for j in rows {
            stacked.view_mut((r, 0), (j.nrows(), dof)).copy_from(&j);
            r += j.nrows();
        }
        Ok(stacked)
    }

    /// True when every map supports analytic gradients.
    pub fn differentiable(&self) -> bool {
        !self
            .entries
            .iter()
            .any(|e| matches!(e.map, TaskMap::Projection { .. }))
    }

    fn check_q(&self, q: &DVector<f64>, situation: usize) -> Result<()> {
        if q.len() != self.dof() {
            return Err(Error::Dimension(format!(
                "model has {} dof, configuration has {}",
                self.dof(),
                q.len()
            )));
        }
        let n = self.n_situations();
        if situation >= n {
            return Err(Error::SituationOutOfRange {
                index: situation,
                count: n,
            });
        }
        Ok(())
    }

    /// Convenience gradient over the default full trainable layout.
    pub fn grad_params(&self, q: &DVector<f64>, situation: usize) -> Result<DVector<f64>> {
        ParamLayout::new(self, &[])?.grad(self, q, situation)
    }

    /// Gradient ascent on `log_unnorm` with backtracking, for linearization
    /// points and sampler seeds.
    pub fn mode_find(
        &self,
        q0: &DVector<f64>,
        situation: usize,
        max_iters: usize,
    ) -> Result<ModeResult> {
        let mut q = q0.clone();
        let mut value = self.log_unnorm(&q, situation)?;
        let mut iters = 0;
        while iters < max_iters {
            let g = self.grad_q(&q, situation)?;
            let grad_norm = g.norm();
            if grad_norm < 1e-6 {
                return Ok(ModeResult {
                    q,
                    grad_norm,
                    iters,
                    converged: true,
                });
            }
            let mut alpha = 1.0 / grad_norm.max(1.0);
            let mut accepted = false;
            for _ in 0..30 {
                let cand = &q + alpha * &g;
                if let Ok(v) = self.log_unnorm(&cand, situation) {
                    if v > value {
                        q = cand;
                        value = v;
                        accepted = true;
                        break;
                    }
                }
                alpha *= 0.5;
            }
            iters += 1;
            if !accepted {
                break;
            }
        }
        let grad_norm = self.grad_q(&q, situation)?.norm();
        Ok(ModeResult {
            q,
            grad_norm,
            iters,
            converged: grad_norm < 1e-6,
        })
    }
}

#[derive(Clone, Debug)]
pub struct ModeResult {
    pub q: DVector<f64>,
    pub grad_norm: f64,
    pub iters: usize,
    pub converged: bool,
}

/// One contiguous slice of the trainable vector.
#[derive(Clone, Debug)]
enum Block {
    /// Expert field span, shared across situations (written to all variants).
    Tied {
        entry: usize,
        span: std::ops::Range<usize>,
    },
    /// Expert field span of one situation variant.
    Situated {
        entry: usize,
        span: std::ops::Range<usize>,
        situation: usize,
    },
    /// Tool offset of one entry's map (2 slots).
    MapOffset { entry: usize },
}

impl Block {
    fn len(&self) -> usize {
        match self {
            Block::Tied { span, .. } | Block::Situated { span, .. } => span.len(),
            Block::MapOffset { .. } => 2,
        }
    }
}

/// Fields excluded from training for one entry.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FixedFields {
    pub entry: usize,
    pub fields: Vec<ParamField>,
}

/// Flattening of all trainable parameters of a model into one vector.
///
/// Layout: entries in model order; within an entry, field spans in the
/// expert's flat order, tied spans once, situation-bound spans repeated per
/// situation index; trainable map offsets follow all expert blocks.
#[derive(Clone, Debug)]
pub struct ParamLayout {
    blocks: Vec<Block>,
    offsets: Vec<usize>,
    n_params: usize,
}

impl ParamLayout {
    pub fn new(model: &ProductModel, fixed: &[FixedFields]) -> Result<Self> {
        let n_situations = model.n_situations();
        let is_fixed = |entry: usize, field: ParamField| {
            fixed
                .iter()
                .any(|f| f.entry == entry && f.fields.contains(&field))
        };
        let mut blocks = Vec::new();
        for (i, e) in model.entries.iter().enumerate() {
            for (field, span) in e.expert[0].field_spans() {
                if is_fixed(i, field) {
                    continue;
                }
                match &e.situation {
                    Some(b) if b.is_per_situation(field) => {
                        for s in 0..n_situations {
                            blocks.push(Block::Situated {
                                entry: i,
                                span: span.clone(),
                                situation: s,
                            });
                        }
                    }
                    _ => blocks.push(Block::Tied {
                        entry: i,
                        span: span.clone(),
                    }),
                }
            }
        }
        for &i in &model.trainable_maps {
            blocks.push(Block::MapOffset { entry: i });
        }
        let mut offsets = Vec::with_capacity(blocks.len());
        let mut n = 0;
        for b in &blocks {
            offsets.push(n);
            n += b.len();
        }
        Ok(Self {
            blocks,
            offsets,
            n_params: n,
        })
    }

    pub fn n_params(&self) -> usize {
        self.n_params
    }

    pub fn read(&self, model: &ProductModel) -> DVector<f64> {
        let mut out = DVector::zeros(self.n_params);
        for (b, &off) in self.blocks.iter().zip(&self.offsets) {
            match b {
                Block::Tied { entry, span } => {
                    let flat = model.entries[*entry].expert[0].flat();
                    for (k, i) in span.clone().enumerate() {
                        out[off + k] = flat[i];
                    }
                }
                Block::Situated {
                    entry,
                    span,
                    situation,
                } => {
                    let flat = model.entries[*entry].expert[*situation].flat();
                    for (k, i) in span.clone().enumerate() {
                        out[off + k] = flat[i];
                    }
                }
                Block::MapOffset { entry } => {
                    if let TaskMap::Tool { offset, .. } = &model.entries[*entry].map {
                        out[off] = offset[0];
                        out[off + 1] = offset[1];
                    }
                }
            }
        }
        out
    }

    /// Write a trainable vector back, keeping scale floors intact.
    pub fn write(&self, model: &mut ProductModel, v: &DVector<f64>) -> Result<()> {
        if v.len() != self.n_params {
            return Err(Error::Dimension(format!(
                "layout has {} parameters, got {}",
                self.n_params,
                v.len()
            )));
        }
        for (b, &off) in self.blocks.iter().zip(&self.offsets) {
            match b {
                Block::Tied { entry, span } => {
                    let e = &mut model.entries[*entry];
                    for variant in e.expert.iter_mut() {
                        let mut flat = variant.flat();
                        for (k, i) in span.clone().enumerate() {
                            flat[i] = v[off + k];
                        }
                        variant.set_flat(&flat)?;
                    }
                }
                Block::Situated {
                    entry,
                    span,
                    situation,
                } => {
                    let variant = &mut model.entries[*entry].expert[*situation];
                    let mut flat = variant.flat();
                    for (k, i) in span.clone().enumerate() {
                        flat[i] = v[off + k];
                    }
                    variant.set_flat(&flat)?;
                }
                Block::MapOffset { entry } => {
                    if let TaskMap::Tool { offset, .. } = &mut model.entries[*entry].map {
                        offset[0] = v[off];
                        offset[1] = v[off + 1];
                    }
                }
            }
        }
        for e in &mut model.entries {
            for variant in e.expert.iter_mut() {
                variant.clamp_scales(SIGMA_FLOOR.ln());
            }
        }
        Ok(())
    }

    /// Gradient of `log_unnorm(q, situation)` in the trainable vector.
    /// Situation-bound blocks of other situations stay zero.
    pub fn grad(
        &self,
        model: &ProductModel,
        q: &DVector<f64>,
        situation: usize,
    ) -> Result<DVector<f64>> {
        model.check_q(q, situation)?;
        let mut out = DVector::zeros(self.n_params);
        let mut cache: Vec<Option<DVector<f64>>> = vec![None; model.entries.len()];
        let mut grad_of = |entry: usize| -> Result<DVector<f64>> {
            if cache[entry].is_none() {
                let e = &model.entries[entry];
                let y = e.map.apply(&model.tree, q)?;
                cache[entry] = Some(e.expert_for(situation)?.grad_params(&y)?);
            }
            Ok(cache[entry].clone().unwrap())
        };
        for (b, &off) in self.blocks.iter().zip(&self.offsets) {
            match b {
                Block::Tied { entry, span } => {
                    let g = grad_of(*entry)?;
                    for (k, i) in span.clone().enumerate() {
                        out[off + k] = g[i];
                    }
                }
                Block::Situated {
                    entry,
                    span,
                    situation: s,
                } => {
                    if *s == situation {
                        let g = grad_of(*entry)?;
                        for (k, i) in span.clone().enumerate() {
                            out[off + k] = g[i];
                        }
                    }
                }
                Block::MapOffset { entry } => {
                    let e = &model.entries[*entry];
                    let TaskMap::Tool { link, .. } = e.map else {
                        continue;
                    };
                    let y = e.map.apply(&model.tree, q)?;
                    let gy = e.expert_for(situation)?.grad_y(&y)?;
                    let ang = model.tree.frames(q)?[link].angle;
                    let (s, c) = ang.sin_cos();
                    // y = tip + R(ang) d, so d-gradient is R^T grad_y
                    out[off] = c * gy[0] + s * gy[1];
                    out[off + 1] = -s * gy[0] + c * gy[1];
                }
            }
        }
        Ok(out)
    }
}

/// Density interface consumed by the variational fitter: gradient always,
/// log-density only when the model admits one.
pub trait Target {
    fn dim(&self) -> usize;
    fn logpdf(&self, q: &DVector<f64>) -> Option<f64>;
    fn grad(&self, q: &DVector<f64>) -> DVector<f64>;
}

/// Plain product target: gradient and log-density.
pub struct PoeTarget<'a> {
    model: &'a ProductModel,
    situation: usize,
}

impl<'a> PoeTarget<'a> {
    pub fn new(model: &'a ProductModel, situation: usize) -> Result<Self> {
        if !model.differentiable() {
            return Err(Error::UnsupportedGradient("projection"));
        }
        model.check_q(&DVector::zeros(model.dof()), situation)?;
        Ok(Self { model, situation })
    }
}

impl Target for PoeTarget<'_> {
    fn dim(&self) -> usize {
        self.model.dof()
    }

    fn logpdf(&self, q: &DVector<f64>) -> Option<f64> {
        self.model.log_unnorm(q, self.situation).ok()
    }

    fn grad(&self, q: &DVector<f64>) -> DVector<f64> {
        self.model
            .grad_q(q, self.situation)
            .unwrap_or_else(|_| DVector::zeros(q.len()))
    }
}

/// Hierarchy target: nullspace-filtered gradient only, no density.
pub struct PoensTarget<'a> {
    model: &'a ProductModel,
    situation: usize,
}

impl<'a> PoensTarget<'a> {
    pub fn new(model: &'a ProductModel, situation: usize) -> Result<Self> {
        if !model.differentiable() {
            return Err(Error::UnsupportedGradient("projection"));
        }
        model.check_q(&DVector::zeros(model.dof()), situation)?;
        Ok(Self { model, situation })
    }
}

impl Target for PoensTarget<'_> {
    fn dim(&self) -> usize {
        self.model.dof()
    }

    fn logpdf(&self, _q: &DVector<f64>) -> Option<f64> {
        None
    }

    fn grad(&self, q: &DVector<f64>) -> DVector<f64> {
        self.model
            .grad_q_ns(q, self.situation)
            .unwrap_or_else(|_| DVector::zeros(q.len()))
    }
}

/// Restricts a target to the joint-limit box with a quadratic penalty on
/// violations. Task maps are trigonometric, so the bare product repeats
/// every 2 pi per joint and a variational component can grow across the
/// copies without ever paying for it; the barrier removes that escape and
/// matches the physical support.
pub struct BoxedTarget<'a, T: Target + ?Sized> {
    inner: &'a T,
    limits: Vec<[f64; 2]>,
    stiffness: f64,
}

impl<'a, T: Target + ?Sized> BoxedTarget<'a, T> {
    pub fn new(inner: &'a T, limits: &[[f64; 2]]) -> Result<Self> {
        if limits.len() != inner.dim() {
            return Err(Error::Dimension(format!(
                "{} limits for a {}-dimensional target",
                limits.len(),
                inner.dim()
            )));
        }
        Ok(Self {
            inner,
            limits: limits.to_vec(),
            stiffness: 0.05,
        })
    }

    fn violation(&self, j: usize, v: f64) -> f64 {
        (v - self.limits[j][1]).max(0.0) + (v - self.limits[j][0]).min(0.0)
    }
}

impl<T: Target + ?Sized> Target for BoxedTarget<'_, T> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn logpdf(&self, q: &DVector<f64>) -> Option<f64> {
        let s2 = self.stiffness * self.stiffness;
        let penalty: f64 = (0..q.len())
            .map(|j| {
                let v = self.violation(j, q[j]);
                v * v / (2.0 * s2)
            })
            .sum();
        self.inner.logpdf(q).map(|lp| lp - penalty)
    }

    fn grad(&self, q: &DVector<f64>) -> DVector<f64> {
        let mut g = self.inner.grad(q);
        let s2 = self.stiffness * self.stiffness;
        for j in 0..q.len() {
            g[j] -= self.violation(j, q[j]) / s2;
        }
        g
    }
}
