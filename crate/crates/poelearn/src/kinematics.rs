//! Planar kinematic trees and the task-space transformations built on them.
//!
//! A tree is a forest of revolute joints; joint `i` may only have a parent
//! with a smaller index. Each joint carries a rigid link of positive length
//! along its local x axis, and the attachment frame of link `i` sits at the
//! link tip, rotated by the cumulative joint angle.

use nalgebra::{DMatrix, DVector, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Damping used for pseudo-inverses inside nullspace projections.
pub const DEFAULT_DAMPING: f64 = 1e-8;

/// Lower clamp for the log-determinant of the manipulability matrix.
pub const MANIP_LOG_FLOOR: f64 = -1e9;

/// Wrap an angle to the half-open interval (-pi, pi].
pub fn wrap_angle(a: f64) -> f64 {
    let t = a.rem_euclid(std::f64::consts::TAU);
    if t > std::f64::consts::PI {
        t - std::f64::consts::TAU
    } else {
        t
    }
}

fn rot90(v: Vector2<f64>) -> Vector2<f64> {
    Vector2::new(-v.y, v.x)
}

fn rot(a: f64) -> nalgebra::Matrix2<f64> {
    let (s, c) = a.sin_cos();
    nalgebra::Matrix2::new(c, -s, s, c)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Joint {
    /// Parent joint index; `None` attaches the joint to the base.
    pub parent: Option<usize>,
    /// Link length, strictly positive.
    pub length: f64,
    /// Constant angle added to the joint variable.
    #[serde(default)]
    pub offset: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct KinematicTree {
    joints: Vec<Joint>,
    base_xy: [f64; 2],
    base_angle: f64,
    limits: Vec<[f64; 2]>,
}

/// Pose of one link: joint origin, cumulative (unwrapped) angle, link tip.
#[derive(Clone, Debug)]
pub struct Frame {
    pub origin: Vector2<f64>,
    pub angle: f64,
    pub tip: Vector2<f64>,
}

impl KinematicTree {
    pub fn new(
        joints: Vec<Joint>,
        base_xy: [f64; 2],
        base_angle: f64,
        limits: Vec<[f64; 2]>,
    ) -> Result<Self> {
        if joints.is_empty() {
            return Err(Error::Invalid("tree needs at least one joint".into()));
        }
        if limits.len() != joints.len() {
            return Err(Error::Dimension(format!(
                "{} joints but {} limit pairs",
                joints.len(),
                limits.len()
            )));
        }
        for (i, j) in joints.iter().enumerate() {
            if let Some(p) = j.parent {
                if p >= i {
                    return Err(Error::Invalid(format!(
                        "joint {i} has parent {p}; parents must precede children"
                    )));
                }
            }
            if !(j.length > 0.0) || !j.length.is_finite() {
                return Err(Error::Invalid(format!(
                    "joint {i} has non-positive length {}",
                    j.length
                )));
            }
        }
        for (i, l) in limits.iter().enumerate() {
            if !(l[0] < l[1]) {
                return Err(Error::Invalid(format!(
                    "joint {i} limits [{}, {}] are not ordered",
                    l[0], l[1]
                )));
            }
        }
        Ok(Self {
            joints,
            base_xy,
            base_angle,
            limits,
        })
    }

    /// Serial chain with all limits equal; the common case in tests.
    pub fn chain(lengths: &[f64], limit: [f64; 2]) -> Result<Self> {
        let joints = lengths
            .iter()
            .enumerate()
            .map(|(i, &length)| Joint {
                parent: if i == 0 { None } else { Some(i - 1) },
                length,
                offset: 0.0,
            })
            .collect();
        Self::new(joints, [0.0, 0.0], 0.0, vec![limit; lengths.len()])
    }

    pub fn dof(&self) -> usize {
        self.joints.len()
    }

    pub fn joints(&self) -> &[Joint] {
        &self.joints
    }

    pub fn limits(&self) -> &[[f64; 2]] {
        &self.limits
    }

    pub fn base_xy(&self) -> Vector2<f64> {
        Vector2::new(self.base_xy[0], self.base_xy[1])
    }

    pub fn base_angle(&self) -> f64 {
        self.base_angle
    }

    fn check_q(&self, q: &DVector<f64>) -> Result<()> {
        if q.len() != self.dof() {
            return Err(Error::Dimension(format!(
                "configuration has {} entries, tree has {} joints",
                q.len(),
                self.dof()
            )));
        }
        Ok(())
    }

    fn check_link(&self, link: usize) -> Result<()> {
        if link >= self.dof() {
            return Err(Error::Invalid(format!(
                "link {link} out of range ({} joints)",
                self.dof()
            )));
        }
        Ok(())
    }

    /// One pose per link, computed in index order (parents first).
    pub fn frames(&self, q: &DVector<f64>) -> Result<Vec<Frame>> {
        self.check_q(q)?;
        let mut out: Vec<Frame> = Vec::with_capacity(self.dof());
        for (i, joint) in self.joints.iter().enumerate() {
            let (origin, base) = match joint.parent {
                None => (self.base_xy(), self.base_angle),
                Some(p) => (out[p].tip, out[p].angle),
            };
            let angle = base + joint.offset + q[i];
            let tip = origin + joint.length * Vector2::new(angle.cos(), angle.sin());
            out.push(Frame { origin, angle, tip });
        }
        Ok(out)
    }

    /// Joint indices from the root down to `link`, inclusive.
    pub fn ancestors(&self, link: usize) -> Vec<usize> {
        let mut chain = Vec::new();
        let mut cur = Some(link);
        while let Some(i) = cur {
            chain.push(i);
            cur = self.joints[i].parent;
        }
        chain.reverse();
        chain
    }

    pub fn fk_position(&self, q: &DVector<f64>, link: usize) -> Result<Vector2<f64>> {
        self.check_link(link)?;
        Ok(self.frames(q)?[link].tip)
    }

    pub fn fk_orientation(&self, q: &DVector<f64>, link: usize) -> Result<f64> {
        self.check_link(link)?;
        Ok(wrap_angle(self.frames(q)?[link].angle))
    }

    /// Jacobian of a world point rigidly attached to `link`.
    fn point_jacobian(&self, frames: &[Frame], link: usize, point: Vector2<f64>) -> DMatrix<f64> {
        let mut j = DMatrix::zeros(2, self.dof());
        for k in self.ancestors(link) {
            let col = rot90(point - frames[k].origin);
            j[(0, k)] = col.x;
            j[(1, k)] = col.y;
        }
        j
    }

    /// Derivative of the position Jacobian of the tip of `link` with respect
    /// to q_k. Only ancestor columns are nonzero.
    fn point_jacobian_derivative(
        &self,
        frames: &[Frame],
        link: usize,
        k: usize,
    ) -> DMatrix<f64> {
        let chain = self.ancestors(link);
        let mut dj = DMatrix::zeros(2, self.dof());
        let Some(kpos) = chain.iter().position(|&c| c == k) else {
            return dj;
        };
        let tip = frames[link].tip;
        let col_k = rot90(tip - frames[k].origin);
        for (jpos, &jidx) in chain.iter().enumerate() {
            // d/dq_k of column j = rot90(dp/dq_k - do_j/dq_k); the joint
            // origin o_j moves under q_k only when k is a proper ancestor.
            let dorigin = if kpos < jpos {
                rot90(frames[jidx].origin - frames[k].origin)
            } else {
                Vector2::zeros()
            };
            let dcol = rot90(col_k - dorigin);
            dj[(0, jidx)] = dcol.x;
            dj[(1, jidx)] = dcol.y;
        }
        dj
    }

    /// log det(J J^T) for the position Jacobian of `link`, clamped from below
    /// at `MANIP_LOG_FLOOR` at singularities. The clamp triggers relative to
    /// the trace so that exact singularities hit it despite rounding noise.
    pub fn manipulability_log(&self, q: &DVector<f64>, link: usize) -> Result<f64> {
        self.check_link(link)?;
        let frames = self.frames(q)?;
        let j = self.point_jacobian(&frames, link, frames[link].tip);
        match manip_det(&j) {
            Some(det) => Ok(det.ln().max(MANIP_LOG_FLOOR)),
            None => Ok(MANIP_LOG_FLOOR),
        }
    }

    /// Mass-weighted mean of link midpoints.
    pub fn com(&self, q: &DVector<f64>, masses: &[f64]) -> Result<Vector2<f64>> {
        if masses.len() != self.dof() {
            return Err(Error::Dimension(format!(
                "{} masses for {} links",
                masses.len(),
                self.dof()
            )));
        }
        let total: f64 = masses.iter().sum();
        if !(total > 0.0) {
            return Err(Error::Invalid("total mass must be positive".into()));
        }
        let frames = self.frames(q)?;
        let mut com = Vector2::zeros();
        for (f, &m) in frames.iter().zip(masses) {
            com += m * 0.5 * (f.origin + f.tip);
        }
        Ok(com / total)
    }

    /// World position of `local` expressed in the tip frame of `link`.
    pub fn body_point(&self, frames: &[Frame], link: usize, local: Vector2<f64>) -> Vector2<f64> {
        frames[link].tip + rot(frames[link].angle) * local
    }

    /// Iterative task-space projection: q <- q + pinv(J) (target - F(q)).
    /// Used as a sampler building block; it has no supported gradient.
    pub fn ik_project(
        &self,
        q0: &DVector<f64>,
        link: usize,
        target: Vector2<f64>,
        iters: usize,
        damping: f64,
    ) -> Result<IkResult> {
        self.check_link(link)?;
        self.check_q(q0)?;
        let mut q = q0.clone();
        let mut used = 0;
        let mut res = (target - self.fk_position(&q, link)?).norm();
        for _ in 0..iters {
            if res < 1e-12 {
                break;
            }
            let frames = self.frames(&q)?;
            let r = target - frames[link].tip;
            let j = self.point_jacobian(&frames, link, frames[link].tip);
            let step = damped_pinv(&j, damping) * DVector::from_column_slice(r.as_slice());
            // full pseudo-inverse step when it helps, halved otherwise so
            // unreachable targets settle on the workspace boundary
            let mut alpha = 1.0;
            let mut accepted = false;
            for _ in 0..12 {
                let cand = &q + alpha * &step;
                let cand_res = (target - self.fk_position(&cand, link)?).norm();
                if cand_res <= res {
                    q = cand;
                    res = cand_res;
                    accepted = true;
                    break;
                }
                alpha *= 0.5;
            }
            used += 1;
            if !accepted {
                break;
            }
        }
        let residual = (target - self.fk_position(&q, link)?).norm();
        Ok(IkResult {
            q,
            residual,
            iters: used,
        })
    }
}

#[derive(Clone, Debug)]
pub struct IkResult {
    pub q: DVector<f64>,
    pub residual: f64,
    pub iters: usize,
}

/// A point rigidly attached to a link, expressed in the link tip frame.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BodyPoint {
    pub link: usize,
    pub local: [f64; 2],
}

/// Task-space transformation of a configuration.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskMap {
    /// Tip position of a link.
    Position { link: usize },
    /// Cumulative link orientation, wrapped to (-pi, pi].
    Orientation { link: usize },
    /// A tool point `offset` expressed in the link tip frame.
    Tool { link: usize, offset: [f64; 2] },
    /// log det(J J^T) of the link position Jacobian.
    LogManipulability { link: usize },
    /// Mass-weighted mean of link midpoints.
    CenterOfMass { masses: Vec<f64> },
    /// Euclidean distances between body points and fixed world targets,
    /// paired index by index.
    RelativeDistance {
        points: Vec<BodyPoint>,
        targets: Vec<[f64; 2]>,
    },
    /// The configuration itself.
    Identity,
    /// Position of `link` after `iters` pseudo-inverse projection steps
    /// toward `target`. Sampling-only: no gradient.
    Projection {
        link: usize,
        target: [f64; 2],
        iters: usize,
    },
}

impl TaskMap {
    pub fn kind_name(&self) -> &'static str {
        match self {
            TaskMap::Position { .. } => "position",
            TaskMap::Orientation { .. } => "orientation",
            TaskMap::Tool { .. } => "tool",
            TaskMap::LogManipulability { .. } => "log_manipulability",
            TaskMap::CenterOfMass { .. } => "center_of_mass",
            TaskMap::RelativeDistance { .. } => "relative_distance",
            TaskMap::Identity => "identity",
            TaskMap::Projection { .. } => "projection",
        }
    }

    /// True when joint angles enter only through sin and cos, so shifting
    /// any joint by a full turn leaves the view unchanged.
    pub fn periodic(&self) -> bool {
        match self {
            TaskMap::Position { .. }
            | TaskMap::Tool { .. }
            | TaskMap::LogManipulability { .. }
            | TaskMap::CenterOfMass { .. }
            | TaskMap::RelativeDistance { .. } => true,
            TaskMap::Identity | TaskMap::Orientation { .. } | TaskMap::Projection { .. } => false,
        }
    }

    pub fn output_dim(&self, tree: &KinematicTree) -> Result<usize> {
        Ok(match self {
            TaskMap::Position { .. } | TaskMap::Tool { .. } | TaskMap::CenterOfMass { .. } => 2,
            TaskMap::Orientation { .. } | TaskMap::LogManipulability { .. } => 1,
            TaskMap::RelativeDistance { points, targets } => {
                if points.len() != targets.len() || points.is_empty() {
                    return Err(Error::Invalid(
                        "relative_distance needs matching, non-empty point/target lists".into(),
                    ));
                }
                points.len()
            }
            TaskMap::Identity => tree.dof(),
            TaskMap::Projection { .. } => 2,
        })
    }

    pub fn apply(&self, tree: &KinematicTree, q: &DVector<f64>) -> Result<DVector<f64>> {
        tree.check_q(q)?;
        match self {
            TaskMap::Position { link } => {
                let p = tree.fk_position(q, *link)?;
                Ok(DVector::from_column_slice(p.as_slice()))
            }
            TaskMap::Orientation { link } => {
                Ok(DVector::from_element(1, tree.fk_orientation(q, *link)?))
            }
            TaskMap::Tool { link, offset } => {
                tree.check_link(*link)?;
                let frames = tree.frames(q)?;
                let p = tree.body_point(&frames, *link, Vector2::new(offset[0], offset[1]));
                Ok(DVector::from_column_slice(p.as_slice()))
            }
            TaskMap::LogManipulability { link } => Ok(DVector::from_element(
                1,
                tree.manipulability_log(q, *link)?,
            )),
            TaskMap::CenterOfMass { masses } => {
                let c = tree.com(q, masses)?;
                Ok(DVector::from_column_slice(c.as_slice()))
            }
            TaskMap::RelativeDistance { points, targets } => {
                self.output_dim(tree)?;
                let frames = tree.frames(q)?;
                let mut out = DVector::zeros(points.len());
                for (i, (pt, tg)) in points.iter().zip(targets).enumerate() {
                    tree.check_link(pt.link)?;
                    let x = tree.body_point(&frames, pt.link, Vector2::new(pt.local[0], pt.local[1]));
                    out[i] = (x - Vector2::new(tg[0], tg[1])).norm();
                }
                Ok(out)
            }
            TaskMap::Identity => Ok(q.clone()),
            TaskMap::Projection {
                link,
                target,
                iters,
            } => {
                let res = tree.ik_project(
                    q,
                    *link,
                    Vector2::new(target[0], target[1]),
                    *iters,
                    DEFAULT_DAMPING,
                )?;
                let p = tree.fk_position(&res.q, *link)?;
                Ok(DVector::from_column_slice(p.as_slice()))
            }
        }
    }

    pub fn jacobian(&self, tree: &KinematicTree, q: &DVector<f64>) -> Result<DMatrix<f64>> {
        tree.check_q(q)?;
        match self {
            TaskMap::Position { link } => {
                tree.check_link(*link)?;
                let frames = tree.frames(q)?;
                Ok(tree.point_jacobian(&frames, *link, frames[*link].tip))
            }
            TaskMap::Tool { link, offset } => {
                tree.check_link(*link)?;
                let frames = tree.frames(q)?;
                let p = tree.body_point(&frames, *link, Vector2::new(offset[0], offset[1]));
                Ok(tree.point_jacobian(&frames, *link, p))
            }
            TaskMap::Orientation { link } => {
                tree.check_link(*link)?;
                let mut j = DMatrix::zeros(1, tree.dof());
                for k in tree.ancestors(*link) {
                    j[(0, k)] = 1.0;
                }
                Ok(j)
            }
            TaskMap::LogManipulability { link } => {
                tree.check_link(*link)?;
                let frames = tree.frames(q)?;
                let jp = tree.point_jacobian(&frames, *link, frames[*link].tip);
                let m = &jp * jp.transpose();
                let mut g = DMatrix::zeros(1, tree.dof());
                let Some(det) = manip_det(&jp) else {
                    return Ok(g); // clamped region is flat
                };
                let minv = nalgebra::Matrix2::new(m[(1, 1)], -m[(0, 1)], -m[(1, 0)], m[(0, 0)])
                    / det;
                for k in tree.ancestors(*link) {
                    let dj = tree.point_jacobian_derivative(&frames, *link, k);
                    // d logdet = 2 tr(M^-1 dJ J^T)
                    let prod = &dj * jp.transpose();
                    let mut tr = 0.0;
                    for r in 0..2 {
                        for c in 0..2 {
                            tr += minv[(r, c)] * prod[(c, r)];
                        }
                    }
                    g[(0, k)] = 2.0 * tr;
                }
                Ok(g)
            }
            TaskMap::CenterOfMass { masses } => {
                if masses.len() != tree.dof() {
                    return Err(Error::Dimension(format!(
                        "{} masses for {} links",
                        masses.len(),
                        tree.dof()
                    )));
                }
                let total: f64 = masses.iter().sum();
                let frames = tree.frames(q)?;
                let mut j = DMatrix::zeros(2, tree.dof());
                for (i, &mass) in masses.iter().enumerate() {
                    let mid = 0.5 * (frames[i].origin + frames[i].tip);
                    j += (mass / total) * tree.point_jacobian(&frames, i, mid);
                }
                Ok(j)
            }
            TaskMap::RelativeDistance { points, targets } => {
                self.output_dim(tree)?;
                let frames = tree.frames(q)?;
                let mut j = DMatrix::zeros(points.len(), tree.dof());
                for (i, (pt, tg)) in points.iter().zip(targets).enumerate() {
                    tree.check_link(pt.link)?;
                    let x = tree.body_point(&frames, pt.link, Vector2::new(pt.local[0], pt.local[1]));
                    let diff = x - Vector2::new(tg[0], tg[1]);
                    let dist = diff.norm();
                    if dist < 1e-12 {
                        continue; // non-differentiable point, leave the row zero
                    }
                    let jp = tree.point_jacobian(&frames, pt.link, x);
                    let row = (diff.transpose() / dist) * jp;
                    j.row_mut(i).copy_from(&row);
                }
                Ok(j)
            }
            TaskMap::Identity => Ok(DMatrix::identity(tree.dof(), tree.dof())),
            TaskMap::Projection { .. } => Err(Error::UnsupportedGradient("projection")),
        }
    }
}

/// det(J J^T), or `None` when it is singular up to rounding noise.
fn manip_det(j: &DMatrix<f64>) -> Option<f64> {
    let m = j * j.transpose();
    let det = m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)];
    let scale = 0.5 * (m[(0, 0)] + m[(1, 1)]);
    if !det.is_finite() || det <= 1e-14 * scale * scale {
        None
    } else {
        Some(det)
    }
}

/// Damped pseudo-inverse. With `lambda > 0` this is the Tikhonov form
/// J^T (J J^T + lambda I)^-1 (or its tall transpose); with `lambda <= 0`
/// it falls back to an SVD pseudo-inverse.
pub fn damped_pinv(j: &DMatrix<f64>, lambda: f64) -> DMatrix<f64> {
    if lambda > 0.0 {
        if j.nrows() <= j.ncols() {
            let gram = j * j.transpose() + lambda * DMatrix::identity(j.nrows(), j.nrows());
            let inv = gram
                .clone()
                .cholesky()
                .map(|c| c.inverse())
                .unwrap_or_else(|| svd_pinv(&gram));
            j.transpose() * inv
        } else {
            let gram = j.transpose() * j + lambda * DMatrix::identity(j.ncols(), j.ncols());
            let inv = gram
                .clone()
                .cholesky()
                .map(|c| c.inverse())
                .unwrap_or_else(|| svd_pinv(&gram));
            inv * j.transpose()
        }
    } else {
        svd_pinv(j)
    }
}

fn svd_pinv(j: &DMatrix<f64>) -> DMatrix<f64> {
    let svd = j.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let eps = 1e-12 * smax.max(1.0);
    svd.pseudo_inverse(eps)
        .unwrap_or_else(|_| DMatrix::zeros(j.ncols(), j.nrows()))
}

/// N = I - pinv(J) J, the projector onto motions invisible to `J`.
pub fn nullspace_projector(j: &DMatrix<f64>, lambda: f64) -> DMatrix<f64> {
    let n = j.ncols();
    DMatrix::identity(n, n) - damped_pinv(j, lambda) * j
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn two_r() -> KinematicTree {
        KinematicTree::chain(&[1.0, 1.0], [-PI, PI]).unwrap()
    }

    fn qv(vals: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(vals)
    }

    /// Independent FK oracle: a stack of 3x3 homogeneous transforms.
    fn oracle_fk(tree: &KinematicTree, q: &DVector<f64>) -> Vec<(Vector2<f64>, f64)> {
        fn hom(angle: f64, tx: f64, ty: f64) -> nalgebra::Matrix3<f64> {
            let (s, c) = angle.sin_cos();
            nalgebra::Matrix3::new(c, -s, tx, s, c, ty, 0.0, 0.0, 1.0)
        }
        let base = hom(tree.base_angle(), tree.base_xy().x, tree.base_xy().y);
        let mut tips: Vec<nalgebra::Matrix3<f64>> = Vec::new();
        let mut out = Vec::new();
        for (i, joint) in tree.joints().iter().enumerate() {
            let parent = match joint.parent {
                None => base,
                Some(p) => tips[p],
            };
            let t = parent * hom(joint.offset + q[i], 0.0, 0.0) * hom(0.0, joint.length, 0.0);
            tips.push(t);
            let tip = Vector2::new(t[(0, 2)], t[(1, 2)]);
            let ang = t[(1, 0)].atan2(t[(0, 0)]);
            out.push((tip, ang));
        }
        out
    }

    fn random_tree(rng: &mut ChaCha8Rng) -> KinematicTree {
        let n = rng.random_range(1..=6usize);
        let joints = (0..n)
            .map(|i| Joint {
                parent: if i == 0 {
                    None
                } else if rng.random_bool(0.8) {
                    Some(i - 1)
                } else {
                    Some(rng.random_range(0..i))
                },
                length: rng.random_range(0.3..1.2),
                offset: rng.random_range(-0.6..0.6),
            })
            .collect();
        KinematicTree::new(
            joints,
            [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)],
            rng.random_range(-1.0..1.0),
            vec![[-PI, PI]; n],
        )
        .unwrap()
    }

    fn random_q(rng: &mut ChaCha8Rng, dof: usize) -> DVector<f64> {
        DVector::from_fn(dof, |_, _| rng.random_range(-1.4..1.4))
    }

    fn fd_jacobian(
        map: &TaskMap,
        tree: &KinematicTree,
        q: &DVector<f64>,
        h: f64,
    ) -> DMatrix<f64> {
        let dim = map.output_dim(tree).unwrap();
        let mut j = DMatrix::zeros(dim, tree.dof());
        for k in 0..tree.dof() {
            let mut qp = q.clone();
            let mut qm = q.clone();
            qp[k] += h;
            qm[k] -= h;
            let fp = map.apply(tree, &qp).unwrap();
            let fm = map.apply(tree, &qm).unwrap();
            j.set_column(k, &((fp - fm) / (2.0 * h)));
        }
        j
    }

    #[test]
    fn fk_known_values() {
        let tree = two_r();
        let p = tree.fk_position(&qv(&[0.0, 0.0]), 1).unwrap();
        assert_relative_eq!(p.x, 2.0, epsilon = 1e-12);
        assert_relative_eq!(p.y, 0.0, epsilon = 1e-12);

        let p = tree.fk_position(&qv(&[FRAC_PI_2, -FRAC_PI_2]), 1).unwrap();
        assert_relative_eq!(p.x, 1.0, epsilon = 1e-12);
        assert_relative_eq!(p.y, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn orientation_wraps() {
        let tree = two_r();
        let a = tree.fk_orientation(&qv(&[FRAC_PI_2, FRAC_PI_2]), 1).unwrap();
        assert_relative_eq!(a, PI, epsilon = 1e-12);
        let a = tree.fk_orientation(&qv(&[PI, FRAC_PI_2]), 1).unwrap();
        assert_relative_eq!(a, -FRAC_PI_2, epsilon = 1e-12);
    }

    #[test]
    fn fk_matches_transform_stack_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let tree = random_tree(&mut rng);
            let q = random_q(&mut rng, tree.dof());
            let oracle = oracle_fk(&tree, &q);
            let frames = tree.frames(&q).unwrap();
            for (f, (tip, ang)) in frames.iter().zip(&oracle) {
                assert_relative_eq!(f.tip.x, tip.x, epsilon = 1e-12);
                assert_relative_eq!(f.tip.y, tip.y, epsilon = 1e-12);
                assert_relative_eq!(wrap_angle(f.angle), wrap_angle(*ang), epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn jacobian_known_value() {
        let tree = two_r();
        let j = TaskMap::Position { link: 1 }
            .jacobian(&tree, &qv(&[0.0, 0.0]))
            .unwrap();
        let expect = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 2.0, 1.0]);
        assert_relative_eq!((j - expect).norm(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn jacobians_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let h = 1e-6;
        let mut checked = 0;
        while checked < 100 {
            let tree = random_tree(&mut rng);
            let q = random_q(&mut rng, tree.dof());
            let link = rng.random_range(0..tree.dof());
            let masses: Vec<f64> = (0..tree.dof()).map(|_| rng.random_range(0.2..2.0)).collect();
            let maps = vec![
                TaskMap::Position { link },
                TaskMap::Tool {
                    link,
                    offset: [rng.random_range(-0.4..0.4), rng.random_range(-0.4..0.4)],
                },
                TaskMap::Orientation { link },
                TaskMap::CenterOfMass { masses },
                TaskMap::LogManipulability { link },
                TaskMap::RelativeDistance {
                    points: vec![BodyPoint {
                        link,
                        local: [0.1, -0.2],
                    }],
                    targets: vec![[3.0, 3.0]],
                },
                TaskMap::Identity,
            ];
            for map in maps {
                if let TaskMap::Orientation { .. } = map {
                    // keep away from the wrap discontinuity
                    if tree.fk_orientation(&q, link).unwrap().abs() > 3.0 {
                        continue;
                    }
                }
                if let TaskMap::LogManipulability { .. } = map {
                    let v = tree.manipulability_log(&q, link).unwrap();
                    if v < -6.0 {
                        continue; // too close to singular for finite differences
                    }
                }
                let j = map.jacobian(&tree, &q).unwrap();
                let jfd = fd_jacobian(&map, &tree, &q, h);
                let rel = (&j - &jfd).norm() / j.norm().max(1.0);
                assert!(
                    rel < 1e-6,
                    "{} map rel err {rel:.3e}\nanalytic {j}\nfd {jfd}",
                    map.kind_name()
                );
            }
            checked += 1;
        }
    }

    #[test]
    fn projection_map_has_no_gradient() {
        let tree = two_r();
        let map = TaskMap::Projection {
            link: 1,
            target: [1.0, 1.0],
            iters: 10,
        };
        assert!(matches!(
            map.jacobian(&tree, &qv(&[0.2, 0.3])),
            Err(Error::UnsupportedGradient("projection"))
        ));
        // but it still evaluates, to something near the target
        let y = map.apply(&tree, &qv(&[0.2, 0.3])).unwrap();
        assert!((Vector2::new(y[0], y[1]) - Vector2::new(1.0, 1.0)).norm() < 1e-6);
    }

    #[test]
    fn non_ancestor_columns_are_zero() {
        // two branches off joint 0: joint 1 and joint 2 are siblings
        let tree = KinematicTree::new(
            vec![
                Joint { parent: None, length: 0.5, offset: 0.0 },
                Joint { parent: Some(0), length: 0.7, offset: 0.3 },
                Joint { parent: Some(0), length: 0.9, offset: -0.3 },
            ],
            [0.0, 0.0],
            0.0,
            vec![[-PI, PI]; 3],
        )
        .unwrap();
        let q = qv(&[0.4, -0.2, 0.8]);
        let j = TaskMap::Position { link: 1 }.jacobian(&tree, &q).unwrap();
        assert_eq!(j[(0, 2)], 0.0);
        assert_eq!(j[(1, 2)], 0.0);
        let j = TaskMap::Position { link: 2 }.jacobian(&tree, &q).unwrap();
        assert_eq!(j[(0, 1)], 0.0);
        assert_eq!(j[(1, 1)], 0.0);
    }

    #[test]
    fn manipulability_values() {
        let tree = two_r();
        // det(J J^T) = sin^2(q2) for unit links
        let v = tree.manipulability_log(&qv(&[0.3, FRAC_PI_2]), 1).unwrap();
        assert_relative_eq!(v, 0.0, epsilon = 1e-12);
        let v = tree.manipulability_log(&qv(&[0.3, 0.0]), 1).unwrap();
        assert_eq!(v, MANIP_LOG_FLOOR);
        // gradient: d/dq2 log sin^2 q2 = 2 cot q2
        let g = TaskMap::LogManipulability { link: 1 }
            .jacobian(&tree, &qv(&[0.3, 0.7]))
            .unwrap();
        assert_relative_eq!(g[(0, 0)], 0.0, epsilon = 1e-10);
        assert_relative_eq!(g[(0, 1)], 2.0 / 0.7f64.tan(), epsilon = 1e-10);
    }

    #[test]
    fn manipulability_ignores_base_pose() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..50 {
            let tree = random_tree(&mut rng);
            let q = random_q(&mut rng, tree.dof());
            let link = rng.random_range(0..tree.dof());
            let moved = KinematicTree::new(
                tree.joints().to_vec(),
                [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)],
                rng.random_range(-3.0..3.0),
                tree.limits().to_vec(),
            )
            .unwrap();
            let a = tree.manipulability_log(&q, link).unwrap();
            let b = moved.manipulability_log(&q, link).unwrap();
            assert_relative_eq!(a, b, epsilon = 1e-9, max_relative = 1e-9);
        }
    }

    #[test]
    fn com_unit_link() {
        let tree = KinematicTree::chain(&[1.0], [-PI, PI]).unwrap();
        let c = tree.com(&qv(&[0.0]), &[1.0]).unwrap();
        assert_relative_eq!(c.x, 0.5, epsilon = 1e-12);
        assert_relative_eq!(c.y, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn relative_distance_at_target() {
        let tree = two_r();
        let map = TaskMap::RelativeDistance {
            points: vec![BodyPoint { link: 1, local: [0.0, 0.0] }],
            targets: vec![[2.0, 0.0]],
        };
        let d = map.apply(&tree, &qv(&[0.0, 0.0])).unwrap();
        assert_relative_eq!(d[0], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn pinv_known_and_penrose() {
        let j = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let p = damped_pinv(&j, 0.0);
        assert_relative_eq!(p[(0, 0)], 1.0, epsilon = 1e-12);
        assert_relative_eq!(p[(1, 0)], 0.0, epsilon = 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..100 {
            let j = DMatrix::from_fn(2, 5, |_, _| rng.random_range(-1.0..1.0));
            let p = damped_pinv(&j, 0.0);
            let e1 = (&j * &p * &j - &j).norm();
            let e2 = (&p * &j * &p - &p).norm();
            let jp = &j * &p;
            let pj = &p * &j;
            let e3 = (&jp - jp.transpose()).norm();
            let e4 = (&pj - pj.transpose()).norm();
            assert!(e1 < 1e-8 && e2 < 1e-8 && e3 < 1e-8 && e4 < 1e-8);
        }
    }

    #[test]
    fn nullspace_projector_properties() {
        let j = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let n = nullspace_projector(&j, 0.0);
        let expect = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 1.0]);
        assert_relative_eq!((&n - expect).norm(), 0.0, epsilon = 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(37);
        for _ in 0..100 {
            let rows = rng.random_range(1..4usize);
            let cols = rng.random_range(rows..7usize);
            let j = DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0));
            let n = nullspace_projector(&j, 0.0);
            assert!((&j * &n).norm() < 1e-8, "JN not zero");
            assert!((&n * &n - &n).norm() < 1e-8, "N not idempotent");
            // the damped default stays close to a projector away from
            // rank deficiency
            let smin = j.clone().svd(false, false).singular_values.min();
            if smin > 0.1 {
                let nd = nullspace_projector(&j, DEFAULT_DAMPING);
                assert!((&j * &nd).norm() < 1e-5);
                assert!((&nd * &nd - &nd).norm() < 1e-5);
            }
        }
    }

    #[test]
    fn ik_reachable_and_unreachable() {
        let tree = two_r();
        let res = tree
            .ik_project(&qv(&[0.3, 0.5]), 1, Vector2::new(1.0, 1.0), 50, DEFAULT_DAMPING)
            .unwrap();
        assert!(res.residual < 1e-6, "residual {}", res.residual);
        assert!(res.iters <= 50);

        let res = tree
            .ik_project(&qv(&[0.3, 0.5]), 1, Vector2::new(3.0, 0.0), 500, 1e-6)
            .unwrap();
        assert!((res.residual - 1.0).abs() < 1e-3, "residual {}", res.residual);
        // chain stretches along +x; a 1e-3 residual slack allows ~0.1 rad
        assert!(wrap_angle(res.q[0]).abs() < 0.1);
        assert!(wrap_angle(res.q[1]).abs() < 0.1);
    }

    #[test]
    fn validation_errors() {
        assert!(KinematicTree::chain(&[], [-1.0, 1.0]).is_err());
        assert!(KinematicTree::chain(&[0.0], [-1.0, 1.0]).is_err());
        assert!(KinematicTree::chain(&[1.0], [1.0, -1.0]).is_err());
        assert!(KinematicTree::new(
            vec![
                Joint { parent: Some(1), length: 1.0, offset: 0.0 },
                Joint { parent: None, length: 1.0, offset: 0.0 },
            ],
            [0.0, 0.0],
            0.0,
            vec![[-1.0, 1.0]; 2],
        )
        .is_err());
        let tree = two_r();
        assert!(tree.fk_position(&qv(&[0.0]), 1).is_err());
        assert!(tree.fk_position(&qv(&[0.0, 0.0]), 5).is_err());
        assert!(tree.com(&qv(&[0.0, 0.0]), &[1.0]).is_err());
    }

    #[test]
    fn wrap_angle_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for _ in 0..1000 {
            let a = rng.random_range(-50.0..50.0);
            let w = wrap_angle(a);
            assert!(w > -PI && w <= PI, "{a} wrapped to {w}");
            // same angle modulo 2 pi
            let m = (a - w).rem_euclid(std::f64::consts::TAU);
            assert!(m < 1e-9 || std::f64::consts::TAU - m < 1e-9, "{a} -> {w}");
        }
        assert_eq!(wrap_angle(PI), PI);
        assert_eq!(wrap_angle(-PI), PI);
    }
}
