//! Keyframes, batch fusion, loop closure, pose-graph optimization and the
//! vector map file format.

use crate::exec::{self, Execution};
use crate::features::LineFeature;
use crate::geometry::{normalize_angle, perp, Line2, Point2, Pose2};
use crate::registration::{
    can_merge, overlap_ratio, pseudo_frame, register, MatchConfig, MergeThresholds,
};
use crate::sim::Label;
use nalgebra::{DMatrix, DVector, Matrix2, Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use thiserror::Error;

pub const MAP_MAGIC: &[u8; 5] = b"GSMAP";
pub const MAP_FORMAT_VERSION: u32 = 1;
/// Bytes per batch in the binary body.
pub const BINARY_BATCH_BYTES: usize = 12 * 8;

#[derive(Debug, Error, PartialEq)]
pub enum MappingError {
    #[error("batch has no observations")]
    EmptyBatch,
    #[error("pose graph has no nodes")]
    EmptyGraph,
    #[error("pose graph has no prior factor")]
    NoPrior,
    #[error("pose graph is disconnected ({0} components)")]
    Disconnected(usize),
    #[error("factor {0} references a missing node")]
    BadFactor(usize),
    #[error("information matrix of factor {0} is not symmetric positive definite")]
    NotSpd(usize),
    #[error("optimization diverged")]
    Diverged,
}

#[derive(Debug, Error, PartialEq)]
pub enum MapFormatError {
    #[error("not a map file")]
    BadMagic,
    #[error("unsupported map format version {0}")]
    UnsupportedVersion(u32),
    #[error("unknown body encoding {0}")]
    UnknownEncoding(u8),
    #[error("truncated map file")]
    Truncated,
    #[error("non-finite value in map")]
    NonFinite,
    #[error("invalid label code {0}")]
    BadLabel(f64),
    #[error("malformed map body: {0}")]
    Malformed(String),
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

pub fn sigmoid(l: f64) -> f64 {
    1.0 / (1.0 + (-l).exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MappingConfig {
    pub kf_trans: f64,
    pub kf_rot: f64,
    pub top_k: usize,
    pub conf_min: f64,
    pub conf_max: f64,
    pub log_odds_cap: f64,
    pub prune_min: f64,
    pub merge: MergeThresholds,
    pub loop_search_radius: f64,
    pub loop_kf_gap: u32,
    pub loop_p_min: f64,
    pub loop_max_candidates: usize,
    /// Point spacing when lines are sampled into a pseudo-frame.
    pub sample_spacing: f64,
}

impl Default for MappingConfig {
    fn default() -> Self {
        Self {
            kf_trans: 0.5,
            kf_rot: 10f64.to_radians(),
            top_k: 5,
            conf_min: 0.05,
            conf_max: 0.95,
            log_odds_cap: 12.0,
            prune_min: 0.3,
            merge: MergeThresholds::default(),
            loop_search_radius: 10.0,
            loop_kf_gap: 20,
            loop_p_min: 0.6,
            loop_max_candidates: 5,
            sample_spacing: 0.05,
        }
    }
}

impl MappingConfig {
    /// Log-odds increment of one observation with confidence `c`.
    pub fn evidence(&self, c: f64) -> f64 {
        logit(c.clamp(self.conf_min, self.conf_max))
    }
}

/// One line observation with a provenance tag used for de-duplication.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub line: LineFeature,
    pub provenance: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Batch {
    pub fused: LineFeature,
    pub log_odds: f64,
    /// Best observations, at most `top_k`.
    pub observations: Vec<Observation>,
    pub obs_count: u64,
}

impl Batch {
    pub fn new(obs: Observation, log_odds: f64) -> Self {
        Self {
            fused: obs.line,
            log_odds,
            observations: vec![obs],
            obs_count: 1,
        }
    }

    pub fn probability(&self) -> f64 {
        sigmoid(self.log_odds)
    }
}

/// Inserts `obs` into a top-`k` list ranked by confidence; on equal
/// confidence the newer observation wins. An observation with the same
/// provenance replaces the old one.
pub fn insert_top_k(list: &mut Vec<Observation>, obs: Observation, k: usize) {
    if let Some(slot) = list.iter_mut().find(|o| o.provenance == obs.provenance) {
        *slot = obs;
        return;
    }
    list.push(obs);
    if list.len() > k.max(1) {
        // evict the weakest, oldest first
        let (idx, _) = list
            .iter()
            .enumerate()
            .min_by(|(ia, a), (ib, b)| {
                a.line
                    .confidence
                    .total_cmp(&b.line.confidence)
                    .then(ia.cmp(ib))
            })
            .expect("nonempty");
        list.remove(idx);
    }
}

/// Fused line of a batch's stored observations.
///
/// Centroid and normal are confidence-weighted means, the direction is the
/// principal axis of the weighted member endpoints, and the confidence is
/// `Σc² / Σc`.
pub fn fuse_observations(obs: &[Observation]) -> Result<LineFeature, MappingError> {
    if obs.is_empty() {
        return Err(MappingError::EmptyBatch);
    }
    if obs.len() == 1 {
        return Ok(obs[0].line);
    }
    let weights: Vec<f64> = obs.iter().map(|o| o.line.confidence.max(1e-12)).collect();
    let wsum: f64 = weights.iter().sum();
    let centroid = obs
        .iter()
        .zip(&weights)
        .map(|(o, w)| o.line.geometry.centroid * *w)
        .sum::<Point2>()
        / wsum;
    let mean_normal = obs
        .iter()
        .zip(&weights)
        .map(|(o, w)| o.line.geometry.normal * *w)
        .sum::<Point2>();
    let mut scatter = Matrix2::zeros();
    for (o, w) in obs.iter().zip(&weights) {
        for e in [o.line.geometry.endpoint_a, o.line.geometry.endpoint_b] {
            let d = e - centroid;
            scatter += d * d.transpose() * *w;
        }
    }
    let axis = crate::features::principal_axis(&scatter);
    let ortho = mean_normal - axis * mean_normal.dot(&axis);
    let normal = if ortho.norm() > 1e-9 {
        ortho.normalize()
    } else {
        let n = perp(axis);
        if n.dot(&mean_normal) < 0.0 {
            -n
        } else {
            n
        }
    };
    let probe = Line2::from_normal(centroid, normal, 0.0, 0.0);
    let (lo, hi) = obs
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), o| {
            let a = probe.project(o.line.geometry.endpoint_a);
            let b = probe.project(o.line.geometry.endpoint_b);
            (lo.min(a.min(b)), hi.max(a.max(b)))
        });
    let confidence = obs.iter().map(|o| o.line.confidence.powi(2)).sum::<f64>()
        / obs.iter().map(|o| o.line.confidence).sum::<f64>();
    Ok(LineFeature {
        geometry: Line2::from_normal(centroid, normal, lo, hi),
        label: obs[0].line.label,
        confidence: if confidence.is_finite() {
            confidence
        } else {
            0.0
        },
        point_count: obs.iter().map(|o| o.line.point_count).sum(),
        contour_id: obs[0].line.contour_id,
    })
}

pub fn fuse_batch(b: &Batch) -> Result<LineFeature, MappingError> {
    fuse_observations(&b.observations)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Keyframe {
    pub id: u32,
    /// World pose.
    pub pose: Pose2,
    /// Lines in keyframe coordinates.
    pub batches: Vec<Batch>,
}

impl Keyframe {
    pub fn new(id: u32, pose: Pose2) -> Self {
        Self {
            id,
            pose,
            batches: Vec::new(),
        }
    }

    pub fn lines(&self) -> Vec<LineFeature> {
        self.batches
            .iter()
            .enumerate()
            .map(|(i, b)| LineFeature {
                contour_id: i as u32,
                ..b.fused
            })
            .collect()
    }
}

pub fn should_create_keyframe(delta: &Pose2, cfg: &MappingConfig) -> bool {
    delta.translation().norm() >= cfg.kf_trans || normalize_angle(delta.theta).abs() >= cfg.kf_rot
}

/// Index of the best mergeable line: smallest centroid offset, then index.
fn best_merge<'a>(
    line: &LineFeature,
    candidates: impl Iterator<Item = (usize, &'a LineFeature)>,
    th: &MergeThresholds,
) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, c) in candidates {
        if can_merge(line, c, th) {
            let d = c.geometry.signed_distance(line.geometry.centroid).abs();
            if best.is_none_or(|(bi, bd)| d < bd || (d == bd && i < bi)) {
                best = Some((i, d));
            }
        }
    }
    best.map(|(i, _)| i)
}

/// Merges every line of a frame into `kf`. `t_kf_frame` maps frame
/// coordinates into keyframe coordinates; `provenance` tags the lines as
/// `provenance + line index`.
pub fn merge_frame_into_keyframe(
    kf: &mut Keyframe,
    lines: &[LineFeature],
    t_kf_frame: &Pose2,
    provenance: u64,
    cfg: &MappingConfig,
) {
    for (li, line) in lines.iter().enumerate() {
        let moved = line.transformed(t_kf_frame);
        let obs = Observation {
            line: moved,
            provenance: provenance + li as u64,
        };
        let delta = cfg.evidence(line.confidence);
        let hit = best_merge(
            &moved,
            kf.batches.iter().map(|b| &b.fused).enumerate(),
            &cfg.merge,
        );
        match hit {
            Some(bi) => {
                let b = &mut kf.batches[bi];
                b.log_odds += delta;
                b.obs_count += 1;
                insert_top_k(&mut b.observations, obs, cfg.top_k);
                b.fused = fuse_batch(b).expect("batch keeps observations");
            }
            None => kf.batches.push(Batch::new(obs, delta)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FactorKind {
    Odometry,
    Prior,
    Loop,
    Localization,
}

/// A pose measurement. Unary factors (`Prior`, `Localization`) have `i == j`
/// and measure the node pose; the others measure `x_i⁻¹ ∘ x_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct Factor {
    pub kind: FactorKind,
    pub i: usize,
    pub j: usize,
    pub measurement: Pose2,
    pub information: Matrix3<f64>,
}

impl Factor {
    pub fn unary(
        kind: FactorKind,
        i: usize,
        measurement: Pose2,
        information: Matrix3<f64>,
    ) -> Self {
        Self {
            kind,
            i,
            j: i,
            measurement,
            information,
        }
    }

    pub fn between(
        kind: FactorKind,
        i: usize,
        j: usize,
        measurement: Pose2,
        information: Matrix3<f64>,
    ) -> Self {
        Self {
            kind,
            i,
            j,
            measurement,
            information,
        }
    }

    pub fn is_unary(&self) -> bool {
        matches!(self.kind, FactorKind::Prior | FactorKind::Localization)
    }

    fn predicted(&self, poses: &[Pose2]) -> Pose2 {
        if self.is_unary() {
            poses[self.i]
        } else {
            poses[self.i].inverse().compose(&poses[self.j])
        }
    }

    pub fn residual(&self, poses: &[Pose2]) -> Vector3<f64> {
        self.predicted(poses).boxminus(&self.measurement)
    }

    pub fn cost(&self, poses: &[Pose2]) -> f64 {
        let r = self.residual(poses);
        (r.transpose() * self.information * r)[0]
    }
}

/// Diagonal information matrix from standard deviations.
pub fn information_from_sigmas(sigma_t: f64, sigma_r: f64) -> Matrix3<f64> {
    Matrix3::from_diagonal(&Vector3::new(
        1.0 / sigma_t.powi(2),
        1.0 / sigma_t.powi(2),
        1.0 / sigma_r.powi(2),
    ))
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PoseGraph {
    pub nodes: Vec<Pose2>,
    pub factors: Vec<Factor>,
}

impl PoseGraph {
    pub fn add_node(&mut self, pose: Pose2) -> usize {
        self.nodes.push(pose);
        self.nodes.len() - 1
    }

    pub fn add_factor(&mut self, f: Factor) {
        self.factors.push(f);
    }

    pub fn cost(&self, poses: &[Pose2]) -> f64 {
        self.factors.iter().map(|f| f.cost(poses)).sum()
    }

    pub fn validate(&self) -> Result<(), MappingError> {
        let n = self.nodes.len();
        if n == 0 {
            return Err(MappingError::EmptyGraph);
        }
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(p: &mut [usize], mut x: usize) -> usize {
            while p[x] != x {
                p[x] = p[p[x]];
                x = p[x];
            }
            x
        }
        let mut has_prior = false;
        for (k, f) in self.factors.iter().enumerate() {
            if f.i >= n || f.j >= n {
                return Err(MappingError::BadFactor(k));
            }
            let info = f.information;
            if (info - info.transpose()).abs().max() > 1e-9 * info.abs().max().max(1.0)
                || info.cholesky().is_none()
            {
                return Err(MappingError::NotSpd(k));
            }
            has_prior |= f.is_unary();
            let (a, b) = (find(&mut parent, f.i), find(&mut parent, f.j));
            parent[a] = b;
        }
        if !has_prior {
            return Err(MappingError::NoPrior);
        }
        let roots = (0..n).filter(|&x| find(&mut parent, x) == x).count();
        if roots > 1 {
            return Err(MappingError::Disconnected(roots));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizationResult {
    pub poses: Vec<Pose2>,
    pub iterations: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    /// Cost after each accepted step.
    pub cost_trace: Vec<f64>,
}

const LM_MAX_ITERATIONS: usize = 100;
const LM_REL_TOL: f64 = 1e-9;
const JACOBIAN_STEP: f64 = 1e-6;

/// Levenberg-Marquardt over right-perturbations of every node.
pub fn optimize_pose_graph(g: &PoseGraph) -> Result<OptimizationResult, MappingError> {
    g.validate()?;
    let n = g.nodes.len();
    let mut poses = g.nodes.clone();
    let mut cost = g.cost(&poses);
    let initial_cost = cost;
    let mut lambda = 1e-4;
    let mut trace = Vec::new();
    let mut iterations = 0;
    while iterations < LM_MAX_ITERATIONS && cost > 0.0 {
        iterations += 1;
        let mut h = DMatrix::<f64>::zeros(3 * n, 3 * n);
        let mut b = DVector::<f64>::zeros(3 * n);
        for f in &g.factors {
            let r = f.residual(&poses);
            let nodes: &[usize] = if f.is_unary() {
                &[f.i][..]
            } else {
                &[f.i, f.j][..]
            };
            let mut jac = [Matrix3::<f64>::zeros(); 2];
            for (slot, &node) in nodes.iter().enumerate() {
                for k in 0..3 {
                    let mut step = Vector3::zeros();
                    step[k] = JACOBIAN_STEP;
                    let mut p = poses.clone();
                    p[node] = poses[node].boxplus(step);
                    let rp = f.residual(&p);
                    p[node] = poses[node].boxplus(-step);
                    let rm = f.residual(&p);
                    jac[slot].set_column(k, &((rp - rm) / (2.0 * JACOBIAN_STEP)));
                }
            }
            for (sa, &na) in nodes.iter().enumerate() {
                let jt_l = jac[sa].transpose() * f.information;
                let ba = jt_l * r;
                for k in 0..3 {
                    b[3 * na + k] += ba[k];
                }
                for (sb, &nb) in nodes.iter().enumerate() {
                    let block = jt_l * jac[sb];
                    let mut view = h.fixed_view_mut::<3, 3>(3 * na, 3 * nb);
                    view += block;
                }
            }
        }
        let mut accepted = false;
        while lambda < 1e12 {
            let mut damped = h.clone();
            for k in 0..3 * n {
                damped[(k, k)] += lambda * h[(k, k)].max(1e-9);
            }
            let Some(chol) = damped.cholesky() else {
                lambda *= 10.0;
                continue;
            };
            let dx = chol.solve(&(-&b));
            let cand: Vec<Pose2> = (0..n)
                .map(|i| poses[i].boxplus(Vector3::new(dx[3 * i], dx[3 * i + 1], dx[3 * i + 2])))
                .collect();
            let new_cost = g.cost(&cand);
            if !new_cost.is_finite() {
                return Err(MappingError::Diverged);
            }
            if new_cost <= cost {
                let rel = (cost - new_cost) / cost.max(1e-300);
                poses = cand;
                cost = new_cost;
                trace.push(cost);
                lambda = (lambda / 10.0).max(1e-12);
                accepted = true;
                if rel < LM_REL_TOL {
                    return Ok(OptimizationResult {
                        poses,
                        iterations,
                        initial_cost,
                        final_cost: cost,
                        cost_trace: trace,
                    });
                }
                break;
            }
            lambda *= 10.0;
        }
        if !accepted {
            break;
        }
    }
    Ok(OptimizationResult {
        poses,
        iterations,
        initial_cost,
        final_cost: cost,
        cost_trace: trace,
    })
}

/// Loop-closure factor with its registration evidence.
#[derive(Debug, Clone, PartialEq)]
pub struct LoopClosure {
    pub factor: Factor,
    pub candidate_id: u32,
    pub overlap: f64,
    pub iterations: usize,
}

/// Information of a registration-derived factor: 1 cm / 0.06° at full
/// inlier ratio, weakened as the ratio drops.
pub fn registration_information(inlier_ratio: f64) -> Matrix3<f64> {
    let s = inlier_ratio.clamp(0.05, 1.0);
    information_from_sigmas(0.01, 1e-3) * s
}

/// Tries to close a loop from `current` to an older keyframe.
///
/// `node_of` maps keyframe ids to pose-graph node indices; the returned factor
/// uses those indices. Candidates are tried nearest first.
pub fn detect_loop(
    current: &Keyframe,
    candidates: &[Keyframe],
    node_of: &dyn Fn(u32) -> usize,
    cfg: &MappingConfig,
    icp: &MatchConfig,
    exec: Execution,
) -> Option<LoopClosure> {
    let mut near: Vec<(&Keyframe, f64)> = candidates
        .iter()
        .filter(|c| c.id + cfg.loop_kf_gap <= current.id)
        .map(|c| (c, c.pose.distance_to(&current.pose)))
        .filter(|(_, d)| *d <= cfg.loop_search_radius)
        .collect();
    near.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.id.cmp(&b.0.id)));
    near.truncate(cfg.loop_max_candidates);
    if near.is_empty() || current.batches.is_empty() {
        return None;
    }
    let cur_lines = current.lines();
    let src = pseudo_frame(&cur_lines, cfg.sample_spacing);
    let attempts = exec::map_slice(exec, &near, |(cand, _)| {
        let dst = pseudo_frame(&cand.lines(), cfg.sample_spacing);
        let init = cand.pose.inverse().compose(&current.pose);
        let r = register(&src, &dst, &init, icp);
        let p = overlap_ratio(&cur_lines, &dst.lines, &r.transform, &cfg.merge);
        (r, p)
    });
    near.iter().zip(attempts).find_map(|((cand, _), (r, p))| {
        (r.converged && p >= cfg.loop_p_min).then(|| LoopClosure {
            factor: Factor::between(
                FactorKind::Loop,
                node_of(cand.id),
                node_of(current.id),
                r.transform,
                registration_information(r.inlier_ratio),
            ),
            candidate_id: cand.id,
            overlap: p,
            iterations: r.iterations,
        })
    })
}

/// One map batch in world coordinates, stored exactly as serialized.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MapBatch {
    pub cx: f64,
    pub cy: f64,
    /// Direction angle.
    pub dir: f64,
    /// Normal angle.
    pub nrm: f64,
    pub ex1: f64,
    pub ey1: f64,
    pub ex2: f64,
    pub ey2: f64,
    pub label: Label,
    pub logodds: f64,
    pub nobs: u64,
    /// Keyframe that first contributed the batch.
    pub kf: u32,
    /// Observations backing the fused geometry; not persisted.
    #[serde(skip)]
    pub support: Vec<Observation>,
}

impl PartialEq for MapBatch {
    fn eq(&self, o: &Self) -> bool {
        self.fields() == o.fields()
            && self.label == o.label
            && self.nobs == o.nobs
            && self.kf == o.kf
    }
}

impl MapBatch {
    pub fn from_line(line: &LineFeature, logodds: f64, nobs: u64, kf: u32) -> Self {
        let g = &line.geometry;
        Self {
            cx: g.centroid.x,
            cy: g.centroid.y,
            dir: normalize_angle(g.direction.y.atan2(g.direction.x)),
            nrm: normalize_angle(g.normal.y.atan2(g.normal.x)),
            ex1: g.endpoint_a.x,
            ey1: g.endpoint_a.y,
            ex2: g.endpoint_b.x,
            ey2: g.endpoint_b.y,
            label: line.label,
            logodds,
            nobs,
            kf,
            support: Vec::new(),
        }
    }

    fn fields(&self) -> [u64; 9] {
        [
            self.cx,
            self.cy,
            self.dir,
            self.nrm,
            self.ex1,
            self.ey1,
            self.ex2,
            self.ey2,
            self.logodds,
        ]
        .map(f64::to_bits)
    }

    pub fn probability(&self) -> f64 {
        sigmoid(self.logodds)
    }

    pub fn line(&self) -> LineFeature {
        let a = Point2::new(self.ex1, self.ey1);
        let b = Point2::new(self.ex2, self.ey2);
        let normal = Point2::new(self.nrm.cos(), self.nrm.sin());
        LineFeature {
            geometry: Line2 {
                centroid: Point2::new(self.cx, self.cy),
                direction: Point2::new(self.dir.cos(), self.dir.sin()),
                normal,
                endpoint_a: a,
                endpoint_b: b,
                length: (b - a).norm(),
            },
            label: self.label,
            confidence: self.probability(),
            point_count: self.nobs as usize,
            contour_id: 0,
        }
    }

    /// Observations to re-fuse from; a loaded batch falls back to its own line.
    pub fn support_or_self(&self, provenance: u64) -> Vec<Observation> {
        if self.support.is_empty() {
            vec![Observation {
                line: self.line(),
                provenance,
            }]
        } else {
            self.support.clone()
        }
    }

    fn values(&self) -> [f64; 12] {
        [
            self.cx,
            self.cy,
            self.dir,
            self.nrm,
            self.ex1,
            self.ey1,
            self.ex2,
            self.ey2,
            self.label.code() as f64,
            self.logodds,
            self.nobs as f64,
            self.kf as f64,
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MapKeyframe {
    pub id: u32,
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl MapKeyframe {
    pub fn pose(&self) -> Pose2 {
        Pose2 {
            x: self.x,
            y: self.y,
            theta: self.theta,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct VectorMap {
    /// Revision counter, bumped by every update.
    pub version: u64,
    pub keyframes: Vec<MapKeyframe>,
    pub batches: Vec<MapBatch>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MapEncoding {
    Json,
    Binary,
}

impl VectorMap {
    /// Map lines with confidence `σ(log_odds)`, `contour_id` = batch index.
    pub fn lines(&self) -> Vec<LineFeature> {
        self.batches
            .iter()
            .enumerate()
            .map(|(i, b)| LineFeature {
                contour_id: i as u32,
                ..b.line()
            })
            .collect()
    }

    /// Indices of batches with a point within `radius` of `center`.
    pub fn batches_near(&self, center: Point2, radius: f64) -> Vec<usize> {
        (0..self.batches.len())
            .filter(|&i| self.batches[i].line().geometry.segment_distance(center) <= radius)
            .collect()
    }

    pub fn prune(&mut self, prune_min: f64) {
        self.batches.retain(|b| b.probability() >= prune_min);
    }
}

/// Uniform grid over line segments for merge candidate lookup.
pub(crate) struct SegmentGrid {
    cell: f64,
    buckets: HashMap<(i32, i32), Vec<usize>>,
}

impl SegmentGrid {
    pub(crate) fn new(cell: f64) -> Self {
        Self {
            cell,
            buckets: HashMap::new(),
        }
    }

    fn cells(&self, g: &Line2) -> Vec<(i32, i32)> {
        let steps = (g.length / (0.5 * self.cell)).ceil().max(1.0) as usize;
        let mut out = Vec::new();
        for s in 0..=steps {
            let q = g.endpoint_a + (g.endpoint_b - g.endpoint_a) * (s as f64 / steps as f64);
            let k = (
                (q.x / self.cell).floor() as i32,
                (q.y / self.cell).floor() as i32,
            );
            if !out.contains(&k) {
                out.push(k);
            }
        }
        out
    }

    pub(crate) fn insert(&mut self, g: &Line2, id: usize) {
        for k in self.cells(g) {
            let b = self.buckets.entry(k).or_default();
            if !b.contains(&id) {
                b.push(id);
            }
        }
    }

    /// Sorted ids registered within one cell of the segment.
    pub(crate) fn query(&self, g: &Line2) -> Vec<usize> {
        let mut out = Vec::new();
        for (cx, cy) in self.cells(g) {
            for dx in -1..=1 {
                for dy in -1..=1 {
                    if let Some(b) = self.buckets.get(&(cx + dx, cy + dy)) {
                        out.extend_from_slice(b);
                    }
                }
            }
        }
        out.sort_unstable();
        out.dedup();
        out
    }
}

/// Provenance tag of keyframe batch `(kf, index)`.
pub fn batch_provenance(kf: u32, index: usize) -> u64 {
    ((kf as u64) << 24) | index as u64
}

/// Merges world-frame batches into `map`. Returns how many were appended.
pub(crate) fn merge_into_map(
    map: &mut VectorMap,
    incoming: &[(Observation, f64, u64, u32)],
    cfg: &MappingConfig,
) -> usize {
    let mut grid = SegmentGrid::new(2.0);
    let mut lines: Vec<LineFeature> = map.batches.iter().map(MapBatch::line).collect();
    for (i, l) in lines.iter().enumerate() {
        grid.insert(&l.geometry, i);
    }
    let mut appended = 0;
    for (obs, log_odds, nobs, kf) in incoming {
        let cands = grid.query(&obs.line.geometry);
        let hit = best_merge(&obs.line, cands.iter().map(|&i| (i, &lines[i])), &cfg.merge);
        match hit {
            Some(bi) => {
                let b = &mut map.batches[bi];
                let mut support = b.support_or_self(u64::MAX - bi as u64);
                insert_top_k(&mut support, *obs, cfg.top_k);
                let fused = fuse_observations(&support).expect("support is nonempty");
                let logodds = (b.logodds + log_odds).clamp(-cfg.log_odds_cap, cfg.log_odds_cap);
                let mut nb = MapBatch::from_line(&fused, logodds, b.nobs + nobs, b.kf);
                nb.support = support;
                *b = nb;
                lines[bi] = b.line();
                grid.insert(&lines[bi].geometry, bi);
            }
            None => {
                let mut nb = MapBatch::from_line(
                    &obs.line,
                    log_odds.clamp(-cfg.log_odds_cap, cfg.log_odds_cap),
                    *nobs,
                    *kf,
                );
                nb.support = vec![*obs];
                lines.push(nb.line());
                grid.insert(&obs.line.geometry, map.batches.len());
                map.batches.push(nb);
                appended += 1;
            }
        }
    }
    appended
}

/// World-frame contributions of a keyframe's batches.
pub(crate) fn keyframe_contributions(kf: &Keyframe) -> Vec<(Observation, f64, u64, u32)> {
    kf.batches
        .iter()
        .enumerate()
        .map(|(i, b)| {
            let obs = Observation {
                line: b.fused.transformed(&kf.pose),
                provenance: batch_provenance(kf.id, i),
            };
            (obs, b.log_odds, b.obs_count, kf.id)
        })
        .collect()
}

/// Assembles the world map from keyframes with final poses.
pub fn build_global_map(keyframes: &[Keyframe], cfg: &MappingConfig) -> VectorMap {
    let mut map = VectorMap {
        version: 1,
        keyframes: keyframes
            .iter()
            .map(|k| MapKeyframe {
                id: k.id,
                x: k.pose.x,
                y: k.pose.y,
                theta: k.pose.theta,
            })
            .collect(),
        batches: Vec::new(),
    };
    let incoming: Vec<_> = keyframes.iter().flat_map(keyframe_contributions).collect();
    merge_into_map(&mut map, &incoming, cfg);
    map.prune(cfg.prune_min);
    map
}

fn check_finite(map: &VectorMap) -> Result<(), MapFormatError> {
    let kf_ok = map
        .keyframes
        .iter()
        .all(|k| k.x.is_finite() && k.y.is_finite() && k.theta.is_finite());
    let b_ok = map
        .batches
        .iter()
        .all(|b| b.values().iter().all(|v| v.is_finite()));
    if kf_ok && b_ok {
        Ok(())
    } else {
        Err(MapFormatError::NonFinite)
    }
}

pub fn serialize_map(map: &VectorMap, encoding: MapEncoding) -> Result<Vec<u8>, MapFormatError> {
    check_finite(map)?;
    let mut out = Vec::new();
    out.extend_from_slice(MAP_MAGIC);
    out.extend_from_slice(&MAP_FORMAT_VERSION.to_le_bytes());
    match encoding {
        MapEncoding::Json => {
            out.push(0);
            out.extend_from_slice(
                serde_json::to_string(map)
                    .expect("map serializes")
                    .as_bytes(),
            );
        }
        MapEncoding::Binary => {
            out.push(1);
            out.extend_from_slice(&map.version.to_le_bytes());
            out.extend_from_slice(&(map.keyframes.len() as u64).to_le_bytes());
            out.extend_from_slice(&(map.batches.len() as u64).to_le_bytes());
            for k in &map.keyframes {
                for v in [k.id as f64, k.x, k.y, k.theta] {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
            for b in &map.batches {
                for v in b.values() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N], MapFormatError> {
        let s = self
            .bytes
            .get(self.pos..self.pos + N)
            .ok_or(MapFormatError::Truncated)?;
        self.pos += N;
        Ok(s.try_into().expect("length checked"))
    }

    fn u64(&mut self) -> Result<u64, MapFormatError> {
        self.take::<8>().map(u64::from_le_bytes)
    }

    fn f64(&mut self) -> Result<f64, MapFormatError> {
        let v = f64::from_le_bytes(self.take::<8>()?);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(MapFormatError::NonFinite)
        }
    }
}

fn whole(v: f64, max: f64) -> Result<f64, MapFormatError> {
    if v.fract() == 0.0 && (0.0..=max).contains(&v) {
        Ok(v)
    } else {
        Err(MapFormatError::Malformed(format!(
            "expected an integer, got {v}"
        )))
    }
}

pub fn deserialize_map(bytes: &[u8]) -> Result<VectorMap, MapFormatError> {
    if bytes.len() < MAP_MAGIC.len() || &bytes[..MAP_MAGIC.len()] != MAP_MAGIC {
        return Err(MapFormatError::BadMagic);
    }
    let mut r = Reader {
        bytes,
        pos: MAP_MAGIC.len(),
    };
    let version = u32::from_le_bytes(r.take::<4>()?);
    if version != MAP_FORMAT_VERSION {
        return Err(MapFormatError::UnsupportedVersion(version));
    }
    let [flag] = r.take::<1>()?;
    let map = match flag {
        0 => {
            let body = std::str::from_utf8(&bytes[r.pos..])
                .map_err(|e| MapFormatError::Malformed(e.to_string()))?;
            if body.trim().is_empty() {
                return Err(MapFormatError::Truncated);
            }
            serde_json::from_str(body).map_err(|e| {
                if e.is_eof() {
                    MapFormatError::Truncated
                } else {
                    MapFormatError::Malformed(e.to_string())
                }
            })?
        }
        1 => {
            let map_version = r.u64()?;
            let nk = r.u64()? as usize;
            let nb = r.u64()? as usize;
            let need = nk
                .checked_mul(32)
                .zip(nb.checked_mul(BINARY_BATCH_BYTES))
                .and_then(|(a, b)| a.checked_add(b));
            if need.is_none_or(|n| bytes.len() - r.pos < n) {
                return Err(MapFormatError::Truncated);
            }
            let mut keyframes = Vec::with_capacity(nk);
            for _ in 0..nk {
                let id = whole(r.f64()?, u32::MAX as f64)? as u32;
                keyframes.push(MapKeyframe {
                    id,
                    x: r.f64()?,
                    y: r.f64()?,
                    theta: r.f64()?,
                });
            }
            let mut batches = Vec::with_capacity(nb);
            for _ in 0..nb {
                let v: Vec<f64> = (0..12).map(|_| r.f64()).collect::<Result<_, _>>()?;
                let label = Label::from_code(
                    whole(v[8], 255.0).map_err(|_| MapFormatError::BadLabel(v[8]))? as u8,
                )
                .ok_or(MapFormatError::BadLabel(v[8]))?;
                batches.push(MapBatch {
                    cx: v[0],
                    cy: v[1],
                    dir: v[2],
                    nrm: v[3],
                    ex1: v[4],
                    ey1: v[5],
                    ex2: v[6],
                    ey2: v[7],
                    label,
                    logodds: v[9],
                    nobs: whole(v[10], 2f64.powi(53))? as u64,
                    kf: whole(v[11], u32::MAX as f64)? as u32,
                    support: Vec::new(),
                });
            }
            if r.pos != bytes.len() {
                return Err(MapFormatError::Malformed("trailing bytes".into()));
            }
            VectorMap {
                version: map_version,
                keyframes,
                batches,
            }
        }
        other => return Err(MapFormatError::UnknownEncoding(other)),
    };
    check_finite(&map)?;
    Ok(map)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn lf(a: [f64; 2], b: [f64; 2], n: [f64; 2], conf: f64) -> LineFeature {
        LineFeature {
            geometry: Line2::from_endpoints(
                Point2::new(a[0], a[1]),
                Point2::new(b[0], b[1]),
                Point2::new(n[0], n[1]),
            ),
            label: Label::ParkingLine,
            confidence: conf,
            point_count: 10,
            contour_id: 0,
        }
    }

    fn obs(line: LineFeature, p: u64) -> Observation {
        Observation {
            line,
            provenance: p,
        }
    }

    #[test]
    fn keyframe_thresholds() {
        let cfg = MappingConfig::default();
        assert!(!should_create_keyframe(&Pose2::identity(), &cfg));
        assert!(should_create_keyframe(&Pose2::new(0.6, 0.0, 0.0), &cfg));
        assert!(should_create_keyframe(
            &Pose2::new(0.1, 0.0, 12f64.to_radians()),
            &cfg
        ));
    }

    #[test]
    fn neutral_and_repeated_evidence() {
        let cfg = MappingConfig::default();
        let l = lf([0.0, 0.0], [2.0, 0.0], [0.0, 1.0], 0.5);
        let mut kf = Keyframe::new(0, Pose2::identity());
        merge_frame_into_keyframe(&mut kf, &[l], &Pose2::identity(), 0, &cfg);
        assert_eq!(kf.batches[0].log_odds, 0.0);
        merge_frame_into_keyframe(&mut kf, &[l], &Pose2::identity(), 100, &cfg);
        assert_eq!(kf.batches[0].log_odds, 0.0);

        let l7 = LineFeature {
            confidence: 0.7,
            ..l
        };
        let mut kf = Keyframe::new(0, Pose2::identity());
        for i in 0..10 {
            merge_frame_into_keyframe(&mut kf, &[l7], &Pose2::identity(), i * 100, &cfg);
        }
        assert_eq!(kf.batches.len(), 1);
        assert_abs_diff_eq!(
            kf.batches[0].log_odds,
            10.0 * (7.0f64 / 3.0).ln(),
            epsilon = 1e-12
        );
        assert!(kf.batches[0].probability() > 0.999);
        assert_eq!(kf.batches[0].obs_count, 10);
        assert_eq!(kf.batches[0].observations.len(), 5);

        let other = lf([0.0, 3.0], [2.0, 3.0], [0.0, 1.0], 0.7);
        merge_frame_into_keyframe(&mut kf, &[other], &Pose2::identity(), 5000, &cfg);
        assert_eq!(kf.batches.len(), 2);
    }

    #[test]
    fn confidence_clamped() {
        let cfg = MappingConfig::default();
        assert_abs_diff_eq!(cfg.evidence(1.0), logit(0.95), epsilon = 1e-15);
        assert_abs_diff_eq!(cfg.evidence(0.0), logit(0.05), epsilon = 1e-15);
    }

    #[test]
    fn fuse_examples() {
        let l = lf([0.0, 0.0], [2.0, 0.0], [0.0, 1.0], 0.4);
        assert_eq!(fuse_observations(&[obs(l, 0)]).unwrap(), l);
        let two = [
            obs(l, 0),
            obs(
                LineFeature {
                    confidence: 0.8,
                    ..l
                },
                1,
            ),
        ];
        let f = fuse_observations(&two).unwrap();
        assert_abs_diff_eq!(f.confidence, (0.16 + 0.64) / 1.2, epsilon = 1e-12);
        assert_abs_diff_eq!(
            (f.geometry.centroid - l.geometry.centroid).norm(),
            0.0,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(f.geometry.length, 2.0, epsilon = 1e-12);

        let up = lf([0.0, 0.01], [2.0, 0.01], [0.0, 1.0], 0.6);
        let down = lf([0.0, -0.01], [2.0, -0.01], [0.0, 1.0], 0.6);
        let f = fuse_observations(&[obs(up, 0), obs(down, 1)]).unwrap();
        assert_abs_diff_eq!(f.geometry.centroid.y, 0.0, epsilon = 1e-9);
        assert_abs_diff_eq!(f.geometry.normal.y, 1.0, epsilon = 1e-12);
        assert_eq!(fuse_observations(&[]), Err(MappingError::EmptyBatch));
    }

    #[test]
    fn top_k_keeps_best_and_prefers_newest_on_ties() {
        let l = lf([0.0, 0.0], [2.0, 0.0], [0.0, 1.0], 0.5);
        let mut list = Vec::new();
        for i in 0..7 {
            insert_top_k(&mut list, obs(l, i), 5);
        }
        let tags: Vec<u64> = list.iter().map(|o| o.provenance).collect();
        assert_eq!(tags, vec![2, 3, 4, 5, 6]);
        insert_top_k(
            &mut list,
            obs(
                LineFeature {
                    confidence: 0.9,
                    ..l
                },
                9,
            ),
            5,
        );
        assert!(list.iter().any(|o| o.provenance == 9));
        assert_eq!(list.len(), 5);
        insert_top_k(
            &mut list,
            obs(
                LineFeature {
                    confidence: 0.1,
                    ..l
                },
                9,
            ),
            5,
        );
        assert_eq!(list.iter().filter(|o| o.provenance == 9).count(), 1);
    }

    proptest! {
        #[test]
        fn log_odds_order_invariant(confs in prop::collection::vec(0.01f64..0.99, 20), seed in any::<u64>()) {
            let cfg = MappingConfig::default();
            let base = lf([0.0, 0.0], [2.0, 0.0], [0.0, 1.0], 0.5);
            let run = |order: &[usize]| {
                let mut kf = Keyframe::new(0, Pose2::identity());
                for &i in order {
                    merge_frame_into_keyframe(&mut kf, &[LineFeature { confidence: confs[i], ..base }], &Pose2::identity(), i as u64 * 10, &cfg);
                }
                kf.batches[0].log_odds
            };
            let fwd: Vec<usize> = (0..20).collect();
            let mut perm = fwd.clone();
            let mut s = seed;
            for i in (1..perm.len()).rev() {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                perm.swap(i, (s >> 33) as usize % (i + 1));
            }
            prop_assert!((run(&fwd) - run(&perm)).abs() <= 1e-12);
        }

        #[test]
        fn probability_moves_with_evidence(c in 0.01f64..0.99, prior in -5.0f64..5.0) {
            let cfg = MappingConfig::default();
            let after = sigmoid(prior + cfg.evidence(c));
            if c > 0.5 { prop_assert!(after > sigmoid(prior)); }
            if c < 0.5 { prop_assert!(after < sigmoid(prior)); }
        }
    }

    fn chain_graph(odom: &[Pose2]) -> PoseGraph {
        let mut g = PoseGraph::default();
        let mut pose = Pose2::identity();
        g.add_node(pose);
        g.add_factor(Factor::unary(
            FactorKind::Prior,
            0,
            pose,
            information_from_sigmas(1e-3, 1e-4),
        ));
        for (k, z) in odom.iter().enumerate() {
            pose = pose.compose(z);
            g.add_node(pose);
            g.add_factor(Factor::between(
                FactorKind::Odometry,
                k,
                k + 1,
                *z,
                information_from_sigmas(0.01, 0.001),
            ));
        }
        g
    }

    #[test]
    fn exact_chain_is_unchanged() {
        let odom = vec![Pose2::new(1.0, 0.0, 0.1); 10];
        let g = chain_graph(&odom);
        let r = optimize_pose_graph(&g).unwrap();
        assert!(r.final_cost < 1e-12);
        for (a, b) in r.poses.iter().zip(&g.nodes) {
            assert!(a.distance_to(b) < 1e-9);
        }
    }

    #[test]
    fn single_prior_node() {
        let mut g = PoseGraph::default();
        g.add_node(Pose2::new(0.3, -0.2, 0.1));
        g.add_factor(Factor::unary(
            FactorKind::Prior,
            0,
            Pose2::identity(),
            Matrix3::identity(),
        ));
        let r = optimize_pose_graph(&g).unwrap();
        assert!(r.poses[0].translation().norm() < 1e-9 && r.poses[0].theta.abs() < 1e-9);
    }

    #[test]
    fn graph_errors() {
        let mut g = PoseGraph::default();
        assert_eq!(optimize_pose_graph(&g), Err(MappingError::EmptyGraph));
        g.add_node(Pose2::identity());
        g.add_node(Pose2::identity());
        g.add_factor(Factor::unary(
            FactorKind::Prior,
            0,
            Pose2::identity(),
            Matrix3::identity(),
        ));
        assert_eq!(optimize_pose_graph(&g), Err(MappingError::Disconnected(2)));
        g.add_factor(Factor::between(
            FactorKind::Odometry,
            0,
            1,
            Pose2::identity(),
            -Matrix3::identity(),
        ));
        assert_eq!(optimize_pose_graph(&g), Err(MappingError::NotSpd(1)));
        let mut g2 = PoseGraph::default();
        g2.add_node(Pose2::identity());
        g2.add_node(Pose2::identity());
        g2.add_factor(Factor::between(
            FactorKind::Odometry,
            0,
            1,
            Pose2::identity(),
            Matrix3::identity(),
        ));
        assert_eq!(optimize_pose_graph(&g2), Err(MappingError::NoPrior));
    }

    #[test]
    fn biased_square_loop_is_corrected() {
        // 4 sides of 10 steps; each step 1 m forward, corners turn 90°.
        // Odometry carries a rotational bias of 0.01 rad/step.
        let mut truth = vec![Pose2::identity()];
        let mut odom = Vec::new();
        for side in 0..4 {
            for k in 0..10 {
                let turn = if k == 9 && side < 3 {
                    std::f64::consts::FRAC_PI_2
                } else {
                    0.0
                };
                let z = Pose2::new(1.0, 0.0, turn);
                truth.push(truth.last().unwrap().compose(&z));
                odom.push(Pose2::new(1.0, 0.0, turn + 0.01));
            }
        }
        let mut g = chain_graph(&odom);
        let n = truth.len() - 1;
        let z = truth[0].inverse().compose(&truth[n]);
        g.add_factor(Factor::between(
            FactorKind::Loop,
            0,
            n,
            z,
            information_from_sigmas(0.01, 0.001),
        ));
        let before = g.nodes[n].distance_to(&truth[n]);
        let r = optimize_pose_graph(&g).unwrap();
        let after = r.poses[n].distance_to(&truth[n]);
        assert!(before > 1.0);
        assert!(after <= 0.2 * before, "{before} -> {after}");
        for w in r.cost_trace.windows(2) {
            assert!(w[1] <= w[0]);
        }
        assert!(r.final_cost <= r.initial_cost);
    }

    fn kf_with(id: u32, pose: Pose2, lines: &[LineFeature]) -> Keyframe {
        let mut kf = Keyframe::new(id, pose);
        merge_frame_into_keyframe(
            &mut kf,
            lines,
            &Pose2::identity(),
            0,
            &MappingConfig::default(),
        );
        kf
    }

    #[test]
    fn global_map_coalesces_and_prunes() {
        let cfg = MappingConfig::default();
        let slot = lf([0.0, 0.0], [0.0, 5.0], [1.0, 0.0], 0.9);
        let a = kf_with(0, Pose2::identity(), &[slot]);
        assert_eq!(
            build_global_map(std::slice::from_ref(&a), &cfg)
                .batches
                .len(),
            1
        );
        // second keyframe sees the same world line from 1 m further
        let pose_b = Pose2::new(1.0, 0.0, 0.0);
        let b = kf_with(1, pose_b, &[slot.transformed(&pose_b.inverse())]);
        let m = build_global_map(&[a.clone(), b], &cfg);
        assert_eq!(m.batches.len(), 1);
        assert_eq!(m.batches[0].nobs, 2);
        assert_abs_diff_eq!(m.batches[0].logodds, 2.0 * logit(0.9), epsilon = 1e-12);

        let ghost = lf([5.0, 0.0], [5.0, 5.0], [1.0, 0.0], sigmoid(logit(0.2)));
        let c = kf_with(2, Pose2::identity(), &[ghost]);
        let m = build_global_map(&[a, c], &cfg);
        assert_eq!(m.batches.len(), 1);
    }

    fn sample_map(n: usize) -> VectorMap {
        let mut m = VectorMap {
            version: 3,
            ..Default::default()
        };
        m.keyframes.push(MapKeyframe {
            id: 4,
            x: 1.5,
            y: -2.25,
            theta: 0.3,
        });
        for i in 0..n {
            let t = i as f64 * 0.37;
            let l = lf([t, 0.1 * t], [t + 1.0 / 3.0, 2.0], [1.0, -0.2], 0.8);
            let mut b = MapBatch::from_line(&l, 1.0 / (i as f64 + 3.0), i as u64 + 1, i as u32);
            b.label = Label::ALL[i % 5];
            m.batches.push(b);
        }
        m
    }

    #[test]
    fn map_round_trips_both_encodings() {
        for n in [0, 1, 1000] {
            let m = sample_map(n);
            for enc in [MapEncoding::Json, MapEncoding::Binary] {
                let bytes = serialize_map(&m, enc).unwrap();
                assert_eq!(deserialize_map(&bytes).unwrap(), m);
            }
            let bin = serialize_map(&m, MapEncoding::Binary).unwrap();
            assert!(bin.len() <= 10 + 24 + 32 * m.keyframes.len() + 120 * n);
        }
    }

    #[test]
    fn map_format_errors() {
        let bin = serialize_map(&sample_map(3), MapEncoding::Binary).unwrap();
        assert_eq!(
            deserialize_map(b"NOTAMAP..."),
            Err(MapFormatError::BadMagic)
        );
        assert_eq!(
            deserialize_map(&bin[..bin.len() - 4]),
            Err(MapFormatError::Truncated)
        );
        let mut bad = bin.clone();
        bad[5] = 9;
        assert_eq!(
            deserialize_map(&bad),
            Err(MapFormatError::UnsupportedVersion(9))
        );
        let mut nan = sample_map(1);
        nan.batches[0].cx = f64::NAN;
        assert_eq!(
            serialize_map(&nan, MapEncoding::Binary),
            Err(MapFormatError::NonFinite)
        );
        let json = serialize_map(&sample_map(2), MapEncoding::Json).unwrap();
        assert_eq!(
            deserialize_map(&json[..json.len() - 3]),
            Err(MapFormatError::Truncated)
        );
    }

    proptest! {
        #[test]
        fn binary_round_trip_is_bit_exact(vals in prop::collection::vec(-1e6f64..1e6, 12)) {
            let mut m = sample_map(1);
            let b = &mut m.batches[0];
            b.cx = vals[0]; b.cy = vals[1]; b.dir = vals[2]; b.nrm = vals[3];
            b.ex1 = vals[4]; b.ey1 = vals[5]; b.ex2 = vals[6]; b.ey2 = vals[7]; b.logodds = vals[8];
            m.keyframes[0].x = vals[9];
            for enc in [MapEncoding::Json, MapEncoding::Binary] {
                let back = deserialize_map(&serialize_map(&m, enc).unwrap()).unwrap();
                prop_assert_eq!(&back, &m);
                prop_assert_eq!(back.keyframes[0].x.to_bits(), m.keyframes[0].x.to_bits());
            }
        }
    }
}
