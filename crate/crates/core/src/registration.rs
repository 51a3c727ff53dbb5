//! Point-to-line ICP with contour-normal-assisted association, and the
//! line overlap ratio used to validate registrations.

use crate::features::{FrameFeatures, GroundPoint, LineFeature};
use crate::geometry::{angle_between, axis_angle_between, perp, Point2, Pose2};
use crate::sim::Label;
use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use thiserror::Error;

/// Lever arm used to put rotation on a length scale in the stop criterion.
pub const WHEELBASE: f64 = 2.7;

#[derive(Debug, Error, PartialEq)]
pub enum RegistrationError {
    #[error("{0} correspondences are not enough to constrain a pose")]
    InsufficientCorrespondences(usize),
    #[error("degenerate geometry (condition number {0:e})")]
    Degenerate(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchMode {
    #[default]
    NormalAssisted,
    NearestNeighborBaseline,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MatchConfig {
    pub max_point_distance: f64,
    pub normal_angle_max: f64,
    pub max_iterations: usize,
    pub epsilon: f64,
    pub huber_delta: f64,
    pub mode: MatchMode,
    /// Cell size of the target point grid.
    pub grid_cell: f64,
    /// How far past a segment end a point may still match it (normal-assisted).
    pub max_overshoot: f64,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            max_point_distance: 1.0,
            normal_angle_max: 30f64.to_radians(),
            max_iterations: 30,
            epsilon: 1e-4,
            huber_delta: 0.10,
            mode: MatchMode::NormalAssisted,
            grid_cell: 0.125,
            max_overshoot: 0.25,
        }
    }
}

/// Thresholds of the "can be merged" predicate between two lines.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MergeThresholds {
    pub normal_angle: f64,
    pub direction_angle: f64,
    pub distance: f64,
}

impl Default for MergeThresholds {
    fn default() -> Self {
        Self {
            normal_angle: 20f64.to_radians(),
            direction_angle: 10f64.to_radians(),
            distance: 0.15,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correspondence {
    pub point_index: usize,
    pub target_line_index: usize,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistrationResult {
    pub transform: Pose2,
    pub iterations: usize,
    pub final_rms_residual: f64,
    pub inlier_ratio: f64,
    pub converged: bool,
    pub correspondences: usize,
    /// Weighted RMS before and after each accepted step.
    pub residual_trace: Vec<(f64, f64)>,
}

/// Per-registration debug record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistrationDiagnostics {
    pub iterations: usize,
    pub converged: bool,
    pub residual_trace: Vec<(f64, f64)>,
    pub inlier_ratio: f64,
    pub p: f64,
}

impl RegistrationDiagnostics {
    pub fn new(result: &RegistrationResult, p: f64) -> Self {
        Self {
            iterations: result.iterations,
            converged: result.converged,
            residual_trace: result.residual_trace.clone(),
            inlier_ratio: result.inlier_ratio,
            p,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("diagnostics serialize")
    }
}

/// Uniform hash grid over 2D positions.
#[derive(Debug, Clone)]
struct Grid {
    cell: f64,
    buckets: HashMap<(i32, i32), Vec<u32>>,
}

impl Grid {
    fn new(cell: f64) -> Self {
        Self {
            cell,
            buckets: HashMap::new(),
        }
    }

    fn key(&self, p: Point2) -> (i32, i32) {
        (
            (p.x / self.cell).floor() as i32,
            (p.y / self.cell).floor() as i32,
        )
    }

    fn insert(&mut self, p: Point2, id: u32) {
        let k = self.key(p);
        self.buckets.entry(k).or_default().push(id);
    }

    fn bucket(&self, k: (i32, i32)) -> &[u32] {
        self.buckets.get(&k).map_or(&[], Vec::as_slice)
    }

    /// Nearest accepted item within `radius`, visiting cells in rings.
    /// Ties go to the smaller id.
    fn nearest(
        &self,
        p: Point2,
        radius: f64,
        mut dist: impl FnMut(u32) -> Option<f64>,
    ) -> Option<(u32, f64)> {
        let (cx, cy) = self.key(p);
        let rings = (radius / self.cell).ceil() as i32 + 1;
        let mut best: Option<(u32, f64)> = None;
        for r in 0..=rings {
            if let Some((_, d)) = best {
                // every point in ring r is at least (r - 1) cells away
                if d <= (r - 1) as f64 * self.cell {
                    break;
                }
            }
            let mut visit = |k: (i32, i32)| {
                for &id in self.bucket(k) {
                    if let Some(d) = dist(id) {
                        if d <= radius
                            && best.is_none_or(|(bid, bd)| d < bd || (d == bd && id < bid))
                        {
                            best = Some((id, d));
                        }
                    }
                }
            };
            if r == 0 {
                visit((cx, cy));
                continue;
            }
            for i in -r..=r {
                visit((cx + i, cy - r));
                visit((cx + i, cy + r));
            }
            for j in (-r + 1)..r {
                visit((cx - r, cy + j));
                visit((cx + r, cy + j));
            }
        }
        best
    }
}

/// Registration target: a frame's normal-carrying points and lines, indexed.
#[derive(Debug, Clone)]
pub struct TargetIndex<'a> {
    frame: &'a FrameFeatures,
    points: Grid,
    lines: Grid,
    contour_lines: HashMap<u32, Vec<usize>>,
}

impl<'a> TargetIndex<'a> {
    pub fn new(frame: &'a FrameFeatures, cfg: &MatchConfig) -> Self {
        let mut points = Grid::new(cfg.grid_cell);
        for (i, p) in frame.points.iter().enumerate() {
            if p.normal.is_some() {
                points.insert(p.position, i as u32);
            }
        }
        let mut lines = Grid::new(cfg.max_point_distance.max(0.05));
        let mut contour_lines: HashMap<u32, Vec<usize>> = HashMap::new();
        for (i, l) in frame.lines.iter().enumerate() {
            contour_lines.entry(l.contour_id).or_default().push(i);
            let g = &l.geometry;
            let steps = (g.length / (0.5 * lines.cell)).ceil().max(1.0) as usize;
            let mut seen = Vec::new();
            for s in 0..=steps {
                let q = g.endpoint_a + (g.endpoint_b - g.endpoint_a) * (s as f64 / steps as f64);
                let k = lines.key(q);
                if !seen.contains(&k) {
                    seen.push(k);
                    lines.buckets.entry(k).or_default().push(i as u32);
                }
            }
        }
        Self {
            frame,
            points,
            lines,
            contour_lines,
        }
    }

    pub fn frame(&self) -> &FrameFeatures {
        self.frame
    }
}

/// Source points used for registration: clustered points with normals.
pub fn registration_points(frame: &FrameFeatures) -> Vec<usize> {
    let mut idx: Vec<usize> = frame
        .clusters
        .iter()
        .flatten()
        .copied()
        .filter(|&i| frame.points[i].normal.is_some())
        .collect();
    idx.sort_unstable();
    idx.dedup();
    idx
}

fn match_point(
    p: &GroundPoint,
    pos: Point2,
    normal: Point2,
    target: &TargetIndex,
    cfg: &MatchConfig,
) -> Option<usize> {
    let dst = target.frame;
    match cfg.mode {
        MatchMode::NormalAssisted => {
            let compatible = |label: Label, n: Point2| {
                label == p.label && angle_between(n, normal) <= cfg.normal_angle_max
            };
            let (qi, _) = target.points.nearest(pos, cfg.max_point_distance, |id| {
                let q = &dst.points[id as usize];
                compatible(q.label, q.normal?).then(|| (q.position - pos).norm())
            })?;
            let q = &dst.points[qi as usize];
            let cands = target.contour_lines.get(&q.contour_id)?;
            let mut best: Option<(usize, f64)> = None;
            for &li in cands {
                let l = &dst.lines[li];
                if !compatible(l.label, l.geometry.normal)
                    || l.geometry.overshoot(pos) > cfg.max_overshoot
                {
                    continue;
                }
                let d = l.geometry.segment_distance(pos);
                if d <= cfg.max_point_distance
                    && best.is_none_or(|(bi, bd)| d < bd || (d == bd && li < bi))
                {
                    best = Some((li, d));
                }
            }
            best.map(|(li, _)| li)
        }
        MatchMode::NearestNeighborBaseline => {
            let (cx, cy) = target.lines.key(pos);
            let mut best: Option<(usize, f64)> = None;
            for dx in -1..=1 {
                for dy in -1..=1 {
                    for &li in target.lines.bucket((cx + dx, cy + dy)) {
                        let li = li as usize;
                        let l = &dst.lines[li];
                        if l.label != p.label {
                            continue;
                        }
                        let d = l.geometry.segment_distance(pos);
                        if d <= cfg.max_point_distance
                            && best.is_none_or(|(bi, bd)| d < bd || (d == bd && li < bi))
                        {
                            best = Some((li, d));
                        }
                    }
                }
            }
            best.map(|(li, _)| li)
        }
    }
}

fn associate_indexed(
    src: &FrameFeatures,
    sources: &[usize],
    target: &TargetIndex,
    t: &Pose2,
    cfg: &MatchConfig,
) -> Vec<Correspondence> {
    let mut out = Vec::new();
    for &i in sources {
        let p = &src.points[i];
        let Some(n) = p.normal else { continue };
        let pos = t.apply(p.position);
        let normal = t.apply_vector(n);
        if let Some(li) = match_point(p, pos, normal, target, cfg) {
            out.push(Correspondence {
                point_index: i,
                target_line_index: li,
                weight: p.confidence * target.frame.lines[li].confidence,
            });
        }
    }
    out
}

/// Pairs every clustered source point (moved by `t`) with a target line.
pub fn associate(
    src: &FrameFeatures,
    dst: &FrameFeatures,
    t: &Pose2,
    cfg: &MatchConfig,
) -> Vec<Correspondence> {
    let target = TargetIndex::new(dst, cfg);
    associate_indexed(src, &registration_points(src), &target, t, cfg)
}

fn huber_weight(r: f64, delta: f64) -> f64 {
    if r.abs() <= delta {
        1.0
    } else {
        delta / r.abs()
    }
}

fn residual(
    src: &FrameFeatures,
    dst_lines: &[LineFeature],
    c: &Correspondence,
    t: &Pose2,
) -> (f64, Point2) {
    let q = t.apply(src.points[c.point_index].position);
    let g = &dst_lines[c.target_line_index].geometry;
    (g.normal.dot(&(q - g.centroid)), q)
}

/// One Gauss-Newton step; returns the left increment `δ` so that `δ ∘ t`
/// reduces the Huber-weighted point-to-line cost.
pub fn solve_step(
    corr: &[Correspondence],
    src: &FrameFeatures,
    dst: &FrameFeatures,
    t: &Pose2,
    huber_delta: f64,
) -> Result<Pose2, RegistrationError> {
    solve_lines(corr, src, &dst.lines, t, huber_delta).map(|(d, _)| d)
}

fn solve_lines(
    corr: &[Correspondence],
    src: &FrameFeatures,
    dst_lines: &[LineFeature],
    t: &Pose2,
    huber_delta: f64,
) -> Result<(Pose2, Vec<f64>), RegistrationError> {
    if corr.len() < 3 {
        return Err(RegistrationError::InsufficientCorrespondences(corr.len()));
    }
    let mut h = Matrix3::zeros();
    let mut b = Vector3::zeros();
    let mut weights = Vec::with_capacity(corr.len());
    for c in corr {
        let (r, q) = residual(src, dst_lines, c, t);
        let n = dst_lines[c.target_line_index].geometry.normal;
        let j = Vector3::new(n.x, n.y, n.dot(&perp(q)));
        let w = c.weight * huber_weight(r, huber_delta);
        weights.push(w);
        h += j * j.transpose() * w;
        b += j * (w * r);
    }
    let eig = SymmetricEigen::new(h).eigenvalues;
    let (lo, hi) = (eig.min(), eig.max());
    if lo.is_nan() || lo <= 0.0 || hi / lo > 1e8 {
        let cond = if lo > 0.0 { hi / lo } else { f64::INFINITY };
        return Err(RegistrationError::Degenerate(cond));
    }
    let x = h
        .cholesky()
        .ok_or(RegistrationError::Degenerate(f64::INFINITY))?
        .solve(&(-b));
    Ok((Pose2::exp(x), weights))
}

fn frozen_cost(
    corr: &[Correspondence],
    weights: &[f64],
    src: &FrameFeatures,
    dst_lines: &[LineFeature],
    t: &Pose2,
) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (c, &w) in corr.iter().zip(weights) {
        let (r, _) = residual(src, dst_lines, c, t);
        num += w * r * r;
        den += w;
    }
    if den > 0.0 {
        (num / den).sqrt()
    } else {
        0.0
    }
}

fn step_norm(d: &Pose2) -> f64 {
    d.translation().norm() + WHEELBASE * d.theta.abs()
}

/// Iterative point-to-line ICP of `src` onto `dst`, starting at `init`.
/// The result transform maps source coordinates into target coordinates.
pub fn register(
    src: &FrameFeatures,
    dst: &FrameFeatures,
    init: &Pose2,
    cfg: &MatchConfig,
) -> RegistrationResult {
    let target = TargetIndex::new(dst, cfg);
    register_indexed(src, &target, init, cfg)
}

pub fn register_indexed(
    src: &FrameFeatures,
    target: &TargetIndex,
    init: &Pose2,
    cfg: &MatchConfig,
) -> RegistrationResult {
    let sources = registration_points(src);
    let dst_lines = &target.frame.lines;
    let mut t = *init;
    let mut iterations = 0;
    let mut converged = false;
    let mut trace = Vec::new();
    let mut corr = Vec::new();
    while iterations < cfg.max_iterations {
        corr = associate_indexed(src, &sources, target, &t, cfg);
        iterations += 1;
        let Ok((delta, weights)) = solve_lines(&corr, src, dst_lines, &t, cfg.huber_delta) else {
            break;
        };
        let before = frozen_cost(&corr, &weights, src, dst_lines, &t);
        let full_norm = step_norm(&delta);
        let mut xi = delta.log();
        let mut accepted = None;
        for _ in 0..8 {
            let cand = Pose2::exp(xi).compose(&t);
            let after = frozen_cost(&corr, &weights, src, dst_lines, &cand);
            if after <= before {
                accepted = Some((cand, after));
                break;
            }
            xi *= 0.5;
        }
        match accepted {
            Some((cand, after)) => {
                trace.push((before, after));
                t = cand;
                if full_norm < cfg.epsilon {
                    converged = true;
                    break;
                }
            }
            None => {
                converged = full_norm < cfg.epsilon;
                break;
            }
        }
    }
    let final_rms = if corr.is_empty() {
        0.0
    } else {
        let s: f64 = corr
            .iter()
            .map(|c| residual(src, dst_lines, c, &t).0.powi(2))
            .sum();
        (s / corr.len() as f64).sqrt()
    };
    RegistrationResult {
        transform: t,
        iterations,
        final_rms_residual: final_rms,
        inlier_ratio: if sources.is_empty() {
            0.0
        } else {
            corr.len() as f64 / sources.len() as f64
        },
        converged,
        correspondences: corr.len(),
        residual_trace: trace,
    }
}

/// True when `a` (already in `b`'s frame) can be merged into `b`.
pub fn can_merge(a: &LineFeature, b: &LineFeature, th: &MergeThresholds) -> bool {
    let (ga, gb) = (&a.geometry, &b.geometry);
    if a.label != b.label
        || angle_between(ga.normal, gb.normal) > th.normal_angle
        || axis_angle_between(ga.direction, gb.direction) > th.direction_angle
        || gb.signed_distance(ga.centroid).abs() > th.distance
    {
        return false;
    }
    let (b0, b1) = gb.interval();
    let (ta, tb) = (gb.project(ga.endpoint_a), gb.project(ga.endpoint_b));
    ta.min(tb).max(b0) <= ta.max(tb).min(b1)
}

/// Length- and confidence-weighted fraction of `src` lines (moved by `t`)
/// that can be merged into some `dst` line.
pub fn overlap_ratio(
    src: &[LineFeature],
    dst: &[LineFeature],
    t: &Pose2,
    th: &MergeThresholds,
) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for l in src {
        let w = l.geometry.length * l.confidence;
        den += w;
        let moved = l.transformed(t);
        if dst.iter().any(|d| can_merge(&moved, d, th)) {
            num += w;
        }
    }
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}

/// Frame made of points sampled every `spacing` along each line, each line
/// its own contour. Used to register against fused lines and map batches.
pub fn pseudo_frame(lines: &[LineFeature], spacing: f64) -> FrameFeatures {
    let mut frame = FrameFeatures::default();
    for (li, l) in lines.iter().enumerate() {
        let g = &l.geometry;
        let n = (g.length / spacing).floor() as usize + 1;
        let members: Vec<usize> = (0..n)
            .map(|s| {
                let f = if n == 1 {
                    0.5
                } else {
                    s as f64 / (n - 1) as f64
                };
                frame.points.push(GroundPoint {
                    position: g.endpoint_a + (g.endpoint_b - g.endpoint_a) * f,
                    label: l.label,
                    contour_id: li as u32,
                    seq: s as u32,
                    chain_len: n as u32,
                    normal: Some(g.normal),
                    confidence: l.confidence,
                });
                frame.points.len() - 1
            })
            .collect();
        frame.clusters.push(members);
        frame.lines.push(LineFeature {
            contour_id: li as u32,
            ..*l
        });
    }
    frame.raw_point_count = frame.points.len();
    frame
}
