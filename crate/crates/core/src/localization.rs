//! Frame-to-map localization, sliding-window fusion with odometry, and map
//! completion/refinement from a later session.

use crate::features::FrameFeatures;
use crate::geometry::{Point2, Pose2};
use crate::mapping::{
    information_from_sigmas, keyframe_contributions, logit, merge_into_map, optimize_pose_graph,
    registration_information, Factor, FactorKind, Keyframe, MapKeyframe, MappingConfig,
    MappingError, PoseGraph, VectorMap,
};
use crate::registration::{can_merge, overlap_ratio, pseudo_frame, register, MatchConfig};
use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum LocalizationError {
    #[error("keyframes are not anchored to the map frame")]
    Unanchored,
    #[error(transparent)]
    Graph(#[from] MappingError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LocalizationConfig {
    pub load_radius: f64,
    pub p_valid_min: f64,
    /// Localization anchors kept in the active window.
    pub window: usize,
    /// Upper bound on active window nodes through long invalid stretches.
    pub max_window_nodes: usize,
    pub negative_evidence: bool,
    pub c_miss: f64,
    /// Keyframes that must have had a batch in view before it is penalized.
    pub miss_min_views: usize,
    /// Radius around a keyframe treated as fully observed.
    pub footprint_radius: f64,
    /// Odometry standard deviations per meter traveled, with floors.
    pub odom_sigma_trans: f64,
    pub odom_sigma_rot: f64,
}

impl Default for LocalizationConfig {
    fn default() -> Self {
        Self {
            load_radius: 15.0,
            p_valid_min: 0.5,
            window: 10,
            max_window_nodes: 200,
            negative_evidence: true,
            c_miss: 0.7,
            miss_min_views: 3,
            footprint_radius: 7.0,
            odom_sigma_trans: 0.01,
            odom_sigma_rot: 0.001,
        }
    }
}

/// Information of an odometry step of length `dist`.
pub fn odometry_information(dist: f64, sigma_trans: f64, sigma_rot: f64) -> Matrix3<f64> {
    information_from_sigmas((sigma_trans * dist).max(1e-3), (sigma_rot * dist).max(1e-4))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalizationResult {
    pub frame_index: usize,
    pub pose: Pose2,
    pub overlap: f64,
    pub valid: bool,
    pub inlier_ratio: f64,
    pub iterations: usize,
}

/// Registers `frame` against map batches near `predicted`.
pub fn localize_frame(
    frame: &FrameFeatures,
    map: &VectorMap,
    predicted: &Pose2,
    cfg: &LocalizationConfig,
    mapping: &MappingConfig,
    icp: &MatchConfig,
) -> LocalizationResult {
    let mut out = LocalizationResult {
        frame_index: frame.frame_index,
        pose: *predicted,
        overlap: 0.0,
        valid: false,
        inlier_ratio: 0.0,
        iterations: 0,
    };
    let near = map.batches_near(predicted.translation(), cfg.load_radius);
    if near.is_empty() {
        return out;
    }
    let lines: Vec<_> = near
        .iter()
        .enumerate()
        .map(|(k, &i)| crate::features::LineFeature {
            contour_id: k as u32,
            ..map.batches[i].line()
        })
        .collect();
    let dst = pseudo_frame(&lines, mapping.sample_spacing);
    let r = register(frame, &dst, predicted, icp);
    let p = overlap_ratio(&frame.lines, &dst.lines, &r.transform, &mapping.merge);
    out.iterations = r.iterations;
    out.inlier_ratio = r.inlier_ratio;
    out.overlap = p;
    if r.converged {
        out.pose = r.transform;
    }
    out.valid = r.converged && p >= cfg.p_valid_min;
    out
}

/// Committed output of a fused session.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedTrajectory {
    pub poses: Vec<Pose2>,
    /// No valid localization was ever fused; poses are in the odometry frame.
    pub unanchored: bool,
    /// Frames whose localization factor entered the graph.
    pub anchored_frames: Vec<usize>,
}

/// Sliding-window pose graph over odometry and valid localizations.
///
/// Frames leave the window in order and are then final. The first active
/// pose is tied to the last committed pose by the odometry factor between
/// them, which stays fixed.
#[derive(Debug, Clone)]
pub struct WindowFusion {
    cfg: LocalizationConfig,
    /// Active poses with the frame index of the first one.
    active: VecDeque<Pose2>,
    first_frame: usize,
    /// Odometry into each active node from its predecessor.
    odom: VecDeque<Pose2>,
    /// Localization anchors per active node.
    anchors: VecDeque<Option<(Pose2, Matrix3<f64>)>>,
    last_committed: Option<Pose2>,
    committed: Vec<Pose2>,
    anchored_frames: Vec<usize>,
}

impl WindowFusion {
    /// Starts at `initial`, the first frame's pose guess.
    pub fn new(initial: Pose2, cfg: LocalizationConfig) -> Self {
        Self {
            cfg,
            active: VecDeque::from([initial]),
            first_frame: 0,
            odom: VecDeque::from([Pose2::identity()]),
            anchors: VecDeque::from([None]),
            last_committed: None,
            committed: Vec::new(),
            anchored_frames: Vec::new(),
        }
    }

    /// Latest pose estimate.
    pub fn current(&self) -> Pose2 {
        *self.active.back().expect("window is never empty")
    }

    pub fn committed(&self) -> &[Pose2] {
        &self.committed
    }

    pub fn active_anchor_count(&self) -> usize {
        self.anchors.iter().filter(|a| a.is_some()).count()
    }

    /// Frame index of the newest pose.
    pub fn newest_frame(&self) -> usize {
        self.first_frame + self.active.len() - 1
    }

    /// Attaches the newest frame's localization; invalid results are ignored.
    pub fn add_localization(&mut self, loc: &LocalizationResult) -> Result<(), LocalizationError> {
        if !loc.valid {
            return Ok(());
        }
        let k = self.active.len() - 1;
        self.anchors[k] = Some((loc.pose, registration_information(loc.inlier_ratio)));
        self.anchored_frames.push(self.newest_frame());
        self.optimize()?;
        self.marginalize();
        Ok(())
    }

    /// Appends a new frame reached by odometry `rel` from the previous one.
    pub fn add_odometry(&mut self, rel: &Pose2) -> Result<(), LocalizationError> {
        let next = self.current().compose(rel);
        self.active.push_back(next);
        self.odom.push_back(*rel);
        self.anchors.push_back(None);
        if self.active.len() > self.cfg.max_window_nodes {
            self.commit_front(1);
        }
        Ok(())
    }

    fn odom_info(&self, rel: &Pose2) -> Matrix3<f64> {
        odometry_information(
            rel.translation().norm(),
            self.cfg.odom_sigma_trans,
            self.cfg.odom_sigma_rot,
        )
    }

    fn optimize(&mut self) -> Result<(), LocalizationError> {
        let mut g = PoseGraph::default();
        for p in &self.active {
            g.add_node(*p);
        }
        if let Some(prev) = self.last_committed {
            let z = prev.compose(&self.odom[0]);
            g.add_factor(Factor::unary(
                FactorKind::Prior,
                0,
                z,
                self.odom_info(&self.odom[0]),
            ));
        }
        for k in 1..self.active.len() {
            g.add_factor(Factor::between(
                FactorKind::Odometry,
                k - 1,
                k,
                self.odom[k],
                self.odom_info(&self.odom[k]),
            ));
        }
        for (k, a) in self.anchors.iter().enumerate() {
            if let Some((z, info)) = a {
                g.add_factor(Factor::unary(FactorKind::Localization, k, *z, *info));
            }
        }
        let r = optimize_pose_graph(&g)?;
        self.active = r.poses.into();
        Ok(())
    }

    fn marginalize(&mut self) {
        while self.active_anchor_count() > self.cfg.window {
            let oldest = self
                .anchors
                .iter()
                .position(Option::is_some)
                .expect("anchors present");
            self.commit_front(oldest + 1);
        }
    }

    fn commit_front(&mut self, n: usize) {
        for _ in 0..n.min(self.active.len() - 1) {
            let p = self.active.pop_front().expect("nonempty");
            self.odom.pop_front();
            self.anchors.pop_front();
            self.committed.push(p);
            self.last_committed = Some(p);
            self.first_frame += 1;
        }
    }

    /// Commits the remaining window.
    pub fn finish(mut self) -> FusedTrajectory {
        let rest: Vec<Pose2> = self.active.drain(..).collect();
        self.committed.extend(rest);
        FusedTrajectory {
            unanchored: self.anchored_frames.is_empty(),
            poses: self.committed,
            anchored_frames: self.anchored_frames,
        }
    }
}

/// Batch form of [`WindowFusion`]: `odom[k]` leads from frame `k` to `k+1`,
/// and `locs` holds one result per frame.
pub fn fuse_window(
    initial: Pose2,
    odom: &[Pose2],
    locs: &[LocalizationResult],
    cfg: &LocalizationConfig,
) -> Result<FusedTrajectory, LocalizationError> {
    let mut w = WindowFusion::new(initial, *cfg);
    for (k, loc) in locs.iter().enumerate() {
        if k > 0 {
            w.add_odometry(&odom[k - 1])?;
        }
        w.add_localization(loc)?;
    }
    Ok(w.finish())
}

/// Keyframes from a session with the frame they are expressed in.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SessionKeyframes {
    pub keyframes: Vec<Keyframe>,
    /// Poses are in the map's world frame.
    pub anchored: bool,
}

fn in_footprint(line: &crate::features::LineFeature, center: Point2, radius: f64) -> bool {
    let g = &line.geometry;
    (g.endpoint_a - center).norm() <= radius && (g.endpoint_b - center).norm() <= radius
}

/// Merges session keyframes into `map`.
///
/// Matched batches get the log-odds update and re-fused geometry, unmatched
/// lines are appended, and prior batches that stayed unmatched while inside
/// the footprint of at least `miss_min_views` keyframes get one miss update
/// per such keyframe.
pub fn update_map(
    map: &VectorMap,
    session: &SessionKeyframes,
    cfg: &LocalizationConfig,
    mapping: &MappingConfig,
) -> Result<VectorMap, LocalizationError> {
    if session.keyframes.is_empty() {
        return Ok(map.clone());
    }
    if !session.anchored {
        return Err(LocalizationError::Unanchored);
    }
    let mut out = map.clone();
    let prior_count = out.batches.len();
    let prior_lines: Vec<_> = out.batches.iter().map(|b| b.line()).collect();
    let incoming: Vec<_> = session
        .keyframes
        .iter()
        .flat_map(keyframe_contributions)
        .collect();

    let mut matched = vec![false; prior_count];
    for (obs, ..) in &incoming {
        for (i, l) in prior_lines.iter().enumerate() {
            if !matched[i] && can_merge(&obs.line, l, &mapping.merge) {
                matched[i] = true;
            }
        }
    }
    let views: Vec<usize> = prior_lines
        .iter()
        .map(|l| {
            session
                .keyframes
                .iter()
                .filter(|k| in_footprint(l, k.pose.translation(), cfg.footprint_radius))
                .count()
        })
        .collect();

    merge_into_map(&mut out, &incoming, mapping);

    if cfg.negative_evidence {
        let miss = logit(1.0 - cfg.c_miss);
        for i in 0..prior_count {
            if !matched[i] && views[i] >= cfg.miss_min_views {
                let b = &mut out.batches[i];
                b.logodds = (b.logodds + miss * views[i] as f64)
                    .clamp(-mapping.log_odds_cap, mapping.log_odds_cap);
            }
        }
    }
    out.prune(mapping.prune_min);
    for k in &session.keyframes {
        if !out.keyframes.iter().any(|m| m.id == k.id) {
            out.keyframes.push(MapKeyframe {
                id: k.id,
                x: k.pose.x,
                y: k.pose.y,
                theta: k.pose.theta,
            });
        }
    }
    out.version += 1;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::LineFeature;
    use crate::geometry::Line2;
    use crate::mapping::{build_global_map, merge_frame_into_keyframe, serialize_map, MapEncoding};
    use crate::sim::Label;

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

    fn grid_lines() -> Vec<LineFeature> {
        let mut v = Vec::new();
        for i in 0..6 {
            let x = i as f64 * 2.5;
            v.push(lf([x, 0.0], [x, 5.0], [1.0, 0.0], 0.9));
            v.push(lf([x + 0.15, 0.0], [x + 0.15, 5.0], [-1.0, 0.0], 0.9));
        }
        v.push(lf([0.0, 0.0], [15.0, 0.0], [0.0, -1.0], 0.9));
        v
    }

    fn kf(id: u32, pose: Pose2, world: &[LineFeature]) -> Keyframe {
        let mut k = Keyframe::new(id, pose);
        let local: Vec<_> = world
            .iter()
            .map(|l| l.transformed(&pose.inverse()))
            .collect();
        merge_frame_into_keyframe(
            &mut k,
            &local,
            &Pose2::identity(),
            0,
            &MappingConfig::default(),
        );
        k
    }

    fn map_of(lines: &[LineFeature]) -> VectorMap {
        build_global_map(
            &[kf(0, Pose2::identity(), lines)],
            &MappingConfig::default(),
        )
    }

    fn frame_at(pose: &Pose2, world: &[LineFeature]) -> FrameFeatures {
        let local: Vec<_> = world
            .iter()
            .map(|l| l.transformed(&pose.inverse()))
            .collect();
        pseudo_frame(&local, 0.05)
    }

    #[test]
    fn localize_at_mapped_pose() {
        let world = grid_lines();
        let map = map_of(&world);
        let truth = Pose2::new(6.0, 2.0, 0.2);
        let frame = frame_at(&truth, &world);
        let cfg = LocalizationConfig::default();
        let r = localize_frame(
            &frame,
            &map,
            &Pose2::new(6.1, 1.95, 0.19),
            &cfg,
            &MappingConfig::default(),
            &MatchConfig::default(),
        );
        assert!(r.valid);
        assert!(r.pose.distance_to(&truth) < 0.02);
        assert!((r.pose.theta - truth.theta).abs() < 0.3f64.to_radians());
        assert!(r.overlap > 0.9);
    }

    #[test]
    fn localize_outside_map() {
        let world = grid_lines();
        let map = map_of(&world);
        let elsewhere: Vec<_> = world
            .iter()
            .map(|l| l.transformed(&Pose2::new(100.0, 0.0, 0.0)))
            .collect();
        let truth = Pose2::new(106.0, 2.0, 0.0);
        let r = localize_frame(
            &frame_at(&truth, &elsewhere),
            &map,
            &truth,
            &LocalizationConfig::default(),
            &MappingConfig::default(),
            &MatchConfig::default(),
        );
        assert!(!r.valid);
        assert_eq!(r.overlap, 0.0);
    }

    fn loc(k: usize, pose: Pose2, valid: bool) -> LocalizationResult {
        LocalizationResult {
            frame_index: k,
            pose,
            overlap: if valid { 1.0 } else { 0.0 },
            valid,
            inlier_ratio: 1.0,
            iterations: 3,
        }
    }

    #[test]
    fn exact_inputs_reproduce_localizations() {
        let step = Pose2::new(0.4, 0.0, 0.01);
        let truth: Vec<Pose2> = (0..40)
            .scan(Pose2::identity(), |p, _| {
                let cur = *p;
                *p = p.compose(&step);
                Some(cur)
            })
            .collect();
        let locs: Vec<_> = truth
            .iter()
            .enumerate()
            .map(|(k, p)| loc(k, *p, true))
            .collect();
        let out = fuse_window(
            truth[0],
            &vec![step; 39],
            &locs,
            &LocalizationConfig::default(),
        )
        .unwrap();
        assert!(!out.unanchored);
        assert_eq!(out.poses.len(), 40);
        for (a, b) in out.poses.iter().zip(&truth) {
            assert!(a.distance_to(b) < 1e-6);
        }
    }

    #[test]
    fn no_valid_results_is_unanchored() {
        let locs: Vec<_> = (0..5).map(|k| loc(k, Pose2::identity(), false)).collect();
        let out = fuse_window(
            Pose2::identity(),
            &[Pose2::new(0.4, 0.0, 0.0); 4],
            &locs,
            &LocalizationConfig::default(),
        )
        .unwrap();
        assert!(out.unanchored);
        assert_eq!(out.poses.len(), 5);
        assert!(out.poses[4].distance_to(&Pose2::new(1.6, 0.0, 0.0)) < 1e-12);
    }

    #[test]
    fn window_bound_and_append_only() {
        let cfg = LocalizationConfig::default();
        let step = Pose2::new(0.4, 0.0, 0.0);
        let mut w = WindowFusion::new(Pose2::identity(), cfg);
        let mut seen: Vec<Pose2> = Vec::new();
        let mut truth = Pose2::identity();
        for k in 0..60 {
            if k > 0 {
                w.add_odometry(&step).unwrap();
                truth = truth.compose(&step);
            }
            w.add_localization(&loc(
                k,
                Pose2::new(truth.x + 0.003 * (k % 3) as f64, truth.y, 0.0),
                true,
            ))
            .unwrap();
            assert!(w.active_anchor_count() <= cfg.window);
            assert_eq!(&w.committed()[..seen.len()], &seen[..]);
            seen = w.committed().to_vec();
        }
    }

    #[test]
    fn invalid_gap_stays_continuous() {
        // biased odometry through a 50-frame gap, then exact localizations
        let cfg = LocalizationConfig::default();
        let step = Pose2::new(0.4, 0.0, 0.0);
        let biased = Pose2::new(0.4, 0.0, 0.004);
        let n = 90;
        let truth: Vec<Pose2> = (0..n)
            .map(|k| Pose2::new(0.4 * k as f64, 0.0, 0.0))
            .collect();
        let locs: Vec<_> = (0..n)
            .map(|k| loc(k, truth[k], !(20..70).contains(&k)))
            .collect();
        let out = fuse_window(truth[0], &vec![biased; n - 1], &locs, &cfg).unwrap();
        let max_jump = out
            .poses
            .windows(2)
            .map(|w| w[0].distance_to(&w[1]))
            .fold(0.0, f64::max);
        assert!(max_jump <= 2.0 * step.x, "{max_jump}");
        assert!(out.poses[n - 1].distance_to(&truth[n - 1]) < 0.05);
    }

    #[test]
    fn update_completion_and_empty() {
        let mapping = MappingConfig::default();
        let cfg = LocalizationConfig::default();
        let world = grid_lines();
        let map = map_of(&world[..6]);
        let same = update_map(&map, &SessionKeyframes::default(), &cfg, &mapping).unwrap();
        assert_eq!(
            serialize_map(&same, MapEncoding::Binary),
            serialize_map(&map, MapEncoding::Binary)
        );

        let session = SessionKeyframes {
            keyframes: vec![kf(100, Pose2::new(7.0, 2.0, 0.0), &world)],
            anchored: true,
        };
        let up = update_map(&map, &session, &cfg, &mapping).unwrap();
        assert!(up.batches.len() > map.batches.len());
        assert_eq!(up.version, map.version + 1);

        let bad = SessionKeyframes {
            anchored: false,
            ..session
        };
        assert_eq!(
            update_map(&map, &bad, &cfg, &mapping),
            Err(LocalizationError::Unanchored)
        );
    }

    #[test]
    fn update_is_idempotent_up_to_log_odds() {
        let mapping = MappingConfig::default();
        let cfg = LocalizationConfig::default();
        let world = grid_lines();
        let map = map_of(&world);
        let shifted: Vec<_> = world
            .iter()
            .map(|l| l.transformed(&Pose2::new(0.01, 0.0, 0.0)))
            .collect();
        let session = SessionKeyframes {
            keyframes: vec![
                kf(100, Pose2::new(7.0, 2.0, 0.0), &shifted),
                kf(101, Pose2::new(7.5, 2.0, 0.0), &shifted),
            ],
            anchored: true,
        };
        let once = update_map(&map, &session, &cfg, &mapping).unwrap();
        let twice = update_map(&once, &session, &cfg, &mapping).unwrap();
        assert_eq!(once.batches.len(), twice.batches.len());
        for ((a, b), c) in map.batches.iter().zip(&once.batches).zip(&twice.batches) {
            for (x, y) in [
                (b.cx, c.cx),
                (b.cy, c.cy),
                (b.ex1, c.ex1),
                (b.ey2, c.ey2),
                (b.nrm, c.nrm),
            ] {
                assert!((x - y).abs() < 1e-9);
            }
            let d1 = b.logodds - a.logodds;
            let d2 = c.logodds - b.logodds;
            if b.logodds.abs() < mapping.log_odds_cap && c.logodds.abs() < mapping.log_odds_cap {
                assert!((d1 - d2).abs() < 1e-9, "{d1} vs {d2}");
            }
        }
    }

    #[test]
    fn negative_evidence_for_missing_marker() {
        let mapping = MappingConfig::default();
        let world = grid_lines();
        let map = map_of(&world);
        let kept: Vec<_> = world
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != 4)
            .map(|(_, l)| *l)
            .collect();
        let session = SessionKeyframes {
            keyframes: (0..4)
                .map(|k| kf(100 + k, Pose2::new(6.0 + 0.5 * k as f64, 2.0, 0.0), &kept))
                .collect(),
            anchored: true,
        };
        let gone = map
            .lines()
            .iter()
            .position(|l| can_merge(&world[4], l, &mapping.merge))
            .unwrap();
        let before = map.batches[gone].logodds;
        let on = update_map(&map, &session, &LocalizationConfig::default(), &mapping).unwrap();
        let off = update_map(
            &map,
            &session,
            &LocalizationConfig {
                negative_evidence: false,
                ..Default::default()
            },
            &mapping,
        )
        .unwrap();
        let find = |m: &VectorMap| {
            m.lines()
                .iter()
                .position(|l| can_merge(&world[4], l, &mapping.merge))
                .map(|i| m.batches[i].logodds)
        };
        assert_eq!(find(&off), Some(before));
        assert!(find(&on).is_none_or(|l| l < before));
    }
}
