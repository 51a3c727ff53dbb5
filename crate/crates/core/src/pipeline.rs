//! End-to-end runs over the simulator: mapping, localization sessions with
//! map update, and paired registration trials.

use crate::camera::ProjectionLut;
use crate::exec::{self, Execution};
use crate::features::{
    parameterize_frame, FeatureConfig, FeatureError, FrameFeatures, LineFeature,
};
use crate::geometry::{normalize_angle, Pose2};
use crate::localization::{
    localize_frame, odometry_information, update_map, FusedTrajectory, LocalizationConfig,
    LocalizationError, LocalizationResult, SessionKeyframes, WindowFusion,
};
use crate::mapping::{
    build_global_map, detect_loop, information_from_sigmas, merge_frame_into_keyframe,
    optimize_pose_graph, should_create_keyframe, Factor, FactorKind, Keyframe, LoopClosure,
    MappingConfig, MappingError, OptimizationResult, PoseGraph, VectorMap,
};
use crate::registration::{overlap_ratio, register, MatchConfig, MatchMode};
use crate::sim::{
    apply_label_dropout, simulate_odometry, OdomNoiseSpec, Scene, SceneIndex, SimError,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Features(#[from] FeatureError),
    #[error(transparent)]
    Mapping(#[from] MappingError),
    #[error(transparent)]
    Localization(#[from] LocalizationError),
    #[error("{0}")]
    Input(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub features: FeatureConfig,
    pub icp: MatchConfig,
    pub mapping: MappingConfig,
    pub localization: LocalizationConfig,
    pub noise: OdomNoiseSpec,
    /// Probability that a marker pixel is segmented as background.
    pub label_dropout: f64,
    /// Use every n-th frame of the trajectory.
    pub frame_stride: usize,
    pub seed: u64,
    /// Wall-clock stage timings in reports; off keeps outputs reproducible.
    pub record_timings: bool,
    #[serde(skip)]
    pub exec: Execution,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            features: FeatureConfig::default(),
            icp: MatchConfig::default(),
            mapping: MappingConfig::default(),
            localization: LocalizationConfig::default(),
            noise: OdomNoiseSpec::default(),
            label_dropout: 0.0,
            frame_stride: 1,
            seed: 0,
            record_timings: false,
            exec: Execution::default(),
        }
    }
}

/// Independent stream seed for `(seed, stream, index)` (splitmix64).
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed
        ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const DROPOUT_STREAM: u64 = 1;
const ODOMETRY_STREAM: u64 = 2;
const TRIAL_STREAM: u64 = 3;

/// Accumulated wall-clock time per stage, in milliseconds.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings(pub BTreeMap<String, f64>);

impl StageTimings {
    fn add(&mut self, stage: &str, since: Instant) {
        *self.0.entry(stage.to_string()).or_default() += since.elapsed().as_secs_f64() * 1e3;
    }
}

/// The simulated sensor: scene, camera table and segmentation noise.
pub struct World<'a> {
    index: SceneIndex<'a>,
    lut: &'a ProjectionLut,
}

impl<'a> World<'a> {
    pub fn new(scene: &'a Scene, lut: &'a ProjectionLut) -> Self {
        Self {
            index: SceneIndex::new(scene),
            lut,
        }
    }

    /// Features of a frame captured at `pose`.
    pub fn observe(
        &self,
        pose: &Pose2,
        frame_index: usize,
        dropout: f64,
        seed: u64,
    ) -> Result<FrameFeatures, FeatureError> {
        self.observe_with(
            pose,
            frame_index,
            dropout,
            seed,
            &FeatureConfig::default(),
            Execution::Sequential,
        )
    }

    pub fn observe_with(
        &self,
        pose: &Pose2,
        frame_index: usize,
        dropout: f64,
        seed: u64,
        cfg: &FeatureConfig,
        exec: Execution,
    ) -> Result<FrameFeatures, FeatureError> {
        let mut raster = self.index.render(pose, self.lut, exec);
        apply_label_dropout(
            &mut raster,
            dropout,
            derive_seed(seed, DROPOUT_STREAM, frame_index as u64),
        );
        let mut f = parameterize_frame(&raster, self.lut, cfg)?;
        f.frame_index = frame_index;
        Ok(f)
    }
}

/// One frame-to-frame odometry measurement.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OdometryStep {
    /// Pose of the current frame in the previous frame.
    pub relative: Pose2,
    pub icp_used: bool,
    pub iterations: usize,
    pub overlap: f64,
}

/// Refines the motion prior `prior` by registering `cur` onto `prev`; keeps
/// the prior when ICP fails or strays too far from it.
pub fn frontend_odometry(
    prev: &FrameFeatures,
    cur: &FrameFeatures,
    prior: &Pose2,
    cfg: &PipelineConfig,
) -> OdometryStep {
    let r = register(cur, prev, prior, &cfg.icp);
    let dev = prior.inverse().compose(&r.transform);
    let plausible =
        dev.translation().norm() <= 0.2 && normalize_angle(dev.theta).abs() <= 5f64.to_radians();
    let icp_used = r.converged && r.inlier_ratio >= 0.3 && plausible;
    let relative = if icp_used { r.transform } else { *prior };
    OdometryStep {
        relative,
        icp_used,
        iterations: r.iterations,
        overlap: overlap_ratio(&cur.lines, &prev.lines, &relative, &cfg.mapping.merge),
    }
}

const CHUNK: usize = 16;

/// Streams frames at `poses` in order, with the odometry step into each
/// frame after the first. Observation and registration run chunk-parallel.
fn stream_frames(
    world: &World,
    poses: &[Pose2],
    indices: &[usize],
    odom_prior: &[Pose2],
    cfg: &PipelineConfig,
    mut visit: impl FnMut(usize, &FrameFeatures, Option<OdometryStep>) -> Result<(), PipelineError>,
) -> Result<StageTimings, PipelineError> {
    let mut timings = StageTimings::default();
    let mut prev: Option<FrameFeatures> = None;
    let mut start = 0;
    while start < poses.len() {
        let end = (start + CHUNK).min(poses.len());
        let t = Instant::now();
        let frames = exec::map_range(cfg.exec, end - start, |k| {
            world.observe_with(
                &poses[start + k],
                indices[start + k],
                cfg.label_dropout,
                cfg.seed,
                &cfg.features,
                Execution::Sequential,
            )
        })
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
        timings.add("features", t);
        let t = Instant::now();
        let steps = exec::map_range(cfg.exec, end - start, |k| {
            let i = start + k;
            if i == 0 {
                return None;
            }
            let before = if k == 0 {
                prev.as_ref().expect("previous frame")
            } else {
                &frames[k - 1]
            };
            Some(frontend_odometry(
                before,
                &frames[k],
                &odom_prior[i - 1],
                cfg,
            ))
        });
        timings.add("odometry", t);
        for (k, (f, s)) in frames.iter().zip(steps).enumerate() {
            visit(start + k, f, s)?;
        }
        prev = frames.into_iter().last();
        start = end;
    }
    Ok(timings)
}

impl StageTimings {
    fn merge(&mut self, other: StageTimings) {
        for (k, v) in other.0 {
            *self.0.entry(k).or_default() += v;
        }
    }
}

fn used_frames(gt: &[Pose2], stride: usize) -> (Vec<usize>, Vec<Pose2>) {
    let idx: Vec<usize> = (0..gt.len()).step_by(stride.max(1)).collect();
    let poses = idx.iter().map(|&i| gt[i]).collect();
    (idx, poses)
}

/// The simulated motion prior between consecutive used frames of a run.
pub fn simulated_odometry(gt: &[Pose2], cfg: &PipelineConfig) -> Result<Vec<Pose2>, PipelineError> {
    if gt.len() < 2 {
        return Ok(Vec::new());
    }
    let noise = OdomNoiseSpec {
        seed: derive_seed(cfg.seed, ODOMETRY_STREAM, 0),
        ..cfg.noise
    };
    Ok(simulate_odometry(gt, &noise)?)
}

#[derive(Debug, Clone)]
pub struct MappingRun {
    /// Source trajectory index of each used frame.
    pub frame_indices: Vec<usize>,
    pub ground_truth: Vec<Pose2>,
    /// Odometry front-end estimate before optimization.
    pub frontend: Vec<Pose2>,
    /// Frame poses after pose-graph optimization.
    pub estimate: Vec<Pose2>,
    pub keyframes: Vec<Keyframe>,
    pub map: VectorMap,
    pub loops: Vec<LoopClosure>,
    pub optimization: OptimizationResult,
    /// Projected contour points over all frames.
    pub raw_points: usize,
    pub icp_iterations: Vec<usize>,
    /// Whether each odometry step came from registration rather than the prior.
    pub icp_accepted: Vec<bool>,
    /// Overlap between each frame and its predecessor.
    pub frame_overlap: Vec<f64>,
    pub timings: StageTimings,
}

impl MappingRun {
    pub fn mean_icp_iterations(&self) -> f64 {
        mean_usize(&self.icp_iterations)
    }
}

fn mean_usize(v: &[usize]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<usize>() as f64 / v.len() as f64
    }
}

/// Builds a map from a drive along `gt`, starting from a known first pose.
pub fn run_mapping(
    scene: &Scene,
    gt: &[Pose2],
    lut: &ProjectionLut,
    cfg: &PipelineConfig,
) -> Result<MappingRun, PipelineError> {
    if gt.is_empty() {
        return Err(PipelineError::Input("trajectory has no poses".into()));
    }
    let world = World::new(scene, lut);
    let (indices, poses) = used_frames(gt, cfg.frame_stride);
    let odom = simulated_odometry(&poses, cfg)?;
    let mcfg = &cfg.mapping;
    let mut timings = StageTimings::default();

    let mut frontend: Vec<Pose2> = Vec::with_capacity(poses.len());
    let mut membership: Vec<(usize, Pose2)> = Vec::with_capacity(poses.len());
    let mut keyframes: Vec<Keyframe> = Vec::new();
    let mut loops: Vec<LoopClosure> = Vec::new();
    let mut raw_points = 0;
    let mut icp_iterations = Vec::new();
    let mut icp_accepted = Vec::new();
    let mut frame_overlap = Vec::new();

    let close_loop =
        |keyframes: &[Keyframe], loops: &mut Vec<LoopClosure>, timings: &mut StageTimings| {
            let t = Instant::now();
            let (cur, older) = keyframes.split_last().expect("keyframe");
            if let Some(l) = detect_loop(cur, older, &|id| id as usize, mcfg, &cfg.icp, cfg.exec) {
                loops.push(l);
            }
            timings.add("loop_closure", t);
        };

    let streamed = stream_frames(&world, &poses, &indices, &odom, cfg, |i, frame, step| {
        raw_points += frame.raw_point_count;
        let pose = match step {
            None => poses[0],
            Some(s) => {
                icp_iterations.push(s.iterations);
                icp_accepted.push(s.icp_used);
                frame_overlap.push(s.overlap);
                frontend[i - 1].compose(&s.relative)
            }
        };
        frontend.push(pose);
        let t = Instant::now();
        let new_kf = match keyframes.last() {
            None => true,
            Some(kf) => should_create_keyframe(&kf.pose.inverse().compose(&pose), mcfg),
        };
        if new_kf {
            if !keyframes.is_empty() {
                close_loop(&keyframes, &mut loops, &mut timings);
            }
            keyframes.push(Keyframe::new(keyframes.len() as u32, pose));
        }
        let kf = keyframes.last_mut().expect("keyframe");
        let rel = kf.pose.inverse().compose(&pose);
        merge_frame_into_keyframe(kf, &frame.lines, &rel, (i as u64) << 16, mcfg);
        membership.push((keyframes.len() - 1, rel));
        timings.add("keyframes", t);
        Ok(())
    })?;
    timings.merge(streamed);
    close_loop(&keyframes, &mut loops, &mut timings);

    let t = Instant::now();
    let mut graph = PoseGraph::default();
    for kf in &keyframes {
        graph.add_node(kf.pose);
    }
    graph.add_factor(Factor::unary(
        FactorKind::Prior,
        0,
        keyframes[0].pose,
        information_from_sigmas(1e-3, 1e-4),
    ));
    for k in 1..keyframes.len() {
        let z = keyframes[k - 1].pose.inverse().compose(&keyframes[k].pose);
        let info = odometry_information(
            z.translation().norm(),
            cfg.noise.sigma_trans,
            cfg.noise.sigma_rot,
        );
        graph.add_factor(Factor::between(FactorKind::Odometry, k - 1, k, z, info));
    }
    for l in &loops {
        graph.add_factor(l.factor.clone());
    }
    let optimization = optimize_pose_graph(&graph)?;
    timings.add("optimization", t);

    let t = Instant::now();
    for (kf, p) in keyframes.iter_mut().zip(&optimization.poses) {
        kf.pose = *p;
    }
    let estimate = membership
        .iter()
        .map(|(k, rel)| keyframes[*k].pose.compose(rel))
        .collect();
    let map = build_global_map(&keyframes, mcfg);
    timings.add("map_build", t);

    Ok(MappingRun {
        frame_indices: indices,
        ground_truth: poses,
        frontend,
        estimate,
        keyframes,
        map,
        loops,
        optimization,
        raw_points,
        icp_iterations,
        icp_accepted,
        frame_overlap,
        timings: if cfg.record_timings {
            timings
        } else {
            StageTimings::default()
        },
    })
}

#[derive(Debug, Clone)]
pub struct SessionRun {
    pub frame_indices: Vec<usize>,
    pub ground_truth: Vec<Pose2>,
    pub results: Vec<LocalizationResult>,
    pub fused: FusedTrajectory,
    pub keyframes: SessionKeyframes,
    /// Map after completion/refinement, when requested.
    pub updated_map: Option<VectorMap>,
    pub raw_points: usize,
    pub icp_iterations: Vec<usize>,
    pub timings: StageTimings,
}

impl SessionRun {
    pub fn validity_fraction(&self) -> f64 {
        if self.results.is_empty() {
            0.0
        } else {
            self.results.iter().filter(|r| r.valid).count() as f64 / self.results.len() as f64
        }
    }

    pub fn mean_icp_iterations(&self) -> f64 {
        mean_usize(&self.icp_iterations)
    }
}

/// Localizes a drive along `gt` against `map`, starting from `initial`,
/// and optionally merges the session into the map.
pub fn run_localization(
    scene: &Scene,
    gt: &[Pose2],
    lut: &ProjectionLut,
    map: &VectorMap,
    initial: Pose2,
    cfg: &PipelineConfig,
    update: bool,
) -> Result<SessionRun, PipelineError> {
    if gt.is_empty() {
        return Err(PipelineError::Input("trajectory has no poses".into()));
    }
    if !initial.is_finite() {
        return Err(PipelineError::Input("initial pose is not finite".into()));
    }
    let world = World::new(scene, lut);
    let (indices, poses) = used_frames(gt, cfg.frame_stride);
    let odom = simulated_odometry(&poses, cfg)?;
    let mut timings = StageTimings::default();
    let mut window = WindowFusion::new(initial, cfg.localization);
    let mut results = Vec::with_capacity(poses.len());
    let mut frame_lines: Vec<Vec<LineFeature>> = Vec::with_capacity(poses.len());
    let mut raw_points = 0;
    let mut icp_iterations = Vec::new();

    let streamed = stream_frames(&world, &poses, &indices, &odom, cfg, |_, frame, step| {
        raw_points += frame.raw_point_count;
        let t = Instant::now();
        if let Some(s) = step {
            window.add_odometry(&s.relative)?;
        }
        let loc = localize_frame(
            frame,
            map,
            &window.current(),
            &cfg.localization,
            &cfg.mapping,
            &cfg.icp,
        );
        icp_iterations.push(loc.iterations);
        window.add_localization(&loc)?;
        results.push(loc);
        frame_lines.push(frame.lines.clone());
        timings.add("localization", t);
        Ok(())
    })?;
    timings.merge(streamed);
    let fused = window.finish();

    let t = Instant::now();
    let first_id = map.keyframes.iter().map(|k| k.id + 1).max().unwrap_or(0);
    let mut keyframes: Vec<Keyframe> = Vec::new();
    for (i, (pose, lines)) in fused.poses.iter().zip(&frame_lines).enumerate() {
        let new_kf = keyframes.last().is_none_or(|kf| {
            should_create_keyframe(&kf.pose.inverse().compose(pose), &cfg.mapping)
        });
        if new_kf {
            keyframes.push(Keyframe::new(first_id + keyframes.len() as u32, *pose));
        }
        let kf = keyframes.last_mut().expect("keyframe");
        let rel = kf.pose.inverse().compose(pose);
        merge_frame_into_keyframe(kf, lines, &rel, (i as u64) << 16, &cfg.mapping);
    }
    let session = SessionKeyframes {
        keyframes,
        anchored: !fused.unanchored,
    };
    let updated_map = if update {
        Some(update_map(map, &session, &cfg.localization, &cfg.mapping)?)
    } else {
        None
    };
    timings.add("map_update", t);

    Ok(SessionRun {
        frame_indices: indices,
        ground_truth: poses,
        results,
        fused,
        keyframes: session,
        updated_map,
        raw_points,
        icp_iterations,
        timings: if cfg.record_timings {
            timings
        } else {
            StageTimings::default()
        },
    })
}

/// Paired registration trial outcome.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub truth: Pose2,
    pub estimate: Pose2,
    pub converged: bool,
    pub iterations: usize,
    pub baseline_converged: bool,
    pub baseline_iterations: usize,
}

impl TrialResult {
    pub fn translation_error(&self) -> f64 {
        self.estimate.distance_to(&self.truth)
    }

    pub fn rotation_error(&self) -> f64 {
        normalize_angle(self.estimate.theta - self.truth.theta).abs()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrialConfig {
    pub count: usize,
    pub max_translation: f64,
    pub max_rotation: f64,
    pub label_dropout: f64,
    pub seed: u64,
}

impl Default for TrialConfig {
    fn default() -> Self {
        Self {
            count: 100,
            max_translation: 0.3,
            max_rotation: 10f64.to_radians(),
            label_dropout: 0.0,
            seed: 0,
        }
    }
}

/// Registers frames captured at `P∘δ` onto frames captured at `P` for random
/// aisle poses `P` of a lot from [`crate::sim::generate_lot`] with `rows`
/// rows and random offsets `δ`, in both association modes.
pub fn registration_trials(
    scene: &Scene,
    rows: u32,
    lut: &ProjectionLut,
    trials: &TrialConfig,
    cfg: &PipelineConfig,
) -> Result<Vec<TrialResult>, PipelineError> {
    let world = World::new(scene, lut);
    let x_max = scene.extent.max[0] - crate::sim::LOT_MARGIN - 3.0;
    let results = exec::map_range(
        cfg.exec,
        trials.count,
        |k| -> Result<TrialResult, PipelineError> {
            let mut rng =
                ChaCha8Rng::seed_from_u64(derive_seed(trials.seed, TRIAL_STREAM, k as u64));
            let row = rng.random_range(0..rows.max(1));
            let heading = if rng.random_bool(0.5) {
                0.0
            } else {
                std::f64::consts::PI
            };
            let base = Pose2::new(
                rng.random_range(3.0..x_max.max(3.5)),
                crate::sim::aisle_center_y(row),
                heading + rng.random_range(-0.2..0.2),
            );
            let delta = Pose2::new(
                rng.random_range(-trials.max_translation..=trials.max_translation),
                rng.random_range(-trials.max_translation..=trials.max_translation),
                rng.random_range(-trials.max_rotation..=trials.max_rotation),
            );
            let seed = derive_seed(trials.seed, TRIAL_STREAM + 1, k as u64);
            let dst = world.observe_with(
                &base,
                0,
                trials.label_dropout,
                seed,
                &cfg.features,
                Execution::Sequential,
            )?;
            let src = world.observe_with(
                &base.compose(&delta),
                1,
                trials.label_dropout,
                seed,
                &cfg.features,
                Execution::Sequential,
            )?;
            let r = register(&src, &dst, &Pose2::identity(), &cfg.icp);
            let b = register(
                &src,
                &dst,
                &Pose2::identity(),
                &MatchConfig {
                    mode: MatchMode::NearestNeighborBaseline,
                    ..cfg.icp
                },
            );
            Ok(TrialResult {
                truth: delta,
                estimate: r.transform,
                converged: r.converged,
                iterations: r.iterations,
                baseline_converged: b.converged,
                baseline_iterations: b.iterations,
            })
        },
    );
    results.into_iter().collect()
}
