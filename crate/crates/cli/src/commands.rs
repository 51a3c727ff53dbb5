use crate::config::RunConfig;
use crate::error::CliError;
use crate::render::render_svg;
use gsmap::camera::{Calibration, ProjectionLut};
use gsmap::geometry::{trajectory_error, TrajectoryStats};
use gsmap::mapping::{deserialize_map, serialize_map, MapEncoding, VectorMap};
use gsmap::pipeline::{run_localization, run_mapping, MappingRun, SessionRun, StageTimings};
use gsmap::sim::{Scene, TrajectoryFile};
use gsmap::Pose2;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

/// Bytes per raw contour point (two f64 coordinates), matching the map's
/// own f64 encoding.
pub const RAW_POINT_BYTES: u64 = 16;

pub const MAP_FILE: &str = "map.gsmap";
pub const UPDATED_MAP_FILE: &str = "map_updated.gsmap";
pub const TRAJ_EST_FILE: &str = "traj_est.jsonl";
pub const TRAJ_GT_FILE: &str = "traj_gt.jsonl";
pub const METRICS_FILE: &str = "metrics.json";
pub const RENDER_FILE: &str = "render.svg";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub rmse_m: f64,
    pub max_m: f64,
    pub mean_m: f64,
    pub nees: f64,
    pub map_bytes: u64,
    pub raw_cloud_bytes: u64,
    pub loop_closures: usize,
    /// Fraction of frames with a valid localization; absent for mapping runs.
    pub validity_fraction: Option<f64>,
    pub mean_icp_iterations: f64,
    /// Empty unless `pipeline.record_timings` is set.
    pub stage_timings_ms: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mapping: Option<MappingReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub localization: Option<LocalizationReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MappingReport {
    pub frames: usize,
    pub keyframes: usize,
    pub batches: usize,
    pub pre_optimization_rmse_m: f64,
    pub pre_optimization_endpoint_m: f64,
    pub endpoint_m: f64,
    pub optimizer_iterations: usize,
    pub icp_fallback_frames: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalizationReport {
    pub anchored: bool,
    pub batches_before: usize,
    pub batches_after: usize,
    pub frames: Vec<FrameReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameReport {
    pub frame: usize,
    pub p: f64,
    pub valid: bool,
}

/// One line of a trajectory file. Localization runs add `valid` and `p`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub frame: usize,
    pub x: f64,
    pub y: f64,
    pub theta: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub valid: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p: Option<f64>,
}

impl TrajectoryRecord {
    pub fn pose(&self) -> Pose2 {
        Pose2::new(self.x, self.y, self.theta)
    }
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
    std::fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn write_trajectory(path: &Path, records: &[TrajectoryRecord]) -> Result<(), CliError> {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r).expect("record serializes"));
        s.push('\n');
    }
    write_file(path, s)
}

fn plain_records(indices: &[usize], poses: &[Pose2]) -> Vec<TrajectoryRecord> {
    indices
        .iter()
        .zip(poses)
        .map(|(&frame, p)| TrajectoryRecord {
            frame,
            x: p.x,
            y: p.y,
            theta: p.theta,
            valid: None,
            p: None,
        })
        .collect()
}

/// Parses a JSON-lines trajectory; blank lines are skipped.
pub fn read_trajectory(path: &Path) -> Result<Vec<TrajectoryRecord>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| CliError::Input(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

pub fn read_map(path: &Path) -> Result<VectorMap, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(deserialize_map(&bytes)?)
}

fn map_bytes(map: &VectorMap) -> Result<Vec<u8>, CliError> {
    serialize_map(map, MapEncoding::Binary)
        .map_err(|e| CliError::Numerical(format!("map encoding: {e}")))
}

struct Inputs {
    scene: Scene,
    truth: Vec<Pose2>,
    lut: ProjectionLut,
}

fn load_inputs(cfg: &RunConfig) -> Result<Inputs, CliError> {
    let scene = Scene::load(&cfg.scene)?;
    scene.validate()?;
    let truth = TrajectoryFile::load(&cfg.trajectory)?.poses()?;
    let calibration = match &cfg.calibration {
        Some(p) => Calibration::load(p)?,
        None => Calibration::default(),
    };
    let lut = calibration.build_lut(cfg.pipeline.exec)?;
    Ok(Inputs { scene, truth, lut })
}

fn prepare_out(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn timings(t: &StageTimings) -> BTreeMap<String, f64> {
    t.0.clone()
}

fn stats_fields(s: &TrajectoryStats) -> (f64, f64, f64, f64) {
    (s.rmse, s.max_err, s.mean_err, s.nees)
}

fn mapping_metrics(run: &MappingRun, map_len: usize) -> Result<Metrics, CliError> {
    let stats = trajectory_error(&run.estimate, &run.ground_truth)?;
    let pre = trajectory_error(&run.frontend, &run.ground_truth)?;
    let last = run.ground_truth.len() - 1;
    let (rmse_m, max_m, mean_m, nees) = stats_fields(&stats);
    Ok(Metrics {
        rmse_m,
        max_m,
        mean_m,
        nees,
        map_bytes: map_len as u64,
        raw_cloud_bytes: run.raw_points as u64 * RAW_POINT_BYTES,
        loop_closures: run.loops.len(),
        validity_fraction: None,
        mean_icp_iterations: run.mean_icp_iterations(),
        stage_timings_ms: timings(&run.timings),
        mapping: Some(MappingReport {
            frames: run.ground_truth.len(),
            keyframes: run.keyframes.len(),
            batches: run.map.batches.len(),
            pre_optimization_rmse_m: pre.rmse,
            pre_optimization_endpoint_m: run.frontend[last].distance_to(&run.ground_truth[last]),
            endpoint_m: run.estimate[last].distance_to(&run.ground_truth[last]),
            optimizer_iterations: run.optimization.iterations,
            icp_fallback_frames: run.icp_accepted.iter().filter(|a| !**a).count(),
        }),
        localization: None,
    })
}

/// Builds a map from the configured drive and writes map, trajectories and
/// metrics into `out`.
pub fn cmd_map(cfg: &RunConfig, out: &Path) -> Result<Metrics, CliError> {
    let inputs = load_inputs(cfg)?;
    let run = run_mapping(&inputs.scene, &inputs.truth, &inputs.lut, &cfg.pipeline)?;
    let bytes = map_bytes(&run.map)?;
    let metrics = mapping_metrics(&run, bytes.len())?;
    prepare_out(out)?;
    write_file(&out.join(MAP_FILE), &bytes)?;
    write_trajectory(
        &out.join(TRAJ_EST_FILE),
        &plain_records(&run.frame_indices, &run.estimate),
    )?;
    write_trajectory(
        &out.join(TRAJ_GT_FILE),
        &plain_records(&run.frame_indices, &run.ground_truth),
    )?;
    write_metrics(&out.join(METRICS_FILE), &metrics)?;
    Ok(metrics)
}

fn session_metrics(
    run: &SessionRun,
    prior: &VectorMap,
    map_len: usize,
) -> Result<Metrics, CliError> {
    let stats = trajectory_error(&run.fused.poses, &run.ground_truth)?;
    let (rmse_m, max_m, mean_m, nees) = stats_fields(&stats);
    Ok(Metrics {
        rmse_m,
        max_m,
        mean_m,
        nees,
        map_bytes: map_len as u64,
        raw_cloud_bytes: run.raw_points as u64 * RAW_POINT_BYTES,
        loop_closures: 0,
        validity_fraction: Some(run.validity_fraction()),
        mean_icp_iterations: run.mean_icp_iterations(),
        stage_timings_ms: timings(&run.timings),
        mapping: None,
        localization: Some(LocalizationReport {
            anchored: !run.fused.unanchored,
            batches_before: prior.batches.len(),
            batches_after: run.updated_map.as_ref().unwrap_or(prior).batches.len(),
            frames: run
                .results
                .iter()
                .zip(&run.frame_indices)
                .map(|(r, &frame)| FrameReport {
                    frame,
                    p: r.overlap,
                    valid: r.valid,
                })
                .collect(),
        }),
    })
}

/// Localizes the configured drive against the map at `map_path`, merging
/// the session into the map unless `update_map` is off.
pub fn cmd_localize(cfg: &RunConfig, map_path: &Path, out: &Path) -> Result<Metrics, CliError> {
    let map = read_map(map_path)?;
    let inputs = load_inputs(cfg)?;
    let initial = cfg.initial_pose.unwrap_or(inputs.truth[0]);
    let run = run_localization(
        &inputs.scene,
        &inputs.truth,
        &inputs.lut,
        &map,
        initial,
        &cfg.pipeline,
        cfg.update_map,
    )?;
    let bytes = map_bytes(run.updated_map.as_ref().unwrap_or(&map))?;
    let metrics = session_metrics(&run, &map, bytes.len())?;
    prepare_out(out)?;
    if run.updated_map.is_some() {
        write_file(&out.join(UPDATED_MAP_FILE), &bytes)?;
    }
    let records: Vec<TrajectoryRecord> = run
        .frame_indices
        .iter()
        .zip(&run.fused.poses)
        .zip(&run.results)
        .map(|((&frame, p), r)| TrajectoryRecord {
            frame,
            x: p.x,
            y: p.y,
            theta: p.theta,
            valid: Some(r.valid),
            p: Some(r.overlap),
        })
        .collect();
    write_trajectory(&out.join(TRAJ_EST_FILE), &records)?;
    write_trajectory(
        &out.join(TRAJ_GT_FILE),
        &plain_records(&run.frame_indices, &run.ground_truth),
    )?;
    write_metrics(&out.join(METRICS_FILE), &metrics)?;
    Ok(metrics)
}

pub fn write_metrics(path: &Path, m: &Metrics) -> Result<(), CliError> {
    let mut s = serde_json::to_string_pretty(m).expect("metrics serialize");
    s.push('\n');
    write_file(path, s)
}

pub fn read_metrics(path: &Path) -> Result<Metrics, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

/// Compares two trajectory files pose by pose.
pub fn cmd_eval(gt: &Path, est: &Path) -> Result<TrajectoryStats, CliError> {
    let g: Vec<Pose2> = read_trajectory(gt)?
        .iter()
        .map(TrajectoryRecord::pose)
        .collect();
    let e: Vec<Pose2> = read_trajectory(est)?
        .iter()
        .map(TrajectoryRecord::pose)
        .collect();
    Ok(trajectory_error(&e, &g)?)
}

pub fn stats_table(s: &TrajectoryStats) -> String {
    let mut t = String::new();
    writeln!(t, "{:<10}{:>12}", "metric", "value").unwrap();
    writeln!(t, "{:<10}{:>12.2}", "max (cm)", s.max_err * 100.0).unwrap();
    writeln!(t, "{:<10}{:>12.2}", "mean (cm)", s.mean_err * 100.0).unwrap();
    writeln!(t, "{:<10}{:>12.2}", "rmse (cm)", s.rmse * 100.0).unwrap();
    writeln!(t, "{:<10}{:>12.4}", "nees (%)", s.nees * 100.0).unwrap();
    t
}

/// Draws the map and trajectories into `out/render.svg`.
pub fn cmd_render(
    map_path: &Path,
    trajectories: &[PathBuf],
    out: &Path,
) -> Result<PathBuf, CliError> {
    let map = read_map(map_path)?;
    let trajs = trajectories
        .iter()
        .map(|p| {
            Ok(read_trajectory(p)?
                .iter()
                .map(TrajectoryRecord::pose)
                .collect())
        })
        .collect::<Result<Vec<Vec<Pose2>>, CliError>>()?;
    prepare_out(out)?;
    let path = out.join(RENDER_FILE);
    write_file(&path, render_svg(&map, &trajs))?;
    Ok(path)
}
