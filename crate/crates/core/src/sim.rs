//! Deterministic synthetic parking lots.
//!
//! Scenes are sets of labeled ground polygons. Frames are rendered by pushing
//! every valid LUT pixel's ground point through the vehicle pose and sampling
//! polygon membership, so downstream code sees exactly what a segmenter plus
//! IPM projection would produce.

use crate::camera::ProjectionLut;
use crate::exec::{self, Execution};
use crate::geometry::{normalize_angle, Point2, Pose2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::f64::consts::PI;
use std::path::Path;
use thiserror::Error;

pub const SCENE_FORMAT_VERSION: u32 = 1;
pub const TRAJECTORY_FORMAT_VERSION: u32 = 1;

pub const LINE_WIDTH: f64 = 0.15;
pub const SLOT_WIDTH: f64 = 2.5;
pub const SLOT_DEPTH: f64 = 5.5;
pub const AISLE_WIDTH: f64 = 6.0;
pub const ROW_PITCH: f64 = SLOT_DEPTH + AISLE_WIDTH;
pub const LOT_MARGIN: f64 = 8.0;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("trajectory has zero length")]
    ZeroLengthPath,
    #[error("invalid trajectory spec: {0}")]
    InvalidTrajectory(String),
    #[error("unknown polygon id {0}")]
    UnknownPolygon(u32),
    #[error("duplicate polygon id {0}")]
    DuplicatePolygon(u32),
    #[error("need at least two poses")]
    TooFewPoses,
    #[error("unsupported {what} format version {found}")]
    UnsupportedVersion { what: &'static str, found: u32 },
    #[error("parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Ground marker classes. Raster code 0 is background.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    LaneLine,
    ParkingLine,
    Arrow,
    StopLine,
    Zebra,
}

impl Label {
    pub const ALL: [Label; 5] = [
        Label::LaneLine,
        Label::ParkingLine,
        Label::Arrow,
        Label::StopLine,
        Label::Zebra,
    ];

    pub fn code(self) -> u8 {
        match self {
            Label::LaneLine => 1,
            Label::ParkingLine => 2,
            Label::Arrow => 3,
            Label::StopLine => 4,
            Label::Zebra => 5,
        }
    }

    pub fn from_code(code: u8) -> Option<Label> {
        Label::ALL.into_iter().find(|l| l.code() == code)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Extent {
    pub min: [f64; 2],
    pub max: [f64; 2],
}

impl Extent {
    pub fn contains(&self, p: Point2) -> bool {
        p.x >= self.min[0] && p.x <= self.max[0] && p.y >= self.min[1] && p.y <= self.max[1]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Polygon {
    pub id: u32,
    pub label: Label,
    /// Counterclockwise, simple.
    pub vertices: Vec<[f64; 2]>,
}

impl Polygon {
    pub fn points(&self) -> impl Iterator<Item = Point2> + '_ {
        self.vertices.iter().map(|v| Point2::new(v[0], v[1]))
    }

    pub fn signed_area(&self) -> f64 {
        let n = self.vertices.len();
        (0..n)
            .map(|i| {
                let a = self.vertices[i];
                let b = self.vertices[(i + 1) % n];
                a[0] * b[1] - b[0] * a[1]
            })
            .sum::<f64>()
            * 0.5
    }

    pub fn bounds(&self) -> ([f64; 2], [f64; 2]) {
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for v in &self.vertices {
            for k in 0..2 {
                lo[k] = lo[k].min(v[k]);
                hi[k] = hi[k].max(v[k]);
            }
        }
        (lo, hi)
    }

    /// Even-odd membership; points on an edge count as inside.
    pub fn contains(&self, p: Point2) -> bool {
        let n = self.vertices.len();
        let mut inside = false;
        for i in 0..n {
            let a = self.vertices[i];
            let b = self.vertices[(i + 1) % n];
            let (ax, ay, bx, by) = (a[0], a[1], b[0], b[1]);
            let cross = (bx - ax) * (p.y - ay) - (by - ay) * (p.x - ax);
            if cross == 0.0
                && p.x >= ax.min(bx)
                && p.x <= ax.max(bx)
                && p.y >= ay.min(by)
                && p.y <= ay.max(by)
            {
                return true;
            }
            if (ay > p.y) != (by > p.y) {
                let x = ax + (p.y - ay) * (bx - ax) / (by - ay);
                if p.x < x {
                    inside = !inside;
                }
            }
        }
        inside
    }

    /// Distance from `p` to the polygon boundary.
    pub fn boundary_distance(&self, p: Point2) -> f64 {
        let n = self.vertices.len();
        (0..n)
            .map(|i| {
                let a = Point2::new(self.vertices[i][0], self.vertices[i][1]);
                let b = Point2::new(self.vertices[(i + 1) % n][0], self.vertices[(i + 1) % n][1]);
                let ab = b - a;
                let t = ((p - a).dot(&ab) / ab.norm_squared()).clamp(0.0, 1.0);
                (a + ab * t - p).norm()
            })
            .fold(f64::INFINITY, f64::min)
    }

    pub fn translated(&self, delta: [f64; 2]) -> Polygon {
        Polygon {
            vertices: self
                .vertices
                .iter()
                .map(|v| [v[0] + delta[0], v[1] + delta[1]])
                .collect(),
            ..self.clone()
        }
    }
}

/// Axis-aligned rectangle polygon, counterclockwise.
pub fn rectangle(id: u32, label: Label, x0: f64, y0: f64, x1: f64, y1: f64) -> Polygon {
    Polygon {
        id,
        label,
        vertices: vec![[x0, y0], [x1, y0], [x1, y1], [x0, y1]],
    }
}

/// Arrow pointing along `heading`, tail at `tail`.
pub fn arrow(id: u32, tail: Point2, heading: f64) -> Polygon {
    const SHAFT_HALF: f64 = 0.125;
    const SHAFT_LEN: f64 = 1.5;
    const HEAD_HALF: f64 = 0.4;
    const HEAD_LEN: f64 = 0.9;
    let local = [
        [0.0, -SHAFT_HALF],
        [SHAFT_LEN, -SHAFT_HALF],
        [SHAFT_LEN, -HEAD_HALF],
        [SHAFT_LEN + HEAD_LEN, 0.0],
        [SHAFT_LEN, HEAD_HALF],
        [SHAFT_LEN, SHAFT_HALF],
        [0.0, SHAFT_HALF],
    ];
    let pose = Pose2::new(tail.x, tail.y, heading);
    Polygon {
        id,
        label: Label::Arrow,
        vertices: local
            .iter()
            .map(|v| {
                let p = pose.apply(Point2::new(v[0], v[1]));
                [p.x, p.y]
            })
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub extent: Extent,
    pub polygons: Vec<Polygon>,
}

#[derive(Serialize, Deserialize)]
struct SceneFile {
    format_version: u32,
    #[serde(flatten)]
    scene: Scene,
}

impl Scene {
    pub fn empty(extent: Extent) -> Self {
        Self {
            extent,
            polygons: Vec::new(),
        }
    }

    pub fn polygon(&self, id: u32) -> Option<&Polygon> {
        self.polygons.iter().find(|p| p.id == id)
    }

    pub fn next_id(&self) -> u32 {
        self.polygons.iter().map(|p| p.id + 1).max().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let mut seen = HashSet::new();
        for p in &self.polygons {
            if !seen.insert(p.id) {
                return Err(SimError::DuplicatePolygon(p.id));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&SceneFile {
            format_version: SCENE_FORMAT_VERSION,
            scene: self.clone(),
        })
        .expect("scene serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, SimError> {
        let file: SceneFile = serde_json::from_str(text)?;
        if file.format_version != SCENE_FORMAT_VERSION {
            return Err(SimError::UnsupportedVersion {
                what: "scene",
                found: file.format_version,
            });
        }
        file.scene.validate()?;
        Ok(file.scene)
    }

    pub fn load(path: &Path) -> Result<Self, SimError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Parking lot of `rows` slot rows separated by aisles.
///
/// Row `r` has its back line at `y = r·ROW_PITCH`, slot openings facing +y and
/// an aisle above it whose center line is `y = r·ROW_PITCH + SLOT_DEPTH +
/// AISLE_WIDTH / 2`. The seed jitters arrow placement and direction.
pub fn generate_lot(rows: u32, slots_per_row: u32, seed: u64) -> Scene {
    let rows = rows.max(1);
    let slots = slots_per_row.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hw = LINE_WIDTH / 2.0;
    let row_len = slots as f64 * SLOT_WIDTH;
    let mut polys = Vec::new();
    let mut id = 0u32;
    let mut next = || {
        id += 1;
        id - 1
    };

    for r in 0..rows {
        let y0 = r as f64 * ROW_PITCH;
        polys.push(rectangle(
            next(),
            Label::ParkingLine,
            -hw,
            y0 - hw,
            row_len + hw,
            y0 + hw,
        ));
        for i in 0..=slots {
            let x = i as f64 * SLOT_WIDTH;
            polys.push(rectangle(
                next(),
                Label::ParkingLine,
                x - hw,
                y0 + hw,
                x + hw,
                y0 + SLOT_DEPTH,
            ));
        }
        let aisle_y = y0 + SLOT_DEPTH + AISLE_WIDTH / 2.0;
        let n_arrows = (slots / 4).max(1);
        for k in 0..n_arrows {
            let base = (k as f64 + 0.5) * row_len / n_arrows as f64;
            let jitter: f64 = rng.random_range(-0.4..0.4);
            let forward = rng.random_bool(0.5);
            let heading = if forward { 0.0 } else { PI };
            let along = if forward { -1.2 } else { 1.2 };
            polys.push(arrow(
                next(),
                Point2::new(base + jitter + along, aisle_y),
                heading,
            ));
        }
    }

    // stop line across the end of the first aisle
    let aisle0 = SLOT_DEPTH;
    polys.push(rectangle(
        next(),
        Label::StopLine,
        row_len + 0.3,
        aisle0 + 0.5,
        row_len + 0.6,
        aisle0 + AISLE_WIDTH - 0.5,
    ));

    // dashed lane edge along the far side of the last aisle
    let top = (rows - 1) as f64 * ROW_PITCH + ROW_PITCH;
    let mut x = 0.0;
    while x + 2.0 <= row_len + 1e-9 {
        polys.push(rectangle(
            next(),
            Label::LaneLine,
            x,
            top - hw,
            x + 2.0,
            top + hw,
        ));
        x += 4.0;
    }

    Scene {
        extent: Extent {
            min: [-LOT_MARGIN, -LOT_MARGIN],
            max: [row_len + LOT_MARGIN, top + LOT_MARGIN],
        },
        polygons: polys,
    }
}

/// Aisle center line `y` for row `r` of a lot made by [`generate_lot`].
pub fn aisle_center_y(row: u32) -> f64 {
    row as f64 * ROW_PITCH + SLOT_DEPTH + AISLE_WIDTH / 2.0
}

/// Uniform grid over the scene extent holding candidate polygons per cell.
pub struct SceneIndex<'a> {
    scene: &'a Scene,
    origin: Point2,
    cell: f64,
    cols: usize,
    rows: usize,
    cells: Vec<Vec<u32>>,
}

impl<'a> SceneIndex<'a> {
    pub fn new(scene: &'a Scene) -> Self {
        let cell = 1.0;
        let origin = Point2::new(scene.extent.min[0], scene.extent.min[1]);
        let cols = (((scene.extent.max[0] - scene.extent.min[0]) / cell).ceil() as usize).max(1);
        let rows = (((scene.extent.max[1] - scene.extent.min[1]) / cell).ceil() as usize).max(1);
        let mut cells = vec![Vec::new(); cols * rows];
        for (idx, poly) in scene.polygons.iter().enumerate() {
            let (lo, hi) = poly.bounds();
            let c0 = (((lo[0] - origin.x) / cell).floor().max(0.0) as usize).min(cols - 1);
            let c1 = (((hi[0] - origin.x) / cell).floor().max(0.0) as usize).min(cols - 1);
            let r0 = (((lo[1] - origin.y) / cell).floor().max(0.0) as usize).min(rows - 1);
            let r1 = (((hi[1] - origin.y) / cell).floor().max(0.0) as usize).min(rows - 1);
            for r in r0..=r1 {
                for c in c0..=c1 {
                    cells[r * cols + c].push(idx as u32);
                }
            }
        }
        Self {
            scene,
            origin,
            cell,
            cols,
            rows,
            cells,
        }
    }

    /// Label code of the first polygon containing `p`, or 0.
    pub fn label_at(&self, p: Point2) -> u8 {
        if !self.scene.extent.contains(p) {
            return 0;
        }
        let c = (((p.x - self.origin.x) / self.cell) as usize).min(self.cols - 1);
        let r = (((p.y - self.origin.y) / self.cell) as usize).min(self.rows - 1);
        for &idx in &self.cells[r * self.cols + c] {
            let poly = &self.scene.polygons[idx as usize];
            if poly.contains(p) {
                return poly.label.code();
            }
        }
        0
    }

    pub fn render(&self, pose: &Pose2, lut: &ProjectionLut, exec: Execution) -> SemanticRaster {
        let w = lut.width() as usize;
        let mut labels = vec![0u8; w * lut.height() as usize];
        let cells = lut.cells();
        exec::for_each_chunk_mut(exec, &mut labels, w, |row, out| {
            for (col, slot) in out.iter_mut().enumerate() {
                if let Some(cell) = &cells[row * w + col] {
                    *slot = self.label_at(pose.apply(cell.ground));
                }
            }
        });
        SemanticRaster {
            width: lut.width(),
            height: lut.height(),
            labels,
            pose: *pose,
        }
    }
}

/// Per-pixel label image; code 0 is background.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticRaster {
    pub width: u32,
    pub height: u32,
    pub labels: Vec<u8>,
    /// Ground-truth pose at capture time.
    pub pose: Pose2,
}

impl SemanticRaster {
    pub fn blank(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            labels: vec![0; width as usize * height as usize],
            pose: Pose2::identity(),
        }
    }

    #[inline]
    pub fn get(&self, u: u32, v: u32) -> u8 {
        self.labels[v as usize * self.width as usize + u as usize]
    }

    pub fn set(&mut self, u: u32, v: u32, label: u8) {
        self.labels[v as usize * self.width as usize + u as usize] = label;
    }

    pub fn labeled_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l != 0).count()
    }
}

pub fn render_semantic_raster(scene: &Scene, pose: &Pose2, lut: &ProjectionLut) -> SemanticRaster {
    SceneIndex::new(scene).render(pose, lut, Execution::default())
}

/// Segmentation noise: each marker pixel independently drops to background
/// with probability `prob`.
pub fn apply_label_dropout(raster: &mut SemanticRaster, prob: f64, seed: u64) {
    if prob <= 0.0 {
        return;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for l in raster.labels.iter_mut() {
        if *l != 0 && rng.random::<f64>() < prob {
            *l = 0;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectoryKind {
    /// Returns to the first waypoint.
    Loop,
    /// Drives the waypoints, then retraces them backwards.
    OutAndBack,
    /// Open polyline.
    Extension,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySpec {
    /// Only positions are used; headings follow the path tangent.
    pub waypoints: Vec<Pose2>,
    pub speed: f64,
    pub frame_rate: f64,
    pub kind: TrajectoryKind,
    /// Fillet radius at interior corners (0 keeps sharp corners).
    #[serde(default)]
    pub corner_radius: f64,
}

#[derive(Debug, Clone, Copy)]
enum Segment {
    Line {
        a: Point2,
        b: Point2,
    },
    Arc {
        center: Point2,
        radius: f64,
        start: f64,
        sweep: f64,
    },
}

impl Segment {
    fn length(&self) -> f64 {
        match *self {
            Segment::Line { a, b } => (b - a).norm(),
            Segment::Arc { radius, sweep, .. } => radius * sweep.abs(),
        }
    }

    fn pose_at(&self, s: f64) -> Pose2 {
        match *self {
            Segment::Line { a, b } => {
                let d = b - a;
                let len = d.norm();
                let p = a + d * (s / len);
                Pose2::new(p.x, p.y, d.y.atan2(d.x))
            }
            Segment::Arc {
                center,
                radius,
                start,
                sweep,
            } => {
                let ang = start + sweep.signum() * s / radius;
                let p = center + Point2::new(ang.cos(), ang.sin()) * radius;
                Pose2::new(p.x, p.y, ang + sweep.signum() * PI / 2.0)
            }
        }
    }
}

/// Arc-length parameterized path through a list of waypoints.
#[derive(Debug, Clone)]
pub struct TrajectoryPath {
    segments: Vec<Segment>,
    cumulative: Vec<f64>,
}

impl TrajectoryPath {
    pub fn from_spec(spec: &TrajectorySpec) -> Result<TrajectoryPath, SimError> {
        let mut pts: Vec<Point2> = spec.waypoints.iter().map(|p| p.translation()).collect();
        if pts.is_empty() {
            return Err(SimError::InvalidTrajectory("no waypoints".into()));
        }
        match spec.kind {
            TrajectoryKind::Loop => pts.push(pts[0]),
            TrajectoryKind::OutAndBack => {
                let back: Vec<Point2> = pts.iter().rev().skip(1).copied().collect();
                pts.extend(back);
            }
            TrajectoryKind::Extension => {}
        }
        pts.dedup_by(|a, b| (*a - *b).norm() < 1e-12);
        if pts.len() < 2 {
            return Err(SimError::ZeroLengthPath);
        }

        let n = pts.len();
        // fillet entry/exit points for each interior vertex
        let mut entry = pts.clone();
        let mut exit = pts.clone();
        let mut arcs: Vec<Option<Segment>> = vec![None; n];
        for i in 1..n - 1 {
            let din = pts[i] - pts[i - 1];
            let dout = pts[i + 1] - pts[i];
            let (lin, lout) = (din.norm(), dout.norm());
            let (uin, uout) = (din / lin, dout / lout);
            let turn = uin.perp(&uout).atan2(uin.dot(&uout));
            if spec.corner_radius <= 0.0 || turn.abs() < 1e-9 || turn.abs() > PI - 1e-6 {
                continue;
            }
            let max_cut = 0.5 * lin.min(lout);
            let cut = (spec.corner_radius * (turn.abs() / 2.0).tan()).min(max_cut);
            let radius = cut / (turn.abs() / 2.0).tan();
            entry[i] = pts[i] - uin * cut;
            exit[i] = pts[i] + uout * cut;
            let left = Point2::new(-uin.y, uin.x) * turn.signum();
            let center = entry[i] + left * radius;
            let start = (entry[i] - center).y.atan2((entry[i] - center).x);
            arcs[i] = Some(Segment::Arc {
                center,
                radius,
                start,
                sweep: turn,
            });
        }

        let mut segments = Vec::new();
        for i in 0..n - 1 {
            let a = exit[i];
            let b = entry[i + 1];
            if (b - a).norm() > 1e-12 {
                segments.push(Segment::Line { a, b });
            }
            if let Some(arc) = arcs[i + 1] {
                segments.push(arc);
            }
        }
        let mut cumulative = Vec::with_capacity(segments.len());
        let mut acc = 0.0;
        for s in &segments {
            acc += s.length();
            cumulative.push(acc);
        }
        if acc < 1e-9 {
            return Err(SimError::ZeroLengthPath);
        }
        Ok(TrajectoryPath {
            segments,
            cumulative,
        })
    }

    pub fn length(&self) -> f64 {
        *self.cumulative.last().unwrap()
    }

    /// Pose at arc length `s`, heading along the tangent.
    pub fn pose_at(&self, s: f64) -> Pose2 {
        let s = s.clamp(0.0, self.length());
        let idx = self
            .cumulative
            .iter()
            .position(|&c| s <= c)
            .unwrap_or(self.segments.len() - 1);
        let start = if idx == 0 {
            0.0
        } else {
            self.cumulative[idx - 1]
        };
        let seg = &self.segments[idx];
        seg.pose_at((s - start).min(seg.length()))
    }
}

/// Poses spaced evenly along the path, approximately `speed / frame_rate`
/// apart; the last pose is the path end.
pub fn sample_trajectory(spec: &TrajectorySpec) -> Result<Vec<Pose2>, SimError> {
    if spec.frame_rate.is_nan()
        || spec.frame_rate <= 0.0
        || spec.speed.is_nan()
        || spec.speed <= 0.0
    {
        return Err(SimError::InvalidTrajectory(
            "speed and frame_rate must be positive".into(),
        ));
    }
    let path = TrajectoryPath::from_spec(spec)?;
    let step = spec.speed / spec.frame_rate;
    let n = ((path.length() / step).round() as usize).max(1);
    let ds = path.length() / n as f64;
    Ok((0..=n).map(|i| path.pose_at(i as f64 * ds)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OdomNoiseSpec {
    /// Translation noise std per meter traveled.
    pub sigma_trans: f64,
    /// Heading noise std (rad) per meter traveled.
    pub sigma_rot: f64,
    /// Deterministic heading bias (rad) per meter traveled.
    pub bias_rot: f64,
    pub seed: u64,
}

impl Default for OdomNoiseSpec {
    fn default() -> Self {
        Self {
            sigma_trans: 0.01,
            sigma_rot: 0.001,
            bias_rot: 0.0,
            seed: 0,
        }
    }
}

impl OdomNoiseSpec {
    pub fn noiseless() -> Self {
        Self {
            sigma_trans: 0.0,
            sigma_rot: 0.0,
            bias_rot: 0.0,
            seed: 0,
        }
    }
}

/// Noisy relative motions between consecutive ground-truth poses.
pub fn simulate_odometry(gt: &[Pose2], noise: &OdomNoiseSpec) -> Result<Vec<Pose2>, SimError> {
    if gt.len() < 2 {
        return Err(SimError::TooFewPoses);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
    Ok(gt
        .windows(2)
        .map(|w| {
            let rel = w[0].inverse().compose(&w[1]);
            let dist = rel.translation().norm();
            let n1: f64 = StandardNormal.sample(&mut rng);
            let n2: f64 = StandardNormal.sample(&mut rng);
            let n3: f64 = StandardNormal.sample(&mut rng);
            Pose2::new(
                rel.x + n1 * noise.sigma_trans * dist,
                rel.y + n2 * noise.sigma_trans * dist,
                rel.theta + n3 * noise.sigma_rot * dist + noise.bias_rot * dist,
            )
        })
        .collect())
}

/// Chains relative motions from a starting pose.
pub fn integrate_odometry(start: Pose2, increments: &[Pose2]) -> Vec<Pose2> {
    let mut out = Vec::with_capacity(increments.len() + 1);
    out.push(start);
    let mut cur = start;
    for inc in increments {
        cur = cur.compose(inc);
        out.push(cur);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "op")]
pub enum SceneOp {
    RemovePolygon { id: u32 },
    AddPolygon { polygon: Polygon },
    TranslatePolygon { id: u32, delta: [f64; 2] },
}

/// Applies edits to a copy of `scene`.
pub fn perturb_scene(scene: &Scene, ops: &[SceneOp]) -> Result<Scene, SimError> {
    let mut out = scene.clone();
    for op in ops {
        match op {
            SceneOp::RemovePolygon { id } => {
                let pos = out
                    .polygons
                    .iter()
                    .position(|p| p.id == *id)
                    .ok_or(SimError::UnknownPolygon(*id))?;
                out.polygons.remove(pos);
            }
            SceneOp::AddPolygon { polygon } => {
                if out.polygon(polygon.id).is_some() {
                    return Err(SimError::DuplicatePolygon(polygon.id));
                }
                out.polygons.push(polygon.clone());
            }
            SceneOp::TranslatePolygon { id, delta } => {
                let p = out
                    .polygons
                    .iter_mut()
                    .find(|p| p.id == *id)
                    .ok_or(SimError::UnknownPolygon(*id))?;
                *p = p.translated(*delta);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryFile {
    pub format_version: u32,
    pub spec: TrajectorySpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub poses: Option<Vec<Pose2>>,
}

impl TrajectoryFile {
    pub fn new(spec: TrajectorySpec) -> Self {
        Self {
            format_version: TRAJECTORY_FORMAT_VERSION,
            spec,
            poses: None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self, SimError> {
        let f: TrajectoryFile = serde_json::from_str(text)?;
        if f.format_version != TRAJECTORY_FORMAT_VERSION {
            return Err(SimError::UnsupportedVersion {
                what: "trajectory",
                found: f.format_version,
            });
        }
        Ok(f)
    }

    pub fn load(path: &Path) -> Result<Self, SimError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("trajectory serializes")
    }

    /// Explicit poses when present, otherwise sampled from the spec.
    pub fn poses(&self) -> Result<Vec<Pose2>, SimError> {
        match &self.poses {
            Some(p) if !p.is_empty() => Ok(p.clone()),
            _ => sample_trajectory(&self.spec),
        }
    }
}

/// Heading of the tangent between two positions.
pub fn heading_between(a: Point2, b: Point2) -> f64 {
    normalize_angle((b - a).y.atan2((b - a).x))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::{LutCell, ProjectionLut};
    use approx::assert_abs_diff_eq;

    fn wp(x: f64, y: f64) -> Pose2 {
        Pose2::new(x, y, 0.0)
    }

    /// Small synthetic LUT: square grid of `n×n` pixels with `res` meters per
    /// pixel centered on the vehicle.
    fn grid_lut(n: u32, res: f64) -> ProjectionLut {
        let c = (n as f64 - 1.0) / 2.0;
        let cells = (0..n * n)
            .map(|i| {
                let (u, v) = ((i % n) as f64, (i / n) as f64);
                Some(LutCell {
                    ground: Point2::new((c - v) * res, (c - u) * res),
                    confidence: 1.0,
                    footprint: res,
                    fov_edge: false,
                })
            })
            .collect();
        ProjectionLut::from_cells(n, n, cells)
    }

    #[test]
    fn small_lot_contents() {
        let s = generate_lot(1, 1, 0);
        assert!(s.polygons.len() >= 4);
        assert_eq!(
            s.polygons
                .iter()
                .filter(|p| p.label == Label::Arrow)
                .count(),
            1
        );
        assert_eq!(
            s.polygons
                .iter()
                .filter(|p| p.label == Label::ParkingLine)
                .count(),
            3
        );
        for p in &s.polygons {
            assert!(
                p.signed_area() > 0.0,
                "polygon {} not counterclockwise",
                p.id
            );
        }
        s.validate().unwrap();
    }

    #[test]
    fn lot_is_deterministic_and_contained() {
        assert_eq!(generate_lot(2, 10, 7), generate_lot(2, 10, 7));
        assert_ne!(generate_lot(2, 10, 7), generate_lot(2, 10, 8));
        let s = generate_lot(2, 10, 7);
        for p in &s.polygons {
            for v in p.points() {
                assert!(s.extent.contains(v));
            }
        }
    }

    #[test]
    fn point_in_polygon_boundary_inclusive() {
        let r = rectangle(0, Label::Arrow, 0.0, 0.0, 1.0, 1.0);
        assert!(r.contains(Point2::new(0.5, 0.5)));
        assert!(r.contains(Point2::new(0.0, 0.5)));
        assert!(r.contains(Point2::new(1.0, 1.0)));
        assert!(!r.contains(Point2::new(1.0 + 1e-12, 0.5)));
        let a = arrow(1, Point2::zeros(), 0.0);
        assert!(a.contains(Point2::new(2.0, 0.0)));
        assert!(!a.contains(Point2::new(0.5, 0.3)));
    }

    #[test]
    fn render_empty_and_far() {
        let lut = grid_lut(41, 0.05);
        let empty = Scene::empty(Extent {
            min: [-5.0, -5.0],
            max: [5.0, 5.0],
        });
        assert_eq!(
            render_semantic_raster(&empty, &Pose2::identity(), &lut).labeled_count(),
            0
        );
        let lot = generate_lot(1, 2, 3);
        let far = Pose2::new(500.0, 500.0, 0.0);
        assert_eq!(render_semantic_raster(&lot, &far, &lut).labeled_count(), 0);
    }

    #[test]
    fn rendered_pixels_reproject_into_polygon() {
        let lut = grid_lut(61, 0.05);
        let square = rectangle(0, Label::Arrow, -0.5, -0.5, 0.5, 0.5);
        let scene = Scene {
            extent: Extent {
                min: [-5.0, -5.0],
                max: [5.0, 5.0],
            },
            polygons: vec![square.clone()],
        };
        let pose = Pose2::new(0.1, -0.05, 0.3);
        let r = render_semantic_raster(&scene, &pose, &lut);
        assert!(r.labeled_count() > 0);
        for v in 0..r.height {
            for u in 0..r.width {
                if r.get(u, v) == Label::Arrow.code() {
                    let cell = lut.cell(u, v).unwrap();
                    let world = pose.apply(cell.ground);
                    assert!(
                        square.contains(world) || square.boundary_distance(world) <= cell.footprint
                    );
                }
            }
        }
    }

    #[test]
    fn dropout_only_removes_labels() {
        let lut = grid_lut(61, 0.05);
        let scene = Scene {
            extent: Extent {
                min: [-5.0, -5.0],
                max: [5.0, 5.0],
            },
            polygons: vec![rectangle(0, Label::ParkingLine, -1.0, -1.0, 1.0, 1.0)],
        };
        let clean = render_semantic_raster(&scene, &Pose2::identity(), &lut);
        let mut noisy = clean.clone();
        apply_label_dropout(&mut noisy, 0.2, 11);
        assert!(noisy.labeled_count() < clean.labeled_count());
        for (a, b) in clean.labels.iter().zip(&noisy.labels) {
            assert!(*b == *a || *b == 0);
        }
        let mut again = clean.clone();
        apply_label_dropout(&mut again, 0.2, 11);
        assert_eq!(noisy, again);
    }

    #[test]
    fn straight_trajectory_spacing() {
        let spec = TrajectorySpec {
            waypoints: vec![wp(0.0, 0.0), wp(10.0, 0.0)],
            speed: 1.0,
            frame_rate: 1.0,
            kind: TrajectoryKind::Extension,
            corner_radius: 0.0,
        };
        let poses = sample_trajectory(&spec).unwrap();
        assert_eq!(poses.len(), 11);
        for w in poses.windows(2) {
            assert_abs_diff_eq!(w[0].distance_to(&w[1]), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn loop_closes() {
        let spec = TrajectorySpec {
            waypoints: vec![wp(0.0, 0.0), wp(10.0, 0.0), wp(10.0, 7.0), wp(0.0, 7.0)],
            speed: 2.0,
            frame_rate: 3.0,
            kind: TrajectoryKind::Loop,
            corner_radius: 2.0,
        };
        let poses = sample_trajectory(&spec).unwrap();
        let (a, b) = (poses.first().unwrap(), poses.last().unwrap());
        assert!(a.distance_to(b) < 1e-9);
    }

    #[test]
    fn curved_heading_matches_tangent() {
        let spec = TrajectorySpec {
            waypoints: vec![wp(0.0, 0.0), wp(10.0, 0.0), wp(10.0, 10.0), wp(0.0, 12.0)],
            speed: 1.0,
            frame_rate: 1.0,
            kind: TrajectoryKind::Extension,
            corner_radius: 3.0,
        };
        let path = TrajectoryPath::from_spec(&spec).unwrap();
        let ds = 1e-6;
        let mut s = 0.5;
        while s < path.length() - 0.5 {
            let a = path.pose_at(s - ds).translation();
            let b = path.pose_at(s + ds).translation();
            let fd = heading_between(a, b);
            let h = path.pose_at(s).theta;
            assert!(normalize_angle(fd - h).abs() < 1e-6, "s={s} fd={fd} h={h}");
            s += 0.37;
        }
    }

    #[test]
    fn zero_length_path_rejected() {
        let spec = TrajectorySpec {
            waypoints: vec![wp(1.0, 1.0), wp(1.0, 1.0)],
            speed: 1.0,
            frame_rate: 1.0,
            kind: TrajectoryKind::Extension,
            corner_radius: 0.0,
        };
        assert!(matches!(
            sample_trajectory(&spec),
            Err(SimError::ZeroLengthPath)
        ));
    }

    #[test]
    fn odometry_examples() {
        let spec = TrajectorySpec {
            waypoints: vec![wp(0.0, 0.0), wp(100.0, 0.0)],
            speed: 1.0,
            frame_rate: 1.0,
            kind: TrajectoryKind::Extension,
            corner_radius: 0.0,
        };
        let gt = sample_trajectory(&spec).unwrap();
        let exact = simulate_odometry(&gt, &OdomNoiseSpec::noiseless()).unwrap();
        let chained = integrate_odometry(gt[0], &exact);
        for (a, b) in chained.iter().zip(&gt) {
            assert!(a.distance_to(b) < 1e-9);
        }

        let biased = OdomNoiseSpec {
            bias_rot: 0.001,
            ..OdomNoiseSpec::noiseless()
        };
        let inc = simulate_odometry(&gt, &biased).unwrap();
        let end = integrate_odometry(gt[0], &inc).last().copied().unwrap();
        assert_abs_diff_eq!(end.theta, 0.1, epsilon = 1e-9);

        let noisy = OdomNoiseSpec {
            seed: 5,
            ..OdomNoiseSpec::default()
        };
        assert_eq!(
            simulate_odometry(&gt, &noisy).unwrap(),
            simulate_odometry(&gt, &noisy).unwrap()
        );
        assert!(simulate_odometry(&gt[..1], &noisy).is_err());
    }

    #[test]
    fn perturb_examples() {
        let s = generate_lot(1, 2, 1);
        assert_eq!(perturb_scene(&s, &[]).unwrap(), s);

        let arrow = s
            .polygons
            .iter()
            .find(|p| p.label == Label::Arrow)
            .unwrap()
            .clone();
        let moved = perturb_scene(
            &s,
            &[SceneOp::TranslatePolygon {
                id: arrow.id,
                delta: [0.5, 0.0],
            }],
        )
        .unwrap();
        let m = moved.polygon(arrow.id).unwrap();
        for (a, b) in arrow.vertices.iter().zip(&m.vertices) {
            assert_eq!(b[0], a[0] + 0.5);
            assert_eq!(b[1], a[1]);
        }

        let mut readd = arrow.clone();
        readd.id = s.next_id();
        let round = perturb_scene(
            &s,
            &[
                SceneOp::RemovePolygon { id: arrow.id },
                SceneOp::AddPolygon { polygon: readd },
            ],
        )
        .unwrap();
        assert_eq!(round.polygons.len(), s.polygons.len());
        assert!(round.polygons.iter().any(|p| p.vertices == arrow.vertices));

        assert!(matches!(
            perturb_scene(&s, &[SceneOp::RemovePolygon { id: 9999 }]),
            Err(SimError::UnknownPolygon(9999))
        ));
        // the original is untouched
        assert!(s.polygon(arrow.id).is_some());
    }

    #[test]
    fn scene_json_round_trip() {
        let s = generate_lot(2, 3, 4);
        assert_eq!(Scene::from_json(&s.to_json()).unwrap(), s);
    }
}
