//! Semantic raster → parameterized line features.
//!
//! Pipeline per frame: outer-border following of every marker blob,
//! projection of the border pixels onto the ground, contour filtering,
//! outward contour normals from chain tangents, region growth over
//! consistent normals and a least-squares line fit per cluster.

use crate::camera::ProjectionLut;
use crate::geometry::{angle_between, perp, Line2, Point2};
use crate::sim::{Label, SemanticRaster};
use nalgebra::Matrix2;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum FeatureError {
    #[error("raster is {raster_w}x{raster_h} but the projection table is {lut_w}x{lut_h}")]
    DimensionMismatch {
        raster_w: u32,
        raster_h: u32,
        lut_w: u32,
        lut_h: u32,
    },
    #[error("cluster of {0} points has no spatial extent")]
    DegenerateCluster(usize),
    #[error("empty cluster")]
    EmptyCluster,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureConfig {
    /// Chain offset used for tangents.
    pub normal_window: usize,
    /// Max angle (rad) between a point normal and the running cluster normal.
    pub angle_threshold: f64,
    pub min_cluster_size: usize,
    pub min_confidence: f64,
    /// Minimum convex-hull area of a contour (m²).
    pub min_area: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            normal_window: 3,
            angle_threshold: 15f64.to_radians(),
            min_cluster_size: 5,
            min_confidence: 0.3,
            min_area: 0.02,
        }
    }
}

/// Ordered outer border of one 4-connected blob.
#[derive(Debug, Clone, PartialEq)]
pub struct ContourChain {
    pub id: u32,
    pub label: Label,
    pub pixels: Vec<(u32, u32)>,
}

/// Offsets for E, S, W, N in image coordinates (v grows downward).
const STEPS: [(i64, i64); 4] = [(1, 0), (0, 1), (-1, 0), (0, -1)];

/// Outer borders of every 4-connected same-label blob, traced in scan order
/// of each blob's first pixel. Holes are not traced.
pub fn extract_contours(raster: &SemanticRaster) -> Vec<ContourChain> {
    let w = raster.width as i64;
    let h = raster.height as i64;
    let mut comp = vec![u32::MAX; raster.labels.len()];
    let mut chains = Vec::new();
    let mut stack = Vec::new();

    for start in 0..raster.labels.len() {
        let label = raster.labels[start];
        if label == 0 || comp[start] != u32::MAX {
            continue;
        }
        let cid = chains.len() as u32;
        comp[start] = cid;
        stack.push(start);
        while let Some(i) = stack.pop() {
            let (x, y) = ((i as i64) % w, (i as i64) / w);
            for (dx, dy) in STEPS {
                let (nx, ny) = (x + dx, y + dy);
                if nx < 0 || ny < 0 || nx >= w || ny >= h {
                    continue;
                }
                let j = (ny * w + nx) as usize;
                if comp[j] == u32::MAX && raster.labels[j] == label {
                    comp[j] = cid;
                    stack.push(j);
                }
            }
        }

        let inside = |x: i64, y: i64| {
            x >= 0 && y >= 0 && x < w && y < h && comp[(y * w + x) as usize] == cid
        };
        let sx = (start as i64) % w;
        let sy = (start as i64) / w;
        // Wall follower keeping the outside on the left. The start pixel is the
        // first in scan order, so its north and west neighbors are outside.
        let next_move = |x: i64, y: i64, heading: usize| -> Option<usize> {
            (0..4)
                .map(|k| (heading + 3 + k) % 4)
                .find(|&d| inside(x + STEPS[d].0, y + STEPS[d].1))
        };
        let mut pixels = vec![(sx as u32, sy as u32)];
        if let Some(first) = next_move(sx, sy, 0) {
            let (mut x, mut y, mut heading) = (sx, sy, first);
            let limit = 4 * raster.labels.len() + 4;
            for _ in 0..limit {
                x += STEPS[heading].0;
                y += STEPS[heading].1;
                let nm = next_move(x, y, heading).expect("traced pixel has a neighbor");
                if x == sx && y == sy && nm == first {
                    break;
                }
                pixels.push((x as u32, y as u32));
                heading = nm;
            }
        }
        chains.push(ContourChain {
            id: cid,
            label: Label::from_code(label).unwrap_or(Label::LaneLine),
            pixels,
        });
    }
    chains
}

/// A contour point on the ground, in the vehicle frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundPoint {
    pub position: Point2,
    pub label: Label,
    pub contour_id: u32,
    /// Index along the source chain.
    pub seq: u32,
    /// Pixel count of the source chain, for wrap-around.
    pub chain_len: u32,
    pub normal: Option<Point2>,
    pub confidence: f64,
}

/// Maps every chain pixel through the LUT. Invalid pixels and pixels on the
/// field-of-view boundary are dropped; `seq` keeps the chain order.
pub fn project_contours(chains: &[ContourChain], lut: &ProjectionLut) -> Vec<GroundPoint> {
    let mut out = Vec::new();
    for chain in chains {
        for (seq, &(u, v)) in chain.pixels.iter().enumerate() {
            let Some(cell) = lut.cell(u, v) else { continue };
            if cell.fov_edge {
                continue;
            }
            out.push(GroundPoint {
                position: cell.ground,
                label: chain.label,
                contour_id: chain.id,
                seq: seq as u32,
                chain_len: chain.pixels.len() as u32,
                normal: None,
                confidence: cell.confidence,
            });
        }
    }
    out
}

/// Area of the convex hull of `pts` (monotone chain).
pub fn convex_hull_area(pts: &[Point2]) -> f64 {
    if pts.len() < 3 {
        return 0.0;
    }
    let mut p: Vec<Point2> = pts.to_vec();
    p.sort_by(|a, b| a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)));
    p.dedup();
    if p.len() < 3 {
        return 0.0;
    }
    let cross = |o: Point2, a: Point2, b: Point2| (a - o).perp(&(b - o));
    let mut hull: Vec<Point2> = Vec::with_capacity(2 * p.len());
    for &pt in &p {
        while hull.len() >= 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], pt) <= 0.0 {
            hull.pop();
        }
        hull.push(pt);
    }
    let lower_len = hull.len() + 1;
    for &pt in p.iter().rev().skip(1) {
        while hull.len() >= lower_len
            && cross(hull[hull.len() - 2], hull[hull.len() - 1], pt) <= 0.0
        {
            hull.pop();
        }
        hull.push(pt);
    }
    hull.pop();
    let n = hull.len();
    (0..n)
        .map(|i| hull[i].perp(&hull[(i + 1) % n]))
        .sum::<f64>()
        .abs()
        * 0.5
}

fn group_by_contour(points: &[GroundPoint]) -> BTreeMap<u32, Vec<usize>> {
    let mut groups: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, p) in points.iter().enumerate() {
        groups.entry(p.contour_id).or_default().push(i);
    }
    for members in groups.values_mut() {
        members.sort_by_key(|&i| points[i].seq);
    }
    groups
}

/// Drops whole contours with low mean confidence or small hull area.
pub fn filter_contours(
    points: &[GroundPoint],
    min_confidence: f64,
    min_area: f64,
) -> Vec<GroundPoint> {
    let groups = group_by_contour(points);
    let keep: BTreeMap<u32, bool> = groups
        .iter()
        .map(|(&id, members)| {
            let mean =
                members.iter().map(|&i| points[i].confidence).sum::<f64>() / members.len() as f64;
            let pos: Vec<Point2> = members.iter().map(|&i| points[i].position).collect();
            (
                id,
                mean >= min_confidence && convex_hull_area(&pos) >= min_area,
            )
        })
        .collect();
    points
        .iter()
        .filter(|p| keep[&p.contour_id])
        .copied()
        .collect()
}

/// Outward normals from chain tangents at ±`window`.
///
/// The tangent is rotated +90° and flipped when the chain runs
/// counterclockwise, so normals point from the blob interior outward.
/// Contours with fewer than `2·window + 1` points get no normals.
pub fn estimate_contour_normals(points: &[GroundPoint], window: usize) -> Vec<GroundPoint> {
    let mut out = points.to_vec();
    for members in group_by_contour(points).values() {
        if members.len() < 2 * window + 1 {
            continue;
        }
        let chain_len = points[members[0]].chain_len as usize;
        let mut by_seq: Vec<Option<Point2>> = vec![None; chain_len];
        for &i in members {
            by_seq[points[i].seq as usize] = Some(points[i].position);
        }
        let n = members.len();
        let twice_area: f64 = (0..n)
            .map(|k| {
                points[members[k]]
                    .position
                    .perp(&points[members[(k + 1) % n]].position)
            })
            .sum();
        let flip = if twice_area > 0.0 { -1.0 } else { 1.0 };
        for &i in members {
            let s = points[i].seq as usize;
            let fwd = by_seq[(s + window) % chain_len];
            let back = by_seq[(s + chain_len - window % chain_len) % chain_len];
            if let (Some(f), Some(b)) = (fwd, back) {
                let t = f - b;
                let norm = t.norm();
                if norm > 1e-12 {
                    out[i].normal = Some(perp(t / norm) * flip);
                }
            }
        }
    }
    out
}

/// Region growth along each contour chain over consistent normals.
///
/// A point joins the current cluster when it directly follows the previous
/// member on the chain and its normal is within `angle_threshold` of the
/// running mean normal. Clusters smaller than `min_cluster_size` are dropped.
pub fn cluster_lines(
    points: &[GroundPoint],
    angle_threshold: f64,
    min_cluster_size: usize,
) -> Vec<Vec<usize>> {
    let mut result = Vec::new();
    for members in group_by_contour(points).values() {
        let ordered: Vec<usize> = members
            .iter()
            .copied()
            .filter(|&i| points[i].normal.is_some())
            .collect();
        if ordered.is_empty() {
            continue;
        }
        let chain_len = points[ordered[0]].chain_len;
        let mut clusters: Vec<(Vec<usize>, Point2)> = Vec::new();
        let mut cur: Vec<usize> = Vec::new();
        let mut sum = Point2::zeros();
        let mut prev_seq = 0u32;
        for &i in &ordered {
            let n = points[i].normal.unwrap();
            let follows = !cur.is_empty() && points[i].seq == prev_seq + 1;
            if follows && angle_between(n, sum.normalize()) <= angle_threshold {
                cur.push(i);
                sum += n;
            } else {
                if !cur.is_empty() {
                    clusters.push((std::mem::take(&mut cur), sum));
                }
                cur.push(i);
                sum = n;
            }
            prev_seq = points[i].seq;
        }
        if !cur.is_empty() {
            clusters.push((cur, sum));
        }
        // the chain start is arbitrary: join the last run onto the first when
        // they are contiguous across the wrap point
        if clusters.len() > 1 {
            let first_seq = points[clusters[0].0[0]].seq;
            let last = clusters.last().unwrap();
            let last_seq = points[*last.0.last().unwrap()].seq;
            if first_seq == 0
                && last_seq + 1 == chain_len
                && angle_between(clusters[0].1.normalize(), last.1.normalize()) <= angle_threshold
            {
                let (mut tail, tail_sum) = clusters.pop().unwrap();
                tail.extend_from_slice(&clusters[0].0);
                clusters[0].0 = tail;
                clusters[0].1 += tail_sum;
            }
        }
        result.extend(
            clusters
                .into_iter()
                .map(|(c, _)| c)
                .filter(|c| c.len() >= min_cluster_size),
        );
    }
    result
}

/// A fitted line with its semantic label and observation confidence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineFeature {
    pub geometry: Line2,
    pub label: Label,
    pub confidence: f64,
    pub point_count: usize,
    pub contour_id: u32,
}

impl LineFeature {
    pub fn transformed(&self, pose: &crate::geometry::Pose2) -> LineFeature {
        LineFeature {
            geometry: self.geometry.transformed(pose),
            ..*self
        }
    }
}

/// Principal axis of a 2×2 symmetric scatter matrix.
pub fn principal_axis(scatter: &Matrix2<f64>) -> Point2 {
    let (sxx, sxy, syy) = (scatter[(0, 0)], scatter[(0, 1)], scatter[(1, 1)]);
    let angle = 0.5 * (2.0 * sxy).atan2(sxx - syy);
    Point2::new(angle.cos(), angle.sin())
}

/// Least-squares line through a cluster.
pub fn fit_line(cluster: &[GroundPoint]) -> Result<LineFeature, FeatureError> {
    if cluster.is_empty() {
        return Err(FeatureError::EmptyCluster);
    }
    let n = cluster.len() as f64;
    let centroid = cluster.iter().map(|p| p.position).sum::<Point2>() / n;
    let mut scatter = Matrix2::zeros();
    for p in cluster {
        let d = p.position - centroid;
        scatter += d * d.transpose();
    }
    if scatter.trace() < 1e-18 {
        return Err(FeatureError::DegenerateCluster(cluster.len()));
    }
    let axis = principal_axis(&scatter);
    let mean_normal = cluster.iter().filter_map(|p| p.normal).sum::<Point2>();
    let ortho = mean_normal - axis * mean_normal.dot(&axis);
    let normal = if ortho.norm() > 1e-9 {
        ortho.normalize()
    } else {
        perp(axis)
    };
    let direction = Point2::new(normal.y, -normal.x);
    let (lo, hi) = cluster
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
            let t = direction.dot(&(p.position - centroid));
            (lo.min(t), hi.max(t))
        });
    let confidence = cluster.iter().map(|p| p.confidence).sum::<f64>() / n;
    Ok(LineFeature {
        geometry: Line2::from_normal(centroid, normal, lo, hi),
        label: cluster[0].label,
        confidence,
        point_count: cluster.len(),
        contour_id: cluster[0].contour_id,
    })
}

/// One frame reduced to contour points and line features.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FrameFeatures {
    pub frame_index: usize,
    pub points: Vec<GroundPoint>,
    pub lines: Vec<LineFeature>,
    /// Member point indices of each line.
    pub clusters: Vec<Vec<usize>>,
    /// Projected contour points before filtering.
    pub raw_point_count: usize,
}

impl FrameFeatures {
    pub fn is_empty(&self) -> bool {
        self.lines.is_empty()
    }

    /// Debug dump of points and lines.
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("frame serializes")
    }
}

pub fn parameterize_frame(
    raster: &SemanticRaster,
    lut: &ProjectionLut,
    cfg: &FeatureConfig,
) -> Result<FrameFeatures, FeatureError> {
    if raster.width != lut.width() || raster.height != lut.height() {
        return Err(FeatureError::DimensionMismatch {
            raster_w: raster.width,
            raster_h: raster.height,
            lut_w: lut.width(),
            lut_h: lut.height(),
        });
    }
    let chains = extract_contours(raster);
    let projected = project_contours(&chains, lut);
    let raw_point_count = projected.len();
    let filtered = filter_contours(&projected, cfg.min_confidence, cfg.min_area);
    let points = estimate_contour_normals(&filtered, cfg.normal_window);
    let mut lines = Vec::new();
    let mut clusters = Vec::new();
    for members in cluster_lines(&points, cfg.angle_threshold, cfg.min_cluster_size) {
        let pts: Vec<GroundPoint> = members.iter().map(|&i| points[i]).collect();
        match fit_line(&pts) {
            Ok(line) => {
                lines.push(line);
                clusters.push(members);
            }
            Err(FeatureError::DegenerateCluster(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    Ok(FrameFeatures {
        frame_index: 0,
        points,
        lines,
        clusters,
        raw_point_count,
    })
}
