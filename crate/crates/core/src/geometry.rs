//! Planar rigid-body primitives shared by the whole pipeline.
//!
//! All poses live on the ground plane: `Pose2` is an element of SE(2) and
//! `Line2` is a finite segment carrying an outward normal. Every function here
//! is pure.

use nalgebra::{Matrix2, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

pub type Point2 = Vector2<f64>;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("trajectory is empty")]
    EmptyTrajectory,
    #[error("trajectory length mismatch: estimate has {est} poses, ground truth has {gt}")]
    LengthMismatch { est: usize, gt: usize },
}

/// Wraps an angle into (-π, π].
pub fn normalize_angle(theta: f64) -> f64 {
    let a = (theta + PI).rem_euclid(2.0 * PI) - PI;
    if a <= -PI {
        a + 2.0 * PI
    } else {
        a
    }
}

/// Rotates a vector by +90°.
#[inline]
pub fn perp(v: Point2) -> Point2 {
    Point2::new(-v.y, v.x)
}

#[inline]
pub fn rotation(theta: f64) -> Matrix2<f64> {
    let (s, c) = theta.sin_cos();
    Matrix2::new(c, -s, s, c)
}

/// Unsigned angle between two unit vectors, in [0, π].
#[inline]
pub fn angle_between(a: Point2, b: Point2) -> f64 {
    a.perp(&b).atan2(a.dot(&b)).abs()
}

/// Angle between two undirected axes, in [0, π/2].
#[inline]
pub fn axis_angle_between(a: Point2, b: Point2) -> f64 {
    let t = angle_between(a, b);
    t.min(PI - t)
}

/// A rigid transform of the plane: rotation by `theta` followed by translation `(x, y)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose2 {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl Default for Pose2 {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose2 {
    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Self {
            x,
            y,
            theta: normalize_angle(theta),
        }
    }

    pub const fn identity() -> Self {
        Self {
            x: 0.0,
            y: 0.0,
            theta: 0.0,
        }
    }

    pub fn translation(&self) -> Point2 {
        Point2::new(self.x, self.y)
    }

    pub fn rotation(&self) -> Matrix2<f64> {
        rotation(self.theta)
    }

    /// `self ∘ other`: applies `other` first, then `self`.
    pub fn compose(&self, other: &Pose2) -> Pose2 {
        let t = self.rotation() * other.translation() + self.translation();
        Pose2::new(t.x, t.y, self.theta + other.theta)
    }

    pub fn inverse(&self) -> Pose2 {
        let rt = self.rotation().transpose();
        let t = -(rt * self.translation());
        Pose2::new(t.x, t.y, -self.theta)
    }

    pub fn apply(&self, p: Point2) -> Point2 {
        self.rotation() * p + self.translation()
    }

    /// Rotates a direction without translating it.
    pub fn apply_vector(&self, v: Point2) -> Point2 {
        self.rotation() * v
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.theta.is_finite()
    }

    /// SE(2) exponential map of a tangent vector `(dx, dy, dθ)`.
    pub fn exp(delta: Vector3<f64>) -> Pose2 {
        let th = delta.z;
        let (a, b) = if th.abs() < 1e-9 {
            (1.0 - th * th / 6.0, th / 2.0 - th * th * th / 24.0)
        } else {
            (th.sin() / th, (1.0 - th.cos()) / th)
        };
        let x = a * delta.x - b * delta.y;
        let y = b * delta.x + a * delta.y;
        Pose2::new(x, y, th)
    }

    /// SE(2) logarithm, the inverse of [`Pose2::exp`].
    pub fn log(&self) -> Vector3<f64> {
        let th = self.theta;
        let (a, b) = if th.abs() < 1e-9 {
            (1.0 - th * th / 6.0, th / 2.0 - th * th * th / 24.0)
        } else {
            (th.sin() / th, (1.0 - th.cos()) / th)
        };
        let det = a * a + b * b;
        let x = (a * self.x + b * self.y) / det;
        let y = (-b * self.x + a * self.y) / det;
        Vector3::new(x, y, th)
    }

    /// Local-frame difference `log(other⁻¹ ∘ self)`.
    pub fn boxminus(&self, other: &Pose2) -> Vector3<f64> {
        let mut d = other.inverse().compose(self).log();
        d.z = normalize_angle(d.z);
        d
    }

    /// `self ∘ exp(delta)`; inverse of [`Pose2::boxminus`].
    pub fn boxplus(&self, delta: Vector3<f64>) -> Pose2 {
        self.compose(&Pose2::exp(delta))
    }

    pub fn distance_to(&self, other: &Pose2) -> f64 {
        (self.translation() - other.translation()).norm()
    }
}

pub fn se2_compose(a: &Pose2, b: &Pose2) -> Pose2 {
    a.compose(b)
}

pub fn se2_inverse(a: &Pose2) -> Pose2 {
    a.inverse()
}

pub fn se2_apply(t: &Pose2, p: Point2) -> Point2 {
    t.apply(p)
}

pub fn se2_boxminus(a: &Pose2, b: &Pose2) -> Vector3<f64> {
    a.boxminus(b)
}

/// A finite line segment with an outward normal.
///
/// `direction` and `normal` are orthonormal; both endpoints lie on the
/// infinite line through `centroid`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Line2 {
    pub centroid: Point2,
    pub direction: Point2,
    pub normal: Point2,
    pub endpoint_a: Point2,
    pub endpoint_b: Point2,
    pub length: f64,
}

impl Line2 {
    /// Builds a line from a centroid, an outward normal and an along-line
    /// interval `[t_min, t_max]` measured from the centroid.
    ///
    /// The direction is chosen so that `normal = perp(direction)` rotated by
    /// -90°, i.e. `direction = (n.y, -n.x)`.
    pub fn from_normal(centroid: Point2, normal: Point2, t_min: f64, t_max: f64) -> Self {
        let normal = normal.normalize();
        let direction = Point2::new(normal.y, -normal.x);
        let endpoint_a = centroid + direction * t_min;
        let endpoint_b = centroid + direction * t_max;
        Self {
            centroid,
            direction,
            normal,
            endpoint_a,
            endpoint_b,
            length: (t_max - t_min).abs(),
        }
    }

    /// Line through two points with the given normal side.
    pub fn from_endpoints(a: Point2, b: Point2, normal_hint: Point2) -> Self {
        let d = (b - a).normalize();
        let mut n = perp(d);
        if n.dot(&normal_hint) < 0.0 {
            n = -n;
        }
        let c = (a + b) * 0.5;
        let half = (b - a).norm() * 0.5;
        let mut line = Self::from_normal(c, n, -half, half);
        if (line.endpoint_a - a).norm() > (line.endpoint_b - a).norm() {
            std::mem::swap(&mut line.endpoint_a, &mut line.endpoint_b);
        }
        line
    }

    /// Signed perpendicular distance, positive on the normal side.
    pub fn signed_distance(&self, p: Point2) -> f64 {
        self.normal.dot(&(p - self.centroid))
    }

    /// Coordinate of `p` along the direction, relative to the centroid.
    pub fn project(&self, p: Point2) -> f64 {
        self.direction.dot(&(p - self.centroid))
    }

    /// Along-line interval covered by the endpoints, relative to the centroid.
    pub fn interval(&self) -> (f64, f64) {
        let a = self.project(self.endpoint_a);
        let b = self.project(self.endpoint_b);
        (a.min(b), a.max(b))
    }

    /// How far `p` lies beyond the segment ends along the direction (0 inside).
    pub fn overshoot(&self, p: Point2) -> f64 {
        let (lo, hi) = self.interval();
        let t = self.project(p);
        if t < lo {
            lo - t
        } else if t > hi {
            t - hi
        } else {
            0.0
        }
    }

    pub fn transformed(&self, pose: &Pose2) -> Line2 {
        let endpoint_a = pose.apply(self.endpoint_a);
        let endpoint_b = pose.apply(self.endpoint_b);
        Line2 {
            centroid: pose.apply(self.centroid),
            direction: pose.apply_vector(self.direction),
            normal: pose.apply_vector(self.normal),
            endpoint_a,
            endpoint_b,
            length: (endpoint_a - endpoint_b).norm(),
        }
    }

    pub fn midpoint(&self) -> Point2 {
        (self.endpoint_a + self.endpoint_b) * 0.5
    }

    /// Distance from `p` to the closed segment.
    pub fn segment_distance(&self, p: Point2) -> f64 {
        let d = self.signed_distance(p);
        d.hypot(self.overshoot(p))
    }
}

pub fn point_to_line_distance(p: Point2, line: &Line2) -> f64 {
    line.signed_distance(p)
}

/// Aggregate translational error of an estimated trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryStats {
    pub max_err: f64,
    pub mean_err: f64,
    pub rmse: f64,
    /// RMSE divided by the total ground-truth path length (0 for a stationary path).
    pub nees: f64,
}

pub fn path_length(poses: &[Pose2]) -> f64 {
    poses.windows(2).map(|w| w[0].distance_to(&w[1])).sum()
}

/// Per-pose translational errors in a shared world frame; no alignment step.
pub fn trajectory_error(est: &[Pose2], gt: &[Pose2]) -> Result<TrajectoryStats, GeometryError> {
    if est.len() != gt.len() {
        return Err(GeometryError::LengthMismatch {
            est: est.len(),
            gt: gt.len(),
        });
    }
    if gt.is_empty() {
        return Err(GeometryError::EmptyTrajectory);
    }
    let errs: Vec<f64> = est.iter().zip(gt).map(|(e, g)| e.distance_to(g)).collect();
    let n = errs.len() as f64;
    let max_err = errs.iter().copied().fold(0.0, f64::max);
    let mean_err = errs.iter().sum::<f64>() / n;
    let rmse = (errs.iter().map(|e| e * e).sum::<f64>() / n).sqrt();
    let length = path_length(gt);
    let nees = if length > 0.0 { rmse / length } else { 0.0 };
    Ok(TrajectoryStats {
        max_err,
        mean_err,
        rmse,
        nees,
    })
}
