//! Fisheye camera model, undistortion, inverse perspective mapping and the
//! per-pixel confidence field.
//!
//! The mapping from a pixel to a ground point never changes for a given
//! calibration, so [`build_projection_lut`] evaluates it once per pixel and
//! everything downstream reads the table.

use crate::exec::{self, Execution};
use crate::geometry::Point2;
use nalgebra::{Matrix2, Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

pub const CALIBRATION_FORMAT_VERSION: u32 = 1;

const DEFAULT_CALIBRATION_JSON: &str = include_str!("../data/default_calibration.json");

#[derive(Debug, Error)]
pub enum CameraError {
    #[error("pixel ({u}, {v}) lies outside the usable field of view")]
    OutsideFov { u: f64, v: f64 },
    #[error("pixel ({u}, {v}) projects to infinity")]
    AtInfinity { u: f64, v: f64 },
    #[error("invalid calibration: {0}")]
    InvalidCalibration(String),
    #[error("unsupported calibration format version {0}")]
    UnsupportedVersion(u32),
    #[error("calibration parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("calibration io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Omnidirectional fisheye model with distortion polynomial
/// `d(ρ) = a0 + a2·ρ² + a3·ρ³ + a4·ρ⁴`.
#[derive(Debug, Clone, PartialEq)]
pub struct FisheyeModel {
    pub a0: f64,
    pub a2: f64,
    pub a3: f64,
    pub a4: f64,
    pub stretch: Matrix2<f64>,
    pub center: Point2,
    pub width: u32,
    pub height: u32,
    stretch_inv: Matrix2<f64>,
}

impl FisheyeModel {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        a0: f64,
        a2: f64,
        a3: f64,
        a4: f64,
        stretch: Matrix2<f64>,
        center: Point2,
        width: u32,
        height: u32,
    ) -> Result<Self, CameraError> {
        if a0.is_nan() || a0 <= 0.0 {
            return Err(CameraError::InvalidCalibration(
                "a0 must be positive".into(),
            ));
        }
        let stretch_inv = stretch
            .try_inverse()
            .filter(|_| stretch.determinant().abs() > 1e-12)
            .ok_or_else(|| CameraError::InvalidCalibration("stretch matrix is singular".into()))?;
        if width == 0
            || height == 0
            || !(0.0..width as f64).contains(&center.x)
            || !(0.0..height as f64).contains(&center.y)
        {
            return Err(CameraError::InvalidCalibration(
                "optical center outside the image".into(),
            ));
        }
        Ok(Self {
            a0,
            a2,
            a3,
            a4,
            stretch,
            center,
            width,
            height,
            stretch_inv,
        })
    }

    pub fn distortion(&self, rho: f64) -> f64 {
        let r2 = rho * rho;
        self.a0 + self.a2 * r2 + self.a3 * r2 * rho + self.a4 * r2 * r2
    }

    /// Removes the fisheye distortion of pixel `(u, v)`.
    ///
    /// The pixel is rescaled about the optical center by `a0 / d(ρ)`, with ρ
    /// measured in stretch-corrected coordinates.
    pub fn undistort(&self, u: f64, v: f64) -> Result<Point2, CameraError> {
        let offset = Point2::new(u, v) - self.center;
        let rho = (self.stretch_inv * offset).norm();
        let d = self.distortion(rho);
        if d <= 0.0 {
            return Err(CameraError::OutsideFov { u, v });
        }
        let k = self.a0 / d;
        Ok(self.center + offset * k)
    }
}

pub fn undistort(u: f64, v: f64, model: &FisheyeModel) -> Result<Point2, CameraError> {
    model.undistort(u, v)
}

/// Homography taking homogeneous ground coordinates (vehicle frame) to
/// undistorted homogeneous pixel coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct IpmHomography {
    h: Matrix3<f64>,
    h_inv: Matrix3<f64>,
}

impl IpmHomography {
    pub fn new(h: Matrix3<f64>) -> Result<Self, CameraError> {
        if h[(2, 2)].abs() < 1e-15 {
            return Err(CameraError::InvalidCalibration(
                "H[2][2] must be nonzero".into(),
            ));
        }
        let h = h / h[(2, 2)];
        let det = h.determinant().abs();
        if !(1e-9..=1e9).contains(&det) {
            return Err(CameraError::InvalidCalibration(format!(
                "homography determinant {det} out of range"
            )));
        }
        let h_inv = h
            .try_inverse()
            .ok_or_else(|| CameraError::InvalidCalibration("homography is singular".into()))?;
        Ok(Self { h, h_inv })
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.h
    }

    /// Undistorted pixel → ground point in the vehicle frame.
    pub fn project(&self, u: f64, v: f64) -> Result<Point2, CameraError> {
        let g = self.h_inv * Vector3::new(u, v, 1.0);
        if g.z.abs() < 1e-12 {
            return Err(CameraError::AtInfinity { u, v });
        }
        Ok(Point2::new(g.x / g.z, g.y / g.z))
    }

    /// Ground point → undistorted pixel, `None` on the horizon.
    pub fn ground_to_pixel(&self, p: Point2) -> Option<Point2> {
        let q = self.h * Vector3::new(p.x, p.y, 1.0);
        (q.z.abs() >= 1e-12).then(|| Point2::new(q.x / q.z, q.y / q.z))
    }
}

pub fn ipm_project(u: f64, v: f64, h: &IpmHomography) -> Result<Point2, CameraError> {
    h.project(u, v)
}

/// Ground point of a raw fisheye pixel, if it has one.
pub fn pixel_to_ground(u: f64, v: f64, model: &FisheyeModel, h: &IpmHomography) -> Option<Point2> {
    let p = model.undistort(u, v).ok()?;
    h.project(p.x, p.y).ok()
}

/// Logistic confidence of a pixel whose physical size is `grad_norm` meters.
pub fn confidence_from_gradient(grad_norm: f64, a: f64, b: f64) -> f64 {
    if b == 0.0 {
        return 0.5;
    }
    1.0 / (1.0 + (b * (a - 1.0 / grad_norm)).exp())
}

/// Finite-difference derivative along one pixel axis: central when both
/// neighbors exist, one-sided otherwise.
fn axis_derivative(center: f64, prev: Option<f64>, next: Option<f64>) -> Option<f64> {
    match (prev, next) {
        (Some(p), Some(n)) => Some((n - p) * 0.5),
        (None, Some(n)) => Some(n - center),
        (Some(p), None) => Some(center - p),
        (None, None) => None,
    }
}

/// ‖∇f‖ for f = ground range, from the ranges of the 4-neighborhood.
fn range_gradient(
    center: f64,
    left: Option<f64>,
    right: Option<f64>,
    up: Option<f64>,
    down: Option<f64>,
) -> Option<f64> {
    let du = axis_derivative(center, left, right)?;
    let dv = axis_derivative(center, up, down)?;
    Some(du.hypot(dv))
}

/// Confidence of pixel `(u, v)` evaluated directly from the model.
///
/// Returns 0 for an isolated pixel (no usable neighbor along an axis).
pub fn pixel_confidence(
    u: u32,
    v: u32,
    model: &FisheyeModel,
    h: &IpmHomography,
    a: f64,
    b: f64,
) -> Result<f64, CameraError> {
    let range_at = |du: i64, dv: i64| -> Option<f64> {
        let uu = u as i64 + du;
        let vv = v as i64 + dv;
        if uu < 0 || vv < 0 || uu >= model.width as i64 || vv >= model.height as i64 {
            return None;
        }
        pixel_to_ground(uu as f64, vv as f64, model, h).map(|g| g.norm())
    };
    let p = model.undistort(u as f64, v as f64)?;
    let center = h.project(p.x, p.y)?.norm();
    Ok(
        match range_gradient(
            center,
            range_at(-1, 0),
            range_at(1, 0),
            range_at(0, -1),
            range_at(0, 1),
        ) {
            Some(g) => confidence_from_gradient(g, a, b),
            None => 0.0,
        },
    )
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LutCell {
    /// Ground point in the vehicle frame (meters).
    pub ground: Point2,
    pub confidence: f64,
    /// ‖∇f‖: physical size of the pixel (meters per pixel).
    pub footprint: f64,
    /// Touches an invalid pixel; contour points here are field-of-view
    /// truncation rather than marker edges.
    pub fov_edge: bool,
}

/// Per-pixel ground projection and confidence, computed once per calibration.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionLut {
    width: u32,
    height: u32,
    cells: Vec<Option<LutCell>>,
    pub conf_a: f64,
    pub conf_b: f64,
    pub max_range: f64,
}

impl ProjectionLut {
    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    #[inline]
    pub fn index(&self, u: u32, v: u32) -> usize {
        v as usize * self.width as usize + u as usize
    }

    #[inline]
    pub fn cell(&self, u: u32, v: u32) -> Option<&LutCell> {
        if u >= self.width || v >= self.height {
            return None;
        }
        self.cells[self.index(u, v)].as_ref()
    }

    pub fn cells(&self) -> &[Option<LutCell>] {
        &self.cells
    }

    pub fn valid_count(&self) -> usize {
        self.cells.iter().filter(|c| c.is_some()).count()
    }

    pub fn valid_fraction(&self) -> f64 {
        self.valid_count() as f64 / self.cells.len() as f64
    }

    /// Builds a table from explicit cells (row-major); used by tests and tools.
    pub fn from_cells(width: u32, height: u32, cells: Vec<Option<LutCell>>) -> Self {
        assert_eq!(cells.len(), width as usize * height as usize);
        Self {
            width,
            height,
            cells,
            conf_a: 0.0,
            conf_b: 0.0,
            max_range: f64::INFINITY,
        }
    }
}

/// Evaluates every pixel once. Pixels without a ground projection or beyond
/// `max_range` become invalid entries.
pub fn build_projection_lut(
    model: &FisheyeModel,
    h: &IpmHomography,
    a: f64,
    b: f64,
    max_range: f64,
    exec: Execution,
) -> ProjectionLut {
    let w = model.width as usize;
    let hgt = model.height as usize;

    let mut ground: Vec<Option<Point2>> = vec![None; w * hgt];
    exec::for_each_chunk_mut(exec, &mut ground, w, |row, out| {
        for (col, slot) in out.iter_mut().enumerate() {
            *slot = pixel_to_ground(col as f64, row as f64, model, h);
        }
    });

    let range = |c: usize, r: usize| ground[r * w + c].map(|g| g.norm());
    let mut cells: Vec<Option<LutCell>> = vec![None; w * hgt];
    exec::for_each_chunk_mut(exec, &mut cells, w, |row, out| {
        for (col, slot) in out.iter_mut().enumerate() {
            let Some(g) = ground[row * w + col] else {
                continue;
            };
            let center = g.norm();
            if center > max_range {
                continue;
            }
            let left = (col > 0).then(|| range(col - 1, row)).flatten();
            let right = (col + 1 < w).then(|| range(col + 1, row)).flatten();
            let up = (row > 0).then(|| range(col, row - 1)).flatten();
            let down = (row + 1 < hgt).then(|| range(col, row + 1)).flatten();
            let (confidence, footprint) = match range_gradient(center, left, right, up, down) {
                Some(grad) => (confidence_from_gradient(grad, a, b), grad),
                None => (0.0, f64::INFINITY),
            };
            *slot = Some(LutCell {
                ground: g,
                confidence,
                footprint,
                fov_edge: false,
            });
        }
    });

    let valid: Vec<bool> = cells.iter().map(Option::is_some).collect();
    for row in 0..hgt {
        for col in 0..w {
            let Some(cell) = cells[row * w + col].as_mut() else {
                continue;
            };
            'scan: for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    let r = row as i64 + dr;
                    let c = col as i64 + dc;
                    if r < 0
                        || c < 0
                        || r >= hgt as i64
                        || c >= w as i64
                        || !valid[r as usize * w + c as usize]
                    {
                        cell.fov_edge = true;
                        break 'scan;
                    }
                }
            }
        }
    }

    ProjectionLut {
        width: model.width,
        height: model.height,
        cells,
        conf_a: a,
        conf_b: b,
        max_range,
    }
}

/// On-disk camera calibration (versioned JSON).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub format_version: u32,
    pub a0: f64,
    pub a2: f64,
    pub a3: f64,
    pub a4: f64,
    /// Row-major 2×2 stretch matrix.
    pub stretch: [f64; 4],
    pub center: [f64; 2],
    pub width: u32,
    pub height: u32,
    /// Row-major 3×3 ground-to-pixel homography.
    #[serde(rename = "H")]
    pub h: [f64; 9],
    pub conf_a: f64,
    pub conf_b: f64,
    pub max_range: f64,
}

impl Default for Calibration {
    fn default() -> Self {
        serde_json::from_str(DEFAULT_CALIBRATION_JSON).expect("bundled calibration is valid")
    }
}

impl Calibration {
    pub fn from_json(text: &str) -> Result<Self, CameraError> {
        let cal: Calibration = serde_json::from_str(text)?;
        if cal.format_version != CALIBRATION_FORMAT_VERSION {
            return Err(CameraError::UnsupportedVersion(cal.format_version));
        }
        cal.model()?;
        cal.homography()?;
        Ok(cal)
    }

    pub fn load(path: &Path) -> Result<Self, CameraError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("calibration serializes")
    }

    pub fn model(&self) -> Result<FisheyeModel, CameraError> {
        let s = self.stretch;
        FisheyeModel::new(
            self.a0,
            self.a2,
            self.a3,
            self.a4,
            Matrix2::new(s[0], s[1], s[2], s[3]),
            Point2::new(self.center[0], self.center[1]),
            self.width,
            self.height,
        )
    }

    pub fn homography(&self) -> Result<IpmHomography, CameraError> {
        IpmHomography::new(Matrix3::from_row_slice(&self.h))
    }

    pub fn build_lut(&self, exec: Execution) -> Result<ProjectionLut, CameraError> {
        let model = self.model()?;
        let h = self.homography()?;
        Ok(build_projection_lut(
            &model,
            &h,
            self.conf_a,
            self.conf_b,
            self.max_range,
            exec,
        ))
    }
}
