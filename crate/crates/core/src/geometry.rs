//! Point sets, camera poses and the pose-induced plane homography.
//!
//! The scene is a flat ground plane. The reference image is an orthophoto of
//! that plane at `reference_gsd` metres per pixel, north up, with the
//! principal point at ground origin. A sensed image is taken by a pinhole
//! camera hovering above the plane; [`pose_to_homography`] gives the map from
//! reference pixels to sensed pixels for a given pose, and its inverse
//! ([`sensed_to_reference`]) is the registration transform applied to sensed
//! feature points.
//!
//! World axes are east, north, up. Reference pixel `x` grows east and `y`
//! grows south.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point2 = [f64; 2];

/// An ordered, non-empty list of finite 2D points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Point2>", into = "Vec<Point2>")]
pub struct PointSet2D(Vec<Point2>);

impl PointSet2D {
    pub fn new(points: Vec<Point2>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyInput("point set"));
        }
        if let Some(i) = points
            .iter()
            .position(|p| !(p[0].is_finite() && p[1].is_finite()))
        {
            return Err(Error::config(
                format!("points[{i}]"),
                "coordinates must be finite",
            ));
        }
        Ok(Self(points))
    }

    pub fn points(&self) -> &[Point2] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<Point2> {
        self.0
    }

    /// Every point shifted by `offset`.
    pub fn translated(&self, offset: Point2) -> Self {
        Self(
            self.0
                .iter()
                .map(|p| [p[0] + offset[0], p[1] + offset[1]])
                .collect(),
        )
    }
}

impl TryFrom<Vec<Point2>> for PointSet2D {
    type Error = Error;
    fn try_from(points: Vec<Point2>) -> Result<Self> {
        Self::new(points)
    }
}

impl From<PointSet2D> for Vec<Point2> {
    fn from(set: PointSet2D) -> Self {
        set.0
    }
}

/// Six-parameter camera pose relative to the nominal nadir view.
///
/// Translations are in metres (north, altitude, east); angles in radians.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PoseParams {
    pub theta_x: f64,
    pub theta_y: f64,
    pub theta_z: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl PoseParams {
    pub fn from_translation(t: [f64; 3], angles: [f64; 3]) -> Self {
        Self {
            theta_x: t[0],
            theta_y: t[1],
            theta_z: t[2],
            alpha: angles[0],
            beta: angles[1],
            gamma: angles[2],
        }
    }

    pub fn translation(&self) -> [f64; 3] {
        [self.theta_x, self.theta_y, self.theta_z]
    }

    pub fn angles(&self) -> [f64; 3] {
        [self.alpha, self.beta, self.gamma]
    }

    pub fn validate(&self, cam: &CameraModel) -> Result<()> {
        let all = [
            self.theta_x,
            self.theta_y,
            self.theta_z,
            self.alpha,
            self.beta,
            self.gamma,
        ];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::config("pose", "all six parameters must be finite"));
        }
        if cam.nominal_height + self.theta_y <= 0.0 {
            return Err(Error::DegenerateGeometry(format!(
                "camera height {} m is not above the ground plane",
                cam.nominal_height + self.theta_y
            )));
        }
        Ok(())
    }
}

/// Pinhole intrinsics plus the nominal flight geometry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub focal_px: f64,
    pub principal_point: Point2,
    pub nominal_height: f64,
    pub reference_gsd: f64,
}

impl Default for CameraModel {
    fn default() -> Self {
        Self {
            focal_px: 1000.0,
            principal_point: [256.0, 256.0],
            nominal_height: 1000.0,
            reference_gsd: 1.0,
        }
    }
}

impl CameraModel {
    pub fn validate(&self) -> Result<()> {
        let checks = [
            ("camera.focal_px", self.focal_px),
            ("camera.nominal_height", self.nominal_height),
            ("camera.reference_gsd", self.reference_gsd),
        ];
        for (field, v) in checks {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(field, "must be finite and > 0"));
            }
        }
        if !self.principal_point.iter().all(|v| v.is_finite()) {
            return Err(Error::config("camera.principal_point", "must be finite"));
        }
        Ok(())
    }

    /// Sensed pixels moved per metre of horizontal camera travel at the
    /// nominal height and nadir view.
    pub fn pixels_per_metre(&self) -> f64 {
        self.focal_px / self.nominal_height
    }

    /// Sensed-pixel scale of one reference pixel at nominal geometry.
    pub fn nominal_scale(&self) -> f64 {
        self.focal_px * self.reference_gsd / self.nominal_height
    }

    fn intrinsics(&self) -> Matrix3<f64> {
        let [cx, cy] = self.principal_point;
        Matrix3::new(
            self.focal_px,
            0.0,
            cx,
            0.0,
            self.focal_px,
            cy,
            0.0,
            0.0,
            1.0,
        )
    }

    /// Reference pixel -> homogeneous ground coordinates (east, north, 1).
    fn reference_to_ground(&self) -> Matrix3<f64> {
        let [cx, cy] = self.principal_point;
        let g = self.reference_gsd;
        Matrix3::new(g, 0.0, -cx * g, 0.0, -g, cy * g, 0.0, 0.0, 1.0)
    }
}

/// A normalized 3x3 projective map.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homography {
    h: Matrix3<f64>,
}

impl Homography {
    /// Builds a normalized homography; rejects non-finite or singular input.
    pub fn new(h: Matrix3<f64>) -> Result<Self> {
        if h.iter().any(|v| !v.is_finite()) {
            return Err(Error::DegenerateGeometry(
                "homography has non-finite entries".into(),
            ));
        }
        let det = h.determinant();
        if det == 0.0 || !det.is_finite() {
            return Err(Error::Singular {
                condition: f64::INFINITY,
            });
        }
        Ok(Self { h: normalize(h) })
    }

    pub fn identity() -> Self {
        Self {
            h: Matrix3::identity(),
        }
    }

    pub fn from_rows(rows: [[f64; 3]; 3]) -> Result<Self> {
        Self::new(Matrix3::from_row_slice(&[
            rows[0][0], rows[0][1], rows[0][2], rows[1][0], rows[1][1], rows[1][2], rows[2][0],
            rows[2][1], rows[2][2],
        ]))
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.h
    }

    pub fn rows(&self) -> [[f64; 3]; 3] {
        let h = &self.h;
        [
            [h[(0, 0)], h[(0, 1)], h[(0, 2)]],
            [h[(1, 0)], h[(1, 1)], h[(1, 2)]],
            [h[(2, 0)], h[(2, 1)], h[(2, 2)]],
        ]
    }

    /// `self` applied after `first`.
    pub fn compose(&self, first: &Homography) -> Result<Homography> {
        Homography::new(self.h * first.h)
    }

    /// Maps one point, failing when it lands on the plane at infinity.
    pub fn apply(&self, p: Point2) -> Option<Point2> {
        let h = &self.h;
        let w = h[(2, 0)] * p[0] + h[(2, 1)] * p[1] + h[(2, 2)];
        if w.abs() <= W_EPS {
            return None;
        }
        let x = (h[(0, 0)] * p[0] + h[(0, 1)] * p[1] + h[(0, 2)]) / w;
        let y = (h[(1, 0)] * p[0] + h[(1, 1)] * p[1] + h[(1, 2)]) / w;
        Some([x, y])
    }
}

const W_EPS: f64 = 1e-12;
const NORMALIZE_EPS: f64 = 1e-9;
const MAX_CONDITION: f64 = 1e12;

fn normalize(h: Matrix3<f64>) -> Matrix3<f64> {
    let corner = h[(2, 2)];
    if corner.abs() > NORMALIZE_EPS {
        h / corner
    } else {
        h / h.norm()
    }
}

fn rotation_z(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

fn rotation_y(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

fn rotation_x(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

/// Camera-to-world rotation: nadir view (camera x east, y south, z down)
/// followed by intrinsic yaw-pitch-roll about the camera axes.
pub(crate) fn camera_to_world(pose: &PoseParams) -> Matrix3<f64> {
    let nadir = Matrix3::from_diagonal(&Vector3::new(1.0, -1.0, -1.0));
    nadir * rotation_z(pose.alpha) * rotation_y(pose.beta) * rotation_x(pose.gamma)
}

/// World position of the camera centre (east, north, up).
pub(crate) fn camera_center(pose: &PoseParams, cam: &CameraModel) -> Vector3<f64> {
    Vector3::new(pose.theta_z, pose.theta_x, cam.nominal_height + pose.theta_y)
}

/// Plane-induced homography from reference pixels to sensed pixels.
pub fn pose_to_homography(pose: &PoseParams, cam: &CameraModel) -> Result<Homography> {
    cam.validate()?;
    pose.validate(cam)?;
    let r_cw = camera_to_world(pose);
    // Optical axis must point down towards the plane.
    let optical_up = r_cw[(2, 2)];
    if optical_up > -NORMALIZE_EPS {
        return Err(Error::DegenerateGeometry(format!(
            "optical axis does not intersect the ground plane (up component {optical_up})"
        )));
    }
    let c = camera_center(pose, cam);
    let plane_to_camera = Matrix3::from_columns(&[Vector3::x(), Vector3::y(), -c]);
    let h = cam.intrinsics() * r_cw.transpose() * plane_to_camera * cam.reference_to_ground();
    Homography::new(h)
}

/// Registration transform T(., pose): sensed pixels to reference pixels.
pub fn sensed_to_reference(pose: &PoseParams, cam: &CameraModel) -> Result<Homography> {
    invert_homography(&pose_to_homography(pose, cam)?)
}

pub fn transform_points(points: &PointSet2D, h: &Homography) -> Result<PointSet2D> {
    let mapped = points
        .points()
        .iter()
        .enumerate()
        .map(|(index, &p)| {
            h.apply(p).ok_or_else(|| {
                let m = h.matrix();
                Error::ProjectiveDegeneracy {
                    index,
                    w: m[(2, 0)] * p[0] + m[(2, 1)] * p[1] + m[(2, 2)],
                }
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PointSet2D(mapped))
}

pub fn invert_homography(h: &Homography) -> Result<Homography> {
    let inv = h.h.try_inverse().ok_or(Error::Singular {
        condition: f64::INFINITY,
    })?;
    let condition = h.h.norm() * inv.norm();
    if !condition.is_finite() || condition > MAX_CONDITION {
        return Err(Error::Singular { condition });
    }
    Homography::new(inv)
}
