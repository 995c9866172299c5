//! Pinhole camera model, rigid transforms and RGB-D unprojection.
//!
//! Conventions: the camera frame has +z forward, +x right and +y down. Pixel
//! `(col, row)` of a raster has its center at continuous coordinates
//! `(u, v) = (col, row)`. Depth values that are non-finite or `<= 0` are
//! invalid.

use std::ops::{Add, Mul, Neg, Sub};

use image::RgbImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::{self, ExecMode};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("depth {0} is not a positive finite value")]
    NonPositiveDepth(f64),
    #[error("point is behind the camera (z = {0})")]
    BehindCamera(f64),
    #[error("dimension mismatch: expected {expected:?}, got {actual:?}")]
    DimensionMismatch {
        expected: (u32, u32),
        actual: (u32, u32),
    },
    #[error("pixel ({u}, {v}) lies outside a {width}x{height} image")]
    OutOfBounds {
        u: f64,
        v: f64,
        width: u32,
        height: u32,
    },
    #[error("invalid camera intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("quaternion is not unit length (norm {0})")]
    NonUnitQuaternion(f64),
    #[error("raster buffer holds {actual} values, expected {expected}")]
    BufferLength { expected: usize, actual: usize },
}

// ---------------------------------------------------------------------------
// Points and pixels
// ---------------------------------------------------------------------------

/// Continuous image coordinates in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Pixel {
    pub u: f64,
    pub v: f64,
}

impl Pixel {
    pub const fn new(u: f64, v: f64) -> Self {
        Self { u, v }
    }

    pub fn distance(&self, other: &Pixel) -> f64 {
        (self.u - other.u).hypot(self.v - other.v)
    }

    pub fn is_finite(&self) -> bool {
        self.u.is_finite() && self.v.is_finite()
    }
}

/// Which frame a set of 3D coordinates is expressed in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Frame {
    #[default]
    Camera,
    Workspace,
}

/// A 3D point or vector in meters.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "[f64; 3]", into = "[f64; 3]")]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl From<[f64; 3]> for Point3 {
    fn from(a: [f64; 3]) -> Self {
        Point3::new(a[0], a[1], a[2])
    }
}

impl From<Point3> for [f64; 3] {
    fn from(p: Point3) -> Self {
        [p.x, p.y, p.z]
    }
}

impl Point3 {
    pub const ORIGIN: Point3 = Point3::new(0.0, 0.0, 0.0);

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn dot(&self, o: &Point3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(&self, o: &Point3) -> Point3 {
        Point3::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn distance(&self, o: &Point3) -> f64 {
        (*self - *o).norm()
    }

    pub fn normalized(&self) -> Point3 {
        *self * (1.0 / self.norm())
    }

    pub fn lerp(&self, o: &Point3, t: f64) -> Point3 {
        Point3::new(
            self.x + (o.x - self.x) * t,
            self.y + (o.y - self.y) * t,
            self.z + (o.z - self.z) * t,
        )
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn to_array(self) -> [f64; 3] {
        self.into()
    }
}

impl Add for Point3 {
    type Output = Point3;
    fn add(self, o: Point3) -> Point3 {
        Point3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl Sub for Point3 {
    type Output = Point3;
    fn sub(self, o: Point3) -> Point3 {
        Point3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Mul<f64> for Point3 {
    type Output = Point3;
    fn mul(self, s: f64) -> Point3 {
        Point3::new(self.x * s, self.y * s, self.z * s)
    }
}

impl Neg for Point3 {
    type Output = Point3;
    fn neg(self) -> Point3 {
        Point3::new(-self.x, -self.y, -self.z)
    }
}

// ---------------------------------------------------------------------------
// Camera intrinsics
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawIntrinsics", deny_unknown_fields)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawIntrinsics {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: u32,
    height: u32,
}

impl TryFrom<RawIntrinsics> for CameraIntrinsics {
    type Error = GeometryError;
    fn try_from(r: RawIntrinsics) -> Result<Self, Self::Error> {
        CameraIntrinsics::new(r.fx, r.fy, r.cx, r.cy, r.width, r.height)
    }
}

impl CameraIntrinsics {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: u32,
        height: u32,
    ) -> Result<Self, GeometryError> {
        let bad = |m: &str| Err(GeometryError::InvalidIntrinsics(m.to_string()));
        if !(fx > 0.0 && fx.is_finite() && fy > 0.0 && fy.is_finite()) {
            return bad("focal lengths must be positive and finite");
        }
        if width == 0 || height == 0 {
            return bad("image size must be nonzero");
        }
        if !(cx >= 0.0 && cx < width as f64 && cy >= 0.0 && cy < height as f64) {
            return bad("principal point must lie inside the image");
        }
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        })
    }

    /// Centered principal point with equal focal lengths.
    pub fn centered(focal: f64, width: u32, height: u32) -> Result<Self, GeometryError> {
        Self::new(
            focal,
            focal,
            width as f64 / 2.0,
            height as f64 / 2.0,
            width,
            height,
        )
    }

    pub fn dims(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn diagonal(&self) -> f64 {
        (self.width as f64).hypot(self.height as f64)
    }

    pub fn contains(&self, p: &Pixel) -> bool {
        p.u >= 0.0 && p.v >= 0.0 && p.u <= self.width as f64 && p.v <= self.height as f64
    }
}

// ---------------------------------------------------------------------------
// Rigid transforms
// ---------------------------------------------------------------------------

/// A rotation (unit quaternion, xyzw) followed by a translation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTransform")]
pub struct RigidTransform {
    rotation: [f64; 4],
    translation: [f64; 3],
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTransform {
    rotation: [f64; 4],
    translation: [f64; 3],
}

impl TryFrom<RawTransform> for RigidTransform {
    type Error = GeometryError;
    fn try_from(r: RawTransform) -> Result<Self, Self::Error> {
        RigidTransform::new(r.rotation, r.translation)
    }
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

const UNIT_QUAT_TOL: f64 = 1e-9;

impl RigidTransform {
    pub const fn identity() -> Self {
        Self {
            rotation: [0.0, 0.0, 0.0, 1.0],
            translation: [0.0, 0.0, 0.0],
        }
    }

    /// Builds a transform from an xyzw unit quaternion. Fails unless the norm is
    /// 1 within 1e-9.
    pub fn new(rotation: [f64; 4], translation: [f64; 3]) -> Result<Self, GeometryError> {
        let n = rotation.iter().map(|c| c * c).sum::<f64>().sqrt();
        if !n.is_finite() || (n - 1.0).abs() > UNIT_QUAT_TOL || translation.iter().any(|t| !t.is_finite()) {
            return Err(GeometryError::NonUnitQuaternion(n));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    /// Normalizes `rotation` before building the transform.
    pub fn from_unnormalized(rotation: [f64; 4], translation: [f64; 3]) -> Result<Self, GeometryError> {
        let n = rotation.iter().map(|c| c * c).sum::<f64>().sqrt();
        if !(n > 0.0 && n.is_finite()) {
            return Err(GeometryError::NonUnitQuaternion(n));
        }
        let q = rotation.map(|c| c / n);
        Self::new(q, translation)
    }

    pub fn from_translation(t: Point3) -> Self {
        Self {
            rotation: [0.0, 0.0, 0.0, 1.0],
            translation: t.to_array(),
        }
    }

    /// Rotation about a unit axis by `angle` radians.
    pub fn from_axis_angle(axis: Point3, angle: f64, translation: Point3) -> Self {
        let a = axis.normalized();
        let (s, c) = (angle / 2.0).sin_cos();
        Self {
            rotation: [a.x * s, a.y * s, a.z * s, c],
            translation: translation.to_array(),
        }
    }

    /// Builds a transform from a row-major rotation matrix.
    pub fn from_matrix(m: [[f64; 3]; 3], translation: Point3) -> Result<Self, GeometryError> {
        let trace = m[0][0] + m[1][1] + m[2][2];
        let q = if trace > 0.0 {
            let s = (trace + 1.0).sqrt() * 2.0;
            [
                (m[2][1] - m[1][2]) / s,
                (m[0][2] - m[2][0]) / s,
                (m[1][0] - m[0][1]) / s,
                0.25 * s,
            ]
        } else if m[0][0] > m[1][1] && m[0][0] > m[2][2] {
            let s = (1.0 + m[0][0] - m[1][1] - m[2][2]).sqrt() * 2.0;
            [
                0.25 * s,
                (m[0][1] + m[1][0]) / s,
                (m[0][2] + m[2][0]) / s,
                (m[2][1] - m[1][2]) / s,
            ]
        } else if m[1][1] > m[2][2] {
            let s = (1.0 + m[1][1] - m[0][0] - m[2][2]).sqrt() * 2.0;
            [
                (m[0][1] + m[1][0]) / s,
                0.25 * s,
                (m[1][2] + m[2][1]) / s,
                (m[0][2] - m[2][0]) / s,
            ]
        } else {
            let s = (1.0 + m[2][2] - m[0][0] - m[1][1]).sqrt() * 2.0;
            [
                (m[0][2] + m[2][0]) / s,
                (m[1][2] + m[2][1]) / s,
                0.25 * s,
                (m[1][0] - m[0][1]) / s,
            ]
        };
        Self::from_unnormalized(q, translation.to_array())
    }

    /// Camera-to-world pose of a camera at `eye` looking at `target`, with the
    /// image +y axis pointing away from `up`.
    pub fn look_at(eye: Point3, target: Point3, up: Point3) -> Result<Self, GeometryError> {
        let z = (target - eye).normalized();
        let x = z.cross(&up).normalized();
        let y = z.cross(&x);
        if !(x.is_finite() && y.is_finite() && z.is_finite()) {
            return Err(GeometryError::InvalidIntrinsics(
                "degenerate look-at configuration".into(),
            ));
        }
        let m = [[x.x, y.x, z.x], [x.y, y.y, z.y], [x.z, y.z, z.z]];
        Self::from_matrix(m, eye)
    }

    pub fn rotation(&self) -> [f64; 4] {
        self.rotation
    }

    pub fn translation(&self) -> Point3 {
        Point3::from(self.translation)
    }

    /// Rotates a vector without translating it.
    pub fn rotate(&self, v: Point3) -> Point3 {
        let [qx, qy, qz, w] = self.rotation;
        let q = Point3::new(qx, qy, qz);
        let t = q.cross(&v) * 2.0;
        v + t * w + q.cross(&t)
    }

    pub fn apply(&self, p: Point3) -> Point3 {
        self.rotate(p) + self.translation()
    }

    pub fn inverse(&self) -> Self {
        let [x, y, z, w] = self.rotation;
        let inv = Self {
            rotation: [-x, -y, -z, w],
            translation: [0.0; 3],
        };
        let t = inv.rotate(self.translation());
        Self {
            rotation: inv.rotation,
            translation: (-t).to_array(),
        }
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &RigidTransform) -> Self {
        let [x1, y1, z1, w1] = self.rotation;
        let [x2, y2, z2, w2] = other.rotation;
        let q = [
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
        ];
        let n = q.iter().map(|c| c * c).sum::<f64>().sqrt();
        Self {
            rotation: q.map(|c| c / n),
            translation: self.apply(other.translation()).to_array(),
        }
    }

    /// Row-major rotation matrix.
    pub fn matrix(&self) -> [[f64; 3]; 3] {
        let ex = self.rotate(Point3::new(1.0, 0.0, 0.0));
        let ey = self.rotate(Point3::new(0.0, 1.0, 0.0));
        let ez = self.rotate(Point3::new(0.0, 0.0, 1.0));
        [[ex.x, ey.x, ez.x], [ex.y, ey.y, ez.y], [ex.z, ey.z, ez.z]]
    }
}

// ---------------------------------------------------------------------------
// Keyposes
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Gripper {
    #[default]
    Open,
    Closed,
}

impl TryFrom<u8> for Gripper {
    type Error = String;
    fn try_from(v: u8) -> Result<Self, String> {
        match v {
            0 => Ok(Gripper::Open),
            1 => Ok(Gripper::Closed),
            other => Err(format!("gripper state must be 0 or 1, got {other}")),
        }
    }
}

impl From<Gripper> for u8 {
    fn from(g: Gripper) -> u8 {
        match g {
            Gripper::Open => 0,
            Gripper::Closed => 1,
        }
    }
}

/// End-effector target: an SE(3) pose plus a binary gripper command.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Keypose {
    pub pose: RigidTransform,
    pub gripper: Gripper,
}

impl Keypose {
    pub fn at(position: Point3, gripper: Gripper) -> Self {
        Self {
            pose: RigidTransform::from_translation(position),
            gripper,
        }
    }

    pub fn position(&self) -> Point3 {
        self.pose.translation()
    }

    pub fn is_finite(&self) -> bool {
        self.position().is_finite() && self.pose.rotation.iter().all(|c| c.is_finite())
    }
}

// ---------------------------------------------------------------------------
// Rasters
// ---------------------------------------------------------------------------

pub fn is_valid_depth(z: f64) -> bool {
    z.is_finite() && z > 0.0
}

/// Metric depth raster, row-major, meters.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    width: u32,
    height: u32,
    values: Vec<f32>,
}

impl DepthMap {
    pub fn new(width: u32, height: u32, values: Vec<f32>) -> Result<Self, GeometryError> {
        let expected = width as usize * height as usize;
        if values.len() != expected {
            return Err(GeometryError::BufferLength {
                expected,
                actual: values.len(),
            });
        }
        Ok(Self {
            width,
            height,
            values,
        })
    }

    pub fn filled(width: u32, height: u32, value: f32) -> Self {
        Self {
            width,
            height,
            values: vec![value; width as usize * height as usize],
        }
    }

    pub fn from_fn(width: u32, height: u32, f: impl Fn(u32, u32) -> f32) -> Self {
        let mut values = Vec::with_capacity(width as usize * height as usize);
        for row in 0..height {
            for col in 0..width {
                values.push(f(col, row));
            }
        }
        Self {
            width,
            height,
            values,
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dims(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }

    pub fn raw(&self, col: u32, row: u32) -> f32 {
        self.values[row as usize * self.width as usize + col as usize]
    }

    pub fn set(&mut self, col: u32, row: u32, z: f32) {
        let w = self.width as usize;
        self.values[row as usize * w + col as usize] = z;
    }

    /// Depth at an integer pixel, `None` when invalid or out of range.
    pub fn get(&self, col: i64, row: i64) -> Option<f64> {
        if col < 0 || row < 0 || col >= self.width as i64 || row >= self.height as i64 {
            return None;
        }
        let z = self.raw(col as u32, row as u32) as f64;
        is_valid_depth(z).then_some(z)
    }

    pub fn valid_count(&self) -> usize {
        self.values
            .iter()
            .filter(|z| is_valid_depth(**z as f64))
            .count()
    }
}

/// Binary raster, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    width: u32,
    height: u32,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(width: u32, height: u32, data: Vec<bool>) -> Result<Self, GeometryError> {
        let expected = width as usize * height as usize;
        if data.len() != expected {
            return Err(GeometryError::BufferLength {
                expected,
                actual: data.len(),
            });
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn empty(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            data: vec![false; width as usize * height as usize],
        }
    }

    pub fn from_fn(width: u32, height: u32, f: impl Fn(u32, u32) -> bool) -> Self {
        let mut data = Vec::with_capacity(width as usize * height as usize);
        for row in 0..height {
            for col in 0..width {
                data.push(f(col, row));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dims(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, col: u32, row: u32) -> bool {
        self.data[row as usize * self.width as usize + col as usize]
    }

    pub fn set(&mut self, col: u32, row: u32, value: bool) {
        let w = self.width as usize;
        self.data[row as usize * w + col as usize] = value;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|b| **b).count()
    }

    pub fn union_with(&mut self, other: &Mask) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a |= *b;
        }
    }
}

/// 3D points with optional per-point colors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    pub frame: Frame,
    pub points: Vec<Point3>,
    pub colors: Option<Vec<[u8; 3]>>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn transformed(&self, x: &RigidTransform, frame: Frame) -> PointCloud {
        PointCloud {
            frame,
            points: self.points.iter().map(|p| x.apply(*p)).collect(),
            colors: self.colors.clone(),
        }
    }
}

// ---------------------------------------------------------------------------
// Projection
// ---------------------------------------------------------------------------

pub fn unproject(p: Pixel, z: f64, k: &CameraIntrinsics) -> Result<Point3, GeometryError> {
    if !is_valid_depth(z) {
        return Err(GeometryError::NonPositiveDepth(z));
    }
    Ok(Point3::new(
        (p.u - k.cx) * z / k.fx,
        (p.v - k.cy) * z / k.fy,
        z,
    ))
}

/// Projects `p` after applying `x`. No clamping to the image bounds.
pub fn project(p: Point3, k: &CameraIntrinsics, x: &RigidTransform) -> Result<Pixel, GeometryError> {
    let c = x.apply(p);
    if !(c.z > 0.0) {
        return Err(GeometryError::BehindCamera(c.z));
    }
    Ok(Pixel::new(k.fx * c.x / c.z + k.cx, k.fy * c.y / c.z + k.cy))
}

/// One camera-frame point per valid depth pixel, row-major.
pub fn unproject_map(
    d: &DepthMap,
    rgb: Option<&RgbImage>,
    k: &CameraIntrinsics,
) -> Result<PointCloud, GeometryError> {
    unproject_map_with(d, rgb, k, ExecMode::default())
}

pub fn unproject_map_with(
    d: &DepthMap,
    rgb: Option<&RgbImage>,
    k: &CameraIntrinsics,
    mode: ExecMode,
) -> Result<PointCloud, GeometryError> {
    if d.dims() != k.dims() {
        return Err(GeometryError::DimensionMismatch {
            expected: k.dims(),
            actual: d.dims(),
        });
    }
    if let Some(img) = rgb {
        if img.dimensions() != k.dims() {
            return Err(GeometryError::DimensionMismatch {
                expected: k.dims(),
                actual: img.dimensions(),
            });
        }
    }
    let rows = exec::map_range(mode, d.height() as usize, |row| {
        let mut pts = Vec::new();
        let mut cols = Vec::new();
        for col in 0..d.width() {
            let z = d.raw(col, row as u32) as f64;
            if !is_valid_depth(z) {
                continue;
            }
            pts.push(Point3::new(
                (col as f64 - k.cx) * z / k.fx,
                (row as f64 - k.cy) * z / k.fy,
                z,
            ));
            if let Some(img) = rgb {
                cols.push(img.get_pixel(col, row as u32).0);
            }
        }
        (pts, cols)
    });
    let mut cloud = PointCloud {
        frame: Frame::Camera,
        points: Vec::with_capacity(d.valid_count()),
        colors: rgb.map(|_| Vec::new()),
    };
    for (pts, cols) in rows {
        cloud.points.extend(pts);
        if let Some(c) = cloud.colors.as_mut() {
            c.extend(cols);
        }
    }
    Ok(cloud)
}

// ---------------------------------------------------------------------------
// Normalized coordinates
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormScale {
    /// `[0, 1]²`
    Unit,
    /// Integers in `[0, 1000]²`.
    Thousand,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Normalized {
    Unit(f64, f64),
    Thousand(u32, u32),
}

fn check_bounds(p: &Pixel, k: &CameraIntrinsics) -> Result<(), GeometryError> {
    if !p.is_finite() || !k.contains(p) {
        return Err(GeometryError::OutOfBounds {
            u: p.u,
            v: p.v,
            width: k.width,
            height: k.height,
        });
    }
    Ok(())
}

pub fn normalize_pixel(p: Pixel, k: &CameraIntrinsics, scale: NormScale) -> Result<Normalized, GeometryError> {
    check_bounds(&p, k)?;
    let x = p.u / k.width as f64;
    let y = p.v / k.height as f64;
    Ok(match scale {
        NormScale::Unit => Normalized::Unit(x, y),
        // f64::round rounds half away from zero.
        NormScale::Thousand => Normalized::Thousand(
            (1000.0 * x).round().clamp(0.0, 1000.0) as u32,
            (1000.0 * y).round().clamp(0.0, 1000.0) as u32,
        ),
    })
}

/// Thousand-scale shorthand returning the integer pair.
pub fn to_thousand(p: Pixel, k: &CameraIntrinsics) -> Result<[u32; 2], GeometryError> {
    match normalize_pixel(p, k, NormScale::Thousand)? {
        Normalized::Thousand(x, y) => Ok([x, y]),
        Normalized::Unit(..) => unreachable!(),
    }
}

/// Inverse of the thousand-scale map (exact up to the quantization step).
pub fn from_thousand(q: [u32; 2], k: &CameraIntrinsics) -> Pixel {
    Pixel::new(
        q[0] as f64 * k.width as f64 / 1000.0,
        q[1] as f64 * k.height as f64 / 1000.0,
    )
}

// ---------------------------------------------------------------------------
// Sub-pixel depth lookup
// ---------------------------------------------------------------------------

/// Radius (pixels) of the nearest-valid fallback in [`sample_depth`].
pub const DEPTH_FALLBACK_RADIUS: f64 = 5.0;

/// Depth at a continuous pixel.
///
/// Bilinear interpolation over the four surrounding pixels, renormalized over
/// the valid ones. With fewer than two valid corners (or zero total weight on
/// the valid ones) the nearest valid pixel within [`DEPTH_FALLBACK_RADIUS`]
/// is used; ties go to the first in row-major order.
pub fn sample_depth(d: &DepthMap, p: Pixel) -> Option<f64> {
    if !p.is_finite() {
        return None;
    }
    let x0 = p.u.floor();
    let y0 = p.v.floor();
    let fx = p.u - x0;
    let fy = p.v - y0;
    let (x0, y0) = (x0 as i64, y0 as i64);
    let corners = [
        (x0, y0, (1.0 - fx) * (1.0 - fy)),
        (x0 + 1, y0, fx * (1.0 - fy)),
        (x0, y0 + 1, (1.0 - fx) * fy),
        (x0 + 1, y0 + 1, fx * fy),
    ];
    let mut valid = 0;
    let mut num = 0.0;
    let mut den = 0.0;
    for (c, r, w) in corners {
        if let Some(z) = d.get(c, r) {
            valid += 1;
            num += w * z;
            den += w;
        }
    }
    if valid >= 2 && den > 0.0 {
        return Some(num / den);
    }
    nearest_valid_depth(d, p, DEPTH_FALLBACK_RADIUS)
}

fn nearest_valid_depth(d: &DepthMap, p: Pixel, radius: f64) -> Option<f64> {
    let r0 = (p.v - radius).floor().max(0.0) as i64;
    let r1 = (p.v + radius).ceil().min(d.height() as f64 - 1.0) as i64;
    let c0 = (p.u - radius).floor().max(0.0) as i64;
    let c1 = (p.u + radius).ceil().min(d.width() as f64 - 1.0) as i64;
    let mut best: Option<(f64, f64)> = None;
    for row in r0..=r1 {
        for col in c0..=c1 {
            let Some(z) = d.get(col, row) else { continue };
            let dist = (col as f64 - p.u).hypot(row as f64 - p.v);
            if dist > radius {
                continue;
            }
            if best.is_none_or(|(bd, _)| dist < bd) {
                best = Some((dist, z));
            }
        }
    }
    best.map(|(_, z)| z)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn k() -> CameraIntrinsics {
        CameraIntrinsics::new(427.17, 427.17, 160.0, 120.0, 320, 240).unwrap()
    }

    #[test]
    fn principal_point_maps_to_optical_axis() {
        let k = k();
        let p = unproject(Pixel::new(k.cx, k.cy), 2.0, &k).unwrap();
        assert_eq!(p, Point3::new(0.0, 0.0, 2.0));
    }

    #[test]
    fn unit_focal_offset() {
        let k = k();
        let p = unproject(Pixel::new(k.cx + 427.17, k.cy), 1.0, &k).unwrap();
        assert!((p.x - 1.0).abs() < 1e-15);
        assert_eq!(p.y, 0.0);
        assert_eq!(p.z, 1.0);
    }

    #[test]
    fn unproject_golden() {
        // Hand-evaluated with exact rational arithmetic.
        let p = unproject(Pixel::new(100.5, 200.25), 0.8, &k()).unwrap();
        assert!((p.x - -0.11143104618770044).abs() < 1e-15);
        assert!((p.y - 0.15029145305147834).abs() < 1e-15);
        assert_eq!(p.z, 0.8);
    }

    #[test]
    fn project_golden() {
        let k = k();
        let id = RigidTransform::identity();
        assert_eq!(project(Point3::new(0.0, 0.0, 1.0), &k, &id).unwrap(), Pixel::new(160.0, 120.0));
        let px = project(Point3::new(0.5, -0.25, 2.0), &k, &id).unwrap();
        assert!((px.u - 266.7925).abs() < 1e-12);
        assert!((px.v - 66.60375).abs() < 1e-12);
    }

    #[test]
    fn depth_errors() {
        let k = k();
        assert!(matches!(unproject(Pixel::new(1.0, 1.0), 0.0, &k), Err(GeometryError::NonPositiveDepth(_))));
        assert!(unproject(Pixel::new(1.0, 1.0), f64::NAN, &k).is_err());
        assert!(unproject(Pixel::new(1.0, 1.0), -1.0, &k).is_err());
        let r = project(Point3::new(0.0, 0.0, -1.0), &k, &RigidTransform::identity());
        assert!(matches!(r, Err(GeometryError::BehindCamera(_))));
    }

    #[test]
    fn unproject_map_filters_invalid() {
        let k = CameraIntrinsics::centered(10.0, 2, 2).unwrap();
        let d = DepthMap::new(2, 2, vec![1.0, 0.0, 2.0, 3.0]).unwrap();
        let cloud = unproject_map(&d, None, &k).unwrap();
        assert_eq!(cloud.len(), 3);
        assert_eq!(cloud.points[1].z, 2.0);

        let empty = DepthMap::new(2, 2, vec![0.0, f32::NAN, -1.0, f32::INFINITY]).unwrap();
        assert!(unproject_map(&empty, None, &k).unwrap().is_empty());

        let wrong = DepthMap::filled(3, 2, 1.0);
        assert!(matches!(unproject_map(&wrong, None, &k), Err(GeometryError::DimensionMismatch { .. })));
    }

    #[test]
    fn unproject_map_copies_colors() {
        let k = CameraIntrinsics::centered(10.0, 2, 2).unwrap();
        let d = DepthMap::new(2, 2, vec![1.0, 1.0, 0.0, 1.0]).unwrap();
        let rgb = RgbImage::from_fn(2, 2, |x, y| image::Rgb([x as u8, y as u8, 7]));
        let cloud = unproject_map(&d, Some(&rgb), &k).unwrap();
        assert_eq!(cloud.colors.unwrap(), vec![[0, 0, 7], [1, 0, 7], [1, 1, 7]]);
    }

    #[test]
    fn fronto_parallel_plane_spans() {
        let k = CameraIntrinsics::new(100.0, 80.0, 3.5, 2.0, 8, 5).unwrap();
        let d = DepthMap::filled(8, 5, 1.0);
        let cloud = unproject_map(&d, None, &k).unwrap();
        assert_eq!(cloud.len(), 40);
        for (i, p) in cloud.points.iter().enumerate() {
            let (col, row) = ((i % 8) as f64, (i / 8) as f64);
            assert_eq!(p.z, 1.0);
            assert!((p.x - (col - 3.5) / 100.0).abs() < 1e-15);
            assert!((p.y - (row - 2.0) / 80.0).abs() < 1e-15);
        }
        let xs: Vec<f64> = cloud.points.iter().map(|p| p.x).collect();
        assert!((xs.iter().cloned().fold(f64::INFINITY, f64::min) - -0.035).abs() < 1e-15);
        assert!((xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - 0.035).abs() < 1e-15);
    }

    #[test]
    fn normalization() {
        let k = CameraIntrinsics::centered(200.0, 256, 256).unwrap();
        assert_eq!(normalize_pixel(Pixel::new(0.0, 0.0), &k, NormScale::Unit).unwrap(), Normalized::Unit(0.0, 0.0));
        assert_eq!(to_thousand(Pixel::new(0.0, 0.0), &k).unwrap(), [0, 0]);
        assert_eq!(to_thousand(Pixel::new(256.0, 256.0), &k).unwrap(), [1000, 1000]);
        assert_eq!(to_thousand(Pixel::new(128.0, 64.0), &k).unwrap(), [500, 250]);
        // 0.5 rounds away from zero
        let k2 = CameraIntrinsics::centered(200.0, 2000, 2000).unwrap();
        assert_eq!(to_thousand(Pixel::new(1.0, 3.0), &k2).unwrap(), [1, 2]);
        assert!(matches!(
            to_thousand(Pixel::new(-0.1, 0.0), &k),
            Err(GeometryError::OutOfBounds { .. })
        ));
        assert!(to_thousand(Pixel::new(10.0, 256.5), &k).is_err());
    }

    #[test]
    fn intrinsics_validation() {
        assert!(CameraIntrinsics::new(0.0, 1.0, 1.0, 1.0, 4, 4).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 4.0, 1.0, 4, 4).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 1.0, 1.0, 0, 4).is_err());
        let k: CameraIntrinsics =
            serde_json::from_str(r#"{"fx":427.17,"fy":427.17,"cx":424,"cy":240,"width":848,"height":480}"#).unwrap();
        assert_eq!(k.width, 848);
        assert!(serde_json::from_str::<CameraIntrinsics>(r#"{"fx":1,"fy":1,"cx":9,"cy":0,"width":4,"height":4}"#).is_err());
        assert!(serde_json::from_str::<CameraIntrinsics>(
            r#"{"fx":1,"fy":1,"cx":0,"cy":0,"width":4,"height":4,"skew":0}"#
        )
        .is_err());
    }

    #[test]
    fn transforms() {
        assert!(RigidTransform::new([0.0, 0.0, 0.0, 1.1], [0.0; 3]).is_err());
        let x = RigidTransform::from_axis_angle(Point3::new(0.0, 0.0, 1.0), std::f64::consts::FRAC_PI_2, Point3::new(1.0, 2.0, 3.0));
        let p = x.apply(Point3::new(1.0, 0.0, 0.0));
        assert!((p - Point3::new(1.0, 3.0, 3.0)).norm() < 1e-12);
        let back = x.inverse().apply(p);
        assert!((back - Point3::new(1.0, 0.0, 0.0)).norm() < 1e-12);
        let m = x.matrix();
        let y = RigidTransform::from_matrix(m, x.translation()).unwrap();
        let q = Point3::new(0.3, -0.2, 0.9);
        assert!((x.apply(q) - y.apply(q)).norm() < 1e-12);
        let c = x.compose(&x.inverse());
        assert!((c.apply(q) - q).norm() < 1e-12);
    }

    #[test]
    fn look_at_points_forward() {
        let pose = RigidTransform::look_at(
            Point3::new(0.0, -1.0, 0.0),
            Point3::ORIGIN,
            Point3::new(0.0, 0.0, 1.0),
        )
        .unwrap();
        let fwd = pose.rotate(Point3::new(0.0, 0.0, 1.0));
        assert!((fwd - Point3::new(0.0, 1.0, 0.0)).norm() < 1e-12);
        let down = pose.rotate(Point3::new(0.0, 1.0, 0.0));
        assert!((down - Point3::new(0.0, 0.0, -1.0)).norm() < 1e-12);
    }

    #[test]
    fn gripper_encoding() {
        let kp = Keypose::at(Point3::new(0.1, 0.2, 0.3), Gripper::Closed);
        let s = serde_json::to_string(&kp).unwrap();
        assert!(s.contains("\"gripper\":1"));
        let back: Keypose = serde_json::from_str(&s).unwrap();
        assert_eq!(back, kp);
        assert!(serde_json::from_str::<Gripper>("2").is_err());
    }

    #[test]
    fn depth_lookup_rules() {
        let mut d = DepthMap::filled(10, 10, 1.0);
        // bilinear between columns 2 (1.0) and 3 (3.0)
        for row in 0..10 {
            d.set(3, row, 3.0);
        }
        let z = sample_depth(&d, Pixel::new(2.25, 4.0)).unwrap();
        assert!((z - 1.5).abs() < 1e-12);
        // three valid corners: renormalized
        d.set(3, 5, 0.0);
        let z = sample_depth(&d, Pixel::new(2.5, 4.5)).unwrap();
        assert!((z - (0.25 * 1.0 + 0.25 * 3.0 + 0.25 * 1.0) / 0.75).abs() < 1e-12);
        // isolated valid pixel found by nearest fallback
        let mut sparse = DepthMap::filled(20, 20, 0.0);
        sparse.set(10, 13, 0.7);
        assert_eq!(sample_depth(&sparse, Pixel::new(10.2, 9.6)), Some(0.699999988079071));
        assert_eq!(sample_depth(&sparse, Pixel::new(10.0, 7.9)), None);
    }
}
