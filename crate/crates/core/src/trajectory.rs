//! Keypoint-track to canonical-trajectory pipeline.
//!
//! `fill_gaps → reject_outliers → fuse_depth → smooth_polyfit → resample_uniform`
//! turns a 2D pixel track plus an aligned depth map into an 8-waypoint 3D
//! trajectory. [`lift_2d`] performs the inverse direction used at inference
//! time: an 8-pixel trajectory plus an anchor depth and per-waypoint relative
//! offsets becomes a 3D trajectory.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{
    sample_depth, to_thousand, unproject, CameraIntrinsics, DepthMap, Frame, GeometryError, Pixel,
    Point3,
};

/// Number of waypoints in a canonical trajectory.
pub const CANONICAL_LEN: usize = 8;
/// Smoothing polynomial degree used by [`extract`].
pub const SMOOTHING_DEGREE: usize = 2;
/// Outlier threshold at the 256×256 reference resolution, in pixels.
pub const REFERENCE_EPSILON_PX: f64 = 20.0;
/// Default tolerance between an anchor depth and the observed depth, meters.
pub const DEFAULT_ANCHOR_TOLERANCE: f64 = 0.05;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrajectoryError {
    #[error("need at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("frame indices must be strictly increasing (entry {index})")]
    NonIncreasingFrames { index: usize },
    #[error("non-finite coordinate at entry {index}")]
    NonFinite { index: usize },
    #[error("outlier threshold must be positive, got {0}")]
    InvalidEpsilon(f64),
    #[error("no track entry has valid depth")]
    AllDepthInvalid,
    #[error("normal system is singular: {distinct} distinct parameters for degree {degree}")]
    RankDeficient { distinct: usize, degree: usize },
    #[error("invalid weights: {0}")]
    InvalidWeights(String),
    #[error("trajectory has zero arc length")]
    ZeroLength,
    #[error("waypoint count must be at least 2, got {0}")]
    InvalidCount(usize),
    #[error("expected exactly {expected} waypoints, got {got}")]
    WrongLength { expected: usize, got: usize },
    #[error("invalid depth anchor: {0}")]
    InvalidAnchor(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("stage {stage}: {source}")]
    Stage {
        stage: Stage,
        #[source]
        source: Box<TrajectoryError>,
    },
}

impl TrajectoryError {
    /// Innermost error, skipping stage annotations.
    pub fn root(&self) -> &TrajectoryError {
        match self {
            TrajectoryError::Stage { source, .. } => source.root(),
            e => e,
        }
    }
}

// ---------------------------------------------------------------------------
// Waypoint abstraction shared by pixel and metric trajectories
// ---------------------------------------------------------------------------

/// A point type the smoothing and resampling stages can operate on.
pub trait Waypoint: Copy + Send + Sync {
    const DIM: usize;
    fn coord(&self, axis: usize) -> f64;
    fn from_coords(c: &[f64]) -> Self;

    fn distance(&self, other: &Self) -> f64 {
        (0..Self::DIM)
            .map(|i| (self.coord(i) - other.coord(i)).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    fn lerp(&self, other: &Self, t: f64) -> Self {
        let c: Vec<f64> = (0..Self::DIM)
            .map(|i| self.coord(i) + (other.coord(i) - self.coord(i)) * t)
            .collect();
        Self::from_coords(&c)
    }
}

impl Waypoint for Pixel {
    const DIM: usize = 2;
    fn coord(&self, axis: usize) -> f64 {
        [self.u, self.v][axis]
    }
    fn from_coords(c: &[f64]) -> Self {
        Pixel::new(c[0], c[1])
    }
    fn distance(&self, other: &Self) -> f64 {
        Pixel::distance(self, other)
    }
}

impl Waypoint for Point3 {
    const DIM: usize = 3;
    fn coord(&self, axis: usize) -> f64 {
        [self.x, self.y, self.z][axis]
    }
    fn from_coords(c: &[f64]) -> Self {
        Point3::new(c[0], c[1], c[2])
    }
    fn distance(&self, other: &Self) -> f64 {
        Point3::distance(self, other)
    }
    fn lerp(&self, other: &Self, t: f64) -> Self {
        Point3::lerp(self, other, t)
    }
}

// ---------------------------------------------------------------------------
// Domain types
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackEntry {
    pub frame: i64,
    pub pixel: Pixel,
}

/// Raw tracker output: observations at strictly increasing frame indices,
/// possibly with gaps. Serialized as `[[frame, u, v], ...]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<(i64, f64, f64)>", into = "Vec<(i64, f64, f64)>")]
pub struct Track2D {
    entries: Vec<TrackEntry>,
}

impl TryFrom<Vec<(i64, f64, f64)>> for Track2D {
    type Error = TrajectoryError;
    fn try_from(v: Vec<(i64, f64, f64)>) -> Result<Self, Self::Error> {
        Track2D::new(
            v.into_iter()
                .map(|(frame, u, v)| TrackEntry {
                    frame,
                    pixel: Pixel::new(u, v),
                })
                .collect(),
        )
    }
}

impl From<Track2D> for Vec<(i64, f64, f64)> {
    fn from(t: Track2D) -> Self {
        t.entries
            .iter()
            .map(|e| (e.frame, e.pixel.u, e.pixel.v))
            .collect()
    }
}

impl Track2D {
    pub fn new(entries: Vec<TrackEntry>) -> Result<Self, TrajectoryError> {
        for (i, e) in entries.iter().enumerate() {
            if !e.pixel.is_finite() {
                return Err(TrajectoryError::NonFinite { index: i });
            }
            if i > 0 && e.frame <= entries[i - 1].frame {
                return Err(TrajectoryError::NonIncreasingFrames { index: i });
            }
        }
        Ok(Self { entries })
    }

    /// Convenience constructor from `(frame, u, v)` triples.
    pub fn from_triples(triples: &[(i64, f64, f64)]) -> Result<Self, TrajectoryError> {
        Self::try_from(triples.to_vec())
    }

    pub fn entries(&self) -> &[TrackEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn pixels(&self) -> Vec<Pixel> {
        self.entries.iter().map(|e| e.pixel).collect()
    }

    pub fn frames(&self) -> Vec<i64> {
        self.entries.iter().map(|e| e.frame).collect()
    }
}

/// Ordered metric waypoints (at least two).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Point3>", into = "Vec<Point3>")]
pub struct Trajectory3D {
    frame: Frame,
    waypoints: Vec<Point3>,
}

impl TryFrom<Vec<Point3>> for Trajectory3D {
    type Error = TrajectoryError;
    fn try_from(w: Vec<Point3>) -> Result<Self, Self::Error> {
        Trajectory3D::new(Frame::Workspace, w)
    }
}

impl From<Trajectory3D> for Vec<Point3> {
    fn from(t: Trajectory3D) -> Self {
        t.waypoints
    }
}

impl Trajectory3D {
    pub fn new(frame: Frame, waypoints: Vec<Point3>) -> Result<Self, TrajectoryError> {
        if waypoints.len() < 2 {
            return Err(TrajectoryError::TooFewPoints {
                needed: 2,
                got: waypoints.len(),
            });
        }
        if let Some(i) = waypoints.iter().position(|p| !p.is_finite()) {
            return Err(TrajectoryError::NonFinite { index: i });
        }
        Ok(Self { frame, waypoints })
    }

    pub fn frame(&self) -> Frame {
        self.frame
    }

    pub fn with_frame(mut self, frame: Frame) -> Self {
        self.frame = frame;
        self
    }

    pub fn waypoints(&self) -> &[Point3] {
        &self.waypoints
    }

    pub fn len(&self) -> usize {
        self.waypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn first(&self) -> Point3 {
        self.waypoints[0]
    }

    pub fn last(&self) -> Point3 {
        *self.waypoints.last().expect("non-empty by construction")
    }

    pub fn arc_length(&self) -> f64 {
        self.waypoints.windows(2).map(|w| w[0].distance(&w[1])).sum()
    }
}

/// Fixed-length waypoint sequence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "P: Serialize", deserialize = "P: Deserialize<'de>"))]
#[serde(transparent)]
pub struct CanonicalTrajectory<P> {
    points: [P; CANONICAL_LEN],
}

impl<P: Copy> CanonicalTrajectory<P> {
    pub fn new(points: [P; CANONICAL_LEN]) -> Self {
        Self { points }
    }

    pub fn from_slice(points: &[P]) -> Result<Self, TrajectoryError> {
        let arr: [P; CANONICAL_LEN] = points.try_into().map_err(|_| TrajectoryError::WrongLength {
            expected: CANONICAL_LEN,
            got: points.len(),
        })?;
        Ok(Self { points: arr })
    }

    pub fn points(&self) -> &[P; CANONICAL_LEN] {
        &self.points
    }

    pub fn first(&self) -> P {
        self.points[0]
    }

    pub fn last(&self) -> P {
        self.points[CANONICAL_LEN - 1]
    }
}

impl CanonicalTrajectory<Pixel> {
    /// Thousand-scale integer pairs, the layout of `objects.traj_2d`.
    pub fn to_thousand(&self, k: &CameraIntrinsics) -> Result<[[u32; 2]; CANONICAL_LEN], GeometryError> {
        let mut out = [[0u32; 2]; CANONICAL_LEN];
        for (o, p) in out.iter_mut().zip(&self.points) {
            *o = to_thousand(*p, k)?;
        }
        Ok(out)
    }
}

impl CanonicalTrajectory<Point3> {
    pub fn to_trajectory(&self, frame: Frame) -> Trajectory3D {
        Trajectory3D::new(frame, self.points.to_vec()).expect("8 finite waypoints")
    }
}

/// Anchor depth of the first waypoint plus relative depths of the remaining
/// seven (`offsets[i]` applies to waypoint `i + 2`, 1-based).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthAnchor {
    pub d_start: f64,
    pub offsets: [f64; CANONICAL_LEN - 1],
}

impl DepthAnchor {
    pub fn new(d_start: f64, offsets: [f64; CANONICAL_LEN - 1]) -> Result<Self, TrajectoryError> {
        let a = Self { d_start, offsets };
        a.validate()?;
        Ok(a)
    }

    pub fn validate(&self) -> Result<(), TrajectoryError> {
        if !(self.d_start > 0.0 && self.d_start.is_finite()) {
            return Err(TrajectoryError::InvalidAnchor(format!(
                "d_start must be positive, got {}",
                self.d_start
            )));
        }
        for (i, o) in self.offsets.iter().enumerate() {
            let z = self.d_start + o;
            if !(z > 0.0 && z.is_finite()) {
                return Err(TrajectoryError::InvalidAnchor(format!(
                    "waypoint {} has non-positive depth {z}",
                    i + 2
                )));
            }
        }
        Ok(())
    }

    /// Absolute depth of waypoint `i` (0-based).
    pub fn depth(&self, i: usize) -> f64 {
        if i == 0 {
            self.d_start
        } else {
            self.d_start + self.offsets[i - 1]
        }
    }
}

// ---------------------------------------------------------------------------
// Stage 1: gap filling
// ---------------------------------------------------------------------------

/// Linearly interpolates every missing frame between observed entries.
pub fn fill_gaps(t: &Track2D) -> Result<Track2D, TrajectoryError> {
    if t.len() < 2 {
        return Err(TrajectoryError::TooFewPoints { needed: 2, got: t.len() });
    }
    let mut out = Vec::with_capacity((t.entries.last().unwrap().frame - t.entries[0].frame + 1) as usize);
    for pair in t.entries.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        out.push(a);
        let span = (b.frame - a.frame) as f64;
        for f in a.frame + 1..b.frame {
            let s = (f - a.frame) as f64 / span;
            out.push(TrackEntry {
                frame: f,
                pixel: Waypoint::lerp(&a.pixel, &b.pixel, s),
            });
        }
    }
    out.push(*t.entries.last().unwrap());
    Ok(Track2D { entries: out })
}

// ---------------------------------------------------------------------------
// Stage 2: outlier rejection
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct OutlierRejection {
    pub track: Track2D,
    pub removed_frames: Vec<i64>,
    /// First and last entries coincide, so no motion direction exists and the
    /// track was returned unchanged.
    pub degenerate_motion: bool,
}

/// Distance from `p` to the infinite line through `a` and `b`.
pub fn line_distance(p: Pixel, a: Pixel, b: Pixel) -> f64 {
    let (dx, dy) = (b.u - a.u, b.v - a.v);
    ((p.u - a.u) * dy - (p.v - a.v) * dx).abs() / dx.hypot(dy)
}

/// Drops entries farther than `epsilon` pixels from the first-to-last motion
/// line. Endpoints are always kept.
pub fn reject_outliers(t: &Track2D, epsilon: f64) -> Result<OutlierRejection, TrajectoryError> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(TrajectoryError::InvalidEpsilon(epsilon));
    }
    if t.len() < 2 {
        return Err(TrajectoryError::TooFewPoints { needed: 2, got: t.len() });
    }
    let a = t.entries[0].pixel;
    let b = t.entries[t.len() - 1].pixel;
    if a == b {
        return Ok(OutlierRejection {
            track: t.clone(),
            removed_frames: Vec::new(),
            degenerate_motion: true,
        });
    }
    let last = t.len() - 1;
    let mut kept = Vec::with_capacity(t.len());
    let mut removed = Vec::new();
    for (i, e) in t.entries.iter().enumerate() {
        if i == 0 || i == last || line_distance(e.pixel, a, b) <= epsilon {
            kept.push(*e);
        } else {
            removed.push(e.frame);
        }
    }
    Ok(OutlierRejection {
        track: Track2D { entries: kept },
        removed_frames: removed,
        degenerate_motion: false,
    })
}

/// Outlier threshold for an image, scaled from 20 px at 256×256 by diagonal.
pub fn default_epsilon(k: &CameraIntrinsics) -> f64 {
    REFERENCE_EPSILON_PX * k.diagonal() / (256.0 * std::f64::consts::SQRT_2)
}

// ---------------------------------------------------------------------------
// Stage 3: depth fusion
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct DepthFusion {
    pub trajectory: Vec<Point3>,
    pub kept_frames: Vec<i64>,
    pub dropped_frames: Vec<i64>,
}

/// Looks up depth for each track entry and unprojects it into the camera
/// frame; entries without usable depth are dropped.
pub fn fuse_depth(t: &Track2D, d: &DepthMap, k: &CameraIntrinsics) -> Result<DepthFusion, TrajectoryError> {
    if d.dims() != k.dims() {
        return Err(GeometryError::DimensionMismatch {
            expected: k.dims(),
            actual: d.dims(),
        }
        .into());
    }
    let mut out = DepthFusion {
        trajectory: Vec::with_capacity(t.len()),
        kept_frames: Vec::with_capacity(t.len()),
        dropped_frames: Vec::new(),
    };
    for e in &t.entries {
        if !k.contains(&e.pixel) {
            return Err(GeometryError::OutOfBounds {
                u: e.pixel.u,
                v: e.pixel.v,
                width: k.width,
                height: k.height,
            }
            .into());
        }
        match sample_depth(d, e.pixel) {
            Some(z) => {
                out.trajectory.push(unproject(e.pixel, z, k)?);
                out.kept_frames.push(e.frame);
            }
            None => out.dropped_frames.push(e.frame),
        }
    }
    if out.trajectory.is_empty() {
        return Err(TrajectoryError::AllDepthInvalid);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Stage 4: weighted polynomial smoothing
// ---------------------------------------------------------------------------

/// Per-point weights for [`smooth_polyfit`].
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightProfile {
    #[default]
    Uniform,
    /// Weight 2 on the first and last points, 1 elsewhere.
    EndpointEmphasis,
    Custom(Vec<f64>),
}

impl WeightProfile {
    pub fn weights(&self, n: usize) -> Result<Vec<f64>, TrajectoryError> {
        match self {
            WeightProfile::Uniform => Ok(vec![1.0; n]),
            WeightProfile::EndpointEmphasis => Ok((0..n)
                .map(|i| if i == 0 || i + 1 == n { 2.0 } else { 1.0 })
                .collect()),
            WeightProfile::Custom(w) => {
                if w.len() != n {
                    return Err(TrajectoryError::InvalidWeights(format!(
                        "{} weights for {n} points",
                        w.len()
                    )));
                }
                if w.iter().any(|x| !(*x > 0.0 && x.is_finite())) {
                    return Err(TrajectoryError::InvalidWeights("weights must be positive".into()));
                }
                Ok(w.clone())
            }
        }
    }
}

/// Normalized cumulative chord length of each point, in `[0, 1]`. All zeros
/// for a zero-length polyline.
pub fn chordal_parameters<P: Waypoint>(points: &[P]) -> Vec<f64> {
    let mut cum = Vec::with_capacity(points.len());
    let mut acc = 0.0;
    for (i, p) in points.iter().enumerate() {
        if i > 0 {
            acc += points[i - 1].distance(p);
        }
        cum.push(acc);
    }
    if acc > 0.0 {
        let n = cum.len();
        for c in cum.iter_mut() {
            *c /= acc;
        }
        cum[n - 1] = 1.0;
    }
    cum
}

/// Weighted least-squares polynomial fit by Householder QR.
///
/// Solves `min Σ w_i (Σ_j c_j s_i^j − y_i)²` for every right-hand side column
/// of `values` (one column per coordinate axis). Returns coefficients in
/// ascending power order, one vector per column.
pub fn fit_polynomial(
    params: &[f64],
    values: &[Vec<f64>],
    weights: &[f64],
    degree: usize,
) -> Result<Vec<Vec<f64>>, TrajectoryError> {
    let n = params.len();
    let m = degree + 1;
    let distinct = {
        let mut s = params.to_vec();
        s.sort_by(|a, b| a.total_cmp(b));
        s.dedup();
        s.len()
    };
    if distinct < m {
        return Err(TrajectoryError::RankDeficient { distinct, degree });
    }
    if weights.len() != n {
        return Err(TrajectoryError::InvalidWeights(format!("{} weights for {n} points", weights.len())));
    }

    // Column-major weighted Vandermonde matrix and right-hand sides.
    let sw: Vec<f64> = weights.iter().map(|w| w.sqrt()).collect();
    let mut a: Vec<Vec<f64>> = (0..m)
        .map(|j| (0..n).map(|i| sw[i] * params[i].powi(j as i32)).collect())
        .collect();
    let mut rhs: Vec<Vec<f64>> = values
        .iter()
        .map(|col| col.iter().zip(&sw).map(|(y, s)| y * s).collect())
        .collect();

    let scale = a.iter().flatten().fold(0.0f64, |acc, v| acc.max(v.abs()));
    for j in 0..m {
        let norm = a[j][j..].iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm <= 1e-12 * scale {
            return Err(TrajectoryError::RankDeficient { distinct, degree });
        }
        let alpha = if a[j][j] > 0.0 { -norm } else { norm };
        let mut v: Vec<f64> = a[j][j..].to_vec();
        v[0] -= alpha;
        let vnorm2: f64 = v.iter().map(|x| x * x).sum();
        if vnorm2 == 0.0 {
            continue;
        }
        let reflect = |col: &mut [f64]| {
            let dot: f64 = v.iter().zip(col.iter()).map(|(a, b)| a * b).sum();
            let f = 2.0 * dot / vnorm2;
            for (c, vi) in col.iter_mut().zip(&v) {
                *c -= f * vi;
            }
        };
        for col in a.iter_mut().skip(j) {
            reflect(&mut col[j..]);
        }
        for col in rhs.iter_mut() {
            reflect(&mut col[j..]);
        }
    }

    // Back substitution on the upper-triangular R.
    Ok(rhs
        .iter()
        .map(|b| {
            let mut c = vec![0.0; m];
            for i in (0..m).rev() {
                let mut s = b[i];
                for (k, ck) in c.iter().enumerate().take(m).skip(i + 1) {
                    s -= a[k][i] * ck;
                }
                c[i] = s / a[i][i];
            }
            c
        })
        .collect())
}

pub fn eval_polynomial(coeffs: &[f64], s: f64) -> f64 {
    coeffs.iter().rev().fold(0.0, |acc, c| acc * s + c)
}

/// Replaces each coordinate by its weighted least-squares polynomial in the
/// chordal parameter, evaluated at the original parameters.
pub fn smooth_polyfit<P: Waypoint>(
    points: &[P],
    degree: usize,
    weights: &WeightProfile,
) -> Result<Vec<P>, TrajectoryError> {
    if points.len() < degree + 1 {
        return Err(TrajectoryError::TooFewPoints {
            needed: degree + 1,
            got: points.len(),
        });
    }
    let w = weights.weights(points.len())?;
    let s = chordal_parameters(points);
    let cols: Vec<Vec<f64>> = (0..P::DIM)
        .map(|axis| points.iter().map(|p| p.coord(axis)).collect())
        .collect();
    let coeffs = fit_polynomial(&s, &cols, &w, degree)?;
    Ok(s.iter()
        .map(|si| {
            let c: Vec<f64> = coeffs.iter().map(|cf| eval_polynomial(cf, *si)).collect();
            P::from_coords(&c)
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Stage 5: arc-length resampling
// ---------------------------------------------------------------------------

/// `k` points at equal arc-length spacing along the polyline; the first and
/// last input points are copied exactly.
pub fn resample_uniform<P: Waypoint>(points: &[P], k: usize) -> Result<Vec<P>, TrajectoryError> {
    if k < 2 {
        return Err(TrajectoryError::InvalidCount(k));
    }
    if points.len() < 2 {
        return Err(TrajectoryError::TooFewPoints { needed: 2, got: points.len() });
    }
    let mut cum = Vec::with_capacity(points.len());
    cum.push(0.0);
    for w in points.windows(2) {
        let last = *cum.last().unwrap();
        cum.push(last + w[0].distance(&w[1]));
    }
    let total = *cum.last().unwrap();
    if !(total > 0.0) {
        return Err(TrajectoryError::ZeroLength);
    }
    let mut out = Vec::with_capacity(k);
    out.push(points[0]);
    let mut seg = 0;
    for j in 1..k - 1 {
        let target = total * j as f64 / (k - 1) as f64;
        while seg + 2 < cum.len() && cum[seg + 1] <= target {
            seg += 1;
        }
        let len = cum[seg + 1] - cum[seg];
        let t = if len > 0.0 { ((target - cum[seg]) / len).clamp(0.0, 1.0) } else { 0.0 };
        out.push(points[seg].lerp(&points[seg + 1], t));
    }
    out.push(points[points.len() - 1]);
    Ok(out)
}

pub fn resample_canonical<P: Waypoint>(points: &[P]) -> Result<CanonicalTrajectory<P>, TrajectoryError> {
    CanonicalTrajectory::from_slice(&resample_uniform(points, CANONICAL_LEN)?)
}

// ---------------------------------------------------------------------------
// Anchored lifting
// ---------------------------------------------------------------------------

/// Lifts an 8-pixel trajectory to 3D. Waypoint 1 sits at `anchor.d_start`,
/// waypoint `i > 1` at `d_start + offsets[i − 2]` (1-based); the depth map is
/// consulted only to validate the anchor against the first pixel.
pub fn lift_2d(
    t: &CanonicalTrajectory<Pixel>,
    d: &DepthMap,
    k: &CameraIntrinsics,
    anchor: &DepthAnchor,
    tolerance: f64,
) -> Result<Trajectory3D, TrajectoryError> {
    anchor.validate()?;
    let first = t.first();
    let observed = sample_depth(d, first).ok_or_else(|| {
        TrajectoryError::InvalidAnchor(format!("no valid depth near first pixel ({}, {})", first.u, first.v))
    })?;
    if (observed - anchor.d_start).abs() > tolerance {
        return Err(TrajectoryError::InvalidAnchor(format!(
            "d_start {} differs from observed depth {observed:.4} by more than {tolerance}",
            anchor.d_start
        )));
    }
    let waypoints = t
        .points()
        .iter()
        .enumerate()
        .map(|(i, p)| unproject(*p, anchor.depth(i), k))
        .collect::<Result<Vec<_>, _>>()?;
    Trajectory3D::new(Frame::Camera, waypoints)
}

// ---------------------------------------------------------------------------
// End-to-end pipeline
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    FillGaps,
    RejectOutliers,
    FuseDepth,
    Smooth,
    Resample,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stage::FillGaps => "fill_gaps",
            Stage::RejectOutliers => "reject_outliers",
            Stage::FuseDepth => "fuse_depth",
            Stage::Smooth => "smooth",
            Stage::Resample => "resample",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub input_len: usize,
    pub output_len: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

/// Per-stage bookkeeping attached to every extraction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTrace {
    pub epsilon: f64,
    pub degree_requested: usize,
    pub degree_used: usize,
    pub keypoints: usize,
    pub stages: Vec<StageRecord>,
    pub flags: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractParams {
    /// Outlier threshold in pixels; `None` scales the 256×256 default by the
    /// image diagonal.
    pub epsilon: Option<f64>,
    pub degree: usize,
    pub weights: WeightProfile,
    pub keypoints: usize,
}

impl Default for ExtractParams {
    fn default() -> Self {
        Self {
            epsilon: None,
            degree: SMOOTHING_DEGREE,
            weights: WeightProfile::Uniform,
            keypoints: CANONICAL_LEN,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Extraction<P> {
    pub waypoints: Vec<P>,
    pub trace: StageTrace,
}

impl<P: Copy> Extraction<P> {
    pub fn canonical(&self) -> Result<CanonicalTrajectory<P>, TrajectoryError> {
        CanonicalTrajectory::from_slice(&self.waypoints)
    }
}

fn at(stage: Stage) -> impl FnOnce(TrajectoryError) -> TrajectoryError {
    move |e| TrajectoryError::Stage {
        stage,
        source: Box::new(e),
    }
}

struct Front {
    track: Track2D,
    epsilon: f64,
    stages: Vec<StageRecord>,
    flags: Vec<String>,
}

fn front_stages(t: &Track2D, epsilon: f64) -> Result<Front, TrajectoryError> {
    let filled = fill_gaps(t).map_err(at(Stage::FillGaps))?;
    let mut stages = vec![StageRecord {
        stage: Stage::FillGaps,
        input_len: t.len(),
        output_len: filled.len(),
        notes: Vec::new(),
    }];
    let rejected = reject_outliers(&filled, epsilon).map_err(at(Stage::RejectOutliers))?;
    let mut flags = Vec::new();
    let mut notes = Vec::new();
    if rejected.degenerate_motion {
        flags.push("degenerate_motion".to_string());
    }
    if !rejected.removed_frames.is_empty() {
        notes.push(format!("removed frames {:?}", rejected.removed_frames));
    }
    stages.push(StageRecord {
        stage: Stage::RejectOutliers,
        input_len: filled.len(),
        output_len: rejected.track.len(),
        notes,
    });
    Ok(Front {
        track: rejected.track,
        epsilon,
        stages,
        flags,
    })
}

fn back_stages<P: Waypoint>(
    points: Vec<P>,
    params: &ExtractParams,
    mut front: Front,
) -> Result<Extraction<P>, TrajectoryError> {
    if params.keypoints < 2 {
        return Err(at(Stage::Resample)(TrajectoryError::InvalidCount(params.keypoints)));
    }
    let n = points.len();
    if n < 2 {
        return Err(at(Stage::Smooth)(TrajectoryError::TooFewPoints { needed: 2, got: n }));
    }
    let degree = params.degree.min(n - 1);
    let mut notes = Vec::new();
    if degree < params.degree {
        front.flags.push("degree_degraded".to_string());
        notes.push(format!("only {n} points; degree lowered to {degree}"));
    }
    let weights = match &params.weights {
        // Custom weights refer to the fused points; anything else is generated.
        WeightProfile::Custom(w) if w.len() != n => {
            return Err(at(Stage::Smooth)(TrajectoryError::InvalidWeights(format!(
                "{} weights for {n} fused points",
                w.len()
            ))))
        }
        w => w.clone(),
    };
    let smoothed = smooth_polyfit(&points, degree, &weights).map_err(at(Stage::Smooth))?;
    front.stages.push(StageRecord {
        stage: Stage::Smooth,
        input_len: n,
        output_len: smoothed.len(),
        notes,
    });
    let resampled = resample_uniform(&smoothed, params.keypoints).map_err(at(Stage::Resample))?;
    front.stages.push(StageRecord {
        stage: Stage::Resample,
        input_len: smoothed.len(),
        output_len: resampled.len(),
        notes: Vec::new(),
    });
    Ok(Extraction {
        waypoints: resampled,
        trace: StageTrace {
            epsilon: front.epsilon,
            degree_requested: params.degree,
            degree_used: degree,
            keypoints: params.keypoints,
            stages: front.stages,
            flags: front.flags,
        },
    })
}

/// Full 3D pipeline: gap filling, outlier rejection, depth fusion, smoothing
/// and resampling. Output points are in the camera frame.
pub fn extract(
    t: &Track2D,
    d: &DepthMap,
    k: &CameraIntrinsics,
    params: &ExtractParams,
) -> Result<Extraction<Point3>, TrajectoryError> {
    let epsilon = params.epsilon.unwrap_or_else(|| default_epsilon(k));
    let mut front = front_stages(t, epsilon)?;
    let fused = fuse_depth(&front.track, d, k).map_err(at(Stage::FuseDepth))?;
    front.stages.push(StageRecord {
        stage: Stage::FuseDepth,
        input_len: front.track.len(),
        output_len: fused.trajectory.len(),
        notes: if fused.dropped_frames.is_empty() {
            Vec::new()
        } else {
            vec![format!("dropped frames {:?}", fused.dropped_frames)]
        },
    });
    back_stages(fused.trajectory, params, front)
}

/// Image-plane variant of [`extract`]: no depth fusion, smoothing and
/// resampling act on pixel coordinates.
pub fn extract_2d(
    t: &Track2D,
    k: &CameraIntrinsics,
    params: &ExtractParams,
) -> Result<Extraction<Pixel>, TrajectoryError> {
    let epsilon = params.epsilon.unwrap_or_else(|| default_epsilon(k));
    let front = front_stages(t, epsilon)?;
    let pixels = front.track.pixels();
    let mut ex = back_stages(pixels, params, front)?;
    // Smoothing can push a sample marginally outside the frame.
    for p in ex.waypoints.iter_mut() {
        p.u = p.u.clamp(0.0, k.width as f64);
        p.v = p.v.clamp(0.0, k.height as f64);
    }
    Ok(ex)
}
