//! Spatial guidance: tube relevance, smooth masking, cross-modal inpainting
//! and the trajectory overlay.
//!
//! Throughout this module `camera_pose` maps camera coordinates to workspace
//! coordinates (the camera's pose in the workspace).

use std::collections::{BTreeSet, VecDeque};

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::{self, ExecMode};
use crate::geometry::{
    is_valid_depth, project, unproject, CameraIntrinsics, DepthMap, Frame, GeometryError, Mask,
    Pixel, Point3, PointCloud, RigidTransform,
};
use crate::trajectory::{Trajectory3D, TrajectoryError};

pub const DEFAULT_TUBE_RADIUS: f64 = 0.06;
/// Terminal-waypoint search radius for the endpoint fallback, meters.
pub const ENDPOINT_FALLBACK_RADIUS: f64 = 0.10;
/// Weight falloff at the 256×256 reference resolution, pixels.
pub const REFERENCE_SIGMA_PX: f64 = 8.0;
pub const DEFAULT_THRESHOLD: f64 = 0.5;
pub const DEFAULT_ALPHA: f64 = 0.5;
pub const DEFAULT_MAX_ITERATIONS: usize = 400;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
/// Edge-stopping contrast for RGB diffusion, in 8-bit color units.
pub const DEFAULT_EDGE_KAPPA: f64 = 30.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GuidanceError {
    #[error("tube radius must be positive, got {0}")]
    InvalidRadius(f64),
    #[error("falloff sigma must be positive, got {0}")]
    InvalidSigma(f64),
    #[error("threshold must lie in (0, 1], got {0}")]
    InvalidThreshold(f64),
    #[error("alpha must lie in (0, 1], got {0}")]
    InvalidAlpha(f64),
    #[error("instance {0:?} has no pixel with valid depth")]
    EmptyOccupancy(String),
    #[error("dimension mismatch: expected {expected:?}, got {actual:?}")]
    DimensionMismatch { expected: (u32, u32), actual: (u32, u32) },
    #[error("inpainting hole covers the whole image")]
    HoleCoversImage,
    #[error("every trajectory waypoint is behind the camera")]
    AllBehindCamera,
    #[error("relevant id {0:?} is not a scene instance")]
    UnknownInstance(String),
    #[error("duplicate instance id {0:?}")]
    DuplicateInstance(String),
    #[error("stage loop needs at least one stage")]
    NoStages,
    #[error("stage {stage} did not complete within {budget} steps")]
    StageStalled { stage: usize, budget: usize },
    #[error("scene provider: {0}")]
    Provider(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Trajectory(#[from] TrajectoryError),
}

fn check_dims(expected: (u32, u32), actual: (u32, u32)) -> Result<(), GuidanceError> {
    if expected == actual {
        Ok(())
    } else {
        Err(GuidanceError::DimensionMismatch { expected, actual })
    }
}

// ---------------------------------------------------------------------------
// Spatial tube
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TubeShape {
    /// Union of capsules around consecutive waypoint segments.
    #[default]
    CapsuleChain,
    /// Union of balls centered on the waypoints only.
    BallUnion,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpatialTube {
    waypoints: Vec<Point3>,
    radius: f64,
    shape: TubeShape,
}

pub fn point_segment_distance(p: Point3, a: Point3, b: Point3) -> f64 {
    let ab = b - a;
    let len2 = ab.dot(&ab);
    if len2 == 0.0 {
        return p.distance(&a);
    }
    let t = ((p - a).dot(&ab) / len2).clamp(0.0, 1.0);
    p.distance(&(a + ab * t))
}

impl SpatialTube {
    pub fn waypoints(&self) -> &[Point3] {
        &self.waypoints
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn shape(&self) -> TubeShape {
        self.shape
    }

    pub fn terminal(&self) -> Point3 {
        *self.waypoints.last().expect("at least two waypoints")
    }

    /// Distance from `p` to the tube's medial set.
    pub fn distance(&self, p: Point3) -> f64 {
        match self.shape {
            TubeShape::CapsuleChain => self
                .waypoints
                .windows(2)
                .map(|s| point_segment_distance(p, s[0], s[1]))
                .fold(f64::INFINITY, f64::min),
            TubeShape::BallUnion => self
                .waypoints
                .iter()
                .map(|w| p.distance(w))
                .fold(f64::INFINITY, f64::min),
        }
    }

    pub fn contains(&self, p: Point3) -> bool {
        self.distance(p) <= self.radius
    }
}

pub fn build_tube(t: &Trajectory3D, r: f64) -> Result<SpatialTube, GuidanceError> {
    build_tube_with(t, r, TubeShape::CapsuleChain)
}

pub fn build_tube_with(t: &Trajectory3D, r: f64, shape: TubeShape) -> Result<SpatialTube, GuidanceError> {
    if !(r > 0.0 && r.is_finite()) {
        return Err(GuidanceError::InvalidRadius(r));
    }
    Ok(SpatialTube {
        waypoints: t.waypoints().to_vec(),
        radius: r,
        shape,
    })
}

// ---------------------------------------------------------------------------
// Instances and occupancy
// ---------------------------------------------------------------------------

/// Externally segmented instance.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceMask {
    pub id: String,
    pub mask: Mask,
    pub source: String,
}

impl InstanceMask {
    pub fn new(id: impl Into<String>, mask: Mask) -> Self {
        Self {
            id: id.into(),
            mask,
            source: "external".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectOccupancy {
    pub id: String,
    pub points: PointCloud,
}

impl ObjectOccupancy {
    pub fn min_distance(&self, p: Point3) -> f64 {
        self.points
            .points
            .iter()
            .map(|q| q.distance(&p))
            .fold(f64::INFINITY, f64::min)
    }
}

/// Workspace-frame points of every valid-depth pixel inside the mask.
pub fn occupancy(
    m: &InstanceMask,
    d: &DepthMap,
    k: &CameraIntrinsics,
    camera_pose: &RigidTransform,
) -> Result<ObjectOccupancy, GuidanceError> {
    check_dims(k.dims(), m.mask.dims())?;
    check_dims(k.dims(), d.dims())?;
    let mut points = Vec::new();
    for row in 0..d.height() {
        for col in 0..d.width() {
            let z = d.raw(col, row) as f64;
            if m.mask.get(col, row) && is_valid_depth(z) {
                let c = unproject(Pixel::new(col as f64, row as f64), z, k)?;
                points.push(camera_pose.apply(c));
            }
        }
    }
    if points.is_empty() {
        return Err(GuidanceError::EmptyOccupancy(m.id.clone()));
    }
    Ok(ObjectOccupancy {
        id: m.id.clone(),
        points: PointCloud {
            frame: Frame::Workspace,
            points,
            colors: None,
        },
    })
}

pub fn relevance(o: &ObjectOccupancy, tube: &SpatialTube) -> bool {
    o.points.points.iter().any(|p| tube.contains(*p))
}

/// Id of the occupancy nearest to `terminal` among those within `radius`;
/// ties go to the lexicographically smallest id.
pub fn endpoint_fallback(occupancies: &[ObjectOccupancy], terminal: Point3, radius: f64) -> Option<String> {
    occupancies
        .iter()
        .map(|o| (o.min_distance(terminal), &o.id))
        .filter(|(d, _)| *d <= radius)
        .min_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(b.1)))
        .map(|(_, id)| id.clone())
}

// ---------------------------------------------------------------------------
// Distance transform and weight maps
// ---------------------------------------------------------------------------

/// Per-pixel relevance weight in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMap {
    width: u32,
    height: u32,
    values: Vec<f32>,
    /// No relevant instance existed, so everything is kept.
    pub no_relevant: bool,
}

impl WeightMap {
    pub fn new(width: u32, height: u32, values: Vec<f32>) -> Result<Self, GuidanceError> {
        let n = width as usize * height as usize;
        if values.len() != n {
            return Err(GeometryError::BufferLength {
                expected: n,
                actual: values.len(),
            }
            .into());
        }
        Ok(Self {
            width,
            height,
            values,
            no_relevant: false,
        })
    }

    pub fn ones(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            values: vec![1.0; width as usize * height as usize],
            no_relevant: false,
        }
    }

    pub fn dims(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn get(&self, col: u32, row: u32) -> f32 {
        self.values[row as usize * self.width as usize + col as usize]
    }
}

/// Squared 1D distance transform of sampled function `f` (lower envelope of
/// parabolas); entries equal to `INFINITY` are not sites.
fn edt_1d(f: &[f64], out: &mut [f64]) {
    let n = f.len();
    let mut v = Vec::with_capacity(n);
    let mut z: Vec<f64> = Vec::with_capacity(n + 1);
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            match v.last() {
                None => {
                    v.push(q);
                    z.clear();
                    z.push(f64::NEG_INFINITY);
                    z.push(f64::INFINITY);
                    break;
                }
                Some(&p) => {
                    let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
                    if s <= z[v.len() - 1] {
                        v.pop();
                        z.pop();
                        continue;
                    }
                    *z.last_mut().unwrap() = s;
                    z.push(f64::INFINITY);
                    v.push(q);
                    break;
                }
            }
        }
    }
    if v.is_empty() {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut j = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[j + 1] < q as f64 {
            j += 1;
        }
        let p = v[j];
        let d = q as f64 - p as f64;
        *o = d * d + f[p];
    }
}

fn transpose(src: &[f64], width: usize, height: usize) -> Vec<f64> {
    let mut dst = vec![0.0; src.len()];
    for r in 0..height {
        for c in 0..width {
            dst[c * height + r] = src[r * width + c];
        }
    }
    dst
}

/// Exact Euclidean distance from every pixel to the nearest `true` pixel of
/// `m` (0 inside, `INFINITY` everywhere if `m` is empty).
pub fn distance_transform(m: &Mask, mode: ExecMode) -> Vec<f64> {
    let (w, h) = (m.width() as usize, m.height() as usize);
    let mut buf: Vec<f64> = m
        .data()
        .iter()
        .map(|&b| if b { 0.0 } else { f64::INFINITY })
        .collect();
    // columns, via the transpose so each column is a contiguous row
    let mut t = transpose(&buf, w, h);
    exec::for_each_row(mode, &mut t, h, |_, col| {
        let f = col.to_vec();
        edt_1d(&f, col);
    });
    buf = transpose(&t, h, w);
    exec::for_each_row(mode, &mut buf, w, |_, row| {
        let f = row.to_vec();
        edt_1d(&f, row);
    });
    buf.iter().map(|d2| d2.sqrt()).collect()
}

/// Falloff width for an image, scaled from 8 px at 256×256 by diagonal.
pub fn default_sigma(k: &CameraIntrinsics) -> f64 {
    REFERENCE_SIGMA_PX * k.diagonal() / (256.0 * std::f64::consts::SQRT_2)
}

fn union_of<'a>(dims: (u32, u32), masks: impl IntoIterator<Item = &'a Mask>) -> Result<Mask, GuidanceError> {
    let mut u = Mask::empty(dims.0, dims.1);
    for m in masks {
        check_dims(dims, m.dims())?;
        u.union_with(m);
    }
    Ok(u)
}

/// 1 on relevant pixels, `exp(−d²/2σ²)` elsewhere, `d` being the Euclidean
/// distance to the nearest relevant pixel. With no relevant instance the map
/// is all ones and `no_relevant` is set.
pub fn smooth_weight_map(
    relevant: &[&InstanceMask],
    dims: (u32, u32),
    sigma: f64,
    mode: ExecMode,
) -> Result<WeightMap, GuidanceError> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(GuidanceError::InvalidSigma(sigma));
    }
    let u = union_of(dims, relevant.iter().map(|m| &m.mask))?;
    if u.count() == 0 {
        let mut w = WeightMap::ones(dims.0, dims.1);
        w.no_relevant = true;
        return Ok(w);
    }
    let dt = distance_transform(&u, mode);
    let s2 = 2.0 * sigma * sigma;
    let values = dt
        .iter()
        .map(|d| if *d == 0.0 { 1.0 } else { (-(d * d) / s2).exp() as f32 })
        .collect();
    WeightMap::new(dims.0, dims.1, values)
}

/// Weight map that drives inpainting: the smooth falloff inside irrelevant
/// instances, 1 on relevant instances and on unsegmented background.
pub fn masking_weight_map(
    all: &[InstanceMask],
    relevant_ids: &BTreeSet<String>,
    dims: (u32, u32),
    sigma: f64,
    mode: ExecMode,
) -> Result<WeightMap, GuidanceError> {
    let relevant: Vec<&InstanceMask> = all.iter().filter(|m| relevant_ids.contains(&m.id)).collect();
    let smooth = smooth_weight_map(&relevant, dims, sigma, mode)?;
    if smooth.no_relevant {
        return Ok(smooth);
    }
    let rel = union_of(dims, relevant.iter().map(|m| &m.mask))?;
    let irr = union_of(dims, all.iter().filter(|m| !relevant_ids.contains(&m.id)).map(|m| &m.mask))?;
    let values = smooth
        .values
        .iter()
        .zip(irr.data().iter().zip(rel.data()))
        .map(|(w, (&i, &r))| if i && !r { *w } else { 1.0 })
        .collect();
    WeightMap::new(dims.0, dims.1, values)
}

// ---------------------------------------------------------------------------
// Inpainting
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InpaintParams {
    pub threshold: f64,
    pub max_iterations: usize,
    pub tolerance: f64,
    /// Edge-stopping contrast for RGB; `None` gives plain harmonic diffusion.
    pub rgb_kappa: Option<f64>,
    /// Edge-stopping contrast for depth, in meters.
    pub depth_kappa: Option<f64>,
}

impl Default for InpaintParams {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_THRESHOLD,
            max_iterations: DEFAULT_MAX_ITERATIONS,
            tolerance: DEFAULT_TOLERANCE,
            rgb_kappa: Some(DEFAULT_EDGE_KAPPA),
            depth_kappa: None,
        }
    }
}

/// Fills every `fill` pixel from the `known` pixels of its 4-connected
/// component by Jacobi relaxation of the (optionally edge-stopped) Laplace
/// equation. Pixels that are neither known nor to be filled act as barriers.
/// `values` holds `channels` (at most 4) interleaved components per pixel.
/// Known pixels come back unchanged; fill pixels whose component has no
/// known pixel, and barrier pixels, come back as `None`.
///
/// Each update is a convex combination of neighbor values, so filled values
/// stay within the range of the sources.
#[allow(clippy::too_many_arguments)]
pub fn diffuse(
    values: &[f64],
    known: &[bool],
    fill: &[bool],
    width: usize,
    height: usize,
    channels: usize,
    kappa: Option<f64>,
    max_iterations: usize,
    tolerance: f64,
    mode: ExecMode,
) -> Vec<Option<Vec<f64>>> {
    assert!((1..=4).contains(&channels), "1 to 4 channels supported");
    let n = width * height;
    let mut cur = vec![0.0; n * channels];
    let mut assigned = known.to_vec();
    for (i, &k) in known.iter().enumerate() {
        if k {
            cur[i * channels..(i + 1) * channels].copy_from_slice(&values[i * channels..(i + 1) * channels]);
        }
    }

    let neighbors = |i: usize| {
        let (r, c) = (i / width, i % width);
        let mut out = [usize::MAX; 4];
        if c > 0 {
            out[0] = i - 1;
        }
        if c + 1 < width {
            out[1] = i + 1;
        }
        if r > 0 {
            out[2] = i - width;
        }
        if r + 1 < height {
            out[3] = i + width;
        }
        out
    };

    // Onion-peel initialization: breadth-first from the sources, each new
    // pixel taking the mean of its already assigned neighbors.
    let mut queue: VecDeque<usize> = VecDeque::new();
    let mut queued = known.to_vec();
    for (i, &k) in known.iter().enumerate() {
        if k {
            for nb in neighbors(i) {
                if nb != usize::MAX && fill[nb] && !queued[nb] {
                    queued[nb] = true;
                    queue.push_back(nb);
                }
            }
        }
    }
    while let Some(i) = queue.pop_front() {
        let mut acc = vec![0.0; channels];
        let mut cnt = 0.0;
        for nb in neighbors(i) {
            if nb != usize::MAX && assigned[nb] {
                for ch in 0..channels {
                    acc[ch] += cur[nb * channels + ch];
                }
                cnt += 1.0;
            }
        }
        for ch in 0..channels {
            cur[i * channels + ch] = acc[ch] / cnt;
        }
        assigned[i] = true;
        for nb in neighbors(i) {
            if nb != usize::MAX && fill[nb] && !queued[nb] {
                queued[nb] = true;
                queue.push_back(nb);
            }
        }
    }

    let free: Vec<usize> = (0..n).filter(|&i| assigned[i] && !known[i]).collect();
    for _ in 0..if free.is_empty() { 0 } else { max_iterations } {
        let prev = &cur;
        let updates = exec::map_slice(mode, &free, |&i| {
            let pi = &prev[i * channels..(i + 1) * channels];
            let mut acc = [0.0f64; 4];
            let mut wsum = 0.0;
            for nb in neighbors(i) {
                if nb == usize::MAX || !assigned[nb] {
                    continue;
                }
                let pn = &prev[nb * channels..(nb + 1) * channels];
                let coef = match kappa {
                    Some(kap) => {
                        let g2: f64 = pi.iter().zip(pn).map(|(a, b)| (a - b) * (a - b)).sum();
                        1.0 / (1.0 + g2 / (kap * kap))
                    }
                    None => 1.0,
                };
                for ch in 0..channels {
                    acc[ch] += coef * pn[ch];
                }
                wsum += coef;
            }
            acc.map(|a| a / wsum)
        });
        let mut delta = 0.0f64;
        for (&i, u) in free.iter().zip(&updates) {
            for ch in 0..channels {
                let slot = &mut cur[i * channels + ch];
                delta = delta.max((u[ch] - *slot).abs());
                *slot = u[ch];
            }
        }
        if delta < tolerance {
            break;
        }
    }

    (0..n)
        .map(|i| assigned[i].then(|| cur[i * channels..(i + 1) * channels].to_vec()))
        .collect()
}

/// Replaces pixels with weight below the threshold by diffusion from the
/// kept pixels, blended as `w·original + (1 − w)·diffused`. Kept pixels are
/// copied unchanged. Depth diffuses only from kept pixels with valid depth;
/// hole pixels unreachable from any such source become invalid (0).
pub fn inpaint(
    rgb: &RgbImage,
    depth: &DepthMap,
    w: &WeightMap,
    params: &InpaintParams,
    mode: ExecMode,
) -> Result<(RgbImage, DepthMap), GuidanceError> {
    if !(params.threshold > 0.0 && params.threshold <= 1.0) {
        return Err(GuidanceError::InvalidThreshold(params.threshold));
    }
    let dims = rgb.dimensions();
    check_dims(dims, depth.dims())?;
    check_dims(dims, w.dims())?;
    let (width, height) = (dims.0 as usize, dims.1 as usize);
    let hole: Vec<bool> = w.values.iter().map(|v| (*v as f64) < params.threshold).collect();
    if hole.iter().all(|h| *h) {
        return Err(GuidanceError::HoleCoversImage);
    }
    if !hole.iter().any(|h| *h) {
        return Ok((rgb.clone(), depth.clone()));
    }

    let kept: Vec<bool> = hole.iter().map(|h| !h).collect();
    let colors: Vec<f64> = rgb.as_raw().iter().map(|v| *v as f64).collect();
    let filled_rgb = diffuse(
        &colors,
        &kept,
        &hole,
        width,
        height,
        3,
        params.rgb_kappa,
        params.max_iterations,
        params.tolerance,
        mode,
    );

    let zs: Vec<f64> = depth.values().iter().map(|v| *v as f64).collect();
    let depth_known: Vec<bool> = kept.iter().zip(&zs).map(|(k, z)| *k && is_valid_depth(*z)).collect();
    let filled_depth = diffuse(
        &zs,
        &depth_known,
        &hole,
        width,
        height,
        1,
        params.depth_kappa,
        params.max_iterations,
        params.tolerance,
        mode,
    );

    let mut out_rgb = rgb.clone();
    let mut out_depth = depth.clone();
    for i in 0..width * height {
        if !hole[i] {
            continue;
        }
        let wi = w.values[i] as f64;
        let (c, r) = ((i % width) as u32, (i / width) as u32);
        // every hole pixel reaches at least one kept pixel in RGB unless the
        // whole image is a hole, which was rejected above
        let diff = filled_rgb[i].as_ref().expect("kept pixel exists");
        let px = out_rgb.get_pixel_mut(c, r);
        for ch in 0..3 {
            let v = wi * colors[i * 3 + ch] + (1.0 - wi) * diff[ch];
            px.0[ch] = v.round().clamp(0.0, 255.0) as u8;
        }
        let z = match &filled_depth[i] {
            Some(dz) if is_valid_depth(zs[i]) => wi * zs[i] + (1.0 - wi) * dz[0],
            Some(dz) => dz[0],
            None => 0.0,
        };
        out_depth.set(c, r, z as f32);
    }
    Ok((out_rgb, out_depth))
}

// ---------------------------------------------------------------------------
// Overlay
// ---------------------------------------------------------------------------

/// Red (nearest) to blue (farthest) for a normalized depth `s ∈ [0, 1]`.
pub fn depth_color(s: f64) -> [u8; 3] {
    let s = s.clamp(0.0, 1.0);
    [(255.0 * (1.0 - s)).round() as u8, 0, (255.0 * s).round() as u8]
}

/// Liang–Barsky clip of segment `a→b` to `[lo, hi]²`-style box; returns the
/// parameter interval kept.
fn clip_segment(a: Pixel, b: Pixel, w: f64, h: f64) -> Option<(f64, f64)> {
    let (dx, dy) = (b.u - a.u, b.v - a.v);
    let mut t0: f64 = 0.0;
    let mut t1: f64 = 1.0;
    for (p, q) in [(-dx, a.u + 0.5), (dx, w - 0.5 - a.u), (-dy, a.v + 0.5), (dy, h - 0.5 - a.v)] {
        if p == 0.0 {
            if q < 0.0 {
                return None;
            }
        } else {
            let r = q / p;
            if p < 0.0 {
                t0 = t0.max(r);
            } else {
                t1 = t1.min(r);
            }
        }
    }
    (t0 <= t1).then_some((t0, t1))
}

/// Pixels covered by the projected trajectory polyline and their colors,
/// row-major and without duplicates (later segments win).
pub fn overlay_pixels(
    dims: (u32, u32),
    t: &Trajectory3D,
    k: &CameraIntrinsics,
    camera_pose: &RigidTransform,
) -> Result<Vec<(u32, u32, [u8; 3])>, GuidanceError> {
    let to_camera = camera_pose.inverse();
    let projected: Vec<Option<(Pixel, f64)>> = t
        .waypoints()
        .iter()
        .map(|p| {
            let z = to_camera.apply(*p).z;
            project(*p, k, &to_camera).ok().map(|px| (px, z))
        })
        .collect();
    let depths: Vec<f64> = projected.iter().flatten().map(|(_, z)| *z).collect();
    if depths.is_empty() {
        return Err(GuidanceError::AllBehindCamera);
    }
    let lo = depths.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = depths.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let norm = |z: f64| if hi > lo { (z - lo) / (hi - lo) } else { 0.0 };

    let (w, h) = dims;
    let mut canvas: Vec<Option<[u8; 3]>> = vec![None; w as usize * h as usize];
    let mut plot = |u: f64, v: f64, s: f64| {
        let (c, r) = (u.round(), v.round());
        if c >= 0.0 && r >= 0.0 && c < w as f64 && r < h as f64 {
            canvas[r as usize * w as usize + c as usize] = Some(depth_color(s));
        }
    };

    for (i, p) in projected.iter().enumerate() {
        let Some((a, za)) = p else { continue };
        let next = projected.get(i + 1).copied().flatten();
        let isolated = next.is_none() && (i == 0 || projected[i - 1].is_none());
        if isolated {
            plot(a.u, a.v, norm(*za));
        }
        let Some((b, zb)) = next else { continue };
        let Some((t0, t1)) = clip_segment(*a, b, w as f64, h as f64) else {
            continue;
        };
        let (sa, sb) = (norm(*za), norm(zb));
        let (du, dv) = (b.u - a.u, b.v - a.v);
        let span = du.abs().max(dv.abs()) * (t1 - t0);
        let steps = span.ceil().max(1.0) as usize;
        for j in 0..=steps {
            let t = t0 + (t1 - t0) * j as f64 / steps as f64;
            plot(a.u + du * t, a.v + dv * t, sa + (sb - sa) * t);
        }
    }

    Ok(canvas
        .iter()
        .enumerate()
        .filter_map(|(i, c)| c.map(|c| ((i % w as usize) as u32, (i / w as usize) as u32, c)))
        .collect())
}

/// Alpha-composites the depth-colored trajectory polyline onto `rgb`.
pub fn render_overlay(
    rgb: &RgbImage,
    t: &Trajectory3D,
    k: &CameraIntrinsics,
    camera_pose: &RigidTransform,
    alpha: f64,
) -> Result<RgbImage, GuidanceError> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(GuidanceError::InvalidAlpha(alpha));
    }
    check_dims(k.dims(), rgb.dimensions())?;
    let mut out = rgb.clone();
    for (c, r, color) in overlay_pixels(rgb.dimensions(), t, k, camera_pose)? {
        let px = out.get_pixel_mut(c, r);
        let blended: [u8; 3] = std::array::from_fn(|ch| {
            (alpha * color[ch] as f64 + (1.0 - alpha) * px.0[ch] as f64).round() as u8
        });
        *px = Rgb(blended);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

/// High-level guidance: a workspace-frame trajectory, the ids of the
/// instances to keep, the current sub-instruction and the step it was issued.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidancePackage {
    pub trajectory: Trajectory3D,
    pub relevant_ids: Vec<String>,
    pub sub_instruction: String,
    pub issue_step: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedObservation {
    pub rgb: RgbImage,
    pub depth: DepthMap,
    pub weights: WeightMap,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentMode {
    /// Masking, inpainting and the trajectory overlay.
    #[default]
    Finetuned,
    /// Masking and inpainting only, for policies never trained on overlays.
    Frozen,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    pub tube_radius: f64,
    pub tube_shape: TubeShape,
    pub fallback_radius: f64,
    /// Falloff in pixels; `None` scales the 256×256 default by the diagonal.
    pub sigma: Option<f64>,
    pub alpha: f64,
    pub inpaint: InpaintParams,
}

impl Default for AugmentParams {
    fn default() -> Self {
        Self {
            tube_radius: DEFAULT_TUBE_RADIUS,
            tube_shape: TubeShape::CapsuleChain,
            fallback_radius: ENDPOINT_FALLBACK_RADIUS,
            sigma: None,
            alpha: DEFAULT_ALPHA,
            inpaint: InpaintParams::default(),
        }
    }
}

/// Why each kept instance was selected.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RelevanceReport {
    pub tube: Vec<String>,
    pub requested: Vec<String>,
    pub fallback: Option<String>,
    pub empty: Vec<String>,
    pub relevant: Vec<String>,
}

/// Instances relevant to a trajectory: those intersecting the tube, those
/// named by the package, plus the endpoint fallback when nothing relevant
/// lies near the terminal waypoint.
pub fn select_relevant(
    depth: &DepthMap,
    masks: &[InstanceMask],
    trajectory: &Trajectory3D,
    requested: &[String],
    k: &CameraIntrinsics,
    camera_pose: &RigidTransform,
    params: &AugmentParams,
) -> Result<RelevanceReport, GuidanceError> {
    let mut ids = BTreeSet::new();
    for m in masks {
        if !ids.insert(m.id.clone()) {
            return Err(GuidanceError::DuplicateInstance(m.id.clone()));
        }
    }
    if let Some(bad) = requested.iter().find(|id| !ids.contains(*id)) {
        return Err(GuidanceError::UnknownInstance(bad.clone()));
    }
    let tube = build_tube_with(trajectory, params.tube_radius, params.tube_shape)?;
    let mut report = RelevanceReport::default();
    let mut occs = Vec::new();
    for m in masks {
        match occupancy(m, depth, k, camera_pose) {
            Ok(o) => occs.push(o),
            Err(GuidanceError::EmptyOccupancy(id)) => report.empty.push(id),
            Err(e) => return Err(e),
        }
    }
    let mut relevant: BTreeSet<String> = requested.iter().cloned().collect();
    for o in &occs {
        if relevance(o, &tube) {
            report.tube.push(o.id.clone());
            relevant.insert(o.id.clone());
        }
    }
    report.requested = requested.to_vec();
    let terminal = tube.terminal();
    let near_terminal = occs
        .iter()
        .any(|o| relevant.contains(&o.id) && o.min_distance(terminal) <= params.fallback_radius);
    if !near_terminal {
        let candidates: Vec<ObjectOccupancy> = occs.into_iter().filter(|o| !relevant.contains(&o.id)).collect();
        report.fallback = endpoint_fallback(&candidates, terminal, params.fallback_radius);
        if let Some(id) = &report.fallback {
            relevant.insert(id.clone());
        }
    }
    report.relevant = relevant.into_iter().collect();
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Augmented {
    pub observation: AugmentedObservation,
    pub report: RelevanceReport,
}

/// Turns a raw RGB-D observation plus guidance into the policy's input.
#[allow(clippy::too_many_arguments)]
pub fn augment(
    rgb: &RgbImage,
    depth: &DepthMap,
    masks: &[InstanceMask],
    z: &GuidancePackage,
    mode: AugmentMode,
    k: &CameraIntrinsics,
    camera_pose: &RigidTransform,
    params: &AugmentParams,
    exec_mode: ExecMode,
) -> Result<Augmented, GuidanceError> {
    check_dims(k.dims(), rgb.dimensions())?;
    check_dims(k.dims(), depth.dims())?;
    if !(params.alpha > 0.0 && params.alpha <= 1.0) {
        return Err(GuidanceError::InvalidAlpha(params.alpha));
    }
    let report = select_relevant(depth, masks, &z.trajectory, &z.relevant_ids, k, camera_pose, params)?;
    let sigma = params.sigma.unwrap_or_else(|| default_sigma(k));
    let relevant: BTreeSet<String> = report.relevant.iter().cloned().collect();
    let weights = masking_weight_map(masks, &relevant, k.dims(), sigma, exec_mode)?;
    let (inpainted, depth_out) = inpaint(rgb, depth, &weights, &params.inpaint, exec_mode)?;
    let rgb_out = match mode {
        AugmentMode::Frozen => inpainted,
        AugmentMode::Finetuned => render_overlay(&inpainted, &z.trajectory, k, camera_pose, params.alpha)?,
    };
    Ok(Augmented {
        observation: AugmentedObservation {
            rgb: rgb_out,
            depth: depth_out,
            weights,
        },
        report,
    })
}

// ---------------------------------------------------------------------------
// Stage-wise masking loop
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct StageSpec {
    pub instruction: String,
    pub reference: Trajectory3D,
}

/// One observation of the scene.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneObservation {
    pub rgb: RgbImage,
    pub depth: DepthMap,
    pub masks: Vec<InstanceMask>,
    pub intrinsics: CameraIntrinsics,
    pub camera_pose: RigidTransform,
}

pub trait SceneProvider {
    fn observe(&mut self, stage: usize, step: usize) -> Result<SceneObservation, String>;
    /// Called after each emission; true ends the stage.
    fn stage_complete(&mut self, stage: usize, step: usize, emitted: &AugmentedObservation) -> bool;
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageEmission {
    pub stage: usize,
    pub step: usize,
    pub focus_ids: Vec<String>,
    pub observation: AugmentedObservation,
}

/// Runs the stages in order. Within a stage, instances intersecting the
/// stage's reference tube are kept and every other instance is inpainted;
/// observations are emitted until the provider reports completion.
pub fn stage_masking_loop(
    stages: &[StageSpec],
    provider: &mut dyn SceneProvider,
    mode: AugmentMode,
    params: &AugmentParams,
    stage_budget: usize,
    exec_mode: ExecMode,
) -> Result<Vec<StageEmission>, GuidanceError> {
    if stages.is_empty() {
        return Err(GuidanceError::NoStages);
    }
    let mut out = Vec::new();
    let mut step = 0;
    for (si, stage) in stages.iter().enumerate() {
        let mut done = false;
        for _ in 0..stage_budget {
            let obs = provider.observe(si, step).map_err(GuidanceError::Provider)?;
            let package = GuidancePackage {
                trajectory: stage.reference.clone(),
                relevant_ids: Vec::new(),
                sub_instruction: stage.instruction.clone(),
                issue_step: step as u64,
            };
            let aug = augment(
                &obs.rgb,
                &obs.depth,
                &obs.masks,
                &package,
                mode,
                &obs.intrinsics,
                &obs.camera_pose,
                params,
                exec_mode,
            )?;
            let complete = provider.stage_complete(si, step, &aug.observation);
            out.push(StageEmission {
                stage: si,
                step,
                focus_ids: aug.report.relevant,
                observation: aug.observation,
            });
            step += 1;
            if complete {
                done = true;
                break;
            }
        }
        if !done {
            return Err(GuidanceError::StageStalled {
                stage: si,
                budget: stage_budget,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn traj(points: &[[f64; 3]]) -> Trajectory3D {
        Trajectory3D::new(Frame::Workspace, points.iter().map(|p| Point3::from(*p)).collect()).unwrap()
    }

    #[test]
    fn tube_boundaries() {
        let t = traj(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [1.0, 1.0, 0.0]]);
        let tube = build_tube(&t, 0.06).unwrap();
        for w in t.waypoints() {
            assert_eq!(tube.distance(*w), 0.0);
        }
        assert!(tube.contains(Point3::new(0.5, 0.06, 0.0)));
        assert!(!tube.contains(Point3::new(0.5, 0.06 + 1e-6, 0.0)));
        let balls = build_tube_with(&t, 0.06, TubeShape::BallUnion).unwrap();
        assert!(!balls.contains(Point3::new(0.5, 0.0, 0.0)));
        assert!(build_tube(&t, 0.0).is_err());
    }

    #[test]
    fn occupancy_counts_valid_pixels() {
        let k = CameraIntrinsics::centered(50.0, 10, 10).unwrap();
        let d = DepthMap::filled(10, 10, 1.0);
        let m = InstanceMask::new("a", Mask::from_fn(10, 10, |c, r| r == 2 && c < 5));
        let o = occupancy(&m, &d, &k, &RigidTransform::identity()).unwrap();
        assert_eq!(o.points.len(), 5);
        let blank = DepthMap::filled(10, 10, 0.0);
        assert_eq!(
            occupancy(&m, &blank, &k, &RigidTransform::identity()),
            Err(GuidanceError::EmptyOccupancy("a".into()))
        );
    }

    #[test]
    fn fallback_picks_nearest_within_radius() {
        let occ = |id: &str, p: [f64; 3]| ObjectOccupancy {
            id: id.into(),
            points: PointCloud {
                frame: Frame::Workspace,
                points: vec![Point3::from(p)],
                colors: None,
            },
        };
        let objs = [occ("far", [0.2, 0.0, 0.0]), occ("near", [0.05, 0.0, 0.0])];
        assert_eq!(endpoint_fallback(&objs, Point3::ORIGIN, 0.10), Some("near".into()));
        let objs = [occ("x", [0.2, 0.0, 0.0]), occ("y", [0.0, 0.11, 0.0])];
        assert_eq!(endpoint_fallback(&objs, Point3::ORIGIN, 0.10), None);
        let tie = [occ("b", [0.05, 0.0, 0.0]), occ("a", [0.0, 0.05, 0.0])];
        assert_eq!(endpoint_fallback(&tie, Point3::ORIGIN, 0.10), Some("a".into()));
    }

    #[test]
    fn distance_transform_matches_brute_force() {
        let m = Mask::from_fn(23, 17, |c, r| (c * 7 + r * 3) % 41 == 0);
        let dt = distance_transform(&m, ExecMode::Sequential);
        let sites: Vec<(f64, f64)> = (0..17)
            .flat_map(|r| (0..23).map(move |c| (c, r)))
            .filter(|(c, r)| m.get(*c, *r))
            .map(|(c, r)| (c as f64, r as f64))
            .collect();
        for r in 0..17 {
            for c in 0..23 {
                let want = sites
                    .iter()
                    .map(|(x, y)| (x - c as f64).hypot(y - r as f64))
                    .fold(f64::INFINITY, f64::min);
                assert!((dt[r * 23 + c] - want).abs() < 1e-9);
            }
        }
        assert!(distance_transform(&Mask::empty(4, 4), ExecMode::Parallel)
            .iter()
            .all(|d| d.is_infinite()));
    }

    #[test]
    fn weight_map_closed_form() {
        let m = InstanceMask::new("a", Mask::from_fn(40, 1, |c, _| c == 0));
        let w = smooth_weight_map(&[&m], (40, 1), 8.0, ExecMode::Sequential).unwrap();
        assert_eq!(w.get(0, 0), 1.0);
        assert!((w.get(8, 0) as f64 - (-0.5f64).exp()).abs() < 1e-6);
        let none = smooth_weight_map(&[], (5, 5), 8.0, ExecMode::Sequential).unwrap();
        assert!(none.no_relevant && none.values().iter().all(|v| *v == 1.0));
        assert!(smooth_weight_map(&[], (5, 5), 0.0, ExecMode::Sequential).is_err());
    }

    #[test]
    fn inpaint_identity_and_constant() {
        let rgb = RgbImage::from_fn(12, 9, |c, r| Rgb([c as u8 * 10, r as u8 * 20, 7]));
        let d = DepthMap::from_fn(12, 9, |c, _| 0.5 + c as f32 * 0.01);
        let ones = WeightMap::ones(12, 9);
        let (r2, d2) = inpaint(&rgb, &d, &ones, &InpaintParams::default(), ExecMode::Sequential).unwrap();
        assert_eq!(r2, rgb);
        assert_eq!(d2, d);

        let flat = RgbImage::from_pixel(12, 9, Rgb([40, 90, 200]));
        let flat_d = DepthMap::filled(12, 9, 0.7);
        let w = WeightMap::new(12, 9, (0..108).map(|i| if (30..60).contains(&i) { 0.0 } else { 1.0 }).collect()).unwrap();
        let (r3, d3) = inpaint(&flat, &flat_d, &w, &InpaintParams::default(), ExecMode::Sequential).unwrap();
        assert_eq!(r3, flat);
        assert!(d3.values().iter().all(|z| (*z - 0.7).abs() < 1e-6));

        let zeros = WeightMap::new(12, 9, vec![0.0; 108]).unwrap();
        assert_eq!(
            inpaint(&flat, &flat_d, &zeros, &InpaintParams::default(), ExecMode::Sequential),
            Err(GuidanceError::HoleCoversImage)
        );
    }

    #[test]
    fn inpaint_depth_bounded_by_boundary() {
        // left boundary 0.2, right boundary 0.8, hole in between
        let d = DepthMap::from_fn(20, 6, |c, _| if c < 5 { 0.2 } else if c >= 15 { 0.8 } else { 3.0 });
        let rgb = RgbImage::new(20, 6);
        let w = WeightMap::new(20, 6, (0..120).map(|i| if (5..15).contains(&(i % 20)) { 0.0 } else { 1.0 }).collect()).unwrap();
        let (_, out) = inpaint(&rgb, &d, &w, &InpaintParams::default(), ExecMode::Parallel).unwrap();
        for z in out.values() {
            assert!(*z >= 0.2 - 1e-6 && *z <= 0.8 + 1e-6, "{z}");
        }
    }

    #[test]
    fn overlay_colors() {
        let k = CameraIntrinsics::centered(100.0, 64, 64).unwrap();
        let t = traj(&[[-0.1, 0.0, 0.5], [0.1, 0.0, 1.0]]);
        let px = overlay_pixels((64, 64), &t, &k, &RigidTransform::identity()).unwrap();
        let first = px.iter().find(|(c, r, _)| (*c, *r) == (12, 32)).unwrap();
        assert_eq!(first.2, [255, 0, 0]);
        let last = px.iter().find(|(c, r, _)| (*c, *r) == (42, 32)).unwrap();
        assert_eq!(last.2, [0, 0, 255]);

        let flat = traj(&[[-0.1, 0.0, 1.0], [0.1, 0.05, 1.0]]);
        let px = overlay_pixels((64, 64), &flat, &k, &RigidTransform::identity()).unwrap();
        assert!(px.iter().all(|p| p.2 == [255, 0, 0]));

        let black = RgbImage::new(64, 64);
        let out = render_overlay(&black, &flat, &k, &RigidTransform::identity(), 1.0).unwrap();
        assert_eq!(out.get_pixel(22, 32).0, [255, 0, 0]);

        let behind = traj(&[[0.0, 0.0, -1.0], [0.1, 0.0, -2.0]]);
        assert_eq!(
            overlay_pixels((64, 64), &behind, &k, &RigidTransform::identity()),
            Err(GuidanceError::AllBehindCamera)
        );
    }

    #[test]
    fn package_json_shape() {
        let z = GuidancePackage {
            trajectory: traj(&[[0.0, 0.0, 1.0], [0.5, 0.0, 1.0]]),
            relevant_ids: vec!["cup".into()],
            sub_instruction: "pick up the cup".into(),
            issue_step: 5,
        };
        let s = serde_json::to_string(&z).unwrap();
        assert_eq!(
            s,
            r#"{"trajectory":[[0.0,0.0,1.0],[0.5,0.0,1.0]],"relevant_ids":["cup"],"sub_instruction":"pick up the cup","issue_step":5}"#
        );
        assert_eq!(serde_json::from_str::<GuidancePackage>(&s).unwrap(), z);
    }
}
