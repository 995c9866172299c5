//! Kinematic tabletop world with a hierarchical planner/policy loop.
//!
//! The workspace frame has +z up. Objects are boxes that only move when the
//! effector carries them or a disturbance displaces them. A planner is called
//! every `replan_interval` steps (and right after a stage completes); the
//! policy sees the augmented observation and returns a keypose, which is
//! applied by moving the effector there directly.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::exec::{self, ExecMode};
use crate::geometry::{
    CameraIntrinsics, DepthMap, Frame, GeometryError, Gripper, Keypose, Mask, Point3, RigidTransform,
};
use crate::guidance::{
    augment, point_segment_distance, AugmentMode, AugmentParams, AugmentedObservation, GuidanceError,
    GuidancePackage, InstanceMask,
};
use crate::metrics::{success_stats, MetricsError, SuccessStats};
use crate::raster::{self, RasterError};
use crate::trajectory::{resample_uniform, Trajectory3D, TrajectoryError, CANONICAL_LEN};

pub const DEFAULT_REPLAN_INTERVAL: u64 = 5;
pub const DEFAULT_MAX_STEPS: u64 = 25;
pub const DEFAULT_STEP_LENGTH: f64 = 0.05;
pub const DEFAULT_GRASP_TOLERANCE: f64 = 0.01;
pub const PROTOCOL: &str = "st-guidance/1";
pub const BACKGROUND: [u8; 3] = [48, 48, 48];
const GOAL_PAD_HALF_HEIGHT: f64 = 0.002;
const ARRIVAL_EPS: f64 = 1e-9;

pub const BUNDLED_SCENARIOS: [&str; 3] = ["pick_place", "disturbance", "chain3"];

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("instruction {0:?} names no known object and goal")]
    UnknownEntity(String),
    #[error("policy called before any guidance was issued")]
    NoGuidance,
    #[error("planner returned an unusable plan: {0}")]
    InvalidPlan(String),
    #[error("policy returned a non-finite keypose")]
    InvalidAction,
    #[error("plug-in protocol violation: {0}")]
    Protocol(String),
    #[error("unknown scenario {0:?}")]
    UnknownScenario(String),
    #[error(transparent)]
    Guidance(#[from] GuidanceError),
    #[error(transparent)]
    Trajectory(#[from] TrajectoryError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Raster(#[from] RasterError),
}

fn bad_config(m: impl Into<String>) -> SimError {
    SimError::InvalidConfig(m.into())
}

// ---------------------------------------------------------------------------
// World
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawObject", into = "RawObject")]
pub struct SceneObject {
    pub pose: RigidTransform,
    /// Half sizes along the object's own axes, meters.
    pub extent: Point3,
    pub kind: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawObject {
    position: Point3,
    #[serde(default = "identity_rotation")]
    rotation: [f64; 4],
    extent: Point3,
    #[serde(default)]
    kind: String,
}

fn identity_rotation() -> [f64; 4] {
    [0.0, 0.0, 0.0, 1.0]
}

impl TryFrom<RawObject> for SceneObject {
    type Error = SimError;
    fn try_from(r: RawObject) -> Result<Self, SimError> {
        let p = r.position;
        Ok(SceneObject {
            pose: RigidTransform::new(r.rotation, [p.x, p.y, p.z])?,
            extent: r.extent,
            kind: r.kind,
        })
    }
}

impl From<SceneObject> for RawObject {
    fn from(o: SceneObject) -> Self {
        RawObject {
            position: o.pose.translation(),
            rotation: o.pose.rotation(),
            extent: o.extent,
            kind: o.kind,
        }
    }
}

impl SceneObject {
    pub fn center(&self) -> Point3 {
        self.pose.translation()
    }

    fn translate(&mut self, d: Point3) {
        let c = self.center() + d;
        self.pose = RigidTransform::new(self.pose.rotation(), [c.x, c.y, c.z]).expect("unit rotation kept");
    }

    fn move_to(&mut self, c: Point3) {
        let d = c - self.center();
        self.translate(d);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GoalRegion {
    pub center: Point3,
    pub radius: f64,
}

impl GoalRegion {
    pub fn contains(&self, p: Point3) -> bool {
        p.distance(&self.center) <= self.radius
    }
}

/// An object held by the gripper, at a fixed offset from the effector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grasp {
    pub object: String,
    pub offset: Point3,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub objects: BTreeMap<String, SceneObject>,
    pub goals: BTreeMap<String, GoalRegion>,
    pub effector: Keypose,
    #[serde(default)]
    pub holding: Option<Grasp>,
    #[serde(default)]
    pub step: u64,
}

/// Initial world as written in scenario files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldSpec {
    pub objects: BTreeMap<String, SceneObject>,
    #[serde(default)]
    pub goals: BTreeMap<String, GoalRegion>,
    pub effector: Point3,
}

impl WorldState {
    pub fn from_spec(s: &WorldSpec) -> Result<Self, SimError> {
        let w = WorldState {
            objects: s.objects.clone(),
            goals: s.goals.clone(),
            effector: Keypose::at(s.effector, Gripper::Open),
            holding: None,
            step: 0,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        for (id, o) in &self.objects {
            let e = o.extent;
            if !(e.x > 0.0 && e.y > 0.0 && e.z > 0.0 && e.is_finite()) {
                return Err(bad_config(format!("object {id:?} needs positive finite extents")));
            }
            if self.goals.contains_key(id) {
                return Err(bad_config(format!("{id:?} is both an object and a goal")));
            }
        }
        for (id, g) in &self.goals {
            if !(g.radius > 0.0 && g.radius.is_finite() && g.center.is_finite()) {
                return Err(bad_config(format!("goal {id:?} needs a positive radius")));
            }
        }
        if !self.effector.is_finite() {
            return Err(bad_config("effector pose must be finite"));
        }
        if let Some(g) = &self.holding {
            if !self.objects.contains_key(&g.object) {
                return Err(bad_config(format!("held object {:?} does not exist", g.object)));
            }
        }
        Ok(())
    }

    /// Object center inside the goal sphere, not held, gripper open.
    pub fn placed(&self, object: &str, goal: &str) -> bool {
        let (Some(o), Some(g)) = (self.objects.get(object), self.goals.get(goal)) else {
            return false;
        };
        let held = self.holding.as_ref().is_some_and(|h| h.object == object);
        !held && self.effector.gripper == Gripper::Open && g.contains(o.center())
    }

    pub fn held_object(&self) -> Option<&str> {
        self.holding.as_ref().map(|h| h.object.as_str())
    }
}

// ---------------------------------------------------------------------------
// Rendering
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CameraRig", into = "CameraRig")]
pub struct Camera {
    pub intrinsics: CameraIntrinsics,
    /// Camera → workspace.
    pub pose: RigidTransform,
    rig: Option<(Point3, Point3, Point3)>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CameraRig {
    intrinsics: CameraIntrinsics,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pose: Option<RigidTransform>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    eye: Option<Point3>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    target: Option<Point3>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    up: Option<Point3>,
}

impl TryFrom<CameraRig> for Camera {
    type Error = SimError;
    fn try_from(r: CameraRig) -> Result<Self, SimError> {
        match (r.pose, r.eye, r.target) {
            (Some(pose), None, None) => Ok(Camera::new(r.intrinsics, pose)),
            (None, Some(eye), Some(target)) => {
                Camera::look_at(r.intrinsics, eye, target, r.up.unwrap_or(Point3::new(0.0, 0.0, 1.0)))
            }
            _ => Err(bad_config("camera needs either a pose or eye and target")),
        }
    }
}

impl From<Camera> for CameraRig {
    fn from(c: Camera) -> Self {
        match c.rig {
            Some((eye, target, up)) => CameraRig {
                intrinsics: c.intrinsics,
                pose: None,
                eye: Some(eye),
                target: Some(target),
                up: Some(up),
            },
            None => CameraRig {
                intrinsics: c.intrinsics,
                pose: Some(c.pose),
                eye: None,
                target: None,
                up: None,
            },
        }
    }
}

impl Camera {
    pub fn new(intrinsics: CameraIntrinsics, pose: RigidTransform) -> Self {
        Self {
            intrinsics,
            pose,
            rig: None,
        }
    }

    pub fn look_at(intrinsics: CameraIntrinsics, eye: Point3, target: Point3, up: Point3) -> Result<Self, SimError> {
        Ok(Self {
            intrinsics,
            pose: RigidTransform::look_at(eye, target, up)?,
            rig: Some((eye, target, up)),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedObservation {
    pub rgb: RgbImage,
    pub depth: DepthMap,
    /// One mask per object and goal pad, sorted by id; possibly empty.
    pub masks: Vec<InstanceMask>,
}

/// Flat color of an instance, derived from its id.
pub fn id_color(id: &str) -> [u8; 3] {
    // FNV-1a
    let mut h: u32 = 0x811c_9dc5;
    for b in id.bytes() {
        h ^= b as u32;
        h = h.wrapping_mul(0x0100_0193);
    }
    let c = h.to_le_bytes();
    [64 + c[0] / 2, 64 + c[1] / 2, 64 + c[2] / 2]
}

struct Solid {
    id: String,
    to_local: RigidTransform,
    extent: Point3,
    color: [u8; 3],
}

fn solids(w: &WorldState) -> Vec<Solid> {
    let mut out: Vec<Solid> = w
        .objects
        .iter()
        .map(|(id, o)| Solid {
            id: id.clone(),
            to_local: o.pose.inverse(),
            extent: o.extent,
            color: id_color(id),
        })
        .collect();
    for (id, g) in &w.goals {
        let c = g.center - Point3::new(0.0, 0.0, g.radius);
        out.push(Solid {
            id: id.clone(),
            to_local: RigidTransform::from_translation(c).inverse(),
            extent: Point3::new(g.radius, g.radius, GOAL_PAD_HALF_HEIGHT),
            color: id_color(id),
        });
    }
    out.sort_by(|a, b| a.id.cmp(&b.id));
    out
}

/// Entry parameter of a ray against an axis-aligned box centered at the
/// origin, or `None` on a miss. A ray starting inside reports 0.
fn ray_box(o: Point3, d: Point3, e: Point3) -> Option<f64> {
    let (mut lo, mut hi) = (0.0f64, f64::INFINITY);
    for (oi, di, ei) in [(o.x, d.x, e.x), (o.y, d.y, e.y), (o.z, d.z, e.z)] {
        if di.abs() < 1e-15 {
            if oi.abs() > ei {
                return None;
            }
            continue;
        }
        let (a, b) = ((-ei - oi) / di, (ei - oi) / di);
        let (a, b) = if a < b { (a, b) } else { (b, a) };
        lo = lo.max(a);
        hi = hi.min(b);
        if lo > hi {
            return None;
        }
    }
    Some(lo)
}

/// Z-buffered ray cast of every object box and goal pad. Depth is the camera
/// z coordinate of the first hit, 0 where nothing is hit.
pub fn render_observation(w: &WorldState, cam: &Camera, mode: ExecMode) -> RenderedObservation {
    let k = &cam.intrinsics;
    let (width, height) = k.dims();
    let solids = solids(w);
    let origin = cam.pose.translation();
    let hits = exec::map_range(mode, width as usize * height as usize, |i| {
        let (col, row) = ((i % width as usize) as f64, (i / width as usize) as f64);
        // camera ray with unit z component, so the hit parameter is depth
        let dir = cam.pose.rotate(Point3::new((col - k.cx) / k.fx, (row - k.cy) / k.fy, 1.0));
        let mut best: Option<(f64, usize)> = None;
        for (si, s) in solids.iter().enumerate() {
            let o = s.to_local.apply(origin);
            let d = s.to_local.rotate(dir);
            if let Some(t) = ray_box(o, d, s.extent) {
                if t > 0.0 && best.is_none_or(|(bt, _)| t < bt) {
                    best = Some((t, si));
                }
            }
        }
        best
    });
    let rgb = RgbImage::from_fn(width, height, |c, r| {
        let h = hits[(r * width + c) as usize];
        Rgb(h.map_or(BACKGROUND, |(_, si)| solids[si].color))
    });
    let depth = DepthMap::new(
        width,
        height,
        hits.iter().map(|h| h.map_or(0.0, |(t, _)| t as f32)).collect(),
    )
    .expect("sized buffer");
    let masks = solids
        .iter()
        .enumerate()
        .map(|(si, s)| {
            let m = Mask::from_fn(width, height, |c, r| {
                hits[(r * width + c) as usize].is_some_and(|(_, hit)| hit == si)
            });
            InstanceMask {
                id: s.id.clone(),
                mask: m,
                source: "render".into(),
            }
        })
        .collect();
    RenderedObservation { rgb, depth, masks }
}

// ---------------------------------------------------------------------------
// Planner and policy interfaces
// ---------------------------------------------------------------------------

pub struct PlanRequest<'a> {
    pub step: u64,
    pub instruction: &'a str,
    pub observation: &'a RenderedObservation,
    pub camera: &'a Camera,
    /// Ground truth, for scripted planners.
    pub world: &'a WorldState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plan {
    pub package: GuidancePackage,
    #[serde(default)]
    pub degenerate: bool,
}

/// High-level planner: observation and instruction to guidance plus a
/// sub-instruction (carried in the package).
pub trait Planner {
    fn plan(&mut self, req: &PlanRequest) -> Result<Plan, SimError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RobotState {
    pub effector: Keypose,
    pub holding: bool,
}

pub struct ActRequest<'a> {
    pub step: u64,
    pub observation: &'a AugmentedObservation,
    pub state: RobotState,
    pub instruction: &'a str,
    pub guidance: Option<&'a GuidancePackage>,
    /// True on the step the guidance was issued.
    pub fresh: bool,
}

/// Low-level policy: augmented observation and robot state to a keypose.
pub trait Policy {
    fn act(&mut self, req: &ActRequest) -> Result<Keypose, SimError>;
}

fn words(s: &str) -> impl Iterator<Item = (usize, &str)> {
    s.split(|c: char| !(c.is_ascii_alphanumeric() || c == '_' || c == '-'))
        .filter(|w| !w.is_empty())
        .enumerate()
}

/// First object id and first goal id mentioned in `instruction`.
pub fn parse_instruction(w: &WorldState, instruction: &str) -> Result<(String, String), SimError> {
    let object = words(instruction).find(|(_, t)| w.objects.contains_key(*t));
    let goal = words(instruction).find(|(_, t)| w.goals.contains_key(*t));
    match (object, goal) {
        (Some((_, o)), Some((_, g))) => Ok((o.to_string(), g.to_string())),
        _ => Err(SimError::UnknownEntity(instruction.to_string())),
    }
}

/// Scripted planner from world truth: a straight line from the named object
/// to the named goal, resampled to the canonical length. An object already
/// at its goal gives two coincident waypoints and a degenerate flag.
pub fn mock_plan(w: &WorldState, instruction: &str, step: u64) -> Result<Plan, SimError> {
    let (object, goal) = parse_instruction(w, instruction)?;
    let start = w.objects[&object].center();
    let end = w.goals[&goal].center;
    let (points, degenerate) = if start.distance(&end) < ARRIVAL_EPS {
        (vec![start, start], true)
    } else {
        (resample_uniform(&[start, end], CANONICAL_LEN)?, false)
    };
    Ok(Plan {
        package: GuidancePackage {
            trajectory: Trajectory3D::new(Frame::Workspace, points)?,
            relevant_ids: vec![object, goal],
            sub_instruction: instruction.to_string(),
            issue_step: step,
        },
        degenerate,
    })
}

#[derive(Debug, Clone, Copy, Default)]
pub struct MockPlanner;

impl Planner for MockPlanner {
    fn plan(&mut self, req: &PlanRequest) -> Result<Plan, SimError> {
        mock_plan(req.world, req.instruction, req.step)
    }
}

/// Waypoint follower. Moves at most `step_length` per step along the
/// remaining waypoints, stopping at the first waypoint (gripper closes) and
/// the last (gripper opens).
#[derive(Debug, Clone)]
pub struct MockPolicy {
    pub step_length: f64,
    next: usize,
}

impl MockPolicy {
    pub fn new(step_length: f64) -> Self {
        Self { step_length, next: 0 }
    }

    /// Index of the waypoint currently steered to.
    pub fn next_waypoint(&self) -> usize {
        self.next
    }

    pub fn decide(&mut self, state: RobotState, guidance: &GuidancePackage, fresh: bool) -> Keypose {
        let wps = guidance.trajectory.waypoints();
        let last = wps.len() - 1;
        if fresh {
            // a held object already sits at the first waypoint
            self.next = if state.holding { 1 } else { 0 };
        }
        let mut pos = state.effector.position();
        let mut gripper = if self.next == 0 { Gripper::Open } else { Gripper::Closed };
        let mut budget = self.step_length;
        loop {
            let i = self.next.min(last);
            let d = pos.distance(&wps[i]);
            if d > ARRIVAL_EPS {
                if budget <= 0.0 {
                    break;
                }
                if d > budget {
                    pos = pos + (wps[i] - pos) * (budget / d);
                    break;
                }
                budget -= d;
                pos = wps[i];
            }
            if i == 0 {
                gripper = Gripper::Closed;
            }
            if i == last {
                gripper = Gripper::Open;
                self.next = last + 1;
                break;
            }
            self.next = i + 1;
            if i == 0 {
                break;
            }
        }
        Keypose {
            pose: RigidTransform::from_translation(pos),
            gripper,
        }
    }
}

impl Default for MockPolicy {
    fn default() -> Self {
        Self::new(DEFAULT_STEP_LENGTH)
    }
}

impl Policy for MockPolicy {
    fn act(&mut self, req: &ActRequest) -> Result<Keypose, SimError> {
        let g = req.guidance.ok_or(SimError::NoGuidance)?;
        Ok(self.decide(req.state, g, req.fresh))
    }
}

// ---------------------------------------------------------------------------
// Episodes
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageGoal {
    pub instruction: String,
    pub object: String,
    pub goal: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Disturbance {
    /// Applied after the action of this step.
    pub step: u64,
    pub object: String,
    pub offset: Point3,
}

fn d_replan() -> u64 {
    DEFAULT_REPLAN_INTERVAL
}
fn d_max_steps() -> u64 {
    DEFAULT_MAX_STEPS
}
fn d_step() -> f64 {
    DEFAULT_STEP_LENGTH
}
fn d_grasp() -> f64 {
    DEFAULT_GRASP_TOLERANCE
}
fn d_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeConfig {
    #[serde(default = "d_replan")]
    pub replan_interval: u64,
    #[serde(default = "d_max_steps")]
    pub max_steps: u64,
    #[serde(default)]
    pub disturbances: Vec<Disturbance>,
    #[serde(default)]
    pub seed: u64,
    /// Whole-task instruction; the planner gets this when the stage loop is off.
    #[serde(default)]
    pub task: Option<String>,
    pub stages: Vec<StageGoal>,
    /// Feed stages to the planner one at a time.
    #[serde(default = "d_true")]
    pub stage_loop: bool,
    #[serde(default = "d_step")]
    pub step_length: f64,
    #[serde(default = "d_grasp")]
    pub grasp_tolerance: f64,
    /// Uniform per-axis noise added to commanded positions, meters.
    #[serde(default)]
    pub action_noise: f64,
    /// Uniform xy offset applied to every object at reset, meters.
    #[serde(default)]
    pub spawn_jitter: f64,
    #[serde(default)]
    pub mode: AugmentMode,
    #[serde(default)]
    pub augment: AugmentParams,
}

impl EpisodeConfig {
    pub fn task_instruction(&self) -> String {
        self.task.clone().unwrap_or_else(|| {
            self.stages
                .iter()
                .map(|s| s.instruction.as_str())
                .collect::<Vec<_>>()
                .join(", then ")
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub camera: Camera,
    pub world: WorldSpec,
    pub episode: EpisodeConfig,
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self, SimError> {
        let s: Scenario = serde_json::from_str(text).map_err(|e| bad_config(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn bundled(name: &str) -> Result<Self, SimError> {
        let text = match name {
            "pick_place" => include_str!("../assets/scenarios/pick_place.json"),
            "disturbance" => include_str!("../assets/scenarios/disturbance.json"),
            "chain3" => include_str!("../assets/scenarios/chain3.json"),
            _ => return Err(SimError::UnknownScenario(name.to_string())),
        };
        Self::from_json(text)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let w = WorldState::from_spec(&self.world)?;
        let c = &self.episode;
        if c.replan_interval == 0 {
            return Err(bad_config("replan_interval must be at least 1"));
        }
        if c.max_steps == 0 {
            return Err(bad_config("max_steps must be at least 1"));
        }
        if c.stages.is_empty() {
            return Err(bad_config("at least one stage is required"));
        }
        if !(c.step_length > 0.0 && c.step_length.is_finite()) {
            return Err(bad_config("step_length must be positive"));
        }
        for (name, v) in [
            ("grasp_tolerance", c.grasp_tolerance),
            ("action_noise", c.action_noise),
            ("spawn_jitter", c.spawn_jitter),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(bad_config(format!("{name} must be non-negative")));
            }
        }
        for s in &c.stages {
            if !w.objects.contains_key(&s.object) || !w.goals.contains_key(&s.goal) {
                return Err(bad_config(format!("stage {:?} refers to an unknown object or goal", s.instruction)));
            }
        }
        for d in &c.disturbances {
            if !w.objects.contains_key(&d.object) || !d.offset.is_finite() {
                return Err(bad_config(format!("disturbance of unknown object {:?}", d.object)));
            }
        }
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        let mut s = self.clone();
        s.episode.seed = seed;
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IssueReason {
    /// Regular replanning at a multiple of the interval.
    Schedule,
    /// Immediate refresh after a stage completed.
    StageAdvance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IssueMarker {
    pub reason: IssueReason,
    pub sub_instruction: String,
    pub trajectory: Trajectory3D,
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub stage: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub issue: Option<IssueMarker>,
    pub relevant: Vec<String>,
    pub action: Keypose,
    /// Effector after the action.
    pub effector: Keypose,
    pub holding: Option<String>,
    pub objects: BTreeMap<String, Point3>,
    /// Effector distance to the guidance trajectory the action followed.
    pub guidance_distance: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub disturbed: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub completed: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageOutcome {
    pub instruction: String,
    pub completed_at: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub scenario: String,
    pub seed: u64,
    pub success: bool,
    pub steps_used: u64,
    pub stages: Vec<StageOutcome>,
    pub trace: Vec<StepRecord>,
}

fn polyline_distance(p: Point3, wps: &[Point3]) -> f64 {
    wps.windows(2)
        .map(|s| point_segment_distance(p, s[0], s[1]))
        .fold(f64::INFINITY, f64::min)
}

fn jitter(rng: &mut ChaCha8Rng, a: f64) -> f64 {
    if a > 0.0 {
        rng.random_range(-a..=a)
    } else {
        0.0
    }
}

fn apply_action(w: &mut WorldState, action: Keypose, tolerance: f64) {
    let before = w.effector.gripper;
    w.effector = action;
    let pos = action.position();
    if let Some(g) = &w.holding {
        let target = pos + g.offset;
        w.objects.get_mut(&g.object).expect("held object exists").move_to(target);
    }
    match (before, action.gripper) {
        (Gripper::Open, Gripper::Closed) if w.holding.is_none() => {
            let nearest = w
                .objects
                .iter()
                .map(|(id, o)| (o.center().distance(&pos), id))
                .filter(|(d, _)| *d <= tolerance)
                .min_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(b.1)));
            if let Some((_, id)) = nearest {
                w.holding = Some(Grasp {
                    object: id.clone(),
                    offset: w.objects[id].center() - pos,
                });
            }
        }
        (_, Gripper::Open) => w.holding = None,
        _ => {}
    }
}

/// Runs one episode of `s` with its configured seed.
pub fn run_episode(s: &Scenario, planner: &mut dyn Planner, policy: &mut dyn Policy) -> Result<EpisodeResult, SimError> {
    s.validate()?;
    let c = &s.episode;
    let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
    let mut w = WorldState::from_spec(&s.world)?;
    for o in w.objects.values_mut() {
        let d = Point3::new(jitter(&mut rng, c.spawn_jitter), jitter(&mut rng, c.spawn_jitter), 0.0);
        o.translate(d);
    }
    let k = &s.camera.intrinsics;
    let task = c.task_instruction();
    let n = c.stages.len();
    let mut completed_at: Vec<Option<u64>> = vec![None; n];
    let mut stage = 0usize;
    let mut guidance: Option<GuidancePackage> = None;
    let mut advance_pending = false;
    let mut trace = Vec::new();
    let mut success = false;

    for t in 0..c.max_steps {
        w.step = t;
        let obs = render_observation(&w, &s.camera, ExecMode::Sequential);
        let instruction = if c.stage_loop { c.stages[stage].instruction.as_str() } else { task.as_str() };
        let reason = if t % c.replan_interval == 0 {
            Some(IssueReason::Schedule)
        } else if advance_pending {
            Some(IssueReason::StageAdvance)
        } else {
            None
        };
        advance_pending = false;
        let mut issue = None;
        if let Some(reason) = reason {
            let plan = planner.plan(&PlanRequest {
                step: t,
                instruction,
                observation: &obs,
                camera: &s.camera,
                world: &w,
            })?;
            let mut package = plan.package;
            if package.trajectory.frame() != Frame::Workspace {
                return Err(SimError::InvalidPlan("trajectory must be in the workspace frame".into()));
            }
            package.issue_step = t;
            issue = Some(IssueMarker {
                reason,
                sub_instruction: package.sub_instruction.clone(),
                trajectory: package.trajectory.clone(),
                degenerate: plan.degenerate,
            });
            guidance = Some(package);
        }
        let g = guidance.as_ref().ok_or(SimError::NoGuidance)?;
        let aug = augment(
            &obs.rgb,
            &obs.depth,
            &obs.masks,
            g,
            c.mode,
            k,
            &s.camera.pose,
            &c.augment,
            ExecMode::Sequential,
        )?;
        let state = RobotState {
            effector: w.effector,
            holding: w.holding.is_some(),
        };
        let action = policy.act(&ActRequest {
            step: t,
            observation: &aug.observation,
            state,
            instruction: &g.sub_instruction,
            guidance: Some(g),
            fresh: issue.is_some(),
        })?;
        if !action.is_finite() {
            return Err(SimError::InvalidAction);
        }
        let mut applied = action;
        if c.action_noise > 0.0 {
            let a = c.action_noise;
            let noise = Point3::new(jitter(&mut rng, a), jitter(&mut rng, a), jitter(&mut rng, a));
            applied.pose = RigidTransform::new(applied.pose.rotation(), {
                let p = action.position() + noise;
                [p.x, p.y, p.z]
            })?;
        }
        apply_action(&mut w, applied, c.grasp_tolerance);

        let mut disturbed = Vec::new();
        for d in c.disturbances.iter().filter(|d| d.step == t) {
            if w.holding.as_ref().is_some_and(|h| h.object == d.object) {
                w.holding = None;
            }
            w.objects.get_mut(&d.object).expect("validated").translate(d.offset);
            disturbed.push(d.object.clone());
        }

        let mut completed = Vec::new();
        if c.stage_loop {
            let sg = &c.stages[stage];
            if w.placed(&sg.object, &sg.goal) {
                completed_at[stage] = Some(t);
                completed.push(stage);
                stage += 1;
                advance_pending = true;
            }
        } else {
            for (i, sg) in c.stages.iter().enumerate() {
                if completed_at[i].is_none() && w.placed(&sg.object, &sg.goal) {
                    completed_at[i] = Some(t);
                    completed.push(i);
                }
            }
        }

        trace.push(StepRecord {
            step: t,
            stage: stage.min(n - 1),
            issue,
            relevant: aug.report.relevant,
            action,
            effector: w.effector,
            holding: w.held_object().map(str::to_string),
            objects: w.objects.iter().map(|(id, o)| (id.clone(), o.center())).collect(),
            guidance_distance: polyline_distance(w.effector.position(), g.trajectory.waypoints()),
            disturbed,
            completed,
        });
        if completed_at.iter().all(Option::is_some) {
            success = true;
            break;
        }
    }
    Ok(EpisodeResult {
        scenario: s.name.clone(),
        seed: c.seed,
        success,
        steps_used: trace.len() as u64,
        stages: c
            .stages
            .iter()
            .zip(&completed_at)
            .map(|(sg, at)| StageOutcome {
                instruction: sg.instruction.clone(),
                completed_at: *at,
            })
            .collect(),
        trace,
    })
}

// ---------------------------------------------------------------------------
// Suites
// ---------------------------------------------------------------------------

pub type PlannerFactory<'a> = dyn Fn(&Scenario) -> Result<Box<dyn Planner>, SimError> + Sync + 'a;
pub type PolicyFactory<'a> = dyn Fn(&Scenario) -> Result<Box<dyn Policy>, SimError> + Sync + 'a;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub seed: u64,
    pub success: bool,
    pub steps_used: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub scenario: String,
    pub replan_interval: u64,
    pub stage_loop: bool,
    pub stats: SuccessStats,
    pub episodes: Vec<EpisodeSummary>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteResult {
    pub reports: Vec<ScenarioReport>,
    /// Episodes in (scenario, seed) order.
    pub episodes: Vec<EpisodeResult>,
}

/// Runs every scenario under every seed. Episodes are independent and may run
/// concurrently; results come back in (scenario, seed) order regardless.
pub fn run_suite(
    scenarios: &[Scenario],
    seeds: &[u64],
    planner: &PlannerFactory,
    policy: &PolicyFactory,
    mode: ExecMode,
) -> Result<SuiteResult, SimError> {
    if scenarios.is_empty() {
        return Err(bad_config("no scenarios given"));
    }
    if seeds.is_empty() {
        return Err(bad_config("no seeds given"));
    }
    let jobs: Vec<Scenario> = scenarios
        .iter()
        .flat_map(|s| seeds.iter().map(move |&seed| s.with_seed(seed)))
        .collect();
    let results = exec::map_slice(mode, &jobs, |s| {
        let mut pl = planner(s)?;
        let mut po = policy(s)?;
        run_episode(s, pl.as_mut(), po.as_mut())
    });
    let episodes = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    let mut reports = Vec::with_capacity(scenarios.len());
    for (si, s) in scenarios.iter().enumerate() {
        let eps = &episodes[si * seeds.len()..(si + 1) * seeds.len()];
        let groups: Vec<Vec<bool>> = eps.iter().map(|e| vec![e.success]).collect();
        reports.push(ScenarioReport {
            scenario: s.name.clone(),
            replan_interval: s.episode.replan_interval,
            stage_loop: s.episode.stage_loop,
            stats: success_stats(&groups)?,
            episodes: eps
                .iter()
                .map(|e| EpisodeSummary {
                    seed: e.seed,
                    success: e.success,
                    steps_used: e.steps_used,
                })
                .collect(),
        });
    }
    Ok(SuiteResult { reports, episodes })
}

pub fn mock_planner_factory(_: &Scenario) -> Result<Box<dyn Planner>, SimError> {
    Ok(Box::new(MockPlanner))
}

pub fn mock_policy_factory(s: &Scenario) -> Result<Box<dyn Policy>, SimError> {
    Ok(Box::new(MockPolicy::new(s.episode.step_length)))
}

// ---------------------------------------------------------------------------
// Line-delimited JSON plug-ins
// ---------------------------------------------------------------------------
//
// Both directions carry one JSON object per line. The host opens with
// {"type":"hello","protocol":"st-guidance/1","role":...} and expects a hello
// with the same protocol back. Requests are {"type":"plan",...} or
// {"type":"act",...}; replies are {"type":"guidance","package":...} or
// {"type":"action","keypose":...}, or {"type":"error","message":...}.

fn protocol(m: impl Into<String>) -> SimError {
    SimError::Protocol(m.into())
}

struct Plugin {
    child: Child,
    stdin: BufWriter<ChildStdin>,
    stdout: BufReader<ChildStdout>,
    workdir: PathBuf,
}

impl Plugin {
    fn spawn(command: &str, role: &str, workdir: &Path) -> Result<Self, SimError> {
        let mut parts = command.split_whitespace();
        let program = parts.next().ok_or_else(|| protocol("empty plug-in command"))?;
        let mut child = Command::new(program)
            .args(parts)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| protocol(format!("cannot start {program:?}: {e}")))?;
        std::fs::create_dir_all(workdir).map_err(|e| protocol(format!("{}: {e}", workdir.display())))?;
        let mut p = Plugin {
            stdin: BufWriter::new(child.stdin.take().expect("piped")),
            stdout: BufReader::new(child.stdout.take().expect("piped")),
            child,
            workdir: workdir.to_path_buf(),
        };
        let hello = p.call(&json!({"type": "hello", "protocol": PROTOCOL, "role": role}))?;
        if hello.get("type").and_then(Value::as_str) != Some("hello")
            || hello.get("protocol").and_then(Value::as_str) != Some(PROTOCOL)
        {
            return Err(protocol(format!("bad handshake reply: {hello}")));
        }
        Ok(p)
    }

    fn call(&mut self, msg: &Value) -> Result<Value, SimError> {
        writeln!(self.stdin, "{msg}")
            .and_then(|_| self.stdin.flush())
            .map_err(|e| protocol(format!("write failed: {e}")))?;
        let mut line = String::new();
        let n = self
            .stdout
            .read_line(&mut line)
            .map_err(|e| protocol(format!("read failed: {e}")))?;
        if n == 0 {
            return Err(protocol("plug-in closed its output"));
        }
        let v: Value = serde_json::from_str(line.trim()).map_err(|e| protocol(format!("reply is not JSON: {e}")))?;
        if v.get("type").and_then(Value::as_str) == Some("error") {
            let m = v.get("message").and_then(Value::as_str).unwrap_or("unspecified");
            return Err(protocol(format!("plug-in error: {m}")));
        }
        Ok(v)
    }

    fn expect<T: serde::de::DeserializeOwned>(v: &Value, kind: &str, field: &str) -> Result<T, SimError> {
        if v.get("type").and_then(Value::as_str) != Some(kind) {
            return Err(protocol(format!("expected a {kind:?} reply, got {v}")));
        }
        let f = v.get(field).ok_or_else(|| protocol(format!("reply lacks {field:?}")))?;
        serde_json::from_value(f.clone()).map_err(|e| protocol(format!("bad {field}: {e}")))
    }

    fn path(&self, name: String) -> PathBuf {
        self.workdir.join(name)
    }
}

impl Drop for Plugin {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

fn path_str(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

/// Planner running as a child process.
pub struct ExecPlanner(Plugin);

impl ExecPlanner {
    pub fn spawn(command: &str, workdir: &Path) -> Result<Self, SimError> {
        Ok(Self(Plugin::spawn(command, "planner", workdir)?))
    }
}

impl Planner for ExecPlanner {
    fn plan(&mut self, req: &PlanRequest) -> Result<Plan, SimError> {
        let p = &mut self.0;
        let rgb = p.path(format!("plan_{:04}_rgb.png", req.step));
        let depth = p.path(format!("plan_{:04}_depth.f32", req.step));
        raster::write_rgb(&rgb, &req.observation.rgb)?;
        raster::write_depth_f32(&depth, &req.observation.depth)?;
        let mut masks = serde_json::Map::new();
        for m in &req.observation.masks {
            let mp = p.path(format!("plan_{:04}_mask_{}.png", req.step, m.id));
            raster::write_mask(&mp, &m.mask)?;
            masks.insert(m.id.clone(), Value::String(path_str(&mp)));
        }
        let reply = p.call(&json!({
            "type": "plan",
            "step": req.step,
            "instruction": req.instruction,
            "rgb": path_str(&rgb),
            "depth": path_str(&depth),
            "masks": masks,
            "intrinsics": req.camera.intrinsics,
            "camera_pose": req.camera.pose,
            "world": req.world,
        }))?;
        let package: GuidancePackage = Plugin::expect(&reply, "guidance", "package")?;
        let degenerate = reply.get("degenerate").and_then(Value::as_bool).unwrap_or(false);
        Ok(Plan { package, degenerate })
    }
}

/// Policy running as a child process.
pub struct ExecPolicy(Plugin);

impl ExecPolicy {
    pub fn spawn(command: &str, workdir: &Path) -> Result<Self, SimError> {
        Ok(Self(Plugin::spawn(command, "policy", workdir)?))
    }
}

impl Policy for ExecPolicy {
    fn act(&mut self, req: &ActRequest) -> Result<Keypose, SimError> {
        let p = &mut self.0;
        let rgb = p.path(format!("act_{:04}_rgb.png", req.step));
        let depth = p.path(format!("act_{:04}_depth.f32", req.step));
        raster::write_rgb(&rgb, &req.observation.rgb)?;
        raster::write_depth_f32(&depth, &req.observation.depth)?;
        let reply = p.call(&json!({
            "type": "act",
            "step": req.step,
            "instruction": req.instruction,
            "rgb": path_str(&rgb),
            "depth": path_str(&depth),
            "state": req.state,
            "guidance": req.guidance,
            "fresh": req.fresh,
        }))?;
        Plugin::expect(&reply, "action", "keypose")
    }
}

fn serve<R: BufRead, W: Write>(
    input: R,
    mut output: W,
    mut handle: impl FnMut(&str, &Value) -> Result<Value, String>,
) -> std::io::Result<()> {
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let reply = match serde_json::from_str::<Value>(&line) {
            Ok(v) => match v.get("type").and_then(Value::as_str) {
                Some("hello") => Ok(json!({"type": "hello", "protocol": PROTOCOL})),
                Some(kind) => handle(kind, &v),
                None => Err("message lacks a type".to_string()),
            },
            Err(e) => Err(e.to_string()),
        };
        let reply = reply.unwrap_or_else(|m| json!({"type": "error", "message": m}));
        writeln!(output, "{reply}")?;
        output.flush()?;
    }
    Ok(())
}

fn field<T: serde::de::DeserializeOwned>(v: &Value, name: &str) -> Result<T, String> {
    let f = v.get(name).ok_or_else(|| format!("missing {name:?}"))?;
    serde_json::from_value(f.clone()).map_err(|e| format!("{name}: {e}"))
}

/// Serves the scripted planner over the plug-in protocol. Plan requests must
/// carry the `world` field.
pub fn serve_mock_planner<R: BufRead, W: Write>(input: R, output: W) -> std::io::Result<()> {
    serve(input, output, |kind, v| {
        if kind != "plan" {
            return Err(format!("unsupported request {kind:?}"));
        }
        let world: WorldState = field(v, "world")?;
        let instruction: String = field(v, "instruction")?;
        let step: u64 = field(v, "step")?;
        let plan = mock_plan(&world, &instruction, step).map_err(|e| e.to_string())?;
        Ok(json!({"type": "guidance", "package": plan.package, "degenerate": plan.degenerate}))
    })
}

/// Serves the waypoint follower over the plug-in protocol.
pub fn serve_mock_policy<R: BufRead, W: Write>(input: R, output: W, step_length: f64) -> std::io::Result<()> {
    let mut policy = MockPolicy::new(step_length);
    serve(input, output, move |kind, v| {
        if kind != "act" {
            return Err(format!("unsupported request {kind:?}"));
        }
        let state: RobotState = field(v, "state")?;
        let guidance: Option<GuidancePackage> = field(v, "guidance")?;
        let fresh: bool = field(v, "fresh")?;
        let g = guidance.ok_or_else(|| SimError::NoGuidance.to_string())?;
        Ok(json!({"type": "action", "keypose": policy.decide(state, &g, fresh)}))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn world(objects: &[(&str, [f64; 3], [f64; 3])], goals: &[(&str, [f64; 3], f64)]) -> WorldState {
        WorldState {
            objects: objects
                .iter()
                .map(|(id, c, e)| {
                    (
                        id.to_string(),
                        SceneObject {
                            pose: RigidTransform::from_translation(Point3::from(*c)),
                            extent: Point3::from(*e),
                            kind: "block".into(),
                        },
                    )
                })
                .collect(),
            goals: goals
                .iter()
                .map(|(id, c, r)| {
                    (
                        id.to_string(),
                        GoalRegion {
                            center: Point3::from(*c),
                            radius: *r,
                        },
                    )
                })
                .collect(),
            effector: Keypose::default(),
            holding: None,
            step: 0,
        }
    }

    fn forward_camera() -> Camera {
        Camera::new(CameraIntrinsics::centered(20.0, 21, 21).unwrap(), RigidTransform::identity())
    }

    #[test]
    fn empty_world_renders_background() {
        let obs = render_observation(&world(&[], &[]), &forward_camera(), ExecMode::Sequential);
        assert!(obs.rgb.pixels().all(|p| p.0 == BACKGROUND));
        assert!(obs.depth.values().iter().all(|z| *z == 0.0));
        assert!(obs.masks.is_empty());
    }

    #[test]
    fn box_on_axis_depth_is_front_face() {
        let w = world(&[("a", [0.0, 0.0, 1.0], [0.1, 0.1, 0.2])], &[]);
        let obs = render_observation(&w, &forward_camera(), ExecMode::Sequential);
        // front face at z = 1.0 - 0.2
        assert!((obs.depth.get(10, 10).unwrap() - 0.8).abs() < 1e-6);
        assert!(obs.masks[0].mask.get(10, 10));
        assert_eq!(obs.depth.get(0, 0), None);
    }

    #[test]
    fn nearer_box_occludes() {
        let w = world(
            &[("far", [0.0, 0.0, 2.0], [0.5, 0.5, 0.1]), ("near", [0.0, 0.0, 1.0], [0.05, 0.05, 0.05])],
            &[],
        );
        let obs = render_observation(&w, &forward_camera(), ExecMode::Sequential);
        assert_eq!(obs.rgb.get_pixel(10, 10).0, id_color("near"));
        assert!((obs.depth.get(10, 10).unwrap() - 0.95).abs() < 1e-6);
        assert!(!obs.masks[0].mask.get(10, 10));
    }

    #[test]
    fn mock_plan_shapes() {
        let w = world(&[("cube", [0.3, 0.0, 0.0], [0.02; 3])], &[("zone", [0.0, 0.0, 0.0], 0.03)]);
        let p = mock_plan(&w, "move cube to zone", 4).unwrap();
        let wps = p.package.trajectory.waypoints();
        assert_eq!(wps.len(), 8);
        assert_eq!(wps[0], Point3::new(0.3, 0.0, 0.0));
        assert_eq!(p.package.relevant_ids, vec!["cube".to_string(), "zone".to_string()]);
        assert!(!p.degenerate);

        let w = world(&[("cube", [0.0, 0.0, 0.0], [0.02; 3])], &[("zone", [0.0, 0.0, 0.0], 0.03)]);
        let p = mock_plan(&w, "move cube to zone", 0).unwrap();
        assert_eq!(p.package.trajectory.waypoints().len(), 2);
        assert!(p.degenerate);

        assert!(matches!(mock_plan(&w, "move mug to zone", 0), Err(SimError::UnknownEntity(_))));
    }

    #[test]
    fn policy_steps() {
        let w = world(&[("cube", [0.2, 0.0, 0.0], [0.02; 3])], &[("zone", [-0.15, 0.0, 0.0], 0.03)]);
        let g = mock_plan(&w, "cube zone", 0).unwrap().package;
        let mut p = MockPolicy::new(0.05);
        let start = RobotState {
            effector: Keypose::at(Point3::new(0.2, 0.0, 0.12), Gripper::Open),
            holding: false,
        };
        let a = p.decide(start, &g, true);
        assert!((a.position().z - 0.07).abs() < 1e-12);
        assert_eq!(a.gripper, Gripper::Open);
        let near = RobotState {
            effector: Keypose::at(Point3::new(0.2, 0.0, 0.03), Gripper::Open),
            holding: false,
        };
        let a = p.decide(near, &g, true);
        assert_eq!(a.position(), Point3::new(0.2, 0.0, 0.0));
        assert_eq!(a.gripper, Gripper::Closed);
        assert_eq!(p.next_waypoint(), 1);
    }
}
