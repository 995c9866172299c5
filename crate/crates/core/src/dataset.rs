//! Raw annotation parsing and training-sample generation.
//!
//! On-disk layout of a raw dataset root:
//!
//! ```text
//! data/<id>/info.json            annotation document
//! data/<id>/intrinsics.json      {fx, fy, cx, cy, width, height}
//! data/<id>/extrinsic.json       optional annotation-frame → camera transform
//! data/<id>/meta.json            optional {"task": ..., "variation": ...}
//! data/<id>/rgb/frame_NNN.*      frames referenced by samples
//! data/<id>/depth/frame_NNN.png  16-bit millimeter depth (or .f32 raster)
//! data/<id>/tracks/action_K.json keypoint track of action K, [[frame, u, v], ...]
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::exec::{self, ExecMode};
use crate::geometry::{
    from_thousand, project, sample_depth, to_thousand, CameraIntrinsics, DepthMap, Pixel, Point3,
    RigidTransform,
};
use crate::raster::{self, RasterError};
use crate::trajectory::{self, ExtractParams, Track2D, TrajectoryError, CANONICAL_LEN};

pub const NONE_SENTINEL: &str = "none";
pub const DEFAULT_DEAD_ZONE: f64 = 0.02;
pub const DEFAULT_CONSISTENCY_PX: f64 = 2.0;
pub const DEFAULT_DEPTH_DECIMALS: u32 = 3;
pub const DEPTH_UNITS_PER_METER: f64 = 1000.0;

const BUNDLED_PROMPTS: &str = include_str!("../assets/prompts.json");
const BUNDLED_SPLITS: &str = include_str!("../assets/splits.json");

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("schema violation at {path}: {message}")]
    SchemaViolation { path: String, message: String },
    #[error("invalid sample: {0}")]
    InvalidSample(String),
    #[error("variation {variation:?} of task {task:?} is in neither split list")]
    UnknownVariation { task: String, variation: String },
    #[error("task {0:?} has no split entry")]
    UnknownTask(String),
    #[error("sample has no task/variation label")]
    MissingVariation,
    #[error("split for {task:?} lists {label:?} as both seen and unseen")]
    OverlappingSplit { task: String, label: String },
    #[error("{} invalid video(s): {}", .0.len(), .0.join("; "))]
    InvalidVideos(Vec<String>),
    #[error("prompt template {0:?} is missing")]
    MissingTemplate(String),
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Trajectory(#[from] TrajectoryError),
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> DatasetError {
    DatasetError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

fn violation(path: &str, message: impl Into<String>) -> DatasetError {
    DatasetError::SchemaViolation {
        path: path.to_string(),
        message: message.into(),
    }
}

// ---------------------------------------------------------------------------
// Annotation documents
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Hand {
    Left,
    Right,
}

impl Hand {
    fn key(self) -> &'static str {
        match self {
            Hand::Left => "left_description",
            Hand::Right => "right_description",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameRange {
    pub start: u64,
    pub end: u64,
    start_raw: Value,
    end_raw: Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoordinateEntry {
    pub key: String,
    pub text: String,
    pub image_coordinates: Option<[i64; 2]>,
    pub cartesian_coordinates: Option<[f64; 6]>,
    pub extras: Map<String, Value>,
}

impl CoordinateEntry {
    /// Position part of the 6-vector, in the annotation frame.
    pub fn position(&self) -> Option<Point3> {
        self.cartesian_coordinates.map(|c| Point3::new(c[0], c[1], c[2]))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HandDescription {
    pub hand: Hand,
    pub action_description: String,
    pub coordinates: Vec<CoordinateEntry>,
    pub extras: Map<String, Value>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActionAnnotation {
    pub frame_range: FrameRange,
    pub hands: Vec<HandDescription>,
    pub extras: Map<String, Value>,
}

impl ActionAnnotation {
    /// Instruction text of the action; both hands joined when present.
    pub fn description(&self) -> String {
        self.hands
            .iter()
            .map(|h| h.action_description.as_str())
            .collect::<Vec<_>>()
            .join("; ")
    }

    pub fn entries(&self) -> impl Iterator<Item = &CoordinateEntry> {
        self.hands.iter().flat_map(|h| h.coordinates.iter())
    }
}

/// Parsed `info.json`. Unknown fields at every level are kept verbatim.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationRecord {
    pub task_description: String,
    pub actions: Vec<ActionAnnotation>,
    /// `parameter_data.camera_intrinsics` as stored (free-form text).
    pub camera_intrinsics: Option<String>,
    pub parameter_extras: Map<String, Value>,
    pub extras: Map<String, Value>,
}

fn take_object(v: &Value, path: &str) -> Result<Map<String, Value>, DatasetError> {
    v.as_object().cloned().ok_or_else(|| violation(path, "expected an object"))
}

fn take_string(m: &mut Map<String, Value>, key: &str, path: &str) -> Result<String, DatasetError> {
    match m.remove(key) {
        Some(Value::String(s)) => Ok(s),
        Some(_) => Err(violation(&format!("{path}.{key}"), "expected a string")),
        None => Err(violation(&format!("{path}.{key}"), "missing")),
    }
}

/// `"frame12"`, `"frame_012"`, `"12"` or `12` → 12.
fn frame_index(v: &Value, path: &str) -> Result<u64, DatasetError> {
    match v {
        Value::Number(n) => n.as_u64().ok_or_else(|| violation(path, "expected a non-negative integer")),
        Value::String(s) => {
            let digits = s.trim_start_matches(|c: char| !c.is_ascii_digit());
            if digits.is_empty() || !digits.chars().all(|c| c.is_ascii_digit()) {
                return Err(violation(path, format!("cannot read a frame index from {s:?}")));
            }
            digits.parse().map_err(|_| violation(path, "frame index out of range"))
        }
        _ => Err(violation(path, "expected a frame label")),
    }
}

fn parse_numbers<const N: usize>(v: Value, path: &str) -> Result<[f64; N], DatasetError> {
    let arr = v.as_array().ok_or_else(|| violation(path, format!("expected {N} numbers")))?;
    if arr.len() != N {
        return Err(violation(path, format!("expected {N} numbers, got {}", arr.len())));
    }
    let mut out = [0.0; N];
    for (i, x) in arr.iter().enumerate() {
        out[i] = x
            .as_f64()
            .filter(|f| f.is_finite())
            .ok_or_else(|| violation(&format!("{path}[{i}]"), "expected a number"))?;
    }
    Ok(out)
}

fn parse_entry(key: &str, v: &Value, path: &str) -> Result<CoordinateEntry, DatasetError> {
    let mut m = take_object(v, path)?;
    let text = take_string(&mut m, "text", path)?;
    let image_coordinates = match m.remove("image_coordinates") {
        None | Some(Value::Null) => None,
        Some(v) => {
            let p = format!("{path}.image_coordinates");
            let arr = v.as_array().filter(|a| a.len() == 2).ok_or_else(|| violation(&p, "expected [u, v]"))?;
            let mut out = [0i64; 2];
            for (i, x) in arr.iter().enumerate() {
                out[i] = x.as_i64().ok_or_else(|| violation(&format!("{p}[{i}]"), "expected an integer"))?;
            }
            Some(out)
        }
    };
    let cartesian_coordinates = match m.remove("cartesian_coordinates") {
        None | Some(Value::Null) => None,
        Some(v) => Some(parse_numbers::<6>(v, &format!("{path}.cartesian_coordinates"))?),
    };
    if image_coordinates.is_none() && cartesian_coordinates.is_none() {
        return Err(violation(path, "entry has neither image nor cartesian coordinates"));
    }
    Ok(CoordinateEntry {
        key: key.to_string(),
        text,
        image_coordinates,
        cartesian_coordinates,
        extras: m,
    })
}

fn parse_hand(hand: Hand, v: &Value, path: &str) -> Result<HandDescription, DatasetError> {
    let mut m = take_object(v, path)?;
    let action_description = take_string(&mut m, "action_description", path)?;
    let coords = match m.remove("coordinate_description") {
        None | Some(Value::Null) => Map::new(),
        Some(v) => take_object(&v, &format!("{path}.coordinate_description"))?,
    };
    // serde_json maps iterate in key order; order entries numerically
    let mut keyed: Vec<(u64, String, Value)> = coords
        .into_iter()
        .map(|(k, v)| (k.trim_start_matches(|c: char| !c.is_ascii_digit()).parse().unwrap_or(u64::MAX), k, v))
        .collect();
    keyed.sort_by(|a, b| a.0.cmp(&b.0).then_with(|| a.1.cmp(&b.1)));
    let coordinates = keyed
        .iter()
        .map(|(_, k, v)| parse_entry(k, v, &format!("{path}.coordinate_description.{k}")))
        .collect::<Result<_, _>>()?;
    Ok(HandDescription {
        hand,
        action_description,
        coordinates,
        extras: m,
    })
}

pub fn parse_annotation(doc: &Value) -> Result<AnnotationRecord, DatasetError> {
    let mut top = take_object(doc, "$")?;
    let task_description = take_string(&mut top, "task_description", "$")?;
    let actions_v = top
        .remove("action_descriptions")
        .ok_or_else(|| violation("$.action_descriptions", "missing"))?;
    let actions_arr = actions_v
        .as_array()
        .ok_or_else(|| violation("$.action_descriptions", "expected an array"))?;
    if actions_arr.is_empty() {
        return Err(violation("$.action_descriptions", "must contain at least one action"));
    }
    let mut actions: Vec<ActionAnnotation> = Vec::with_capacity(actions_arr.len());
    for (i, a) in actions_arr.iter().enumerate() {
        let path = format!("$.action_descriptions[{i}]");
        let mut m = take_object(a, &path)?;
        let fr_path = format!("{path}.frame_range");
        let fr = m.remove("frame_range").ok_or_else(|| violation(&fr_path, "missing"))?;
        let mut fr = take_object(&fr, &fr_path)?;
        let start_raw = fr
            .remove("start_frame")
            .ok_or_else(|| violation(&format!("{fr_path}.start_frame"), "missing"))?;
        let end_raw = fr
            .remove("end_frame")
            .ok_or_else(|| violation(&format!("{fr_path}.end_frame"), "missing"))?;
        if let Some(k) = fr.keys().next() {
            return Err(violation(&format!("{fr_path}.{k}"), "unexpected field"));
        }
        let start = frame_index(&start_raw, &format!("{fr_path}.start_frame"))?;
        let end = frame_index(&end_raw, &format!("{fr_path}.end_frame"))?;
        if end < start {
            return Err(violation(&fr_path, format!("end frame {end} precedes start frame {start}")));
        }
        if let Some(prev) = actions.last() {
            if start <= prev.frame_range.end {
                return Err(violation(
                    &fr_path,
                    format!("overlaps the previous action ending at frame {}", prev.frame_range.end),
                ));
            }
        }
        let mut hands = Vec::new();
        for hand in [Hand::Left, Hand::Right] {
            if let Some(v) = m.remove(hand.key()) {
                if !v.is_null() {
                    hands.push(parse_hand(hand, &v, &format!("{path}.{}", hand.key()))?);
                }
            }
        }
        if hands.is_empty() {
            return Err(violation(&path, "needs a left_description or right_description"));
        }
        actions.push(ActionAnnotation {
            frame_range: FrameRange {
                start,
                end,
                start_raw,
                end_raw,
            },
            hands,
            extras: m,
        });
    }
    let (camera_intrinsics, parameter_extras) = match top.remove("parameter_data") {
        None | Some(Value::Null) => (None, Map::new()),
        Some(v) => {
            let mut p = take_object(&v, "$.parameter_data")?;
            let ci = match p.remove("camera_intrinsics") {
                None | Some(Value::Null) => None,
                Some(Value::String(s)) => Some(s),
                Some(other) => Some(other.to_string()),
            };
            (ci, p)
        }
    };
    Ok(AnnotationRecord {
        task_description,
        actions,
        camera_intrinsics,
        parameter_extras,
        extras: top,
    })
}

pub fn parse_annotation_str(text: &str) -> Result<AnnotationRecord, DatasetError> {
    let v: Value = serde_json::from_str(text).map_err(|e| violation("$", e.to_string()))?;
    parse_annotation(&v)
}

impl AnnotationRecord {
    /// Back to the document layout, extras included.
    pub fn to_value(&self) -> Value {
        let mut top = self.extras.clone();
        top.insert("task_description".into(), Value::String(self.task_description.clone()));
        let actions = self
            .actions
            .iter()
            .map(|a| {
                let mut m = a.extras.clone();
                let mut fr = Map::new();
                fr.insert("start_frame".into(), a.frame_range.start_raw.clone());
                fr.insert("end_frame".into(), a.frame_range.end_raw.clone());
                m.insert("frame_range".into(), Value::Object(fr));
                for h in &a.hands {
                    let mut hm = h.extras.clone();
                    hm.insert("action_description".into(), Value::String(h.action_description.clone()));
                    let coords: Map<String, Value> = h
                        .coordinates
                        .iter()
                        .map(|c| {
                            let mut cm = c.extras.clone();
                            cm.insert("text".into(), Value::String(c.text.clone()));
                            if let Some(ic) = c.image_coordinates {
                                cm.insert("image_coordinates".into(), serde_json::json!(ic));
                            }
                            if let Some(cc) = c.cartesian_coordinates {
                                cm.insert("cartesian_coordinates".into(), serde_json::json!(cc));
                            }
                            (c.key.clone(), Value::Object(cm))
                        })
                        .collect();
                    hm.insert("coordinate_description".into(), Value::Object(coords));
                    m.insert(h.hand.key().into(), Value::Object(hm));
                }
                Value::Object(m)
            })
            .collect();
        top.insert("action_descriptions".into(), Value::Array(actions));
        if self.camera_intrinsics.is_some() || !self.parameter_extras.is_empty() {
            let mut p = self.parameter_extras.clone();
            if let Some(ci) = &self.camera_intrinsics {
                p.insert("camera_intrinsics".into(), Value::String(ci.clone()));
            }
            top.insert("parameter_data".into(), Value::Object(p));
        }
        Value::Object(top)
    }

    /// Image coordinates outside `k`'s image, as schema paths.
    pub fn out_of_bounds(&self, k: &CameraIntrinsics) -> Vec<String> {
        let mut bad = Vec::new();
        for (i, a) in self.actions.iter().enumerate() {
            for h in &a.hands {
                for c in &h.coordinates {
                    if let Some([u, v]) = c.image_coordinates {
                        if !k.contains(&Pixel::new(u as f64, v as f64)) {
                            bad.push(format!(
                                "$.action_descriptions[{i}].{}.coordinate_description.{}",
                                h.hand.key(),
                                c.key
                            ));
                        }
                    }
                }
            }
        }
        bad
    }
}

// ---------------------------------------------------------------------------
// Sample model
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TaskKind {
    #[serde(rename = "pointing_2d")]
    Pointing2D,
    #[serde(rename = "trajectory_2d")]
    Trajectory2D,
    #[serde(rename = "spatial_3d")]
    Spatial3D,
    #[serde(rename = "depth_3d")]
    Depth3D,
    #[serde(rename = "planning_4d")]
    Planning4D,
}

impl TaskKind {
    pub const ALL: [TaskKind; 5] = [
        TaskKind::Pointing2D,
        TaskKind::Trajectory2D,
        TaskKind::Spatial3D,
        TaskKind::Depth3D,
        TaskKind::Planning4D,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Pointing2D => "pointing_2d",
            TaskKind::Trajectory2D => "trajectory_2d",
            TaskKind::Spatial3D => "spatial_3d",
            TaskKind::Depth3D => "depth_3d",
            TaskKind::Planning4D => "planning_4d",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

/// Eight thousand-scale pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<[u32; 2]>", into = "Vec<[u32; 2]>")]
pub struct Traj2d(pub [[u32; 2]; CANONICAL_LEN]);

impl TryFrom<Vec<[u32; 2]>> for Traj2d {
    type Error = String;
    fn try_from(v: Vec<[u32; 2]>) -> Result<Self, String> {
        let arr: [[u32; 2]; CANONICAL_LEN] = v
            .as_slice()
            .try_into()
            .map_err(|_| format!("traj_2d needs exactly {CANONICAL_LEN} pairs, got {}", v.len()))?;
        if arr.iter().flatten().any(|c| *c > 1000) {
            return Err("traj_2d coordinates must lie in [0, 1000]".into());
        }
        Ok(Traj2d(arr))
    }
}

impl From<Traj2d> for Vec<[u32; 2]> {
    fn from(t: Traj2d) -> Self {
        t.0.to_vec()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Objects {
    pub traj_2d: Traj2d,
}

/// Provenance carried alongside generated samples.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleMeta {
    pub kind: TaskKind,
    pub video_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variation: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSample {
    messages: Vec<Message>,
    images: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    objects: Option<Objects>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    meta: Option<SampleMeta>,
}

/// One training sample: a user/assistant conversation over some images.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawSample", into = "RawSample")]
pub struct SampleRecord {
    pub messages: Vec<Message>,
    pub images: Vec<String>,
    pub objects: Option<Objects>,
    pub meta: Option<SampleMeta>,
}

impl TryFrom<RawSample> for SampleRecord {
    type Error = String;
    fn try_from(r: RawSample) -> Result<Self, String> {
        let s = SampleRecord {
            messages: r.messages,
            images: r.images,
            objects: r.objects,
            meta: r.meta,
        };
        s.validate()?;
        Ok(s)
    }
}

impl From<SampleRecord> for RawSample {
    fn from(s: SampleRecord) -> Self {
        RawSample {
            messages: s.messages,
            images: s.images,
            objects: s.objects,
            meta: s.meta,
        }
    }
}

impl SampleRecord {
    pub fn validate(&self) -> Result<(), String> {
        if self.messages.is_empty() {
            return Err("a sample needs at least one message".into());
        }
        for (i, m) in self.messages.iter().enumerate() {
            let want = if i % 2 == 0 { Role::User } else { Role::Assistant };
            if m.role != want {
                return Err(format!("message {i} should come from {want:?}"));
            }
        }
        Ok(())
    }

    pub fn kind(&self) -> Option<TaskKind> {
        self.meta.as_ref().map(|m| m.kind)
    }

    /// Compact JSON with keys in sorted order.
    pub fn to_canonical_json(&self) -> String {
        canonical_json(&serde_json::to_value(self).expect("samples serialize"))
    }
}

/// Compact serialization with object keys sorted.
pub fn canonical_json(v: &Value) -> String {
    // serde_json's default map is ordered by key
    let sorted: Value = serde_json::from_str(&v.to_string()).expect("round trip");
    sorted.to_string()
}

pub fn parse_sample(text: &str) -> Result<SampleRecord, DatasetError> {
    serde_json::from_str(text).map_err(|e| DatasetError::InvalidSample(e.to_string()))
}

// ---------------------------------------------------------------------------
// Prompt templates
// ---------------------------------------------------------------------------

/// Named prompt templates with `{placeholder}` slots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PromptTemplates(pub BTreeMap<String, String>);

impl Default for PromptTemplates {
    fn default() -> Self {
        serde_json::from_str(BUNDLED_PROMPTS).expect("bundled prompts are valid")
    }
}

impl PromptTemplates {
    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        serde_json::from_str(&text).map_err(|e| io_err(path, e))
    }

    pub fn render(&self, name: &str, slots: &[(&str, &str)]) -> Result<String, DatasetError> {
        let mut s = self
            .0
            .get(name)
            .ok_or_else(|| DatasetError::MissingTemplate(name.to_string()))?
            .clone();
        for (k, v) in slots {
            s = s.replace(&format!("{{{k}}}"), v);
        }
        Ok(s)
    }
}

// ---------------------------------------------------------------------------
// Generation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenParams {
    /// Minimum coordinate gap for a spatial relation, meters.
    pub dead_zone: f64,
    /// Allowed disagreement between projected 3D and stored 2D labels, pixels.
    pub consistency_px: f64,
    pub depth_decimals: u32,
    pub anchor_tolerance: f64,
    pub extract: ExtractParams,
    /// Observed prefix lengths for remaining-trajectory samples.
    pub remaining_prefixes: Vec<usize>,
}

impl Default for GenParams {
    fn default() -> Self {
        Self {
            dead_zone: DEFAULT_DEAD_ZONE,
            consistency_px: DEFAULT_CONSISTENCY_PX,
            depth_decimals: DEFAULT_DEPTH_DECIMALS,
            anchor_tolerance: trajectory::DEFAULT_ANCHOR_TOLERANCE,
            extract: ExtractParams::default(),
            remaining_prefixes: (2..=6).collect(),
        }
    }
}

/// Everything the generators need to know about one video.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoContext {
    pub id: String,
    pub intrinsics: CameraIntrinsics,
    /// Annotation frame → camera frame.
    pub extrinsic: RigidTransform,
    pub extrinsic_given: bool,
    pub task: Option<String>,
    pub variation: Option<String>,
    /// Relative image path of each referenced frame.
    pub frame_images: BTreeMap<u64, String>,
}

impl VideoContext {
    pub fn new(id: impl Into<String>, intrinsics: CameraIntrinsics) -> Self {
        Self {
            id: id.into(),
            intrinsics,
            extrinsic: RigidTransform::identity(),
            extrinsic_given: false,
            task: None,
            variation: None,
            frame_images: BTreeMap::new(),
        }
    }

    pub fn image(&self, frame: u64) -> String {
        self.frame_images
            .get(&frame)
            .cloned()
            .unwrap_or_else(|| format!("data/{}/rgb/frame_{frame:03}.jpg", self.id))
    }

    fn meta(&self, kind: TaskKind) -> Option<SampleMeta> {
        Some(SampleMeta {
            kind,
            video_id: self.id.clone(),
            task: self.task.clone(),
            variation: self.variation.clone(),
        })
    }
}

/// A sample that could not be generated, and why.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkipNote {
    pub video_id: String,
    pub kind: TaskKind,
    pub action: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entry: Option<String>,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Generated {
    pub samples: Vec<SampleRecord>,
    pub skipped: Vec<SkipNote>,
}

impl Generated {
    fn extend(&mut self, other: Generated) {
        self.samples.extend(other.samples);
        self.skipped.extend(other.skipped);
    }
}

fn conversation(
    user: String,
    assistant: String,
    images: Vec<String>,
    objects: Option<Objects>,
    meta: Option<SampleMeta>,
) -> SampleRecord {
    SampleRecord {
        messages: vec![
            Message {
                role: Role::User,
                content: format!("<image>{user}"),
            },
            Message {
                role: Role::Assistant,
                content: assistant,
            },
        ],
        images,
        objects,
        meta,
    }
}

fn format_pairs(pairs: &[[u32; 2]]) -> String {
    let inner: Vec<String> = pairs.iter().map(|p| format!("[{}, {}]", p[0], p[1])).collect();
    format!("[{}]", inner.join(", "))
}

/// One pointing sample per coordinate entry.
pub fn gen_pointing(
    r: &AnnotationRecord,
    ctx: &VideoContext,
    templates: &PromptTemplates,
    params: &GenParams,
) -> Result<Generated, DatasetError> {
    let k = &ctx.intrinsics;
    let mut out = Generated::default();
    for (ai, a) in r.actions.iter().enumerate() {
        for e in a.entries() {
            let skip = |reason: String| SkipNote {
                video_id: ctx.id.clone(),
                kind: TaskKind::Pointing2D,
                action: ai,
                entry: Some(e.key.clone()),
                reason,
            };
            let projected = match e.position() {
                Some(p) => match project(p, k, &ctx.extrinsic) {
                    Ok(px) => Some(px),
                    Err(err) => {
                        out.skipped.push(skip(format!("cannot project 3D label: {err}")));
                        continue;
                    }
                },
                None => None,
            };
            let stored = e.image_coordinates.map(|[u, v]| Pixel::new(u as f64, v as f64));
            if let (Some(a), Some(b)) = (projected, stored) {
                let gap = a.distance(&b);
                if gap > params.consistency_px {
                    out.skipped.push(skip(format!("inconsistent: 3D label projects {gap:.2} px from the 2D label")));
                    continue;
                }
            }
            let point = stored.or(projected).expect("entry has a coordinate");
            if !k.contains(&point) {
                out.skipped.push(skip(format!("point ({}, {}) lies outside the image", point.u, point.v)));
                continue;
            }
            let q = to_thousand(point, k).expect("finite point");
            let user = templates.render("pointing", &[("object", &e.text)])?;
            out.samples.push(conversation(
                user,
                format!("[{}, {}]", q[0], q[1]),
                vec![ctx.image(a.frame_range.start)],
                None,
                ctx.meta(TaskKind::Pointing2D),
            ));
        }
    }
    Ok(out)
}

/// Canonical thousand-scale 2D trajectory of a keypoint track.
pub fn track_to_traj2d(t: &Track2D, k: &CameraIntrinsics, params: &ExtractParams) -> Result<Traj2d, TrajectoryError> {
    let ex = trajectory::extract_2d(t, k, params)?;
    let canon = ex.canonical()?;
    Ok(Traj2d(canon.to_thousand(k)?))
}

/// One trajectory sample per action with a track (`tracks[i]` belongs to
/// action `i`).
pub fn gen_trajectory(
    r: &AnnotationRecord,
    tracks: &[Option<Track2D>],
    ctx: &VideoContext,
    templates: &PromptTemplates,
    params: &GenParams,
) -> Result<Generated, DatasetError> {
    let mut out = Generated::default();
    for (ai, a) in r.actions.iter().enumerate() {
        let Some(Some(t)) = tracks.get(ai) else { continue };
        match track_to_traj2d(t, &ctx.intrinsics, &params.extract) {
            Ok(traj) => {
                let user = templates.render("trajectory", &[("task", &a.description())])?;
                out.samples.push(conversation(
                    user,
                    format_pairs(&traj.0),
                    vec![ctx.image(a.frame_range.start)],
                    Some(Objects { traj_2d: traj }),
                    ctx.meta(TaskKind::Trajectory2D),
                ));
            }
            Err(e) => out.skipped.push(SkipNote {
                video_id: ctx.id.clone(),
                kind: TaskKind::Trajectory2D,
                action: ai,
                entry: None,
                reason: e.to_string(),
            }),
        }
    }
    Ok(out)
}

fn round_to(x: f64, decimals: u32) -> f64 {
    let s = 10f64.powi(decimals as i32);
    (x * s).round() / s
}

/// Anchor depth and relative offsets of a camera-frame trajectory, rounded.
pub fn depth_targets(points: &[Point3; CANONICAL_LEN], decimals: u32) -> (f64, [f64; CANONICAL_LEN - 1]) {
    let d_start = round_to(points[0].z, decimals);
    let offsets = std::array::from_fn(|i| round_to(points[i + 1].z - d_start, decimals));
    (d_start, offsets)
}

pub fn format_depth_answer(d_start: f64, offsets: &[f64], decimals: u32) -> String {
    let p = decimals as usize;
    let offs: Vec<String> = offsets.iter().map(|o| format!("{:.p$}", o + 0.0)).collect();
    format!("d_start: {d_start:.p$}; offsets: [{}]", offs.join(", "))
}

/// Depth samples: the 3D trajectory of each tracked action, projected back to
/// pixels for the prompt, with the anchor depth and offsets as the answer.
/// `depths[i]` is the depth map aligned with action `i`'s start frame.
pub fn gen_depth(
    r: &AnnotationRecord,
    tracks: &[Option<Track2D>],
    depths: &[Option<DepthMap>],
    ctx: &VideoContext,
    templates: &PromptTemplates,
    params: &GenParams,
) -> Result<Generated, DatasetError> {
    let k = &ctx.intrinsics;
    let mut out = Generated::default();
    for (ai, a) in r.actions.iter().enumerate() {
        let (Some(Some(t)), Some(Some(d))) = (tracks.get(ai), depths.get(ai)) else {
            continue;
        };
        let skip = |reason: String| SkipNote {
            video_id: ctx.id.clone(),
            kind: TaskKind::Depth3D,
            action: ai,
            entry: None,
            reason,
        };
        let canon = match trajectory::extract(t, d, k, &params.extract).and_then(|e| e.canonical()) {
            Ok(c) => c,
            Err(e) => {
                out.skipped.push(skip(e.to_string()));
                continue;
            }
        };
        let pts = canon.points();
        let (d_start, offsets) = depth_targets(pts, params.depth_decimals);
        let pixels: Result<Vec<Pixel>, _> = pts.iter().map(|p| project(*p, k, &RigidTransform::identity())).collect();
        let pixels = match pixels {
            Ok(p) if p.iter().all(|q| k.contains(q)) => p,
            _ => {
                out.skipped.push(skip("trajectory leaves the image".into()));
                continue;
            }
        };
        let anchor_ok = trajectory::DepthAnchor::new(d_start, offsets).is_ok()
            && sample_depth(d, pixels[0]).is_some_and(|z| (z - d_start).abs() <= params.anchor_tolerance);
        if !anchor_ok {
            out.skipped.push(skip(format!("invalid anchor depth {d_start}")));
            continue;
        }
        let pairs: [[u32; 2]; CANONICAL_LEN] = std::array::from_fn(|i| to_thousand(pixels[i], k).expect("inside image"));
        let user = templates.render(
            "depth",
            &[("task", &a.description()), ("trajectory", &format_pairs(&pairs))],
        )?;
        out.samples.push(conversation(
            user,
            format_depth_answer(d_start, &offsets, params.depth_decimals),
            vec![ctx.image(a.frame_range.start)],
            Some(Objects { traj_2d: Traj2d(pairs) }),
            ctx.meta(TaskKind::Depth3D),
        ));
    }
    Ok(out)
}

/// Pairwise relation of `a` to `b` in the camera frame (+x right, +y down,
/// +z forward).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    LeftOf,
    RightOf,
    Above,
    Below,
    InFrontOf,
    Behind,
    Nearer,
    Farther,
}

impl Relation {
    pub fn phrase(self) -> &'static str {
        match self {
            Relation::LeftOf => "left of",
            Relation::RightOf => "right of",
            Relation::Above => "above",
            Relation::Below => "below",
            Relation::InFrontOf => "in front of",
            Relation::Behind => "behind",
            Relation::Nearer => "nearer to the camera than",
            Relation::Farther => "farther from the camera than",
        }
    }

    /// The two mutually exclusive relations along this relation's axis.
    pub fn axis_options(self) -> [Relation; 2] {
        use Relation::*;
        match self {
            LeftOf | RightOf => [LeftOf, RightOf],
            Above | Below => [Above, Below],
            InFrontOf | Behind => [InFrontOf, Behind],
            Nearer | Farther => [Nearer, Farther],
        }
    }
}

/// Relations holding between two camera-frame positions; an axis whose gap
/// is within `dead_zone` contributes nothing.
pub fn spatial_relations(a: Point3, b: Point3, dead_zone: f64) -> Vec<Relation> {
    let axes = [
        (a.x - b.x, Relation::LeftOf, Relation::RightOf),
        (a.y - b.y, Relation::Above, Relation::Below),
        (a.z - b.z, Relation::InFrontOf, Relation::Behind),
        (a.norm() - b.norm(), Relation::Nearer, Relation::Farther),
    ];
    axes.iter()
        .filter(|(d, _, _)| d.abs() > dead_zone)
        .map(|(d, neg, pos)| if *d < 0.0 { *neg } else { *pos })
        .collect()
}

/// Multiple-choice relation questions over every pair of labeled 3D entries.
pub fn gen_spatial(
    r: &AnnotationRecord,
    ctx: &VideoContext,
    templates: &PromptTemplates,
    params: &GenParams,
) -> Result<Generated, DatasetError> {
    let mut out = Generated::default();
    for (ai, a) in r.actions.iter().enumerate() {
        let entities: Vec<(&str, Point3)> = a
            .entries()
            .filter_map(|e| e.position().map(|p| (e.text.as_str(), ctx.extrinsic.apply(p))))
            .collect();
        for i in 0..entities.len() {
            for j in i + 1..entities.len() {
                let ((na, pa), (nb, pb)) = (entities[i], entities[j]);
                if na == nb {
                    continue;
                }
                for rel in spatial_relations(pa, pb, params.dead_zone) {
                    let opts = rel.axis_options();
                    let options = format!("(A) {} (B) {}", opts[0].phrase(), opts[1].phrase());
                    let letter = if opts[0] == rel { "A" } else { "B" };
                    let user = templates.render("spatial", &[("a", na), ("b", nb), ("options", &options)])?;
                    out.samples.push(conversation(
                        user,
                        format!("({letter}) '{na}' is {} '{nb}'", rel.phrase()),
                        vec![ctx.image(a.frame_range.start)],
                        None,
                        ctx.meta(TaskKind::Spatial3D),
                    ));
                }
            }
        }
        if entities.len() < 2 {
            out.skipped.push(SkipNote {
                video_id: ctx.id.clone(),
                kind: TaskKind::Spatial3D,
                action: ai,
                entry: None,
                reason: "fewer than two entities with 3D positions".into(),
            });
        }
    }
    Ok(out)
}

/// Progress answer for step `step` (1-based) of `total`.
pub fn progress_answer(step: usize, total: usize) -> String {
    format!("{{\"step\": {step}, \"total\": {total}, \"finished\": {}}}", step == total)
}

/// Step-order and progress samples over the actions of one video, plus
/// remaining-trajectory samples for actions with tracks.
pub fn gen_planning(
    r: &AnnotationRecord,
    tracks: &[Option<Track2D>],
    ctx: &VideoContext,
    templates: &PromptTemplates,
    params: &GenParams,
) -> Result<Generated, DatasetError> {
    let mut out = Generated::default();
    let n = r.actions.len();
    let task = r.task_description.as_str();
    for (i, a) in r.actions.iter().enumerate() {
        let step = a.description();
        let img = vec![ctx.image(a.frame_range.start)];
        let next = r.actions.get(i + 1).map(|b| b.description()).unwrap_or_else(|| NONE_SENTINEL.into());
        let prev = if i == 0 { NONE_SENTINEL.into() } else { r.actions[i - 1].description() };
        for (tpl, answer) in [("next_step", next), ("previous_step", prev)] {
            let user = templates.render(tpl, &[("task", task), ("step", &step)])?;
            out.samples
                .push(conversation(user, answer, img.clone(), None, ctx.meta(TaskKind::Planning4D)));
        }
        let user = templates.render("progress", &[("task", task), ("step", &step)])?;
        out.samples.push(conversation(
            user,
            progress_answer(i + 1, n),
            img.clone(),
            None,
            ctx.meta(TaskKind::Planning4D),
        ));

        let Some(Some(t)) = tracks.get(i) else { continue };
        let traj = match track_to_traj2d(t, &ctx.intrinsics, &params.extract) {
            Ok(tr) => tr,
            Err(e) => {
                out.skipped.push(SkipNote {
                    video_id: ctx.id.clone(),
                    kind: TaskKind::Planning4D,
                    action: i,
                    entry: None,
                    reason: e.to_string(),
                });
                continue;
            }
        };
        for &j in &params.remaining_prefixes {
            if j == 0 || j >= CANONICAL_LEN {
                continue;
            }
            let user = templates.render(
                "remaining",
                &[
                    ("task", &step),
                    ("observed", &j.to_string()),
                    ("remaining", &(CANONICAL_LEN - j).to_string()),
                    ("trajectory", &format_pairs(&traj.0[..j])),
                ],
            )?;
            out.samples.push(conversation(
                user,
                format_pairs(&traj.0[j..]),
                img.clone(),
                Some(Objects { traj_2d: traj }),
                ctx.meta(TaskKind::Planning4D),
            ));
        }
    }
    Ok(out)
}

/// Every generator over one video, in kind order.
pub fn generate_video(
    r: &AnnotationRecord,
    tracks: &[Option<Track2D>],
    depths: &[Option<DepthMap>],
    ctx: &VideoContext,
    templates: &PromptTemplates,
    params: &GenParams,
) -> Result<Generated, DatasetError> {
    let mut out = gen_pointing(r, ctx, templates, params)?;
    out.extend(gen_trajectory(r, tracks, ctx, templates, params)?);
    out.extend(gen_spatial(r, ctx, templates, params)?);
    out.extend(gen_depth(r, tracks, depths, ctx, templates, params)?);
    out.extend(gen_planning(r, tracks, ctx, templates, params)?);
    Ok(out)
}

/// Inverse of the pointing answer format, back to pixels.
pub fn parse_point_answer(s: &str, k: &CameraIntrinsics) -> Option<Pixel> {
    let v: Vec<u32> = serde_json::from_str(s).ok()?;
    (v.len() == 2).then(|| from_thousand([v[0], v[1]], k))
}

// ---------------------------------------------------------------------------
// Splits
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSplit {
    pub seen: Vec<String>,
    pub unseen: Vec<String>,
}

/// Seen/unseen variation labels per task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SplitSpec(pub BTreeMap<String, TaskSplit>);

impl SplitSpec {
    pub fn bundled() -> Self {
        Self::from_json(BUNDLED_SPLITS).expect("bundled split spec is valid")
    }

    pub fn from_json(text: &str) -> Result<Self, DatasetError> {
        let s: SplitSpec = serde_json::from_str(text).map_err(|e| violation("$", e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        for (task, split) in &self.0 {
            let seen: BTreeSet<&String> = split.seen.iter().collect();
            if let Some(l) = split.unseen.iter().find(|l| seen.contains(l)) {
                return Err(DatasetError::OverlappingSplit {
                    task: task.clone(),
                    label: l.clone(),
                });
            }
        }
        Ok(())
    }

    /// True for unseen, false for seen.
    pub fn is_unseen(&self, task: &str, variation: &str) -> Result<bool, DatasetError> {
        let split = self.0.get(task).ok_or_else(|| DatasetError::UnknownTask(task.to_string()))?;
        if split.unseen.iter().any(|l| l == variation) {
            Ok(true)
        } else if split.seen.iter().any(|l| l == variation) {
            Ok(false)
        } else {
            Err(DatasetError::UnknownVariation {
                task: task.to_string(),
                variation: variation.to_string(),
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SplitResult {
    pub seen: Vec<SampleRecord>,
    pub unseen: Vec<SampleRecord>,
    /// task → (seen, unseen) sample counts.
    pub counts: BTreeMap<String, (usize, usize)>,
}

pub fn apply_split(samples: Vec<SampleRecord>, spec: &SplitSpec) -> Result<SplitResult, DatasetError> {
    let mut out = SplitResult::default();
    for s in samples {
        let (task, variation) = match &s.meta {
            Some(SampleMeta {
                task: Some(t),
                variation: Some(v),
                ..
            }) => (t.clone(), v.clone()),
            _ => return Err(DatasetError::MissingVariation),
        };
        let entry = out.counts.entry(task.clone()).or_default();
        if spec.is_unseen(&task, &variation)? {
            entry.1 += 1;
            out.unseen.push(s);
        } else {
            entry.0 += 1;
            out.seen.push(s);
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Writing and reading samples
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShardMode {
    /// One pretty-printed JSON document per sample.
    PerFile,
    /// JSON-lines shards of at most `shard_size` samples.
    JsonLines { shard_size: usize },
}

/// Writes samples under `dir` with sorted keys; returns the files written.
pub fn write_samples(samples: &[SampleRecord], dir: &Path, mode: ShardMode, prefix: &str) -> Result<Vec<PathBuf>, DatasetError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let mut written = Vec::new();
    match mode {
        ShardMode::PerFile => {
            for (i, s) in samples.iter().enumerate() {
                let path = dir.join(format!("{prefix}{i:06}.json"));
                let v: Value = serde_json::from_str(&s.to_canonical_json()).expect("canonical json");
                let mut text = serde_json::to_string_pretty(&v).expect("serializable");
                text.push('\n');
                fs::write(&path, text).map_err(|e| io_err(&path, e))?;
                written.push(path);
            }
        }
        ShardMode::JsonLines { shard_size } => {
            let size = shard_size.max(1);
            for (i, chunk) in samples.chunks(size).enumerate() {
                let path = dir.join(format!("{prefix}{i:04}.jsonl"));
                let mut f = std::io::BufWriter::new(fs::File::create(&path).map_err(|e| io_err(&path, e))?);
                for s in chunk {
                    writeln!(f, "{}", s.to_canonical_json()).map_err(|e| io_err(&path, e))?;
                }
                f.flush().map_err(|e| io_err(&path, e))?;
                written.push(path);
            }
        }
    }
    Ok(written)
}

/// Reads a `.json` document or a `.jsonl` shard.
pub fn read_samples(path: &Path) -> Result<Vec<SampleRecord>, DatasetError> {
    let bad = |line: usize, e: DatasetError| io_err(path, format!("line {line}: {e}"));
    if path.extension().and_then(|e| e.to_str()) == Some("jsonl") {
        let f = fs::File::open(path).map_err(|e| io_err(path, e))?;
        let mut out = Vec::new();
        for (i, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| io_err(path, e))?;
            if !line.trim().is_empty() {
                out.push(parse_sample(&line).map_err(|e| bad(i + 1, e))?);
            }
        }
        Ok(out)
    } else {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        Ok(vec![parse_sample(&text).map_err(|e| bad(1, e))?])
    }
}

// ---------------------------------------------------------------------------
// Dataset directories
// ---------------------------------------------------------------------------

/// Raw inputs of one video directory.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoInput {
    pub record: AnnotationRecord,
    pub context: VideoContext,
    pub tracks: Vec<Option<Track2D>>,
    pub depths: Vec<Option<DepthMap>>,
}

#[derive(Debug, Clone, PartialEq, Default, Deserialize)]
struct VideoMeta {
    task: Option<String>,
    variation: Option<String>,
}

fn find_frame(dir: &Path, frame: u64, exts: &[&str]) -> Option<PathBuf> {
    exts.iter()
        .map(|e| dir.join(format!("frame_{frame:03}.{e}")))
        .find(|p| p.is_file())
}

/// Loads `root/data/<id>/`.
pub fn load_video(root: &Path, id: &str) -> Result<VideoInput, DatasetError> {
    let vdir = root.join("data").join(id);
    let info = vdir.join("info.json");
    let text = fs::read_to_string(&info).map_err(|e| io_err(&info, e))?;
    let record = parse_annotation_str(&text).map_err(|e| io_err(&info, e))?;
    let intrinsics = raster::read_intrinsics(&vdir.join("intrinsics.json"))?;
    let mut ctx = VideoContext::new(id, intrinsics);

    let ext_path = vdir.join("extrinsic.json");
    if ext_path.is_file() {
        let t = fs::read_to_string(&ext_path).map_err(|e| io_err(&ext_path, e))?;
        ctx.extrinsic = serde_json::from_str(&t).map_err(|e| io_err(&ext_path, e))?;
        ctx.extrinsic_given = true;
    }
    let meta_path = vdir.join("meta.json");
    if meta_path.is_file() {
        let t = fs::read_to_string(&meta_path).map_err(|e| io_err(&meta_path, e))?;
        let m: VideoMeta = serde_json::from_str(&t).map_err(|e| io_err(&meta_path, e))?;
        ctx.task = m.task;
        ctx.variation = m.variation;
    }

    let rgb_dir = vdir.join("rgb");
    let depth_dir = vdir.join("depth");
    let mut tracks = Vec::with_capacity(record.actions.len());
    let mut depths = Vec::with_capacity(record.actions.len());
    for (i, a) in record.actions.iter().enumerate() {
        let f = a.frame_range.start;
        if let Some(p) = find_frame(&rgb_dir, f, &["jpg", "png", "jpeg"]) {
            let name = p.file_name().unwrap().to_string_lossy().to_string();
            ctx.frame_images.insert(f, format!("data/{id}/rgb/{name}"));
        }
        let tp = vdir.join("tracks").join(format!("action_{i}.json"));
        tracks.push(if tp.is_file() {
            let t = fs::read_to_string(&tp).map_err(|e| io_err(&tp, e))?;
            Some(serde_json::from_str::<Track2D>(&t).map_err(|e| io_err(&tp, e))?)
        } else {
            None
        });
        depths.push(match find_frame(&depth_dir, f, &["png", "f32"]) {
            Some(p) => Some(raster::read_depth(&p, DEPTH_UNITS_PER_METER)?),
            None => None,
        });
    }
    Ok(VideoInput {
        record,
        context: ctx,
        tracks,
        depths,
    })
}

/// Sorted ids of the video directories under `root/data`.
pub fn list_videos(root: &Path) -> Result<Vec<String>, DatasetError> {
    let data = root.join("data");
    let mut ids: Vec<String> = fs::read_dir(&data)
        .map_err(|e| io_err(&data, e))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().join("info.json").is_file())
        .map(|e| e.file_name().to_string_lossy().to_string())
        .collect();
    ids.sort();
    Ok(ids)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub videos: usize,
    pub samples: usize,
    pub counts: BTreeMap<String, usize>,
    /// kind → split → count, when a split spec was applied.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub split_counts: BTreeMap<String, BTreeMap<String, usize>>,
    pub files: Vec<String>,
    pub skipped: Vec<SkipNote>,
    pub flags: Vec<String>,
    /// Kinds requested; empty means all.
    pub kinds: Vec<TaskKind>,
    pub params: GenParams,
}

pub struct GenerateOptions<'a> {
    pub params: GenParams,
    pub templates: PromptTemplates,
    pub split: Option<&'a SplitSpec>,
    /// Kinds to keep; empty keeps all.
    pub kinds: Vec<TaskKind>,
    pub shard: ShardMode,
    pub exec: ExecMode,
}

/// Generates samples for every video under `root` and writes them with a
/// `manifest.json` to `out`. Videos are processed in parallel; output order
/// and bytes do not depend on the schedule.
pub fn generate_dataset(root: &Path, out: &Path, opts: &GenerateOptions) -> Result<Manifest, DatasetError> {
    let ids = list_videos(root)?;
    let results = exec::map_slice(opts.exec, &ids, |id| {
        let v = load_video(root, id)?;
        let g = generate_video(&v.record, &v.tracks, &v.depths, &v.context, &opts.templates, &opts.params)?;
        Ok::<_, DatasetError>((v.context.extrinsic_given, g))
    });
    let mut all = Generated::default();
    let mut flags = BTreeSet::new();
    let mut failures = Vec::new();
    for (id, r) in ids.iter().zip(results) {
        match r {
            Ok((given, g)) => {
                if !given {
                    flags.insert(format!("{id}: cartesian labels assumed to be in the camera frame"));
                }
                all.extend(g);
            }
            Err(e) => failures.push(e.to_string()),
        }
    }
    if !failures.is_empty() {
        return Err(DatasetError::InvalidVideos(failures));
    }
    if !opts.kinds.is_empty() {
        all.samples.retain(|s| s.kind().is_some_and(|k| opts.kinds.contains(&k)));
        all.skipped.retain(|n| opts.kinds.contains(&n.kind));
    }

    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for s in &all.samples {
        if let Some(k) = s.kind() {
            *counts.entry(k.name().to_string()).or_default() += 1;
        }
    }

    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    let mut files = Vec::new();
    let mut split_counts: BTreeMap<String, BTreeMap<String, usize>> = BTreeMap::new();
    let mut write = |samples: &[SampleRecord], sub: &str| -> Result<(), DatasetError> {
        for kind in TaskKind::ALL {
            let of_kind: Vec<SampleRecord> = samples.iter().filter(|s| s.kind() == Some(kind)).cloned().collect();
            if of_kind.is_empty() {
                continue;
            }
            let dir = if sub.is_empty() { out.to_path_buf() } else { out.join(sub) };
            let prefix = format!("{}_", kind.name());
            for p in write_samples(&of_kind, &dir, opts.shard, &prefix)? {
                files.push(p.strip_prefix(out).unwrap_or(&p).to_string_lossy().replace('\\', "/"));
            }
            if !sub.is_empty() {
                *split_counts
                    .entry(kind.name().to_string())
                    .or_default()
                    .entry(sub.to_string())
                    .or_default() += of_kind.len();
            }
        }
        Ok(())
    };
    let total = all.samples.len();
    match opts.split {
        Some(spec) => {
            let s = apply_split(all.samples, spec)?;
            write(&s.seen, "seen")?;
            write(&s.unseen, "unseen")?;
        }
        None => write(&all.samples, "")?,
    }

    let manifest = Manifest {
        videos: ids.len(),
        samples: total,
        counts,
        split_counts,
        files,
        skipped: all.skipped,
        flags: flags.into_iter().collect(),
        kinds: opts.kinds.clone(),
        params: opts.params.clone(),
    };
    let mpath = out.join("manifest.json");
    let mut text = serde_json::to_string_pretty(&manifest).expect("serializable");
    text.push('\n');
    fs::write(&mpath, text).map_err(|e| io_err(&mpath, e))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    const INFO: &str = r#"{
      "task_description": "Pouring Water",
      "action_descriptions": [{
        "frame_range": {"start_frame": "frame1", "end_frame": "frame8"},
        "left_description": {
          "action_description": "Pick up the coffee goblet",
          "coordinate_description": {
            "coordinate_0": {
              "text": "Pick up the coffee goblet",
              "image_coordinates": [417, 170],
              "cartesian_coordinates": [-0.031, -0.115, 0.674, 0.153, 0.013, 0.633]
            }
          }
        }
      }],
      "parameter_data": {"camera_intrinsics": "[[427.17, ...]]"}
    }"#;

    fn k848() -> CameraIntrinsics {
        CameraIntrinsics::new(427.17, 427.17, 436.647, 242.885, 848, 480).unwrap()
    }

    #[test]
    fn parses_reference_document() {
        let r = parse_annotation_str(INFO).unwrap();
        assert_eq!(r.task_description, "Pouring Water");
        let e = &r.actions[0].hands[0].coordinates[0];
        assert_eq!(e.image_coordinates, Some([417, 170]));
        assert_eq!(e.cartesian_coordinates, Some([-0.031, -0.115, 0.674, 0.153, 0.013, 0.633]));
        assert_eq!((r.actions[0].frame_range.start, r.actions[0].frame_range.end), (1, 8));
        assert_eq!(r.camera_intrinsics.as_deref(), Some("[[427.17, ...]]"));
        let back = parse_annotation(&r.to_value()).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn schema_violations_carry_paths() {
        let empty = r#"{"task_description": "x", "action_descriptions": []}"#;
        match parse_annotation_str(empty) {
            Err(DatasetError::SchemaViolation { path, .. }) => assert_eq!(path, "$.action_descriptions"),
            other => panic!("{other:?}"),
        }
        let reversed = INFO.replace("\"frame8\"", "\"frame0\"");
        match parse_annotation_str(&reversed) {
            Err(DatasetError::SchemaViolation { path, .. }) => {
                assert_eq!(path, "$.action_descriptions[0].frame_range")
            }
            other => panic!("{other:?}"),
        }
        let bad_coord = INFO.replace("[417, 170]", "[417.5, 170]");
        match parse_annotation_str(&bad_coord) {
            Err(DatasetError::SchemaViolation { path, .. }) => assert!(path.ends_with("image_coordinates[0]")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn extras_are_preserved() {
        let doc = INFO.replacen("{", "{\"annotator\": \"a7\",", 1);
        let r = parse_annotation_str(&doc).unwrap();
        assert_eq!(r.extras["annotator"], "a7");
        assert_eq!(r.to_value()["annotator"], "a7");
    }

    #[test]
    fn pointing_from_reference_document() {
        let r = parse_annotation_str(INFO).unwrap();
        let ctx = VideoContext::new("0001", k848());
        let g = gen_pointing(&r, &ctx, &PromptTemplates::default(), &GenParams::default()).unwrap();
        assert_eq!(g.samples.len(), 1, "{:?}", g.skipped);
        assert_eq!(g.samples[0].messages[1].content, "[492, 354]");

        // a principal point 10 px off breaks 3D/2D agreement
        let shifted = CameraIntrinsics::new(427.17, 427.17, 446.647, 242.885, 848, 480).unwrap();
        let g = gen_pointing(&r, &VideoContext::new("0001", shifted), &PromptTemplates::default(), &GenParams::default()).unwrap();
        assert!(g.samples.is_empty());
        assert!(g.skipped[0].reason.starts_with("inconsistent"));
    }

    #[test]
    fn spatial_sign_rule() {
        let rels = spatial_relations(Point3::new(-0.1, 0.0, 1.0), Point3::new(0.1, 0.0, 1.0), 0.02);
        assert_eq!(rels, vec![Relation::LeftOf]);
        let rels = spatial_relations(Point3::new(0.0, 0.0, 1.0), Point3::new(0.015, 0.0, 1.0), 0.02);
        assert!(rels.is_empty());
    }

    #[test]
    fn planning_single_episode() {
        let r = parse_annotation_str(INFO).unwrap();
        let ctx = VideoContext::new("0001", k848());
        let g = gen_planning(&r, &[], &ctx, &PromptTemplates::default(), &GenParams::default()).unwrap();
        let answers: Vec<&str> = g.samples.iter().map(|s| s.messages[1].content.as_str()).collect();
        assert_eq!(answers, vec!["none", "none", "{\"step\": 1, \"total\": 1, \"finished\": true}"]);
    }

    #[test]
    fn sample_validation() {
        let ok = r#"{"messages":[{"role":"user","content":"hi"},{"role":"assistant","content":"yo"}],"images":[]}"#;
        assert!(parse_sample(ok).is_ok());
        let swapped = ok.replace("\"user\"", "\"tmp\"").replace("\"assistant\"", "\"user\"").replace("\"tmp\"", "\"assistant\"");
        assert!(parse_sample(&swapped).is_err());
        let short = r#"{"messages":[{"role":"user","content":"a"}],"images":[],"objects":{"traj_2d":[[1,2]]}}"#;
        assert!(parse_sample(short).is_err());
        let big = r#"{"messages":[{"role":"user","content":"a"}],"images":[],"objects":{"traj_2d":[[1,2],[1,2],[1,2],[1,2],[1,2],[1,2],[1,2],[1,1001]]}}"#;
        assert!(parse_sample(big).is_err());
    }

    #[test]
    fn split_rules() {
        let spec = SplitSpec::bundled();
        let cj = &spec.0["close_jar"];
        assert_eq!((cj.seen.len() + cj.unseen.len(), cj.seen.len(), cj.unseen.len()), (20, 15, 5));
        assert!(spec.is_unseen("close_jar", "azure").unwrap());
        assert!(!spec.is_unseen("close_jar", "red").unwrap());
        assert!(matches!(
            spec.is_unseen("close_jar", "plaid"),
            Err(DatasetError::UnknownVariation { .. })
        ));
        assert!(SplitSpec::from_json(r#"{"t": {"seen": ["a"], "unseen": ["a"]}}"#).is_err());
    }

    #[test]
    fn depth_answer_format() {
        let pts = std::array::from_fn(|i| Point3::new(0.0, 0.0, 0.5 + 0.01 * i as f64));
        let (d, offs) = depth_targets(&pts, 3);
        assert_eq!(d, 0.5);
        assert_eq!(offs[6], 0.07);
        assert_eq!(
            format_depth_answer(0.5, &[0.0, -0.0, 0.01], 3),
            "d_start: 0.500; offsets: [0.000, 0.000, 0.010]"
        );
    }
}
