use std::fmt;

use serde_json::json;
use st_guidance::dataset::DatasetError;
use st_guidance::guidance::GuidanceError;
use st_guidance::metrics::MetricsError;
use st_guidance::raster::RasterError;
use st_guidance::sim::SimError;
use st_guidance::trajectory::TrajectoryError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Category {
    Input,
    Geometry,
    Pipeline,
    Plugin,
}

impl Category {
    pub fn code(self) -> i32 {
        match self {
            Category::Input => 2,
            Category::Geometry => 3,
            Category::Pipeline => 4,
            Category::Plugin => 5,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Category::Input => "input",
            Category::Geometry => "geometry",
            Category::Pipeline => "pipeline",
            Category::Plugin => "plugin",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CliError {
    pub category: Category,
    pub message: String,
}

impl CliError {
    pub fn new(category: Category, message: impl Into<String>) -> Self {
        Self {
            category,
            message: message.into(),
        }
    }

    pub fn input(message: impl Into<String>) -> Self {
        Self::new(Category::Input, message)
    }

    /// Single-line JSON for stderr.
    pub fn to_json(&self) -> String {
        json!({
            "error": self.category.name(),
            "code": self.category.code(),
            "message": self.message,
        })
        .to_string()
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

fn trajectory_category(e: &TrajectoryError) -> Category {
    match e.root() {
        TrajectoryError::Geometry(_) => Category::Geometry,
        TrajectoryError::AllDepthInvalid | TrajectoryError::RankDeficient { .. } | TrajectoryError::ZeroLength => {
            Category::Pipeline
        }
        _ => Category::Input,
    }
}

fn guidance_category(e: &GuidanceError) -> Category {
    match e {
        GuidanceError::Geometry(_) => Category::Geometry,
        GuidanceError::Trajectory(t) => trajectory_category(t),
        GuidanceError::InvalidRadius(_)
        | GuidanceError::InvalidSigma(_)
        | GuidanceError::InvalidThreshold(_)
        | GuidanceError::InvalidAlpha(_)
        | GuidanceError::DimensionMismatch { .. }
        | GuidanceError::UnknownInstance(_)
        | GuidanceError::DuplicateInstance(_) => Category::Input,
        _ => Category::Pipeline,
    }
}

impl From<TrajectoryError> for CliError {
    fn from(e: TrajectoryError) -> Self {
        CliError::new(trajectory_category(&e), e.to_string())
    }
}

impl From<GuidanceError> for CliError {
    fn from(e: GuidanceError) -> Self {
        CliError::new(guidance_category(&e), e.to_string())
    }
}

impl From<RasterError> for CliError {
    fn from(e: RasterError) -> Self {
        CliError::input(e.to_string())
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        CliError::input(e.to_string())
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        match &e {
            DatasetError::Trajectory(t) => CliError::new(trajectory_category(t), e.to_string()),
            _ => CliError::input(e.to_string()),
        }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        let category = match &e {
            SimError::Protocol(_) => Category::Plugin,
            SimError::InvalidConfig(_) | SimError::UnknownScenario(_) | SimError::UnknownEntity(_) => Category::Input,
            SimError::Geometry(_) => Category::Geometry,
            SimError::Trajectory(t) => trajectory_category(t),
            SimError::Guidance(g) => guidance_category(g),
            SimError::Raster(_) => Category::Input,
            _ => Category::Pipeline,
        };
        CliError::new(category, e.to_string())
    }
}

impl From<st_guidance::geometry::GeometryError> for CliError {
    fn from(e: st_guidance::geometry::GeometryError) -> Self {
        CliError::new(Category::Geometry, e.to_string())
    }
}
