//! Synthetic scenes with ground truth, camera model, compositing, file
//! formats and evaluation.

mod camera;
mod composite;
pub mod format;
mod metrics;
mod scene;

use thiserror::Error;

use crate::deform::DeformError;
use crate::spline::SplineError;

pub use camera::{Camera, MIN_PROJECT_DEPTH};
pub use composite::composite_alpha;
pub use metrics::{density_ratio, eval_metrics, label_nodes, Metrics};
pub use scene::{
    gen_scene, parse_scene_config, CameraConfig, MotionKind, NoiseConfig, ObjectConfig, ObjectKind, ObjectTrack,
    PatchConfig, SceneBundle, SceneConfig, TrackSample, Tracklet, TrackletConfig, REFERENCE_SCENE,
};

/// Version written into every file; readers accept any `1.x`.
pub const FORMAT_VERSION: &str = "1.0";
pub const FORMAT_MAJOR: u32 = 1;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum HarnessError {
    #[error("point is behind the camera (depth {depth})")]
    BehindCamera { depth: f64 },
    #[error("depth must be positive, got {depth}")]
    NonPositiveDepth { depth: f64 },
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("{}", fmt_config(.line, .message))]
    InvalidConfig { line: Option<usize>, message: String },
    #[error("line {line}: {message}")]
    Format { line: usize, message: String },
    #[error("unsupported format_version {found} (this build reads {FORMAT_MAJOR}.x)")]
    UnsupportedVersion { found: String },
    #[error("trajectory span [{lo}, {hi}] does not cover the frame times [{need_lo}, {need_hi}]")]
    SpanMismatch { lo: f64, hi: f64, need_lo: f64, need_hi: f64 },
    #[error("{0}")]
    Io(String),
    #[error(transparent)]
    Deform(#[from] DeformError),
    #[error(transparent)]
    Spline(#[from] SplineError),
}

fn fmt_config(line: &Option<usize>, message: &str) -> String {
    match line {
        Some(l) => format!("invalid config, line {l}: {message}"),
        None => format!("invalid config: {message}"),
    }
}

impl From<std::io::Error> for HarnessError {
    fn from(e: std::io::Error) -> Self {
        HarnessError::Io(e.to_string())
    }
}
