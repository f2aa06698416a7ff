use thiserror::Error;

use crate::geometry::Point2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("degenerate hull input: {reason}")]
    DegenerateInput { reason: String },
    #[error("non-finite coordinate in input")]
    NonFinite,
    #[error("ring is not strictly convex at vertex {index}")]
    NotConvex { index: usize },
    #[error("ray origin ({:.4}, {:.4}) is not inside the region", origin.x, origin.y)]
    OriginOutside { origin: Point2 },
    #[error("step length must be positive and finite, got {eta}")]
    InvalidStep { eta: f64 },
    #[error("ray at theta {theta:.4} found no boundary within {steps} steps")]
    NoBoundaryHit { theta: f64, steps: usize },
    #[error("level count {n_levels} out of range")]
    InvalidLevels { n_levels: usize },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProfileError {
    #[error("no z-bin has enough non-collinear samples to form a hull ({retained} samples retained)")]
    InsufficientData { retained: usize },
    #[error("sample timestamps must be strictly increasing (index {index})")]
    NonMonotonicTime { index: usize },
    #[error("empty sample stream")]
    EmptyStream,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CompileError {
    #[error("hull too thin to stretch: boundary distance {distance:.4} below {minimum:.4}{}", bin.map(|b| format!(" in bin {b}")).unwrap_or_default())]
    DegenerateHull {
        bin: Option<usize>,
        distance: f64,
        minimum: f64,
    },
    #[error("invalid grid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported format version {found} (supported up to {supported})")]
    VersionMismatch { found: u32, supported: u32 },
    #[error("truncated or malformed body: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MetricsError {
    #[error("target lists differ between sessions ({base} vs {mapped} targets, first mismatch at {index})")]
    TargetMismatch {
        base: usize,
        mapped: usize,
        index: usize,
    },
}

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("condition {0} requires a compiled remap stack")]
    MissingStack(String),
    #[error("calibration failed: {0}")]
    Calibration(#[from] ProfileError),
    #[error("map compilation failed: {0}")]
    Compile(#[from] CompileError),
    #[error("recording sink failed: {0}")]
    Sink(#[from] std::io::Error),
    #[error("cannot {action} while {state}")]
    OutOfPhase { action: String, state: String },
    #[error("operator stream ended during {0}")]
    StreamEnded(String),
}

#[derive(Debug, Error)]
pub enum ArchiveError {
    #[error("archive version {found} is newer than supported version {supported}")]
    VersionMismatch { found: u32, supported: u32 },
    #[error("archive has no compiled stack but condition {0} needs one")]
    MissingStack(String),
    #[error("archive file {file} failed its integrity check")]
    HashMismatch { file: String },
    #[error("archive is missing {0}")]
    MissingFile(String),
    #[error("malformed record in {file} line {line}: {message}")]
    Malformed {
        file: String,
        line: usize,
        message: String,
    },
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
