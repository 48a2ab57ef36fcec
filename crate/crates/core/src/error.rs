use thiserror::Error;

/// Errors raised by the toolkit's operations.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid bounding box ({cx}, {cy}, {w}, {h}): {reason}")]
    InvalidBox {
        cx: f64,
        cy: f64,
        w: f64,
        h: f64,
        reason: &'static str,
    },

    #[error("degenerate pair: both boxes have zero area")]
    DegeneratePair,

    #[error("category index {index} out of range for {num_classes} object categories")]
    CategoryOutOfRange { index: usize, num_classes: usize },

    #[error("capacity exceeded: {len} foreground targets do not fit into {capacity} queries")]
    CapacityExceeded { len: usize, capacity: usize },

    #[error("duplicate foreground target at positions {first} and {second}")]
    DuplicateTarget { first: usize, second: usize },

    #[error("length mismatch: {what} ({left} vs {right})")]
    LengthMismatch {
        what: &'static str,
        left: usize,
        right: usize,
    },

    #[error("non-finite cost at ({row}, {col})")]
    NonFiniteCost { row: usize, col: usize },

    #[error("brute-force matching supports at most {max} rows, got {n}")]
    TooLargeForBruteForce { n: usize, max: usize },

    #[error("invalid assignment: {0}")]
    InvalidAssignment(String),

    #[error("requested {requested} exemplars from a pool of {available}")]
    NotEnoughCandidates { requested: usize, available: usize },

    #[error("malformed setup string {setup:?}: {reason}")]
    MalformedSetup { setup: String, reason: String },

    #[error("invalid phase plan: {0}")]
    InvalidPlan(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("missing old model for phase {phase}")]
    MissingOldModel { phase: usize },

    #[error("phase {phase} has no training images")]
    EmptyPhase { phase: usize },

    #[error("annotation {annotation_id} references unknown image id {image_id}")]
    DanglingImage { annotation_id: u64, image_id: u64 },

    #[error("annotation {annotation_id} references unknown category id {category_id}")]
    DanglingCategory { annotation_id: u64, category_id: u64 },

    #[error("image {image_id} has zero width or height")]
    ZeroImageSize { image_id: u64 },

    #[error("malformed data: {0}")]
    Malformed(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
