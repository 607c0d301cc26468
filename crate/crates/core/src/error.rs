use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("position {position:?} lies outside the scene bound {bound}")]
    OutOfDomain { position: [f64; 3], bound: f64 },

    #[error("non-finite value in {what}")]
    NonFinite { what: String },

    #[error("invalid camera pose: {0}")]
    InvalidPose(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("empty initialization: no grid vertex exceeds iso density {iso_density}")]
    EmptyInitialization { iso_density: f64 },

    #[error("backend `{backend}` requires the `{condition}` condition")]
    MissingCondition { backend: String, condition: &'static str },

    #[error("degenerate depth: zero variance under the mask")]
    DegenerateDepth,

    #[error("unknown backend `{name}` (registered: {})", registered.join(", "))]
    UnknownBackend { name: String, registered: Vec<String> },

    #[error("checkpoint not found: {}", .0.display())]
    CheckpointNotFound(PathBuf),

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("mask required: input image has no alpha channel and no mask file was given")]
    MaskRequired,

    #[error("training diverged at iteration {iteration}: {detail}")]
    Diverged { iteration: u64, detail: String },

    #[error("config: {0}")]
    Config(String),

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable snake_case name of the variant, for structured error output.
    pub fn code(&self) -> &'static str {
        match self {
            Error::OutOfDomain { .. } => "out_of_domain",
            Error::NonFinite { .. } => "non_finite",
            Error::InvalidPose(_) => "invalid_pose",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::ShapeMismatch(_) => "shape_mismatch",
            Error::EmptyInitialization { .. } => "empty_initialization",
            Error::MissingCondition { .. } => "missing_condition",
            Error::DegenerateDepth => "degenerate_depth",
            Error::UnknownBackend { .. } => "unknown_backend",
            Error::CheckpointNotFound(_) => "checkpoint_not_found",
            Error::CorruptCheckpoint(_) => "corrupt_checkpoint",
            Error::MaskRequired => "mask_required",
            Error::Diverged { .. } => "diverged",
            Error::Config(_) => "config",
            Error::Io { .. } => "io",
            Error::Image(_) => "image",
            Error::Json(_) => "json",
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
