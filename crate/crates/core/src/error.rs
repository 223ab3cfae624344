use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image codec error at {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("malformed descriptor {path}: {source}")]
    Descriptor {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("base level required")]
    BaseLevelRequired,
    #[error("level dimension mismatch: level {factor} is {got:?}, expected {expected:?}")]
    LevelDimensionMismatch {
        factor: u32,
        got: (u32, u32),
        expected: (u32, u32),
    },
    #[error("unsupported bit depth in {0}")]
    UnsupportedBitDepth(PathBuf),
    #[error("region {0} out of bounds")]
    OutOfBounds(String),
    #[error("invalid label {0}")]
    InvalidLabel(u8),
    #[error("degenerate histogram")]
    DegenerateHistogram,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("class {0} has no samples")]
    EmptyClass(String),
    #[error("no positive labels")]
    NoPositives,
    #[error("id mismatch: {0}")]
    IdMismatch(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
}

impl Error {
    /// Short machine-readable tag for the error variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Image { .. } => "image",
            Error::Descriptor { .. } => "descriptor",
            Error::Json(_) => "json",
            Error::BaseLevelRequired => "base_level_required",
            Error::LevelDimensionMismatch { .. } => "level_dimension_mismatch",
            Error::UnsupportedBitDepth(_) => "unsupported_bit_depth",
            Error::OutOfBounds(_) => "out_of_bounds",
            Error::InvalidLabel(_) => "invalid_label",
            Error::DegenerateHistogram => "degenerate_histogram",
            Error::DimensionMismatch(_) => "dimension_mismatch",
            Error::EmptyClass(_) => "empty_class",
            Error::NoPositives => "no_positives",
            Error::IdMismatch(_) => "id_mismatch",
            Error::Degenerate(_) => "degenerate",
            Error::InvalidParam(_) => "invalid_param",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
