use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Every failure the engine can report.
///
/// Variants are grouped by the stage that raises them; the CLI maps each group
/// onto a fixed exit code (see [`Error::exit_code`]).
#[derive(Debug, Error)]
pub enum Error {
    // -- volume I/O and geometry
    #[error("missing file: {}", .0.display())]
    MissingFile(PathBuf),
    #[error("cannot parse header {}: {msg}", .path.display())]
    HeaderParse { path: PathBuf, msg: String },
    #[error("raw payload {} holds {actual} bytes, expected {expected}", .path.display())]
    SizeMismatch {
        path: PathBuf,
        expected: u64,
        actual: u64,
    },
    #[error("non-finite value at voxel {index}")]
    NonFiniteData { index: usize },
    #[error("I/O failure on {}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid volume: {0}")]
    InvalidVolume(String),
    #[error("index {index} out of range for extent {extent}")]
    IndexOutOfRange { index: usize, extent: usize },
    #[error("objects {first} and {second} overlap but the phantom spec forbids overlap")]
    OverlapPolicyViolation { first: usize, second: usize },
    #[error("geometry mismatch: {0}")]
    GeometryMismatch(String),

    // -- encoder
    #[error("non-finite input to encoder")]
    NonFiniteInput,
    #[error("invalid encoder spec: {0}")]
    InvalidEncoderSpec(String),

    // -- retrieval
    #[error("support set is empty")]
    EmptySupportSet,
    #[error("support library is empty")]
    EmptyLibrary,
    #[error("requested j = {j} but the library holds {available} entries")]
    JTooLarge { j: usize, available: usize },
    #[error("encoder fingerprint mismatch: library {library}, query {query}")]
    FingerprintMismatch { library: String, query: String },
    #[error("vector length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("similarity undefined for zero vector or zero-variance input")]
    ZeroVector,
    #[error("malformed library file: {0}")]
    LibraryFormat(String),

    // -- memory / attention / decoder
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("token grid {grid:?} is larger than mask {mask:?}")]
    GridLargerThanMask {
        grid: (usize, usize),
        mask: (usize, usize),
    },
    #[error("at least one anatomical memory block is required")]
    EmptyAnatomicalSet,
    #[error("memory blocks have heterogeneous shapes")]
    HeterogeneousShapes,
    #[error("residual mode key needs equal query and key counts, got {queries} vs {keys}")]
    ResidualModeInvalid { queries: usize, keys: usize },
    #[error("label-transfer decoding requires attention weights")]
    MissingAttn,

    // -- pipeline / eval
    #[error("label {0} is not covered by the support library")]
    LabelUnknown(u16),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("config parse failure: {0}")]
    ConfigParse(String),
    #[error("mask dims differ: {0:?} vs {1:?}")]
    DimMismatch(Vec<usize>, Vec<usize>),
    #[error("need at least 2 volumes to split, got {0}")]
    TooFewVolumes(usize),
    #[error("invalid value {value:?} for ablation axis {axis}")]
    InvalidAxisValue { axis: String, value: String },
    #[error("{0}")]
    Input(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path)
        } else {
            Error::Io { path, source }
        }
    }

    /// Process exit code: 2 input, 3 fingerprint, 4 config, 5 evaluation, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::MissingFile(_)
            | Error::HeaderParse { .. }
            | Error::SizeMismatch { .. }
            | Error::NonFiniteData { .. }
            | Error::InvalidVolume(_)
            | Error::GeometryMismatch(_)
            | Error::EmptySupportSet
            | Error::LibraryFormat(_)
            | Error::Input(_) => 2,
            Error::FingerprintMismatch { .. } => 3,
            Error::ConfigParse(_) | Error::InvalidConfig(_) => 4,
            Error::DimMismatch(..) => 5,
            _ => 1,
        }
    }
}
