use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the library can report.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("coordinate ({lat}, {lon}) lies outside the grid extent")]
    OutOfBounds { lat: f64, lon: f64 },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid station: {0}")]
    InvalidStation(String),
    #[error("need at least 2 stations, got {0}")]
    TooFewStations(usize),
    #[error("no station falls inside the grid extent")]
    AllStationsOutOfBounds,

    #[error("kernel parameter must be positive, got {0}")]
    NonPositiveParam(f64),
    #[error("every kernel weight is zero; the normalized loss is undefined")]
    DegenerateKernel,
    #[error("no valid station remains after masking")]
    EmptyAfterMasking,

    #[error("source frames are not uniformly spaced or the step does not divide: {0}")]
    StepMismatch(String),
    #[error("no target pixel falls inside the source extent")]
    EmptyOverlap,

    #[error("crop window of {size} pixels does not fit a {rows}x{cols} grid")]
    WindowTooLarge { size: usize, rows: usize, cols: usize },
    #[error("no values remain after filtering")]
    EmptyAfterFilter,

    #[error("loss became non-finite at epoch {epoch}")]
    DivergedLoss { epoch: usize },
    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },
    #[error("image of {rows}x{cols} is smaller than the {window}x{window} window")]
    TooSmall { rows: usize, cols: usize, window: usize },
    #[error("requested {requested} stations but the grid only has {available} pixels")]
    TooManyStations { requested: usize, available: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("not an NPY stream (bad magic)")]
    BadMagic,
    #[error("unsupported dtype {0:?}")]
    UnsupportedDtype(String),
    #[error("unsupported NPY version {0}.{1}")]
    UnsupportedVersion(u8, u8),
    #[error("file is truncated")]
    TruncatedFile,
    #[error("malformed NPY header: {0}")]
    BadNpyHeader(String),
    #[error("duplicate archive entry {0:?}")]
    DuplicateEntry(String),
    #[error("archive entry {name:?} uses compression method {method}")]
    UnsupportedCompression { name: String, method: u16 },
    #[error("malformed zip archive: {0}")]
    BadZip(String),
    #[error("bad CSV header, expected `id,lat,lon,value`")]
    BadHeader,
    #[error("bad CSV row at line {line}: {reason}")]
    BadRow { line: usize, reason: String },
    #[error("non-finite or negative value at line {line}")]
    NonFiniteValue { line: usize },
    #[error("malformed metadata: {0}")]
    BadMeta(String),
    #[error("malformed checkpoint: {0}")]
    BadCheckpoint(String),

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    /// Wraps `self` with the name of the pipeline stage that produced it.
    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// The innermost error, looking through stage wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            e => e,
        }
    }

    /// True for failures of the optimization itself rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self.root(),
            Error::DivergedLoss { .. } | Error::DegenerateKernel
        )
    }
}
