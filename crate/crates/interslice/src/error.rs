use std::fmt;
use std::path::PathBuf;

/// Errors emitted anywhere in the crate.
#[derive(Debug)]
pub enum Error {
    /// Tensor shapes do not line up for an operation; `detail` names the offending dimension.
    ShapeMismatch { op: &'static str, detail: String },
    /// A channel-axis operation needs an even channel count.
    OddChannels { op: &'static str, channels: usize },
    /// A spatial dimension is not divisible by the shuffle factor.
    Indivisible { op: &'static str, extent: usize, factor: usize },
    /// An operation produced NaN or Inf.
    NonFinite { op: &'static str },
    /// Input to `exp` exceeds the dtype-safe bound; unbounded scales break invertibility.
    ExpOverflow { value: f64, bound: f64 },
    /// `backward` was called on a non-scalar value.
    NonScalarLoss { shape: Vec<usize> },
    /// A file does not start with the expected magic bytes.
    BadMagic { path: PathBuf, found: [u8; 4], expected: [u8; 4] },
    /// A file carries an unsupported format version.
    BadVersion { path: PathBuf, found: u32, supported: u32 },
    /// Declared dimensions and payload length disagree, or the payload is truncated.
    PayloadSizeMismatch { path: PathBuf, expected: u64, got: u64 },
    /// A file header could not be parsed or fails its internal consistency checks.
    HeaderInvalid { path: PathBuf, detail: String },
    /// A checkpoint does not match the model it is being loaded into.
    CheckpointMismatch { detail: String },
    /// A function argument is out of its documented domain.
    InvalidArgument { detail: String },
    /// A config file or flag set is invalid; `detail` names the key.
    ConfigInvalid { detail: String },
    /// Training aborted (NaN loss/gradient) with diagnostics.
    TrainAbort { iteration: u64, detail: String },
    /// A commanded check ran but its threshold was not met.
    ThresholdFailed { detail: String },
    Io { path: Option<PathBuf>, source: std::io::Error },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: Some(path.into()), source }
    }

    /// Process exit code: 1 assertion/threshold failure, 2 usage/config error, 3 I/O error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidArgument { .. } | Error::ConfigInvalid { .. } => 2,
            Error::Io { .. }
            | Error::BadMagic { .. }
            | Error::BadVersion { .. }
            | Error::PayloadSizeMismatch { .. }
            | Error::HeaderInvalid { .. } => 3,
            _ => 1,
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, detail } => write!(f, "{op}: shape mismatch: {detail}"),
            Error::OddChannels { op, channels } => {
                write!(f, "{op}: channel count {channels} is odd; an even count is required")
            }
            Error::Indivisible { op, extent, factor } => write!(
                f,
                "{op}: spatial extent {extent} is not divisible by {factor}; pad the input first"
            ),
            Error::NonFinite { op } => write!(f, "{op}: produced a non-finite value"),
            Error::ExpOverflow { value, bound } => {
                write!(f, "exp: input {value} exceeds the dtype-safe bound {bound}")
            }
            Error::NonScalarLoss { shape } => {
                write!(f, "backward: loss must be scalar, got shape {shape:?}")
            }
            Error::BadMagic { path, found, expected } => write!(
                f,
                "{}: bad magic {:?}, expected {:?}",
                path.display(),
                String::from_utf8_lossy(found),
                String::from_utf8_lossy(expected)
            ),
            Error::BadVersion { path, found, supported } => write!(
                f,
                "{}: unsupported format version {found} (supported: {supported})",
                path.display()
            ),
            Error::PayloadSizeMismatch { path, expected, got } => write!(
                f,
                "{}: payload size mismatch: header implies {expected} bytes, found {got}",
                path.display()
            ),
            Error::HeaderInvalid { path, detail } => {
                write!(f, "{}: invalid header: {detail}", path.display())
            }
            Error::CheckpointMismatch { detail } => write!(f, "checkpoint mismatch: {detail}"),
            Error::InvalidArgument { detail } => write!(f, "invalid argument: {detail}"),
            Error::ConfigInvalid { detail } => write!(f, "invalid config: {detail}"),
            Error::TrainAbort { iteration, detail } => {
                write!(f, "training aborted at iteration {iteration}: {detail}")
            }
            Error::ThresholdFailed { detail } => write!(f, "check failed: {detail}"),
            Error::Io { path: Some(p), source } => write!(f, "{}: {source}", p.display()),
            Error::Io { path: None, source } => write!(f, "{source}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(source: std::io::Error) -> Self {
        Error::Io { path: None, source }
    }
}
