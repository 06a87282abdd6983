use std::fmt;
use std::io;

/// Crate-wide result type.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors emitted by tensor ops, the search pipeline, and file I/O.
#[derive(Debug)]
pub enum Error {
    /// Two operands have incompatible shapes.
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// A single operand has an unusable shape for the given op.
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },
    AxisOutOfRange {
        axis: usize,
        rank: usize,
    },
    /// `log` applied to a value <= 0.
    NonPositiveLog,
    /// `backward` called on a non-scalar root.
    NonScalarRoot {
        shape: Vec<usize>,
    },
    NonPositiveTemperature {
        tau: f64,
    },
    /// A weight vector expected on the simplex failed validation.
    SimplexViolation {
        sum: f64,
    },
    WeightCountMismatch {
        expected: usize,
        got: usize,
    },
    /// Exact MAC counting requested on a supernet with soft weights.
    UndecidedSupernet,
    EmptyDataset,
    Config {
        message: String,
    },
    InvalidConfigKey {
        key: String,
    },
    MalformedFile {
        path: String,
        offset: u64,
        reason: String,
    },
    MissingArtifact {
        what: String,
        path: String,
    },
    /// A pipeline command was invoked before its prerequisite phase.
    PhaseOrder {
        need: &'static str,
        detail: String,
    },
    Io(io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::ShapeMismatch { op, lhs, rhs } => {
                write!(f, "{op}: shape mismatch {lhs:?} vs {rhs:?}")
            }
            Self::InvalidShape { op, shape, reason } => {
                write!(f, "{op}: invalid shape {shape:?} ({reason})")
            }
            Self::AxisOutOfRange { axis, rank } => {
                write!(f, "axis {axis} out of range for rank {rank}")
            }
            Self::NonPositiveLog => write!(f, "log of non-positive value"),
            Self::NonScalarRoot { shape } => {
                write!(f, "backward root must be scalar, got shape {shape:?}")
            }
            Self::NonPositiveTemperature { tau } => {
                write!(f, "gumbel temperature must be > 0, got {tau}")
            }
            Self::SimplexViolation { sum } => {
                write!(f, "weights must sum to 1 (got {sum})")
            }
            Self::WeightCountMismatch { expected, got } => {
                write!(f, "expected {expected} weights, got {got}")
            }
            Self::UndecidedSupernet => {
                write!(
                    f,
                    "exact MAC count requires a derived architecture, not a supernet"
                )
            }
            Self::EmptyDataset => write!(f, "dataset is empty"),
            Self::Config { message } => write!(f, "config error: {message}"),
            Self::InvalidConfigKey { key } => write!(f, "invalid config key: {key}"),
            Self::MalformedFile {
                path,
                offset,
                reason,
            } => {
                write!(f, "malformed file {path} at byte {offset}: {reason}")
            }
            Self::MissingArtifact { what, path } => {
                write!(f, "missing {what}: {path}")
            }
            Self::PhaseOrder { need, detail } => {
                write!(f, "phase-order violation: run `{need}` first ({detail})")
            }
            Self::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<io::Error> for Error {
    fn from(e: io::Error) -> Self {
        Self::Io(e)
    }
}
