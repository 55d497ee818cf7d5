use std::fmt;
use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the library can report.
#[derive(Debug)]
pub enum Error {
    /// Two operands of an op have incompatible shapes.
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    /// `shape` does not describe `len` elements.
    BadTensor {
        shape: Vec<usize>,
        len: usize,
    },
    /// An op produced NaN or infinity.
    NonFinite {
        op: &'static str,
    },
    /// Backward was asked to differentiate through an op without a gradient.
    NonDifferentiable {
        op: &'static str,
    },
    /// Backward needs a single-element loss.
    NonScalarLoss {
        shape: Vec<usize>,
    },
    UnknownNode(usize),
    UnknownParam(String),
    /// Freeze mask and parameter store disagree.
    MaskMismatch(String),
    InvalidConfig {
        field: &'static str,
        reason: String,
    },
    TokenOutOfRange {
        token: u32,
        vocab: usize,
    },
    EmptyInput(&'static str),
    /// Training produced a non-finite loss.
    Diverged {
        step: usize,
        loss: f64,
    },
    /// Pre-training finished without reaching the required perplexity.
    TargetMissed {
        ppl: f64,
        target: f64,
    },
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    BadMagic,
    UnknownVersion(u32),
    /// Payload ended before the named tensor was complete.
    Truncated {
        tensor: String,
    },
    /// Manifest is malformed or inconsistent with the payload.
    Inconsistent(String),
    Parse(String),
}

impl Error {
    /// Short stable identifier, used in machine-readable CLI errors.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::ShapeMismatch { .. } => "shape_mismatch",
            Error::BadTensor { .. } => "bad_tensor",
            Error::NonFinite { .. } => "non_finite",
            Error::NonDifferentiable { .. } => "non_differentiable",
            Error::NonScalarLoss { .. } => "non_scalar_loss",
            Error::UnknownNode(_) => "unknown_node",
            Error::UnknownParam(_) => "unknown_param",
            Error::MaskMismatch(_) => "mask_mismatch",
            Error::InvalidConfig { .. } => "invalid_config",
            Error::TokenOutOfRange { .. } => "token_out_of_range",
            Error::EmptyInput(_) => "empty_input",
            Error::Diverged { .. } => "diverged",
            Error::TargetMissed { .. } => "target_missed",
            Error::Io { .. } => "io",
            Error::BadMagic => "bad_magic",
            Error::UnknownVersion(_) => "unknown_version",
            Error::Truncated { .. } => "truncated",
            Error::Inconsistent(_) => "inconsistent",
            Error::Parse(_) => "parse",
        }
    }

    pub(crate) fn config(field: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidConfig {
            field,
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, left, right } => {
                write!(f, "{op}: shape mismatch {left:?} vs {right:?}")
            }
            Error::BadTensor { shape, len } => {
                write!(f, "shape {shape:?} does not hold {len} elements")
            }
            Error::NonFinite { op } => write!(f, "{op} produced a non-finite value"),
            Error::NonDifferentiable { op } => {
                write!(f, "{op} is not differentiable but lies on a gradient path")
            }
            Error::NonScalarLoss { shape } => write!(f, "loss must be scalar, got shape {shape:?}"),
            Error::UnknownNode(id) => write!(f, "node {id} does not exist"),
            Error::UnknownParam(name) => write!(f, "unknown parameter `{name}`"),
            Error::MaskMismatch(msg) => write!(f, "freeze mask mismatch: {msg}"),
            Error::InvalidConfig { field, reason } => write!(f, "invalid `{field}`: {reason}"),
            Error::TokenOutOfRange { token, vocab } => {
                write!(f, "token id {token} out of range for vocabulary of {vocab}")
            }
            Error::EmptyInput(what) => write!(f, "empty {what}"),
            Error::Diverged { step, loss } => {
                write!(f, "training diverged at step {step} (loss {loss})")
            }
            Error::TargetMissed { ppl, target } => {
                write!(
                    f,
                    "validation perplexity {ppl:.4} did not reach target {target:.4}"
                )
            }
            Error::Io { path, source } => write!(f, "{}: {source}", path.display()),
            Error::BadMagic => write!(f, "not a checkpoint file (bad magic)"),
            Error::UnknownVersion(v) => write!(f, "unsupported checkpoint format version {v}"),
            Error::Truncated { tensor } => write!(f, "payload truncated inside tensor `{tensor}`"),
            Error::Inconsistent(msg) => write!(f, "inconsistent: {msg}"),
            Error::Parse(msg) => write!(f, "parse error: {msg}"),
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
