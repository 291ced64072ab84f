use std::path::PathBuf;

/// Errors raised anywhere in the engine.
///
/// Variants are grouped by the exit-code class the CLI maps them to:
/// configuration/usage (2), data and I/O (3), numeric failure (4).
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("cycle in causal graph: {}", .0.join(" -> "))]
    Cycle(Vec<String>),
    #[error("unknown variable `{0}`")]
    UnknownVariable(String),
    #[error("unknown intervention target `{0}`")]
    UnknownTarget(String),
    #[error("duplicate variable name `{0}`")]
    DuplicateName(String),
    #[error("missing evidence for `{0}`")]
    MissingEvidence(String),
    #[error("mechanism for `{0}` is not invertible")]
    NonInvertible(String),
    #[error("arity mismatch: expected {expected} inputs, got {got}")]
    Arity { expected: usize, got: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("value out of range: {0}")]
    OutOfRange(String),
    #[error("non-finite value encountered in {0}")]
    NonFinite(String),
    #[error("optimization diverged: {0}")]
    Divergence(String),
    #[error("singular matrix in {0}")]
    SingularMatrix(String),
    #[error("matrix rank {rank} is below the requested latent dimension {wanted}")]
    RankDeficient { rank: usize, wanted: usize },
    #[error("zero pooled variance")]
    ZeroVariance,
    #[error("unknown sample id {0}")]
    UnknownId(usize),
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("model variant mismatch: {0}")]
    Variant(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("malformed input: {0}")]
    Format(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for this error: 2 usage/config, 3 data/I-O, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Variant(_) | Error::OutOfRange(_) => 2,
            Error::Cycle(_)
            | Error::UnknownVariable(_)
            | Error::UnknownTarget(_)
            | Error::DuplicateName(_)
            | Error::MissingEvidence(_)
            | Error::UnknownId(_)
            | Error::Shape(_)
            | Error::Arity { .. }
            | Error::Format(_)
            | Error::Io { .. }
            | Error::Precondition(_) => 3,
            Error::NonInvertible(_)
            | Error::NonFinite(_)
            | Error::Divergence(_)
            | Error::SingularMatrix(_)
            | Error::RankDeficient { .. }
            | Error::ZeroVariance => 4,
        }
    }
}
