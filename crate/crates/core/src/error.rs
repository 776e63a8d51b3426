use thiserror::Error;

/// Errors raised across the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error in {op}: {detail} (lhs {lhs:?}, rhs {rhs:?})")]
    Shape {
        op: &'static str,
        detail: String,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("{op} requires at least {min} inputs, got {got}")]
    TooFewInputs {
        op: &'static str,
        min: usize,
        got: usize,
    },
    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("filter ({layer}, {channel}) is out of range")]
    FilterOutOfRange { layer: usize, channel: usize },
    #[error("filter ({layer}, {channel}) is already pruned")]
    AlreadyPruned { layer: usize, channel: usize },
    #[error("filter ({layer}, {channel}) is pruned")]
    PrunedFilter { layer: usize, channel: usize },
    #[error("missing gradient: {0}")]
    MissingGradient(String),
    #[error("score supplied for pruned filter ({layer}, {channel})")]
    ScoreForPruned { layer: usize, channel: usize },
    #[error("no score supplied for unpruned filter ({layer}, {channel})")]
    MissingScore { layer: usize, channel: usize },
    #[error("unbalanced domain batch: {0}")]
    UnbalancedBatch(String),
    #[error("training diverged at step {step}: loss {loss}")]
    Divergence { step: u64, loss: f64 },
    #[error("bad magic: expected {expected:?}, read {found:?}")]
    BadMagic { expected: String, found: String },
    #[error("unsupported format version {found} (expected {expected})")]
    Version { expected: u32, found: u32 },
    #[error("truncated file: needed {needed} more bytes at offset {offset}")]
    Truncated { offset: usize, needed: usize },
    #[error("corrupt container: {0}")]
    Corrupt(String),
    #[error("schema mismatch in field `{field}`: {detail}")]
    Schema { field: String, detail: String },
    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    /// Short machine-readable category, used by the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::LabelOutOfRange { .. } => "label",
            Error::TooFewInputs { .. } => "too_few_inputs",
            Error::NonScalarRoot(_) => "non_scalar_root",
            Error::Config(_) => "config",
            Error::FilterOutOfRange { .. } => "filter_out_of_range",
            Error::AlreadyPruned { .. } => "already_pruned",
            Error::PrunedFilter { .. } => "pruned_filter",
            Error::MissingGradient(_) => "missing_gradient",
            Error::ScoreForPruned { .. } => "score_for_pruned",
            Error::MissingScore { .. } => "missing_score",
            Error::UnbalancedBatch(_) => "unbalanced_batch",
            Error::Divergence { .. } => "divergence",
            Error::BadMagic { .. } => "bad_magic",
            Error::Version { .. } => "version",
            Error::Truncated { .. } => "truncated",
            Error::Corrupt(_) => "corrupt",
            Error::Schema { .. } => "schema",
            Error::Context { source, .. } => source.kind(),
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
