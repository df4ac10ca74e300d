//! Error taxonomy shared across the pipeline.
//!
//! Variants are grouped by the exit-code class the CLI maps them to:
//! usage (1), io (2), data (3), training (4), backend (5).

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PulseError {
    // -- argument / contract violations ------------------------------------
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("non-finite value encountered: {0}")]
    NumericError(String),
    #[error("vector has zero norm: {0}")]
    DegenerateVector(String),
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("unsupported op in computation graph: {0}")]
    UnsupportedOp(String),

    // -- io -----------------------------------------------------------------
    #[error("io error at {}: {source}", path.display())]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed file {}: {detail}", path.display())]
    Format {
        path: std::path::PathBuf,
        detail: String,
    },

    // -- data ---------------------------------------------------------------
    #[error("dataset is empty after {0}")]
    EmptyDataset(String),
    #[error("cannot split sequence for user {user}: length {len} < 3")]
    SplitError { user: String, len: usize },
    #[error("candidate pool too small for user {user}: {eligible} eligible, need {need}")]
    CandidatePoolTooSmall {
        user: String,
        eligible: usize,
        need: usize,
    },
    #[error("unknown item id: {0}")]
    UnknownItem(String),
    #[error("no negatives available: {0}")]
    NoNegativesAvailable(String),
    #[error("empty text after tokenization: {0}")]
    EmptyText(String),
    #[error("missing rationale for user {0}")]
    MissingRationale(String),
    #[error("ablation arms diverged outside the varied factor: {0}")]
    AblationContaminated(String),
    #[error("protocol violation: {0}")]
    ProtocolViolation(String),
    #[error("stale artifacts in {}: fingerprint mismatch ({detail})", path.display())]
    StaleArtifacts {
        path: std::path::PathBuf,
        detail: String,
    },

    // -- training -----------------------------------------------------------
    #[error("training diverged at step {step}: loss is not finite")]
    TrainingDiverged { step: usize },

    // -- generation backend ---------------------------------------------------
    #[error("backend unavailable after {attempts} attempts: {detail}")]
    BackendUnavailable { attempts: usize, detail: String },
    #[error("backend protocol error: {0}")]
    BackendProtocolError(String),
    #[error("operation not supported by this backend: {0}")]
    UnsupportedByBackend(String),

    // -- orchestration --------------------------------------------------------
    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<PulseError>,
    },
    #[error("config error: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, PulseError>;

impl PulseError {
    pub fn io(path: impl Into<std::path::PathBuf>, source: std::io::Error) -> Self {
        PulseError::Io {
            path: path.into(),
            source,
        }
    }

    /// Attach a pipeline stage name so failures abort with stage + cause.
    pub fn in_stage(self, stage: &str) -> Self {
        PulseError::Stage {
            stage: stage.to_string(),
            source: Box::new(self),
        }
    }

    /// Exit-code class used by the CLI: 1 usage, 2 io, 3 data, 4 training, 5 backend.
    pub fn exit_code(&self) -> i32 {
        use PulseError::*;
        match self {
            Stage { source, .. } => source.exit_code(),
            Config(_) | InvalidArgument(_) | UnsupportedOp(_) => 1,
            Io { .. } | Format { .. } | StaleArtifacts { .. } => 2,
            EmptyDataset(_)
            | SplitError { .. }
            | CandidatePoolTooSmall { .. }
            | UnknownItem(_)
            | NoNegativesAvailable(_)
            | EmptyText(_)
            | MissingRationale(_)
            | AblationContaminated(_)
            | ProtocolViolation(_)
            | DegenerateVector(_)
            | DegenerateInput(_) => 3,
            TrainingDiverged { .. } | NumericError(_) => 4,
            BackendUnavailable { .. } | BackendProtocolError(_) | UnsupportedByBackend(_) => 5,
        }
    }
}
