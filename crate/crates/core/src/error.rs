use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised anywhere in the laboratory.
///
/// The variants are grouped by how a caller is expected to react: invalid
/// inputs and configuration are the caller's fault, numerical failures signal
/// that a solve or factorization broke down, and I/O errors carry the path.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: &'static str,
        expected: String,
        actual: String,
    },

    #[error("covariance factorization failed ({0}); add a larger nugget")]
    Factorization(String),

    #[error(
        "rank-deficient PCA input: reached energy fraction {achieved:.6} < target {target:.6} with {rank} components"
    )]
    RankDeficient { achieved: f64, target: f64, rank: usize },

    #[error("pressure solve did not converge: relative residual {residual:.3e} after {iterations} iterations")]
    LinearSolve { residual: f64, iterations: usize },

    #[error("saturation step failed at t = {time_days:.4} d: substep fell below {min_dt_days:e} d")]
    SaturationStep { time_days: f64, min_dt_days: f64 },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("training diverged at epoch {epoch}: {reason}")]
    TrainingDiverged { epoch: usize, reason: String },

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error in {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn shape(context: &'static str, expected: impl ToString, actual: impl ToString) -> Self {
        Error::Shape {
            context,
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Wraps the error with a context tag such as a sample or particle id.
    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::Factorization(_)
            | Error::RankDeficient { .. }
            | Error::LinearSolve { .. }
            | Error::SaturationStep { .. }
            | Error::NonFinite(_)
            | Error::TrainingDiverged { .. } => true,
            Error::Context { source, .. } => source.is_numerical(),
            _ => false,
        }
    }

    /// True for schema or parameter errors a user can fix in the config.
    pub fn is_config(&self) -> bool {
        match self {
            Error::InvalidInput(_) | Error::Shape { .. } => true,
            Error::Context { source, .. } => source.is_config(),
            _ => false,
        }
    }
}

pub(crate) trait ResultExt<T> {
    fn context_with<F: FnOnce() -> String>(self, f: F) -> Result<T>;
}

impl<T> ResultExt<T> for Result<T> {
    fn context_with<F: FnOnce() -> String>(self, f: F) -> Result<T> {
        self.map_err(|e| e.context(f()))
    }
}
