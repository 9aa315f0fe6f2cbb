use thiserror::Error;

pub type Result<T, E = ReconError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum ReconError {
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),

    #[error("invalid subsets: {0}")]
    InvalidSubsets(String),

    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid phantom: {0}")]
    InvalidPhantom(String),

    #[error("invalid simulation spec: {0}")]
    InvalidSpec(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("degenerate image: {0}")]
    DegenerateImage(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("subset index {index} out of range for {count} subsets")]
    SubsetIndex { index: usize, count: usize },

    #[error("numerical failure at iteration {k}, subiteration {i}: {detail}")]
    NumericalFailure { k: usize, i: usize, detail: String },

    #[error("config validation failed:\n  - {}", .0.join("\n  - "))]
    Validation(Vec<String>),

    #[error("reference image missing: {0}")]
    ReferenceMissing(String),

    #[error("malformed file {path}: {detail}")]
    Format { path: String, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl ReconError {
    pub(crate) fn shape(context: &'static str, expected: usize, actual: usize) -> Self {
        ReconError::Shape {
            context,
            expected,
            actual,
        }
    }
}

pub(crate) fn check_len(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(ReconError::shape(context, expected, actual))
    }
}

/// Fails unless every entry is finite and nonnegative.
pub(crate) fn check_nonnegative(context: &str, values: &[f64]) -> Result<()> {
    match values.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
        None => Ok(()),
        Some(j) => Err(ReconError::Domain(format!(
            "{context}: entry {j} is {} (must be finite and >= 0)",
            values[j]
        ))),
    }
}
