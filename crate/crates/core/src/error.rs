use thiserror::Error;

/// Errors shared across the whole crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Layer shapes do not compose at the given layer index.
    #[error("shape mismatch at layer {layer}: {detail}")]
    ShapeMismatch { layer: usize, detail: String },

    /// A value that must be finite (activation, gradient, loss) is NaN or infinite.
    #[error("non-finite value in {context}{}", iteration.map(|t| format!(" at iteration {t}")).unwrap_or_default())]
    NonFiniteValue {
        context: String,
        iteration: Option<u64>,
    },

    /// A class label lies outside [0, classes).
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    /// A binary file starts with an unexpected magic number.
    #[error("bad magic in {path}: expected {expected:#010x}, found {found:#010x}")]
    BadMagic {
        path: String,
        expected: u32,
        found: u32,
    },

    /// A binary file ended before the declared payload.
    #[error("truncated file: {0}")]
    TruncatedFile(String),

    /// Image and label files declare different example counts.
    #[error("count mismatch: {images} images vs {labels} labels")]
    CountMismatch { images: usize, labels: usize },

    /// Minibatch size outside 1..=N.
    #[error("bad batch size {batch} for dataset of {len} examples")]
    BadBatchSize { batch: usize, len: usize },

    /// A chain record refers to a dataset with a different content hash.
    #[error("dataset mismatch: record expects hash {expected:#018x}, got {found:#018x}")]
    DatasetMismatch { expected: u64, found: u64 },

    /// Sample or element index beyond the valid range.
    #[error("index {index} out of range (len {len})")]
    IndexOutOfRange { index: usize, len: usize },

    /// An attack-success-rate denominator of zero.
    #[error("empty eligible set: no inputs are correctly classified by all models")]
    EmptyEligibleSet,

    /// Malformed config file or invalid option value.
    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn non_finite(context: impl Into<String>) -> Self {
        Error::NonFiniteValue {
            context: context.into(),
            iteration: None,
        }
    }

    pub fn non_finite_at(context: impl Into<String>, iteration: u64) -> Self {
        Error::NonFiniteValue {
            context: context.into(),
            iteration: Some(iteration),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
