use thiserror::Error;

pub type Result<T, E = FiaError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum FiaError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("topology error: {0}")]
    Topology(String),

    #[error("missing attention packet for block {block} ({kind})")]
    MissingPacket { block: usize, kind: &'static str },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("step {step}: {source}")]
    Step {
        step: usize,
        #[source]
        source: Box<FiaError>,
    },

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl FiaError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        FiaError::InvalidArgument(msg.into())
    }

    pub(crate) fn shape(expected: &[usize], actual: &[usize]) -> Self {
        FiaError::ShapeMismatch {
            expected: expected.to_vec(),
            actual: actual.to_vec(),
        }
    }

    /// Innermost error, skipping step context.
    pub fn root(&self) -> &FiaError {
        match self {
            FiaError::Step { source, .. } => source.root(),
            other => other,
        }
    }
}

pub(crate) fn ensure_same_shape<A, B, D>(
    a: &ndarray::ArrayBase<A, D>,
    b: &ndarray::ArrayBase<B, D>,
) -> Result<()>
where
    A: ndarray::Data,
    B: ndarray::Data,
    D: ndarray::Dimension,
{
    if a.shape() != b.shape() {
        return Err(FiaError::shape(a.shape(), b.shape()));
    }
    Ok(())
}
