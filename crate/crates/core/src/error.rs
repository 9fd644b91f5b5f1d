use thiserror::Error;

/// Errors raised anywhere in the separation and testing pipeline.
#[derive(Debug, Error)]
pub enum SbssError {
    #[error("invalid locations: {0}")]
    InvalidLocations(String),

    #[error("duplicate location: points {first} and {second} coincide")]
    DuplicateLocation { first: usize, second: usize },

    #[error("locations do not form a regular grid")]
    NotRegular,

    #[error("kernel {kernel} has no location pairs in its support (normalization is zero)")]
    DegenerateKernel { kernel: String },

    #[error("kernel {kernel} is not admissible in a dimension test (requires f(0) = 0); pass the allow-ball override to force it")]
    NonConformingKernel { kernel: String },

    #[error("kernel supports overlap; the asymptotic law needs disjoint supports, use a bootstrap test instead")]
    OverlappingKernelSupports,

    #[error("invalid kernel specification '{spec}': {reason}")]
    KernelParse { spec: String, reason: String },

    #[error("covariance matrix is singular or not positive definite (eigenvalue {eigenvalue:e}); data channels are collinear")]
    SingularScatter { eigenvalue: f64 },

    #[error("joint diagonalization did not converge after {sweeps} sweeps (last max rotation {last_angle:e})")]
    NoConvergence { sweeps: usize, last_angle: f64 },

    #[error("hypothesized dimension r = {r} out of range for p = {p}")]
    RankOutOfRange { r: usize, p: usize },

    #[error("weighted chi-square tail quadrature failed: {0}")]
    QuadratureFailure(String),

    #[error("block size {block:.4} leaves no donor block inside the domain")]
    NoDonorBlocks { block: f64 },

    #[error("spatial resample produced no usable points")]
    EmptyResample,

    #[error("bootstrap replicate {index} failed: {source}")]
    Replicate {
        index: usize,
        #[source]
        source: Box<SbssError>,
    },

    #[error("Cholesky factorization failed even after diagonal jitter")]
    FactorizationFailure,

    #[error("{n} locations exceed the dense simulation limit of {limit}")]
    TooLarge { n: usize, limit: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

impl SbssError {
    /// True for errors caused by malformed input or options rather than by
    /// a numerical breakdown.
    pub fn is_validation(&self) -> bool {
        match self {
            SbssError::InvalidLocations(_)
            | SbssError::DuplicateLocation { .. }
            | SbssError::NotRegular
            | SbssError::DegenerateKernel { .. }
            | SbssError::NonConformingKernel { .. }
            | SbssError::OverlappingKernelSupports
            | SbssError::KernelParse { .. }
            | SbssError::RankOutOfRange { .. }
            | SbssError::NoDonorBlocks { .. }
            | SbssError::TooLarge { .. }
            | SbssError::DimensionMismatch(_)
            | SbssError::InvalidArgument(_) => true,
            SbssError::Replicate { source, .. } => source.is_validation(),
            SbssError::SingularScatter { .. }
            | SbssError::NoConvergence { .. }
            | SbssError::QuadratureFailure(_)
            | SbssError::EmptyResample
            | SbssError::FactorizationFailure => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, SbssError>;
