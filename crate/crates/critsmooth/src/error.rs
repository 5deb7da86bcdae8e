use thiserror::Error;

/// Every failure the library can report.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("matrix maps the direction to zero (non-allowable matrix)")]
    ZeroImage,
    #[error("matrix has a zero entry; Perron eigenpair not guaranteed simple")]
    NotStrictlyPositive,
    #[error("{what} did not converge within {iterations} iterations")]
    NoConvergence { what: &'static str, iterations: usize },
    #[error("grid resolution {0} is below 2")]
    BadResolution(usize),
    #[error("invalid direction: {0}")]
    BadDirection(String),
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("assumption validation failed: {}", .0.join("; "))]
    ValidationFailure(Vec<String>),
    #[error("dominant eigenvalue not separated (k = {k}, second = {second})")]
    DegenerateSpectrum { k: f64, second: f64 },
    #[error("no critical exponent in (0,1]: g(1) = {g1}")]
    CalibrationOutOfRange { g1: f64 },
    #[error("Poisson system is numerically singular")]
    SingularPoisson,
    #[error("node cap exceeded at generation {generation} ({count} > {cap})")]
    CapExceeded { generation: usize, count: usize, cap: usize },
    #[error("stopping line expansion exceeded depth {0}")]
    NonTermination(usize),
    #[error("Laplace transform has phi(0) = {0}, expected 1")]
    BadTransform(f64),
    #[error("rejection sampler acceptance rate {rate} below 1e-4")]
    RejectionStall { rate: f64 },
    #[error("enumeration needs {0} outcomes, limit is 1e6")]
    EnumerationTooLarge(u128),
    #[error("minorization could not be certified: {0}")]
    MinorizationFailure(String),
    #[error("mode not supported for this model: {0}")]
    ModeUnsupported(String),
    #[error("level t = {t} exceeds the reliable range t_max = {t_max}")]
    DepthInsufficient { t: f64, t_max: f64 },
    #[error("{what} = {value:e} exceeds the tolerance {tol:e}")]
    ToleranceExceeded { what: String, value: f64, tol: f64 },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl Error {
    /// Process exit code: 1 validation, 2 calibration, 3 numerical, 4 configuration.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::ValidationFailure(_) => 1,
            Error::CalibrationOutOfRange { .. } => 2,
            Error::Config(_) | Error::Io(_) | Error::InvalidModel(_) => 4,
            _ => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
