use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),

    #[error("layer {layer} has a zero filter")]
    ZeroFilter { layer: usize },

    #[error("architecture does not satisfy the kernel-uniqueness hypothesis: {0}")]
    HypothesisViolated(String),

    #[error("end-to-end filter is a singular point of the neuromanifold: {0}")]
    SingularPoint(String),

    #[error("no fiber point found after {attempts} attempts (best relative residual {best_residual:.3e})")]
    FiberNotFound { attempts: usize, best_residual: f64 },

    #[error("filter is not on the neuromanifold (defining equation residual {residual:.3e})")]
    NotOnManifold { residual: f64 },

    #[error("no factorization compatible with the architecture: {0}")]
    NoFactorization(String),

    #[error("root grouping failed within tolerance: {0}")]
    AmbiguousGrouping(String),

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("step size underflow at t = {t} (h = {h:.3e})")]
    StepSizeUnderflow { t: f64, h: f64 },

    #[error("vector is not tangent to the neuromanifold (normal component ratio {ratio:.3e})")]
    NotTangent { ratio: f64 },

    #[error("parse error: {0}")]
    Parse(String),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        // Errors raised while reading text already end in "at line L column C".
        Error::Parse(e.to_string())
    }
}
