use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("singular kernel evaluation at z = 0 with epsilon = 0")]
    SingularEvaluation,

    #[error("density underflow at {point:?}")]
    DensityUnderflow { point: Vec<f64> },

    #[error("blob score denominator underflow at particle {index}")]
    BlobUnderflow { index: usize },

    #[error("non-finite velocity produced at step {step} (particle {particle})")]
    NonFiniteVelocity { step: usize, particle: usize },

    #[error("time step {dt:e} exceeds the parabolic stability bound; use dt <= {suggested:e}")]
    UnstableTimeStep { dt: f64, suggested: f64 },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("series too short: need at least {needed} points, got {got}")]
    SeriesTooShort { needed: usize, got: usize },

    #[error("negative input in {name} at index {index}: {value}")]
    NegativeInput {
        name: &'static str,
        index: usize,
        value: f64,
    },

    #[error("coercivity estimate is not positive ({0:e}); quadrature breakdown")]
    NonPositiveCoercivity(f64),
}

pub type Result<T> = std::result::Result<T, Error>;
