use thiserror::Error;

/// Errors surfaced by the planning, estimation, and training layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("GMM fit needs at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },

    #[error("conditioning block singular after ridge regularization ({context})")]
    SingularConditioning { context: String },

    #[error("Q_uu not positive definite after regularization at backward step {step}")]
    QuuNotPositiveDefinite { step: usize },

    #[error("cost matrix {name} failed the definiteness check: min eigenvalue {min_eig}")]
    CostNotDefinite { name: &'static str, min_eig: f64 },

    #[error("missing recorded dynamics models at step {step}")]
    MissingModels { step: usize },

    #[error("time-varying fit underdetermined at step {step}: {rows} rows < {needed} needed; collect more rollouts")]
    UnderdeterminedFit {
        step: usize,
        rows: usize,
        needed: usize,
    },

    #[error("loss is not finite at the initial parameter vector")]
    NonFiniteLoss,

    #[error("empty training dataset")]
    EmptyDataset,

    #[error("config error: {0}")]
    Config(String),

    #[error("snapshot error: {0}")]
    Snapshot(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
