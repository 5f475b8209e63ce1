use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("singular configuration: particles {i} and {j} coincide")]
    SingularConfiguration { i: usize, j: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("numerical overflow in layer {layer}")]
    NumericalOverflow { layer: usize },

    #[error("ODE integration diverged at step {step}")]
    Divergence { step: usize },

    #[error("degenerate batch: no finite importance weights")]
    DegenerateBatch,

    #[error("training aborted: {0}")]
    TrainingAborted(String),

    #[error("internal error: {0}")]
    Internal(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
