use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("could not place {remaining} of {total} boxes after {attempts} attempts")]
    PlacementFailed {
        remaining: usize,
        total: usize,
        attempts: usize,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("payload error: {0}")]
    Payload(String),

    #[error(transparent)]
    Core(#[from] rg_core::CoreError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, SimError>;
