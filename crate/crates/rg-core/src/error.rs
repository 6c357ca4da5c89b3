use thiserror::Error;

/// Errors raised by the tensor substrate, geometry and fusion pipelines.
#[derive(Debug, Error)]
pub enum CoreError {
    #[error("shape mismatch in {context}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        context: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("NaN gradient in parameter `{0}`")]
    NanGradient(String),

    #[error("{architecture} does not support camera-only cooperators (agent {agent_id})")]
    UnsupportedModality {
        architecture: &'static str,
        agent_id: u32,
    },

    #[error("no LiDAR-bearing agent present; nothing to fuse onto")]
    NoLidarAgent,

    #[error("no ground-truth boxes across all frames; AP is undefined")]
    NoGroundTruth,

    #[error("training diverged (non-finite loss) at epoch {epoch}")]
    Diverged { epoch: usize, history: Vec<f64> },

    #[error("container format error: {0}")]
    Container(String),

    #[error("parameter manifest error: {0}")]
    Manifest(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;
