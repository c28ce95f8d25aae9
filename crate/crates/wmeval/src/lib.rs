//! Action-controllable world model over a toy grid tabletop, trained with
//! masked discrete diffusion, plus the evaluation harness that uses it as a
//! policy-evaluation proxy (transition fidelity, round-trip consistency,
//! action-shuffle checks, success-rate ranking).

pub mod commands;
pub mod config;
pub mod diffusion;
pub mod env;
pub mod metrics;
pub mod nn;
pub mod rollout;
pub mod tokens;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("decode error at position {pos}: id {id} not decodable")]
    Decode { pos: usize, id: u32 },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("training error: {0}")]
    Training(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("rollout aborted: {0}")]
    Rollout(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
