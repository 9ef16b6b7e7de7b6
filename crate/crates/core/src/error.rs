//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("token id {id} out of range for vocabulary size {vocab} (MASK = {vocab})")]
    TokenOutOfRange { id: u32, vocab: u32 },

    #[error("split index {k} out of range for {levels} levels (need 1 ≤ k < R)")]
    SplitIndexOutOfRange { k: usize, levels: usize },

    #[error("grid shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("time {t} outside schedule horizon [0, {horizon}]")]
    TimeOutOfRange { t: f64, horizon: f64 },

    #[error("forward corruption requires a MASK-free input grid")]
    PreMaskedInput,

    #[error("grid pair inconsistent: unmasked entries differ at level {level}, frame {frame}")]
    InconsistentPair { level: usize, frame: usize },

    #[error("invalid score at level {level}, frame {frame}: {value} ({reason})")]
    InvalidScore {
        level: usize,
        frame: usize,
        value: f64,
        reason: &'static str,
    },

    #[error("reverse step with dt={dt} at t={t}: need 0 < dt ≤ t")]
    BadStepSize { t: f64, dt: f64 },

    #[error("oracle enumeration intractable: {states} latent/state combinations exceed limit {limit}")]
    Intractable { states: u128, limit: u128 },

    #[error("non-finite loss at iteration {iter} (last good iteration {last_good})")]
    NonFiniteLoss { iter: usize, last_good: i64 },

    #[error("checkpoint or corpus format error: {0}")]
    Format(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
