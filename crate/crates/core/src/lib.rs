//! Hierarchical masked discrete diffusion over multi-level token grids.
//!
//! The crate implements the full mechanism end to end:
//!
//! * [`token_space`] — the discrete state space: R-level × L-frame token grids
//!   with an absorbing MASK state, the low/high level partition, and the binary
//!   corpus format.
//! * [`schedule`] — noise schedules σ(t), their integrals σ̄(t), and the induced
//!   masking probability 1 − e^{−σ̄(t)}.
//! * [`diffusion`] — forward corruption, exact concrete-score targets, and the
//!   Euler reverse transition.
//! * [`network`] — the two-tier conditioned score network: token embeddings,
//!   low-tier blocks (lip concatenation + single-scale adaptive LayerNorm),
//!   high-tier blocks (dual-scale adaptive LayerNorm with block-constant
//!   temporal scales), per-level score heads, and hand-derived backward passes.
//! * [`training`] — the score-entropy objective, identity alignment loss,
//!   condition dropout, and the AdamW training loop.
//! * [`guidance`] — multi-condition predictor-free guidance and the Euler
//!   reverse sampler.
//! * [`synthdata`] — an exactly solvable synthetic generator whose Bayesian
//!   posteriors power a brute-force oracle for every numerical claim.
//! * [`verify`] — the self-check battery run by the CLI's `verify` command.
//!
//! Everything is deterministic under fixed seeds: per-position randomness is
//! derived from counter-based streams so results are independent of thread
//! count, and batch-level randomness uses seeded ChaCha8.

pub mod diffusion;
pub mod error;
pub mod guidance;
pub mod network;
pub mod nn;
mod rng;
pub mod schedule;
pub mod synthdata;
pub mod token_space;
pub mod training;
pub mod verify;

pub use error::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
