//! Forward corruption, concrete-score targets, and the Euler reverse step.
//!
//! The forward process is a continuous-time absorbing chain applied
//! independently per grid position: the only transitions carry probability
//! mass from a token into MASK, at rate σ(t). Its one-step marginal is
//! exactly "keep with probability e^{−σ̄(t)}, else MASK", which is how
//! [`forward_sample`] draws in one shot. The full product-space transition
//! matrix is never materialized; the per-position factorization is the only
//! representation.
//!
//! The reverse direction consumes *concrete scores* — ratios of marginal
//! probabilities between a proposed unmasking and the current state. Given the
//! clean grid they collapse to `e^{−σ̄}/(1−e^{−σ̄})` on the true token
//! ([`true_concrete_score`]); a model (or the synthetic oracle) supplies the
//! marginalized form as a [`ScoreField`].

use crate::rng;
use crate::schedule::NoiseSchedule;
use crate::token_space::TokenGrid;
use crate::{Error, Result};
use ndarray::Array3;

/// Per-position, per-candidate positive score estimates. Entries at unmasked
/// positions are ignored by every consumer; constructors fill them with zero.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreField {
    /// Shape (R, L, V): level × frame × candidate token.
    pub scores: Array3<f64>,
}

impl ScoreField {
    pub fn zeros(levels: usize, frames: usize, vocab: usize) -> Self {
        Self { scores: Array3::zeros((levels, frames, vocab)) }
    }

    pub fn levels(&self) -> usize {
        self.scores.shape()[0]
    }

    pub fn frames(&self) -> usize {
        self.scores.shape()[1]
    }

    pub fn vocab(&self) -> usize {
        self.scores.shape()[2]
    }

    /// The score vector over candidates at one position.
    pub fn at(&self, level: usize, frame: usize) -> ndarray::ArrayView1<'_, f64> {
        self.scores.slice(ndarray::s![level, frame, ..])
    }
}

/// The concrete-score target of the absorbing chain given the clean grid:
/// weight `prefactor` on the clean token at every masked position, zero
/// elsewhere.
#[derive(Debug, Clone, PartialEq)]
pub struct ConcreteScoreTarget {
    /// e^{−σ̄(t)} / (1 − e^{−σ̄(t)}); +∞ as σ̄ → 0.
    pub prefactor: f64,
    /// One entry per masked position: (level, frame, clean token).
    pub entries: Vec<(usize, usize, u16)>,
}

impl ConcreteScoreTarget {
    /// Densifies into a [`ScoreField`]-shaped array (exact zeros off-target).
    pub fn dense(&self, levels: usize, frames: usize, vocab: usize) -> Array3<f64> {
        let mut c = Array3::zeros((levels, frames, vocab));
        for &(r, j, x0) in &self.entries {
            c[(r, j, x0 as usize)] = self.prefactor;
        }
        c
    }
}

/// The prefactor e^{−σ̄}/(1−e^{−σ̄}) shared by every concrete-score form.
pub fn score_prefactor(sigma_bar: f64) -> f64 {
    let keep = (-sigma_bar).exp();
    keep / (1.0 - keep)
}

/// Corrupts a clean grid to time t: every entry is independently replaced by
/// MASK with probability 1 − e^{−σ̄(t)}. Deterministic in (seed, position),
/// independent of traversal or thread order.
pub fn forward_sample(
    grid0: &TokenGrid,
    sched: &NoiseSchedule,
    t: f64,
    seed: u64,
) -> Result<TokenGrid> {
    if grid0.has_mask() {
        return Err(Error::PreMaskedInput);
    }
    let m = sched.mask_probability(t)?;
    let mut grid = grid0.clone();
    let mask = grid.mask_id();
    for r in 0..grid.levels() {
        for j in 0..grid.frames() {
            if rng::uniform(seed, &[r as u64, j as u64]) < m {
                grid.set(r, j, mask)?;
            }
        }
    }
    Ok(grid)
}

/// The exact concrete-score target given the clean grid: at each masked
/// position of `grid_t`, score `e^{−σ̄}/(1−e^{−σ̄})` on the clean token and
/// zero on every other candidate. Unmasked positions carry no target.
pub fn true_concrete_score(
    grid_t: &TokenGrid,
    grid0: &TokenGrid,
    sched: &NoiseSchedule,
    t: f64,
) -> Result<ConcreteScoreTarget> {
    if grid_t.levels() != grid0.levels() || grid_t.frames() != grid0.frames() {
        return Err(Error::ShapeMismatch {
            expected: format!("{}×{}", grid0.levels(), grid0.frames()),
            got: format!("{}×{}", grid_t.levels(), grid_t.frames()),
        });
    }
    let mut entries = Vec::new();
    for r in 0..grid_t.levels() {
        for j in 0..grid_t.frames() {
            if grid_t.is_masked(r, j) {
                entries.push((r, j, grid0.get(r, j)));
            } else if grid_t.get(r, j) != grid0.get(r, j) {
                return Err(Error::InconsistentPair { level: r, frame: j });
            }
        }
    }
    Ok(ConcreteScoreTarget { prefactor: score_prefactor(sched.sigma_bar(t)?), entries })
}

/// One Euler step of the reverse chain from time t to t − dt.
///
/// Each masked position independently unmasks to candidate v with probability
/// σ(t)·dt·score_v; if those probabilities sum past 1 they are renormalized
/// (the first-order expansion stops being a distribution at finite dt
/// otherwise), and any leftover mass keeps the position MASK. Unmasked
/// positions never change. When the step lands exactly on t − dt = 0, every
/// still-masked position is force-unmasked from its normalized score vector so
/// the output is MASK-free (provided its scores are not all zero).
pub fn reverse_step(
    grid_t: &TokenGrid,
    scores: &ScoreField,
    sched: &NoiseSchedule,
    t: f64,
    dt: f64,
    seed: u64,
) -> Result<TokenGrid> {
    if !(dt > 0.0) || dt > t {
        return Err(Error::BadStepSize { t, dt });
    }
    let (levels, frames, vocab) = (grid_t.levels(), grid_t.frames(), grid_t.vocab() as usize);
    if scores.levels() != levels || scores.frames() != frames || scores.vocab() != vocab {
        return Err(Error::ShapeMismatch {
            expected: format!("scores {levels}×{frames}×{vocab}"),
            got: format!("{}×{}×{}", scores.levels(), scores.frames(), scores.vocab()),
        });
    }
    let final_step = t - dt == 0.0;
    let rate_dt = sched.sigma(t)? * dt;
    let mut out = grid_t.clone();
    for r in 0..levels {
        for j in 0..frames {
            if !grid_t.is_masked(r, j) {
                continue;
            }
            let s = scores.at(r, j);
            let mut total = 0.0;
            for (v, &sv) in s.iter().enumerate() {
                if sv < 0.0 || !sv.is_finite() {
                    return Err(Error::InvalidScore {
                        level: r,
                        frame: j,
                        value: sv,
                        reason: if sv < 0.0 { "negative" } else { "non-finite" },
                    });
                }
                let _ = v;
                total += sv;
            }
            if total == 0.0 {
                continue; // nothing to unmask toward; stays MASK
            }
            // Per-candidate unmask probability, renormalized if oversaturated;
            // the final step instead samples outright from the score vector.
            let scale = if final_step {
                1.0 / total
            } else {
                let raw = rate_dt;
                if raw * total > 1.0 {
                    1.0 / total
                } else {
                    raw
                }
            };
            let u = rng::uniform(seed, &[r as u64, j as u64]);
            let mut cum = 0.0;
            for (v, &sv) in s.iter().enumerate() {
                cum += sv * scale;
                if u < cum {
                    out.set(r, j, v as u16)?;
                    break;
                }
            }
            // u ≥ cum: residual mass, position stays MASK.
        }
    }
    Ok(out)
}
