//! Multi-condition guidance and the reverse-time sampler.
//!
//! One network is trained with condition dropout, so at sampling time it can
//! be evaluated under any subset of the conditions. The guided score blends
//! those evaluations geometrically (i.e. linearly in log space):
//!
//! ```text
//! log ŝ = (1 − w_all − Σ_c w_c) · log s(∅)
//!       + w_all · log s(all present)
//!       + Σ_c   w_c · log s({c})
//! ```
//!
//! where the sum runs over the conditions actually present in the bundle —
//! an absent condition contributes neither its term nor its weight, so the
//! coefficients always sum to one. Evaluations with equal condition subsets
//! are merged (with one present condition the joint term *is* that single
//! term), zero coefficients are dropped, and when exactly one evaluation
//! remains with coefficient one its score field is returned bit-for-bit —
//! degenerate weight settings cost one evaluation and introduce no rounding.
//!
//! Sampling runs the reverse chain from the fully masked grid down uniform
//! time steps; the final step lands exactly on t = 0, where the Euler
//! transition force-unmasks every remaining position from its normalized
//! score vector.

use crate::diffusion::{reverse_step, ScoreField};
use crate::network::{ConditionBundle, Network};
use crate::rng;
use crate::schedule::NoiseSchedule;
use crate::token_space::{StateSpaceConfig, TokenGrid};
use crate::{Error, Result};
use ndarray::Array3;
use serde::{Deserialize, Serialize};

/// Stream tag separating per-step sampler draws from other consumers.
const T_SAMPLE: u64 = 0x5A;

/// Guidance weights and step count. Defaults are the desk-scale sampler
/// configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceConfig {
    /// Weight on the jointly conditioned evaluation.
    pub w_all: f64,
    /// Weight on the identity-only evaluation.
    pub w_id: f64,
    /// Weight on the emotion-only evaluation.
    pub w_emo: f64,
    /// Weight on the lip-only evaluation.
    pub w_lip: f64,
    /// Number of uniform Euler steps from the horizon to zero.
    pub steps: usize,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self { w_all: 2.5, w_id: 1.25, w_emo: 1.5, w_lip: 2.0, steps: 64 }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("guidance needs at least one step".into()));
        }
        for (name, w) in [
            ("w_all", self.w_all),
            ("w_id", self.w_id),
            ("w_emo", self.w_emo),
            ("w_lip", self.w_lip),
        ] {
            if !w.is_finite() {
                return Err(Error::Config(format!("{name} must be finite, got {w}")));
            }
        }
        Ok(())
    }
}

/// Anything that can score a (grid, time, bundle) triple: the trained
/// network, or the exact oracle for ground-truth comparisons.
pub trait Scorer {
    fn score(
        &self,
        grid: &TokenGrid,
        t: f64,
        bundle: &ConditionBundle,
        sched: &NoiseSchedule,
    ) -> Result<ScoreField>;
}

impl Scorer for Network {
    fn score(
        &self,
        grid: &TokenGrid,
        t: f64,
        bundle: &ConditionBundle,
        sched: &NoiseSchedule,
    ) -> Result<ScoreField> {
        Network::score(self, grid, t, bundle, sched)
    }
}

/// Adapter turning a closure into a [`Scorer`].
pub struct FnScorer<F>(pub F);

impl<F> Scorer for FnScorer<F>
where
    F: Fn(&TokenGrid, f64, &ConditionBundle, &NoiseSchedule) -> Result<ScoreField>,
{
    fn score(
        &self,
        grid: &TokenGrid,
        t: f64,
        bundle: &ConditionBundle,
        sched: &NoiseSchedule,
    ) -> Result<ScoreField> {
        (self.0)(grid, t, bundle, sched)
    }
}

/// Presence mask (lip, id, emo) — the key under which evaluations merge.
type Presence = (bool, bool, bool);

fn restrict(bundle: &ConditionBundle, keep: Presence) -> ConditionBundle {
    ConditionBundle {
        lip: if keep.0 { bundle.lip.clone() } else { None },
        id: if keep.1 { bundle.id.clone() } else { None },
        emo: if keep.2 { bundle.emo.clone() } else { None },
    }
}

/// The evaluation plan for a bundle under the given weights: deduplicated
/// (presence, coefficient) pairs with zero coefficients removed. Exposed so
/// integration checks can count evaluations without instrumenting a scorer.
pub fn guidance_terms(bundle: &ConditionBundle, cfg: &GuidanceConfig) -> Vec<(Presence, f64)> {
    let present = (bundle.lip.is_some(), bundle.id.is_some(), bundle.emo.is_some());
    let mut singles: Vec<(Presence, f64)> = Vec::new();
    if present.0 {
        singles.push(((true, false, false), cfg.w_lip));
    }
    if present.1 {
        singles.push(((false, true, false), cfg.w_id));
    }
    if present.2 {
        singles.push(((false, false, true), cfg.w_emo));
    }
    let single_sum: f64 = singles.iter().map(|&(_, w)| w).sum();

    let mut terms: Vec<(Presence, f64)> = Vec::new();
    let mut add = |mask: Presence, coeff: f64| {
        if let Some(entry) = terms.iter_mut().find(|(m, _)| *m == mask) {
            entry.1 += coeff;
        } else {
            terms.push((mask, coeff));
        }
    };
    add((false, false, false), 1.0 - cfg.w_all - single_sum);
    add(present, cfg.w_all);
    for (mask, w) in singles {
        add(mask, w);
    }
    terms.retain(|&(_, c)| c != 0.0);
    if terms.is_empty() {
        // Every coefficient cancelled; fall back to the unconditional term
        // (coefficients sum to one by construction, so this needs w_all and
        // the singles to cancel exactly — the blend is then the plain score).
        terms.push(((false, false, false), 1.0));
    }
    terms
}

/// The guided score field at (grid, t): the log-space blend of conditional
/// evaluations described at module level. Only masked positions are filled;
/// unmasked positions are zero.
///
/// Exactly-zero component scores are handled by the power-law limit: the
/// blend behaves like 0 raised to the sum of the vanishing components'
/// coefficients, so the guided score is 0 when that sum is positive and an
/// invalid-score error when it is negative (extrapolating *against* an
/// impossible outcome diverges; this is reported rather than hidden).
pub fn guided_score<S: Scorer>(
    scorer: &S,
    grid: &TokenGrid,
    t: f64,
    bundle: &ConditionBundle,
    sched: &NoiseSchedule,
    cfg: &GuidanceConfig,
) -> Result<ScoreField> {
    cfg.validate()?;
    let terms = guidance_terms(bundle, cfg);
    if terms.len() == 1 && terms[0].1 == 1.0 {
        // Exactly one evaluation with unit weight: return it untouched.
        return scorer.score(grid, t, &restrict(bundle, terms[0].0), sched);
    }

    let (levels, frames, vocab) = (grid.levels(), grid.frames(), grid.vocab() as usize);
    // Log-blend over positive components; coefficient mass on exact zeros
    // is tracked separately to apply the limit convention.
    let mut log_blend: Array3<f64> = Array3::zeros((levels, frames, vocab));
    let mut zero_coeff: Array3<f64> = Array3::zeros((levels, frames, vocab));
    for &(mask, coeff) in &terms {
        let field = scorer.score(grid, t, &restrict(bundle, mask), sched)?;
        if field.levels() != levels || field.frames() != frames || field.vocab() != vocab {
            return Err(Error::ShapeMismatch {
                expected: format!("scores {levels}×{frames}×{vocab}"),
                got: format!("{}×{}×{}", field.levels(), field.frames(), field.vocab()),
            });
        }
        for r in 0..levels {
            for j in 0..frames {
                if !grid.is_masked(r, j) {
                    continue;
                }
                for v in 0..vocab {
                    let s = field.scores[(r, j, v)];
                    if !s.is_finite() || s < 0.0 {
                        return Err(Error::InvalidScore {
                            level: r,
                            frame: j,
                            value: s,
                            reason: "guidance component score must be finite and nonnegative",
                        });
                    }
                    if s == 0.0 {
                        zero_coeff[(r, j, v)] += coeff;
                    } else {
                        log_blend[(r, j, v)] += coeff * s.ln();
                    }
                }
            }
        }
    }
    let mut out = ScoreField::zeros(levels, frames, vocab);
    for r in 0..levels {
        for j in 0..frames {
            if !grid.is_masked(r, j) {
                continue;
            }
            for v in 0..vocab {
                let zc = zero_coeff[(r, j, v)];
                out.scores[(r, j, v)] = if zc > 0.0 {
                    0.0
                } else if zc < 0.0 {
                    return Err(Error::InvalidScore {
                        level: r,
                        frame: j,
                        value: f64::INFINITY,
                        reason: "negative guidance weight on a zero-score component",
                    });
                } else {
                    log_blend[(r, j, v)].exp()
                };
            }
        }
    }
    Ok(out)
}

/// Draws one sample by running the guided reverse chain from the fully
/// masked grid over `cfg.steps` uniform Euler steps. Deterministic in
/// (scorer, bundle, seed).
pub fn sample<S: Scorer>(
    scorer: &S,
    space: &StateSpaceConfig,
    bundle: &ConditionBundle,
    sched: &NoiseSchedule,
    cfg: &GuidanceConfig,
    seed: u64,
) -> Result<TokenGrid> {
    cfg.validate()?;
    space.validate()?;
    sched.validate()?;
    let mut grid = TokenGrid::all_masked(space.levels, space.frames, space.vocab);
    let horizon = sched.horizon;
    let n = cfg.steps;
    for k in 0..n {
        let t = horizon * (n - k) as f64 / n as f64;
        let t_next = horizon * (n - k - 1) as f64 / n as f64;
        let dt = t - t_next;
        let field = guided_score(scorer, &grid, t, bundle, sched, cfg)?;
        let step_seed = rng::stream(seed, &[T_SAMPLE, k as u64]);
        grid = reverse_step(&grid, &field, sched, t, dt, step_seed)?;
        if !grid.has_mask() {
            break; // everything unmasked early; remaining steps are no-ops
        }
    }
    Ok(grid)
}
