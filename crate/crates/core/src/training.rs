//! Score-entropy training of the two-tier network.
//!
//! The per-position objective compares the network's score vector s against
//! the concrete target c (the prefactor-scaled indicator of the clean token):
//! at every masked position the loss is σ(t) · Σ_v [ s_v − c_v·ln s_v + N(c_v) ]
//! with N(c) = c·ln c − c and N(0) = 0, which is nonnegative and zero exactly
//! at s = c. Training parameterizes scores as exponentials of the head
//! outputs, so the gradient with respect to the log-scores is the clean
//! σ(t)·(s − c). Taking expectation over the clean token given the observed
//! context, the minimizer of the expected loss is the prefactor times the
//! posterior — which is precisely what the exact oracle computes, making it
//! the natural performance baseline.
//!
//! The identity branch trains jointly: an L1 penalty, weighted by
//! `lambda_id`, pulls the adapter output toward the per-speaker identity
//! vector under input noise.
//!
//! Every random choice in the loop (batch indices, diffusion times,
//! corruption draws, condition dropout, adapter noise) derives from one
//! seeded generator, so a training run is a pure function of its inputs.

use crate::diffusion::{forward_sample, true_concrete_score, ScoreField};
use crate::network::{ConditionBundle, Network};
use crate::nn::AdamW;
use crate::schedule::NoiseSchedule;
use crate::synthdata::SynthSample;
use crate::token_space::TokenGrid;
use crate::{Error, Result};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::time::Instant;

/// Diffusion times are drawn from U(T·TIME_FLOOR_FRACTION, T): the extreme
/// low-noise corner contributes nothing but variance.
pub const TIME_FLOOR_FRACTION: f64 = 1e-3;

/// Training hyperparameters. Defaults are the desk-scale configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub iters: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// The learning rate follows a half-cosine from `lr` down to
    /// `lr · lr_final_frac` over the run; 1.0 keeps it constant.
    pub lr_final_frac: f64,
    pub weight_decay: f64,
    /// Weight of the identity-adapter L1 term.
    pub lambda_id: f64,
    /// Probability that a sample drops all conditions at once.
    pub drop_all_prob: f64,
    /// Probability that each condition drops independently (when not all
    /// dropped together).
    pub drop_each_prob: f64,
    /// Standard deviation of the Gaussian noise on adapter inputs.
    pub adapter_noise_std: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iters: 3000,
            batch_size: 16,
            lr: 1e-4,
            lr_final_frac: 1.0,
            weight_decay: 0.01,
            lambda_id: 100.0,
            drop_all_prob: 0.10,
            drop_each_prob: 0.10,
            adapter_noise_std: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.iters == 0 {
            return Err(Error::Config("iters and batch_size must be positive".into()));
        }
        for (name, p) in [
            ("drop_all_prob", self.drop_all_prob),
            ("drop_each_prob", self.drop_each_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        if self.lr < 0.0 || self.weight_decay < 0.0 || self.lambda_id < 0.0 {
            return Err(Error::Config("lr, weight_decay, lambda_id must be nonnegative".into()));
        }
        if !(0.0..=1.0).contains(&self.lr_final_frac) {
            return Err(Error::Config(format!(
                "lr_final_frac must lie in [0, 1], got {}",
                self.lr_final_frac
            )));
        }
        if self.adapter_noise_std < 0.0 {
            return Err(Error::Config("adapter_noise_std must be nonnegative".into()));
        }
        Ok(())
    }
}

/// One metrics row of the training trace.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub iter: usize,
    pub dse_loss: f64,
    pub id_loss: f64,
    pub total_loss: f64,
    pub mask_fraction: f64,
    pub wall_ms: u64,
}

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub rows: Vec<TraceRow>,
    pub final_total_loss: f64,
}

// ---------------------------------------------------------------------------
// Score-entropy loss
// ---------------------------------------------------------------------------

/// N(c) = c·ln c − c, continuously extended with N(0) = 0.
fn normalizer(c: f64) -> f64 {
    if c == 0.0 {
        0.0
    } else {
        c * c.ln() - c
    }
}

/// Score-entropy loss of a score field against the corruption of `grid0`
/// into `grid_t`: the σ(t)-weighted sum over masked positions and vocabulary
/// entries. Scores must be nonnegative and finite everywhere a masked
/// position reads them, and strictly positive where the concrete target is
/// positive (the loss diverges there otherwise).
pub fn dse_loss(
    scores: &ScoreField,
    grid_t: &TokenGrid,
    grid0: &TokenGrid,
    sched: &NoiseSchedule,
    t: f64,
) -> Result<f64> {
    let target = true_concrete_score(grid_t, grid0, sched, t)?;
    let sigma = sched.sigma(t)?;
    let v = grid_t.vocab() as usize;
    if scores.levels() != grid_t.levels() || scores.frames() != grid_t.frames() || scores.vocab() != v {
        return Err(Error::ShapeMismatch {
            expected: format!("scores ({}, {}, {v})", grid_t.levels(), grid_t.frames()),
            got: format!("({}, {}, {})", scores.levels(), scores.frames(), scores.vocab()),
        });
    }
    let pref = target.prefactor;
    let mut loss = 0.0;
    for &(r, j, x0) in &target.entries {
        for val in 0..v {
            let s = scores.scores[(r, j, val)];
            if !s.is_finite() || s < 0.0 {
                return Err(Error::InvalidScore {
                    level: r,
                    frame: j,
                    value: s,
                    reason: "scores must be finite and nonnegative".into(),
                });
            }
            let c = if val == x0 as usize { pref } else { 0.0 };
            if c > 0.0 && s == 0.0 {
                return Err(Error::InvalidScore {
                    level: r,
                    frame: j,
                    value: s,
                    reason: "zero score where the concrete target is positive".into(),
                });
            }
            loss += s - if c > 0.0 { c * s.ln() } else { 0.0 } + normalizer(c);
        }
    }
    Ok(sigma * loss)
}

/// Loss and gradient with respect to log-scores. `log_scores` is a head
/// output grid (R, L, V); positions that are unmasked in `grid_t` get zero
/// gradient. Returns (loss, d loss / d log_scores).
pub fn dse_grad_logits(
    log_scores: &Array3<f64>,
    grid_t: &TokenGrid,
    grid0: &TokenGrid,
    sched: &NoiseSchedule,
    t: f64,
) -> Result<(f64, Array3<f64>)> {
    let target = true_concrete_score(grid_t, grid0, sched, t)?;
    let sigma = sched.sigma(t)?;
    let v = grid_t.vocab() as usize;
    let dims = (grid_t.levels(), grid_t.frames(), v);
    if log_scores.dim() != dims {
        return Err(Error::ShapeMismatch {
            expected: format!("{dims:?}"),
            got: format!("{:?}", log_scores.dim()),
        });
    }
    let pref = target.prefactor;
    let mut grad = Array3::zeros(dims);
    let mut loss = 0.0;
    for &(r, j, x0) in &target.entries {
        for val in 0..v {
            let z = log_scores[(r, j, val)];
            let s = z.exp();
            let c = if val == x0 as usize { pref } else { 0.0 };
            loss += s - c * z + normalizer(c);
            grad[(r, j, val)] = sigma * (s - c);
        }
    }
    Ok((sigma * loss, grad))
}

/// Mean absolute error between adapter outputs and identity targets, with
/// its subgradient (zero on exact ties).
pub fn identity_loss(output: &Array2<f64>, target: &Array2<f64>) -> Result<(f64, Array2<f64>)> {
    if output.dim() != target.dim() {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", target.dim()),
            got: format!("{:?}", output.dim()),
        });
    }
    let n = output.len() as f64;
    let mut loss = 0.0;
    let mut grad = Array2::zeros(output.raw_dim());
    for (g, (&o, &t)) in grad.iter_mut().zip(output.iter().zip(target.iter())) {
        let d = o - t;
        loss += d.abs();
        *g = d.signum() / n;
        if d == 0.0 {
            *g = 0.0;
        }
    }
    Ok((loss / n, grad))
}

// ---------------------------------------------------------------------------
// Condition dropout
// ---------------------------------------------------------------------------

/// Applies the training dropout law to a full bundle: with probability
/// `drop_all` every condition is removed at once; otherwise each condition
/// is removed independently with probability `drop_each`.
pub fn apply_condition_dropout(
    bundle: ConditionBundle,
    rng: &mut ChaCha8Rng,
    drop_all: f64,
    drop_each: f64,
) -> ConditionBundle {
    if rng.random::<f64>() < drop_all {
        return ConditionBundle::empty();
    }
    let mut out = bundle;
    if rng.random::<f64>() < drop_each {
        out.lip = None;
    }
    if rng.random::<f64>() < drop_each {
        out.id = None;
    }
    if rng.random::<f64>() < drop_each {
        out.emo = None;
    }
    out
}

// ---------------------------------------------------------------------------
// Batches
// ---------------------------------------------------------------------------

/// A frozen evaluation batch: corrupted grids with their clean sources,
/// times, and (dropout-processed) condition bundles, all drawn by the same
/// law the training loop uses.
#[derive(Debug, Clone)]
pub struct EvalBatch {
    pub grids0: Vec<TokenGrid>,
    pub grids_t: Vec<TokenGrid>,
    pub times: Vec<f64>,
    pub bundles: Vec<ConditionBundle>,
}

/// Draws an evaluation batch of `count` slots from `data` (with
/// replacement), deterministically from `seed`.
pub fn make_eval_batch(
    data: &[SynthSample],
    sched: &NoiseSchedule,
    count: usize,
    seed: u64,
    drop_all: f64,
    drop_each: f64,
) -> Result<EvalBatch> {
    if data.is_empty() {
        return Err(Error::Config("evaluation needs a nonempty dataset".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t_floor = sched.horizon * TIME_FLOOR_FRACTION;
    let mut grids0 = Vec::with_capacity(count);
    let mut grids_t = Vec::with_capacity(count);
    let mut times = Vec::with_capacity(count);
    let mut bundles = Vec::with_capacity(count);
    for _ in 0..count {
        let sample = &data[rng.random_range(0..data.len())];
        let t = t_floor + rng.random::<f64>() * (sched.horizon - t_floor);
        let corrupted = forward_sample(&sample.grid, sched, t, rng.random::<u64>())?;
        let bundle = apply_condition_dropout(sample.bundle(), &mut rng, drop_all, drop_each);
        grids0.push(sample.grid.clone());
        grids_t.push(corrupted);
        times.push(t);
        bundles.push(bundle);
    }
    Ok(EvalBatch { grids0, grids_t, times, bundles })
}

/// Mean per-slot score-entropy loss of an arbitrary scorer over a frozen
/// batch. The scorer sees exactly (corrupted grid, time, bundle).
pub fn mean_dse<F>(batch: &EvalBatch, sched: &NoiseSchedule, mut score_fn: F) -> Result<f64>
where
    F: FnMut(&TokenGrid, f64, &ConditionBundle) -> Result<ScoreField>,
{
    let mut total = 0.0;
    for i in 0..batch.grids_t.len() {
        let field = score_fn(&batch.grids_t[i], batch.times[i], &batch.bundles[i])?;
        total += dse_loss(&field, &batch.grids_t[i], &batch.grids0[i], sched, batch.times[i])?;
    }
    Ok(total / batch.grids_t.len() as f64)
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

/// Runs score-entropy training, returning the metrics trace. If `trace` is
/// given, rows stream to it as CSV (with header).
pub fn train_loop(
    net: &mut Network,
    data: &[SynthSample],
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    mut trace: Option<&mut dyn Write>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    sched.validate()?;
    if data.is_empty() {
        return Err(Error::Config("training needs a nonempty dataset".into()));
    }
    let speakers = net.config().adapter_in;
    let id_dim = net.config().id_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(&net.params, cfg.lr, cfg.weight_decay);
    let t_floor = sched.horizon * TIME_FLOOR_FRACTION;
    let b = cfg.batch_size;
    let started = Instant::now();

    if let Some(w) = trace.as_deref_mut() {
        writeln!(w, "iter,dse_loss,id_loss,total_loss,mask_fraction_mean,wall_ms")?;
    }

    let mut rows = Vec::with_capacity(cfg.iters);
    let mut last_good: i64 = -1;
    for iter in 0..cfg.iters {
        // Assemble the batch.
        let mut grids0 = Vec::with_capacity(b);
        let mut grids_t = Vec::with_capacity(b);
        let mut times = Vec::with_capacity(b);
        let mut bundles = Vec::with_capacity(b);
        let mut adapter_in = Array2::zeros((b, speakers));
        let mut adapter_target = Array2::zeros((b, id_dim));
        for slot in 0..b {
            let sample = &data[rng.random_range(0..data.len())];
            let t = t_floor + rng.random::<f64>() * (sched.horizon - t_floor);
            let corrupted = forward_sample(&sample.grid, sched, t, rng.random::<u64>())?;
            let bundle = apply_condition_dropout(
                sample.bundle(),
                &mut rng,
                cfg.drop_all_prob,
                cfg.drop_each_prob,
            );
            adapter_in[(slot, sample.speaker as usize)] = 1.0;
            for d in 0..speakers {
                adapter_in[(slot, d)] += cfg.adapter_noise_std * crate::nn::randn(&mut rng);
            }
            adapter_target.row_mut(slot).assign(&sample.identity);
            grids0.push(sample.grid.clone());
            grids_t.push(corrupted);
            times.push(t);
            bundles.push(bundle);
        }
        let mask_fraction =
            grids_t.iter().map(|g| g.mask_fraction()).sum::<f64>() / b as f64;

        // Forward, losses, gradients.
        net.params.zero_grads();
        let pass = net.forward(&grids_t, &times, &bundles, sched)?;
        let mut dse_total = 0.0;
        let mut grads = Vec::with_capacity(b);
        for i in 0..b {
            let (loss_i, mut grad_i) =
                dse_grad_logits(&pass.log_scores[i], &grids_t[i], &grids0[i], sched, times[i])?;
            dse_total += loss_i;
            grad_i.mapv_inplace(|g| g / b as f64);
            grads.push(grad_i);
        }
        let dse_mean = dse_total / b as f64;
        net.backward(&pass, &grads)?;

        let (adapter_out, adapter_cache) = net.adapter_forward(&adapter_in)?;
        let (id_loss, id_grad) = identity_loss(&adapter_out, &adapter_target)?;
        let scaled = id_grad.mapv(|g| g * cfg.lambda_id);
        net.adapter_backward(&adapter_cache, &scaled);

        let total = dse_mean + cfg.lambda_id * id_loss;
        if !total.is_finite() {
            return Err(Error::NonFiniteLoss { iter, last_good });
        }
        last_good = iter as i64;
        opt.lr = scheduled_lr(cfg, iter);
        opt.step(&mut net.params);

        let row = TraceRow {
            iter,
            dse_loss: dse_mean,
            id_loss,
            total_loss: total,
            mask_fraction,
            wall_ms: started.elapsed().as_millis() as u64,
        };
        if let Some(w) = trace.as_deref_mut() {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                row.iter, row.dse_loss, row.id_loss, row.total_loss, row.mask_fraction, row.wall_ms
            )?;
        }
        rows.push(row);
    }
    let final_total_loss = rows.last().map(|r| r.total_loss).unwrap_or(f64::NAN);
    Ok(TrainOutcome { rows, final_total_loss })
}

/// Learning rate for one iteration under the cosine decay policy. A final
/// fraction of 1.0 short-circuits to the configured rate so the default
/// behaviour is exactly constant.
fn scheduled_lr(cfg: &TrainConfig, iter: usize) -> f64 {
    if cfg.lr_final_frac >= 1.0 || cfg.iters <= 1 {
        return cfg.lr;
    }
    let progress = iter as f64 / (cfg.iters - 1) as f64;
    let cosine = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
    cfg.lr * (cfg.lr_final_frac + (1.0 - cfg.lr_final_frac) * cosine)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::score_prefactor;
    use crate::network::{NetworkConfig, Variant};
    use crate::synthdata::{Generator, SynthSpec};
    use crate::token_space::StateSpaceConfig;

    fn tiny_setup() -> (NetworkConfig, StateSpaceConfig, SynthSpec) {
        (
            NetworkConfig {
                channels: 8,
                heads: 2,
                low_blocks: 1,
                high_blocks: 1,
                lip_dim: 2,
                id_dim: 4,
                emo_classes: 2,
                adapter_in: 2,
            },
            StateSpaceConfig {
                levels: 2,
                frames: 4,
                vocab: 3,
                split: 1,
                emotion_downsample: 2,
            },
            SynthSpec {
                speakers: 2,
                emotions: 2,
                phonemes: 2,
                noise_eps: 0.1,
                id_dim: 4,
                seed: 5,
            },
        )
    }

    #[test]
    fn dse_matches_hand_computed_example() {
        // One masked position, V = 2, time chosen so σ̄ = ln 2 (prefactor 1).
        let sched = NoiseSchedule::default();
        let t = sched.time_for_sigma_bar(2f64.ln()).unwrap();
        let mut grid0 = TokenGrid::all_masked(1, 1, 2);
        grid0.set(0, 0, 0).unwrap();
        let grid_t = TokenGrid::all_masked(1, 1, 2);
        let mut field = ScoreField::zeros(1, 1, 2);
        field.scores[(0, 0, 0)] = 0.7;
        field.scores[(0, 0, 1)] = 0.4;
        let sigma = sched.sigma(t).unwrap();
        let pref = score_prefactor(sched.sigma_bar(t).unwrap());
        assert!((pref - 1.0).abs() < 1e-12);
        // Hand expansion: (0.7 − 1·ln 0.7 + 1·ln 1 − 1) + (0.4 − 0 + 0).
        let expected = sigma * (0.7 - 0.7f64.ln() - 1.0 + 0.4);
        let got = dse_loss(&field, &grid_t, &grid0, &sched, t).unwrap();
        assert!((got - expected).abs() < 1e-12, "got {got}, expected {expected}");
        // The loss is zero exactly at the concrete target.
        let mut exact = ScoreField::zeros(1, 1, 2);
        exact.scores[(0, 0, 0)] = 1.0;
        exact.scores[(0, 0, 1)] = 0.0;
        let zero = dse_loss(&exact, &grid_t, &grid0, &sched, t).unwrap();
        assert!(zero.abs() < 1e-12, "loss at the target must vanish, got {zero}");
    }

    #[test]
    fn dse_rejects_invalid_scores() {
        let sched = NoiseSchedule::default();
        let mut grid0 = TokenGrid::all_masked(1, 1, 2);
        grid0.set(0, 0, 0).unwrap();
        let grid_t = TokenGrid::all_masked(1, 1, 2);

        let mut negative = ScoreField::zeros(1, 1, 2);
        negative.scores[(0, 0, 1)] = -0.1;
        assert!(matches!(
            dse_loss(&negative, &grid_t, &grid0, &sched, 0.5),
            Err(Error::InvalidScore { .. })
        ));

        // Zero where the target is positive diverges.
        let zero_at_target = ScoreField::zeros(1, 1, 2);
        assert!(matches!(
            dse_loss(&zero_at_target, &grid_t, &grid0, &sched, 0.5),
            Err(Error::InvalidScore { .. })
        ));

        // Zero where the target is zero is legitimate.
        let mut fine = ScoreField::zeros(1, 1, 2);
        fine.scores[(0, 0, 0)] = 0.8;
        assert!(dse_loss(&fine, &grid_t, &grid0, &sched, 0.5).is_ok());
    }

    #[test]
    fn dse_gradient_matches_finite_differences() {
        let sched = NoiseSchedule::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut grid0 = TokenGrid::all_masked(2, 3, 4);
        for r in 0..2 {
            for j in 0..3 {
                grid0.set(r, j, rng.random_range(0..4) as u16).unwrap();
            }
        }
        let t = 0.63;
        let grid_t = forward_sample(&grid0, &sched, t, 99).unwrap();
        assert!(grid_t.has_mask());
        let z = Array3::from_shape_fn((2, 3, 4), |_| rng.random::<f64>() - 0.5);
        let (loss, grad) = dse_grad_logits(&z, &grid_t, &grid0, &sched, t).unwrap();
        assert!(loss.is_finite());
        let h = 1e-6;
        for r in 0..2 {
            for j in 0..3 {
                for v in 0..4 {
                    let mut zp = z.clone();
                    zp[(r, j, v)] += h;
                    let (lp, _) = dse_grad_logits(&zp, &grid_t, &grid0, &sched, t).unwrap();
                    let mut zm = z.clone();
                    zm[(r, j, v)] -= h;
                    let (lm, _) = dse_grad_logits(&zm, &grid_t, &grid0, &sched, t).unwrap();
                    let numeric = (lp - lm) / (2.0 * h);
                    let a = grad[(r, j, v)];
                    assert!(
                        (a - numeric).abs() < 1e-6 * a.abs().max(numeric.abs()).max(1.0),
                        "({r},{j},{v}): {a} vs {numeric}"
                    );
                    if !grid_t.is_masked(r, j) {
                        assert_eq!(a, 0.0, "unmasked positions carry no gradient");
                    }
                }
            }
        }
        // Value agrees with the non-logit form.
        let field = ScoreField { scores: z.mapv(f64::exp) };
        let direct = dse_loss(&field, &grid_t, &grid0, &sched, t).unwrap();
        assert!((direct - loss).abs() < 1e-10);
    }

    #[test]
    fn expected_dse_is_minimized_at_prefactor_times_posterior() {
        // E_{x0 ~ q}[loss(s)] should be stationary and minimal at
        // s* = prefactor · q.
        let sched = NoiseSchedule::default();
        let t = 0.7;
        let sbar = sched.sigma_bar(t).unwrap();
        let pref = score_prefactor(sbar);
        let q = [0.5, 0.3, 0.2];
        let v = q.len();

        let expected_loss = |s: &[f64]| -> f64 {
            // Average the per-x0 loss over the posterior.
            let mut total = 0.0;
            for (x0, &qx) in q.iter().enumerate() {
                let mut grid0 = TokenGrid::all_masked(1, 1, v as u32);
                grid0.set(0, 0, x0 as u16).unwrap();
                let grid_t = TokenGrid::all_masked(1, 1, v as u32);
                let mut field = ScoreField::zeros(1, 1, v);
                for (i, &si) in s.iter().enumerate() {
                    field.scores[(0, 0, i)] = si;
                }
                total += qx * dse_loss(&field, &grid_t, &grid0, &sched, t).unwrap();
            }
            total
        };

        let star: Vec<f64> = q.iter().map(|&qx| pref * qx).collect();
        let at_star = expected_loss(&star);
        // Perturbations in every direction increase the expected loss.
        for i in 0..v {
            for delta in [-0.02, 0.02] {
                let mut s = star.clone();
                s[i] = (s[i] + delta).max(1e-9);
                assert!(
                    expected_loss(&s) > at_star,
                    "perturbing coordinate {i} by {delta} should not improve"
                );
            }
        }
        // And the analytic stationarity: d/ds_v E = σ(1 − pref·q_v / s_v) = 0.
        let h = 1e-7;
        for i in 0..v {
            let mut sp = star.clone();
            sp[i] += h;
            let mut sm = star.clone();
            sm[i] -= h;
            let d = (expected_loss(&sp) - expected_loss(&sm)) / (2.0 * h);
            assert!(d.abs() < 1e-6, "coordinate {i}: gradient {d} at the optimum");
        }
    }

    #[test]
    fn identity_loss_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let out = Array2::from_shape_fn((3, 4), |_| rng.random::<f64>());
        let tgt = Array2::from_shape_fn((3, 4), |_| rng.random::<f64>());
        let (loss, grad) = identity_loss(&out, &tgt).unwrap();
        assert!(loss > 0.0);
        let h = 1e-7;
        for i in 0..3 {
            for j in 0..4 {
                let mut op = out.clone();
                op[(i, j)] += h;
                let (lp, _) = identity_loss(&op, &tgt).unwrap();
                let mut om = out.clone();
                om[(i, j)] -= h;
                let (lm, _) = identity_loss(&om, &tgt).unwrap();
                let numeric = (lp - lm) / (2.0 * h);
                assert!((grad[(i, j)] - numeric).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn dropout_statistics_match_the_law() {
        let mut rng = ChaCha8Rng::seed_from_u64(100);
        let (_, space, spec) = tiny_setup();
        let gen = Generator::new(spec, space).unwrap();
        let sample = gen.sample(0);
        let n = 20_000;
        let mut all_null = 0u64;
        let mut lip_absent = 0u64;
        for _ in 0..n {
            let b = apply_condition_dropout(sample.bundle(), &mut rng, 0.10, 0.10);
            if b.is_empty() && b.lip.is_none() && b.id.is_none() && b.emo.is_none() {
                // is_empty covers it; count precisely below.
            }
            if b.lip.is_none() && b.id.is_none() && b.emo.is_none() {
                all_null += 1;
            }
            if b.lip.is_none() {
                lip_absent += 1;
            }
        }
        let p_all = all_null as f64 / n as f64;
        let p_lip = lip_absent as f64 / n as f64;
        // P(all dropped) = 0.10 + 0.90 · 0.10³
        let expect_all = 0.10 + 0.90 * 0.001;
        let expect_lip = 0.10 + 0.90 * 0.10;
        let sd_all = (expect_all * (1.0 - expect_all) / n as f64).sqrt();
        let sd_lip = (expect_lip * (1.0 - expect_lip) / n as f64).sqrt();
        assert!((p_all - expect_all).abs() < 4.0 * sd_all, "all-null rate {p_all}");
        assert!((p_lip - expect_lip).abs() < 4.0 * sd_lip, "lip-absent rate {p_lip}");
    }

    #[test]
    fn training_runs_deterministically_and_descends() {
        let (ncfg, space, spec) = tiny_setup();
        let sched = NoiseSchedule::default();
        let gen = Generator::new(spec, space.clone()).unwrap();
        let data = gen.generate(0, 64);
        let cfg = TrainConfig {
            iters: 60,
            batch_size: 8,
            lr: 3e-3,
            lambda_id: 1.0,
            seed: 7,
            ..Default::default()
        };

        let mut net1 = Network::new(ncfg.clone(), space.clone(), Variant::Hierarchical, 1).unwrap();
        let out1 = train_loop(&mut net1, &data, &sched, &cfg, None).unwrap();
        let mut net2 = Network::new(ncfg.clone(), space.clone(), Variant::Hierarchical, 1).unwrap();
        let out2 = train_loop(&mut net2, &data, &sched, &cfg, None).unwrap();
        // Traces must agree exactly in everything but wall time.
        for (a, b) in out1.rows.iter().zip(&out2.rows) {
            assert_eq!(
                (a.iter, a.dse_loss, a.id_loss, a.total_loss, a.mask_fraction),
                (b.iter, b.dse_loss, b.id_loss, b.total_loss, b.mask_fraction),
                "identical seeds must yield identical traces"
            );
        }

        let first5: f64 = out1.rows[..5].iter().map(|r| r.dse_loss).sum::<f64>() / 5.0;
        let last5: f64 = out1.rows[55..].iter().map(|r| r.dse_loss).sum::<f64>() / 5.0;
        assert!(
            last5 < first5,
            "score loss should descend: first {first5:.4}, last {last5:.4}"
        );
        assert_eq!(out1.rows.len(), 60);
        // Mask fractions average near the schedule's expectation (≈ 1/2).
        let mf: f64 = out1.rows.iter().map(|r| r.mask_fraction).sum::<f64>() / 60.0;
        assert!((mf - 0.5).abs() < 0.1, "mean mask fraction {mf}");
    }

    #[test]
    fn cosine_lr_schedule_hits_its_endpoints() {
        let cfg = TrainConfig { iters: 101, lr: 2e-3, lr_final_frac: 0.05, ..Default::default() };
        assert_eq!(scheduled_lr(&cfg, 0), 2e-3);
        let end = scheduled_lr(&cfg, 100);
        assert!((end - 1e-4).abs() < 1e-15, "final lr should be lr·frac, got {end}");
        let mid = scheduled_lr(&cfg, 50);
        assert!((mid - 0.5 * (2e-3 + 1e-4)).abs() < 1e-15, "midpoint is the average, got {mid}");
        for k in 1..101 {
            assert!(scheduled_lr(&cfg, k) < scheduled_lr(&cfg, k - 1), "decay must be monotone");
        }

        let constant = TrainConfig { iters: 101, lr: 2e-3, ..Default::default() };
        for k in [0, 17, 100] {
            assert_eq!(scheduled_lr(&constant, k), 2e-3);
        }
        assert!(TrainConfig { lr_final_frac: 1.5, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { lr_final_frac: -0.1, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn zero_learning_rate_freezes_parameters() {
        let (ncfg, space, spec) = tiny_setup();
        let sched = NoiseSchedule::default();
        let gen = Generator::new(spec, space.clone()).unwrap();
        let data = gen.generate(0, 16);
        let cfg = TrainConfig {
            iters: 5,
            batch_size: 4,
            lr: 0.0,
            weight_decay: 0.0,
            seed: 3,
            ..Default::default()
        };
        let mut net = Network::new(ncfg, space, Variant::Hierarchical, 2).unwrap();
        let before: Vec<_> = net.params.tensors.iter().map(|t| t.value.clone()).collect();
        train_loop(&mut net, &data, &sched, &cfg, None).unwrap();
        for (b, t) in before.iter().zip(&net.params.tensors) {
            assert_eq!(b, &t.value, "lr = 0 must leave {} untouched", t.name);
        }
    }

    #[test]
    fn non_finite_loss_aborts_with_context() {
        let (ncfg, space, spec) = tiny_setup();
        let sched = NoiseSchedule::default();
        let gen = Generator::new(spec, space.clone()).unwrap();
        let data = gen.generate(0, 16);
        let cfg = TrainConfig { iters: 10, batch_size: 4, seed: 3, ..Default::default() };
        let mut net = Network::new(ncfg, space, Variant::Hierarchical, 2).unwrap();
        // Poison one parameter.
        let id = net.params.id("head0.w").unwrap();
        net.params.tensors[id].value.fill(f64::NAN);
        match train_loop(&mut net, &data, &sched, &cfg, None) {
            Err(Error::NonFiniteLoss { iter, .. }) => assert_eq!(iter, 0),
            other => panic!("expected a non-finite-loss abort, got {other:?}"),
        }
    }

    #[test]
    fn trace_csv_has_header_and_rows() {
        let (ncfg, space, spec) = tiny_setup();
        let sched = NoiseSchedule::default();
        let gen = Generator::new(spec, space.clone()).unwrap();
        let data = gen.generate(0, 16);
        let cfg = TrainConfig { iters: 3, batch_size: 2, seed: 1, ..Default::default() };
        let mut net = Network::new(ncfg, space, Variant::Hierarchical, 2).unwrap();
        let mut csv = Vec::new();
        train_loop(&mut net, &data, &sched, &cfg, Some(&mut csv)).unwrap();
        let text = String::from_utf8(csv).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[0], "iter,dse_loss,id_loss,total_loss,mask_fraction_mean,wall_ms");
        assert!(lines[1].starts_with("0,"));
    }

    #[test]
    fn eval_batch_is_deterministic_and_oracle_beats_uniform() {
        let (_, space, spec) = tiny_setup();
        let sched = NoiseSchedule::default();
        let gen = Generator::new(spec, space.clone()).unwrap();
        let data = gen.generate(0, 64);
        let a = make_eval_batch(&data, &sched, 32, 11, 0.1, 0.1).unwrap();
        let b = make_eval_batch(&data, &sched, 32, 11, 0.1, 0.1).unwrap();
        assert_eq!(a.times, b.times);
        assert_eq!(a.grids_t.len(), 32);

        // The exact oracle scores must achieve a strictly lower DSE than a
        // deliberately miscalibrated scorer (uniform posterior).
        let oracle = mean_dse(&a, &sched, |g, t, bundle| gen.oracle_score(g, t, bundle, &sched)).unwrap();
        let uniform = mean_dse(&a, &sched, |g, t, _| {
            let sbar = sched.sigma_bar(t)?;
            let pref = score_prefactor(sbar);
            let v = g.vocab() as usize;
            let mut f = ScoreField::zeros(g.levels(), g.frames(), v);
            for r in 0..g.levels() {
                for j in 0..g.frames() {
                    if g.is_masked(r, j) {
                        for val in 0..v {
                            f.scores[(r, j, val)] = pref / v as f64;
                        }
                    }
                }
            }
            Ok(f)
        })
        .unwrap();
        assert!(
            oracle < uniform,
            "oracle {oracle:.4} must beat the uniform baseline {uniform:.4}"
        );
    }
}
