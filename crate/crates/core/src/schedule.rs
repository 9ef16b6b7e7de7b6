//! Noise schedules σ(t) and cumulative noise σ̄(t).
//!
//! The cumulative noise drives the forward corruption: a token survives to
//! time t unmasked with probability e^{−σ̄(t)}, so the masking probability is
//! 1 − e^{−σ̄(t)}.
//!
//! Two kinds are provided:
//!
//! * `log_linear` — defined by its property: the expected masked-token
//!   fraction is *linear in t*. That forces σ̄(t) = −ln(1 − (t/T)(1−ε)) with a
//!   small terminal unmasked fraction ε keeping σ̄(T) finite. σ(t) is the
//!   analytic derivative, not a numerical one. `sigma_min`/`sigma_max` are
//!   ignored by this kind.
//! * `linear_sigma` — σ(t) interpolates affinely from `sigma_min` to
//!   `sigma_max`; σ̄ is its closed-form integral. With
//!   `sigma_min == sigma_max == c` this is the constant-rate schedule
//!   σ̄(t) = c·t.

use crate::{Error, Result};
use serde::{Deserialize, Serialize};

/// Terminal unmasked fraction ε of the log-linear schedule: the masked
/// fraction at t = T is 1 − ε, keeping σ̄(T) = −ln ε finite.
pub const TERMINAL_UNMASKED: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    LogLinear,
    LinearSigma,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSchedule {
    pub kind: ScheduleKind,
    /// σ(0) for `linear_sigma`; ignored by `log_linear`.
    pub sigma_min: f64,
    /// σ(T) for `linear_sigma`; ignored by `log_linear`.
    pub sigma_max: f64,
    /// Time horizon T.
    pub horizon: f64,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self {
            kind: ScheduleKind::LogLinear,
            sigma_min: 1.0,
            sigma_max: 1.0,
            horizon: 1.0,
        }
    }
}

impl NoiseSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.horizon > 0.0) {
            return Err(Error::Config(format!("horizon must be positive, got {}", self.horizon)));
        }
        if let ScheduleKind::LinearSigma = self.kind {
            if !(self.sigma_min > 0.0 && self.sigma_max > 0.0) {
                return Err(Error::Config(format!(
                    "linear_sigma needs positive sigma_min/sigma_max, got {}/{}",
                    self.sigma_min, self.sigma_max
                )));
            }
        }
        Ok(())
    }

    fn check_t(&self, t: f64) -> Result<()> {
        if !(0.0..=self.horizon).contains(&t) {
            return Err(Error::TimeOutOfRange { t, horizon: self.horizon });
        }
        Ok(())
    }

    /// Instantaneous noise rate σ(t).
    pub fn sigma(&self, t: f64) -> Result<f64> {
        self.check_t(t)?;
        let tt = t / self.horizon;
        Ok(match self.kind {
            ScheduleKind::LogLinear => {
                let a = 1.0 - TERMINAL_UNMASKED;
                a / (self.horizon * (1.0 - tt * a))
            }
            ScheduleKind::LinearSigma => self.sigma_min + (self.sigma_max - self.sigma_min) * tt,
        })
    }

    /// Cumulative noise σ̄(t) = ∫₀ᵗ σ(s) ds, in closed form.
    pub fn sigma_bar(&self, t: f64) -> Result<f64> {
        self.check_t(t)?;
        let tt = t / self.horizon;
        Ok(match self.kind {
            ScheduleKind::LogLinear => {
                let a = 1.0 - TERMINAL_UNMASKED;
                -(1.0 - tt * a).ln()
            }
            ScheduleKind::LinearSigma => {
                self.sigma_min * t + 0.5 * (self.sigma_max - self.sigma_min) * t * tt
            }
        })
    }

    /// Probability that a token drawn clean at time 0 is MASK at time t:
    /// 1 − e^{−σ̄(t)}.
    pub fn mask_probability(&self, t: f64) -> Result<f64> {
        Ok(1.0 - (-self.sigma_bar(t)?).exp())
    }

    /// Time t whose cumulative noise equals the given σ̄ (inverse of
    /// [`NoiseSchedule::sigma_bar`]), used to corrupt evaluation batches at a
    /// prescribed masking level such as σ̄ = ln 2.
    pub fn time_for_sigma_bar(&self, sigma_bar: f64) -> Result<f64> {
        if sigma_bar < 0.0 {
            return Err(Error::Config(format!("sigma_bar must be ≥ 0, got {sigma_bar}")));
        }
        match self.kind {
            ScheduleKind::LogLinear => {
                let a = 1.0 - TERMINAL_UNMASKED;
                let tt = (1.0 - (-sigma_bar).exp()) / a;
                if tt > 1.0 {
                    return Err(Error::Config(format!(
                        "sigma_bar {sigma_bar} exceeds terminal cumulative noise {}",
                        -(TERMINAL_UNMASKED).ln()
                    )));
                }
                Ok(tt * self.horizon)
            }
            ScheduleKind::LinearSigma => {
                // Bisection: σ̄ is strictly increasing and cheap to evaluate.
                let (mut lo, mut hi) = (0.0, self.horizon);
                if sigma_bar > self.sigma_bar(self.horizon)? {
                    return Err(Error::Config(format!(
                        "sigma_bar {sigma_bar} exceeds terminal cumulative noise"
                    )));
                }
                for _ in 0..200 {
                    let mid = 0.5 * (lo + hi);
                    if self.sigma_bar(mid)? < sigma_bar {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                Ok(0.5 * (lo + hi))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn simpson<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, n: usize) -> f64 {
        let h = (b - a) / n as f64;
        let mut acc = f(a) + f(b);
        for i in 1..n {
            let w = if i % 2 == 0 { 2.0 } else { 4.0 };
            acc += w * f(a + i as f64 * h);
        }
        acc * h / 3.0
    }

    #[test]
    fn sigma_bar_zero_at_origin() {
        for kind in [ScheduleKind::LogLinear, ScheduleKind::LinearSigma] {
            let sched = NoiseSchedule { kind, ..Default::default() };
            assert_eq!(sched.sigma_bar(0.0).unwrap(), 0.0);
        }
    }

    #[test]
    fn log_linear_half_time_masks_half_of_terminal() {
        let sched = NoiseSchedule::default();
        let sb = sched.sigma_bar(0.5).unwrap();
        let expected = (1.0 - TERMINAL_UNMASKED) / 2.0;
        assert!((1.0 - (-sb).exp() - expected).abs() < 1e-12);
        // Cross-check the closed form by numerically integrating σ.
        let quad = simpson(|s| sched.sigma(s).unwrap(), 0.0, 0.5, 4000);
        assert!((quad - sb).abs() < 1e-9, "quadrature {quad} vs closed form {sb}");
    }

    #[test]
    fn constant_sigma_integrates_to_ct() {
        let c = 1.7;
        let sched = NoiseSchedule {
            kind: ScheduleKind::LinearSigma,
            sigma_min: c,
            sigma_max: c,
            horizon: 2.0,
        };
        for t in [0.0, 0.3, 1.0, 2.0] {
            assert!((sched.sigma_bar(t).unwrap() - c * t).abs() < 1e-12);
        }
    }

    #[test]
    fn linear_sigma_integral_matches_quadrature() {
        let sched = NoiseSchedule {
            kind: ScheduleKind::LinearSigma,
            sigma_min: 0.2,
            sigma_max: 3.0,
            horizon: 1.5,
        };
        for t in [0.2, 0.9, 1.5] {
            let quad = simpson(|s| sched.sigma(s).unwrap(), 0.0, t, 4000);
            assert!((quad - sched.sigma_bar(t).unwrap()).abs() < 1e-9);
        }
    }

    #[test]
    fn mask_probability_anchors() {
        let sched = NoiseSchedule {
            kind: ScheduleKind::LinearSigma,
            sigma_min: 2.0f64.ln(),
            sigma_max: 2.0f64.ln(),
            horizon: 1.0,
        };
        // σ̄ = ln 2 at t = 1 → probability exactly 1/2.
        assert!((sched.mask_probability(1.0).unwrap() - 0.5).abs() < 1e-15);

        let big = NoiseSchedule {
            kind: ScheduleKind::LinearSigma,
            sigma_min: 20.0,
            sigma_max: 20.0,
            horizon: 1.0,
        };
        assert!((big.mask_probability(1.0).unwrap() - 1.0).abs() < 1e-8);
        assert_eq!(NoiseSchedule::default().mask_probability(0.0).unwrap(), 0.0);
    }

    #[test]
    fn log_linear_mask_fraction_is_linear_in_t() {
        let sched = NoiseSchedule::default();
        let at_horizon = sched.mask_probability(sched.horizon).unwrap();
        for i in 0..=1000 {
            let t = i as f64 / 1000.0;
            let p = sched.mask_probability(t).unwrap();
            assert!(
                (p - t * at_horizon).abs() < 1e-10,
                "nonlinearity at t={t}: {p} vs {}",
                t * at_horizon
            );
        }
    }

    #[test]
    fn sigma_bar_monotone() {
        for kind in [ScheduleKind::LogLinear, ScheduleKind::LinearSigma] {
            let sched = NoiseSchedule { kind, sigma_min: 0.5, sigma_max: 4.0, horizon: 1.0 };
            let mut prev = -1.0;
            for i in 0..=500 {
                let sb = sched.sigma_bar(i as f64 / 500.0).unwrap();
                assert!(sb > prev);
                prev = sb;
            }
        }
    }

    #[test]
    fn time_range_enforced() {
        let sched = NoiseSchedule::default();
        assert!(sched.sigma_bar(-0.01).is_err());
        assert!(sched.sigma_bar(1.01).is_err());
    }

    #[test]
    fn time_for_sigma_bar_inverts() {
        for kind in [ScheduleKind::LogLinear, ScheduleKind::LinearSigma] {
            let sched = NoiseSchedule { kind, sigma_min: 0.3, sigma_max: 5.0, horizon: 2.0 };
            for target in [0.01, 0.3, 2.0f64.ln()] {
                let t = sched.time_for_sigma_bar(target).unwrap();
                assert!((sched.sigma_bar(t).unwrap() - target).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn markov_composition_identity() {
        // Masking 0→t1 then t1→t2 with the incremental probability equals
        // one-step masking to t2: 1−(1−m1)·e^{−(σ̄2−σ̄1)} = 1−e^{−σ̄2}.
        let sched = NoiseSchedule::default();
        let (t1, t2) = (0.3, 0.8);
        let m1 = sched.mask_probability(t1).unwrap();
        let inc = 1.0 - (-(sched.sigma_bar(t2).unwrap() - sched.sigma_bar(t1).unwrap())).exp();
        let composed = 1.0 - (1.0 - m1) * (1.0 - inc);
        assert!((composed - sched.mask_probability(t2).unwrap()).abs() < 1e-12);
    }
}
