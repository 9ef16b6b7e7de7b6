//! Counter-based random streams.
//!
//! Forward corruption and reverse sampling draw one uniform per grid position
//! from a pure function of (seed, tags…). That makes every per-position draw
//! independent of iteration order, so parallel execution over positions or
//! samples cannot change results — determinism is structural, not scheduled.

/// splitmix64 finalizer: a well-mixed bijection on u64.
pub(crate) fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Folds a seed with a sequence of tag words into one well-mixed word.
pub(crate) fn stream(seed: u64, tags: &[u64]) -> u64 {
    let mut h = mix(seed);
    for &t in tags {
        h = mix(h ^ t.wrapping_mul(0x2545f4914f6cdd1d));
    }
    h
}

/// Converts a mixed word to a uniform double in [0, 1).
pub(crate) fn u01(h: u64) -> f64 {
    (h >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// One uniform draw in [0, 1) for the given seed and position tags.
pub(crate) fn uniform(seed: u64, tags: &[u64]) -> f64 {
    u01(stream(seed, tags))
}
