//! Synthetic audio-visual token corpus with an exact Bayesian oracle.
//!
//! The generator draws, per sample: a speaker, a phoneme per frame, and an
//! emotion per coarse block, all uniform. The level-0 token of frame j is a
//! deterministic table lookup `f(phoneme_j, speaker)` hit with probability
//! 1 − ε, otherwise uniform over the vocabulary; each higher level r draws
//! `g_r(level0_j, emotion_block)` with the same ε-mixture. Conditions are
//! synthesized alongside: per-frame lip features (phoneme one-hot plus
//! bounded uniform noise, so the phoneme stays exactly recoverable by
//! argmax), a per-speaker unit-norm identity vector, and the emotion labels
//! themselves.
//!
//! Because every column (frame) is conditionally independent given the
//! sample-wide latents, the posterior over any masked token given the
//! observed tokens in its own column plus the provided conditions is an
//! exact, small sum over (speaker, phoneme, emotion, level-0 value)
//! combinations. [`Generator::oracle_posterior`] computes it by brute-force
//! enumeration, and [`Generator::oracle_score`] turns it into the
//! marginalized score that reverse diffusion consumes — the reference
//! implementation the learned network is measured against.
//!
//! All randomness is counter-based on the spec seed: sample i is a pure
//! function of (seed, i), independent of generation order.

use crate::diffusion::{score_prefactor, ScoreField};
use crate::network::ConditionBundle;
use crate::rng;
use crate::schedule::NoiseSchedule;
use crate::token_space::{CorpusHeader, StateSpaceConfig, TokenGrid};
use crate::{Error, Result};
use ndarray::{Array1, Array2, Array3};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

/// Largest latent enumeration (speakers × phonemes × emotions × vocab) the
/// oracle will attempt per column.
pub const ORACLE_STATE_LIMIT: u128 = 10_000_000;

// Stream tags keeping every random draw in its own namespace.
const T_F: u64 = 1;
const T_G: u64 = 2;
const T_ID: u64 = 3;
const T_SPK: u64 = 4;
const T_EMO: u64 = 5;
const T_PHON: u64 = 6;
const T_TOK: u64 = 7;
const T_LIP: u64 = 8;

/// Parameters of the synthetic data law. Defaults are the desk-scale
/// configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    /// Number of speakers (identity classes).
    pub speakers: usize,
    /// Number of emotion classes.
    pub emotions: usize,
    /// Number of phoneme classes (also the lip feature dimension).
    pub phonemes: usize,
    /// Corruption probability of each token draw.
    pub noise_eps: f64,
    /// Dimension of the identity embedding vectors.
    pub id_dim: usize,
    /// Seed of the data law: tables, samples, everything.
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            speakers: 8,
            emotions: 7,
            phonemes: 8,
            noise_eps: 0.1,
            id_dim: 8,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.speakers == 0 || self.emotions == 0 || self.phonemes == 0 || self.id_dim == 0 {
            return Err(Error::Config("class counts and id_dim must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.noise_eps) {
            return Err(Error::Config(format!(
                "noise_eps must lie in [0, 1], got {}",
                self.noise_eps
            )));
        }
        Ok(())
    }
}

/// One fully-observed draw from the data law, with its conditions.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSample {
    /// Clean token grid (no masks).
    pub grid: TokenGrid,
    pub speaker: u16,
    /// Emotion label per coarse block (length frames / emotion_downsample).
    pub emotions: Vec<u16>,
    /// Ground-truth phoneme per frame.
    pub phonemes: Vec<u16>,
    /// Per-frame lip features, shape (frames, phonemes).
    pub lip: Array2<f64>,
    /// Unit-norm identity vector of the speaker.
    pub identity: Array1<f64>,
}

impl SynthSample {
    /// The full condition bundle (nothing dropped).
    pub fn bundle(&self) -> ConditionBundle {
        ConditionBundle {
            lip: Some(self.lip.clone()),
            id: Some(self.identity.clone()),
            emo: Some(self.emotions.clone()),
        }
    }
}

/// Sidecar record serialized to JSONL next to the token corpus.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct SidecarRecord {
    speaker: u16,
    emotions: Vec<u16>,
    phonemes: Vec<u16>,
    lip: Vec<Vec<f64>>,
    identity: Vec<f64>,
}

/// Deterministic sampler plus exact oracle for the synthetic data law.
#[derive(Debug, Clone)]
pub struct Generator {
    spec: SynthSpec,
    space: StateSpaceConfig,
    /// (phonemes, speakers) → level-0 token.
    f: Array2<u16>,
    /// Per level r ≥ 1: (vocab, emotions) → token; index 0 holds level 1.
    g: Vec<Array2<u16>>,
    /// (speakers, id_dim) unit-norm identity rows.
    id_table: Array2<f64>,
}

impl Generator {
    pub fn new(spec: SynthSpec, space: StateSpaceConfig) -> Result<Self> {
        spec.validate()?;
        space.validate()?;
        let v = space.vocab as usize;
        let seed = spec.seed;
        let f = Array2::from_shape_fn((spec.phonemes, spec.speakers), |(p, s)| {
            pick(rng::uniform(seed, &[T_F, p as u64, s as u64]), v)
        });
        let g = (1..space.levels)
            .map(|r| {
                Array2::from_shape_fn((v, spec.emotions), |(a, e)| {
                    pick(rng::uniform(seed, &[T_G, r as u64, a as u64, e as u64]), v)
                })
            })
            .collect();
        let mut id_table = Array2::zeros((spec.speakers, spec.id_dim));
        for s in 0..spec.speakers {
            let mut norm = 0.0;
            for m in 0..spec.id_dim {
                let u1 = rng::uniform(seed, &[T_ID, s as u64, 2 * m as u64]).max(1e-300);
                let u2 = rng::uniform(seed, &[T_ID, s as u64, 2 * m as u64 + 1]);
                let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
                id_table[(s, m)] = z;
                norm += z * z;
            }
            let norm = norm.sqrt().max(1e-12);
            for m in 0..spec.id_dim {
                id_table[(s, m)] /= norm;
            }
        }
        Ok(Self { spec, space, f, g, id_table })
    }

    pub fn spec(&self) -> &SynthSpec {
        &self.spec
    }

    pub fn space(&self) -> &StateSpaceConfig {
        &self.space
    }

    /// The deterministic level-0 rule f(phoneme, speaker).
    pub fn low_rule(&self, phoneme: u16, speaker: u16) -> u16 {
        self.f[(phoneme as usize, speaker as usize)]
    }

    /// The deterministic level-r rule g_r(level0 token, emotion), r ≥ 1.
    pub fn high_rule(&self, level: usize, low: u16, emotion: u16) -> u16 {
        assert!(level >= 1 && level < self.space.levels, "high_rule level {level}");
        self.g[level - 1][(low as usize, emotion as usize)]
    }

    /// Unit-norm identity vector of a speaker.
    pub fn identity_of(&self, speaker: u16) -> Array1<f64> {
        self.id_table.row(speaker as usize).to_owned()
    }

    /// Nearest identity row (squared euclidean); the inverse of
    /// [`Generator::identity_of`] plus tolerance to adapter noise.
    pub fn speaker_of_identity(&self, id: &Array1<f64>) -> u16 {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for s in 0..self.spec.speakers {
            let d: f64 = self
                .id_table
                .row(s)
                .iter()
                .zip(id.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            if d < best_d {
                best_d = d;
                best = s;
            }
        }
        best as u16
    }

    /// Exact phoneme recovery from a lip feature row (the noise is bounded
    /// below the one-hot gap, so argmax is error-free).
    pub fn phoneme_of_lip(&self, lip_row: ndarray::ArrayView1<'_, f64>) -> u16 {
        let mut best = 0;
        let mut best_v = f64::NEG_INFINITY;
        for (d, &x) in lip_row.iter().enumerate() {
            if x > best_v {
                best_v = x;
                best = d;
            }
        }
        best as u16
    }

    /// Draws sample `index` — a pure function of (seed, index).
    pub fn sample(&self, index: u64) -> SynthSample {
        let seed = self.spec.seed;
        let (r_levels, l, v) = (self.space.levels, self.space.frames, self.space.vocab as usize);
        let eps = self.spec.noise_eps;
        let speaker = pick(rng::uniform(seed, &[T_SPK, index]), self.spec.speakers);
        let blocks = self.space.emo_len();
        let emotions: Vec<u16> = (0..blocks)
            .map(|b| pick(rng::uniform(seed, &[T_EMO, index, b as u64]), self.spec.emotions))
            .collect();
        let phonemes: Vec<u16> = (0..l)
            .map(|j| pick(rng::uniform(seed, &[T_PHON, index, j as u64]), self.spec.phonemes))
            .collect();

        let mut grid = TokenGrid::all_masked(r_levels, l, self.space.vocab);
        for j in 0..l {
            let det0 = self.low_rule(phonemes[j], speaker);
            let low = mixture_draw(
                rng::uniform(seed, &[T_TOK, index, 0, j as u64]),
                eps,
                det0,
                v,
            );
            grid.set(0, j, low).expect("vocab-bounded draw");
            let e = emotions[j / self.space.emotion_downsample];
            for r in 1..r_levels {
                let det = self.high_rule(r, low, e);
                let tok = mixture_draw(
                    rng::uniform(seed, &[T_TOK, index, r as u64, j as u64]),
                    eps,
                    det,
                    v,
                );
                grid.set(r, j, tok).expect("vocab-bounded draw");
            }
        }

        let mut lip = Array2::zeros((l, self.spec.phonemes));
        for j in 0..l {
            for d in 0..self.spec.phonemes {
                let noise = 0.5 * rng::uniform(seed, &[T_LIP, index, j as u64, d as u64]) - 0.25;
                lip[(j, d)] = if d == phonemes[j] as usize { 1.0 } else { 0.0 } + noise;
            }
        }
        let identity = self.identity_of(speaker as u16);
        SynthSample {
            grid,
            speaker: speaker as u16,
            emotions,
            phonemes,
            lip,
            identity,
        }
    }

    /// Draws `count` consecutive samples starting at `start`.
    pub fn generate(&self, start: u64, count: usize) -> Vec<SynthSample> {
        (0..count).map(|i| self.sample(start + i as u64)).collect()
    }

    /// Exact posterior over the clean token at every position of `grid`,
    /// given the unmasked tokens in the same frame column and the provided
    /// conditions. Masked positions get the Bayesian posterior; unmasked
    /// positions get a point mass on their observed value.
    pub fn oracle_posterior(
        &self,
        grid: &TokenGrid,
        bundle: &ConditionBundle,
    ) -> Result<Array3<f64>> {
        let (r_levels, l, v) = (self.space.levels, self.space.frames, self.space.vocab as usize);
        if grid.levels() != r_levels || grid.frames() != l || grid.vocab() != self.space.vocab {
            return Err(Error::ShapeMismatch {
                expected: format!("grid ({r_levels}, {l}) vocab {v}"),
                got: format!("grid ({}, {}) vocab {}", grid.levels(), grid.frames(), grid.vocab()),
            });
        }
        let eps = self.spec.noise_eps;
        let n_s = self.spec.speakers;
        let n_p = self.spec.phonemes;
        let n_e = self.spec.emotions;

        // Decode the conditions into latent constraints.
        let speaker: Option<usize> = bundle.id.as_ref().map(|id| {
            if id.len() != self.spec.id_dim {
                // Mismatched identity vectors cannot name a speaker.
                usize::MAX
            } else {
                self.speaker_of_identity(id) as usize
            }
        });
        if speaker == Some(usize::MAX) {
            return Err(Error::ShapeMismatch {
                expected: format!("identity of length {}", self.spec.id_dim),
                got: format!("{}", bundle.id.as_ref().unwrap().len()),
            });
        }
        let phonemes: Option<Vec<usize>> = match &bundle.lip {
            Some(lip) => {
                if lip.nrows() != l || lip.ncols() != self.spec.phonemes {
                    return Err(Error::ShapeMismatch {
                        expected: format!("lip ({l}, {})", self.spec.phonemes),
                        got: format!("lip ({}, {})", lip.nrows(), lip.ncols()),
                    });
                }
                Some((0..l).map(|j| self.phoneme_of_lip(lip.row(j)) as usize).collect())
            }
            None => None,
        };
        let emotions: Option<&Vec<u16>> = bundle.emo.as_ref();
        if let Some(emo) = emotions {
            if emo.len() != self.space.emo_len() {
                return Err(Error::ShapeMismatch {
                    expected: format!("emo length {}", self.space.emo_len()),
                    got: format!("{}", emo.len()),
                });
            }
            if let Some(&bad) = emo.iter().find(|&&e| (e as usize) >= n_e) {
                return Err(Error::Config(format!(
                    "emotion label {bad} out of range (classes {n_e})"
                )));
            }
        }

        let states = (if speaker.is_some() { 1 } else { n_s } as u128)
            * (if phonemes.is_some() { 1 } else { n_p } as u128)
            * (if emotions.is_some() { 1 } else { n_e } as u128)
            * v as u128;
        if states > ORACLE_STATE_LIMIT {
            return Err(Error::Intractable { states, limit: ORACLE_STATE_LIMIT });
        }

        let s_set: Vec<usize> = match speaker {
            Some(s) => vec![s],
            None => (0..n_s).collect(),
        };
        let e_all: Vec<usize> = (0..n_e).collect();

        let mut post = Array3::zeros((r_levels, l, v));
        for j in 0..l {
            let block = j / self.space.emotion_downsample;
            let p_set: Vec<usize> = match &phonemes {
                Some(ph) => vec![ph[j]],
                None => (0..n_p).collect(),
            };
            let e_set: Vec<usize> = match emotions {
                Some(emo) => vec![emo[block] as usize],
                None => e_all.clone(),
            };
            let low_obs: Option<usize> = if grid.is_masked(0, j) {
                None
            } else {
                Some(grid.get(0, j) as usize)
            };

            // Joint weight over (speaker, phoneme, emotion, level-0 value),
            // carrying the likelihood of every observed token in the column.
            // Uniform latent priors drop out under normalization.
            let a_set: Vec<usize> = match low_obs {
                Some(a) => vec![a],
                None => (0..v).collect(),
            };
            let mut weights: Vec<((usize, usize), f64)> = Vec::new();
            // weights keyed by (e, a0): the speaker/phoneme sums can be folded
            // early because only the level-0 factor depends on them.
            for &e in &e_set {
                for &a0 in &a_set {
                    // Likelihood of observed high tokens given (a0, e).
                    let mut hi_lik = 1.0;
                    for r in 1..r_levels {
                        if !grid.is_masked(r, j) {
                            let obs = grid.get(r, j);
                            let det = self.high_rule(r, a0 as u16, e as u16);
                            hi_lik *= mixture_pmf(eps, det, obs, v);
                        }
                    }
                    // Sum of level-0 likelihood over (s, p).
                    let mut low_sum = 0.0;
                    for &s in &s_set {
                        for &p in &p_set {
                            let det0 = self.f[(p, s)];
                            low_sum += mixture_pmf(eps, det0, a0 as u16, v);
                        }
                    }
                    weights.push(((e, a0), low_sum * hi_lik));
                }
            }

            // Level 0.
            if let Some(a) = low_obs {
                post[(0, j, a)] = 1.0;
            } else {
                let mut dist = vec![0.0; v];
                for &((_, a0), w) in &weights {
                    dist[a0] += w;
                }
                normalize_into(&mut dist);
                for (val, &d) in dist.iter().enumerate() {
                    post[(0, j, val)] = d;
                }
            }

            // Higher levels.
            for r in 1..r_levels {
                if !grid.is_masked(r, j) {
                    post[(r, j, grid.get(r, j) as usize)] = 1.0;
                    continue;
                }
                let mut dist = vec![0.0; v];
                for &((e, a0), w) in &weights {
                    let det = self.high_rule(r, a0 as u16, e as u16);
                    for (val, d) in dist.iter_mut().enumerate() {
                        *d += w * mixture_pmf(eps, det, val as u16, v);
                    }
                }
                normalize_into(&mut dist);
                for (val, &d) in dist.iter().enumerate() {
                    post[(r, j, val)] = d;
                }
            }
        }
        Ok(post)
    }

    /// Marginalized score at time `t`: the score prefactor times the
    /// posterior at masked positions, zero at unmasked positions.
    pub fn oracle_score(
        &self,
        grid: &TokenGrid,
        t: f64,
        bundle: &ConditionBundle,
        sched: &NoiseSchedule,
    ) -> Result<ScoreField> {
        let sbar = sched.sigma_bar(t)?;
        let pref = score_prefactor(sbar);
        let post = self.oracle_posterior(grid, bundle)?;
        let mut field = ScoreField::zeros(grid.levels(), grid.frames(), grid.vocab() as usize);
        for r in 0..grid.levels() {
            for j in 0..grid.frames() {
                if !grid.is_masked(r, j) {
                    continue;
                }
                for v in 0..grid.vocab() as usize {
                    field.scores[(r, j, v)] = pref * post[(r, j, v)];
                }
            }
        }
        Ok(field)
    }
}

fn pick(u: f64, n: usize) -> u16 {
    ((u * n as f64) as usize).min(n - 1) as u16
}

/// Single-uniform draw from the ε-mixture: probability 1 − ε on `det`,
/// otherwise uniform over the vocabulary (collision mass included).
fn mixture_draw(u: f64, eps: f64, det: u16, vocab: usize) -> u16 {
    if u < 1.0 - eps {
        det
    } else {
        let rescaled = (u - (1.0 - eps)) / eps.max(1e-300);
        pick(rescaled, vocab)
    }
}

/// Probability the ε-mixture centered at `det` emits `value`.
fn mixture_pmf(eps: f64, det: u16, value: u16, vocab: usize) -> f64 {
    let base = eps / vocab as f64;
    if value == det {
        (1.0 - eps) + base
    } else {
        base
    }
}

fn normalize_into(dist: &mut [f64]) {
    let total: f64 = dist.iter().sum();
    if total > 0.0 {
        for d in dist.iter_mut() {
            *d /= total;
        }
    }
}

// ---------------------------------------------------------------------------
// Corpus + sidecar IO
// ---------------------------------------------------------------------------

/// Writes grids to the binary corpus file and conditions to the JSONL
/// sidecar file.
pub fn write_samples<P: AsRef<Path>, Q: AsRef<Path>>(
    corpus_path: P,
    sidecar_path: Q,
    space: &StateSpaceConfig,
    samples: &[SynthSample],
) -> Result<()> {
    let header = CorpusHeader {
        levels: space.levels as u32,
        frames: space.frames as u32,
        vocab: space.vocab,
        split: space.split as u32,
    };
    let grids: Vec<TokenGrid> = samples.iter().map(|s| s.grid.clone()).collect();
    crate::token_space::write_corpus(&corpus_path, header, &grids)?;
    let mut sidecar = BufWriter::new(std::fs::File::create(sidecar_path)?);
    for s in samples {
        let rec = SidecarRecord {
            speaker: s.speaker,
            emotions: s.emotions.clone(),
            phonemes: s.phonemes.clone(),
            lip: s.lip.rows().into_iter().map(|r| r.to_vec()).collect(),
            identity: s.identity.to_vec(),
        };
        let line = serde_json::to_string(&rec)
            .map_err(|e| Error::Format(format!("sidecar encode: {e}")))?;
        sidecar.write_all(line.as_bytes())?;
        sidecar.write_all(b"\n")?;
    }
    sidecar.flush()?;
    Ok(())
}

/// Reads a corpus plus sidecar back into samples. Counts must agree.
pub fn read_samples<P: AsRef<Path>, Q: AsRef<Path>>(
    corpus_path: P,
    sidecar_path: Q,
) -> Result<(CorpusHeader, Vec<SynthSample>)> {
    let (header, grids) = crate::token_space::read_corpus(corpus_path)?;
    let sidecar = BufReader::new(std::fs::File::open(sidecar_path)?);
    let mut out = Vec::with_capacity(grids.len());
    let mut lines = sidecar.lines();
    for (i, grid) in grids.into_iter().enumerate() {
        let line = lines
            .next()
            .ok_or_else(|| Error::Format(format!("sidecar ends before record {i}")))?
            .map_err(Error::Io)?;
        let rec: SidecarRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("sidecar record {i}: {e}")))?;
        let frames = grid.frames();
        if rec.lip.len() != frames || rec.phonemes.len() != frames {
            return Err(Error::Format(format!(
                "sidecar record {i}: {} lip rows / {} phonemes for {frames} frames",
                rec.lip.len(),
                rec.phonemes.len()
            )));
        }
        let lip_dim = rec.lip.first().map(|r| r.len()).unwrap_or(0);
        if rec.lip.iter().any(|r| r.len() != lip_dim) {
            return Err(Error::Format(format!("sidecar record {i}: ragged lip rows")));
        }
        let mut lip = Array2::zeros((frames, lip_dim));
        for (j, row) in rec.lip.iter().enumerate() {
            for (d, &x) in row.iter().enumerate() {
                lip[(j, d)] = x;
            }
        }
        out.push(SynthSample {
            grid,
            speaker: rec.speaker,
            emotions: rec.emotions,
            phonemes: rec.phonemes,
            lip,
            identity: Array1::from_vec(rec.identity),
        });
    }
    if lines.next().is_some() {
        return Err(Error::Format("sidecar has more records than the corpus".into()));
    }
    Ok((header, out))
}
