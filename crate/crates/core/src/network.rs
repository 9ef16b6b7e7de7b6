//! Two-tier conditioned score network over multi-level token grids.
//!
//! The hierarchical model runs two transformer stacks. The low tier sees the
//! levels below the split index: their token embeddings (summed per frame,
//! plus a sinusoidal feature of the accumulated noise) are concatenated with
//! per-frame lip features and projected to the model width; its blocks are
//! modulated by single-scale adaptive layer norm driven by the identity
//! vector and a time feature. The high tier sees the remaining levels plus a
//! linear projection of the low-tier output; its blocks use dual-scale
//! modulation — channel-wise vectors from the pooled emotion embedding, and
//! per-sublayer temporal scalars from each coarse emotion position, expanded
//! to frames by block-constant upsampling. Per-level linear heads read the
//! tier their level belongs to and produce log-scores; scores are their
//! elementwise exponential, so zero-initialized heads start at score 1
//! everywhere.
//!
//! Two ablation variants share the code paths: `Flat` collapses everything to
//! one stack (all level embeddings summed at the input, pooled emotion joins
//! identity in a single-scale modulation), and `SingleScaleAdaln` keeps the
//! two tiers but drops the temporal scalars from the high tier.
//!
//! Absent conditions are represented by learned null vectors / embedding
//! rows, which is what makes condition dropout and guidance well-defined.

use crate::diffusion::ScoreField;
use crate::nn::{
    attention_bwd, attention_fwd, linear_bwd, linear_fwd, ln_bwd, ln_fwd, sinusoidal,
    xavier_mat, AttnCache, AttnProj, LnCache, MlpCache, ParamId, Params,
};
use crate::schedule::NoiseSchedule;
use crate::token_space::{LevelPartition, StateSpaceConfig, TokenGrid};
use crate::{Error, Result};
use ndarray::{Array1, Array2, Array3, ArrayD, Axis, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};

/// Magic bytes of the binary checkpoint format.
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"HCKP";
/// Version of the binary checkpoint format.
pub const CHECKPOINT_VERSION: u16 = 1;

/// Architecture hyperparameters. Defaults are the desk-scale configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    /// Model width (channels per frame position).
    pub channels: usize,
    /// Attention heads; must divide `channels`.
    pub heads: usize,
    /// Transformer blocks in the low tier.
    pub low_blocks: usize,
    /// Transformer blocks in the high tier.
    pub high_blocks: usize,
    /// Dimension of the per-frame lip feature vectors.
    pub lip_dim: usize,
    /// Dimension of the identity embedding vectors.
    pub id_dim: usize,
    /// Number of emotion classes (the embedding table has one extra null row).
    pub emo_classes: usize,
    /// Input dimension of the identity adapter (speaker one-hot width).
    pub adapter_in: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            channels: 64,
            heads: 4,
            low_blocks: 2,
            high_blocks: 2,
            lip_dim: 8,
            id_dim: 8,
            emo_classes: 7,
            adapter_in: 8,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.channels % 2 != 0 {
            return Err(Error::Config(format!(
                "channels must be a positive even number, got {}",
                self.channels
            )));
        }
        if self.heads == 0 || self.channels % self.heads != 0 {
            return Err(Error::Config(format!(
                "heads ({}) must divide channels ({})",
                self.heads, self.channels
            )));
        }
        if self.low_blocks == 0 || self.high_blocks == 0 {
            return Err(Error::Config("block counts must be positive".into()));
        }
        if self.lip_dim == 0 || self.id_dim == 0 || self.emo_classes == 0 || self.adapter_in == 0 {
            return Err(Error::Config("feature dimensions must be positive".into()));
        }
        Ok(())
    }
}

/// Which architecture the parameter set belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Two tiers, dual-scale modulation in the high tier.
    Hierarchical,
    /// One stack; all levels and conditions enter at the bottom.
    Flat,
    /// Two tiers, but the high tier drops the temporal scalars.
    SingleScaleAdaln,
}

impl Variant {
    fn code(self) -> u8 {
        match self {
            Variant::Hierarchical => 0,
            Variant::Flat => 1,
            Variant::SingleScaleAdaln => 2,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(Variant::Hierarchical),
            1 => Ok(Variant::Flat),
            2 => Ok(Variant::SingleScaleAdaln),
            other => Err(Error::Format(format!("unknown network variant code {other}"))),
        }
    }
}

/// Optional per-sample conditioning signals. `None` means the condition is
/// absent and the network substitutes its learned null vector / null row.
#[derive(Debug, Clone, Default)]
pub struct ConditionBundle {
    /// Per-frame lip features, shape (frames, lip_dim).
    pub lip: Option<Array2<f64>>,
    /// Identity embedding, shape (id_dim,).
    pub id: Option<Array1<f64>>,
    /// Coarse emotion labels, length frames / emotion_downsample.
    pub emo: Option<Vec<u16>>,
}

impl ConditionBundle {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.lip.is_none() && self.id.is_none() && self.emo.is_none()
    }
}

// ---------------------------------------------------------------------------
// Modulation helpers
// ---------------------------------------------------------------------------

/// Applies `(1 + g) ⊙ x + b` where `g`, `b` are per-sample (B, C) and `x` is
/// (B·L, C); row i belongs to sample i / frames.
fn modulate(x: &Array2<f64>, g: &Array2<f64>, b: &Array2<f64>, frames: usize) -> Array2<f64> {
    let mut out = x.clone();
    for i in 0..out.nrows() {
        let s = i / frames;
        for c in 0..out.ncols() {
            out[(i, c)] = (1.0 + g[(s, c)]) * x[(i, c)] + b[(s, c)];
        }
    }
    out
}

/// Backward of [`modulate`]: returns (dx, dg, db).
fn modulate_bwd(
    x: &Array2<f64>,
    g: &Array2<f64>,
    dmod: &Array2<f64>,
    frames: usize,
) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let mut dx = dmod.clone();
    let mut dg = Array2::zeros(g.raw_dim());
    let mut db = Array2::zeros(g.raw_dim());
    for i in 0..dmod.nrows() {
        let s = i / frames;
        for c in 0..dmod.ncols() {
            dx[(i, c)] = dmod[(i, c)] * (1.0 + g[(s, c)]);
            dg[(s, c)] += dmod[(i, c)] * x[(i, c)];
            db[(s, c)] += dmod[(i, c)];
        }
    }
    (dx, dg, db)
}

/// Residual gate: `x + a ⊙ y` with per-sample gate rows.
fn gate_add(x: &Array2<f64>, a: &Array2<f64>, y: &Array2<f64>, frames: usize) -> Array2<f64> {
    let mut out = x.clone();
    for i in 0..out.nrows() {
        let s = i / frames;
        for c in 0..out.ncols() {
            out[(i, c)] += a[(s, c)] * y[(i, c)];
        }
    }
    out
}

/// Backward of the gate: returns (dy, da); the incoming gradient also passes
/// through the residual unchanged (the caller keeps using it).
fn gate_bwd(
    dx_out: &Array2<f64>,
    a: &Array2<f64>,
    y: &Array2<f64>,
    frames: usize,
) -> (Array2<f64>, Array2<f64>) {
    let mut dy = dx_out.clone();
    let mut da = Array2::zeros(a.raw_dim());
    for i in 0..dx_out.nrows() {
        let s = i / frames;
        for c in 0..dx_out.ncols() {
            dy[(i, c)] = dx_out[(i, c)] * a[(s, c)];
            da[(s, c)] += dx_out[(i, c)] * y[(i, c)];
        }
    }
    (dy, da)
}

/// Multiplies each frame row by its block-constant temporal scalar:
/// row (b, j) is scaled by t[(b, j / down)].
fn tscale(x: &Array2<f64>, t: &Array2<f64>, frames: usize, down: usize) -> Array2<f64> {
    let mut out = x.clone();
    for i in 0..out.nrows() {
        let (b, j) = (i / frames, i % frames);
        let s = t[(b, j / down)];
        for c in 0..out.ncols() {
            out[(i, c)] *= s;
        }
    }
    out
}

/// Backward of [`tscale`]: returns (dx, dt).
fn tscale_bwd(
    x: &Array2<f64>,
    t: &Array2<f64>,
    dout: &Array2<f64>,
    frames: usize,
    down: usize,
) -> (Array2<f64>, Array2<f64>) {
    let mut dx = dout.clone();
    let mut dt = Array2::zeros(t.raw_dim());
    for i in 0..dout.nrows() {
        let (b, j) = (i / frames, i % frames);
        let p = j / down;
        let s = t[(b, p)];
        for c in 0..dout.ncols() {
            dx[(i, c)] = dout[(i, c)] * s;
            dt[(b, p)] += dout[(i, c)] * x[(i, c)];
        }
    }
    (dx, dt)
}

/// Two-layer MLP with SiLU hidden activation.
fn mlp2_fwd(
    params: &Params,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    input: Array2<f64>,
) -> (Array2<f64>, MlpCache) {
    let h_pre = linear_fwd(&input, params.mat(w1), params.vec1(b1));
    let h = crate::nn::silu_fwd(&h_pre);
    let out = linear_fwd(&h, params.mat(w2), params.vec1(b2));
    (out, MlpCache { input, h_pre, h })
}

fn mlp2_bwd(
    params: &mut Params,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    cache: &MlpCache,
    dout: &Array2<f64>,
) -> Array2<f64> {
    let (dh, dw2, db2) = linear_bwd(&cache.h, params.mat(w2), dout);
    params.accumulate_grad2(w2, &dw2);
    params.accumulate_grad1(b2, &db2);
    let dh_pre = crate::nn::silu_bwd(&cache.h_pre, &dh);
    let (dinput, dw1, db1) = linear_bwd(&cache.input, params.mat(w1), &dh_pre);
    params.accumulate_grad2(w1, &dw1);
    params.accumulate_grad1(b1, &db1);
    dinput
}

// ---------------------------------------------------------------------------
// Block caches
// ---------------------------------------------------------------------------

/// Six per-sample modulation matrices: γ1, β1, α1, γ2, β2, α2, each (B, C).
type ModSet = [Array2<f64>; 6];

fn split_mods(out: &Array2<f64>, channels: usize) -> ModSet {
    let part = |k: usize| {
        out.slice(ndarray::s![.., k * channels..(k + 1) * channels])
            .to_owned()
    };
    [part(0), part(1), part(2), part(3), part(4), part(5)]
}

fn join_mod_grads(parts: &ModSet, channels: usize) -> Array2<f64> {
    let b = parts[0].nrows();
    let mut out = Array2::zeros((b, 6 * channels));
    for (k, p) in parts.iter().enumerate() {
        out.slice_mut(ndarray::s![.., k * channels..(k + 1) * channels])
            .assign(p);
    }
    out
}

struct SsBlockCache {
    ln1: LnCache,
    attn: AttnCache,
    attn_y: Array2<f64>,
    ln2: LnCache,
    ffn: MlpCache,
    ffn_y: Array2<f64>,
}

struct DsBlockCache {
    ln1: LnCache,
    cmod1: Array2<f64>,
    attn: AttnCache,
    attn_y: Array2<f64>,
    ln2: LnCache,
    cmod2: Array2<f64>,
    ffn: MlpCache,
    ffn_y: Array2<f64>,
}

struct BlockIds {
    attn: AttnProj,
    ffn_w1: ParamId,
    ffn_b1: ParamId,
    ffn_w2: ParamId,
    ffn_b2: ParamId,
}

/// Single-scale adaptive-norm transformer block.
fn ss_block_fwd(
    params: &Params,
    ids: &BlockIds,
    x: &Array2<f64>,
    mods: &ModSet,
    batch: usize,
    frames: usize,
    heads: usize,
) -> (Array2<f64>, SsBlockCache) {
    let (xhat1, ln1) = ln_fwd(x);
    let mod1 = modulate(&xhat1, &mods[0], &mods[1], frames);
    let (attn_y, attn) = attention_fwd(params, &ids.attn, &mod1, batch, frames, heads);
    let x_mid = gate_add(x, &mods[2], &attn_y, frames);
    let (xhat2, ln2) = ln_fwd(&x_mid);
    let mod2 = modulate(&xhat2, &mods[3], &mods[4], frames);
    let (ffn_y, ffn) = mlp2_fwd(params, ids.ffn_w1, ids.ffn_b1, ids.ffn_w2, ids.ffn_b2, mod2);
    let x_out = gate_add(&x_mid, &mods[5], &ffn_y, frames);
    (
        x_out,
        SsBlockCache { ln1, attn, attn_y, ln2, ffn, ffn_y },
    )
}

/// Backward of [`ss_block_fwd`]; returns (dx_in, dmods).
fn ss_block_bwd(
    params: &mut Params,
    ids: &BlockIds,
    cache: &SsBlockCache,
    dx_out: &Array2<f64>,
    mods: &ModSet,
    batch: usize,
    frames: usize,
    heads: usize,
) -> (Array2<f64>, ModSet) {
    // FFN sublayer.
    let (dffn_y, da2) = gate_bwd(dx_out, &mods[5], &cache.ffn_y, frames);
    let dmod2 = mlp2_bwd(params, ids.ffn_w1, ids.ffn_b1, ids.ffn_w2, ids.ffn_b2, &cache.ffn, &dffn_y);
    let (dxhat2, dg2, db2) = modulate_bwd(&cache.ln2.xhat, &mods[3], &dmod2, frames);
    let dx_mid = dx_out + &ln_bwd(&cache.ln2, &dxhat2);

    // Attention sublayer.
    let (dattn_y, da1) = gate_bwd(&dx_mid, &mods[2], &cache.attn_y, frames);
    let dmod1 = attention_bwd(params, &ids.attn, &cache.attn, &dattn_y, batch, frames, heads);
    let (dxhat1, dg1, db1) = modulate_bwd(&cache.ln1.xhat, &mods[0], &dmod1, frames);
    let dx_in = &dx_mid + &ln_bwd(&cache.ln1, &dxhat1);
    (dx_in, [dg1, db1, da1, dg2, db2, da2])
}

/// Dual-scale block: channel modulation then block-constant temporal scaling.
/// `tmods` are the two (B, emo_len) scalar grids (attention, FFN); `None`
/// means identity (the single-scale tier variant).
#[allow(clippy::too_many_arguments)]
fn ds_block_fwd(
    params: &Params,
    ids: &BlockIds,
    x: &Array2<f64>,
    mods: &ModSet,
    tmods: Option<(&Array2<f64>, &Array2<f64>)>,
    batch: usize,
    frames: usize,
    heads: usize,
    down: usize,
) -> (Array2<f64>, DsBlockCache) {
    let (xhat1, ln1) = ln_fwd(x);
    let cmod1 = modulate(&xhat1, &mods[0], &mods[1], frames);
    let tmod1 = match tmods {
        Some((t1, _)) => tscale(&cmod1, t1, frames, down),
        None => cmod1.clone(),
    };
    let (attn_y, attn) = attention_fwd(params, &ids.attn, &tmod1, batch, frames, heads);
    let x_mid = gate_add(x, &mods[2], &attn_y, frames);
    let (xhat2, ln2) = ln_fwd(&x_mid);
    let cmod2 = modulate(&xhat2, &mods[3], &mods[4], frames);
    let tmod2 = match tmods {
        Some((_, t2)) => tscale(&cmod2, t2, frames, down),
        None => cmod2.clone(),
    };
    let (ffn_y, ffn) = mlp2_fwd(params, ids.ffn_w1, ids.ffn_b1, ids.ffn_w2, ids.ffn_b2, tmod2);
    let x_out = gate_add(&x_mid, &mods[5], &ffn_y, frames);
    (
        x_out,
        DsBlockCache { ln1, cmod1, attn, attn_y, ln2, cmod2, ffn, ffn_y },
    )
}

/// Backward of [`ds_block_fwd`]; returns (dx_in, dmods, d_tmods).
#[allow(clippy::too_many_arguments)]
fn ds_block_bwd(
    params: &mut Params,
    ids: &BlockIds,
    cache: &DsBlockCache,
    dx_out: &Array2<f64>,
    mods: &ModSet,
    tmods: Option<(&Array2<f64>, &Array2<f64>)>,
    batch: usize,
    frames: usize,
    heads: usize,
    down: usize,
) -> (Array2<f64>, ModSet, Option<(Array2<f64>, Array2<f64>)>) {
    // FFN sublayer.
    let (dffn_y, da2) = gate_bwd(dx_out, &mods[5], &cache.ffn_y, frames);
    let dtmod2 = mlp2_bwd(params, ids.ffn_w1, ids.ffn_b1, ids.ffn_w2, ids.ffn_b2, &cache.ffn, &dffn_y);
    let (dcmod2, dt2) = match tmods {
        Some((_, t2)) => {
            let (dc, dt) = tscale_bwd(&cache.cmod2, t2, &dtmod2, frames, down);
            (dc, Some(dt))
        }
        None => (dtmod2, None),
    };
    let (dxhat2, dg2, db2) = modulate_bwd(&cache.ln2.xhat, &mods[3], &dcmod2, frames);
    let dx_mid = dx_out + &ln_bwd(&cache.ln2, &dxhat2);

    // Attention sublayer.
    let (dattn_y, da1) = gate_bwd(&dx_mid, &mods[2], &cache.attn_y, frames);
    let dtmod1 = attention_bwd(params, &ids.attn, &cache.attn, &dattn_y, batch, frames, heads);
    let (dcmod1, dt1) = match tmods {
        Some((t1, _)) => {
            let (dc, dt) = tscale_bwd(&cache.cmod1, t1, &dtmod1, frames, down);
            (dc, Some(dt))
        }
        None => (dtmod1, None),
    };
    let (dxhat1, dg1, db1) = modulate_bwd(&cache.ln1.xhat, &mods[0], &dcmod1, frames);
    let dx_in = &dx_mid + &ln_bwd(&cache.ln1, &dxhat1);
    let dt = dt1.zip(dt2);
    (dx_in, [dg1, db1, da1, dg2, db2, da2], dt)
}

// ---------------------------------------------------------------------------
// Forward-pass cache
// ---------------------------------------------------------------------------

struct AdaCache {
    mlp: MlpCache,
    mods: ModSet,
}

struct TieredCache {
    batch: usize,
    low_ids: Vec<Array2<usize>>,
    high_ids: Vec<Array2<usize>>,
    lipcat: Array2<f64>,
    lip_null: Vec<bool>,
    id_null: Vec<bool>,
    low_ada: Vec<AdaCache>,
    low_blocks: Vec<SsBlockCache>,
    h_low: Array2<f64>,
    emo_ids: Array2<usize>,
    emo_emb: Array2<f64>,
    adac: Vec<AdaCache>,
    adat: Vec<Option<(MlpCache, Array2<f64>)>>,
    high_blocks: Vec<DsBlockCache>,
    h_high: Array2<f64>,
}

struct FlatCache {
    batch: usize,
    ids: Vec<Array2<usize>>,
    lipcat: Array2<f64>,
    lip_null: Vec<bool>,
    id_null: Vec<bool>,
    emo_ids: Array2<usize>,
    emo_emb: Array2<f64>,
    ada: Vec<AdaCache>,
    blocks: Vec<SsBlockCache>,
    h: Array2<f64>,
}

enum PassCache {
    Tiered(TieredCache),
    Flat(FlatCache),
}

/// Result of a batched forward pass: per-sample log-score grids plus the
/// activation cache consumed by [`Network::backward`].
pub struct ForwardPass {
    /// Per sample: (levels, frames, vocab) log-scores.
    pub log_scores: Vec<Array3<f64>>,
    cache: PassCache,
}

// ---------------------------------------------------------------------------
// Network
// ---------------------------------------------------------------------------

/// The score network: parameter arena plus the configuration needed to
/// interpret it.
#[derive(Debug, Clone)]
pub struct Network {
    config: NetworkConfig,
    space: StateSpaceConfig,
    variant: Variant,
    pub params: Params,
}

impl Network {
    /// Builds a freshly initialized network. Initialization is seeded and
    /// deterministic: embeddings N(0, 0.02²), projections Xavier-uniform,
    /// modulation output layers and score heads zero (so all residual
    /// branches are inert and every score is exactly 1 at initialization),
    /// temporal-scalar output biases 1.
    pub fn new(
        config: NetworkConfig,
        space: StateSpaceConfig,
        variant: Variant,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        space.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Params::default();
        let c = config.channels;
        let v = space.vocab as usize;
        let r_levels = space.levels;
        let k = space.split;

        let zeros1 = |n: usize| ArrayD::zeros(IxDyn(&[n]));
        let zeros2 = |a: usize, b: usize| ArrayD::zeros(IxDyn(&[a, b]));

        for r in 0..r_levels {
            p.add(
                &format!("embed.level{r}"),
                crate::nn::randn_mat(&mut rng, v + 1, c, 0.02),
            );
        }
        p.add("embed.emo", crate::nn::randn_mat(&mut rng, config.emo_classes + 1, c, 0.02));
        p.add("null.lip", crate::nn::randn_mat(&mut rng, 1, config.lip_dim, 0.02).index_axis(Axis(0), 0).to_owned().into_dyn());
        p.add("null.id", crate::nn::randn_mat(&mut rng, 1, config.id_dim, 0.02).index_axis(Axis(0), 0).to_owned().into_dyn());

        let add_block = |p: &mut Params, rng: &mut ChaCha8Rng, prefix: &str| {
            for w in ["wq", "wk", "wv", "wo"] {
                p.add(&format!("{prefix}.attn.{w}"), xavier_mat(rng, c, c));
            }
            for b in ["bq", "bk", "bv", "bo"] {
                p.add(&format!("{prefix}.attn.{b}"), zeros1(c));
            }
            p.add(&format!("{prefix}.ffn.w1"), xavier_mat(rng, c, 4 * c));
            p.add(&format!("{prefix}.ffn.b1"), zeros1(4 * c));
            p.add(&format!("{prefix}.ffn.w2"), xavier_mat(rng, 4 * c, c));
            p.add(&format!("{prefix}.ffn.b2"), zeros1(c));
        };
        let add_ada = |p: &mut Params, rng: &mut ChaCha8Rng, prefix: &str, in_dim: usize| {
            p.add(&format!("{prefix}.w1"), xavier_mat(rng, in_dim, c));
            p.add(&format!("{prefix}.b1"), zeros1(c));
            p.add(&format!("{prefix}.w2"), zeros2(c, 6 * c));
            p.add(&format!("{prefix}.b2"), zeros1(6 * c));
        };

        match variant {
            Variant::Hierarchical | Variant::SingleScaleAdaln => {
                p.add("low.in_proj.w", xavier_mat(&mut rng, c + config.lip_dim, c));
                p.add("low.in_proj.b", zeros1(c));
                for i in 0..config.low_blocks {
                    let prefix = format!("low{i}");
                    add_block(&mut p, &mut rng, &prefix);
                    add_ada(&mut p, &mut rng, &format!("{prefix}.ada"), config.id_dim + c);
                }
                p.add("hl_proj.w", xavier_mat(&mut rng, c, c));
                p.add("hl_proj.b", zeros1(c));
                for i in 0..config.high_blocks {
                    let prefix = format!("high{i}");
                    add_block(&mut p, &mut rng, &prefix);
                    add_ada(&mut p, &mut rng, &format!("{prefix}.adac"), c + c);
                    if variant == Variant::Hierarchical {
                        p.add(&format!("{prefix}.adat.w1"), xavier_mat(&mut rng, c + c, c));
                        p.add(&format!("{prefix}.adat.b1"), zeros1(c));
                        p.add(&format!("{prefix}.adat.w2"), zeros2(c, 2));
                        p.add(
                            &format!("{prefix}.adat.b2"),
                            ArrayD::from_elem(IxDyn(&[2]), 1.0),
                        );
                    }
                }
            }
            Variant::Flat => {
                p.add("flat.in_proj.w", xavier_mat(&mut rng, c + config.lip_dim, c));
                p.add("flat.in_proj.b", zeros1(c));
                for i in 0..config.low_blocks + config.high_blocks {
                    let prefix = format!("flat{i}");
                    add_block(&mut p, &mut rng, &prefix);
                    add_ada(&mut p, &mut rng, &format!("{prefix}.ada"), config.id_dim + c + c);
                }
            }
        }

        for r in 0..r_levels {
            p.add(&format!("head{r}.w"), zeros2(c, v));
            p.add(&format!("head{r}.b"), zeros1(v));
        }
        p.add("adapter.w1", xavier_mat(&mut rng, config.adapter_in, c));
        p.add("adapter.b1", zeros1(c));
        p.add("adapter.w2", xavier_mat(&mut rng, c, config.id_dim));
        p.add("adapter.b2", zeros1(config.id_dim));

        let _ = k; // split is consumed by forward routing
        Ok(Self { config, space, variant, params: p })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn space(&self) -> &StateSpaceConfig {
        &self.space
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    fn pid(&self, name: &str) -> ParamId {
        self.params
            .id(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    fn block_ids(&self, prefix: &str) -> BlockIds {
        BlockIds {
            attn: AttnProj {
                wq: self.pid(&format!("{prefix}.attn.wq")),
                bq: self.pid(&format!("{prefix}.attn.bq")),
                wk: self.pid(&format!("{prefix}.attn.wk")),
                bk: self.pid(&format!("{prefix}.attn.bk")),
                wv: self.pid(&format!("{prefix}.attn.wv")),
                bv: self.pid(&format!("{prefix}.attn.bv")),
                wo: self.pid(&format!("{prefix}.attn.wo")),
                bo: self.pid(&format!("{prefix}.attn.bo")),
            },
            ffn_w1: self.pid(&format!("{prefix}.ffn.w1")),
            ffn_b1: self.pid(&format!("{prefix}.ffn.b1")),
            ffn_w2: self.pid(&format!("{prefix}.ffn.w2")),
            ffn_b2: self.pid(&format!("{prefix}.ffn.b2")),
        }
    }

    fn ada_ids(&self, prefix: &str) -> (ParamId, ParamId, ParamId, ParamId) {
        (
            self.pid(&format!("{prefix}.w1")),
            self.pid(&format!("{prefix}.b1")),
            self.pid(&format!("{prefix}.w2")),
            self.pid(&format!("{prefix}.b2")),
        )
    }

    fn validate_inputs(
        &self,
        grids: &[TokenGrid],
        times: &[f64],
        bundles: &[ConditionBundle],
        sched: &NoiseSchedule,
    ) -> Result<()> {
        if grids.len() != times.len() || grids.len() != bundles.len() || grids.is_empty() {
            return Err(Error::Config(format!(
                "batch arity mismatch: {} grids, {} times, {} bundles",
                grids.len(),
                times.len(),
                bundles.len()
            )));
        }
        let (r, l, v) = (self.space.levels, self.space.frames, self.space.vocab);
        let emo_len = self.space.emo_len();
        for (i, g) in grids.iter().enumerate() {
            if g.levels() != r || g.frames() != l || g.vocab() != v {
                return Err(Error::ShapeMismatch {
                    expected: format!("grid ({r}, {l}) vocab {v}"),
                    got: format!(
                        "sample {i}: grid ({}, {}) vocab {}",
                        g.levels(),
                        g.frames(),
                        g.vocab()
                    ),
                });
            }
        }
        for &t in times {
            if !t.is_finite() || t < 0.0 || t > sched.horizon {
                return Err(Error::TimeOutOfRange { t, horizon: sched.horizon });
            }
        }
        for (i, b) in bundles.iter().enumerate() {
            if let Some(lip) = &b.lip {
                if lip.nrows() != l || lip.ncols() != self.config.lip_dim {
                    return Err(Error::ShapeMismatch {
                        expected: format!("lip ({l}, {})", self.config.lip_dim),
                        got: format!("sample {i}: lip ({}, {})", lip.nrows(), lip.ncols()),
                    });
                }
            }
            if let Some(id) = &b.id {
                if id.len() != self.config.id_dim {
                    return Err(Error::ShapeMismatch {
                        expected: format!("id ({},)", self.config.id_dim),
                        got: format!("sample {i}: id ({},)", id.len()),
                    });
                }
            }
            if let Some(emo) = &b.emo {
                if emo.len() != emo_len {
                    return Err(Error::ShapeMismatch {
                        expected: format!("emo length {emo_len}"),
                        got: format!("sample {i}: emo length {}", emo.len()),
                    });
                }
                if let Some(&bad) = emo.iter().find(|&&e| e as usize >= self.config.emo_classes) {
                    return Err(Error::Config(format!(
                        "emotion label {bad} out of range (classes {})",
                        self.config.emo_classes
                    )));
                }
            }
        }
        Ok(())
    }

    /// Sums the embedding rows of the grid levels in `levels` and adds the
    /// per-sample time feature; returns the (B·L, C) matrix and the token-id
    /// index grids used (for the backward scatter).
    fn embed_tier(
        &self,
        grids: &[TokenGrid],
        levels: std::ops::Range<usize>,
        temb: &Array2<f64>,
    ) -> (Array2<f64>, Vec<Array2<usize>>) {
        let (bsz, l, c) = (grids.len(), self.space.frames, self.config.channels);
        let mut x = Array2::zeros((bsz * l, c));
        let mut ids = Vec::new();
        for r in levels {
            let table = self.params.mat(self.pid(&format!("embed.level{r}")));
            let mut id_grid = Array2::zeros((bsz, l));
            for (b, g) in grids.iter().enumerate() {
                for j in 0..l {
                    let tok = g.get(r, j) as usize;
                    id_grid[(b, j)] = tok;
                    let mut row = x.row_mut(b * l + j);
                    row += &table.row(tok);
                }
            }
            ids.push(id_grid);
        }
        for b in 0..bsz {
            for j in 0..l {
                let mut row = x.row_mut(b * l + j);
                row += &temb.row(b);
            }
        }
        (x, ids)
    }

    /// Scatters per-row gradients back into the level embedding tables.
    fn scatter_embed(&mut self, level: usize, ids: &Array2<usize>, d: &Array2<f64>) {
        let pid = self.pid(&format!("embed.level{level}"));
        let l = ids.ncols();
        let tensor = &mut self.params.tensors[pid];
        for b in 0..ids.nrows() {
            for j in 0..l {
                let tok = ids[(b, j)];
                let row = d.row(b * l + j);
                for c in 0..row.len() {
                    tensor.grad[[tok, c]] += row[c];
                }
            }
        }
    }

    /// (B, C) time features added to embeddings and (B, C) features fed to
    /// the modulation MLPs.
    fn time_features(&self, times: &[f64], sched: &NoiseSchedule) -> Result<(Array2<f64>, Array2<f64>)> {
        let c = self.config.channels;
        let mut temb = Array2::zeros((times.len(), c));
        let mut tmod = Array2::zeros((times.len(), c));
        for (b, &t) in times.iter().enumerate() {
            let sbar = sched.sigma_bar(t)?;
            temb.row_mut(b).assign(&sinusoidal(sbar, c));
            tmod.row_mut(b).assign(&sinusoidal(sbar.max(1e-12).ln(), c));
        }
        Ok((temb, tmod))
    }

    /// Builds the (B·L, C + lip_dim) input of the bottom projection and
    /// remembers which samples used the null lip vector.
    fn lip_concat(
        &self,
        emb: &Array2<f64>,
        bundles: &[ConditionBundle],
    ) -> (Array2<f64>, Vec<bool>) {
        let (c, lipd, l) = (self.config.channels, self.config.lip_dim, self.space.frames);
        let bsz = bundles.len();
        let null_lip = self.params.vec1(self.pid("null.lip"));
        let mut out = Array2::zeros((bsz * l, c + lipd));
        let mut lip_null = vec![false; bsz];
        out.slice_mut(ndarray::s![.., ..c]).assign(emb);
        for (b, bundle) in bundles.iter().enumerate() {
            for j in 0..l {
                let mut row = out.row_mut(b * l + j);
                match &bundle.lip {
                    Some(lip) => {
                        for d in 0..lipd {
                            row[c + d] = lip[(j, d)];
                        }
                    }
                    None => {
                        lip_null[b] = true;
                        for d in 0..lipd {
                            row[c + d] = null_lip[d];
                        }
                    }
                }
            }
        }
        (out, lip_null)
    }

    /// Per-sample identity rows, substituting the learned null vector.
    fn id_rows(&self, bundles: &[ConditionBundle]) -> (Array2<f64>, Vec<bool>) {
        let idd = self.config.id_dim;
        let null_id = self.params.vec1(self.pid("null.id"));
        let mut rows = Array2::zeros((bundles.len(), idd));
        let mut id_null = vec![false; bundles.len()];
        for (b, bundle) in bundles.iter().enumerate() {
            match &bundle.id {
                Some(id) => rows.row_mut(b).assign(id),
                None => {
                    id_null[b] = true;
                    rows.row_mut(b).assign(&null_id);
                }
            }
        }
        (rows, id_null)
    }

    /// Emotion embedding rows per coarse position, with the null row where
    /// the condition is absent. Returns (ids (B, emo_len), rows (B·emo_len, C)).
    fn emo_rows(&self, bundles: &[ConditionBundle]) -> (Array2<usize>, Array2<f64>) {
        let emo_len = self.space.emo_len();
        let c = self.config.channels;
        let table = self.params.mat(self.pid("embed.emo"));
        let null_row = self.config.emo_classes;
        let mut ids = Array2::zeros((bundles.len(), emo_len));
        let mut rows = Array2::zeros((bundles.len() * emo_len, c));
        for (b, bundle) in bundles.iter().enumerate() {
            for p in 0..emo_len {
                let e = match &bundle.emo {
                    Some(emo) => emo[p] as usize,
                    None => null_row,
                };
                ids[(b, p)] = e;
                rows.row_mut(b * emo_len + p).assign(&table.row(e));
            }
        }
        (ids, rows)
    }

    /// Mean over coarse positions of the emotion rows: (B, C).
    fn pool_emo(&self, emo_emb: &Array2<f64>, batch: usize) -> Array2<f64> {
        let emo_len = self.space.emo_len();
        let c = self.config.channels;
        let mut pooled = Array2::zeros((batch, c));
        for b in 0..batch {
            for p in 0..emo_len {
                let row = emo_emb.row(b * emo_len + p);
                let mut dst = pooled.row_mut(b);
                dst += &row;
            }
            let mut dst = pooled.row_mut(b);
            dst /= emo_len as f64;
        }
        pooled
    }

    /// Batched forward pass producing per-sample log-score grids.
    pub fn forward(
        &self,
        grids: &[TokenGrid],
        times: &[f64],
        bundles: &[ConditionBundle],
        sched: &NoiseSchedule,
    ) -> Result<ForwardPass> {
        self.validate_inputs(grids, times, bundles, sched)?;
        let (bsz, l) = (grids.len(), self.space.frames);
        let (temb, tmod) = self.time_features(times, sched)?;
        let (id_in, id_null) = self.id_rows(bundles);
        let (emo_ids, emo_emb) = self.emo_rows(bundles);
        let pooled = self.pool_emo(&emo_emb, bsz);
        let heads = self.config.heads;
        let c = self.config.channels;
        let k = self.space.split;
        let r_levels = self.space.levels;
        let emo_len = self.space.emo_len();
        let down = self.space.emotion_downsample;

        match self.variant {
            Variant::Hierarchical | Variant::SingleScaleAdaln => {
                // Low tier.
                let (emb_low, low_ids) = self.embed_tier(grids, 0..k, &temb);
                let (lipcat, lip_null) = self.lip_concat(&emb_low, bundles);
                let mut x = linear_fwd(
                    &lipcat,
                    self.params.mat(self.pid("low.in_proj.w")),
                    self.params.vec1(self.pid("low.in_proj.b")),
                );
                let ada_in_low = ndarray::concatenate(Axis(1), &[id_in.view(), tmod.view()])
                    .expect("concat id/time");
                let mut low_ada = Vec::new();
                let mut low_blocks = Vec::new();
                for i in 0..self.config.low_blocks {
                    let (w1, b1, w2, b2) = self.ada_ids(&format!("low{i}.ada"));
                    let (out, mlp) = mlp2_fwd(&self.params, w1, b1, w2, b2, ada_in_low.clone());
                    let mods = split_mods(&out, c);
                    let ids = self.block_ids(&format!("low{i}"));
                    let (x_out, cache) = ss_block_fwd(&self.params, &ids, &x, &mods, bsz, l, heads);
                    x = x_out;
                    low_ada.push(AdaCache { mlp, mods });
                    low_blocks.push(cache);
                }
                let h_low = x;

                // High tier.
                let (emb_high, high_ids) = self.embed_tier(grids, k..r_levels, &temb);
                let hl = linear_fwd(
                    &h_low,
                    self.params.mat(self.pid("hl_proj.w")),
                    self.params.vec1(self.pid("hl_proj.b")),
                );
                let mut xh = emb_high + hl;
                let ada_in_c = ndarray::concatenate(Axis(1), &[pooled.view(), tmod.view()])
                    .expect("concat emo/time");
                // Temporal-scalar inputs repeat each sample's time feature
                // over its coarse positions.
                let mut tmod_rep = Array2::zeros((bsz * emo_len, c));
                for b in 0..bsz {
                    for p in 0..emo_len {
                        tmod_rep.row_mut(b * emo_len + p).assign(&tmod.row(b));
                    }
                }
                let ada_in_t = ndarray::concatenate(Axis(1), &[emo_emb.view(), tmod_rep.view()])
                    .expect("concat emo rows/time");
                let mut adac = Vec::new();
                let mut adat = Vec::new();
                let mut high_blocks = Vec::new();
                for i in 0..self.config.high_blocks {
                    let (w1, b1, w2, b2) = self.ada_ids(&format!("high{i}.adac"));
                    let (out, mlp) = mlp2_fwd(&self.params, w1, b1, w2, b2, ada_in_c.clone());
                    let mods = split_mods(&out, c);
                    let tm = if self.variant == Variant::Hierarchical {
                        let (tw1, tb1, tw2, tb2) = self.ada_ids(&format!("high{i}.adat"));
                        let (tout, tmlp) =
                            mlp2_fwd(&self.params, tw1, tb1, tw2, tb2, ada_in_t.clone());
                        // (B·emo_len, 2) → two (B, emo_len) scalar grids.
                        let mut t1 = Array2::zeros((bsz, emo_len));
                        let mut t2 = Array2::zeros((bsz, emo_len));
                        for b in 0..bsz {
                            for p in 0..emo_len {
                                t1[(b, p)] = tout[(b * emo_len + p, 0)];
                                t2[(b, p)] = tout[(b * emo_len + p, 1)];
                            }
                        }
                        Some((tmlp, tout, t1, t2))
                    } else {
                        None
                    };
                    let ids = self.block_ids(&format!("high{i}"));
                    let tref = tm.as_ref().map(|(_, _, t1, t2)| (t1, t2));
                    let (x_out, cache) = ds_block_fwd(
                        &self.params,
                        &ids,
                        &xh,
                        &mods,
                        tref.map(|(a, b)| (a as &Array2<f64>, b as &Array2<f64>)),
                        bsz,
                        l,
                        heads,
                        down,
                    );
                    xh = x_out;
                    adac.push(AdaCache { mlp, mods });
                    adat.push(tm.map(|(mlp, tout, _, _)| (mlp, tout)));
                    high_blocks.push(cache);
                }
                let h_high = xh;

                let log_scores = self.run_heads(&h_low, &h_high, times, sched)?;
                Ok(ForwardPass {
                    log_scores,
                    cache: PassCache::Tiered(TieredCache {
                        batch: bsz,
                        low_ids,
                        high_ids,
                        lipcat,
                        lip_null,
                        id_null,
                        low_ada,
                        low_blocks,
                        h_low,
                        emo_ids,
                        emo_emb,
                        adac,
                        adat,
                        high_blocks,
                        h_high,
                    }),
                })
            }
            Variant::Flat => {
                let (emb, ids) = self.embed_tier(grids, 0..r_levels, &temb);
                let (lipcat, lip_null) = self.lip_concat(&emb, bundles);
                let mut x = linear_fwd(
                    &lipcat,
                    self.params.mat(self.pid("flat.in_proj.w")),
                    self.params.vec1(self.pid("flat.in_proj.b")),
                );
                let ada_in = ndarray::concatenate(
                    Axis(1),
                    &[id_in.view(), pooled.view(), tmod.view()],
                )
                .expect("concat id/emo/time");
                let mut ada = Vec::new();
                let mut blocks = Vec::new();
                for i in 0..self.config.low_blocks + self.config.high_blocks {
                    let (w1, b1, w2, b2) = self.ada_ids(&format!("flat{i}.ada"));
                    let (out, mlp) = mlp2_fwd(&self.params, w1, b1, w2, b2, ada_in.clone());
                    let mods = split_mods(&out, c);
                    let bids = self.block_ids(&format!("flat{i}"));
                    let (x_out, cache) = ss_block_fwd(&self.params, &bids, &x, &mods, bsz, l, heads);
                    x = x_out;
                    ada.push(AdaCache { mlp, mods });
                    blocks.push(cache);
                }
                let h = x;
                let log_scores = self.run_heads(&h, &h, times, sched)?;
                Ok(ForwardPass {
                    log_scores,
                    cache: PassCache::Flat(FlatCache {
                        batch: bsz,
                        ids,
                        lipcat,
                        lip_null,
                        id_null,
                        emo_ids,
                        emo_emb,
                        ada,
                        blocks,
                        h,
                    }),
                })
            }
        }
    }

    /// Applies the per-level linear heads; levels below the split read
    /// `h_low`, the rest read `h_high`. Each sample's log-scores are shifted
    /// by the log of the analytic score prefactor at its time, so the heads
    /// only have to model the O(1) posterior shape instead of a scale that
    /// sweeps orders of magnitude with σ̄. The shift is constant with respect
    /// to every parameter, so gradients flow through it unchanged.
    fn run_heads(
        &self,
        h_low: &Array2<f64>,
        h_high: &Array2<f64>,
        times: &[f64],
        sched: &NoiseSchedule,
    ) -> Result<Vec<Array3<f64>>> {
        let (r_levels, l, v) = (self.space.levels, self.space.frames, self.space.vocab as usize);
        let k = self.space.split;
        let bsz = times.len();
        let mut per_level = Vec::with_capacity(r_levels);
        for r in 0..r_levels {
            let h = if r < k { h_low } else { h_high };
            let z = linear_fwd(
                h,
                self.params.mat(self.pid(&format!("head{r}.w"))),
                self.params.vec1(self.pid(&format!("head{r}.b"))),
            );
            per_level.push(z);
        }
        let mut out = Vec::with_capacity(bsz);
        for (b, &t) in times.iter().enumerate() {
            let ln_prefactor = crate::diffusion::score_prefactor(sched.sigma_bar(t)?).ln();
            let mut grid = Array3::zeros((r_levels, l, v));
            for (r, z) in per_level.iter().enumerate() {
                for j in 0..l {
                    let row = z.row(b * l + j);
                    for val in 0..v {
                        grid[(r, j, val)] = row[val] + ln_prefactor;
                    }
                }
            }
            out.push(grid);
        }
        Ok(out)
    }

    /// Accumulates parameter gradients for `d log_scores` (one (R, L, V)
    /// array per sample). Gradients add onto whatever is already in the
    /// arena; call `params.zero_grads()` first for a fresh pass.
    pub fn backward(&mut self, pass: &ForwardPass, grad_log_scores: &[Array3<f64>]) -> Result<()> {
        let (r_levels, l, v) = (self.space.levels, self.space.frames, self.space.vocab as usize);
        let k = self.space.split;
        let heads = self.config.heads;
        let c = self.config.channels;
        let emo_len = self.space.emo_len();
        let down = self.space.emotion_downsample;

        let bsz = match &pass.cache {
            PassCache::Tiered(t) => t.batch,
            PassCache::Flat(f) => f.batch,
        };
        if grad_log_scores.len() != bsz {
            return Err(Error::ShapeMismatch {
                expected: format!("{bsz} gradient grids"),
                got: format!("{}", grad_log_scores.len()),
            });
        }
        for (b, g) in grad_log_scores.iter().enumerate() {
            if g.dim() != (r_levels, l, v) {
                return Err(Error::ShapeMismatch {
                    expected: format!("({r_levels}, {l}, {v})"),
                    got: format!("sample {b}: {:?}", g.dim()),
                });
            }
        }

        // Per-level dz as (B·L, V) matrices.
        let dz_of = |r: usize| {
            let mut dz = Array2::zeros((bsz * l, v));
            for (b, g) in grad_log_scores.iter().enumerate() {
                for j in 0..l {
                    for val in 0..v {
                        dz[(b * l + j, val)] = g[(r, j, val)];
                    }
                }
            }
            dz
        };

        match &pass.cache {
            PassCache::Tiered(cache) => {
                // Heads.
                let mut dh_low = Array2::zeros(cache.h_low.raw_dim());
                let mut dh_high = Array2::zeros(cache.h_high.raw_dim());
                for r in 0..r_levels {
                    let dz = dz_of(r);
                    let (h, dh) = if r < k {
                        (&cache.h_low, &mut dh_low)
                    } else {
                        (&cache.h_high, &mut dh_high)
                    };
                    let wid = self.pid(&format!("head{r}.w"));
                    let bid = self.pid(&format!("head{r}.b"));
                    let (dx, dw, db) = linear_bwd(h, self.params.mat(wid), &dz);
                    self.params.accumulate_grad2(wid, &dw);
                    self.params.accumulate_grad1(bid, &db);
                    *dh += &dx;
                }

                // High tier blocks, in reverse.
                let mut dstream = dh_high;
                let mut dpooled = Array2::zeros((bsz, c));
                let mut demo_rows = Array2::zeros(cache.emo_emb.raw_dim());
                for i in (0..self.config.high_blocks).rev() {
                    let ids = self.block_ids(&format!("high{i}"));
                    let adac = &cache.adac[i];
                    let tref = cache.adat[i].as_ref().map(|(_, tout)| {
                        let mut t1 = Array2::zeros((bsz, emo_len));
                        let mut t2 = Array2::zeros((bsz, emo_len));
                        for b in 0..bsz {
                            for p in 0..emo_len {
                                t1[(b, p)] = tout[(b * emo_len + p, 0)];
                                t2[(b, p)] = tout[(b * emo_len + p, 1)];
                            }
                        }
                        (t1, t2)
                    });
                    let (dx_in, dmods, dt) = ds_block_bwd(
                        &mut self.params,
                        &ids,
                        &cache.high_blocks[i],
                        &dstream,
                        &adac.mods,
                        tref.as_ref().map(|(a, b)| (a, b)),
                        bsz,
                        l,
                        heads,
                        down,
                    );
                    dstream = dx_in;
                    // Channel-mod MLP backward → pooled-emotion gradient.
                    let dmod_flat = join_mod_grads(&dmods, c);
                    let (w1, b1, w2, b2) = self.ada_ids(&format!("high{i}.adac"));
                    let dcin = mlp2_bwd(&mut self.params, w1, b1, w2, b2, &adac.mlp, &dmod_flat);
                    dpooled += &dcin.slice(ndarray::s![.., ..c]);
                    // Temporal-scalar MLP backward → per-position emotion rows.
                    if let (Some((tmlp, _)), Some((dt1, dt2))) = (&cache.adat[i], dt) {
                        let mut dtout = Array2::zeros((bsz * emo_len, 2));
                        for b in 0..bsz {
                            for p in 0..emo_len {
                                dtout[(b * emo_len + p, 0)] = dt1[(b, p)];
                                dtout[(b * emo_len + p, 1)] = dt2[(b, p)];
                            }
                        }
                        let (tw1, tb1, tw2, tb2) = self.ada_ids(&format!("high{i}.adat"));
                        let dtin = mlp2_bwd(&mut self.params, tw1, tb1, tw2, tb2, tmlp, &dtout);
                        demo_rows += &dtin.slice(ndarray::s![.., ..c]);
                    }
                }

                // Split the high-tier input gradient: token embeddings and
                // the projected low-tier output.
                for (r_off, ids) in cache.high_ids.iter().enumerate() {
                    self.scatter_embed(k + r_off, ids, &dstream);
                }
                let hlw = self.pid("hl_proj.w");
                let hlb = self.pid("hl_proj.b");
                let (dh_low_from_hl, dw, db) = linear_bwd(&cache.h_low, self.params.mat(hlw), &dstream);
                self.params.accumulate_grad2(hlw, &dw);
                self.params.accumulate_grad1(hlb, &db);
                let mut dstream = dh_low + dh_low_from_hl;

                // Low tier blocks, in reverse.
                let mut did = Array2::zeros((bsz, self.config.id_dim));
                for i in (0..self.config.low_blocks).rev() {
                    let ids = self.block_ids(&format!("low{i}"));
                    let ada = &cache.low_ada[i];
                    let (dx_in, dmods) = ss_block_bwd(
                        &mut self.params,
                        &ids,
                        &cache.low_blocks[i],
                        &dstream,
                        &ada.mods,
                        bsz,
                        l,
                        heads,
                    );
                    dstream = dx_in;
                    let dmod_flat = join_mod_grads(&dmods, c);
                    let (w1, b1, w2, b2) = self.ada_ids(&format!("low{i}.ada"));
                    let dain = mlp2_bwd(&mut self.params, w1, b1, w2, b2, &ada.mlp, &dmod_flat);
                    did += &dain.slice(ndarray::s![.., ..self.config.id_dim]);
                }

                // Bottom projection and its concatenated inputs.
                let ipw = self.pid("low.in_proj.w");
                let ipb = self.pid("low.in_proj.b");
                let (dlipcat, dw, db) = linear_bwd(&cache.lipcat, self.params.mat(ipw), &dstream);
                self.params.accumulate_grad2(ipw, &dw);
                self.params.accumulate_grad1(ipb, &db);
                let demb = dlipcat.slice(ndarray::s![.., ..c]).to_owned();
                for (r, ids) in cache.low_ids.iter().enumerate() {
                    self.scatter_embed(r, ids, &demb);
                }
                self.accumulate_null_lip(&dlipcat, &cache.lip_null, c);
                self.accumulate_null_id(&did, &cache.id_null);
                self.accumulate_emo(&cache.emo_ids, &demo_rows, &dpooled, bsz);
                Ok(())
            }
            PassCache::Flat(cache) => {
                let mut dh = Array2::zeros(cache.h.raw_dim());
                for r in 0..r_levels {
                    let dz = dz_of(r);
                    let wid = self.pid(&format!("head{r}.w"));
                    let bid = self.pid(&format!("head{r}.b"));
                    let (dx, dw, db) = linear_bwd(&cache.h, self.params.mat(wid), &dz);
                    self.params.accumulate_grad2(wid, &dw);
                    self.params.accumulate_grad1(bid, &db);
                    dh += &dx;
                }
                let mut dstream = dh;
                let mut did = Array2::zeros((bsz, self.config.id_dim));
                let mut dpooled = Array2::zeros((bsz, c));
                let n_blocks = self.config.low_blocks + self.config.high_blocks;
                for i in (0..n_blocks).rev() {
                    let ids = self.block_ids(&format!("flat{i}"));
                    let ada = &cache.ada[i];
                    let (dx_in, dmods) = ss_block_bwd(
                        &mut self.params,
                        &ids,
                        &cache.blocks[i],
                        &dstream,
                        &ada.mods,
                        bsz,
                        l,
                        heads,
                    );
                    dstream = dx_in;
                    let dmod_flat = join_mod_grads(&dmods, c);
                    let (w1, b1, w2, b2) = self.ada_ids(&format!("flat{i}.ada"));
                    let dain = mlp2_bwd(&mut self.params, w1, b1, w2, b2, &ada.mlp, &dmod_flat);
                    did += &dain.slice(ndarray::s![.., ..self.config.id_dim]);
                    dpooled += &dain.slice(ndarray::s![.., self.config.id_dim..self.config.id_dim + c]);
                }
                let ipw = self.pid("flat.in_proj.w");
                let ipb = self.pid("flat.in_proj.b");
                let (dlipcat, dw, db) = linear_bwd(&cache.lipcat, self.params.mat(ipw), &dstream);
                self.params.accumulate_grad2(ipw, &dw);
                self.params.accumulate_grad1(ipb, &db);
                let demb = dlipcat.slice(ndarray::s![.., ..c]).to_owned();
                for (r, ids) in cache.ids.iter().enumerate() {
                    self.scatter_embed(r, ids, &demb);
                }
                self.accumulate_null_lip(&dlipcat, &cache.lip_null, c);
                self.accumulate_null_id(&did, &cache.id_null);
                let demo_rows = Array2::zeros(cache.emo_emb.raw_dim());
                self.accumulate_emo(&cache.emo_ids, &demo_rows, &dpooled, bsz);
                Ok(())
            }
        }
    }

    /// Null-lip gradient: rows of samples that used the learned null vector.
    fn accumulate_null_lip(&mut self, dlipcat: &Array2<f64>, lip_null: &[bool], c: usize) {
        let l = self.space.frames;
        let lipd = self.config.lip_dim;
        let pid = self.pid("null.lip");
        let tensor = &mut self.params.tensors[pid];
        for (b, &is_null) in lip_null.iter().enumerate() {
            if !is_null {
                continue;
            }
            for j in 0..l {
                for d in 0..lipd {
                    tensor.grad[[d]] += dlipcat[(b * l + j, c + d)];
                }
            }
        }
    }

    fn accumulate_null_id(&mut self, did: &Array2<f64>, id_null: &[bool]) {
        let pid = self.pid("null.id");
        let tensor = &mut self.params.tensors[pid];
        for (b, &is_null) in id_null.iter().enumerate() {
            if !is_null {
                continue;
            }
            for d in 0..did.ncols() {
                tensor.grad[[d]] += did[(b, d)];
            }
        }
    }

    /// Emotion embedding gradients: per-position rows (temporal path) plus
    /// the pooled mean (channel path).
    fn accumulate_emo(
        &mut self,
        emo_ids: &Array2<usize>,
        demo_rows: &Array2<f64>,
        dpooled: &Array2<f64>,
        bsz: usize,
    ) {
        let emo_len = self.space.emo_len();
        let pid = self.pid("embed.emo");
        let tensor = &mut self.params.tensors[pid];
        for b in 0..bsz {
            for p in 0..emo_len {
                let e = emo_ids[(b, p)];
                for c in 0..dpooled.ncols() {
                    tensor.grad[[e, c]] +=
                        demo_rows[(b * emo_len + p, c)] + dpooled[(b, c)] / emo_len as f64;
                }
            }
        }
    }

    /// Convenience: single-sample scores (the exponential of the log-score
    /// head outputs) as a [`ScoreField`].
    pub fn score(
        &self,
        grid: &TokenGrid,
        t: f64,
        bundle: &ConditionBundle,
        sched: &NoiseSchedule,
    ) -> Result<ScoreField> {
        let pass = self.forward(
            std::slice::from_ref(grid),
            &[t],
            std::slice::from_ref(bundle),
            sched,
        )?;
        Ok(ScoreField { scores: pass.log_scores[0].mapv(f64::exp) })
    }

    /// Identity adapter forward: one-hot-plus-noise speaker rows (B, adapter_in)
    /// to identity embeddings (B, id_dim).
    pub fn adapter_forward(&self, x: &Array2<f64>) -> Result<(Array2<f64>, MlpCache)> {
        if x.ncols() != self.config.adapter_in {
            return Err(Error::ShapeMismatch {
                expected: format!("adapter input width {}", self.config.adapter_in),
                got: format!("{}", x.ncols()),
            });
        }
        let (w1, b1, w2, b2) = (
            self.pid("adapter.w1"),
            self.pid("adapter.b1"),
            self.pid("adapter.w2"),
            self.pid("adapter.b2"),
        );
        Ok(mlp2_fwd(&self.params, w1, b1, w2, b2, x.clone()))
    }

    /// Identity adapter backward; accumulates parameter gradients.
    pub fn adapter_backward(&mut self, cache: &MlpCache, dout: &Array2<f64>) {
        let (w1, b1, w2, b2) = (
            self.pid("adapter.w1"),
            self.pid("adapter.b1"),
            self.pid("adapter.w2"),
            self.pid("adapter.b2"),
        );
        let _ = mlp2_bwd(&mut self.params, w1, b1, w2, b2, cache, dout);
    }

    // -----------------------------------------------------------------------
    // Checkpointing
    // -----------------------------------------------------------------------

    /// Serializes the network to the binary checkpoint format.
    pub fn save(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&[self.variant.code()])?;
        for field in [
            self.config.channels,
            self.config.heads,
            self.config.low_blocks,
            self.config.high_blocks,
            self.config.lip_dim,
            self.config.id_dim,
            self.config.emo_classes,
            self.config.adapter_in,
            self.space.levels,
            self.space.frames,
            self.space.vocab as usize,
            self.space.split,
            self.space.emotion_downsample,
        ] {
            w.write_all(&(field as u32).to_le_bytes())?;
        }
        w.write_all(&(self.params.len() as u32).to_le_bytes())?;
        for t in &self.params.tensors {
            let name = t.name.as_bytes();
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name)?;
            w.write_all(&(t.value.ndim() as u32).to_le_bytes())?;
            for &d in t.value.shape() {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            for &x in t.value.iter() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Reads a checkpoint, reconstructing the architecture and parameters.
    pub fn load(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format(format!(
                "bad checkpoint magic {magic:02x?}, expected {CHECKPOINT_MAGIC:02x?}"
            )));
        }
        let mut u16b = [0u8; 2];
        r.read_exact(&mut u16b)?;
        let version = u16::from_le_bytes(u16b);
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let mut byte = [0u8; 1];
        r.read_exact(&mut byte)?;
        let variant = Variant::from_code(byte[0])?;
        let mut fields = [0usize; 13];
        for f in fields.iter_mut() {
            let mut u32b = [0u8; 4];
            r.read_exact(&mut u32b)?;
            *f = u32::from_le_bytes(u32b) as usize;
        }
        let config = NetworkConfig {
            channels: fields[0],
            heads: fields[1],
            low_blocks: fields[2],
            high_blocks: fields[3],
            lip_dim: fields[4],
            id_dim: fields[5],
            emo_classes: fields[6],
            adapter_in: fields[7],
        };
        let space = StateSpaceConfig {
            levels: fields[8],
            frames: fields[9],
            vocab: fields[10] as u32,
            split: fields[11],
            emotion_downsample: fields[12],
        };
        let mut net = Network::new(config, space, variant, 0)?;
        let mut u32b = [0u8; 4];
        r.read_exact(&mut u32b)?;
        let count = u32::from_le_bytes(u32b) as usize;
        if count != net.params.len() {
            return Err(Error::Format(format!(
                "checkpoint has {count} tensors, architecture expects {}",
                net.params.len()
            )));
        }
        let mut seen = vec![false; count];
        for _ in 0..count {
            r.read_exact(&mut u32b)?;
            let name_len = u32::from_le_bytes(u32b) as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::Format("non-UTF-8 tensor name".into()))?;
            r.read_exact(&mut u32b)?;
            let rank = u32::from_le_bytes(u32b) as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                r.read_exact(&mut u32b)?;
                dims.push(u32::from_le_bytes(u32b) as usize);
            }
            let id = net
                .params
                .id(&name)
                .ok_or_else(|| Error::Format(format!("unexpected tensor {name}")))?;
            if seen[id] {
                return Err(Error::Format(format!("duplicate tensor {name}")));
            }
            seen[id] = true;
            let expected = net.params.tensors[id].value.shape().to_vec();
            if dims != expected {
                return Err(Error::Format(format!(
                    "tensor {name} has shape {dims:?}, architecture expects {expected:?}"
                )));
            }
            let n: usize = dims.iter().product();
            let mut data = vec![0f64; n];
            let mut f64b = [0u8; 8];
            for x in data.iter_mut() {
                r.read_exact(&mut f64b)?;
                *x = f64::from_le_bytes(f64b);
            }
            let arr = ArrayD::from_shape_vec(IxDyn(&dims), data)
                .map_err(|e| Error::Format(format!("tensor {name}: {e}")))?;
            net.params.tensors[id].value = arr;
        }
        Ok(net)
    }

    /// The level partition implied by the state-space split.
    pub fn partition(&self) -> LevelPartition {
        LevelPartition { split_index: self.space.split }
    }
}

// Re-exported so downstream code can name the adapter's activation cache
// without reaching into nn internals.
pub use crate::nn::MlpCache as AdapterCache;
