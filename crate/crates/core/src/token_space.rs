//! The hierarchical discrete state space.
//!
//! A [`TokenGrid`] is an R-level × L-frame array of token ids in
//! `{0..V-1} ∪ {MASK}`, where the MASK sentinel is encoded as id `V` (one past
//! the vocabulary). Per-level score heads therefore output exactly `V` entries:
//! scores for transitions *into* MASK are never modeled, because the absorbing
//! chain never transitions into MASK during reversal.
//!
//! Levels are 0-indexed in storage throughout the crate; documentation that
//! speaks of "levels 1..k" refers to the same first `k` rows.

use crate::{Error, Result};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

/// Magic bytes opening every binary corpus file.
pub const CORPUS_MAGIC: [u8; 4] = *b"HCDT";
/// Binary corpus format version.
pub const CORPUS_VERSION: u16 = 1;

/// Dimensions of the state space plus the level partition and the emotion
/// down-sampling factor. The defaults are the desk-scale configuration used by
/// the synthetic benchmark; paper-scale values (R=12, V=1024, k=2, D=25) are
/// plain config overrides.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StateSpaceConfig {
    /// Number of token levels R.
    pub levels: usize,
    /// Number of frames L.
    pub frames: usize,
    /// Per-level vocabulary size V; MASK is id V.
    pub vocab: u32,
    /// Split index k: levels `0..k` are low, `k..R` are high.
    pub split: usize,
    /// Emotion block length D; L must be divisible by D.
    pub emotion_downsample: usize,
}

impl Default for StateSpaceConfig {
    fn default() -> Self {
        Self {
            levels: 4,
            frames: 8,
            vocab: 8,
            split: 1,
            emotion_downsample: 4,
        }
    }
}

impl StateSpaceConfig {
    /// Number of emotion blocks L_emo = L / D.
    pub fn emo_len(&self) -> usize {
        self.frames / self.emotion_downsample
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.frames == 0 || self.vocab == 0 {
            return Err(Error::Config("levels, frames, vocab must be positive".into()));
        }
        if self.vocab > u16::MAX as u32 {
            return Err(Error::Config(format!(
                "vocab {} too large for u16 token storage (MASK = V must fit)",
                self.vocab
            )));
        }
        if !(1..self.levels).contains(&self.split) {
            return Err(Error::SplitIndexOutOfRange {
                k: self.split,
                levels: self.levels,
            });
        }
        if self.frames % self.emotion_downsample != 0 {
            return Err(Error::Config(format!(
                "frames {} not divisible by emotion_downsample {}",
                self.frames, self.emotion_downsample
            )));
        }
        Ok(())
    }
}

/// The low/high partition: levels `0..split_index` are low, the rest high.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LevelPartition {
    pub split_index: usize,
}

/// An R×L grid of token ids, the diffusion state x_t.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenGrid {
    vocab: u32,
    values: Array2<u16>,
}

impl TokenGrid {
    /// Wraps an id array, validating every entry against `{0..V} `.
    pub fn new(values: Array2<u16>, vocab: u32) -> Result<Self> {
        for &v in values.iter() {
            if u32::from(v) > vocab {
                return Err(Error::TokenOutOfRange { id: v.into(), vocab });
            }
        }
        Ok(Self { vocab, values })
    }

    /// An all-MASK grid, the reverse process's starting state at t = T.
    pub fn all_masked(levels: usize, frames: usize, vocab: u32) -> Self {
        Self {
            vocab,
            values: Array2::from_elem((levels, frames), vocab as u16),
        }
    }

    pub fn levels(&self) -> usize {
        self.values.nrows()
    }

    pub fn frames(&self) -> usize {
        self.values.ncols()
    }

    pub fn vocab(&self) -> u32 {
        self.vocab
    }

    /// The MASK sentinel id for this grid (= V).
    pub fn mask_id(&self) -> u16 {
        self.vocab as u16
    }

    pub fn get(&self, level: usize, frame: usize) -> u16 {
        self.values[(level, frame)]
    }

    pub fn set(&mut self, level: usize, frame: usize, id: u16) -> Result<()> {
        if u32::from(id) > self.vocab {
            return Err(Error::TokenOutOfRange { id: id.into(), vocab: self.vocab });
        }
        self.values[(level, frame)] = id;
        Ok(())
    }

    pub fn is_masked(&self, level: usize, frame: usize) -> bool {
        self.values[(level, frame)] == self.mask_id()
    }

    pub fn values(&self) -> &Array2<u16> {
        &self.values
    }

    /// Count of MASK entries divided by R·L.
    pub fn mask_fraction(&self) -> f64 {
        let mask = self.mask_id();
        let n = self.values.iter().filter(|&&v| v == mask).count();
        n as f64 / (self.levels() * self.frames()) as f64
    }

    pub fn has_mask(&self) -> bool {
        let mask = self.mask_id();
        self.values.iter().any(|&v| v == mask)
    }

    /// Splits into the low component (levels `0..k`) and high component
    /// (levels `k..R`). Merging the halves restores the grid exactly.
    pub fn split(&self, part: LevelPartition) -> Result<(TokenGrid, TokenGrid)> {
        let k = part.split_index;
        if !(1..self.levels()).contains(&k) {
            return Err(Error::SplitIndexOutOfRange { k, levels: self.levels() });
        }
        let low = self.values.slice(ndarray::s![..k, ..]).to_owned();
        let high = self.values.slice(ndarray::s![k.., ..]).to_owned();
        Ok((
            TokenGrid { vocab: self.vocab, values: low },
            TokenGrid { vocab: self.vocab, values: high },
        ))
    }

    /// Inverse of [`TokenGrid::split`]: stacks low levels on top of high levels.
    pub fn merge(low: &TokenGrid, high: &TokenGrid) -> Result<TokenGrid> {
        if low.frames() != high.frames() || low.vocab != high.vocab {
            return Err(Error::ShapeMismatch {
                expected: format!("{} frames, vocab {}", low.frames(), low.vocab),
                got: format!("{} frames, vocab {}", high.frames(), high.vocab),
            });
        }
        let mut values = Array2::zeros((low.levels() + high.levels(), low.frames()));
        values.slice_mut(ndarray::s![..low.levels(), ..]).assign(&low.values);
        values.slice_mut(ndarray::s![low.levels().., ..]).assign(&high.values);
        Ok(TokenGrid { vocab: low.vocab, values })
    }
}

/// Header of a binary corpus file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CorpusHeader {
    pub levels: u32,
    pub frames: u32,
    pub vocab: u32,
    pub split: u32,
}

/// Writes grids in the binary corpus format: magic "HCDT", version u16,
/// R, L, V, k as little-endian u32, then length-prefixed records (payload byte
/// count as u32, then R·L token ids as little-endian u16 in row-major order).
pub fn write_corpus<P: AsRef<Path>>(
    path: P,
    header: CorpusHeader,
    grids: &[TokenGrid],
) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(&CORPUS_MAGIC)?;
    w.write_all(&CORPUS_VERSION.to_le_bytes())?;
    for field in [header.levels, header.frames, header.vocab, header.split] {
        w.write_all(&field.to_le_bytes())?;
    }
    for grid in grids {
        if grid.levels() != header.levels as usize || grid.frames() != header.frames as usize {
            return Err(Error::ShapeMismatch {
                expected: format!("{}×{}", header.levels, header.frames),
                got: format!("{}×{}", grid.levels(), grid.frames()),
            });
        }
        let payload_bytes = (grid.levels() * grid.frames() * 2) as u32;
        w.write_all(&payload_bytes.to_le_bytes())?;
        for &v in grid.values.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a binary corpus file written by [`write_corpus`].
pub fn read_corpus<P: AsRef<Path>>(path: P) -> Result<(CorpusHeader, Vec<TokenGrid>)> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != CORPUS_MAGIC {
        return Err(Error::Format(format!(
            "bad corpus magic {magic:?}, expected {CORPUS_MAGIC:?}"
        )));
    }
    let mut buf2 = [0u8; 2];
    r.read_exact(&mut buf2)?;
    let version = u16::from_le_bytes(buf2);
    if version != CORPUS_VERSION {
        return Err(Error::Format(format!("unsupported corpus version {version}")));
    }
    let mut buf4 = [0u8; 4];
    let mut fields = [0u32; 4];
    for f in fields.iter_mut() {
        r.read_exact(&mut buf4)?;
        *f = u32::from_le_bytes(buf4);
    }
    let header = CorpusHeader {
        levels: fields[0],
        frames: fields[1],
        vocab: fields[2],
        split: fields[3],
    };
    let cells = header.levels as usize * header.frames as usize;
    let mut grids = Vec::new();
    loop {
        match r.read_exact(&mut buf4) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        }
        let payload = u32::from_le_bytes(buf4) as usize;
        if payload != cells * 2 {
            return Err(Error::Format(format!(
                "record payload {payload} bytes, expected {} for a {}×{} grid",
                cells * 2,
                header.levels,
                header.frames
            )));
        }
        let mut raw = vec![0u8; payload];
        r.read_exact(&mut raw)?;
        let ids: Vec<u16> = raw
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes([c[0], c[1]]))
            .collect();
        let values = Array2::from_shape_vec((header.levels as usize, header.frames as usize), ids)
            .map_err(|e| Error::Format(e.to_string()))?;
        grids.push(TokenGrid::new(values, header.vocab)?);
    }
    Ok((header, grids))
}

/// Debugging alternative to the binary format: one JSON array-of-arrays per
/// line, MASK written as the numeric sentinel V.
pub fn write_corpus_jsonl<P: AsRef<Path>>(path: P, grids: &[TokenGrid]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for grid in grids {
        let rows: Vec<Vec<u16>> = grid
            .values
            .rows()
            .into_iter()
            .map(|row| row.to_vec())
            .collect();
        serde_json::to_writer(&mut w, &rows).map_err(|e| Error::Format(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads the JSON-lines corpus alternative.
pub fn read_corpus_jsonl<P: AsRef<Path>>(path: P, vocab: u32) -> Result<Vec<TokenGrid>> {
    let r = BufReader::new(std::fs::File::open(path)?);
    let mut grids = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rows: Vec<Vec<u16>> =
            serde_json::from_str(&line).map_err(|e| Error::Format(e.to_string()))?;
        let levels = rows.len();
        let frames = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != frames) {
            return Err(Error::Format("ragged token grid in JSON line".into()));
        }
        let flat: Vec<u16> = rows.into_iter().flatten().collect();
        let values = Array2::from_shape_vec((levels, frames), flat)
            .map_err(|e| Error::Format(e.to_string()))?;
        grids.push(TokenGrid::new(values, vocab)?);
    }
    Ok(grids)
}
