//! Positive views by feature swapping / feature masking, and negative sampling.

use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Dataset;
use crate::seed::Rng;

/// Value written into masked coordinates. Equals the feature mean after z-scoring.
pub const MASK_FILL: f64 = 0.0;

#[derive(Debug, Error, PartialEq)]
pub enum AugmentError {
    #[error("feature swap needs at least 2 features, got {0}")]
    TooFewFeatures(usize),
    #[error("k must be at least 1")]
    ZeroK,
    #[error("cannot mask {k} of {d} features")]
    MaskTooLarge { k: usize, d: usize },
    #[error("need more than {negatives} samples to draw {negatives} negatives, have {n}")]
    NotEnoughSamples { n: usize, negatives: usize },
    #[error("anchor index {index} out of range for {n} samples")]
    IndexOutOfRange { index: usize, n: usize },
    #[error("position {pos} out of range for length {len}")]
    PositionOutOfRange { pos: usize, len: usize },
    #[error("unknown pretext task `{0}` (expected fs, fm or fs+fm)")]
    UnknownTask(String),
}

pub type Result<T, E = AugmentError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TaskKind {
    /// Feature swapping.
    Fs,
    /// Feature masking.
    Fm,
    /// Swap, then mask.
    FsFm,
}

impl TaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Fs => "fs",
            TaskKind::Fm => "fm",
            TaskKind::FsFm => "fs+fm",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskKind {
    type Err = AugmentError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "fs" => Ok(TaskKind::Fs),
            "fm" => Ok(TaskKind::Fm),
            "fs+fm" | "fs_fm" => Ok(TaskKind::FsFm),
            other => Err(AugmentError::UnknownTask(other.to_string())),
        }
    }
}

impl Serialize for TaskKind {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for TaskKind {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// A pretext task and its strength `k`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretextTask {
    pub kind: TaskKind,
    pub k: usize,
}

impl Default for PretextTask {
    fn default() -> Self {
        Self {
            kind: TaskKind::FsFm,
            k: 4,
        }
    }
}

impl PretextTask {
    pub fn validate(&self, d: usize) -> Result<()> {
        if self.k == 0 {
            return Err(AugmentError::ZeroK);
        }
        if matches!(self.kind, TaskKind::Fs | TaskKind::FsFm) && d < 2 {
            return Err(AugmentError::TooFewFeatures(d));
        }
        if matches!(self.kind, TaskKind::Fm | TaskKind::FsFm) && self.k > d {
            return Err(AugmentError::MaskTooLarge { k: self.k, d });
        }
        Ok(())
    }
}

/// Applies the given transpositions in order.
pub fn apply_swaps(x: &[f64], swaps: &[(usize, usize)]) -> Result<Vec<f64>> {
    let mut out = x.to_vec();
    for &(i, j) in swaps {
        for pos in [i, j] {
            if pos >= x.len() {
                return Err(AugmentError::PositionOutOfRange { pos, len: x.len() });
            }
        }
        out.swap(i, j);
    }
    Ok(out)
}

/// Sets the given positions to [`MASK_FILL`].
pub fn apply_mask(x: &[f64], positions: &[usize]) -> Result<Vec<f64>> {
    let mut out = x.to_vec();
    for &pos in positions {
        *out.get_mut(pos)
            .ok_or(AugmentError::PositionOutOfRange { pos, len: x.len() })? = MASK_FILL;
    }
    Ok(out)
}

/// Draws `k` independent transpositions, each of two distinct uniform positions.
pub fn draw_swaps(d: usize, k: usize, rng: &mut Rng) -> Result<Vec<(usize, usize)>> {
    if d < 2 {
        return Err(AugmentError::TooFewFeatures(d));
    }
    if k == 0 {
        return Err(AugmentError::ZeroK);
    }
    Ok((0..k)
        .map(|_| {
            let i = rng.random_range(0..d);
            let mut j = rng.random_range(0..d - 1);
            if j >= i {
                j += 1;
            }
            (i, j)
        })
        .collect())
}

/// Draws `k` distinct positions uniformly without replacement.
pub fn draw_mask(d: usize, k: usize, rng: &mut Rng) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(AugmentError::ZeroK);
    }
    if k > d {
        return Err(AugmentError::MaskTooLarge { k, d });
    }
    Ok(index::sample(rng, d, k).into_vec())
}

pub fn feature_swap(x: &[f64], k: usize, rng: &mut Rng) -> Result<Vec<f64>> {
    let swaps = draw_swaps(x.len(), k, rng)?;
    apply_swaps(x, &swaps)
}

pub fn feature_mask(x: &[f64], k: usize, rng: &mut Rng) -> Result<Vec<f64>> {
    let positions = draw_mask(x.len(), k, rng)?;
    apply_mask(x, &positions)
}

pub fn augment(x: &[f64], task: PretextTask, rng: &mut Rng) -> Result<Vec<f64>> {
    task.validate(x.len())?;
    match task.kind {
        TaskKind::Fs => feature_swap(x, task.k, rng),
        TaskKind::Fm => feature_mask(x, task.k, rng),
        TaskKind::FsFm => {
            let swapped = feature_swap(x, task.k, rng)?;
            feature_mask(&swapped, task.k, rng)
        }
    }
}

/// `negatives` distinct indices from `[0, n) \ {anchor}`.
pub fn sample_negatives(
    n: usize,
    anchor: usize,
    negatives: usize,
    rng: &mut Rng,
) -> Result<Vec<usize>> {
    if anchor >= n {
        return Err(AugmentError::IndexOutOfRange { index: anchor, n });
    }
    if n <= negatives {
        return Err(AugmentError::NotEnoughSamples { n, negatives });
    }
    Ok(index::sample(rng, n - 1, negatives)
        .into_iter()
        .map(|i| if i >= anchor { i + 1 } else { i })
        .collect())
}

/// Anchors with their positive view and `L` augmented negatives each.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveBatch {
    pub anchor_indices: Vec<usize>,
    pub anchors: Vec<Vec<f64>>,
    pub positives: Vec<Vec<f64>>,
    /// `negatives[i]` holds the `L` views for anchor `i`.
    pub negatives: Vec<Vec<Vec<f64>>>,
    pub negative_indices: Vec<Vec<usize>>,
}

impl ContrastiveBatch {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn num_negatives(&self) -> usize {
        self.negatives.first().map_or(0, Vec::len)
    }
}

/// Builds a batch from the feature rows of `data`. Labels are never read.
pub fn build_contrastive_batch(
    data: &Dataset,
    indices: &[usize],
    task: PretextTask,
    negatives: usize,
    rng: &mut Rng,
) -> Result<ContrastiveBatch> {
    let rows: Vec<&[f64]> = data
        .samples()
        .iter()
        .map(|s| s.features.as_slice())
        .collect();
    build_batch_from_rows(&rows, indices, task, negatives, rng)
}

pub fn build_batch_from_rows(
    rows: &[&[f64]],
    indices: &[usize],
    task: PretextTask,
    negatives: usize,
    rng: &mut Rng,
) -> Result<ContrastiveBatch> {
    let n = rows.len();
    let mut batch = ContrastiveBatch {
        anchor_indices: indices.to_vec(),
        anchors: Vec::with_capacity(indices.len()),
        positives: Vec::with_capacity(indices.len()),
        negatives: Vec::with_capacity(indices.len()),
        negative_indices: Vec::with_capacity(indices.len()),
    };
    for &i in indices {
        if i >= n {
            return Err(AugmentError::IndexOutOfRange { index: i, n });
        }
        let x = rows[i];
        batch.anchors.push(x.to_vec());
        batch.positives.push(augment(x, task, rng)?);
        let neg_idx = sample_negatives(n, i, negatives, rng)?;
        let views = neg_idx
            .iter()
            .map(|&j| augment(rows[j], task, rng))
            .collect::<Result<Vec<_>>>()?;
        batch.negatives.push(views);
        batch.negative_indices.push(neg_idx);
    }
    Ok(batch)
}
