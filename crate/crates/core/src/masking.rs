//! Cloze-style sample construction and padded batch assembly.

use log::warn;
use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::InteractionSequence;
use crate::error::{HailError, Result};

pub const DEFAULT_MASK_RATIO: f64 = 0.2;
pub const DEFAULT_DUPLICATION: usize = 10;
pub const DEFAULT_BATCH_SIZE: usize = 256;

/// A sequence with some positions replaced by the mask token.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskedSample {
    pub tokens: Vec<u32>,
    /// Ascending.
    pub masked_positions: Vec<usize>,
    /// Original element at each masked position.
    pub labels: Vec<u32>,
}

impl MaskedSample {
    /// Masks exactly the given positions of `elements`.
    pub fn with_positions(elements: &[u32], mask_id: u32, mut positions: Vec<usize>) -> Self {
        positions.sort_unstable();
        let mut tokens = elements.to_vec();
        let labels = positions
            .iter()
            .map(|&p| std::mem::replace(&mut tokens[p], mask_id))
            .collect();
        MaskedSample {
            tokens,
            masked_positions: positions,
            labels,
        }
    }

    /// `prefix` followed by a single mask token whose label is `target`.
    pub fn next_element(prefix: &[u32], target: u32, mask_id: u32, max_len: usize) -> Self {
        let keep = prefix.len().min(max_len.saturating_sub(1));
        let mut tokens = prefix[prefix.len() - keep..].to_vec();
        tokens.push(mask_id);
        MaskedSample {
            masked_positions: vec![tokens.len() - 1],
            labels: vec![target],
            tokens,
        }
    }

    /// Undo the masking.
    pub fn reconstruct(&self) -> Vec<u32> {
        let mut out = self.tokens.clone();
        for (&p, &l) in self.masked_positions.iter().zip(&self.labels) {
            out[p] = l;
        }
        out
    }
}

/// Number of random masks for a sequence of length `len`.
pub fn mask_count(len: usize, mask_ratio: f64) -> usize {
    ((mask_ratio * len as f64).round() as usize).clamp(1, len)
}

/// `duplication` independently masked copies plus one copy with only the
/// final element masked. Sequences shorter than 2 yield nothing.
pub fn mask_for_training<R: Rng + ?Sized>(
    seq: &InteractionSequence,
    mask_id: u32,
    mask_ratio: f64,
    duplication: usize,
    rng: &mut R,
) -> Result<Vec<MaskedSample>> {
    if !(mask_ratio > 0.0 && mask_ratio < 1.0) {
        return Err(HailError::contract(format!("mask_ratio must be in (0,1), got {mask_ratio}")));
    }
    if duplication < 1 {
        return Err(HailError::contract("duplication must be at least 1"));
    }
    let len = seq.elements.len();
    if len < 2 {
        warn!("generator {}: sequence of length {len} skipped for masking", seq.generator);
        return Ok(Vec::new());
    }
    let k = mask_count(len, mask_ratio);
    let mut out = Vec::with_capacity(duplication + 1);
    for _ in 0..duplication {
        let positions = index::sample(rng, len, k).into_vec();
        out.push(MaskedSample::with_positions(&seq.elements, mask_id, positions));
    }
    out.push(MaskedSample::with_positions(&seq.elements, mask_id, vec![len - 1]));
    Ok(out)
}

/// Masks every training sequence from one random stream, in order.
pub fn mask_corpus<R: Rng + ?Sized>(
    seqs: &[InteractionSequence],
    mask_id: u32,
    mask_ratio: f64,
    duplication: usize,
    rng: &mut R,
) -> Result<Vec<MaskedSample>> {
    let mut out = Vec::new();
    for s in seqs {
        out.extend(mask_for_training(s, mask_id, mask_ratio, duplication, rng)?);
    }
    Ok(out)
}

/// Right-padded token matrix plus the flat list of masked coordinates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedBatch {
    /// B rows of exactly `max_len` tokens.
    pub token_matrix: Vec<Vec<u32>>,
    pub position_matrix: Vec<Vec<u32>>,
    /// Unpadded length of each row.
    pub lengths: Vec<usize>,
    /// (row, column) of every masked cell, row-major.
    pub mask_index: Vec<(usize, usize)>,
    pub labels: Vec<u32>,
    pub max_len: usize,
}

impl MaskedBatch {
    pub fn from_samples(samples: &[&MaskedSample], max_len: usize, pad_id: u32) -> Result<Self> {
        let mut batch = MaskedBatch {
            token_matrix: Vec::with_capacity(samples.len()),
            position_matrix: Vec::with_capacity(samples.len()),
            lengths: Vec::with_capacity(samples.len()),
            mask_index: Vec::new(),
            labels: Vec::new(),
            max_len,
        };
        for (row, s) in samples.iter().enumerate() {
            let len = s.tokens.len();
            if len > max_len {
                return Err(HailError::contract(format!(
                    "sample of length {len} exceeds max_len {max_len}"
                )));
            }
            let mut tokens = s.tokens.clone();
            tokens.resize(max_len, pad_id);
            batch.token_matrix.push(tokens);
            batch.position_matrix.push((0..max_len as u32).collect());
            batch.lengths.push(len);
            for (&p, &l) in s.masked_positions.iter().zip(&s.labels) {
                batch.mask_index.push((row, p));
                batch.labels.push(l);
            }
        }
        Ok(batch)
    }

    pub fn rows(&self) -> usize {
        self.token_matrix.len()
    }

    /// Number of masked coordinates S_L.
    pub fn masked_count(&self) -> usize {
        self.mask_index.len()
    }

    /// Unpadded tokens of a row.
    pub fn row_tokens(&self, row: usize) -> &[u32] {
        &self.token_matrix[row][..self.lengths[row]]
    }

    /// Range into `mask_index` covering one row (coordinates are row-major).
    pub fn row_coords(&self) -> Vec<std::ops::Range<usize>> {
        let mut ranges = vec![0..0; self.rows()];
        let mut start = 0;
        for (row, range) in ranges.iter_mut().enumerate() {
            let mut end = start;
            while end < self.mask_index.len() && self.mask_index[end].0 == row {
                end += 1;
            }
            *range = start..end;
            start = end;
        }
        ranges
    }
}

/// Shuffles the samples and cuts them into right-padded batches.
pub fn make_batches<R: Rng + ?Sized>(
    samples: &[MaskedSample],
    batch_size: usize,
    max_len: usize,
    pad_id: u32,
    rng: &mut R,
) -> Result<Vec<MaskedBatch>> {
    if batch_size == 0 {
        return Err(HailError::contract("batch_size must be positive"));
    }
    if let Some(s) = samples.iter().find(|s| s.tokens.len() > max_len) {
        return Err(HailError::contract(format!(
            "sample of length {} exceeds max_len {max_len}",
            s.tokens.len()
        )));
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(rng);
    order
        .chunks(batch_size)
        .map(|chunk| {
            let refs: Vec<&MaskedSample> = chunk.iter().map(|&i| &samples[i]).collect();
            MaskedBatch::from_samples(&refs, max_len, pad_id)
        })
        .collect()
}
