//! Mask/keep/random MLM corruption and batch assembly.
//!
//! `corrupt` hides a random subset of residue positions; `collate`
//! right-pads corrupted sequences into a rectangular batch. Both are
//! pure given the rng state, so batches are reproducible from (seed,
//! batch index) alone.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tokenizer::{FIRST_RESIDUE, MASK, PAD, VOCAB_SIZE};

/// One corrupted sequence: the model input, the original ids to
/// reconstruct, and a flag per position marking which ones contribute
/// to the loss.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corrupted {
    pub input: Vec<u32>,
    pub target: Vec<u32>,
    pub flags: Vec<bool>,
}

/// A right-padded batch. All four grids are row-major `batch` x
/// `max_len`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedBatch {
    pub batch: usize,
    pub max_len: usize,
    pub input_ids: Vec<u32>,
    /// True exactly on real (non-[PAD]) tokens.
    pub attention_mask: Vec<bool>,
    /// Pre-corruption ids where `target_mask` is true; ignored
    /// elsewhere.
    pub target_ids: Vec<u32>,
    /// True on positions that contribute to the MLM loss. Implies
    /// `attention_mask`; always false at [CLS]/[SEP]/[PAD].
    pub target_mask: Vec<bool>,
    pub lengths: Vec<usize>,
}

/// Applies MLM corruption to an encoded sequence ([CLS] ... [SEP]).
///
/// Each interior position is independently selected with probability
/// `rate`; a selected position becomes [MASK], a uniformly random
/// residue id, or stays unchanged, with the given proportions. [CLS]
/// and [SEP] are never selected. If the Bernoulli pass selects nothing,
/// exactly one uniformly chosen interior position is forced through the
/// same replacement draw, so the loss is always defined.
pub fn corrupt(
    ids: &[u32],
    rate: f64,
    proportions: (f64, f64, f64),
    rng: &mut ChaCha8Rng,
) -> Result<Corrupted> {
    if !(rate > 0.0 && rate < 1.0) {
        return Err(Error::InvalidArgument(format!("mask rate {rate} outside (0, 1)")));
    }
    let (p_mask, p_rand, p_keep) = proportions;
    if p_mask < 0.0 || p_rand < 0.0 || p_keep < 0.0 || (p_mask + p_rand + p_keep - 1.0).abs() > 1e-9
    {
        return Err(Error::InvalidArgument(format!(
            "proportions {proportions:?} must be non-negative and sum to 1"
        )));
    }
    if ids.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "sequence of length {} has no residue positions to corrupt",
            ids.len()
        )));
    }
    let interior = 1..ids.len() - 1;

    let mut out = Corrupted { input: ids.to_vec(), target: ids.to_vec(), flags: vec![false; ids.len()] };
    let mut apply = |pos: usize, rng: &mut ChaCha8Rng| {
        out.flags[pos] = true;
        let u: f64 = rng.gen();
        if u < p_mask {
            out.input[pos] = MASK;
        } else if u < p_mask + p_rand {
            out.input[pos] = rng.gen_range(FIRST_RESIDUE..VOCAB_SIZE as u32);
        }
    };
    let mut any = false;
    for pos in interior.clone() {
        if rng.gen::<f64>() < rate {
            apply(pos, rng);
            any = true;
        }
    }
    if !any {
        let pos = rng.gen_range(interior.start..interior.end);
        apply(pos, rng);
    }
    Ok(out)
}

/// Assembles corrupted sequences into a rectangular batch, right-padded
/// with [PAD]. Sequences longer than `max_len` are truncated to their
/// first `max_len - 1` tokens plus a re-appended [SEP]; loss flags on
/// truncated positions are dropped with them, so a caller that must
/// guarantee a non-empty loss should truncate before corrupting.
pub fn collate(rows: &[Corrupted], max_len: usize) -> Result<MaskedBatch> {
    if rows.is_empty() {
        return Err(Error::InvalidArgument("cannot collate an empty batch".into()));
    }
    if max_len < 3 {
        return Err(Error::InvalidArgument(format!(
            "max_len {max_len} cannot hold [CLS], a residue, and [SEP]"
        )));
    }
    let batch = rows.len();
    let mut out = MaskedBatch {
        batch,
        max_len,
        input_ids: vec![PAD; batch * max_len],
        attention_mask: vec![false; batch * max_len],
        target_ids: vec![PAD; batch * max_len],
        target_mask: vec![false; batch * max_len],
        lengths: Vec::with_capacity(batch),
    };
    for (r, row) in rows.iter().enumerate() {
        if row.input.len() != row.target.len() || row.input.len() != row.flags.len() {
            return Err(Error::InvalidArgument(format!(
                "row {r} has mismatched input/target/flags lengths"
            )));
        }
        let len = row.input.len().min(max_len);
        let truncated = row.input.len() > max_len;
        let base = r * max_len;
        for p in 0..len {
            out.input_ids[base + p] = row.input[p];
            out.attention_mask[base + p] = true;
            out.target_ids[base + p] = row.target[p];
            out.target_mask[base + p] = row.flags[p];
        }
        if truncated {
            let sep = base + len - 1;
            out.input_ids[sep] = crate::tokenizer::SEP;
            out.target_ids[sep] = crate::tokenizer::SEP;
            out.target_mask[sep] = false;
        }
        out.lengths.push(len);
    }
    Ok(out)
}
