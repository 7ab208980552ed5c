//! Fixed amino-acid vocabulary.
//!
//! Five special tokens occupy ids 0..5, followed by the twenty standard
//! residues and the four extended codes (B, Z, X, U, O) in a frozen order.
//! The table never changes at runtime, so ids are stable across checkpoints.

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const CLS: u32 = 2;
pub const SEP: u32 = 3;
pub const MASK: u32 = 4;

/// First residue id; residues occupy `5..30`.
pub const FIRST_RESIDUE: u32 = 5;

/// Residue alphabet in id order: id of `RESIDUES[i]` is `5 + i`.
pub const RESIDUES: [char; 25] = [
    'A', 'C', 'D', 'E', 'F', 'G', 'H', 'I', 'K', 'L', 'M', 'N', 'P', 'Q', 'R', 'S', 'T', 'V',
    'W', 'Y', 'B', 'Z', 'X', 'U', 'O',
];

pub const VOCAB_SIZE: usize = 30;

const SPECIALS: [&str; 5] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];

/// Printable token for an id, for the vocab listing and error messages.
pub fn token_text(id: u32) -> Result<String> {
    if (id as usize) < SPECIALS.len() {
        Ok(SPECIALS[id as usize].to_string())
    } else if (id as usize) < VOCAB_SIZE {
        Ok(RESIDUES[id as usize - 5].to_string())
    } else {
        Err(Error::Index {
            op: "token_text",
            details: format!("id {id} exceeds vocabulary size {VOCAB_SIZE}"),
        })
    }
}

/// Id of a residue character, or None for anything outside the alphabet.
/// Matching is case-sensitive: lowercase is not a residue.
pub fn residue_id(c: char) -> Option<u32> {
    RESIDUES.iter().position(|&r| r == c).map(|i| i as u32 + FIRST_RESIDUE)
}

/// Encodes a raw sequence as `[CLS] residues [SEP]`. Characters outside
/// the alphabet map to `[UNK]`; encoding never produces `[PAD]` or
/// `[MASK]`. Empty input is an error because downstream batches require
/// at least one scoring position.
pub fn encode(text: &str) -> Result<Vec<u32>> {
    if text.is_empty() {
        return Err(Error::InvalidArgument("cannot encode an empty sequence".into()));
    }
    let mut ids = Vec::with_capacity(text.chars().count() + 2);
    ids.push(CLS);
    for c in text.chars() {
        ids.push(residue_id(c).unwrap_or(UNK));
    }
    ids.push(SEP);
    Ok(ids)
}

/// Decodes ids back to residue text. Special tokens are dropped and
/// `[UNK]` renders as `X`, so decode(encode(s)) == s for any s over the
/// alphabet. Ids outside the vocabulary are an error.
pub fn decode(ids: &[u32]) -> Result<String> {
    let mut out = String::with_capacity(ids.len());
    for &id in ids {
        if id as usize >= VOCAB_SIZE {
            return Err(Error::Index {
                op: "decode",
                details: format!("id {id} exceeds vocabulary size {VOCAB_SIZE}"),
            });
        }
        if id == UNK {
            out.push('X');
        } else if id >= FIRST_RESIDUE {
            out.push(RESIDUES[id as usize - 5]);
        }
    }
    Ok(out)
}
