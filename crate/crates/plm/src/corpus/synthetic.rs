//! Synthetic desk-scale corpora. Each generator is a pure function of
//! (params, seed) and produces data with a planted, learnable signal so
//! the training pipeline can be validated end to end in minutes.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{rule_label, ContactMap, Label, ProteinRecord, SS3_ALPHABET, SS8_ALPHABET};
use crate::error::{Error, Result};
use crate::tokenizer;

/// Which synthetic corpus to generate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyntheticTask {
    /// Unlabeled pretraining corpus: random sequences, each containing a
    /// fixed planted k-mer at a random offset, with family labels. MLM
    /// can beat chance on motif positions by learning the k-mer.
    Motif,
    /// Per-residue 3-class labels derived from residue identity.
    Ss3,
    /// Per-residue 8-class labels derived from residue identity.
    Ss8,
    /// Sequence classification: one planted motif per class, class index
    /// recoverable only by recognizing which motif is present.
    Homology,
    /// Contacts at anti-diagonal pairs (i, L-1-i) wherever the residues
    /// at those positions are equal, a rule learnable from sequence
    /// alone. Equality is planted with `match_prob` to control density.
    Contact,
    /// Mutation landscape around a parent sequence: train variants at
    /// Hamming distance 1..=3, test variants at 4..=6, value a fixed
    /// smooth function of the mutated positions.
    Landscape,
}

/// Generation parameters. `count` excludes the landscape's parent record
/// and test block, which are controlled by `landscape_test_count`.
#[derive(Debug, Clone)]
pub struct GenParams {
    pub count: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Planted k-mer for the motif corpus and seed motif length for
    /// homology classes.
    pub motif: String,
    /// Family labels cycle over this many names in the motif corpus.
    pub num_families: usize,
    /// Class count for the homology task.
    pub num_classes: usize,
    /// Probability that an anti-diagonal pair is forced equal in the
    /// contact corpus.
    pub match_prob: f64,
    /// Held-out variants (Hamming distance >= 4) for the landscape task.
    pub landscape_test_count: usize,
}

impl Default for GenParams {
    fn default() -> Self {
        GenParams {
            count: 64,
            min_len: 20,
            max_len: 40,
            motif: "MKVLA".into(),
            num_families: 8,
            num_classes: 8,
            match_prob: 0.7,
            landscape_test_count: 0,
        }
    }
}

/// The twenty standard residues; synthetic sequences draw only from
/// these so rule labels never hit the rare-residue tail.
fn standard_residues() -> &'static [char] {
    &tokenizer::RESIDUES[..20]
}

fn random_residue(rng: &mut ChaCha8Rng) -> char {
    standard_residues()[rng.gen_range(0..20)]
}

fn random_sequence(rng: &mut ChaCha8Rng, len: usize) -> String {
    (0..len).map(|_| random_residue(rng)).collect()
}

fn check_common(params: &GenParams) -> Result<()> {
    if params.min_len == 0 || params.min_len > params.max_len {
        return Err(Error::InvalidArgument(format!(
            "length range {}..={} is empty",
            params.min_len, params.max_len
        )));
    }
    Ok(())
}

/// Contacts implied by the anti-diagonal rule: (i, L-1-i) is a contact
/// exactly when the residues at i and L-1-i are equal (i < L-1-i). All
/// pairs are valid.
pub fn anti_diagonal_contacts(sequence: &str) -> ContactMap {
    let chars: Vec<char> = sequence.chars().collect();
    let len = chars.len();
    let mut map = ContactMap::new(len);
    map.set_all_valid();
    for i in 0..len / 2 {
        let j = len - 1 - i;
        if chars[i] == chars[j] {
            map.set_contact(i, j).expect("i < j < len");
        }
    }
    map
}

/// Smooth fitness landscape: each mutated position contributes a fixed
/// sinusoidal weight, so the value depends only on which positions were
/// mutated.
pub fn landscape_value(mutated_positions: &[usize]) -> f64 {
    mutated_positions.iter().map(|&p| (0.7 * p as f64 + 0.3).sin()).sum()
}

/// Generates a synthetic corpus. Deterministic given (params, seed).
pub fn gen_synthetic(
    task: SyntheticTask,
    params: &GenParams,
    seed: u64,
) -> Result<Vec<ProteinRecord>> {
    check_common(params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match task {
        SyntheticTask::Motif => gen_motif(params, &mut rng),
        SyntheticTask::Ss3 => gen_rule_labels(params, &mut rng, SS3_ALPHABET),
        SyntheticTask::Ss8 => gen_rule_labels(params, &mut rng, SS8_ALPHABET),
        SyntheticTask::Homology => gen_homology(params, &mut rng),
        SyntheticTask::Contact => gen_contact(params, &mut rng),
        SyntheticTask::Landscape => gen_landscape(params, &mut rng),
    }
}

fn plant(sequence: &mut String, motif: &str, offset: usize) {
    let mut chars: Vec<char> = sequence.chars().collect();
    for (k, m) in motif.chars().enumerate() {
        chars[offset + k] = m;
    }
    *sequence = chars.into_iter().collect();
}

fn gen_motif(params: &GenParams, rng: &mut ChaCha8Rng) -> Result<Vec<ProteinRecord>> {
    let k = params.motif.chars().count();
    if k == 0 || k > params.min_len {
        return Err(Error::InvalidArgument(format!(
            "motif length {k} does not fit in minimum sequence length {}",
            params.min_len
        )));
    }
    if params.num_families == 0 {
        return Err(Error::InvalidArgument("num_families must be positive".into()));
    }
    let mut out = Vec::with_capacity(params.count);
    for n in 0..params.count {
        let len = rng.gen_range(params.min_len..=params.max_len);
        let mut seq = random_sequence(rng, len);
        let offset = rng.gen_range(0..=len - k);
        plant(&mut seq, &params.motif, offset);
        out.push(ProteinRecord {
            id: format!("m{n:05}"),
            family: Some(format!("F{:03}", n % params.num_families)),
            sequence: seq,
            label: None,
        });
    }
    Ok(out)
}

fn gen_rule_labels(
    params: &GenParams,
    rng: &mut ChaCha8Rng,
    alphabet: &str,
) -> Result<Vec<ProteinRecord>> {
    let mut out = Vec::with_capacity(params.count);
    for n in 0..params.count {
        let len = rng.gen_range(params.min_len..=params.max_len);
        let seq = random_sequence(rng, len);
        let label = rule_label(&seq, alphabet);
        out.push(ProteinRecord {
            id: format!("s{n:05}"),
            family: None,
            sequence: seq,
            label: Some(Label::Tokens(label)),
        });
    }
    Ok(out)
}

fn gen_homology(params: &GenParams, rng: &mut ChaCha8Rng) -> Result<Vec<ProteinRecord>> {
    let k = params.motif.chars().count();
    if k == 0 || k > params.min_len {
        return Err(Error::InvalidArgument(format!(
            "motif length {k} does not fit in minimum sequence length {}",
            params.min_len
        )));
    }
    if params.num_classes == 0 {
        return Err(Error::InvalidArgument("num_classes must be positive".into()));
    }
    // One distinct k-mer per class, drawn up front so class identity is
    // a pure function of the planted motif.
    let mut motifs: Vec<String> = Vec::with_capacity(params.num_classes);
    while motifs.len() < params.num_classes {
        let m = random_sequence(rng, k);
        if !motifs.contains(&m) {
            motifs.push(m);
        }
    }
    let mut out = Vec::with_capacity(params.count);
    for n in 0..params.count {
        let class = n % params.num_classes;
        let len = rng.gen_range(params.min_len..=params.max_len);
        let mut seq = random_sequence(rng, len);
        let offset = rng.gen_range(0..=len - k);
        plant(&mut seq, &motifs[class], offset);
        out.push(ProteinRecord {
            id: format!("h{n:05}"),
            family: Some(format!("C{class}")),
            sequence: seq,
            label: Some(Label::Class(class)),
        });
    }
    Ok(out)
}

fn gen_contact(params: &GenParams, rng: &mut ChaCha8Rng) -> Result<Vec<ProteinRecord>> {
    if !(0.0..=1.0).contains(&params.match_prob) {
        return Err(Error::InvalidArgument(format!(
            "match_prob {} outside [0, 1]",
            params.match_prob
        )));
    }
    let mut out = Vec::with_capacity(params.count);
    for n in 0..params.count {
        let len = rng.gen_range(params.min_len..=params.max_len);
        let mut chars: Vec<char> = random_sequence(rng, len).chars().collect();
        for i in 0..len / 2 {
            if rng.gen::<f64>() < params.match_prob {
                chars[len - 1 - i] = chars[i];
            }
        }
        let seq: String = chars.into_iter().collect();
        let map = anti_diagonal_contacts(&seq);
        out.push(ProteinRecord {
            id: format!("c{n:05}"),
            family: None,
            sequence: seq,
            label: Some(Label::Contacts(map)),
        });
    }
    Ok(out)
}

fn gen_landscape(params: &GenParams, rng: &mut ChaCha8Rng) -> Result<Vec<ProteinRecord>> {
    let len = params.min_len;
    if len < 6 {
        return Err(Error::InvalidArgument(format!(
            "landscape needs sequences of at least 6 residues, got {len}"
        )));
    }
    let parent: Vec<char> = random_sequence(rng, len).chars().collect();
    let mut out = Vec::with_capacity(1 + params.count + params.landscape_test_count);
    out.push(ProteinRecord {
        id: "parent".into(),
        family: None,
        sequence: parent.iter().collect(),
        label: Some(Label::Value(0.0)),
    });
    let emit = |rng: &mut ChaCha8Rng, n: usize, distance: usize| {
        let mut positions: Vec<usize> = Vec::with_capacity(distance);
        while positions.len() < distance {
            let p = rng.gen_range(0..len);
            if !positions.contains(&p) {
                positions.push(p);
            }
        }
        positions.sort_unstable();
        let mut chars = parent.clone();
        for &p in &positions {
            loop {
                let c = random_residue(rng);
                if c != parent[p] {
                    chars[p] = c;
                    break;
                }
            }
        }
        ProteinRecord {
            id: format!("v{n:05}"),
            family: None,
            sequence: chars.into_iter().collect(),
            label: Some(Label::Value(landscape_value(&positions))),
        }
    };
    for n in 0..params.count {
        let d = 1 + n % 3;
        out.push(emit(rng, n, d));
    }
    for t in 0..params.landscape_test_count {
        let d = 4 + t % 3;
        out.push(emit(rng, params.count + t, d));
    }
    Ok(out)
}
