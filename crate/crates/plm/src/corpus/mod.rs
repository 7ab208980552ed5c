//! Data ingestion: FASTA and task-record parsing, family-aware splits,
//! Hamming distances, and synthetic corpus generation.
//!
//! Task records are line-delimited `key=value` text rather than a binary
//! database: inspectable, diff-able, and sufficient at desk scale. The
//! exact grammar lives in FORMATS.md at the repository root.

mod synthetic;

pub use synthetic::{gen_synthetic, GenParams, SyntheticTask};

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tokenizer;

/// Per-residue label alphabet for the 3-class secondary structure task:
/// helix, strand, other.
pub const SS3_ALPHABET: &str = "HEC";

/// Per-residue label alphabet for the 8-class task: 3-10 helix, alpha
/// helix, pi helix, strand, bridge, turn, bend, other.
pub const SS8_ALPHABET: &str = "GHIEBTSC";

/// Task payload attached to a record.
#[derive(Debug, Clone, PartialEq)]
pub enum Label {
    /// Per-token label string (secondary structure), same length as the
    /// sequence.
    Tokens(String),
    /// Sequence-level class index (remote homology fold).
    Class(usize),
    /// Residue-pair contacts with a resolved-pair mask.
    Contacts(ContactMap),
    /// Real-valued target (fluorescence / stability analog).
    Value(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProteinRecord {
    pub id: String,
    pub family: Option<String>,
    pub sequence: String,
    pub label: Option<Label>,
}

/// Which label field a task-record file carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    Ss3,
    Ss8,
    Fold { num_classes: usize },
    Contact,
    Value,
}

impl TaskKind {
    pub fn label_field(&self) -> &'static str {
        match self {
            TaskKind::Ss3 => "ss3",
            TaskKind::Ss8 => "ss8",
            TaskKind::Fold { .. } => "fold",
            TaskKind::Contact => "contacts",
            TaskKind::Value => "value",
        }
    }
}

/// Symmetric boolean contact matrix plus a resolved-pair mask. Invariants
/// held by construction: both matrices symmetric, diagonal contacts
/// impossible, and every contact is a valid pair.
#[derive(Debug, Clone, PartialEq)]
pub struct ContactMap {
    size: usize,
    contact: Vec<bool>,
    valid: Vec<bool>,
}

impl ContactMap {
    pub fn new(size: usize) -> Self {
        ContactMap { size, contact: vec![false; size * size], valid: vec![false; size * size] }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn contact(&self, i: usize, j: usize) -> bool {
        self.contact[i * self.size + j]
    }

    pub fn valid(&self, i: usize, j: usize) -> bool {
        self.valid[i * self.size + j]
    }

    fn check_pair(&self, i: usize, j: usize) -> Result<()> {
        if i >= self.size || j >= self.size {
            return Err(Error::Index {
                op: "contact_map",
                details: format!("pair ({i}, {j}) exceeds size {}", self.size),
            });
        }
        if i == j {
            return Err(Error::InvalidArgument(format!(
                "contact map diagonal ({i}, {i}) must stay false"
            )));
        }
        Ok(())
    }

    /// Marks a symmetric contact; the pair becomes valid as well.
    pub fn set_contact(&mut self, i: usize, j: usize) -> Result<()> {
        self.check_pair(i, j)?;
        self.contact[i * self.size + j] = true;
        self.contact[j * self.size + i] = true;
        self.valid[i * self.size + j] = true;
        self.valid[j * self.size + i] = true;
        Ok(())
    }

    pub fn set_valid(&mut self, i: usize, j: usize) -> Result<()> {
        self.check_pair(i, j)?;
        self.valid[i * self.size + j] = true;
        self.valid[j * self.size + i] = true;
        Ok(())
    }

    pub fn set_all_valid(&mut self) {
        for i in 0..self.size {
            for j in 0..self.size {
                if i != j {
                    self.valid[i * self.size + j] = true;
                }
            }
        }
    }

    pub fn all_valid(&self) -> bool {
        (0..self.size).all(|i| (0..self.size).all(|j| i == j || self.valid(i, j)))
    }

    /// Upper-triangle contact pairs, ascending.
    pub fn contact_pairs(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for i in 0..self.size {
            for j in (i + 1)..self.size {
                if self.contact(i, j) {
                    out.push((i, j));
                }
            }
        }
        out
    }

    /// Upper-triangle valid pairs, ascending.
    pub fn valid_pairs(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for i in 0..self.size {
            for j in (i + 1)..self.size {
                if self.valid(i, j) {
                    out.push((i, j));
                }
            }
        }
        out
    }
}

/// Four pairwise-disjoint record lists. `family_split` fills holdout with
/// whole families and scatters the rest into train/valid; `test` is left
/// for task-specific protocols (the mutation landscape fills it by
/// Hamming distance, not here).
#[derive(Debug, Default)]
pub struct DatasetSplit {
    pub train: Vec<ProteinRecord>,
    pub valid: Vec<ProteinRecord>,
    pub test: Vec<ProteinRecord>,
    pub holdout: Vec<ProteinRecord>,
}

/// Parses FASTA text. Each `>` header opens a record: the first token is
/// the id, an optional `family=NAME` token sets the family, and any other
/// header tokens are ignored as free-form description. Sequence lines are
/// concatenated with whitespace stripped.
pub fn parse_fasta(input: &str) -> Result<Vec<ProteinRecord>> {
    let mut records: Vec<ProteinRecord> = Vec::new();
    let mut open_header_line = 0usize;
    for (idx, line) in input.lines().enumerate() {
        let line_no = idx + 1;
        let trimmed = line.trim();
        if let Some(header) = trimmed.strip_prefix('>') {
            if let Some(rec) = records.last() {
                if rec.sequence.is_empty() {
                    return Err(Error::Parse {
                        line: open_header_line,
                        msg: format!("record '{}' has an empty sequence", rec.id),
                    });
                }
            }
            let mut tokens = header.split_whitespace();
            let id = tokens
                .next()
                .ok_or_else(|| Error::Parse { line: line_no, msg: "header has no id".into() })?
                .to_string();
            let mut family = None;
            for tok in tokens {
                if let Some(name) = tok.strip_prefix("family=") {
                    family = Some(name.to_string());
                }
            }
            records.push(ProteinRecord { id, family, sequence: String::new(), label: None });
            open_header_line = line_no;
        } else if !trimmed.is_empty() {
            match records.last_mut() {
                Some(rec) => {
                    rec.sequence.extend(trimmed.chars().filter(|c| !c.is_whitespace()))
                }
                None => {
                    return Err(Error::Parse {
                        line: line_no,
                        msg: "sequence data before first '>' header".into(),
                    })
                }
            }
        }
    }
    if let Some(rec) = records.last() {
        if rec.sequence.is_empty() {
            return Err(Error::Parse {
                line: open_header_line,
                msg: format!("record '{}' has an empty sequence", rec.id),
            });
        }
    }
    Ok(records)
}

/// Renders records as FASTA, the inverse of [`parse_fasta`] for records
/// without labels.
pub fn write_fasta(records: &[ProteinRecord]) -> String {
    let mut out = String::new();
    for rec in records {
        out.push('>');
        out.push_str(&rec.id);
        if let Some(fam) = &rec.family {
            out.push_str(" family=");
            out.push_str(fam);
        }
        out.push('\n');
        out.push_str(&rec.sequence);
        out.push('\n');
    }
    out
}

fn parse_pair_list(value: &str, line: usize) -> Result<Vec<(usize, usize)>> {
    if value == "none" {
        return Ok(Vec::new());
    }
    let mut pairs = Vec::new();
    for part in value.split(';') {
        let (i, j) = part.split_once(':').ok_or_else(|| Error::Parse {
            line,
            msg: format!("pair '{part}' is not of the form i:j"),
        })?;
        let i: usize = i.parse().map_err(|_| Error::Parse {
            line,
            msg: format!("pair index '{i}' is not an integer"),
        })?;
        let j: usize = j.parse().map_err(|_| Error::Parse {
            line,
            msg: format!("pair index '{j}' is not an integer"),
        })?;
        pairs.push((i, j));
    }
    Ok(pairs)
}

fn pair_list(pairs: &[(usize, usize)]) -> String {
    if pairs.is_empty() {
        return "none".into();
    }
    pairs.iter().map(|&(i, j)| format!("{i}:{j}")).collect::<Vec<_>>().join(";")
}

/// Parses line-delimited task records: one record per line, whitespace
/// separated `key=value` fields. Required fields are `id`, `sequence`,
/// and the task's label field; `family` is optional; `valid_mask`
/// (resolved pairs, defaulting to all) may accompany `contacts`.
/// Unknown keys are per-line errors so typos cannot silently drop
/// labels.
pub fn parse_task_records(input: &str, task: TaskKind) -> Result<Vec<ProteinRecord>> {
    let mut records = Vec::new();
    for (idx, line) in input.lines().enumerate() {
        let line_no = idx + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        records.push(parse_task_line(trimmed, line_no, task)?);
    }
    Ok(records)
}

fn parse_task_line(line: &str, line_no: usize, task: TaskKind) -> Result<ProteinRecord> {
    let mut id = None;
    let mut family = None;
    let mut sequence = None;
    let mut label_raw = None;
    let mut valid_raw = None;
    for tok in line.split_whitespace() {
        let (key, value) = tok.split_once('=').ok_or_else(|| Error::Parse {
            line: line_no,
            msg: format!("field '{tok}' is not of the form key=value"),
        })?;
        let slot = match key {
            "id" => &mut id,
            "family" => &mut family,
            "sequence" => &mut sequence,
            "valid_mask" if task == TaskKind::Contact => &mut valid_raw,
            k if k == task.label_field() => &mut label_raw,
            _ => {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("unknown field '{key}' for {} records", task.label_field()),
                })
            }
        };
        if slot.replace(value.to_string()).is_some() {
            return Err(Error::Parse { line: line_no, msg: format!("duplicate field '{key}'") });
        }
    }
    let id = id.ok_or_else(|| Error::Parse { line: line_no, msg: "missing field 'id'".into() })?;
    let sequence = sequence
        .ok_or_else(|| Error::Parse { line: line_no, msg: "missing field 'sequence'".into() })?;
    if sequence.is_empty() {
        return Err(Error::Parse { line: line_no, msg: "empty sequence".into() });
    }
    let label_raw = label_raw.ok_or_else(|| Error::Parse {
        line: line_no,
        msg: format!("missing field '{}'", task.label_field()),
    })?;
    let seq_len = sequence.chars().count();

    let label = match task {
        TaskKind::Ss3 | TaskKind::Ss8 => {
            let alphabet = if task == TaskKind::Ss3 { SS3_ALPHABET } else { SS8_ALPHABET };
            if label_raw.chars().count() != seq_len {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!(
                        "label length {} does not match sequence length {seq_len}",
                        label_raw.chars().count()
                    ),
                });
            }
            if let Some(bad) = label_raw.chars().find(|c| !alphabet.contains(*c)) {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("label symbol '{bad}' not in alphabet {alphabet}"),
                });
            }
            Label::Tokens(label_raw)
        }
        TaskKind::Fold { num_classes } => {
            let class: usize = label_raw.parse().map_err(|_| Error::Parse {
                line: line_no,
                msg: format!("fold '{label_raw}' is not an integer"),
            })?;
            if class >= num_classes {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("class index {class} out of range for {num_classes} classes"),
                });
            }
            Label::Class(class)
        }
        TaskKind::Contact => {
            let mut map = ContactMap::new(seq_len);
            match valid_raw.as_deref() {
                None | Some("all") => map.set_all_valid(),
                Some(v) => {
                    for (i, j) in parse_pair_list(v, line_no)? {
                        map.set_valid(i, j).map_err(|e| Error::Parse {
                            line: line_no,
                            msg: e.to_string(),
                        })?;
                    }
                }
            }
            for (i, j) in parse_pair_list(&label_raw, line_no)? {
                if i >= seq_len || j >= seq_len {
                    return Err(Error::Parse {
                        line: line_no,
                        msg: format!("contact ({i}, {j}) exceeds sequence length {seq_len}"),
                    });
                }
                map.set_contact(i, j)
                    .map_err(|e| Error::Parse { line: line_no, msg: e.to_string() })?;
            }
            Label::Contacts(map)
        }
        TaskKind::Value => {
            let v: f64 = label_raw.parse().map_err(|_| Error::Parse {
                line: line_no,
                msg: format!("value '{label_raw}' is not a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse { line: line_no, msg: "value must be finite".into() });
            }
            Label::Value(v)
        }
    };
    Ok(ProteinRecord { id, family, sequence, label: Some(label) })
}

/// Serializes records in the grammar [`parse_task_records`] accepts; the
/// two are inverse on valid record sets. Records whose label does not
/// match the task kind are an error.
pub fn serialize_task_records(records: &[ProteinRecord], task: TaskKind) -> Result<String> {
    let mut out = String::new();
    for rec in records {
        out.push_str(&format!("id={}", rec.id));
        if let Some(fam) = &rec.family {
            out.push_str(&format!(" family={fam}"));
        }
        out.push_str(&format!(" sequence={}", rec.sequence));
        let mismatch = || {
            Error::InvalidArgument(format!(
                "record '{}' does not carry a {} label",
                rec.id,
                task.label_field()
            ))
        };
        match (&rec.label, task) {
            (Some(Label::Tokens(s)), TaskKind::Ss3 | TaskKind::Ss8) => {
                out.push_str(&format!(" {}={s}", task.label_field()));
            }
            (Some(Label::Class(c)), TaskKind::Fold { num_classes }) => {
                if *c >= num_classes {
                    return Err(mismatch());
                }
                out.push_str(&format!(" fold={c}"));
            }
            (Some(Label::Contacts(map)), TaskKind::Contact) => {
                out.push_str(&format!(" contacts={}", pair_list(&map.contact_pairs())));
                if map.all_valid() {
                    out.push_str(" valid_mask=all");
                } else {
                    out.push_str(&format!(" valid_mask={}", pair_list(&map.valid_pairs())));
                }
            }
            (Some(Label::Value(v)), TaskKind::Value) => {
                out.push_str(&format!(" value={v}"));
            }
            _ => return Err(mismatch()),
        }
        out.push('\n');
    }
    Ok(out)
}

/// Splits records into holdout (whole families, greedily filled in
/// seed-shuffled family order until `holdout_frac` of records is reached)
/// and a per-record train/valid split of the remainder. Deterministic
/// given the seed. `test` is left empty.
pub fn family_split(
    records: Vec<ProteinRecord>,
    holdout_frac: f64,
    valid_frac: f64,
    seed: u64,
) -> Result<DatasetSplit> {
    let mut ids = HashSet::new();
    let mut families = Vec::new();
    let mut seen = HashSet::new();
    for rec in &records {
        if !ids.insert(rec.id.clone()) {
            return Err(Error::InvalidArgument(format!("duplicate record id '{}'", rec.id)));
        }
        let fam = rec.family.as_ref().ok_or_else(|| {
            Error::InvalidArgument(format!("record '{}' has no family", rec.id))
        })?;
        if seen.insert(fam.clone()) {
            families.push(fam.clone());
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    families.shuffle(&mut rng);

    let target = (holdout_frac * records.len() as f64).round() as usize;
    let mut holdout_families = HashSet::new();
    let mut holdout_count = 0usize;
    for fam in &families {
        if holdout_count >= target {
            break;
        }
        holdout_count += records.iter().filter(|r| r.family.as_deref() == Some(fam)).count();
        holdout_families.insert(fam.clone());
    }

    let mut split = DatasetSplit::default();
    for rec in records {
        let fam = rec.family.as_deref().expect("validated above");
        if holdout_families.contains(fam) {
            split.holdout.push(rec);
        } else if rng.gen::<f64>() < valid_frac {
            split.valid.push(rec);
        } else {
            split.train.push(rec);
        }
    }
    Ok(split)
}

/// Count of differing positions between equal-length residue strings.
pub fn hamming_distance(a: &str, b: &str) -> Result<usize> {
    let (la, lb) = (a.chars().count(), b.chars().count());
    if la != lb {
        return Err(Error::InvalidArgument(format!(
            "hamming distance needs equal lengths, got {la} and {lb}"
        )));
    }
    Ok(a.chars().zip(b.chars()).filter(|(x, y)| x != y).count())
}

/// Outcome of [`truncate_records`], for caller-side logging.
#[derive(Debug, Default, PartialEq, Eq)]
pub struct TruncationOutcome {
    pub truncated_records: usize,
    pub dropped_pairs: usize,
}

/// Truncates sequences to `max_residues`, shortening per-token labels in
/// lockstep and dropping contact pairs that touch removed positions.
pub fn truncate_records(records: &mut [ProteinRecord], max_residues: usize) -> TruncationOutcome {
    let mut outcome = TruncationOutcome::default();
    for rec in records.iter_mut() {
        let len = rec.sequence.chars().count();
        if len <= max_residues {
            continue;
        }
        outcome.truncated_records += 1;
        rec.sequence = rec.sequence.chars().take(max_residues).collect();
        match &mut rec.label {
            Some(Label::Tokens(s)) => *s = s.chars().take(max_residues).collect(),
            Some(Label::Contacts(map)) => {
                let mut cut = ContactMap::new(max_residues);
                let mut kept = 0usize;
                for i in 0..max_residues {
                    for j in (i + 1)..max_residues {
                        if map.valid(i, j) {
                            cut.set_valid(i, j).expect("indices in range");
                        }
                        if map.contact(i, j) {
                            cut.set_contact(i, j).expect("indices in range");
                            kept += 1;
                        }
                    }
                }
                outcome.dropped_pairs += map.contact_pairs().len() - kept;
                *map = cut;
            }
            _ => {}
        }
    }
    outcome
}

/// Maps a secondary-structure label character to its class index in the
/// given alphabet.
pub fn ss_class_index(alphabet: &str, c: char) -> Result<usize> {
    alphabet.chars().position(|a| a == c).ok_or_else(|| {
        Error::InvalidArgument(format!("label symbol '{c}' not in alphabet {alphabet}"))
    })
}

/// Derives the per-residue rule label used by the synthetic secondary
/// structure tasks: class = residue id modulo the class count. A model
/// that learns residue identity reads the label straight off.
pub fn rule_label(sequence: &str, alphabet: &str) -> String {
    let n = alphabet.chars().count();
    sequence
        .chars()
        .map(|c| {
            let rid = tokenizer::residue_id(c).map(|id| (id - tokenizer::FIRST_RESIDUE) as usize);
            let class = rid.unwrap_or(0) % n;
            alphabet.chars().nth(class).expect("class < alphabet length")
        })
        .collect()
}
