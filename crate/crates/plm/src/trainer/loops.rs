//! The pretrain and finetune loops plus batched inference helpers used
//! by evaluation. Every loop is a pure function of its seeds: data
//! order, corruption, and dropout each draw from their own stream, so
//! serial runs are bitwise reproducible.

use std::time::Instant;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{adam_step, clip_global_norm, lr_at, AdamHyper, OptimizerState, Schedule, TrainReport};
use crate::corpus::{Label, ProteinRecord, SS3_ALPHABET, SS8_ALPHABET};
use crate::error::{Error, Result};
use crate::masking::{collate, corrupt, Corrupted, MaskedBatch};
use crate::model::{Bound, EncoderOutput, HeadKind, Mode, Model, ModelConfig};
use crate::tensor::{sigmoid, Scalar, Tape, TensorId};
use crate::tokenizer;

const ORDER_STREAM: u64 = 0x9e37_79b9_7f4a_7c15;
const CORRUPT_STREAM: u64 = 0xc2b2_ae3d_27d4_eb4f;
const DROPOUT_STREAM: u64 = 0x1656_67b1_9e37_79f9;
const EVAL_STREAM: u64 = 0x2545_f491_4f6c_dd1d;

/// Knobs shared by pretraining and finetuning. `max_len` bounds the
/// padded batch width; longer sequences are truncated at ingestion.
#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub schedule: Schedule,
    pub batch_size: usize,
    pub max_len: usize,
    pub mask_rate: f64,
    pub proportions: (f64, f64, f64),
    pub adam: AdamHyper,
    pub clip_norm: f64,
    pub report_every: usize,
    pub seed: u64,
    /// Stop early once a report-row loss drops below this value.
    pub stop_below: Option<f64>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            schedule: Schedule { peak: 1e-3, warmup_steps: 100, total_steps: 1000 },
            batch_size: 8,
            max_len: 128,
            mask_rate: 0.15,
            proportions: (0.8, 0.1, 0.1),
            adam: AdamHyper::default(),
            clip_norm: 1.0,
            report_every: 100,
            seed: 0,
            stop_below: None,
        }
    }
}

impl TrainOptions {
    fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        if self.batch_size == 0 || self.report_every == 0 {
            return Err(Error::Config("batch_size and report_every must be positive".into()));
        }
        if self.max_len < 3 {
            return Err(Error::Config(format!(
                "max_len {} cannot hold [CLS], a residue, and [SEP]",
                self.max_len
            )));
        }
        Ok(())
    }
}

/// Truncation at ingestion: keep [CLS] plus the first max_len - 2
/// residues and re-append [SEP].
fn truncate_tokens(mut ids: Vec<u32>, max_len: usize) -> Vec<u32> {
    if ids.len() > max_len {
        ids.truncate(max_len - 1);
        ids.push(tokenizer::SEP);
    }
    ids
}

fn encode_records(records: &[ProteinRecord], max_len: usize) -> Result<Vec<Vec<u32>>> {
    records
        .iter()
        .map(|r| Ok(truncate_tokens(tokenizer::encode(&r.sequence)?, max_len)))
        .collect()
}

/// Endless shuffled index stream: every epoch is a fresh permutation,
/// batches may straddle epoch boundaries so they stay full-size.
struct IndexStream {
    n: usize,
    queue: Vec<usize>,
    rng: ChaCha8Rng,
}

impl IndexStream {
    fn new(n: usize, seed: u64) -> Self {
        IndexStream { n, queue: Vec::new(), rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.queue.is_empty() {
                let mut epoch: Vec<usize> = (0..self.n).collect();
                epoch.shuffle(&mut self.rng);
                epoch.reverse();
                self.queue = epoch;
            }
            out.push(self.queue.pop().expect("refilled above"));
        }
        out
    }
}

fn collect_grads<T: Scalar>(
    tape: &Tape<'_, T>,
    bound: &Bound,
    names: &[String],
) -> IndexMap<String, Vec<T>> {
    let mut grads = IndexMap::new();
    for name in names {
        if let Some(g) = tape.grad(bound.id(name)) {
            grads.insert(name.clone(), g.to_vec());
        }
    }
    grads
}

fn masked_batch_loss<'m, T: Scalar>(
    model: &'m Model<T>,
    tape: &mut Tape<'m, T>,
    batch: &MaskedBatch,
    mode: Mode,
) -> Result<(TensorId, Bound)> {
    let bound = model.bind(tape);
    let out = model.encode(
        tape,
        &bound,
        &batch.input_ids,
        &batch.attention_mask,
        batch.batch,
        batch.max_len,
        mode,
    )?;
    let logits = model.mlm_logits(tape, &bound, &out)?;
    let loss = tape.cross_entropy_masked(logits, &batch.target_ids, &batch.target_mask)?;
    Ok((loss, bound))
}

fn corrupt_batch(
    tokens: &[Vec<u32>],
    indices: &[usize],
    opts: &TrainOptions,
    rng: &mut ChaCha8Rng,
) -> Result<MaskedBatch> {
    let rows: Vec<Corrupted> = indices
        .iter()
        .map(|&i| corrupt(&tokens[i], opts.mask_rate, opts.proportions, rng))
        .collect::<Result<_>>()?;
    collate(&rows, opts.max_len)
}

fn eval_mlm_on_tokens<T: Scalar>(
    model: &Model<T>,
    tokens: &[Vec<u32>],
    opts: &TrainOptions,
    eval_seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(eval_seed);
    let mut weighted = 0.0f64;
    let mut count = 0usize;
    for chunk in tokens.chunks(opts.batch_size) {
        let rows: Vec<Corrupted> = chunk
            .iter()
            .map(|ids| corrupt(ids, opts.mask_rate, opts.proportions, &mut rng))
            .collect::<Result<_>>()?;
        let batch = collate(&rows, opts.max_len)?;
        let selected = batch.target_mask.iter().filter(|&&f| f).count();
        let mut tape = Tape::new();
        let (loss, _) = masked_batch_loss(model, &mut tape, &batch, Mode::Eval)?;
        weighted += tape.value(loss)[0].to_f64() * selected as f64;
        count += selected;
    }
    Ok(weighted / count as f64)
}

/// Mean masked cross-entropy of `model` on `records`, with a corruption
/// stream fixed by `eval_seed` so repeated evaluations are comparable.
pub fn mlm_eval_loss<T: Scalar>(
    model: &Model<T>,
    records: &[ProteinRecord],
    opts: &TrainOptions,
    eval_seed: u64,
) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::InvalidArgument("cannot evaluate on zero records".into()));
    }
    let tokens = encode_records(records, opts.max_len)?;
    eval_mlm_on_tokens(model, &tokens, opts, eval_seed)
}

/// A parameter blow-up surfaces as a non-finite loss or as a NaN inside
/// the next forward pass; both mean the same thing from the loop's
/// point of view.
fn as_divergence(e: Error, step: usize, lr: f64) -> Error {
    match e {
        Error::Numeric { .. } => Error::Diverged { step, lr },
        other => other,
    }
}

/// Masked-language-model pretraining. Evaluates the valid split (or the
/// train split when valid is empty) at step 0, every `report_every`
/// steps, and at the end; those evaluations are the report rows.
pub fn pretrain<T: Scalar>(
    config: ModelConfig,
    train: &[ProteinRecord],
    valid: &[ProteinRecord],
    opts: &TrainOptions,
) -> Result<(Model<T>, TrainReport)> {
    opts.validate()?;
    if train.is_empty() {
        return Err(Error::InvalidArgument("pretrain needs a non-empty train split".into()));
    }
    let mut model: Model<T> = Model::new(config, opts.seed)?;
    let train_tokens = encode_records(train, opts.max_len)?;
    let valid_tokens = if valid.is_empty() {
        train_tokens.clone()
    } else {
        encode_records(valid, opts.max_len)?
    };

    let mut order = IndexStream::new(train_tokens.len(), opts.seed ^ ORDER_STREAM);
    let mut corrupt_rng = ChaCha8Rng::seed_from_u64(opts.seed ^ CORRUPT_STREAM);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(opts.seed ^ DROPOUT_STREAM);
    let eval_seed = opts.seed ^ EVAL_STREAM;

    let names = model.encoder_param_names();
    let mut state: OptimizerState<T> = OptimizerState::default();
    let mut report = TrainReport::default();
    let start = Instant::now();

    let loss0 = eval_mlm_on_tokens(&model, &valid_tokens, opts, eval_seed)?;
    report.push(0, lr_at(0, &opts.schedule), loss0, start.elapsed().as_secs_f64());

    for step in 1..=opts.schedule.total_steps {
        let lr = lr_at(step, &opts.schedule);
        let indices = order.next_batch(opts.batch_size);
        let batch = corrupt_batch(&train_tokens, &indices, opts, &mut corrupt_rng)?;
        let mut tape = Tape::new();
        let (loss, bound) =
            masked_batch_loss(&model, &mut tape, &batch, Mode::Train(&mut dropout_rng))
                .map_err(|e| as_divergence(e, step, lr))?;
        let loss_value = tape.value(loss)[0].to_f64();
        if !loss_value.is_finite() {
            return Err(Error::Diverged { step, lr });
        }
        tape.backward(loss)?;
        let mut grads = collect_grads(&tape, &bound, &names);
        drop(tape);
        clip_global_norm(&mut grads, opts.clip_norm);
        adam_step(&mut model.params, &grads, &mut state, &names, lr, &opts.adam)?;

        if step % opts.report_every == 0 || step == opts.schedule.total_steps {
            let eval = eval_mlm_on_tokens(&model, &valid_tokens, opts, eval_seed)
                .map_err(|e| as_divergence(e, step, lr))?;
            if !eval.is_finite() {
                return Err(Error::Diverged { step, lr });
            }
            report.push(step, lr, eval, start.elapsed().as_secs_f64());
            if opts.stop_below.map_or(false, |t| eval < t) {
                break;
            }
        }
    }
    Ok((model, report))
}

/// Per-record supervision extracted once before the finetune loop.
struct TaskData {
    tokens: Vec<Vec<u32>>,
    labels: Vec<Label>,
}

fn prepare_task_data(
    records: &[ProteinRecord],
    head: HeadKind,
    max_len: usize,
) -> Result<TaskData> {
    if records.is_empty() {
        return Err(Error::InvalidArgument("finetune needs at least one record".into()));
    }
    let mut owned: Vec<ProteinRecord> = records.to_vec();
    crate::corpus::truncate_records(&mut owned, max_len - 2);
    let mut labels = Vec::with_capacity(owned.len());
    for rec in &owned {
        let label = rec.label.clone().ok_or_else(|| {
            Error::InvalidArgument(format!("record '{}' has no label", rec.id))
        })?;
        let ok = matches!(
            (&label, head),
            (Label::Tokens(_), HeadKind::TokenClass { .. })
                | (Label::Class(_), HeadKind::SeqClass { .. })
                | (Label::Contacts(_), HeadKind::Contact)
                | (Label::Value(_), HeadKind::Regress)
        );
        if !ok {
            return Err(Error::InvalidArgument(format!(
                "record '{}' does not carry a label for head '{}'",
                rec.id,
                head.prefix()
            )));
        }
        if let (Label::Class(c), HeadKind::SeqClass { classes }) = (&label, head) {
            if *c >= classes {
                return Err(Error::InvalidArgument(format!(
                    "record '{}' has class {c} but the head has {classes} classes",
                    rec.id
                )));
            }
        }
        if let Label::Contacts(map) = &label {
            let residues = rec.sequence.chars().count();
            if map.size() != residues {
                return Err(Error::InvalidArgument(format!(
                    "record '{}' has a {}x{} contact map for {residues} residues",
                    rec.id,
                    map.size(),
                    map.size()
                )));
            }
        }
        labels.push(label);
    }
    let tokens = encode_records(&owned, max_len)?;
    Ok(TaskData { tokens, labels })
}

fn plain_batch(tokens: &[Vec<u32>], indices: &[usize], max_len: usize) -> Result<MaskedBatch> {
    let rows: Vec<Corrupted> = indices
        .iter()
        .map(|&i| Corrupted {
            input: tokens[i].clone(),
            target: tokens[i].clone(),
            flags: vec![false; tokens[i].len()],
        })
        .collect();
    collate(&rows, max_len)
}

fn ss_alphabet(classes: usize) -> &'static str {
    if classes == 3 {
        SS3_ALPHABET
    } else {
        SS8_ALPHABET
    }
}

/// Builds the head loss for one padded batch of task rows.
fn head_loss<'m, T: Scalar>(
    model: &'m Model<T>,
    tape: &mut Tape<'m, T>,
    bound: &Bound,
    out: &EncoderOutput,
    batch: &MaskedBatch,
    data: &TaskData,
    indices: &[usize],
    head: HeadKind,
) -> Result<TensorId> {
    match head {
        HeadKind::TokenClass { classes } => {
            let alphabet = ss_alphabet(classes);
            let mut targets = vec![0u32; batch.batch * batch.max_len];
            let mut select = vec![false; batch.batch * batch.max_len];
            for (r, &idx) in indices.iter().enumerate() {
                let Label::Tokens(s) = &data.labels[idx] else { unreachable!("validated") };
                let len = batch.lengths[r];
                for (p, c) in s.chars().take(len - 2).enumerate() {
                    let class = crate::corpus::ss_class_index(alphabet, c)?;
                    targets[r * batch.max_len + p + 1] = class as u32;
                    select[r * batch.max_len + p + 1] = true;
                }
            }
            let logits = model.token_class_logits(tape, bound, out, classes)?;
            tape.cross_entropy_masked(logits, &targets, &select)
        }
        HeadKind::SeqClass { classes } => {
            let targets: Vec<u32> = indices
                .iter()
                .map(|&idx| {
                    let Label::Class(c) = data.labels[idx] else { unreachable!("validated") };
                    c as u32
                })
                .collect();
            let select = vec![true; indices.len()];
            let logits = model.seq_class_logits(tape, bound, out, classes)?;
            tape.cross_entropy_masked(logits, &targets, &select)
        }
        HeadKind::Contact => {
            let mut pairs = Vec::new();
            let mut positive = Vec::new();
            for (r, &idx) in indices.iter().enumerate() {
                let Label::Contacts(map) = &data.labels[idx] else { unreachable!("validated") };
                for (i, j) in map.valid_pairs() {
                    pairs.push((r, i, j));
                    positive.push(map.contact(i, j));
                }
            }
            if pairs.is_empty() {
                return Err(Error::InvalidArgument(
                    "contact batch has no valid pairs to train on".into(),
                ));
            }
            let logits = model.pair_contact_logits(tape, bound, out, &pairs, &batch.lengths)?;
            // Contacts are a few percent of all pairs; a plain mean lets
            // the all-negative solution dominate. Average the two
            // per-class means instead so each class carries equal
            // weight. A single-class batch falls back to the plain mean.
            let pos_rows: Vec<u32> =
                (0..pairs.len() as u32).filter(|&p| positive[p as usize]).collect();
            let neg_rows: Vec<u32> =
                (0..pairs.len() as u32).filter(|&p| !positive[p as usize]).collect();
            if pos_rows.is_empty() || neg_rows.is_empty() {
                let targets: Vec<T> =
                    positive.iter().map(|&p| if p { T::one() } else { T::zero() }).collect();
                return tape.bce_with_logits_mean(logits, &targets);
            }
            let pos = tape.gather_rows(logits, &pos_rows)?;
            let neg = tape.gather_rows(logits, &neg_rows)?;
            let pos_loss = tape.bce_with_logits_mean(pos, &vec![T::one(); pos_rows.len()])?;
            let neg_loss = tape.bce_with_logits_mean(neg, &vec![T::zero(); neg_rows.len()])?;
            let sum = tape.add(pos_loss, neg_loss)?;
            Ok(tape.scale(sum, T::from_f64(0.5)))
        }
        HeadKind::Regress => {
            let targets: Vec<T> = indices
                .iter()
                .map(|&idx| {
                    let Label::Value(v) = data.labels[idx] else { unreachable!("validated") };
                    T::from_f64(v)
                })
                .collect();
            let pred = model.regress_scalar(tape, bound, out)?;
            tape.mse_mean(pred, &targets)
        }
    }
}

/// Trains the encoder and one task head end to end. Report rows carry
/// the training batch loss at each report step.
pub fn finetune<T: Scalar>(
    model: &mut Model<T>,
    head: HeadKind,
    records: &[ProteinRecord],
    opts: &TrainOptions,
) -> Result<TrainReport> {
    opts.validate()?;
    let data = prepare_task_data(records, head, opts.max_len)?;
    model.ensure_head(head)?;
    // The MLM output bias sits outside every task graph, so it is not
    // trainable here; everything else in the encoder is.
    let mut names = model.encoder_param_names();
    names.retain(|n| n != "mlm.bias");
    let prefix = format!("{}.", head.prefix());
    names.extend(model.params.keys().filter(|n| n.starts_with(&prefix)).cloned());

    let mut order = IndexStream::new(data.tokens.len(), opts.seed ^ ORDER_STREAM);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(opts.seed ^ DROPOUT_STREAM);
    let mut state: OptimizerState<T> = OptimizerState::default();
    let mut report = TrainReport::default();
    let start = Instant::now();

    for step in 1..=opts.schedule.total_steps {
        let lr = lr_at(step, &opts.schedule);
        let indices = order.next_batch(opts.batch_size);
        let batch = plain_batch(&data.tokens, &indices, opts.max_len)?;
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let loss = model
            .encode(
                &mut tape,
                &bound,
                &batch.input_ids,
                &batch.attention_mask,
                batch.batch,
                batch.max_len,
                Mode::Train(&mut dropout_rng),
            )
            .and_then(|out| {
                head_loss(model, &mut tape, &bound, &out, &batch, &data, &indices, head)
            })
            .map_err(|e| as_divergence(e, step, lr))?;
        let loss_value = tape.value(loss)[0].to_f64();
        if !loss_value.is_finite() {
            return Err(Error::Diverged { step, lr });
        }
        tape.backward(loss)?;
        let mut grads = collect_grads(&tape, &bound, &names);
        drop(tape);
        clip_global_norm(&mut grads, opts.clip_norm);
        adam_step(&mut model.params, &grads, &mut state, &names, lr, &opts.adam)?;

        if step % opts.report_every == 0 || step == opts.schedule.total_steps {
            report.push(step, lr, loss_value, start.elapsed().as_secs_f64());
            if opts.stop_below.map_or(false, |t| loss_value < t) {
                break;
            }
        }
    }
    Ok(report)
}

/// Argmax over the last axis of a row-major grid.
fn argmax_rows<T: Scalar>(values: &[T], width: usize) -> Vec<usize> {
    values
        .chunks(width)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

fn eval_batches(n: usize, batch_size: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..n).step_by(batch_size).map(move |lo| (lo, (lo + batch_size).min(n)))
}

/// Per-residue class predictions for each record.
pub fn predict_token_classes<T: Scalar>(
    model: &Model<T>,
    records: &[ProteinRecord],
    classes: usize,
    opts: &TrainOptions,
) -> Result<Vec<Vec<usize>>> {
    let tokens = encode_records(records, opts.max_len)?;
    let mut out = Vec::with_capacity(records.len());
    for (lo, hi) in eval_batches(tokens.len(), opts.batch_size) {
        let indices: Vec<usize> = (lo..hi).collect();
        let batch = plain_batch(&tokens, &indices, opts.max_len)?;
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let enc = model.encode(
            &mut tape,
            &bound,
            &batch.input_ids,
            &batch.attention_mask,
            batch.batch,
            batch.max_len,
            Mode::Eval,
        )?;
        let logits = model.token_class_logits(&mut tape, &bound, &enc, classes)?;
        let preds = argmax_rows(tape.value(logits), classes);
        for (r, _) in indices.iter().enumerate() {
            let len = batch.lengths[r];
            let row = &preds[r * batch.max_len..r * batch.max_len + len];
            out.push(row[1..len - 1].to_vec());
        }
    }
    Ok(out)
}

/// Sequence-level class prediction per record.
pub fn predict_seq_classes<T: Scalar>(
    model: &Model<T>,
    records: &[ProteinRecord],
    classes: usize,
    opts: &TrainOptions,
) -> Result<Vec<usize>> {
    let tokens = encode_records(records, opts.max_len)?;
    let mut out = Vec::with_capacity(records.len());
    for (lo, hi) in eval_batches(tokens.len(), opts.batch_size) {
        let indices: Vec<usize> = (lo..hi).collect();
        let batch = plain_batch(&tokens, &indices, opts.max_len)?;
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let enc = model.encode(
            &mut tape,
            &bound,
            &batch.input_ids,
            &batch.attention_mask,
            batch.batch,
            batch.max_len,
            Mode::Eval,
        )?;
        let logits = model.seq_class_logits(&mut tape, &bound, &enc, classes)?;
        out.extend(argmax_rows(tape.value(logits), classes));
    }
    Ok(out)
}

/// Scalar prediction per record.
pub fn predict_values<T: Scalar>(
    model: &Model<T>,
    records: &[ProteinRecord],
    opts: &TrainOptions,
) -> Result<Vec<f64>> {
    let tokens = encode_records(records, opts.max_len)?;
    let mut out = Vec::with_capacity(records.len());
    for (lo, hi) in eval_batches(tokens.len(), opts.batch_size) {
        let indices: Vec<usize> = (lo..hi).collect();
        let batch = plain_batch(&tokens, &indices, opts.max_len)?;
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let enc = model.encode(
            &mut tape,
            &bound,
            &batch.input_ids,
            &batch.attention_mask,
            batch.batch,
            batch.max_len,
            Mode::Eval,
        )?;
        let pred = model.regress_scalar(&mut tape, &bound, &enc)?;
        out.extend(tape.value(pred).iter().map(|&v| v.to_f64()));
    }
    Ok(out)
}

/// Symmetric L x L matrix of contact probabilities (sigmoid of the
/// symmetrized pair logits) for one record; the diagonal is zero.
pub fn predict_contact_scores<T: Scalar>(
    model: &Model<T>,
    record: &ProteinRecord,
    opts: &TrainOptions,
) -> Result<Vec<Vec<f64>>> {
    let tokens = encode_records(std::slice::from_ref(record), opts.max_len)?;
    let len = tokens[0].len();
    let residues = len - 2;
    let batch = plain_batch(&tokens, &[0], len)?;
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let enc = model.encode(
        &mut tape,
        &bound,
        &batch.input_ids,
        &batch.attention_mask,
        1,
        len,
        Mode::Eval,
    )?;
    let mut scores = vec![vec![0.0f64; residues]; residues];
    let all_pairs: Vec<(usize, usize, usize)> = (0..residues)
        .flat_map(|i| ((i + 1)..residues).map(move |j| (0, i, j)))
        .collect();
    for chunk in all_pairs.chunks(4096) {
        let logits = model.pair_contact_logits(&mut tape, &bound, &enc, chunk, &[len])?;
        for (&(_, i, j), &z) in chunk.iter().zip(tape.value(logits)) {
            let p = sigmoid(z.to_f64());
            scores[i][j] = p;
            scores[j][i] = p;
        }
    }
    Ok(scores)
}
