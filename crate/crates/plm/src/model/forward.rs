//! Forward passes: the encoder stack, the tied MLM projection, the four
//! task heads, and a layer-streaming evaluator for configurations whose
//! full parameter set does not fit in memory. The streaming path runs
//! the same `layer_forward` as the materialized one, so the two agree
//! bitwise.

use rand_chacha::ChaCha8Rng;

use super::{init_tensor_data, Bound, HeadKind, Model, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, TensorId};

/// Layer-norm epsilon used everywhere in the encoder.
pub const LN_EPS: f64 = 1e-5;

/// Whether dropout is live. Train mode draws from the supplied
/// generator; eval mode is deterministic with no generator at all.
pub enum Mode<'r> {
    Eval,
    Train(&'r mut ChaCha8Rng),
}

/// Final encoder states on the tape.
#[derive(Debug)]
pub struct EncoderOutput {
    /// `[batch * len, hidden]`, after the final layer norm (pre-LN) or
    /// the last sublayer norm (post-LN).
    pub hidden: TensorId,
    /// `[batch, hidden]`, exactly the position-0 rows of `hidden`.
    pub cls: TensorId,
    pub batch: usize,
    pub len: usize,
}

/// One layer's parameter ids on a tape.
struct LayerIds {
    ln1_g: TensorId,
    ln1_b: TensorId,
    qw: TensorId,
    qb: TensorId,
    kw: TensorId,
    kb: TensorId,
    vw: TensorId,
    vb: TensorId,
    ow: TensorId,
    ob: TensorId,
    ln2_g: TensorId,
    ln2_b: TensorId,
    w1: TensorId,
    b1: TensorId,
    w2: TensorId,
    b2: TensorId,
}

impl LayerIds {
    fn gather(layer: usize, mut id: impl FnMut(&str) -> TensorId) -> LayerIds {
        let mut f = |suffix: &str| id(&format!("layer{layer}.{suffix}"));
        LayerIds {
            ln1_g: f("attn.ln.gamma"),
            ln1_b: f("attn.ln.beta"),
            qw: f("attn.q.w"),
            qb: f("attn.q.b"),
            kw: f("attn.k.w"),
            kb: f("attn.k.b"),
            vw: f("attn.v.w"),
            vb: f("attn.v.b"),
            ow: f("attn.o.w"),
            ob: f("attn.o.b"),
            ln2_g: f("ffn.ln.gamma"),
            ln2_b: f("ffn.ln.beta"),
            w1: f("ffn.fc1.w"),
            b1: f("ffn.fc1.b"),
            w2: f("ffn.fc2.w"),
            b2: f("ffn.fc2.b"),
        }
    }
}

/// Shape and masking context shared by every layer of one forward pass.
struct FwdCtx<'c> {
    batch: usize,
    len: usize,
    heads: usize,
    dropout: f64,
    pre_ln: bool,
    key_valid: &'c [bool],
}

fn maybe_dropout<T: Scalar>(
    tape: &mut Tape<'_, T>,
    x: TensorId,
    rate: f64,
    mode: &mut Mode,
) -> Result<TensorId> {
    match mode {
        Mode::Train(rng) if rate > 0.0 => tape.dropout(x, rate, &mut **rng),
        _ => Ok(x),
    }
}

fn attention<T: Scalar>(
    tape: &mut Tape<'_, T>,
    h: TensorId,
    lp: &LayerIds,
    ctx: &FwdCtx,
    mode: &mut Mode,
) -> Result<TensorId> {
    let q = tape.matmul(h, lp.qw)?;
    let q = tape.add_row(q, lp.qb)?;
    let k = tape.matmul(h, lp.kw)?;
    let k = tape.add_row(k, lp.kb)?;
    let v = tape.matmul(h, lp.vw)?;
    let v = tape.add_row(v, lp.vb)?;
    let head_dim = tape.dims(q)[1] / ctx.heads;
    let qh = tape.split_heads(q, ctx.batch, ctx.len, ctx.heads)?;
    let kh = tape.split_heads(k, ctx.batch, ctx.len, ctx.heads)?;
    let vh = tape.split_heads(v, ctx.batch, ctx.len, ctx.heads)?;
    let scores = tape.batch_matmul_nt(qh, kh)?;
    let scores = tape.scale(scores, T::from_f64(1.0 / (head_dim as f64).sqrt()));
    let scores = tape.add_key_mask(scores, ctx.key_valid, ctx.heads)?;
    let probs = tape.softmax_last(scores)?;
    let probs = maybe_dropout(tape, probs, ctx.dropout, mode)?;
    let mixed = tape.batch_matmul_nn(probs, vh)?;
    let merged = tape.merge_heads(mixed, ctx.batch, ctx.len, ctx.heads)?;
    let out = tape.matmul(merged, lp.ow)?;
    let out = tape.add_row(out, lp.ob)?;
    maybe_dropout(tape, out, ctx.dropout, mode)
}

fn feed_forward<T: Scalar>(
    tape: &mut Tape<'_, T>,
    h: TensorId,
    lp: &LayerIds,
    ctx: &FwdCtx,
    mode: &mut Mode,
) -> Result<TensorId> {
    let a = tape.matmul(h, lp.w1)?;
    let a = tape.add_row(a, lp.b1)?;
    let g = tape.gelu(a);
    let o = tape.matmul(g, lp.w2)?;
    let o = tape.add_row(o, lp.b2)?;
    maybe_dropout(tape, o, ctx.dropout, mode)
}

/// One transformer layer. Pre-LN: x += Attn(LN1(x)); x += FFN(LN2(x)).
/// Post-LN: x = LN1(x + Attn(x)); x = LN2(x + FFN(x)).
fn layer_forward<T: Scalar>(
    tape: &mut Tape<'_, T>,
    x: TensorId,
    lp: &LayerIds,
    ctx: &FwdCtx,
    mode: &mut Mode,
) -> Result<TensorId> {
    let eps = T::from_f64(LN_EPS);
    if ctx.pre_ln {
        let h = tape.layer_norm(x, lp.ln1_g, lp.ln1_b, eps)?;
        let a = attention(tape, h, lp, ctx, mode)?;
        let x = tape.add(x, a)?;
        let h = tape.layer_norm(x, lp.ln2_g, lp.ln2_b, eps)?;
        let f = feed_forward(tape, h, lp, ctx, mode)?;
        tape.add(x, f)
    } else {
        let a = attention(tape, x, lp, ctx, mode)?;
        let s = tape.add(x, a)?;
        let x = tape.layer_norm(s, lp.ln1_g, lp.ln1_b, eps)?;
        let f = feed_forward(tape, x, lp, ctx, mode)?;
        let s = tape.add(x, f)?;
        tape.layer_norm(s, lp.ln2_g, lp.ln2_b, eps)
    }
}

fn check_batch_shape(
    config: &ModelConfig,
    ids_len: usize,
    mask_len: usize,
    batch: usize,
    len: usize,
) -> Result<()> {
    if batch == 0 || len == 0 || ids_len != batch * len || mask_len != batch * len {
        return Err(Error::InvalidArgument(format!(
            "batch {batch} x len {len} needs {} ids and mask entries, got {ids_len} and {mask_len}",
            batch * len
        )));
    }
    if len > config.max_positions {
        return Err(Error::InvalidArgument(format!(
            "sequence length {len} exceeds model max positions {}",
            config.max_positions
        )));
    }
    Ok(())
}

fn position_ids(batch: usize, len: usize) -> Vec<u32> {
    (0..batch).flat_map(|_| 0..len as u32).collect()
}

impl<T: Scalar> Model<T> {
    /// Runs the encoder on a padded batch. `attention_mask` marks real
    /// tokens; padded key positions are excluded from attention with
    /// additive -inf, so pad content cannot leak into real positions.
    pub fn encode<'m>(
        &self,
        tape: &mut Tape<'m, T>,
        bound: &Bound,
        input_ids: &[u32],
        attention_mask: &[bool],
        batch: usize,
        len: usize,
        mut mode: Mode,
    ) -> Result<EncoderOutput> {
        check_batch_shape(&self.config, input_ids.len(), attention_mask.len(), batch, len)?;
        let tok = tape.embedding_lookup(bound.id("embed.token"), input_ids)?;
        let pos = tape.embedding_lookup(bound.id("embed.position"), &position_ids(batch, len))?;
        let mut x = tape.add(tok, pos)?;
        x = maybe_dropout(tape, x, self.config.dropout, &mut mode)?;
        let ctx = FwdCtx {
            batch,
            len,
            heads: self.config.num_heads,
            dropout: self.config.dropout,
            pre_ln: self.config.pre_ln,
            key_valid: attention_mask,
        };
        for layer in 0..self.config.num_layers {
            let lp = LayerIds::gather(layer, |name| bound.id(name));
            x = layer_forward(tape, x, &lp, &ctx, &mut mode)?;
        }
        if self.config.pre_ln {
            x = tape.layer_norm(x, bound.id("final_ln.gamma"), bound.id("final_ln.beta"), T::from_f64(LN_EPS))?;
        }
        let cls_rows: Vec<u32> = (0..batch as u32).map(|r| r * len as u32).collect();
        let cls = tape.gather_rows(x, &cls_rows)?;
        Ok(EncoderOutput { hidden: x, cls, batch, len })
    }

    /// Vocabulary logits via the tied embedding: hidden x embedding^T
    /// plus the output bias. `[batch * len, vocab]`.
    pub fn mlm_logits(
        &self,
        tape: &mut Tape<'_, T>,
        bound: &Bound,
        out: &EncoderOutput,
    ) -> Result<TensorId> {
        let z = tape.matmul_nt(out.hidden, bound.id("embed.token"))?;
        tape.add_row(z, bound.id("mlm.bias"))
    }

    fn head_mlp(
        &self,
        tape: &mut Tape<'_, T>,
        bound: &Bound,
        x: TensorId,
        head: HeadKind,
    ) -> Result<TensorId> {
        if !self.has_head(head) {
            return Err(Error::Config(format!(
                "head '{}' has no parameters; call ensure_head first",
                head.prefix()
            )));
        }
        let p = head.prefix();
        let h = tape.matmul(x, bound.id(&format!("{p}.fc1.w")))?;
        let h = tape.add_row(h, bound.id(&format!("{p}.fc1.b")))?;
        let g = tape.gelu(h);
        let z = tape.matmul(g, bound.id(&format!("{p}.fc2.w")))?;
        tape.add_row(z, bound.id(&format!("{p}.fc2.b")))
    }

    /// Per-position class logits, `[batch * len, classes]`.
    pub fn token_class_logits(
        &self,
        tape: &mut Tape<'_, T>,
        bound: &Bound,
        out: &EncoderOutput,
        classes: usize,
    ) -> Result<TensorId> {
        self.head_mlp(tape, bound, out.hidden, HeadKind::TokenClass { classes })
    }

    /// Sequence class logits from the [CLS] state, `[batch, classes]`.
    pub fn seq_class_logits(
        &self,
        tape: &mut Tape<'_, T>,
        bound: &Bound,
        out: &EncoderOutput,
        classes: usize,
    ) -> Result<TensorId> {
        self.head_mlp(tape, bound, out.cls, HeadKind::SeqClass { classes })
    }

    /// Contact logits for residue pairs, `[pairs, 1]`. Pairs are given
    /// as (batch row, residue i, residue j) in residue coordinates; the
    /// [CLS] offset is applied here. The reported score is the mean of
    /// the (i,j) and (j,i) logits, so it is symmetric by construction.
    pub fn pair_contact_logits(
        &self,
        tape: &mut Tape<'_, T>,
        bound: &Bound,
        out: &EncoderOutput,
        pairs: &[(usize, usize, usize)],
        lengths: &[usize],
    ) -> Result<TensorId> {
        if lengths.len() != out.batch {
            return Err(Error::InvalidArgument(format!(
                "got {} lengths for batch {}",
                lengths.len(),
                out.batch
            )));
        }
        let mut fwd = Vec::with_capacity(pairs.len());
        let mut rev = Vec::with_capacity(pairs.len());
        for &(row, i, j) in pairs {
            if row >= out.batch {
                return Err(Error::Index {
                    op: "pair_contact_logits",
                    details: format!("row {row} exceeds batch {}", out.batch),
                });
            }
            let residues = lengths[row].saturating_sub(2);
            if i >= residues || j >= residues {
                return Err(Error::Index {
                    op: "pair_contact_logits",
                    details: format!(
                        "pair ({i}, {j}) out of range for row {row} with {residues} residues"
                    ),
                });
            }
            let base = (row * out.len) as u32;
            fwd.push((base + i as u32 + 1, base + j as u32 + 1));
            rev.push((base + j as u32 + 1, base + i as u32 + 1));
        }
        let a = tape.gather_pairs(out.hidden, &fwd)?;
        let b = tape.gather_pairs(out.hidden, &rev)?;
        let za = self.head_mlp(tape, bound, a, HeadKind::Contact)?;
        let zb = self.head_mlp(tape, bound, b, HeadKind::Contact)?;
        let sum = tape.add(za, zb)?;
        Ok(tape.scale(sum, T::from_f64(0.5)))
    }

    /// Scalar predictions from the [CLS] state, `[batch, 1]`.
    pub fn regress_scalar(
        &self,
        tape: &mut Tape<'_, T>,
        bound: &Bound,
        out: &EncoderOutput,
    ) -> Result<TensorId> {
        self.head_mlp(tape, bound, out.cls, HeadKind::Regress)
    }
}

/// Evaluates the encoder without ever materializing more than one
/// layer's parameters: each layer is initialized from (seed, name),
/// applied on a fresh tape, and dropped. Bitwise-identical to
/// `Model::new(config, seed)` followed by `encode` in eval mode.
pub fn streaming_eval_hidden<T: Scalar>(
    config: &ModelConfig,
    seed: u64,
    input_ids: &[u32],
    attention_mask: &[bool],
    batch: usize,
    len: usize,
) -> Result<Vec<T>> {
    config.validate()?;
    check_batch_shape(config, input_ids.len(), attention_mask.len(), batch, len)?;
    let h = config.hidden_size;
    let spec: Vec<(String, Vec<usize>)> = config.param_spec();
    let dims_of = |name: &str| -> &Vec<usize> {
        &spec.iter().find(|(n, _)| n == name).expect("name in spec").1
    };
    let own = |tape: &mut Tape<'_, T>, name: &str| -> TensorId {
        let dims = dims_of(name).clone();
        let data = init_tensor_data::<T>(name, &dims, seed);
        tape.leaf_owned(dims, data, false)
    };

    let mut x: Vec<T> = {
        let mut tape = Tape::new();
        let table = own(&mut tape, "embed.token");
        let positions = own(&mut tape, "embed.position");
        let tok = tape.embedding_lookup(table, input_ids)?;
        let pos = tape.embedding_lookup(positions, &position_ids(batch, len))?;
        let sum = tape.add(tok, pos)?;
        tape.value(sum).to_vec()
    };

    let ctx = FwdCtx {
        batch,
        len,
        heads: config.num_heads,
        dropout: config.dropout,
        pre_ln: config.pre_ln,
        key_valid: attention_mask,
    };
    for layer in 0..config.num_layers {
        let mut tape = Tape::new();
        let x_id = tape.leaf_owned(vec![batch * len, h], x, false);
        let lp = LayerIds::gather(layer, |name| own(&mut tape, name));
        let out = layer_forward(&mut tape, x_id, &lp, &ctx, &mut Mode::Eval)?;
        x = tape.value(out).to_vec();
    }

    if config.pre_ln {
        let mut tape = Tape::new();
        let x_id = tape.leaf_owned(vec![batch * len, h], x, false);
        let gamma = own(&mut tape, "final_ln.gamma");
        let beta = own(&mut tape, "final_ln.beta");
        let out = tape.layer_norm(x_id, gamma, beta, T::from_f64(LN_EPS))?;
        x = tape.value(out).to_vec();
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::{encode as tok_encode, PAD};
    use rand::SeedableRng;

    fn small_config() -> ModelConfig {
        ModelConfig { max_positions: 8, dropout: 0.1, ..ModelConfig::new(16, 2, 2) }
    }

    fn batch_of(texts: &[&str], len: usize) -> (Vec<u32>, Vec<bool>) {
        let mut ids = Vec::new();
        let mut mask = Vec::new();
        for t in texts {
            let mut row = tok_encode(t).unwrap();
            assert!(row.len() <= len);
            mask.extend(std::iter::repeat(true).take(row.len()));
            mask.extend(std::iter::repeat(false).take(len - row.len()));
            row.resize(len, PAD);
            ids.extend(row);
        }
        (ids, mask)
    }

    #[test]
    fn output_shapes_and_cls_slice() {
        let model = Model::<f32>::new(small_config(), 1).unwrap();
        let (ids, mask) = batch_of(&["MKVLA", "AC"], 8);
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let out = model.encode(&mut tape, &bound, &ids, &mask, 2, 8, Mode::Eval).unwrap();
        assert_eq!(tape.dims(out.hidden), &[16, 16]);
        assert_eq!(tape.dims(out.cls), &[2, 16]);
        let hidden = tape.value(out.hidden).to_vec();
        let cls = tape.value(out.cls);
        assert_eq!(&cls[..16], &hidden[..16]);
        assert_eq!(&cls[16..], &hidden[8 * 16..9 * 16]);
    }

    #[test]
    fn padding_content_cannot_leak() {
        let model = Model::<f32>::new(small_config(), 2).unwrap();
        let (ids, mask) = batch_of(&["MKV"], 8);
        let mut altered = ids.clone();
        for p in 5..8 {
            assert_eq!(altered[p], PAD);
            altered[p] = 20 + p as u32;
        }
        let run = |ids: &[u32]| {
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape);
            let out = model.encode(&mut tape, &bound, ids, &mask, 1, 8, Mode::Eval).unwrap();
            tape.value(out.hidden).to_vec()
        };
        let a = run(&ids);
        let b = run(&altered);
        assert_eq!(&a[..5 * 16], &b[..5 * 16], "real positions must match bitwise");
    }

    #[test]
    fn batch_permutation_permutes_outputs() {
        let model = Model::<f32>::new(small_config(), 3).unwrap();
        let (ids, mask) = batch_of(&["MKVLA", "AC", "WYV"], 8);
        let perm = [2usize, 0, 1];
        let pids: Vec<u32> = perm.iter().flat_map(|&r| ids[r * 8..(r + 1) * 8].to_vec()).collect();
        let pmask: Vec<bool> =
            perm.iter().flat_map(|&r| mask[r * 8..(r + 1) * 8].to_vec()).collect();
        let run = |ids: &[u32], mask: &[bool]| {
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape);
            let out = model.encode(&mut tape, &bound, ids, mask, 3, 8, Mode::Eval).unwrap();
            tape.value(out.hidden).to_vec()
        };
        let base = run(&ids, &mask);
        let permuted = run(&pids, &pmask);
        let row = 8 * 16;
        for (to, &from) in perm.iter().enumerate() {
            assert_eq!(&permuted[to * row..(to + 1) * row], &base[from * row..(from + 1) * row]);
        }
    }

    #[test]
    fn train_mode_is_seeded_and_eval_is_deterministic() {
        let model = Model::<f32>::new(small_config(), 4).unwrap();
        let (ids, mask) = batch_of(&["MKVLA"], 8);
        let run = |seed: Option<u64>| {
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape);
            let mut rng = ChaCha8Rng::seed_from_u64(seed.unwrap_or(0));
            let mode = match seed {
                Some(_) => Mode::Train(&mut rng),
                None => Mode::Eval,
            };
            let out = model.encode(&mut tape, &bound, &ids, &mask, 1, 8, mode).unwrap();
            tape.value(out.hidden).to_vec()
        };
        assert_eq!(run(None), run(None));
        assert_eq!(run(Some(7)), run(Some(7)));
        assert_ne!(run(Some(7)), run(Some(8)));
        assert_ne!(run(None), run(Some(7)), "dropout must be active in train mode");
    }

    #[test]
    fn sequence_longer_than_max_positions_is_rejected() {
        let model = Model::<f32>::new(small_config(), 1).unwrap();
        let (ids, mask) = batch_of(&["MKVLAMKVLA"], 12);
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let err = model.encode(&mut tape, &bound, &ids, &mask, 1, 12, Mode::Eval).unwrap_err();
        assert!(err.to_string().contains("max positions"), "{err}");
    }

    #[test]
    fn mlm_logits_reduce_to_bias_on_zero_hidden() {
        let mut model = Model::<f32>::new(small_config(), 5).unwrap();
        model.params.get_mut("mlm.bias").unwrap().data_mut().copy_from_slice(
            &(0..30).map(|i| i as f32 / 10.0).collect::<Vec<_>>(),
        );
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let zeros = tape.constant(vec![3, 16], vec![0.0; 48]);
        let out = EncoderOutput { hidden: zeros, cls: zeros, batch: 1, len: 3 };
        let logits = model.mlm_logits(&mut tape, &bound, &out).unwrap();
        assert_eq!(tape.dims(logits), &[3, 30]);
        for row in tape.value(logits).chunks(30) {
            for (i, &z) in row.iter().enumerate() {
                assert_eq!(z, i as f32 / 10.0);
            }
        }
    }

    #[test]
    fn mlm_softmax_rows_sum_to_one() {
        let model = Model::<f32>::new(small_config(), 6).unwrap();
        let (ids, mask) = batch_of(&["MKVLA"], 7);
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let out = model.encode(&mut tape, &bound, &ids, &mask, 1, 7, Mode::Eval).unwrap();
        let logits = model.mlm_logits(&mut tape, &bound, &out).unwrap();
        let probs = tape.softmax_last(logits).unwrap();
        for row in tape.value(probs).chunks(30) {
            let s: f32 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-6, "row sum {s}");
        }
    }

    #[test]
    fn seq_head_reads_only_the_cls_state() {
        let mut model = Model::<f32>::new(small_config(), 7).unwrap();
        model.ensure_head(HeadKind::SeqClass { classes: 8 }).unwrap();
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        // Two fabricated hidden grids sharing row 0 but with the other
        // rows permuted; cls is the row-0 gather of each.
        let rows = 5usize;
        let mut grid: Vec<f32> = (0..rows * 16).map(|i| (i as f32 * 0.13).sin()).collect();
        let a = tape.constant(vec![rows, 16], grid.clone());
        grid[16..].rotate_left(32);
        let b = tape.constant(vec![rows, 16], grid);
        let run = |tape: &mut Tape<f32>, hid: TensorId| {
            let cls = tape.gather_rows(hid, &[0]).unwrap();
            let out = EncoderOutput { hidden: hid, cls, batch: 1, len: rows };
            let logits = model.seq_class_logits(tape, &bound, &out, 8).unwrap();
            tape.value(logits).to_vec()
        };
        let za = run(&mut tape, a);
        let zb = run(&mut tape, b);
        assert_eq!(za, zb);
        assert_eq!(za.len(), 8);
    }

    #[test]
    fn contact_scores_are_symmetric_and_range_checked() {
        let mut model = Model::<f32>::new(small_config(), 8).unwrap();
        model.ensure_head(HeadKind::Contact).unwrap();
        let (ids, mask) = batch_of(&["MKVLA"], 7);
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let out = model.encode(&mut tape, &bound, &ids, &mask, 1, 7, Mode::Eval).unwrap();
        let z = model
            .pair_contact_logits(&mut tape, &bound, &out, &[(0, 0, 3), (0, 3, 0)], &[7])
            .unwrap();
        let v = tape.value(z);
        assert_eq!(v.len(), 2);
        assert_eq!(v[0], v[1], "symmetrized scores must match exactly");

        let err = model
            .pair_contact_logits(&mut tape, &bound, &out, &[(0, 0, 5)], &[7])
            .unwrap_err();
        assert!(err.to_string().contains("5 residues"), "{err}");
    }

    #[test]
    fn regress_head_outputs_finite_scalars() {
        let mut model = Model::<f32>::new(small_config(), 9).unwrap();
        model.ensure_head(HeadKind::Regress).unwrap();
        let (ids, mask) = batch_of(&["MKVLA", "ACDW"], 8);
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let out = model.encode(&mut tape, &bound, &ids, &mask, 2, 8, Mode::Eval).unwrap();
        let y = model.regress_scalar(&mut tape, &bound, &out).unwrap();
        assert_eq!(tape.dims(y), &[2, 1]);
        assert!(tape.value(y).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn missing_head_is_a_config_error() {
        let model = Model::<f32>::new(small_config(), 10).unwrap();
        let (ids, mask) = batch_of(&["MKV"], 5);
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let out = model.encode(&mut tape, &bound, &ids, &mask, 1, 5, Mode::Eval).unwrap();
        let err = model.regress_scalar(&mut tape, &bound, &out).unwrap_err();
        assert!(err.to_string().contains("ensure_head"), "{err}");
    }

    #[test]
    fn both_norm_orders_run_forward_and_backward() {
        for pre_ln in [true, false] {
            let cfg = ModelConfig { pre_ln, max_positions: 8, ..ModelConfig::new(32, 2, 4) };
            let model = Model::<f32>::new(cfg, 11).unwrap();
            let (ids, mask) = batch_of(&["MKVLA", "ACD"], 8);
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape);
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let out = model
                .encode(&mut tape, &bound, &ids, &mask, 2, 8, Mode::Train(&mut rng))
                .unwrap();
            let logits = model.mlm_logits(&mut tape, &bound, &out).unwrap();
            let targets: Vec<u32> = ids.clone();
            let select: Vec<bool> = mask.clone();
            let loss = tape.cross_entropy_masked(logits, &targets, &select).unwrap();
            tape.backward(loss).unwrap();
            assert!(tape.value(loss)[0].is_finite());
            for name in model.encoder_param_names() {
                let g = tape.grad(bound.id(&name)).unwrap_or_else(|| panic!("no grad: {name}"));
                assert!(g.iter().all(|v| v.is_finite()), "{name} grad not finite");
            }
        }
    }

    #[test]
    fn streaming_forward_matches_materialized_model() {
        let cfg = ModelConfig { max_positions: 8, ..ModelConfig::new(16, 2, 4) };
        let model = Model::<f32>::new(cfg.clone(), 13).unwrap();
        let (ids, mask) = batch_of(&["MKVLA", "AC"], 8);
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let out = model.encode(&mut tape, &bound, &ids, &mask, 2, 8, Mode::Eval).unwrap();
        let materialized = tape.value(out.hidden).to_vec();
        let streamed = streaming_eval_hidden::<f32>(&cfg, 13, &ids, &mask, 2, 8).unwrap();
        assert_eq!(materialized, streamed, "streaming must be bit-identical");
    }

    #[test]
    fn forward_trace_matches_scalar_reference() {
        // Fully hand-specified 1-layer model, hidden 2, one head, ffn 4,
        // input [CLS] A. The expected values are recomputed below with
        // straight-line f64 arithmetic, mirroring the layer definitions
        // symbol by symbol.
        let cfg = ModelConfig {
            ffn_size: 4,
            max_positions: 4,
            dropout: 0.0,
            ..ModelConfig::new(2, 1, 1)
        };
        let mut model = Model::<f64>::new(cfg, 0).unwrap();
        let set = |m: &mut Model<f64>, name: &str, vals: &[f64]| {
            m.params.get_mut(name).unwrap().data_mut().copy_from_slice(vals);
        };
        // Token 2 = [CLS], token 5 = A.
        let mut tok = vec![0.0; 60];
        tok[4] = 0.10;
        tok[5] = -0.20;
        tok[10] = 0.30;
        tok[11] = 0.40;
        set(&mut model, "embed.token", &tok);
        let mut pos = vec![0.0; 8];
        pos[0] = 0.01;
        pos[1] = 0.02;
        pos[2] = -0.03;
        pos[3] = 0.05;
        set(&mut model, "embed.position", &pos);
        set(&mut model, "layer0.attn.ln.gamma", &[1.0, 1.2]);
        set(&mut model, "layer0.attn.ln.beta", &[0.05, -0.10]);
        let wq = [0.20, -0.10, 0.15, 0.25];
        let wk = [-0.30, 0.12, 0.05, -0.20];
        let wv = [0.08, 0.18, -0.14, 0.22];
        let wo = [0.40, -0.25, 0.10, 0.35];
        set(&mut model, "layer0.attn.q.w", &wq);
        set(&mut model, "layer0.attn.q.b", &[0.01, -0.02]);
        set(&mut model, "layer0.attn.k.w", &wk);
        set(&mut model, "layer0.attn.k.b", &[0.03, 0.00]);
        set(&mut model, "layer0.attn.v.w", &wv);
        set(&mut model, "layer0.attn.v.b", &[-0.01, 0.02]);
        set(&mut model, "layer0.attn.o.w", &wo);
        set(&mut model, "layer0.attn.o.b", &[0.02, 0.01]);
        set(&mut model, "layer0.ffn.ln.gamma", &[0.90, 1.10]);
        set(&mut model, "layer0.ffn.ln.beta", &[0.00, 0.02]);
        let w1 = [0.30, -0.20, 0.10, 0.25, -0.15, 0.35, 0.05, -0.10];
        let b1 = [0.01, 0.02, -0.03, 0.00];
        let w2 = [0.12, -0.08, 0.22, 0.18, -0.05, 0.30, 0.16, -0.24];
        let b2 = [0.03, -0.01];
        set(&mut model, "layer0.ffn.fc1.w", &w1);
        set(&mut model, "layer0.ffn.fc1.b", &b1);
        set(&mut model, "layer0.ffn.fc2.w", &w2);
        set(&mut model, "layer0.ffn.fc2.b", &b2);
        set(&mut model, "final_ln.gamma", &[1.05, 0.95]);
        set(&mut model, "final_ln.beta", &[0.01, -0.01]);

        let ids = [2u32, 5];
        let mask = [true, true];
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let out = model.encode(&mut tape, &bound, &ids, &mask, 1, 2, Mode::Eval).unwrap();
        let got = tape.value(out.hidden).to_vec();

        // Reference trace in plain f64 scalar math.
        let ln = |x: [f64; 2], g: [f64; 2], b: [f64; 2]| -> [f64; 2] {
            let mean = (x[0] + x[1]) / 2.0;
            let var = ((x[0] - mean).powi(2) + (x[1] - mean).powi(2)) / 2.0;
            let rstd = 1.0 / (var + 1e-5).sqrt();
            [(x[0] - mean) * rstd * g[0] + b[0], (x[1] - mean) * rstd * g[1] + b[1]]
        };
        let affine = |x: [f64; 2], w: [f64; 4], b: [f64; 2]| -> [f64; 2] {
            [x[0] * w[0] + x[1] * w[2] + b[0], x[0] * w[1] + x[1] * w[3] + b[1]]
        };
        let gelu = |x: f64| -> f64 {
            let c = (2.0 / std::f64::consts::PI).sqrt();
            0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
        };
        let x0 = [0.10 + 0.01, -0.20 + 0.02];
        let x1 = [0.30 - 0.03, 0.40 + 0.05];
        let h0 = ln(x0, [1.0, 1.2], [0.05, -0.10]);
        let h1 = ln(x1, [1.0, 1.2], [0.05, -0.10]);
        let q0 = affine(h0, wq, [0.01, -0.02]);
        let q1 = affine(h1, wq, [0.01, -0.02]);
        let k0 = affine(h0, wk, [0.03, 0.00]);
        let k1 = affine(h1, wk, [0.03, 0.00]);
        let v0 = affine(h0, wv, [-0.01, 0.02]);
        let v1 = affine(h1, wv, [-0.01, 0.02]);
        let scale = 1.0 / 2.0f64.sqrt();
        let dot = |a: [f64; 2], b: [f64; 2]| a[0] * b[0] + a[1] * b[1];
        let att_row = |q: [f64; 2]| -> [f64; 2] {
            let s = [dot(q, k0) * scale, dot(q, k1) * scale];
            let m = s[0].max(s[1]);
            let e = [(s[0] - m).exp(), (s[1] - m).exp()];
            let z = e[0] + e[1];
            let p = [e[0] / z, e[1] / z];
            [p[0] * v0[0] + p[1] * v1[0], p[0] * v0[1] + p[1] * v1[1]]
        };
        let c0 = att_row(q0);
        let c1 = att_row(q1);
        let a0 = affine(c0, wo, [0.02, 0.01]);
        let a1 = affine(c1, wo, [0.02, 0.01]);
        let r0 = [x0[0] + a0[0], x0[1] + a0[1]];
        let r1 = [x1[0] + a1[0], x1[1] + a1[1]];
        let f_in0 = ln(r0, [0.90, 1.10], [0.00, 0.02]);
        let f_in1 = ln(r1, [0.90, 1.10], [0.00, 0.02]);
        let ffn = |x: [f64; 2]| -> [f64; 2] {
            let mut hid = [0.0f64; 4];
            for (j, h) in hid.iter_mut().enumerate() {
                *h = gelu(x[0] * w1[j] + x[1] * w1[4 + j] + b1[j]);
            }
            let mut out = b2;
            for (j, h) in hid.iter().enumerate() {
                out[0] += h * w2[j * 2];
                out[1] += h * w2[j * 2 + 1];
            }
            out
        };
        let f0 = ffn(f_in0);
        let f1 = ffn(f_in1);
        let y0 = ln([r0[0] + f0[0], r0[1] + f0[1]], [1.05, 0.95], [0.01, -0.01]);
        let y1 = ln([r1[0] + f1[0], r1[1] + f1[1]], [1.05, 0.95], [0.01, -0.01]);
        let want = [y0[0], y0[1], y1[0], y1[1]];
        for (g, w) in got.iter().zip(want.iter()) {
            assert!((g - w).abs() < 1e-12, "got {g}, reference {w}");
        }
    }
}
