//! Reverse-mode autodiff on a Wengert tape.
//!
//! Forward calls append nodes (value buffers) and op records; `backward`
//! replays the records in reverse, accumulating into per-node gradient
//! buffers. Accumulation rather than assignment is what makes fan-out
//! correct: a node consumed by several ops receives the sum of their
//! contributions.
//!
//! Leaves may borrow parameter storage directly (`leaf`), so binding a
//! model's parameters to a fresh tape each step copies nothing.

use rand::Rng;

use super::kernels::{mm_nn, mm_nt, mm_tn};
use super::{gelu, gelu_grad, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a tape. Only valid for the tape that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

enum Buf<'a, T> {
    Owned(Vec<T>),
    Borrowed(&'a [T]),
}

impl<T> std::ops::Deref for Buf<'_, T> {
    type Target = [T];
    fn deref(&self) -> &[T] {
        match self {
            Buf::Owned(v) => v,
            Buf::Borrowed(s) => s,
        }
    }
}

struct Node<'a, T> {
    dims: Vec<usize>,
    data: Buf<'a, T>,
    requires: bool,
}

/// One recorded operation, storing input ids plus whatever intermediate
/// values the backward rule needs (saved statistics, masks, indices).
enum Op<T> {
    Matmul { a: TensorId, b: TensorId, m: usize, k: usize, n: usize },
    MatmulNt { a: TensorId, b: TensorId, m: usize, k: usize, n: usize },
    BatchMatmulNn { a: TensorId, b: TensorId, g: usize, m: usize, k: usize, n: usize },
    BatchMatmulNt { a: TensorId, b: TensorId, g: usize, m: usize, k: usize, n: usize },
    Add { a: TensorId, b: TensorId },
    AddRow { x: TensorId, row: TensorId, rows: usize, width: usize },
    Scale { x: TensorId, c: T },
    Transpose { x: TensorId, rows: usize, cols: usize },
    Reshape { x: TensorId },
    LayerNorm { x: TensorId, gamma: TensorId, beta: TensorId, width: usize, mean: Vec<T>, rstd: Vec<T> },
    SoftmaxLast { x: TensorId, width: usize },
    Gelu { x: TensorId },
    EmbedLookup { table: TensorId, ids: Vec<u32>, width: usize },
    GatherRows { x: TensorId, rows: Vec<u32>, width: usize },
    GatherPairs { x: TensorId, pairs: Vec<(u32, u32)>, width: usize },
    SplitHeads { x: TensorId, batch: usize, seq: usize, heads: usize, head_dim: usize },
    MergeHeads { x: TensorId, batch: usize, seq: usize, heads: usize, head_dim: usize },
    AddKeyMask { x: TensorId },
    Dropout { x: TensorId, keep: Vec<T> },
    WeightedSum { x: TensorId, weights: Vec<T> },
    CrossEntropyMasked { logits: TensorId, width: usize, sel: Vec<u32>, targets: Vec<u32>, norms: Vec<(T, T)> },
    BceMean { logits: TensorId, targets: Vec<T> },
    MseMean { pred: TensorId, targets: Vec<T> },
}

struct Record<T> {
    op: Op<T>,
    out: TensorId,
}

/// Wengert tape: an arena of value nodes plus the op list that produced
/// them. One tape records one forward pass; it is dropped (freeing all
/// activations) before the optimizer mutates parameters.
pub struct Tape<'a, T: Scalar = f32> {
    nodes: Vec<Node<'a, T>>,
    records: Vec<Record<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<'a, T: Scalar> Default for Tape<'a, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, T: Scalar> Tape<'a, T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), records: Vec::new(), grads: Vec::new() }
    }

    fn push_node(&mut self, dims: Vec<usize>, data: Buf<'a, T>, requires: bool) -> TensorId {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        self.nodes.push(Node { dims, data, requires });
        self.grads.push(None);
        TensorId(self.nodes.len() - 1)
    }

    fn push_out(&mut self, dims: Vec<usize>, data: Vec<T>, op: Op<T>, requires: bool) -> TensorId {
        let out = self.push_node(dims, Buf::Owned(data), requires);
        self.records.push(Record { op, out });
        out
    }

    /// Registers a tensor as a leaf without copying its data.
    pub fn leaf(&mut self, t: &'a Tensor<T>) -> TensorId {
        self.push_node(t.dims().to_vec(), Buf::Borrowed(t.data()), t.requires_grad())
    }

    /// Registers an owned leaf, mostly useful in tests.
    pub fn leaf_owned(&mut self, dims: Vec<usize>, data: Vec<T>, requires: bool) -> TensorId {
        self.push_node(dims, Buf::Owned(data), requires)
    }

    /// Registers a non-differentiable constant.
    pub fn constant(&mut self, dims: Vec<usize>, data: Vec<T>) -> TensorId {
        self.push_node(dims, Buf::Owned(data), false)
    }

    pub fn dims(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].dims
    }

    pub fn numel(&self, id: TensorId) -> usize {
        self.nodes[id.0].data.len()
    }

    pub fn value(&self, id: TensorId) -> &[T] {
        &self.nodes[id.0].data
    }

    pub fn grad(&self, id: TensorId) -> Option<&[T]> {
        self.grads[id.0].as_deref()
    }

    fn requires(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires
    }

    fn rank2(&self, id: TensorId, op: &'static str) -> Result<(usize, usize)> {
        let d = self.dims(id);
        if d.len() != 2 {
            return Err(Error::Shape { op, details: format!("expected rank 2, got {:?}", d) });
        }
        Ok((d[0], d[1]))
    }

    fn rank3(&self, id: TensorId, op: &'static str) -> Result<(usize, usize, usize)> {
        let d = self.dims(id);
        if d.len() != 3 {
            return Err(Error::Shape { op, details: format!("expected rank 3, got {:?}", d) });
        }
        Ok((d[0], d[1], d[2]))
    }

    /// `out[m,n] = a[m,k] · b[k,n]`
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, ka) = self.rank2(a, "matmul")?;
        let (kb, n) = self.rank2(b, "matmul")?;
        if ka != kb {
            return Err(Error::Shape {
                op: "matmul",
                details: format!("cannot multiply {:?} by {:?}", self.dims(a), self.dims(b)),
            });
        }
        let mut out = vec![T::zero(); m * n];
        mm_nn(self.value(a), self.value(b), m, ka, n, &mut out, false);
        let req = self.requires(a) || self.requires(b);
        Ok(self.push_out(vec![m, n], out, Op::Matmul { a, b, m, k: ka, n }, req))
    }

    /// `out[m,n] = a[m,k] · b[n,k]ᵀ`, used for weight tying.
    pub fn matmul_nt(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, ka) = self.rank2(a, "matmul_nt")?;
        let (n, kb) = self.rank2(b, "matmul_nt")?;
        if ka != kb {
            return Err(Error::Shape {
                op: "matmul_nt",
                details: format!("cannot multiply {:?} by transpose of {:?}", self.dims(a), self.dims(b)),
            });
        }
        let mut out = vec![T::zero(); m * n];
        mm_nt(self.value(a), self.value(b), m, ka, n, &mut out, false);
        let req = self.requires(a) || self.requires(b);
        Ok(self.push_out(vec![m, n], out, Op::MatmulNt { a, b, m, k: ka, n }, req))
    }

    /// `out[g,m,n] = a[g,m,k] · b[g,k,n]`, one product per group.
    pub fn batch_matmul_nn(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (ga, m, ka) = self.rank3(a, "batch_matmul_nn")?;
        let (gb, kb, n) = self.rank3(b, "batch_matmul_nn")?;
        if ga != gb || ka != kb {
            return Err(Error::Shape {
                op: "batch_matmul_nn",
                details: format!("cannot multiply {:?} by {:?}", self.dims(a), self.dims(b)),
            });
        }
        let mut out = vec![T::zero(); ga * m * n];
        for gi in 0..ga {
            mm_nn(
                &self.value(a)[gi * m * ka..(gi + 1) * m * ka],
                &self.value(b)[gi * ka * n..(gi + 1) * ka * n],
                m,
                ka,
                n,
                &mut out[gi * m * n..(gi + 1) * m * n],
                false,
            );
        }
        let req = self.requires(a) || self.requires(b);
        Ok(self.push_out(vec![ga, m, n], out, Op::BatchMatmulNn { a, b, g: ga, m, k: ka, n }, req))
    }

    /// `out[g,m,n] = a[g,m,k] · b[g,n,k]ᵀ`, attention score layout.
    pub fn batch_matmul_nt(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (ga, m, ka) = self.rank3(a, "batch_matmul_nt")?;
        let (gb, n, kb) = self.rank3(b, "batch_matmul_nt")?;
        if ga != gb || ka != kb {
            return Err(Error::Shape {
                op: "batch_matmul_nt",
                details: format!("cannot multiply {:?} by transpose of {:?}", self.dims(a), self.dims(b)),
            });
        }
        let mut out = vec![T::zero(); ga * m * n];
        for gi in 0..ga {
            mm_nt(
                &self.value(a)[gi * m * ka..(gi + 1) * m * ka],
                &self.value(b)[gi * n * ka..(gi + 1) * n * ka],
                m,
                ka,
                n,
                &mut out[gi * m * n..(gi + 1) * m * n],
                false,
            );
        }
        let req = self.requires(a) || self.requires(b);
        Ok(self.push_out(vec![ga, m, n], out, Op::BatchMatmulNt { a, b, g: ga, m, k: ka, n }, req))
    }

    /// Elementwise sum of two same-shaped tensors.
    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.dims(a) != self.dims(b) {
            return Err(Error::Shape {
                op: "add",
                details: format!("cannot add {:?} and {:?}", self.dims(a), self.dims(b)),
            });
        }
        let out: Vec<T> =
            self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        let req = self.requires(a) || self.requires(b);
        Ok(self.push_out(self.dims(a).to_vec(), out, Op::Add { a, b }, req))
    }

    /// Adds a rank-1 row vector to every row of `x`, the bias broadcast.
    pub fn add_row(&mut self, x: TensorId, row: TensorId) -> Result<TensorId> {
        let xd = self.dims(x).to_vec();
        let width = *xd.last().expect("non-empty dims");
        if self.dims(row) != [width] {
            return Err(Error::Shape {
                op: "add_row",
                details: format!("cannot broadcast {:?} onto rows of {:?}", self.dims(row), xd),
            });
        }
        let rows = self.numel(x) / width;
        let rv = self.value(row);
        let out: Vec<T> = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v + rv[i % width])
            .collect();
        let req = self.requires(x) || self.requires(row);
        Ok(self.push_out(xd, out, Op::AddRow { x, row, rows, width }, req))
    }

    pub fn scale(&mut self, x: TensorId, c: T) -> TensorId {
        let out: Vec<T> = self.value(x).iter().map(|&v| v * c).collect();
        let req = self.requires(x);
        self.push_out(self.dims(x).to_vec(), out, Op::Scale { x, c }, req)
    }

    pub fn transpose(&mut self, x: TensorId) -> Result<TensorId> {
        let (rows, cols) = self.rank2(x, "transpose")?;
        let v = self.value(x);
        let mut out = vec![T::zero(); rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                out[j * rows + i] = v[i * cols + j];
            }
        }
        let req = self.requires(x);
        Ok(self.push_out(vec![cols, rows], out, Op::Transpose { x, rows, cols }, req))
    }

    pub fn reshape(&mut self, x: TensorId, dims: Vec<usize>) -> Result<TensorId> {
        let numel: usize = dims.iter().product();
        if numel != self.numel(x) {
            return Err(Error::Shape {
                op: "reshape",
                details: format!("cannot view {:?} as {:?}", self.dims(x), dims),
            });
        }
        let out = self.value(x).to_vec();
        let req = self.requires(x);
        Ok(self.push_out(dims, out, Op::Reshape { x }, req))
    }

    /// Normalizes each row of the trailing dimension to zero mean and unit
    /// variance (biased estimate), then applies the affine pair gamma/beta.
    pub fn layer_norm(&mut self, x: TensorId, gamma: TensorId, beta: TensorId, eps: T) -> Result<TensorId> {
        let xd = self.dims(x).to_vec();
        let width = *xd.last().expect("non-empty dims");
        if self.dims(gamma) != [width] || self.dims(beta) != [width] {
            return Err(Error::Shape {
                op: "layer_norm",
                details: format!(
                    "gamma {:?} and beta {:?} must both be [{}] for input {:?}",
                    self.dims(gamma),
                    self.dims(beta),
                    width,
                    xd
                ),
            });
        }
        let rows = self.numel(x) / width;
        let xv = self.value(x);
        let gv = self.value(gamma);
        let bv = self.value(beta);
        let mut out = vec![T::zero(); rows * width];
        let mut mean = vec![T::zero(); rows];
        let mut rstd = vec![T::zero(); rows];
        for r in 0..rows {
            let xr = &xv[r * width..(r + 1) * width];
            let mut s = 0.0f64;
            for &v in xr {
                s += v.to_f64();
            }
            let mu = s / width as f64;
            let mut var = 0.0f64;
            for &v in xr {
                let d = v.to_f64() - mu;
                var += d * d;
            }
            var /= width as f64;
            let rs = 1.0 / (var + eps.to_f64()).sqrt();
            mean[r] = T::from_f64(mu);
            rstd[r] = T::from_f64(rs);
            for (j, &v) in xr.iter().enumerate() {
                let xhat = T::from_f64((v.to_f64() - mu) * rs);
                out[r * width + j] = xhat * gv[j] + bv[j];
            }
        }
        let req = self.requires(x) || self.requires(gamma) || self.requires(beta);
        Ok(self.push_out(xd, out, Op::LayerNorm { x, gamma, beta, width, mean, rstd }, req))
    }

    /// Softmax over the trailing dimension with max subtraction. Rows may
    /// contain `-inf` (masked keys) but not NaN, and at least one entry per
    /// row must be finite.
    pub fn softmax_last(&mut self, x: TensorId) -> Result<TensorId> {
        let xd = self.dims(x).to_vec();
        let width = *xd.last().expect("non-empty dims");
        let rows = self.numel(x) / width;
        let xv = self.value(x);
        let mut out = vec![T::zero(); rows * width];
        for r in 0..rows {
            let xr = &xv[r * width..(r + 1) * width];
            let mut max = T::neg_infinity();
            for &v in xr {
                if v != v {
                    return Err(Error::Numeric {
                        op: "softmax_last",
                        details: format!("NaN in row {r}"),
                    });
                }
                if v > max {
                    max = v;
                }
            }
            if max == T::neg_infinity() {
                return Err(Error::Numeric {
                    op: "softmax_last",
                    details: format!("row {r} is entirely -inf, nothing to attend to"),
                });
            }
            let mut denom = T::zero();
            for (j, &v) in xr.iter().enumerate() {
                let e = (v - max).exp();
                out[r * width + j] = e;
                denom = denom + e;
            }
            for j in 0..width {
                out[r * width + j] = out[r * width + j] / denom;
            }
        }
        let req = self.requires(x);
        Ok(self.push_out(xd, out, Op::SoftmaxLast { x, width }, req))
    }

    pub fn gelu(&mut self, x: TensorId) -> TensorId {
        let out: Vec<T> = self.value(x).iter().map(|&v| gelu(v)).collect();
        let req = self.requires(x);
        self.push_out(self.dims(x).to_vec(), out, Op::Gelu { x }, req)
    }

    /// Gathers `table` rows by token id. Backward scatter-adds into the
    /// table, so repeated ids accumulate.
    pub fn embedding_lookup(&mut self, table: TensorId, ids: &[u32]) -> Result<TensorId> {
        let (vocab, width) = self.rank2(table, "embedding_lookup")?;
        for (pos, &id) in ids.iter().enumerate() {
            if id as usize >= vocab {
                return Err(Error::Index {
                    op: "embedding_lookup",
                    details: format!("id {id} at position {pos} exceeds table rows {vocab}"),
                });
            }
        }
        let tv = self.value(table);
        let mut out = vec![T::zero(); ids.len() * width];
        for (i, &id) in ids.iter().enumerate() {
            out[i * width..(i + 1) * width]
                .copy_from_slice(&tv[id as usize * width..(id as usize + 1) * width]);
        }
        let req = self.requires(table);
        Ok(self.push_out(
            vec![ids.len(), width],
            out,
            Op::EmbedLookup { table, ids: ids.to_vec(), width },
            req,
        ))
    }

    /// Selects rows of a rank-2 tensor; rows may repeat.
    pub fn gather_rows(&mut self, x: TensorId, rows: &[u32]) -> Result<TensorId> {
        let (n, width) = self.rank2(x, "gather_rows")?;
        for (pos, &r) in rows.iter().enumerate() {
            if r as usize >= n {
                return Err(Error::Index {
                    op: "gather_rows",
                    details: format!("row {r} at position {pos} exceeds {n} rows"),
                });
            }
        }
        let xv = self.value(x);
        let mut out = vec![T::zero(); rows.len() * width];
        for (i, &r) in rows.iter().enumerate() {
            out[i * width..(i + 1) * width]
                .copy_from_slice(&xv[r as usize * width..(r as usize + 1) * width]);
        }
        let req = self.requires(x);
        Ok(self.push_out(
            vec![rows.len(), width],
            out,
            Op::GatherRows { x, rows: rows.to_vec(), width },
            req,
        ))
    }

    /// Concatenates row pairs `[x[i], x[j]]` into rows of width `2w`, the
    /// feature layout of the residue-pair head.
    pub fn gather_pairs(&mut self, x: TensorId, pairs: &[(u32, u32)]) -> Result<TensorId> {
        let (n, width) = self.rank2(x, "gather_pairs")?;
        for (pos, &(i, j)) in pairs.iter().enumerate() {
            if i as usize >= n || j as usize >= n {
                return Err(Error::Index {
                    op: "gather_pairs",
                    details: format!("pair ({i}, {j}) at position {pos} exceeds {n} rows"),
                });
            }
        }
        let xv = self.value(x);
        let mut out = vec![T::zero(); pairs.len() * 2 * width];
        for (p, &(i, j)) in pairs.iter().enumerate() {
            let base = p * 2 * width;
            out[base..base + width]
                .copy_from_slice(&xv[i as usize * width..(i as usize + 1) * width]);
            out[base + width..base + 2 * width]
                .copy_from_slice(&xv[j as usize * width..(j as usize + 1) * width]);
        }
        let req = self.requires(x);
        Ok(self.push_out(
            vec![pairs.len(), 2 * width],
            out,
            Op::GatherPairs { x, pairs: pairs.to_vec(), width },
            req,
        ))
    }

    /// `[batch*seq, hidden]` to `[batch*heads, seq, hidden/heads]`.
    pub fn split_heads(&mut self, x: TensorId, batch: usize, seq: usize, heads: usize) -> Result<TensorId> {
        let (rows, hidden) = self.rank2(x, "split_heads")?;
        if rows != batch * seq || hidden % heads != 0 {
            return Err(Error::Shape {
                op: "split_heads",
                details: format!(
                    "input {:?} incompatible with batch {batch}, seq {seq}, heads {heads}",
                    self.dims(x)
                ),
            });
        }
        let hd = hidden / heads;
        let xv = self.value(x);
        let mut out = vec![T::zero(); rows * hidden];
        for b in 0..batch {
            for h in 0..heads {
                for l in 0..seq {
                    let src = (b * seq + l) * hidden + h * hd;
                    let dst = ((b * heads + h) * seq + l) * hd;
                    out[dst..dst + hd].copy_from_slice(&xv[src..src + hd]);
                }
            }
        }
        let req = self.requires(x);
        Ok(self.push_out(
            vec![batch * heads, seq, hd],
            out,
            Op::SplitHeads { x, batch, seq, heads, head_dim: hd },
            req,
        ))
    }

    /// Inverse of [`Tape::split_heads`].
    pub fn merge_heads(&mut self, x: TensorId, batch: usize, seq: usize, heads: usize) -> Result<TensorId> {
        let (groups, s, hd) = self.rank3(x, "merge_heads")?;
        if groups != batch * heads || s != seq {
            return Err(Error::Shape {
                op: "merge_heads",
                details: format!(
                    "input {:?} incompatible with batch {batch}, seq {seq}, heads {heads}",
                    self.dims(x)
                ),
            });
        }
        let hidden = heads * hd;
        let xv = self.value(x);
        let mut out = vec![T::zero(); batch * seq * hidden];
        for b in 0..batch {
            for h in 0..heads {
                for l in 0..seq {
                    let src = ((b * heads + h) * seq + l) * hd;
                    let dst = (b * seq + l) * hidden + h * hd;
                    out[dst..dst + hd].copy_from_slice(&xv[src..src + hd]);
                }
            }
        }
        let req = self.requires(x);
        Ok(self.push_out(
            vec![batch * seq, hidden],
            out,
            Op::MergeHeads { x, batch, seq, heads, head_dim: hd },
            req,
        ))
    }

    /// Sets scores of invalid keys to `-inf` so softmax assigns them zero
    /// weight. `x` is `[batch*heads, q, k]`; `key_valid` is `[batch, k]`
    /// flattened. Queries are left alone: padded query rows still produce
    /// values, which downstream losses ignore.
    pub fn add_key_mask(&mut self, x: TensorId, key_valid: &[bool], heads: usize) -> Result<TensorId> {
        let (g, m, n) = self.rank3(x, "add_key_mask")?;
        if heads == 0 || g % heads != 0 || key_valid.len() != (g / heads) * n {
            return Err(Error::Shape {
                op: "add_key_mask",
                details: format!(
                    "scores {:?} with {heads} heads need a mask of {} keys, got {}",
                    self.dims(x),
                    (g / heads.max(1)) * n,
                    key_valid.len()
                ),
            });
        }
        let batch = g / heads;
        let mut out = self.value(x).to_vec();
        for b in 0..batch {
            for j in 0..n {
                if !key_valid[b * n + j] {
                    for h in 0..heads {
                        let base = (b * heads + h) * m * n;
                        for i in 0..m {
                            out[base + i * n + j] = T::neg_infinity();
                        }
                    }
                }
            }
        }
        let req = self.requires(x);
        Ok(self.push_out(vec![g, m, n], out, Op::AddKeyMask { x }, req))
    }

    /// Inverted dropout: each element survives with probability `1 - rate`
    /// and is scaled by `1/(1 - rate)`, so eval needs no rescaling. Rate 0
    /// is the identity and draws nothing from the generator.
    pub fn dropout<R: Rng>(&mut self, x: TensorId, rate: f64, rng: &mut R) -> Result<TensorId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!(
                "dropout rate must be in [0, 1), got {rate}"
            )));
        }
        if rate == 0.0 {
            return Ok(x);
        }
        let scale = T::from_f64(1.0 / (1.0 - rate));
        let keep: Vec<T> = (0..self.numel(x))
            .map(|_| if rng.gen::<f64>() < rate { T::zero() } else { scale })
            .collect();
        let out: Vec<T> = self.value(x).iter().zip(&keep).map(|(&v, &k)| v * k).collect();
        let req = self.requires(x);
        Ok(self.push_out(self.dims(x).to_vec(), out, Op::Dropout { x, keep }, req))
    }

    /// Scalar `sum(x * weights)`, the scalarizer used by gradient checks.
    pub fn weighted_sum(&mut self, x: TensorId, weights: &[T]) -> Result<TensorId> {
        if weights.len() != self.numel(x) {
            return Err(Error::Shape {
                op: "weighted_sum",
                details: format!("{} weights for {} elements", weights.len(), self.numel(x)),
            });
        }
        let mut s = 0.0f64;
        for (&v, &w) in self.value(x).iter().zip(weights) {
            s += v.to_f64() * w.to_f64();
        }
        let req = self.requires(x);
        Ok(self.push_out(
            vec![1],
            vec![T::from_f64(s)],
            Op::WeightedSum { x, weights: weights.to_vec() },
            req,
        ))
    }

    /// Mean negative log-softmax probability of the target class over the
    /// selected rows. Rows with `select[r] == false` contribute nothing and
    /// their targets are ignored entirely.
    pub fn cross_entropy_masked(
        &mut self,
        logits: TensorId,
        targets: &[u32],
        select: &[bool],
    ) -> Result<TensorId> {
        let (rows, width) = self.rank2(logits, "cross_entropy_masked")?;
        if targets.len() != rows || select.len() != rows {
            return Err(Error::Shape {
                op: "cross_entropy_masked",
                details: format!(
                    "logits have {rows} rows but got {} targets and {} selection flags",
                    targets.len(),
                    select.len()
                ),
            });
        }
        let mut sel = Vec::new();
        let mut sel_targets = Vec::new();
        for r in 0..rows {
            if select[r] {
                if targets[r] as usize >= width {
                    return Err(Error::Index {
                        op: "cross_entropy_masked",
                        details: format!("target {} at row {r} exceeds {width} classes", targets[r]),
                    });
                }
                sel.push(r as u32);
                sel_targets.push(targets[r]);
            }
        }
        if sel.is_empty() {
            return Err(Error::EmptySelection("cross_entropy_masked"));
        }
        let xv = self.value(logits);
        let mut norms = Vec::with_capacity(sel.len());
        let mut total = 0.0f64;
        for (&r, &t) in sel.iter().zip(&sel_targets) {
            let xr = &xv[r as usize * width..(r as usize + 1) * width];
            let mut max = xr[0];
            for &v in xr {
                if v != v {
                    return Err(Error::Numeric {
                        op: "cross_entropy_masked",
                        details: format!("NaN in row {r}"),
                    });
                }
                if v > max {
                    max = v;
                }
            }
            let mut denom = 0.0f64;
            for &v in xr {
                denom += (v - max).to_f64().exp();
            }
            let lse = denom.ln();
            norms.push((max, T::from_f64(lse)));
            total += max.to_f64() + lse - xr[t as usize].to_f64();
        }
        let loss = total / sel.len() as f64;
        let req = self.requires(logits);
        Ok(self.push_out(
            vec![1],
            vec![T::from_f64(loss)],
            Op::CrossEntropyMasked { logits, width, sel, targets: sel_targets, norms },
            req,
        ))
    }

    /// Mean binary cross entropy between logits and 0/1 targets, computed
    /// in the numerically stable max-form.
    pub fn bce_with_logits_mean(&mut self, logits: TensorId, targets: &[T]) -> Result<TensorId> {
        if targets.len() != self.numel(logits) {
            return Err(Error::Shape {
                op: "bce_with_logits_mean",
                details: format!("{} targets for {} logits", targets.len(), self.numel(logits)),
            });
        }
        if targets.is_empty() {
            return Err(Error::EmptySelection("bce_with_logits_mean"));
        }
        let mut total = 0.0f64;
        for (&z, &t) in self.value(logits).iter().zip(targets) {
            let z = z.to_f64();
            let t = t.to_f64();
            total += z.max(0.0) - z * t + (-z.abs()).exp().ln_1p();
        }
        let loss = total / targets.len() as f64;
        let req = self.requires(logits);
        Ok(self.push_out(
            vec![1],
            vec![T::from_f64(loss)],
            Op::BceMean { logits, targets: targets.to_vec() },
            req,
        ))
    }

    /// Mean squared error against constant targets.
    pub fn mse_mean(&mut self, pred: TensorId, targets: &[T]) -> Result<TensorId> {
        if targets.len() != self.numel(pred) {
            return Err(Error::Shape {
                op: "mse_mean",
                details: format!("{} targets for {} predictions", targets.len(), self.numel(pred)),
            });
        }
        if targets.is_empty() {
            return Err(Error::EmptySelection("mse_mean"));
        }
        let mut total = 0.0f64;
        for (&p, &t) in self.value(pred).iter().zip(targets) {
            let d = p.to_f64() - t.to_f64();
            total += d * d;
        }
        let loss = total / targets.len() as f64;
        let req = self.requires(pred);
        Ok(self.push_out(
            vec![1],
            vec![T::from_f64(loss)],
            Op::MseMean { pred, targets: targets.to_vec() },
            req,
        ))
    }

    /// Runs reverse-mode accumulation from a scalar root. Gradients land in
    /// per-node buffers readable through [`Tape::grad`].
    pub fn backward(&mut self, root: TensorId) -> Result<()> {
        if self.numel(root) != 1 {
            return Err(Error::Shape {
                op: "backward",
                details: format!("root must be a scalar, got {:?}", self.dims(root)),
            });
        }
        self.grads[root.0] = Some(vec![T::one()]);
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        for rec in self.records.iter().rev() {
            if grads[rec.out.0].is_none() {
                continue;
            }
            let dy = grads[rec.out.0].take().expect("checked above");
            backward_op(&rec.op, rec.out, &dy, nodes, grads);
            grads[rec.out.0] = Some(dy);
        }
        Ok(())
    }
}

/// Lazily allocates the gradient buffer for `id` if the node participates
/// in differentiation; returns None for constants so their gradients are
/// never materialized.
fn slot<'g, T: Scalar>(
    grads: &'g mut [Option<Vec<T>>],
    nodes: &[Node<'_, T>],
    id: TensorId,
) -> Option<&'g mut [T]> {
    if !nodes[id.0].requires {
        return None;
    }
    let numel = nodes[id.0].data.len();
    Some(grads[id.0].get_or_insert_with(|| vec![T::zero(); numel]))
}

fn axpy<T: Scalar>(out: &mut [T], x: &[T], c: T) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o = *o + c * v;
    }
}

fn backward_op<T: Scalar>(
    op: &Op<T>,
    out: TensorId,
    dy: &[T],
    nodes: &[Node<'_, T>],
    grads: &mut [Option<Vec<T>>],
) {
    match op {
        Op::Matmul { a, b, m, k, n } => {
            let (av, bv) = (&*nodes[a.0].data, &*nodes[b.0].data);
            if let Some(da) = slot(grads, nodes, *a) {
                mm_nt(dy, bv, *m, *n, *k, da, true);
            }
            if let Some(db) = slot(grads, nodes, *b) {
                mm_tn(av, dy, *m, *k, *n, db, true);
            }
        }
        Op::MatmulNt { a, b, m, k, n } => {
            let (av, bv) = (&*nodes[a.0].data, &*nodes[b.0].data);
            if let Some(da) = slot(grads, nodes, *a) {
                mm_nn(dy, bv, *m, *n, *k, da, true);
            }
            if let Some(db) = slot(grads, nodes, *b) {
                mm_tn(dy, av, *m, *n, *k, db, true);
            }
        }
        Op::BatchMatmulNn { a, b, g, m, k, n } => {
            let (av, bv) = (&*nodes[a.0].data, &*nodes[b.0].data);
            if let Some(da) = slot(grads, nodes, *a) {
                for gi in 0..*g {
                    mm_nt(
                        &dy[gi * m * n..(gi + 1) * m * n],
                        &bv[gi * k * n..(gi + 1) * k * n],
                        *m,
                        *n,
                        *k,
                        &mut da[gi * m * k..(gi + 1) * m * k],
                        true,
                    );
                }
            }
            if let Some(db) = slot(grads, nodes, *b) {
                for gi in 0..*g {
                    mm_tn(
                        &av[gi * m * k..(gi + 1) * m * k],
                        &dy[gi * m * n..(gi + 1) * m * n],
                        *m,
                        *k,
                        *n,
                        &mut db[gi * k * n..(gi + 1) * k * n],
                        true,
                    );
                }
            }
        }
        Op::BatchMatmulNt { a, b, g, m, k, n } => {
            let (av, bv) = (&*nodes[a.0].data, &*nodes[b.0].data);
            if let Some(da) = slot(grads, nodes, *a) {
                for gi in 0..*g {
                    mm_nn(
                        &dy[gi * m * n..(gi + 1) * m * n],
                        &bv[gi * n * k..(gi + 1) * n * k],
                        *m,
                        *n,
                        *k,
                        &mut da[gi * m * k..(gi + 1) * m * k],
                        true,
                    );
                }
            }
            if let Some(db) = slot(grads, nodes, *b) {
                for gi in 0..*g {
                    mm_tn(
                        &dy[gi * m * n..(gi + 1) * m * n],
                        &av[gi * m * k..(gi + 1) * m * k],
                        *m,
                        *n,
                        *k,
                        &mut db[gi * n * k..(gi + 1) * n * k],
                        true,
                    );
                }
            }
        }
        Op::Add { a, b } => {
            if let Some(da) = slot(grads, nodes, *a) {
                axpy(da, dy, T::one());
            }
            if let Some(db) = slot(grads, nodes, *b) {
                axpy(db, dy, T::one());
            }
        }
        Op::AddRow { x, row, rows, width } => {
            if let Some(dx) = slot(grads, nodes, *x) {
                axpy(dx, dy, T::one());
            }
            if let Some(dr) = slot(grads, nodes, *row) {
                for r in 0..*rows {
                    axpy(dr, &dy[r * width..(r + 1) * width], T::one());
                }
            }
        }
        Op::Scale { x, c } => {
            if let Some(dx) = slot(grads, nodes, *x) {
                axpy(dx, dy, *c);
            }
        }
        Op::Transpose { x, rows, cols } => {
            if let Some(dx) = slot(grads, nodes, *x) {
                for i in 0..*rows {
                    for j in 0..*cols {
                        dx[i * cols + j] = dx[i * cols + j] + dy[j * rows + i];
                    }
                }
            }
        }
        Op::Reshape { x } => {
            if let Some(dx) = slot(grads, nodes, *x) {
                axpy(dx, dy, T::one());
            }
        }
        Op::LayerNorm { x, gamma, beta, width, mean, rstd } => {
            let xv = &*nodes[x.0].data;
            let gv = &*nodes[gamma.0].data;
            let w = *width;
            let rows = xv.len() / w;
            if let Some(dg) = slot(grads, nodes, *gamma) {
                for r in 0..rows {
                    let (mu, rs) = (mean[r], rstd[r]);
                    for j in 0..w {
                        let xhat = (xv[r * w + j] - mu) * rs;
                        dg[j] = dg[j] + dy[r * w + j] * xhat;
                    }
                }
            }
            if let Some(db) = slot(grads, nodes, *beta) {
                for r in 0..rows {
                    axpy(db, &dy[r * w..(r + 1) * w], T::one());
                }
            }
            if let Some(dx) = slot(grads, nodes, *x) {
                for r in 0..rows {
                    let (mu, rs) = (mean[r], rstd[r]);
                    let mut s1 = 0.0f64;
                    let mut s2 = 0.0f64;
                    for j in 0..w {
                        let xhat = (xv[r * w + j] - mu) * rs;
                        let dyg = dy[r * w + j] * gv[j];
                        s1 += dyg.to_f64();
                        s2 += (dyg * xhat).to_f64();
                    }
                    let m1 = T::from_f64(s1 / w as f64);
                    let m2 = T::from_f64(s2 / w as f64);
                    for j in 0..w {
                        let xhat = (xv[r * w + j] - mu) * rs;
                        let dyg = dy[r * w + j] * gv[j];
                        dx[r * w + j] = dx[r * w + j] + rs * (dyg - m1 - xhat * m2);
                    }
                }
            }
        }
        Op::SoftmaxLast { x, width } => {
            // dx_j = y_j (dy_j - sum_k dy_k y_k), using the saved output y.
            let yv = &*nodes[out.0].data;
            if let Some(dx) = slot(grads, nodes, *x) {
                let w = *width;
                let rows = yv.len() / w;
                for r in 0..rows {
                    let yr = &yv[r * w..(r + 1) * w];
                    let dyr = &dy[r * w..(r + 1) * w];
                    let mut s = 0.0f64;
                    for (&y, &g) in yr.iter().zip(dyr) {
                        s += (y * g).to_f64();
                    }
                    let s = T::from_f64(s);
                    for j in 0..w {
                        dx[r * w + j] = dx[r * w + j] + yr[j] * (dyr[j] - s);
                    }
                }
            }
        }
        Op::Gelu { x } => {
            let xv = &*nodes[x.0].data;
            if let Some(dx) = slot(grads, nodes, *x) {
                for ((d, &g), &v) in dx.iter_mut().zip(dy).zip(xv.iter()) {
                    *d = *d + g * gelu_grad(v);
                }
            }
        }
        Op::EmbedLookup { table, ids, width } => {
            if let Some(dt) = slot(grads, nodes, *table) {
                for (i, &id) in ids.iter().enumerate() {
                    let dst = id as usize * width;
                    axpy(&mut dt[dst..dst + width], &dy[i * width..(i + 1) * width], T::one());
                }
            }
        }
        Op::GatherRows { x, rows, width } => {
            if let Some(dx) = slot(grads, nodes, *x) {
                for (i, &r) in rows.iter().enumerate() {
                    let dst = r as usize * width;
                    axpy(&mut dx[dst..dst + width], &dy[i * width..(i + 1) * width], T::one());
                }
            }
        }
        Op::GatherPairs { x, pairs, width } => {
            if let Some(dx) = slot(grads, nodes, *x) {
                let w = *width;
                for (p, &(i, j)) in pairs.iter().enumerate() {
                    let base = p * 2 * w;
                    axpy(&mut dx[i as usize * w..(i as usize + 1) * w], &dy[base..base + w], T::one());
                    axpy(
                        &mut dx[j as usize * w..(j as usize + 1) * w],
                        &dy[base + w..base + 2 * w],
                        T::one(),
                    );
                }
            }
        }
        Op::SplitHeads { x, batch, seq, heads, head_dim } => {
            if let Some(dx) = slot(grads, nodes, *x) {
                let (hd, hidden) = (*head_dim, heads * head_dim);
                for b in 0..*batch {
                    for h in 0..*heads {
                        for l in 0..*seq {
                            let src = ((b * heads + h) * seq + l) * hd;
                            let dst = (b * seq + l) * hidden + h * hd;
                            axpy(&mut dx[dst..dst + hd], &dy[src..src + hd], T::one());
                        }
                    }
                }
            }
        }
        Op::MergeHeads { x, batch, seq, heads, head_dim } => {
            if let Some(dx) = slot(grads, nodes, *x) {
                let (hd, hidden) = (*head_dim, heads * head_dim);
                for b in 0..*batch {
                    for h in 0..*heads {
                        for l in 0..*seq {
                            let src = (b * seq + l) * hidden + h * hd;
                            let dst = ((b * heads + h) * seq + l) * hd;
                            axpy(&mut dx[dst..dst + hd], &dy[src..src + hd], T::one());
                        }
                    }
                }
            }
        }
        Op::AddKeyMask { x } => {
            if let Some(dx) = slot(grads, nodes, *x) {
                axpy(dx, dy, T::one());
            }
        }
        Op::Dropout { x, keep } => {
            if let Some(dx) = slot(grads, nodes, *x) {
                for ((d, &g), &k) in dx.iter_mut().zip(dy).zip(keep.iter()) {
                    *d = *d + g * k;
                }
            }
        }
        Op::WeightedSum { x, weights } => {
            if let Some(dx) = slot(grads, nodes, *x) {
                axpy(dx, weights, dy[0]);
            }
        }
        Op::CrossEntropyMasked { logits, width, sel, targets, norms } => {
            if let Some(dl) = slot(grads, nodes, *logits) {
                let xv = &*nodes[logits.0].data;
                let w = *width;
                let scale = dy[0] / T::from_usize(sel.len());
                for ((&r, &t), &(max, lse)) in sel.iter().zip(targets).zip(norms.iter()) {
                    let r = r as usize;
                    for j in 0..w {
                        let p = (xv[r * w + j] - max - lse).exp();
                        let delta = if j == t as usize { T::one() } else { T::zero() };
                        dl[r * w + j] = dl[r * w + j] + scale * (p - delta);
                    }
                }
            }
        }
        Op::BceMean { logits, targets } => {
            if let Some(dl) = slot(grads, nodes, *logits) {
                let zv = &*nodes[logits.0].data;
                let scale = dy[0] / T::from_usize(targets.len());
                for ((d, &z), &t) in dl.iter_mut().zip(zv.iter()).zip(targets.iter()) {
                    let sig = T::from_f64(sigmoid(z.to_f64()));
                    *d = *d + scale * (sig - t);
                }
            }
        }
        Op::MseMean { pred, targets } => {
            if let Some(dp) = slot(grads, nodes, *pred) {
                let pv = &*nodes[pred.0].data;
                let scale = dy[0] * T::from_f64(2.0) / T::from_usize(targets.len());
                for ((d, &p), &t) in dp.iter_mut().zip(pv.iter()).zip(targets.iter()) {
                    *d = *d + scale * (p - t);
                }
            }
        }
    }
}

/// Numerically stable logistic function.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn matmul_backward_matches_hand_values() {
        // A = [[1,2,3],[4,5,6]], B = [[7,8],[9,10],[11,12]], loss = sum(A·B).
        // dA[i][p] = sum_j B[p][j], dB[p][j] = sum_i A[i][p].
        let mut tape: Tape<f32> = Tape::new();
        let a = tape.leaf_owned(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], true);
        let b = tape.leaf_owned(vec![3, 2], vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0], true);
        let c = tape.matmul(a, b).unwrap();
        let loss = tape.weighted_sum(c, &[1.0; 4]).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[15.0, 19.0, 23.0, 15.0, 19.0, 23.0]);
        assert_eq!(tape.grad(b).unwrap(), &[5.0, 5.0, 7.0, 7.0, 9.0, 9.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape: Tape<f32> = Tape::new();
        let a = tape.leaf_owned(vec![2, 3], vec![0.0; 6], false);
        let b = tape.leaf_owned(vec![4, 5], vec![0.0; 20], false);
        let msg = tape.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
    }

    #[test]
    fn fan_out_accumulates_gradients() {
        // y = x + x, loss = sum(w * y), so dx = 2w.
        let mut tape: Tape<f32> = Tape::new();
        let x = tape.leaf_owned(vec![3], vec![1.0, 2.0, 3.0], true);
        let y = tape.add(x, x).unwrap();
        let loss = tape.weighted_sum(y, &[0.5, 1.0, 2.0]).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 2.0, 4.0]);
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut tape: Tape<f32> = Tape::new();
        let x = tape.leaf_owned(vec![2], vec![1.0, 2.0], true);
        let err = tape.backward(x).unwrap_err().to_string();
        assert!(err.contains("scalar"), "{err}");
    }

    #[test]
    fn constants_never_get_gradients() {
        let mut tape: Tape<f32> = Tape::new();
        let x = tape.leaf_owned(vec![2], vec![1.0, 2.0], true);
        let c = tape.constant(vec![2], vec![5.0, 5.0]);
        let y = tape.add(x, c).unwrap();
        let loss = tape.weighted_sum(y, &[1.0, 1.0]).unwrap();
        tape.backward(loss).unwrap();
        assert!(tape.grad(c).is_none());
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_resist_large_logits() {
        let mut tape: Tape<f32> = Tape::new();
        let x = tape.leaf_owned(vec![2, 3], vec![1e4, 1e4 - 1.0, 1e4 - 2.0, -1e4, 0.0, 1.0], false);
        let y = tape.softmax_last(x).unwrap();
        let v = tape.value(y);
        for r in 0..2 {
            let s: f32 = v[r * 3..(r + 1) * 3].iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
            assert!(v[r * 3..(r + 1) * 3].iter().all(|p| p.is_finite()));
        }
    }

    #[test]
    fn softmax_rejects_nan_rows() {
        let mut tape: Tape<f32> = Tape::new();
        let x = tape.leaf_owned(vec![1, 3], vec![0.0, f32::NAN, 1.0], false);
        let err = tape.softmax_last(x).unwrap_err().to_string();
        assert!(err.contains("NaN"), "{err}");
    }

    #[test]
    fn softmax_rejects_fully_masked_rows() {
        let mut tape: Tape<f32> = Tape::new();
        let x = tape.leaf_owned(vec![1, 2], vec![f32::NEG_INFINITY; 2], false);
        assert!(tape.softmax_last(x).is_err());
    }

    #[test]
    fn masked_keys_get_exactly_zero_weight() {
        let mut tape: Tape<f32> = Tape::new();
        let x = tape.leaf_owned(vec![2, 2, 3], vec![0.3; 12], false);
        let masked = tape.add_key_mask(x, &[true, true, false], 2).unwrap();
        let y = tape.softmax_last(masked).unwrap();
        let v = tape.value(y);
        for row in 0..4 {
            assert_eq!(v[row * 3 + 2], 0.0);
            assert!((v[row * 3] - 0.5).abs() < 1e-6);
        }
    }

    #[test]
    fn layer_norm_standardizes_rows() {
        let mut tape: Tape<f32> = Tape::new();
        let x = tape.leaf_owned(vec![2, 4], vec![1.0, 2.0, 3.0, 4.0, -5.0, 0.0, 5.0, 10.0], false);
        let g = tape.constant(vec![4], vec![1.0; 4]);
        let b = tape.constant(vec![4], vec![0.0; 4]);
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        let v = tape.value(y);
        for r in 0..2 {
            let row = &v[r * 4..(r + 1) * 4];
            let mean: f32 = row.iter().sum::<f32>() / 4.0;
            let var: f32 = row.iter().map(|&t| (t - mean) * (t - mean)).sum::<f32>() / 4.0;
            assert!(mean.abs() < 1e-5, "row {r} mean {mean}");
            assert!((var - 1.0).abs() < 1e-3, "row {r} var {var}");
        }
    }

    #[test]
    fn embedding_lookup_error_names_position() {
        let mut tape: Tape<f32> = Tape::new();
        let table = tape.leaf_owned(vec![5, 2], vec![0.0; 10], false);
        let msg = tape.embedding_lookup(table, &[1, 7, 2]).unwrap_err().to_string();
        assert!(msg.contains("id 7") && msg.contains("position 1"), "{msg}");
    }

    #[test]
    fn cross_entropy_uniform_logits_is_log_width() {
        let mut tape: Tape<f32> = Tape::new();
        let logits = tape.leaf_owned(vec![2, 30], vec![0.0; 60], false);
        let loss = tape.cross_entropy_masked(logits, &[4, 17], &[true, true]).unwrap();
        let v = tape.value(loss)[0];
        assert!((v - (30.0f32).ln()).abs() < 1e-6, "{v}");
    }

    #[test]
    fn cross_entropy_rejects_empty_selection() {
        let mut tape: Tape<f32> = Tape::new();
        let logits = tape.leaf_owned(vec![2, 3], vec![0.0; 6], false);
        let err = tape.cross_entropy_masked(logits, &[0, 1], &[false, false]).unwrap_err();
        assert!(matches!(err, Error::EmptySelection(_)));
    }

    #[test]
    fn cross_entropy_ignores_targets_of_unselected_rows() {
        // Row 1 is unselected, so its out-of-range target must not trip
        // validation; padded rows carry garbage targets by design.
        let mut tape: Tape<f32> = Tape::new();
        let logits = tape.leaf_owned(vec![2, 3], vec![0.0; 6], false);
        assert!(tape.cross_entropy_masked(logits, &[1, 99], &[true, false]).is_ok());
        let logits2 = tape.leaf_owned(vec![2, 3], vec![0.0; 6], false);
        assert!(tape.cross_entropy_masked(logits2, &[1, 99], &[true, true]).is_err());
    }

    #[test]
    fn dropout_rate_zero_is_identity() {
        let mut tape: Tape<f32> = Tape::new();
        let x = tape.leaf_owned(vec![4], vec![1.0, 2.0, 3.0, 4.0], false);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let y = tape.dropout(x, 0.0, &mut rng).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn dropout_keeps_or_scales() {
        let mut tape: Tape<f32> = Tape::new();
        let x = tape.leaf_owned(vec![64], vec![1.0; 64], false);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let y = tape.dropout(x, 0.5, &mut rng).unwrap();
        let v = tape.value(y);
        assert!(v.iter().all(|&t| t == 0.0 || t == 2.0));
        assert!(v.iter().any(|&t| t == 0.0) && v.iter().any(|&t| t == 2.0));
    }

    #[test]
    fn split_then_merge_roundtrips() {
        let mut tape: Tape<f32> = Tape::new();
        let data: Vec<f32> = (0..24).map(|i| i as f32).collect();
        let x = tape.leaf_owned(vec![6, 4], data.clone(), false);
        let s = tape.split_heads(x, 2, 3, 2).unwrap();
        assert_eq!(tape.dims(s), &[4, 3, 2]);
        let m = tape.merge_heads(s, 2, 3, 2).unwrap();
        assert_eq!(tape.value(m), &data[..]);
    }

    #[test]
    fn bce_matches_direct_formula_on_moderate_logits() {
        let mut tape: Tape<f32> = Tape::new();
        let z = tape.leaf_owned(vec![2], vec![0.5, -1.0], false);
        let loss = tape.bce_with_logits_mean(z, &[1.0, 0.0]).unwrap();
        let direct = (-(sigmoid(0.5)).ln() - (1.0 - sigmoid(-1.0)).ln()) / 2.0;
        assert!((tape.value(loss)[0] as f64 - direct).abs() < 1e-6);
    }

    #[test]
    fn mse_matches_hand_value() {
        let mut tape: Tape<f32> = Tape::new();
        let p = tape.leaf_owned(vec![2], vec![1.0, 3.0], false);
        let loss = tape.mse_mean(p, &[0.0, 1.0]).unwrap();
        assert_eq!(tape.value(loss)[0], 2.5);
    }
}
