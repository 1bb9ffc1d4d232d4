//! Wengert-list reverse-mode differentiation.
//!
//! Every forward op appends one node holding its output tensor plus the
//! metadata its backward rule needs. Nodes are created strictly after their
//! inputs, so the vector order is a topological order and `backward` is a
//! single reverse sweep that visits each op exactly once.
//!
//! A tape is single-owner and single-threaded; determinism comes from fixed
//! summation order everywhere.

use super::{Tensor, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

/// Recorded primitive. Saved buffers hold whatever the backward rule reuses
/// from the forward pass (softmax probabilities, layer-norm statistics, ...).
#[derive(Debug, Clone)]
pub enum Op {
    Leaf,
    Add { a: TensorId, b: TensorId },
    Sub { a: TensorId, b: TensorId },
    Mul { a: TensorId, b: TensorId },
    Scale { a: TensorId, c: f64 },
    Matmul { a: TensorId, b: TensorId, m: usize, k: usize, n: usize },
    Transpose { a: TensorId, rows: usize, cols: usize },
    /// (rows × cols) + (cols,) broadcast over rows.
    AddRowBroadcast { a: TensorId, bias: TensorId, rows: usize, cols: usize },
    SliceCols { a: TensorId, start: usize, len: usize, rows: usize, cols: usize },
    ConcatCols { parts: Vec<(TensorId, usize)>, rows: usize },
    /// Extract row `index` of a matrix as a rank-1 vector.
    Row { a: TensorId, index: usize, cols: usize },
    /// Arithmetic mean of the selected rows, as a rank-1 vector.
    MeanRows { a: TensorId, positions: Vec<usize>, cols: usize },
    /// Row-wise softmax; `probs` is the forward output.
    SoftmaxRows { a: TensorId, rows: usize, cols: usize },
    /// Row-wise layer normalization with per-feature gain and bias.
    LayerNorm {
        x: TensorId,
        gain: TensorId,
        bias: TensorId,
        rows: usize,
        cols: usize,
        /// Saved (x - mean) / sqrt(var + eps), row-major.
        xhat: Vec<f64>,
        /// Saved 1 / sqrt(var + eps) per row.
        inv_std: Vec<f64>,
    },
    Gelu { a: TensorId },
    /// Gather rows of `table` (v × dim) at `ids`.
    Gather { table: TensorId, ids: Vec<u32>, dim: usize },
    /// Mean of -log softmax(row)[target] over rows; saves the row softmax.
    CrossEntropyMean { logits: TensorId, targets: Vec<usize>, rows: usize, cols: usize, probs: Vec<f64> },
    Cosine { u: TensorId, v: TensorId, norm_u: f64, norm_v: f64, value: f64 },
    StackScalars { parts: Vec<TensorId> },
    Sum { a: TensorId },
    Mean { a: TensorId },
}

struct Node {
    tensor: Tensor,
    op: Op,
}

/// The differentiation tape: an append-only record of executed primitives.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn finite(op: &'static str, data: &[f64]) -> Result<(), TensorError> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, tensor: Tensor, op: Op) -> TensorId {
        self.nodes.push(Node { tensor, op });
        TensorId(self.nodes.len() - 1)
    }

    // ── node access ──────────────────────────────────────────────────

    pub fn data(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].tensor.data
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].tensor.shape
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.nodes[id.0].tensor.requires_grad
    }

    /// Scalar value of a one-element node.
    pub fn value(&self, id: TensorId) -> f64 {
        debug_assert_eq!(self.nodes[id.0].tensor.numel(), 1);
        self.nodes[id.0].tensor.data[0]
    }

    /// Persistent accumulated gradient of a node (populated by `backward`).
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].tensor.grad.as_deref()
    }

    pub fn zero_grad(&mut self, id: TensorId) {
        self.nodes[id.0].tensor.zero_grad();
    }

    // ── leaves ───────────────────────────────────────────────────────

    pub fn leaf(&mut self, tensor: Tensor) -> TensorId {
        self.push(tensor, Op::Leaf)
    }

    /// Differentiable leaf.
    pub fn var(&mut self, data: Vec<f64>, shape: Vec<usize>) -> TensorId {
        self.leaf(Tensor::param(data, shape))
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, data: Vec<f64>, shape: Vec<usize>) -> TensorId {
        self.leaf(Tensor::new(data, shape))
    }

    pub fn scalar(&mut self, v: f64) -> TensorId {
        self.leaf(Tensor::scalar(v))
    }

    fn any_requires(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].tensor.requires_grad)
    }

    fn emit(&mut self, op: &'static str, data: Vec<f64>, shape: Vec<usize>, requires: bool, rec: Op) -> Result<TensorId, TensorError> {
        finite(op, &data)?;
        let mut t = Tensor::new(data, shape);
        t.requires_grad = requires;
        Ok(self.push(t, rec))
    }

    // ── elementwise ──────────────────────────────────────────────────

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.binary_map("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.binary_map("sub", a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.binary_map("mul", a, b, |x, y| x * y, Op::Mul { a, b })
    }

    fn binary_map(
        &mut self,
        name: &'static str,
        a: TensorId,
        b: TensorId,
        f: impl Fn(f64, f64) -> f64,
        rec: Op,
    ) -> Result<TensorId, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op: name,
                detail: format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            });
        }
        let data: Vec<f64> = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        let shape = self.shape(a).to_vec();
        let req = self.any_requires(&[a, b]);
        self.emit(name, data, shape, req, rec)
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> Result<TensorId, TensorError> {
        let data: Vec<f64> = self.data(a).iter().map(|&x| x * c).collect();
        let shape = self.shape(a).to_vec();
        let req = self.requires_grad(a);
        self.emit("scale", data, shape, req, Op::Scale { a, c })
    }

    // ── linear algebra ───────────────────────────────────────────────

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                detail: format!("{sa:?} x {sb:?}"),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(self.data(a), self.data(b), m, k, n);
        let req = self.any_requires(&[a, b]);
        self.emit("matmul", out, vec![m, n], req, Op::Matmul { a, b, m, k, n })
    }

    pub fn transpose(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        let s = self.shape(a);
        assert_eq!(s.len(), 2, "transpose expects a matrix");
        let (rows, cols) = (s[0], s[1]);
        let src = self.data(a);
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = src[r * cols + c];
            }
        }
        let req = self.requires_grad(a);
        self.emit("transpose", out, vec![cols, rows], req, Op::Transpose { a, rows, cols })
    }

    pub fn add_row_broadcast(&mut self, a: TensorId, bias: TensorId) -> Result<TensorId, TensorError> {
        let s = self.shape(a).to_vec();
        assert_eq!(s.len(), 2);
        let (rows, cols) = (s[0], s[1]);
        if self.shape(bias) != [cols] {
            return Err(TensorError::ShapeMismatch {
                op: "add_row_broadcast",
                detail: format!("{s:?} + {:?}", self.shape(bias)),
            });
        }
        let bdat = self.data(bias);
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let arow = &self.data(a)[r * cols..(r + 1) * cols];
            out.extend(arow.iter().zip(bdat).map(|(&x, &y)| x + y));
        }
        let req = self.any_requires(&[a, bias]);
        self.emit("add_row_broadcast", out, s, req, Op::AddRowBroadcast { a, bias, rows, cols })
    }

    pub fn slice_cols(&mut self, a: TensorId, start: usize, len: usize) -> Result<TensorId, TensorError> {
        let s = self.shape(a);
        assert_eq!(s.len(), 2);
        let (rows, cols) = (s[0], s[1]);
        assert!(start + len <= cols, "column slice out of bounds");
        let src = self.data(a);
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&src[r * cols + start..r * cols + start + len]);
        }
        let req = self.requires_grad(a);
        self.emit("slice_cols", out, vec![rows, len], req, Op::SliceCols { a, start, len, rows, cols })
    }

    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId, TensorError> {
        assert!(!parts.is_empty());
        let rows = self.shape(parts[0])[0];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            assert_eq!(s.len(), 2);
            assert_eq!(s[0], rows, "concat_cols row mismatch");
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.data(p)[r * w..(r + 1) * w]);
            }
        }
        let req = self.any_requires(parts);
        let rec = Op::ConcatCols { parts: parts.iter().copied().zip(widths).collect(), rows };
        self.emit("concat_cols", out, vec![rows, total], req, rec)
    }

    pub fn row(&mut self, a: TensorId, index: usize) -> Result<TensorId, TensorError> {
        let s = self.shape(a);
        assert_eq!(s.len(), 2);
        let cols = s[1];
        assert!(index < s[0], "row index out of bounds");
        let out = self.data(a)[index * cols..(index + 1) * cols].to_vec();
        let req = self.requires_grad(a);
        self.emit("row", out, vec![cols], req, Op::Row { a, index, cols })
    }

    pub fn mean_rows(&mut self, a: TensorId, positions: &[usize]) -> Result<TensorId, TensorError> {
        if positions.is_empty() {
            return Err(TensorError::EmptySelection { op: "mean_rows" });
        }
        let s = self.shape(a);
        assert_eq!(s.len(), 2);
        let (rows, cols) = (s[0], s[1]);
        let mut out = vec![0.0; cols];
        for &p in positions {
            assert!(p < rows, "mean_rows position out of bounds");
            for (o, &x) in out.iter_mut().zip(&self.data(a)[p * cols..(p + 1) * cols]) {
                *o += x;
            }
        }
        let inv = 1.0 / positions.len() as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        let req = self.requires_grad(a);
        self.emit("mean_rows", out, vec![cols], req, Op::MeanRows { a, positions: positions.to_vec(), cols })
    }

    // ── nonlinearities ───────────────────────────────────────────────

    pub fn softmax_rows(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        let s = self.shape(a).to_vec();
        assert_eq!(s.len(), 2);
        let (rows, cols) = (s[0], s[1]);
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &self.data(a)[r * cols..(r + 1) * cols];
            softmax_into(row, &mut out[r * cols..(r + 1) * cols]);
        }
        let req = self.requires_grad(a);
        self.emit("softmax_rows", out, s, req, Op::SoftmaxRows { a, rows, cols })
    }

    pub fn layer_norm(&mut self, x: TensorId, gain: TensorId, bias: TensorId, eps: f64) -> Result<TensorId, TensorError> {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 2);
        let (rows, cols) = (s[0], s[1]);
        if self.shape(gain) != [cols] || self.shape(bias) != [cols] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                detail: format!("x {s:?}, gain {:?}, bias {:?}", self.shape(gain), self.shape(bias)),
            });
        }
        let mut out = vec![0.0; rows * cols];
        let mut xhat = vec![0.0; rows * cols];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &self.data(x)[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for c in 0..cols {
                let xh = (row[c] - mean) * inv;
                xhat[r * cols + c] = xh;
                out[r * cols + c] = xh * self.data(gain)[c] + self.data(bias)[c];
            }
        }
        let req = self.any_requires(&[x, gain, bias]);
        self.emit("layer_norm", out, s, req, Op::LayerNorm { x, gain, bias, rows, cols, xhat, inv_std })
    }

    pub fn gelu(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        let data: Vec<f64> = self.data(a).iter().map(|&x| gelu_fwd(x)).collect();
        let shape = self.shape(a).to_vec();
        let req = self.requires_grad(a);
        self.emit("gelu", data, shape, req, Op::Gelu { a })
    }

    // ── gather / losses ──────────────────────────────────────────────

    /// Embedding lookup: rows of `table` (vocab × dim) at `ids`.
    pub fn gather(&mut self, table: TensorId, ids: &[u32]) -> Result<TensorId, TensorError> {
        let s = self.shape(table);
        assert_eq!(s.len(), 2);
        let (vocab, dim) = (s[0], s[1]);
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            let id = id as usize;
            assert!(id < vocab, "gather id {id} out of vocab {vocab}");
            out.extend_from_slice(&self.data(table)[id * dim..(id + 1) * dim]);
        }
        let req = self.requires_grad(table);
        self.emit("gather", out, vec![ids.len(), dim], req, Op::Gather { table, ids: ids.to_vec(), dim })
    }

    /// Mean of -log softmax(row)[target] over all rows, computed as
    /// logsumexp(row) - row[target] with max subtraction.
    pub fn cross_entropy_mean(&mut self, logits: TensorId, targets: &[usize]) -> Result<TensorId, TensorError> {
        let s = self.shape(logits);
        assert_eq!(s.len(), 2);
        let (rows, cols) = (s[0], s[1]);
        assert_eq!(targets.len(), rows, "one target per logit row");
        for &t in targets {
            if t >= cols {
                return Err(TensorError::TargetOutOfRange { target: t, classes: cols });
            }
        }
        let mut probs = vec![0.0; rows * cols];
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = &self.data(logits)[r * cols..(r + 1) * cols];
            let lse = softmax_into(row, &mut probs[r * cols..(r + 1) * cols]);
            total += lse - row[t];
        }
        let loss = total / rows as f64;
        let req = self.requires_grad(logits);
        self.emit(
            "cross_entropy_mean",
            vec![loss],
            vec![],
            req,
            Op::CrossEntropyMean { logits, targets: targets.to_vec(), rows, cols, probs },
        )
    }

    /// -log softmax(logits)[target] for a single rank-1 logit vector.
    pub fn softmax_cross_entropy(&mut self, logits: TensorId, target: usize) -> Result<TensorId, TensorError> {
        let s = self.shape(logits);
        assert_eq!(s.len(), 1, "softmax_cross_entropy expects a vector");
        let k = s[0];
        if target >= k {
            return Err(TensorError::TargetOutOfRange { target, classes: k });
        }
        let mut probs = vec![0.0; k];
        let row = self.data(logits);
        let lse = softmax_into(row, &mut probs);
        let loss = lse - row[target];
        let req = self.requires_grad(logits);
        self.emit(
            "softmax_cross_entropy",
            vec![loss],
            vec![],
            req,
            Op::CrossEntropyMean { logits, targets: vec![target], rows: 1, cols: k, probs },
        )
    }

    /// Cosine similarity of two rank-1 vectors; errors on a zero-norm input.
    pub fn cosine_similarity(&mut self, u: TensorId, v: TensorId) -> Result<TensorId, TensorError> {
        let (su, sv) = (self.shape(u), self.shape(v));
        if su.len() != 1 || su != sv {
            return Err(TensorError::ShapeMismatch {
                op: "cosine_similarity",
                detail: format!("{su:?} vs {sv:?}"),
            });
        }
        let (ud, vd) = (self.data(u), self.data(v));
        let dot: f64 = ud.iter().zip(vd).map(|(&a, &b)| a * b).sum();
        let nu = ud.iter().map(|&a| a * a).sum::<f64>().sqrt();
        let nv = vd.iter().map(|&b| b * b).sum::<f64>().sqrt();
        if nu == 0.0 || nv == 0.0 {
            return Err(TensorError::DegenerateVector);
        }
        let value = dot / (nu * nv);
        let req = self.any_requires(&[u, v]);
        self.emit("cosine_similarity", vec![value], vec![], req, Op::Cosine { u, v, norm_u: nu, norm_v: nv, value })
    }

    /// Collect scalar nodes into a rank-1 vector.
    pub fn stack_scalars(&mut self, parts: &[TensorId]) -> Result<TensorId, TensorError> {
        assert!(!parts.is_empty(), "stack_scalars over empty list");
        let mut data = Vec::with_capacity(parts.len());
        for &p in parts {
            assert_eq!(self.nodes[p.0].tensor.numel(), 1, "stack_scalars expects scalars");
            data.push(self.data(p)[0]);
        }
        let req = self.any_requires(parts);
        self.emit("stack_scalars", data, vec![parts.len()], req, Op::StackScalars { parts: parts.to_vec() })
    }

    pub fn sum(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        let total: f64 = self.data(a).iter().sum();
        let req = self.requires_grad(a);
        self.emit("sum", vec![total], vec![], req, Op::Sum { a })
    }

    pub fn mean(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        let n = self.nodes[a.0].tensor.numel();
        assert!(n > 0);
        let total: f64 = self.data(a).iter().sum();
        let req = self.requires_grad(a);
        self.emit("mean", vec![total / n as f64], vec![], req, Op::Mean { a })
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar output. Pass-local adjoints are computed
    /// for every node; persistent `grad` buffers on differentiable leaves
    /// accumulate across repeated calls.
    pub fn backward(&mut self, out: TensorId) -> Result<(), TensorError> {
        let out_node = &self.nodes[out.0].tensor;
        if out_node.numel() != 1 {
            return Err(TensorError::NonScalarOutput { shape: out_node.shape.clone() });
        }
        if !out_node.requires_grad {
            return Err(TensorError::DetachedGraph);
        }

        let mut adj: Vec<Option<Vec<f64>>> = (0..=out.0).map(|_| None).collect();
        adj[out.0] = Some(vec![1.0]);

        for id in (0..=out.0).rev() {
            let Some(g) = adj[id].take() else { continue };
            if !self.nodes[id].tensor.requires_grad {
                continue;
            }
            if matches!(self.nodes[id].op, Op::Leaf) {
                self.nodes[id].tensor.accumulate_grad(&g);
                continue;
            }
            match &self.nodes[id].op {
                Op::Leaf => unreachable!(),
                Op::Add { a, b } => {
                    let (a, b) = (*a, *b);
                    add_into(seed(&mut adj, a, self.nodes[a.0].tensor.numel()), &g, 1.0);
                    add_into(seed(&mut adj, b, self.nodes[b.0].tensor.numel()), &g, 1.0);
                }
                Op::Sub { a, b } => {
                    let (a, b) = (*a, *b);
                    add_into(seed(&mut adj, a, self.nodes[a.0].tensor.numel()), &g, 1.0);
                    add_into(seed(&mut adj, b, self.nodes[b.0].tensor.numel()), &g, -1.0);
                }
                Op::Mul { a, b } => {
                    let (a, b) = (*a, *b);
                    let bd = self.nodes[b.0].tensor.data.clone();
                    let ad = self.nodes[a.0].tensor.data.clone();
                    let ga = seed(&mut adj, a, ad.len());
                    for i in 0..ad.len() {
                        ga[i] += g[i] * bd[i];
                    }
                    let gb = seed(&mut adj, b, bd.len());
                    for i in 0..bd.len() {
                        gb[i] += g[i] * ad[i];
                    }
                }
                Op::Scale { a, c } => {
                    let (a, c) = (*a, *c);
                    add_into(seed(&mut adj, a, self.nodes[a.0].tensor.numel()), &g, c);
                }
                Op::Matmul { a, b, m, k, n } => {
                    let (a, b, m, k, n) = (*a, *b, *m, *k, *n);
                    let ad = &self.nodes[a.0].tensor.data;
                    let bd = &self.nodes[b.0].tensor.data;
                    // dA[i,p] += sum_j g[i,j] * B[p,j]
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bd[p * n..(p + 1) * n];
                            da[i * k + p] += dot(grow, brow);
                        }
                    }
                    // dB[p,j] += sum_i A[i,p] * g[i,j]
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let av = ad[i * k + p];
                            if av != 0.0 {
                                let dbrow = &mut db[p * n..(p + 1) * n];
                                for (d, &gv) in dbrow.iter_mut().zip(grow) {
                                    *d += av * gv;
                                }
                            }
                        }
                    }
                    add_into(seed(&mut adj, a, m * k), &da, 1.0);
                    add_into(seed(&mut adj, b, k * n), &db, 1.0);
                }
                Op::Transpose { a, rows, cols } => {
                    let (a, rows, cols) = (*a, *rows, *cols);
                    let ga = seed(&mut adj, a, rows * cols);
                    for r in 0..rows {
                        for c in 0..cols {
                            ga[r * cols + c] += g[c * rows + r];
                        }
                    }
                }
                Op::AddRowBroadcast { a, bias, rows, cols } => {
                    let (a, bias, rows, cols) = (*a, *bias, *rows, *cols);
                    add_into(seed(&mut adj, a, rows * cols), &g, 1.0);
                    let gb = seed(&mut adj, bias, cols);
                    for r in 0..rows {
                        for c in 0..cols {
                            gb[c] += g[r * cols + c];
                        }
                    }
                }
                Op::SliceCols { a, start, len, rows, cols } => {
                    let (a, start, len, rows, cols) = (*a, *start, *len, *rows, *cols);
                    let ga = seed(&mut adj, a, rows * cols);
                    for r in 0..rows {
                        for c in 0..len {
                            ga[r * cols + start + c] += g[r * len + c];
                        }
                    }
                }
                Op::ConcatCols { parts, rows } => {
                    let parts = parts.clone();
                    let rows = *rows;
                    let total: usize = parts.iter().map(|&(_, w)| w).sum();
                    let mut offered = 0;
                    for (pid, w) in parts {
                        let gp = seed(&mut adj, pid, rows * w);
                        for r in 0..rows {
                            for c in 0..w {
                                gp[r * w + c] += g[r * total + offered + c];
                            }
                        }
                        offered += w;
                    }
                }
                Op::Row { a, index, cols } => {
                    let (a, index, cols) = (*a, *index, *cols);
                    let numel = self.nodes[a.0].tensor.numel();
                    let ga = seed(&mut adj, a, numel);
                    for c in 0..cols {
                        ga[index * cols + c] += g[c];
                    }
                }
                Op::MeanRows { a, positions, cols } => {
                    let a = *a;
                    let cols = *cols;
                    let positions = positions.clone();
                    let inv = 1.0 / positions.len() as f64;
                    let numel = self.nodes[a.0].tensor.numel();
                    let ga = seed(&mut adj, a, numel);
                    for &p in &positions {
                        for c in 0..cols {
                            ga[p * cols + c] += g[c] * inv;
                        }
                    }
                }
                Op::SoftmaxRows { a, rows, cols } => {
                    let (a, rows, cols) = (*a, *rows, *cols);
                    let probs = self.nodes[id].tensor.data.clone();
                    let ga = seed(&mut adj, a, rows * cols);
                    for r in 0..rows {
                        let p = &probs[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let dotgp = dot(gr, p);
                        for c in 0..cols {
                            ga[r * cols + c] += p[c] * (gr[c] - dotgp);
                        }
                    }
                }
                Op::LayerNorm { x, gain, bias, rows, cols, xhat, inv_std } => {
                    let (x, gain, bias, rows, cols) = (*x, *gain, *bias, *rows, *cols);
                    let xhat = xhat.clone();
                    let inv_std = inv_std.clone();
                    let gdat = self.nodes[gain.0].tensor.data.clone();
                    {
                        let gg = seed(&mut adj, gain, cols);
                        for r in 0..rows {
                            for c in 0..cols {
                                gg[c] += g[r * cols + c] * xhat[r * cols + c];
                            }
                        }
                    }
                    {
                        let gb = seed(&mut adj, bias, cols);
                        for r in 0..rows {
                            for c in 0..cols {
                                gb[c] += g[r * cols + c];
                            }
                        }
                    }
                    let gx = seed(&mut adj, x, rows * cols);
                    let nf = cols as f64;
                    for r in 0..rows {
                        let gy = &g[r * cols..(r + 1) * cols];
                        let xh = &xhat[r * cols..(r + 1) * cols];
                        let mut sum_dyh = 0.0;
                        let mut sum_dyh_xh = 0.0;
                        for c in 0..cols {
                            let dyh = gy[c] * gdat[c];
                            sum_dyh += dyh;
                            sum_dyh_xh += dyh * xh[c];
                        }
                        for c in 0..cols {
                            let dyh = gy[c] * gdat[c];
                            gx[r * cols + c] += inv_std[r] * (dyh - sum_dyh / nf - xh[c] * sum_dyh_xh / nf);
                        }
                    }
                }
                Op::Gelu { a } => {
                    let a = *a;
                    let ad = self.nodes[a.0].tensor.data.clone();
                    let ga = seed(&mut adj, a, ad.len());
                    for i in 0..ad.len() {
                        ga[i] += g[i] * gelu_bwd(ad[i]);
                    }
                }
                Op::Gather { table, ids, dim } => {
                    let table = *table;
                    let dim = *dim;
                    let ids = ids.clone();
                    let numel = self.nodes[table.0].tensor.numel();
                    let gt = seed(&mut adj, table, numel);
                    for (r, &tid) in ids.iter().enumerate() {
                        let t = tid as usize;
                        for c in 0..dim {
                            gt[t * dim + c] += g[r * dim + c];
                        }
                    }
                }
                Op::CrossEntropyMean { logits, targets, rows, cols, probs } => {
                    let logits = *logits;
                    let (rows, cols) = (*rows, *cols);
                    let targets = targets.clone();
                    let probs = probs.clone();
                    let scale = g[0] / rows as f64;
                    let gl = seed(&mut adj, logits, rows * cols);
                    for (r, &t) in targets.iter().enumerate() {
                        for c in 0..cols {
                            let delta = if c == t { 1.0 } else { 0.0 };
                            gl[r * cols + c] += scale * (probs[r * cols + c] - delta);
                        }
                    }
                }
                Op::Cosine { u, v, norm_u, norm_v, value } => {
                    let (u, v, nu, nv, cosv) = (*u, *v, *norm_u, *norm_v, *value);
                    let ud = self.nodes[u.0].tensor.data.clone();
                    let vd = self.nodes[v.0].tensor.data.clone();
                    let gs = g[0];
                    {
                        let gu = seed(&mut adj, u, ud.len());
                        for i in 0..ud.len() {
                            gu[i] += gs * (vd[i] / (nu * nv) - cosv * ud[i] / (nu * nu));
                        }
                    }
                    let gv = seed(&mut adj, v, vd.len());
                    for i in 0..vd.len() {
                        gv[i] += gs * (ud[i] / (nu * nv) - cosv * vd[i] / (nv * nv));
                    }
                }
                Op::StackScalars { parts } => {
                    let parts = parts.clone();
                    for (j, pid) in parts.into_iter().enumerate() {
                        seed(&mut adj, pid, 1)[0] += g[j];
                    }
                }
                Op::Sum { a } => {
                    let a = *a;
                    let numel = self.nodes[a.0].tensor.numel();
                    let ga = seed(&mut adj, a, numel);
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
                Op::Mean { a } => {
                    let a = *a;
                    let numel = self.nodes[a.0].tensor.numel();
                    let gv = g[0] / numel as f64;
                    let ga = seed(&mut adj, a, numel);
                    ga.iter_mut().for_each(|x| *x += gv);
                }
            }
        }
        Ok(())
    }
}

fn seed(adj: &mut [Option<Vec<f64>>], id: TensorId, numel: usize) -> &mut Vec<f64> {
    adj[id.0].get_or_insert_with(|| vec![0.0; numel])
}

fn add_into(dst: &mut [f64], src: &[f64], scale: f64) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s * scale;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// Stable softmax of `row` into `out`; returns logsumexp(row).
fn softmax_into(row: &[f64], out: &mut [f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        let e = (x - max).exp();
        *o = e;
        sum += e;
    }
    let inv = 1.0 / sum;
    out.iter_mut().for_each(|v| *v *= inv);
    max + sum.ln()
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu_fwd(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_bwd(x: f64) -> f64 {
    let inner = GELU_C * (x + GELU_A * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradient, DEFAULT_H};
    use crate::tensor::TensorError;

    #[test]
    fn backward_of_square_is_two_x() {
        let mut t = Tape::new();
        let x = t.var(vec![3.0], vec![1]);
        let y = t.mul(x, x).unwrap();
        let s = t.sum(y).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn backward_of_constant_is_zero() {
        let mut t = Tape::new();
        let x = t.var(vec![2.0], vec![1]);
        let c = t.constant(vec![5.0], vec![1]);
        // x contributes with weight zero: s = sum(c + 0*x)
        let zx = t.scale(x, 0.0).unwrap();
        let y = t.add(c, zx).unwrap();
        let s = t.sum(y).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t = Tape::new();
        let x = t.var(vec![1.0, 2.0], vec![2]);
        let y = t.scale(x, 2.0).unwrap();
        assert!(matches!(t.backward(y), Err(TensorError::NonScalarOutput { .. })));
    }

    #[test]
    fn backward_rejects_detached_output() {
        let mut t = Tape::new();
        let c = t.constant(vec![1.0], vec![1]);
        let s = t.sum(c).unwrap();
        assert!(matches!(t.backward(s), Err(TensorError::DetachedGraph)));
    }

    #[test]
    fn repeated_backward_accumulates_leaf_grads() {
        let mut t = Tape::new();
        let x = t.var(vec![3.0], vec![1]);
        let y = t.mul(x, x).unwrap();
        let s = t.sum(y).unwrap();
        t.backward(s).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[12.0]);
    }

    #[test]
    fn matmul_chain_matches_finite_differences() {
        // Random 4x3 . 3x2 chain reduced to a scalar; oracle is central
        // differences at h = 1e-5.
        let x: Vec<f64> = (0..12).map(|i| (i as f64 * 0.73 + 0.21).sin()).collect();
        let w: Vec<f64> = (0..6).map(|i| (i as f64 * 1.31 - 0.45).cos()).collect();

        let mut t = Tape::new();
        let a = t.var(x.clone(), vec![4, 3]);
        let b = t.var(w.clone(), vec![3, 2]);
        let c = t.matmul(a, b).unwrap();
        let s = t.sum(c).unwrap();
        t.backward(s).unwrap();
        let ga = t.grad(a).unwrap().to_vec();
        let gb = t.grad(b).unwrap().to_vec();

        let mut eval_a = |p: &[f64]| {
            let mut t = Tape::new();
            let a = t.var(p.to_vec(), vec![4, 3]);
            let b = t.constant(w.clone(), vec![3, 2]);
            let c = t.matmul(a, b).unwrap();
            let s = t.sum(c).unwrap();
            t.value(s)
        };
        let coords: Vec<usize> = (0..12).collect();
        assert!(check_gradient(&mut eval_a, &x, &ga, &coords, DEFAULT_H, 1e-9) < 1e-6);

        let mut eval_b = |p: &[f64]| {
            let mut t = Tape::new();
            let a = t.constant(x.clone(), vec![4, 3]);
            let b = t.var(p.to_vec(), vec![3, 2]);
            let c = t.matmul(a, b).unwrap();
            let s = t.sum(c).unwrap();
            t.value(s)
        };
        let coords: Vec<usize> = (0..6).collect();
        assert!(check_gradient(&mut eval_b, &w, &gb, &coords, DEFAULT_H, 1e-9) < 1e-6);
    }

    #[test]
    fn softmax_cross_entropy_uniform_logits() {
        let mut t = Tape::new();
        let logits = t.var(vec![0.7; 5], vec![5]);
        let loss = t.softmax_cross_entropy(logits, 3).unwrap();
        assert!((t.value(loss) - 5.0_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn softmax_cross_entropy_saturated_correct_class() {
        let mut t = Tape::new();
        let logits = t.var(vec![100.0, 0.0, 0.0], vec![3]);
        let loss = t.softmax_cross_entropy(logits, 0).unwrap();
        assert!(t.value(loss).abs() < 1e-12);
    }

    #[test]
    fn softmax_cross_entropy_independent_value() {
        // -log softmax([1,2,3])[1], evaluated separately via log-sum-exp.
        let mut t = Tape::new();
        let logits = t.var(vec![1.0, 2.0, 3.0], vec![3]);
        let loss = t.softmax_cross_entropy(logits, 1).unwrap();
        assert!((t.value(loss) - 1.4076059644443806).abs() < 1e-12);
    }

    #[test]
    fn softmax_cross_entropy_rejects_bad_target() {
        let mut t = Tape::new();
        let logits = t.var(vec![1.0, 2.0], vec![2]);
        assert!(matches!(
            t.softmax_cross_entropy(logits, 2),
            Err(TensorError::TargetOutOfRange { .. })
        ));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut t = Tape::new();
        let x = t.var(vec![1.0, -4.0, 2.5, 0.0, 300.0, -7.0], vec![2, 3]);
        let p = t.softmax_rows(x).unwrap();
        for r in 0..2 {
            let row = &t.data(p)[r * 3..(r + 1) * 3];
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn cosine_tape_matches_untaped_and_scales() {
        let mut t = Tape::new();
        let u = t.var(vec![1.0, 0.0], vec![2]);
        let v = t.var(vec![1.0, 1.0], vec![2]);
        let c = t.cosine_similarity(u, v).unwrap();
        assert!((t.value(c) - 0.7071067811865475).abs() < 1e-12);

        // scale invariance: cosine(3u, v) == cosine(u, v)
        let u3 = t.scale(u, 3.0).unwrap();
        let c3 = t.cosine_similarity(u3, v).unwrap();
        assert!((t.value(c3) - t.value(c)).abs() < 1e-12);
    }

    #[test]
    fn cosine_zero_norm_errors() {
        let mut t = Tape::new();
        let u = t.var(vec![0.0, 0.0], vec![2]);
        let v = t.var(vec![1.0, 1.0], vec![2]);
        assert!(matches!(t.cosine_similarity(u, v), Err(TensorError::DegenerateVector)));
    }

    #[test]
    fn forward_is_deterministic() {
        let build = || {
            let mut t = Tape::new();
            let a = t.var(vec![0.3, -1.2, 0.8, 2.2, -0.5, 0.05], vec![2, 3]);
            let sm = t.softmax_rows(a).unwrap();
            let g = t.gelu(sm).unwrap();
            let s = t.sum(g).unwrap();
            t.value(s).to_bits()
        };
        assert_eq!(build(), build());
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut t = Tape::new();
        let a = t.var(vec![f64::MAX, f64::MAX], vec![2]);
        assert!(matches!(t.add(a, a), Err(TensorError::NonFinite { op: "add" })));
    }
}

