//! A small reverse-mode tape over [`Matrix`] values.
//!
//! Every forward op appends a node; [`Tape::backward`] walks the nodes in
//! reverse and accumulates exact gradients. Nodes that do not depend on any
//! parameter leaf carry no gradient and are skipped.

use crate::tensor::{gemm, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

/// Index of a parameter tensor in a [`crate::model::ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

pub const LAYER_NORM_EPS: f64 = 1e-5;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    /// `a · bᵀ`
    MatMulBt(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    Gelu(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    Softmax(NodeId),
    SliceCols { x: NodeId, start: usize },
    ConcatCols(Vec<NodeId>),
    SliceRows { x: NodeId, start: usize },
    ConcatRows(Vec<NodeId>),
    GatherRows { table: NodeId, idx: Vec<usize> },
    ReplaceRows { base: NodeId, rows: NodeId, idx: Vec<usize> },
    SmoothedXent {
        logits: NodeId,
        targets: Vec<Option<usize>>,
        smoothing: f64,
        probs: Matrix,
    },
}

struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(ParamId, NodeId)>,
    param_nodes: Vec<Option<NodeId>>,
}

/// Gradients produced by [`Tape::backward`], keyed by parameter.
#[derive(Debug, Default)]
pub struct ParamGrads {
    pub entries: Vec<(ParamId, Matrix)>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    #[inline]
    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn ng(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// A constant input; no gradient flows into it.
    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// A trainable leaf bound to `pid`. Repeated calls with the same id reuse the node.
    pub fn param(&mut self, pid: ParamId, value: &Matrix) -> NodeId {
        if let Some(Some(node)) = self.param_nodes.get(pid.0) {
            return *node;
        }
        let node = self.push(value.clone(), Op::Leaf, true);
        self.params.push((pid, node));
        if self.param_nodes.len() <= pid.0 {
            self.param_nodes.resize(pid.0 + 1, None);
        }
        self.param_nodes[pid.0] = Some(node);
        node
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        let mut out = Matrix::zeros(va.rows(), vb.cols());
        gemm(va, false, vb, false, &mut out, 0.0);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMul(a, b), ng)
    }

    pub fn matmul_bt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        let mut out = Matrix::zeros(va.rows(), vb.rows());
        gemm(va, false, vb, true, &mut out, 0.0);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMulBt(a, b), ng)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Add(a, b), ng)
    }

    /// Adds a `1×n` row to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        let vb = self.value(bias);
        assert_eq!(vb.rows(), 1, "bias must be a single row");
        let bias_row = vb.row(0).to_vec();
        let mut out = self.value(a).clone();
        assert_eq!(out.cols(), bias_row.len(), "bias width");
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(&bias_row) {
                *o += b;
            }
        }
        let ng = self.ng(a) || self.ng(bias);
        self.push(out, Op::AddRow(a, bias), ng)
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let mut out = self.value(a).clone();
        out.scale(s);
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, s), ng)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let mut out = self.value(a).clone();
        for v in out.data_mut() {
            let x = *v;
            *v = 0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh());
        }
        let ng = self.ng(a);
        self.push(out, Op::Gelu(a), ng)
    }

    /// Row-wise layer normalization with `1×n` gain and bias.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> NodeId {
        let vx = self.value(x);
        let (rows, cols) = vx.shape();
        let g = self.value(gain).row(0).to_vec();
        let b = self.value(bias).row(0).to_vec();
        let mut xhat = Matrix::zeros(rows, cols);
        let mut out = Matrix::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = vx.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(is);
            for c in 0..cols {
                let h = (row[c] - mean) * is;
                xhat.set(r, c, h);
                out.set(r, c, h * g[c] + b[c]);
            }
        }
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            ng,
        )
    }

    /// Row-wise softmax. `blocked[r * cols + c] == true` forces a zero probability.
    /// A fully blocked row yields all zeros.
    pub fn softmax(&mut self, x: NodeId, blocked: Option<&[bool]>) -> NodeId {
        let vx = self.value(x);
        let (rows, cols) = vx.shape();
        if let Some(m) = blocked {
            assert_eq!(m.len(), rows * cols, "mask shape");
        }
        let mut out = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let row = vx.row(r);
            let open = |c: usize| blocked.is_none_or(|m| !m[r * cols + c]);
            let max = (0..cols)
                .filter(|&c| open(c))
                .map(|c| row[c])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                continue;
            }
            let mut total = 0.0;
            let o = out.row_mut(r);
            for c in 0..cols {
                if open(c) {
                    o[c] = (row[c] - max).exp();
                    total += o[c];
                }
            }
            for v in o.iter_mut() {
                *v /= total;
            }
        }
        let ng = self.ng(x);
        self.push(out, Op::Softmax(x), ng)
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let vx = self.value(x);
        assert!(start + len <= vx.cols(), "slice_cols range");
        let mut out = Matrix::zeros(vx.rows(), len);
        for r in 0..vx.rows() {
            out.row_mut(r).copy_from_slice(&vx.row(r)[start..start + len]);
        }
        let ng = self.ng(x);
        self.push(out, Op::SliceCols { x, start }, ng)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Matrix::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let vp = self.value(p);
            assert_eq!(vp.rows(), rows, "concat_cols rows");
            for r in 0..rows {
                out.row_mut(r)[off..off + vp.cols()].copy_from_slice(vp.row(r));
            }
            off += vp.cols();
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let vx = self.value(x);
        assert!(start + len <= vx.rows(), "slice_rows range");
        let cols = vx.cols();
        let out = Matrix::from_vec(len, cols, vx.data()[start * cols..(start + len) * cols].to_vec());
        let ng = self.ng(x);
        self.push(out, Op::SliceRows { x, start }, ng)
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let vp = self.value(p);
            assert_eq!(vp.cols(), cols, "concat_rows cols");
            data.extend_from_slice(vp.data());
            rows += vp.rows();
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(Matrix::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn gather_rows(&mut self, table: NodeId, idx: &[usize]) -> NodeId {
        let vt = self.value(table);
        let cols = vt.cols();
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            data.extend_from_slice(vt.row(i));
        }
        let ng = self.ng(table);
        self.push(
            Matrix::from_vec(idx.len(), cols, data),
            Op::GatherRows {
                table,
                idx: idx.to_vec(),
            },
            ng,
        )
    }

    /// Copy of `base` with row `idx[i]` replaced by row `i` of `rows`. Indices must be distinct.
    pub fn replace_rows(&mut self, base: NodeId, rows: NodeId, idx: &[usize]) -> NodeId {
        let mut out = self.value(base).clone();
        let vr = self.value(rows);
        assert_eq!(vr.rows(), idx.len(), "replace_rows count");
        for (i, &dst) in idx.iter().enumerate() {
            out.row_mut(dst).copy_from_slice(vr.row(i));
        }
        let ng = self.ng(base) || self.ng(rows);
        self.push(
            out,
            Op::ReplaceRows {
                base,
                rows,
                idx: idx.to_vec(),
            },
            ng,
        )
    }

    /// Summed cross-entropy of each row's softmax against a label-smoothed
    /// target (`1 - smoothing` on gold, `smoothing / (V - 1)` elsewhere).
    /// Rows with a `None` target contribute nothing. Returns a `1×1` node.
    pub fn smoothed_xent(&mut self, logits: NodeId, targets: &[Option<usize>], smoothing: f64) -> NodeId {
        let vl = self.value(logits);
        let (rows, vocab) = vl.shape();
        assert_eq!(rows, targets.len(), "one target per logit row");
        let off = if vocab > 1 { smoothing / (vocab - 1) as f64 } else { 0.0 };
        let mut probs = Matrix::zeros(rows, vocab);
        let mut total = 0.0;
        for (r, t) in targets.iter().enumerate() {
            let Some(gold) = *t else { continue };
            let row = vl.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            let p = probs.row_mut(r);
            for c in 0..vocab {
                let logp = row[c] - lse;
                p[c] = logp.exp();
                let q = if c == gold { 1.0 - smoothing } else { off };
                if q != 0.0 {
                    total -= q * logp;
                }
            }
        }
        let ng = self.ng(logits);
        self.push(
            Matrix::from_vec(1, 1, vec![total]),
            Op::SmoothedXent {
                logits,
                targets: targets.to_vec(),
                smoothing,
                probs,
            },
            ng,
        )
    }

    /// Softmax outputs recorded on this tape, for row-sum audits.
    pub fn softmax_outputs(&self) -> impl Iterator<Item = &Matrix> {
        self.nodes
            .iter()
            .filter(|n| matches!(n.op, Op::Softmax(_)))
            .map(|n| &n.value)
    }

    /// Back-propagates from the scalar `loss` node.
    pub fn backward(&self, loss: NodeId) -> ParamGrads {
        assert_eq!(self.value(loss).shape(), (1, 1), "loss must be scalar");
        let mut grads: Vec<Option<Matrix>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::filled(1, 1, 1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }

        let mut entries: Vec<(ParamId, Matrix)> = self
            .params
            .iter()
            .map(|&(pid, node)| {
                let g = grads[..]
                    .get(node.0)
                    .and_then(|g| g.clone())
                    .unwrap_or_else(|| {
                        let (r, c) = self.value(node).shape();
                        Matrix::zeros(r, c)
                    });
                (pid, g)
            })
            .collect();
        entries.sort_by_key(|(pid, _)| *pid);
        ParamGrads { entries }
    }

    fn accumulate(&self, grads: &mut [Option<Matrix>], id: NodeId, g: Matrix) {
        if !self.ng(id) {
            return;
        }
        match &mut grads[id.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn zeros_like(&self, id: NodeId) -> Matrix {
        let (r, c) = self.value(id).shape();
        Matrix::zeros(r, c)
    }

    fn propagate(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    let mut ga = Matrix::zeros(va.rows(), va.cols());
                    gemm(g, false, vb, true, &mut ga, 0.0);
                    self.accumulate(grads, *a, ga);
                }
                if self.ng(*b) {
                    let mut gb = Matrix::zeros(vb.rows(), vb.cols());
                    gemm(va, true, g, false, &mut gb, 0.0);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::MatMulBt(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    let mut ga = Matrix::zeros(va.rows(), va.cols());
                    gemm(g, false, vb, false, &mut ga, 0.0);
                    self.accumulate(grads, *a, ga);
                }
                if self.ng(*b) {
                    let mut gb = Matrix::zeros(vb.rows(), vb.cols());
                    gemm(g, true, va, false, &mut gb, 0.0);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::AddRow(a, bias) => {
                self.accumulate(grads, *a, g.clone());
                if self.ng(*bias) {
                    self.accumulate(grads, *bias, column_sums(g));
                }
            }
            Op::Scale(a, s) => {
                let mut ga = g.clone();
                ga.scale(*s);
                self.accumulate(grads, *a, ga);
            }
            Op::Gelu(a) => {
                let va = self.value(*a);
                let mut ga = g.clone();
                for (gv, &x) in ga.data_mut().iter_mut().zip(va.data()) {
                    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
                    let d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x);
                    *gv *= d;
                }
                self.accumulate(grads, *a, ga);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (rows, cols) = xhat.shape();
                let gv = self.value(*gain).row(0);
                if self.ng(*x) {
                    let mut gx = Matrix::zeros(rows, cols);
                    for r in 0..rows {
                        let gy = g.row(r);
                        let xh = xhat.row(r);
                        let mut mean_gh = 0.0;
                        let mut mean_ghx = 0.0;
                        for c in 0..cols {
                            let gh = gy[c] * gv[c];
                            mean_gh += gh;
                            mean_ghx += gh * xh[c];
                        }
                        mean_gh /= cols as f64;
                        mean_ghx /= cols as f64;
                        let out = gx.row_mut(r);
                        for c in 0..cols {
                            out[c] = inv_std[r] * (gy[c] * gv[c] - mean_gh - xh[c] * mean_ghx);
                        }
                    }
                    self.accumulate(grads, *x, gx);
                }
                if self.ng(*gain) {
                    let mut gg = Matrix::zeros(1, cols);
                    for r in 0..rows {
                        for c in 0..cols {
                            gg.data_mut()[c] += g.get(r, c) * xhat.get(r, c);
                        }
                    }
                    self.accumulate(grads, *gain, gg);
                }
                if self.ng(*bias) {
                    self.accumulate(grads, *bias, column_sums(g));
                }
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let mut gx = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for (o, (yv, gv)) in gx.row_mut(r).iter_mut().zip(yr.iter().zip(gr)) {
                        *o = yv * (gv - dot);
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::SliceCols { x, start } => {
                let mut gx = self.zeros_like(*x);
                for r in 0..g.rows() {
                    gx.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                }
                self.accumulate(grads, *x, gx);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let cols = self.value(p).cols();
                    if self.ng(p) {
                        let mut gp = Matrix::zeros(g.rows(), cols);
                        for r in 0..g.rows() {
                            gp.row_mut(r).copy_from_slice(&g.row(r)[off..off + cols]);
                        }
                        self.accumulate(grads, p, gp);
                    }
                    off += cols;
                }
            }
            Op::SliceRows { x, start } => {
                let mut gx = self.zeros_like(*x);
                let cols = g.cols();
                gx.data_mut()[start * cols..(start + g.rows()) * cols].copy_from_slice(g.data());
                self.accumulate(grads, *x, gx);
            }
            Op::ConcatRows(parts) => {
                let cols = g.cols();
                let mut off = 0;
                for &p in parts {
                    let rows = self.value(p).rows();
                    if self.ng(p) {
                        let gp = Matrix::from_vec(rows, cols, g.data()[off * cols..(off + rows) * cols].to_vec());
                        self.accumulate(grads, p, gp);
                    }
                    off += rows;
                }
            }
            Op::GatherRows { table, idx } => {
                let mut gt = self.zeros_like(*table);
                for (i, &src) in idx.iter().enumerate() {
                    for (o, v) in gt.row_mut(src).iter_mut().zip(g.row(i)) {
                        *o += v;
                    }
                }
                self.accumulate(grads, *table, gt);
            }
            Op::ReplaceRows { base, rows, idx } => {
                if self.ng(*base) {
                    let mut gb = g.clone();
                    for &dst in idx {
                        gb.row_mut(dst).fill(0.0);
                    }
                    self.accumulate(grads, *base, gb);
                }
                if self.ng(*rows) {
                    let mut gr = Matrix::zeros(idx.len(), g.cols());
                    for (i, &dst) in idx.iter().enumerate() {
                        gr.row_mut(i).copy_from_slice(g.row(dst));
                    }
                    self.accumulate(grads, *rows, gr);
                }
            }
            Op::SmoothedXent {
                logits,
                targets,
                smoothing,
                probs,
            } => {
                let scale = g.get(0, 0);
                let vocab = probs.cols();
                let off = if vocab > 1 { smoothing / (vocab - 1) as f64 } else { 0.0 };
                let mut gl = Matrix::zeros(probs.rows(), vocab);
                for (r, t) in targets.iter().enumerate() {
                    let Some(gold) = *t else { continue };
                    let p = probs.row(r);
                    let out = gl.row_mut(r);
                    for c in 0..vocab {
                        let q = if c == gold { 1.0 - smoothing } else { off };
                        out[c] = scale * (p[c] - q);
                    }
                }
                self.accumulate(grads, *logits, gl);
            }
        }
    }
}

fn column_sums(g: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(1, g.cols());
    for r in 0..g.rows() {
        for (o, v) in out.data_mut().iter_mut().zip(g.row(r)) {
            *o += v;
        }
    }
    out
}
