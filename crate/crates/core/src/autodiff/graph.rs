//! Define-by-run tape over dense row-major matrices.
//!
//! Every value in the graph is an `Array2<f64>`; vectors are `1 x n`
//! rows and scalars are `1 x 1`. Nodes are appended in creation order,
//! so a node's inputs always precede it and the backward sweep is a
//! single pass over the node list in reverse.

use ndarray::{s, Array1, Array2, Axis, Zip};
use thiserror::Error;

const LN_EPS: f64 = 1e-5;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum GraphError {
    #[error("{op}: shape mismatch ({detail})")]
    Shape { op: &'static str, detail: String },

    #[error("backward needs a scalar loss, got a {rows}x{cols} node")]
    NotScalar { rows: usize, cols: usize },

    #[error("non-finite value in {what}")]
    NonFinite { what: String },
}

fn shape_err(op: &'static str, detail: String) -> GraphError {
    GraphError::Shape { op, detail }
}

fn dims(a: &Array2<f64>) -> String {
    format!("{}x{}", a.nrows(), a.ncols())
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    Gelu(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Array2<f64>,
        inv_std: Array1<f64>,
    },
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        batch: usize,
        seq: usize,
        heads: usize,
        probs: Vec<Array2<f64>>,
    },
    Embedding {
        table: NodeId,
        ids: Vec<usize>,
    },
    SoftmaxRows(NodeId),
    TopKRenorm {
        scores: NodeId,
        mask: Array2<f64>,
        sums: Array1<f64>,
    },
    GatherRows {
        x: NodeId,
        rows: Vec<usize>,
    },
    ScatterRows {
        x: NodeId,
        rows: Vec<usize>,
    },
    GatherColumn {
        x: NodeId,
        col: usize,
        rows: Vec<usize>,
    },
    MulRows(NodeId, NodeId),
    CrossEntropy {
        logits: NodeId,
        targets: Vec<Option<usize>>,
        probs: Array2<f64>,
        count: usize,
    },
    WeightedSum {
        x: NodeId,
        weights: Array2<f64>,
    },
    WeightedLogSum {
        x: NodeId,
        weights: Array2<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Array2<f64>,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation. Values are computed eagerly as nodes are added.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Array2<f64>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Array2<f64>> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Array2<f64> {
        &self.nodes[id.0].value
    }

    /// Value of a `1 x 1` node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value[[0, 0]]
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, value: Array2<f64>, op: Op, inputs: &[NodeId]) -> NodeId {
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Array2<f64>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Array2<f64>) -> NodeId {
        self.leaf(value, false)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.ncols() != bv.nrows() {
            return Err(shape_err("matmul", format!("{} · {}", dims(av), dims(bv))));
        }
        let out = av.dot(bv);
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.dim() != bv.dim() {
            return Err(shape_err("add", format!("{} + {}", dims(av), dims(bv))));
        }
        let out = av + bv;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    /// `a + bias` with `bias` a `1 x n` row broadcast over the rows of `a`.
    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId, GraphError> {
        let (av, bv) = (self.value(a), self.value(bias));
        if bv.nrows() != 1 || bv.ncols() != av.ncols() {
            return Err(shape_err("add_row", format!("{} + row {}", dims(av), dims(bv))));
        }
        let out = av + bv;
        Ok(self.push(out, Op::AddRow(a, bias), &[a, bias]))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let out = self.value(a) * c;
        self.push(out, Op::Scale(a, c), &[a])
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).mapv(gelu);
        self.push(out, Op::Gelu(a), &[a])
    }

    /// Row-wise layer normalization with affine `1 x n` gain and bias.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId, GraphError> {
        let xv = self.value(x);
        let n = xv.ncols();
        for (name, p) in [("gain", gamma), ("bias", beta)] {
            let pv = self.value(p);
            if pv.nrows() != 1 || pv.ncols() != n {
                return Err(shape_err(
                    "layer_norm",
                    format!("input {} with {name} {}", dims(xv), dims(pv)),
                ));
            }
        }
        let mut xhat = xv.clone();
        let mut inv_std = Array1::zeros(xv.nrows());
        for (mut row, istd) in xhat.axis_iter_mut(Axis(0)).zip(inv_std.iter_mut()) {
            let mean = row.sum() / n as f64;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|v| v * v).sum::<f64>() / n as f64;
            *istd = 1.0 / (var + LN_EPS).sqrt();
            let s = *istd;
            row.mapv_inplace(|v| v * s);
        }
        let out = &xhat * self.value(gamma) + self.value(beta);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    /// Causal multi-head self-attention over `batch` sequences of length
    /// `seq`. `q`, `k`, `v` are `(batch*seq) x h` with heads laid out as
    /// contiguous column blocks.
    pub fn causal_attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        batch: usize,
        seq: usize,
        heads: usize,
    ) -> Result<NodeId, GraphError> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        if qv.dim() != kv.dim() || qv.dim() != vv.dim() {
            return Err(shape_err(
                "causal_attention",
                format!("q {} k {} v {}", dims(qv), dims(kv), dims(vv)),
            ));
        }
        if qv.nrows() != batch * seq || heads == 0 || qv.ncols() % heads != 0 {
            return Err(shape_err(
                "causal_attention",
                format!("{} rows/cols vs batch {batch} seq {seq} heads {heads}", dims(qv)),
            ));
        }
        let hd = qv.ncols() / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut out = Array2::zeros(qv.dim());
        let mut probs = Vec::with_capacity(batch * heads);
        for b in 0..batch {
            let rows = b * seq..(b + 1) * seq;
            for h in 0..heads {
                let cols = h * hd..(h + 1) * hd;
                let qh = qv.slice(s![rows.clone(), cols.clone()]);
                let kh = kv.slice(s![rows.clone(), cols.clone()]);
                let vh = vv.slice(s![rows.clone(), cols.clone()]);
                let mut p = qh.dot(&kh.t());
                for (i, mut row) in p.axis_iter_mut(Axis(0)).enumerate() {
                    let max = row.iter().take(i + 1).fold(f64::NEG_INFINITY, |m, &x| m.max(x * scale));
                    let mut total = 0.0;
                    for (j, x) in row.iter_mut().enumerate() {
                        if j <= i {
                            *x = (*x * scale - max).exp();
                            total += *x;
                        } else {
                            *x = 0.0;
                        }
                    }
                    row.mapv_inplace(|x| x / total);
                }
                out.slice_mut(s![rows.clone(), cols]).assign(&p.dot(&vh));
                probs.push(p);
            }
        }
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                batch,
                seq,
                heads,
                probs,
            },
            &[q, k, v],
        ))
    }

    /// Row lookup: output row `r` is `table[ids[r]]`.
    pub fn embedding(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId, GraphError> {
        let tv = self.value(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= tv.nrows()) {
            return Err(shape_err(
                "embedding",
                format!("id {bad} out of range for table {}", dims(tv)),
            ));
        }
        let mut out = Array2::zeros((ids.len(), tv.ncols()));
        for (mut row, &id) in out.axis_iter_mut(Axis(0)).zip(ids) {
            row.assign(&tv.row(id));
        }
        Ok(self.push(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let out = softmax_rows(self.value(a));
        self.push(out, Op::SoftmaxRows(a), &[a])
    }

    /// Renormalize `scores` over the entries where `mask` is 1:
    /// `w_i = m_i s_i / sum_j m_j s_j`. `mask` is a constant 0/1 matrix.
    pub fn topk_renorm(&mut self, scores: NodeId, mask: Array2<f64>) -> Result<NodeId, GraphError> {
        let sv = self.value(scores);
        if sv.dim() != mask.dim() {
            return Err(shape_err(
                "topk_renorm",
                format!("scores {} mask {}", dims(sv), dims(&mask)),
            ));
        }
        let masked = sv * &mask;
        let sums = masked.sum_axis(Axis(1));
        let mut out = masked;
        for (mut row, &total) in out.axis_iter_mut(Axis(0)).zip(sums.iter()) {
            row.mapv_inplace(|x| x / total);
        }
        Ok(self.push(out, Op::TopKRenorm { scores, mask, sums }, &[scores]))
    }

    pub fn gather_rows(&mut self, x: NodeId, rows: &[usize]) -> Result<NodeId, GraphError> {
        let xv = self.value(x);
        if let Some(&bad) = rows.iter().find(|&&r| r >= xv.nrows()) {
            return Err(shape_err(
                "gather_rows",
                format!("row {bad} out of range for {}", dims(xv)),
            ));
        }
        let out = xv.select(Axis(0), rows);
        Ok(self.push(out, Op::GatherRows { x, rows: rows.to_vec() }, &[x]))
    }

    /// Place row `r` of `x` at row `rows[r]` of a zero `total x n` matrix.
    pub fn scatter_rows(&mut self, x: NodeId, rows: &[usize], total: usize) -> Result<NodeId, GraphError> {
        let xv = self.value(x);
        if rows.len() != xv.nrows() || rows.iter().any(|&r| r >= total) {
            return Err(shape_err(
                "scatter_rows",
                format!("{} rows into {total} with {} indices", dims(xv), rows.len()),
            ));
        }
        let mut out = Array2::zeros((total, xv.ncols()));
        for (src, &dst) in xv.axis_iter(Axis(0)).zip(rows) {
            out.row_mut(dst).assign(&src);
        }
        Ok(self.push(out, Op::ScatterRows { x, rows: rows.to_vec() }, &[x]))
    }

    /// `n x 1` column with entries `x[rows[r], col]`.
    pub fn gather_column(&mut self, x: NodeId, col: usize, rows: &[usize]) -> Result<NodeId, GraphError> {
        let xv = self.value(x);
        if col >= xv.ncols() || rows.iter().any(|&r| r >= xv.nrows()) {
            return Err(shape_err("gather_column", format!("column {col} of {}", dims(xv))));
        }
        let out = Array2::from_shape_fn((rows.len(), 1), |(r, _)| xv[[rows[r], col]]);
        Ok(self.push(
            out,
            Op::GatherColumn {
                x,
                col,
                rows: rows.to_vec(),
            },
            &[x],
        ))
    }

    /// Scale row `r` of `x` by `w[r, 0]`.
    pub fn mul_rows(&mut self, x: NodeId, w: NodeId) -> Result<NodeId, GraphError> {
        let (xv, wv) = (self.value(x), self.value(w));
        if wv.ncols() != 1 || wv.nrows() != xv.nrows() {
            return Err(shape_err("mul_rows", format!("{} by column {}", dims(xv), dims(wv))));
        }
        let out = xv * wv;
        Ok(self.push(out, Op::MulRows(x, w), &[x, w]))
    }

    /// Mean next-token cross-entropy over the rows with a target.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[Option<usize>]) -> Result<NodeId, GraphError> {
        let lv = self.value(logits);
        if targets.len() != lv.nrows() {
            return Err(shape_err(
                "cross_entropy",
                format!("{} logits for {} targets", dims(lv), targets.len()),
            ));
        }
        if let Some(bad) = targets.iter().flatten().find(|&&t| t >= lv.ncols()) {
            return Err(shape_err(
                "cross_entropy",
                format!("target {bad} outside vocabulary of {}", lv.ncols()),
            ));
        }
        let probs = softmax_rows(lv);
        let count = targets.iter().filter(|t| t.is_some()).count();
        let mut total = 0.0;
        for (r, t) in targets.iter().enumerate() {
            if let Some(t) = *t {
                total -= probs[[r, t]].ln();
            }
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        Ok(self.push(
            Array2::from_elem((1, 1), loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
            &[logits],
        ))
    }

    /// Scalar `sum_ij weights_ij * x_ij` with constant weights.
    pub fn weighted_sum(&mut self, x: NodeId, weights: Array2<f64>) -> Result<NodeId, GraphError> {
        let xv = self.value(x);
        if xv.dim() != weights.dim() {
            return Err(shape_err(
                "weighted_sum",
                format!("{} with weights {}", dims(xv), dims(&weights)),
            ));
        }
        let total = (xv * &weights).sum();
        Ok(self.push(Array2::from_elem((1, 1), total), Op::WeightedSum { x, weights }, &[x]))
    }

    /// Scalar `sum_ij weights_ij * ln x_ij`, skipping zero weights.
    pub fn weighted_log_sum(&mut self, x: NodeId, weights: Array2<f64>) -> Result<NodeId, GraphError> {
        let xv = self.value(x);
        if xv.dim() != weights.dim() {
            return Err(shape_err(
                "weighted_log_sum",
                format!("{} with weights {}", dims(xv), dims(&weights)),
            ));
        }
        let mut total = 0.0;
        Zip::from(xv).and(&weights).for_each(|&x, &w| {
            if w != 0.0 {
                total += w * x.ln();
            }
        });
        Ok(self.push(
            Array2::from_elem((1, 1), total),
            Op::WeightedLogSum { x, weights },
            &[x],
        ))
    }

    /// Reverse sweep from a scalar `loss`. Only nodes that depend on a
    /// `requires_grad` leaf receive gradients.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients, GraphError> {
        let lv = self.value(loss);
        if lv.dim() != (1, 1) {
            return Err(GraphError::NotScalar {
                rows: lv.nrows(),
                cols: lv.ncols(),
            });
        }
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Array2::ones((1, 1)));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Op::Leaf = node.op {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Array2<f64>>], id: NodeId, delta: Array2<f64>) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(g) => *g += &delta,
            slot => *slot = Some(delta),
        }
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn propagate(&self, node: &Node, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                if self.wants(a) {
                    self.accumulate(grads, a, g.dot(&self.value(b).t()));
                }
                if self.wants(b) {
                    self.accumulate(grads, b, self.value(a).t().dot(g));
                }
            }
            &Op::Add(a, b) => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, g.clone());
            }
            &Op::AddRow(a, bias) => {
                self.accumulate(grads, a, g.clone());
                if self.wants(bias) {
                    self.accumulate(grads, bias, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            &Op::Scale(a, c) => self.accumulate(grads, a, g * c),
            &Op::Gelu(a) => {
                let mut d = self.value(a).mapv(gelu_grad);
                d *= g;
                self.accumulate(grads, a, d);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                if self.wants(*gamma) {
                    let dg = (g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                    self.accumulate(grads, *gamma, dg);
                }
                if self.wants(*beta) {
                    self.accumulate(grads, *beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if self.wants(*x) {
                    let n = xhat.ncols() as f64;
                    let dxhat = g * self.value(*gamma);
                    let mut dx = Array2::zeros(xhat.dim());
                    for (((mut out, dh), xh), &istd) in dx
                        .axis_iter_mut(Axis(0))
                        .zip(dxhat.axis_iter(Axis(0)))
                        .zip(xhat.axis_iter(Axis(0)))
                        .zip(inv_std.iter())
                    {
                        let mean_dh = dh.sum() / n;
                        let mean_dh_xh = dh.dot(&xh) / n;
                        Zip::from(&mut out).and(&dh).and(&xh).for_each(|o, &d, &x| {
                            *o = istd * (d - mean_dh - x * mean_dh_xh);
                        });
                    }
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                batch,
                seq,
                heads,
                probs,
            } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let hd = qv.ncols() / heads;
                let scale = 1.0 / (hd as f64).sqrt();
                let mut dq = Array2::zeros(qv.dim());
                let mut dk = Array2::zeros(kv.dim());
                let mut dv = Array2::zeros(vv.dim());
                for b in 0..*batch {
                    let rows = b * seq..(b + 1) * seq;
                    for h in 0..*heads {
                        let cols = h * hd..(h + 1) * hd;
                        let p = &probs[b * heads + h];
                        let go = g.slice(s![rows.clone(), cols.clone()]);
                        let qh = qv.slice(s![rows.clone(), cols.clone()]);
                        let kh = kv.slice(s![rows.clone(), cols.clone()]);
                        let vh = vv.slice(s![rows.clone(), cols.clone()]);
                        dv.slice_mut(s![rows.clone(), cols.clone()]).assign(&p.t().dot(&go));
                        let dp = go.dot(&vh.t());
                        let mut ds = &dp * p;
                        let row_dot = ds.sum_axis(Axis(1));
                        Zip::from(ds.rows_mut())
                            .and(p.rows())
                            .and(&row_dot)
                            .for_each(|mut d, pr, &rd| {
                                Zip::from(&mut d).and(&pr).for_each(|x, &pv| *x -= pv * rd);
                            });
                        ds *= scale;
                        dq.slice_mut(s![rows.clone(), cols.clone()]).assign(&ds.dot(&kh));
                        dk.slice_mut(s![rows.clone(), cols]).assign(&ds.t().dot(&qh));
                    }
                }
                self.accumulate(grads, *q, dq);
                self.accumulate(grads, *k, dk);
                self.accumulate(grads, *v, dv);
            }
            Op::Embedding { table, ids } => {
                if self.wants(*table) {
                    let mut dt = Array2::zeros(self.value(*table).dim());
                    for (row, &id) in g.axis_iter(Axis(0)).zip(ids) {
                        let mut target = dt.row_mut(id);
                        target += &row;
                    }
                    self.accumulate(grads, *table, dt);
                }
            }
            &Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut d = g * y;
                let row_dot = d.sum_axis(Axis(1));
                Zip::from(d.rows_mut())
                    .and(y.rows())
                    .and(&row_dot)
                    .for_each(|mut dr, yr, &rd| {
                        Zip::from(&mut dr).and(&yr).for_each(|x, &yv| *x -= yv * rd);
                    });
                self.accumulate(grads, a, d);
            }
            Op::TopKRenorm { scores, mask, sums } => {
                let w = &node.value;
                let gw = (g * w).sum_axis(Axis(1));
                let mut d = g.clone();
                Zip::from(d.rows_mut())
                    .and(mask.rows())
                    .and(&gw)
                    .and(sums)
                    .for_each(|mut dr, mr, &gwr, &total| {
                        Zip::from(&mut dr)
                            .and(&mr)
                            .for_each(|x, &m| *x = m * (*x - gwr) / total);
                    });
                self.accumulate(grads, *scores, d);
            }
            Op::GatherRows { x, rows } => {
                let mut dx = Array2::zeros(self.value(*x).dim());
                for (src, &dst) in g.axis_iter(Axis(0)).zip(rows) {
                    let mut target = dx.row_mut(dst);
                    target += &src;
                }
                self.accumulate(grads, *x, dx);
            }
            Op::ScatterRows { x, rows } => {
                self.accumulate(grads, *x, g.select(Axis(0), rows));
            }
            Op::GatherColumn { x, col, rows } => {
                let mut dx = Array2::zeros(self.value(*x).dim());
                for (r, &src) in rows.iter().enumerate() {
                    dx[[src, *col]] += g[[r, 0]];
                }
                self.accumulate(grads, *x, dx);
            }
            &Op::MulRows(x, w) => {
                let (xv, wv) = (self.value(x), self.value(w));
                if self.wants(x) {
                    self.accumulate(grads, x, g * wv);
                }
                if self.wants(w) {
                    let dw = (g * xv).sum_axis(Axis(1)).insert_axis(Axis(1));
                    self.accumulate(grads, w, dw);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                if *count == 0 {
                    return;
                }
                let scale = g[[0, 0]] / *count as f64;
                let mut d = Array2::zeros(probs.dim());
                for (r, t) in targets.iter().enumerate() {
                    if let Some(t) = *t {
                        let mut row = d.row_mut(r);
                        row.assign(&probs.row(r));
                        row[t] -= 1.0;
                        row *= scale;
                    }
                }
                self.accumulate(grads, *logits, d);
            }
            Op::WeightedSum { x, weights } => {
                self.accumulate(grads, *x, weights * g[[0, 0]]);
            }
            Op::WeightedLogSum { x, weights } => {
                let xv = self.value(*x);
                let scale = g[[0, 0]];
                let mut d = Array2::zeros(xv.dim());
                Zip::from(&mut d).and(xv).and(weights).for_each(|o, &xi, &w| {
                    if w != 0.0 {
                        *o = scale * w / xi;
                    }
                });
                self.accumulate(grads, *x, d);
            }
        }
    }
}

/// Numerically stable row-wise softmax.
pub fn softmax_rows(a: &Array2<f64>) -> Array2<f64> {
    let mut out = a.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        row.mapv_inplace(|x| (x - max).exp());
        let total = row.sum();
        row.mapv_inplace(|x| x / total);
    }
    out
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn matmul_identity_padded() {
        let mut g = Graph::new();
        let a = g.constant(array![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]);
        let b = g.constant(array![[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]]);
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c), &array![[1.0, 2.0], [4.0, 5.0]]);
    }

    #[test]
    fn matmul_shape_error_names_dims() {
        let mut g = Graph::new();
        let a = g.constant(Array2::zeros((2, 3)));
        let b = g.constant(Array2::zeros((2, 2)));
        let err = g.matmul(a, b).unwrap_err();
        assert_eq!(
            err,
            GraphError::Shape {
                op: "matmul",
                detail: "2x3 · 2x2".into()
            }
        );
    }

    #[test]
    fn softmax_cases() {
        let mut g = Graph::new();
        let z = g.constant(Array2::zeros((1, 5)));
        let s = g.softmax_rows(z);
        for &v in g.value(s) {
            assert!((v - 0.2).abs() < 1e-15);
        }
        let x = g.constant(array![[2f64.ln(), 0.0, 0.0]]);
        let s = g.softmax_rows(x);
        let v = g.value(s);
        assert!((v[[0, 0]] - 0.5).abs() < 1e-15);
        assert!((v[[0, 1]] - 0.25).abs() < 1e-15);
        assert!((v[[0, 2]] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn sum_gives_ones() {
        let mut g = Graph::new();
        let w = g.leaf(array![[1.0, -2.0], [3.0, 0.5]], true);
        let loss = g.weighted_sum(w, Array2::ones((2, 2))).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap(), &Array2::<f64>::ones((2, 2)));
    }

    #[test]
    fn zero_times_w_gives_zero() {
        let mut g = Graph::new();
        let w = g.leaf(array![[1.0, -2.0, 4.0]], true);
        let z = g.scale(w, 0.0);
        let loss = g.weighted_sum(z, Array2::ones((1, 3))).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap(), &Array2::<f64>::zeros((1, 3)));
    }

    #[test]
    fn frozen_leaf_gets_nothing() {
        let mut g = Graph::new();
        let w = g.leaf(array![[1.0, 2.0]], true);
        let f = g.constant(array![[3.0, 4.0]]);
        let s = g.add(w, f).unwrap();
        let loss = g.weighted_sum(s, Array2::ones((1, 2))).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(w).is_some());
        assert!(grads.get(f).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let w = g.leaf(Array2::zeros((2, 2)), true);
        assert_eq!(g.backward(w).unwrap_err(), GraphError::NotScalar { rows: 2, cols: 2 });
    }

    #[test]
    fn attention_first_position_sees_only_itself() {
        let mut g = Graph::new();
        let q = g.constant(array![[1.0, 0.0], [0.0, 1.0]]);
        let k = g.constant(array![[1.0, 0.0], [0.0, 1.0]]);
        let v = g.constant(array![[5.0, 6.0], [7.0, 8.0]]);
        let o = g.causal_attention(q, k, v, 1, 2, 1).unwrap();
        let out = g.value(o);
        assert_eq!(out.row(0).to_vec(), vec![5.0, 6.0]);
        assert!(out[[1, 0]] > 5.0 && out[[1, 0]] < 7.0);
    }

    #[test]
    fn topk_renorm_sums_to_one_over_mask() {
        let mut g = Graph::new();
        let s = g.constant(array![[0.5, 0.25, 0.25]]);
        let w = g.topk_renorm(s, array![[1.0, 1.0, 0.0]]).unwrap();
        let v = g.value(w);
        assert!((v[[0, 0]] - 2.0 / 3.0).abs() < 1e-15);
        assert!((v[[0, 1]] - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(v[[0, 2]], 0.0);
    }
}
