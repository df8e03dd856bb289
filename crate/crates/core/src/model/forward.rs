use std::collections::HashMap;

use ndarray::{Array2, Array3};

use super::{expert_prefix, router_name, LayerTrace, Model, RoutingTrace};
use crate::autodiff::{Gradients, Graph, GraphError, NodeId};
use crate::data::TaggedBatch;
use crate::error::{Error, Result};

/// Parameter name → graph leaf for one forward/backward pass.
#[derive(Debug, Clone)]
pub struct Binding {
    nodes: HashMap<String, NodeId>,
}

impl Binding {
    /// Put every parameter on the graph; `trainable(name)` decides which
    /// leaves request gradients.
    pub fn new(graph: &mut Graph, model: &Model, trainable: impl Fn(&str) -> bool) -> Self {
        let nodes = model
            .params()
            .iter()
            .map(|(name, t)| {
                let id = graph.leaf(t.array().clone(), trainable(name));
                (name.to_string(), id)
            })
            .collect();
        Self { nodes }
    }

    /// All parameters frozen except `name`, which is bound to `node`.
    pub fn with_override(graph: &mut Graph, model: &Model, name: &str, node: NodeId) -> Self {
        let mut b = Self::new(graph, model, |_| false);
        b.nodes.insert(name.to_string(), node);
        b
    }

    pub fn node(&self, name: &str) -> Result<NodeId> {
        self.nodes
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("parameter {name} not bound")))
    }

    /// Move gradients out of `grads` keyed by parameter name.
    pub fn collect_gradients(&self, grads: &mut Gradients) -> HashMap<String, Array2<f64>> {
        self.nodes
            .iter()
            .filter_map(|(name, &id)| grads.take(id).map(|g| (name.clone(), g)))
            .collect()
    }
}

/// Graph handles for the routed layers.
#[derive(Debug, Clone, Copy)]
pub struct LayerNodes {
    /// `tokens x N` softmax scores.
    pub scores: NodeId,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `(batch*seq) x V`.
    pub logits: NodeId,
    pub layers: Vec<LayerNodes>,
    pub trace: RoutingTrace,
}

fn ffn(g: &mut Graph, b: &Binding, prefix: &str, x: NodeId) -> Result<NodeId> {
    let up = g.matmul(x, b.node(&format!("{prefix}.up"))?)?;
    let up = g.add_row(up, b.node(&format!("{prefix}.up_bias"))?)?;
    let act = g.gelu(up);
    let down = g.matmul(act, b.node(&format!("{prefix}.down"))?)?;
    Ok(g.add_row(down, b.node(&format!("{prefix}.down_bias"))?)?)
}

/// `residual + Σ_{i∈T} w_i E_i(normed)` with router scores taken on
/// `normed`. Experts only see the rows routed to them.
fn moe_block(
    g: &mut Graph,
    b: &Binding,
    layer: usize,
    k: usize,
    normed: NodeId,
    residual: NodeId,
) -> Result<(NodeId, NodeId, LayerTrace)> {
    let router_logits = g.matmul(normed, b.node(&router_name(layer))?)?;
    let scores = g.softmax_rows(router_logits);
    let trace = LayerTrace::from_scores(g.value(scores).clone(), k)?;
    let (tokens, n) = trace.scores.dim();

    let mut mask = Array2::zeros((tokens, n));
    let mut routed: Vec<Vec<usize>> = vec![Vec::new(); n];
    for t in 0..tokens {
        for j in 0..k {
            let e = trace.selected[[t, j]];
            mask[[t, e]] = 1.0;
            routed[e].push(t);
        }
    }
    let gates = g.topk_renorm(scores, mask)?;

    let mut out = residual;
    for (e, rows) in routed.iter().enumerate() {
        if rows.is_empty() {
            continue;
        }
        let xe = g.gather_rows(normed, rows)?;
        let ye = ffn(g, b, &expert_prefix(layer, e), xe)?;
        let we = g.gather_column(gates, e, rows)?;
        let ye = g.mul_rows(ye, we)?;
        let placed = g.scatter_rows(ye, rows, tokens)?;
        out = g.add(out, placed)?;
    }
    Ok((out, scores, trace))
}

fn check_finite(g: &Graph, id: NodeId, what: impl FnOnce() -> String) -> Result<()> {
    if g.value(id).iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(GraphError::NonFinite { what: what() }.into())
    }
}

/// Full decoder forward on the graph: `(batch*seq) x V` logits plus the
/// score node and trace of every routed layer. Parameters are read through
/// `b`, so the caller decides which leaves receive gradients.
pub fn forward(g: &mut Graph, model: &Model, b: &Binding, batch: &TaggedBatch) -> Result<ForwardOutput> {
    let cfg = model.config();
    let (bsz, seq) = (batch.batch_size(), batch.seq_len());
    if seq > cfg.max_seq_len {
        return Err(Error::Data(format!(
            "sequence length {seq} exceeds maximum {}",
            cfg.max_seq_len
        )));
    }
    let ids = batch.flat_ids();
    if let Some(&bad) = ids.iter().find(|&&i| i >= cfg.vocab_size) {
        return Err(Error::Data(format!(
            "token id {bad} outside vocabulary of {}",
            cfg.vocab_size
        )));
    }
    let positions: Vec<usize> = (0..bsz).flat_map(|_| 0..seq).collect();

    let tok = g.embedding(b.node("embed.tokens")?, &ids)?;
    let pos = g.embedding(b.node("embed.positions")?, &positions)?;
    let mut x = g.add(tok, pos)?;

    let mut layers = Vec::new();
    let mut trace = RoutingTrace {
        layers: Vec::new(),
        active: batch.active(),
    };
    for l in 0..cfg.layers {
        let p = |s: &str| format!("layers.{l}.{s}");
        let a = g.layer_norm(x, b.node(&p("attn_norm.gain"))?, b.node(&p("attn_norm.bias"))?)?;
        let q = g.matmul(a, b.node(&p("attn.q"))?)?;
        let k = g.matmul(a, b.node(&p("attn.k"))?)?;
        let v = g.matmul(a, b.node(&p("attn.v"))?)?;
        let att = g.causal_attention(q, k, v, bsz, seq, cfg.heads)?;
        let att = g.matmul(att, b.node(&p("attn.o"))?)?;
        x = g.add(x, att)?;

        let f = g.layer_norm(x, b.node(&p("ffn_norm.gain"))?, b.node(&p("ffn_norm.bias"))?)?;
        match cfg.moe {
            None => {
                let y = ffn(g, b, &p("ffn"), f)?;
                x = g.add(x, y)?;
            }
            Some(m) => {
                let (y, scores, lt) = moe_block(g, b, l, m.top_k, f, x)?;
                x = y;
                layers.push(LayerNodes { scores });
                trace.layers.push(lt);
            }
        }
        check_finite(g, x, || format!("layer {l} output"))?;
    }
    let x = g.layer_norm(x, b.node("final_norm.gain")?, b.node("final_norm.bias")?)?;
    let logits = g.matmul(x, b.node("lm_head")?)?;
    check_finite(g, logits, || "logits".to_string())?;
    Ok(ForwardOutput { logits, layers, trace })
}

/// Inference-only forward: `batch x seq x V` logits and routing traces.
pub fn lm_forward(batch: &TaggedBatch, model: &Model) -> Result<(Array3<f64>, RoutingTrace)> {
    let mut g = Graph::new();
    let b = Binding::new(&mut g, model, |_| false);
    let out = forward(&mut g, model, &b, batch)?;
    let v = model.config().vocab_size;
    let logits = g
        .value(out.logits)
        .clone()
        .into_shape_with_order((batch.batch_size(), batch.seq_len(), v))
        .expect("logit rows are batch*seq");
    Ok((logits, out.trace))
}

/// One routed layer applied directly to rows of `x`:
/// `y = Σ_{i∈T} w_i E_i(x) + x`.
pub fn moe_layer_forward(model: &Model, layer: usize, x: &Array2<f64>) -> Result<(Array2<f64>, LayerTrace)> {
    let m = model
        .config()
        .moe
        .ok_or_else(|| Error::Config("model has no routed layers".into()))?;
    if layer >= model.config().layers {
        return Err(Error::Config(format!("no layer {layer}")));
    }
    let mut g = Graph::new();
    let b = Binding::new(&mut g, model, |_| false);
    let xn = g.constant(x.clone());
    let (y, _, trace) = moe_block(&mut g, &b, layer, m.top_k, xn, xn)?;
    check_finite(&g, y, || format!("layer {layer} output"))?;
    Ok((g.value(y).clone(), trace))
}
