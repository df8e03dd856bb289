//! Training losses: next-token prediction, expert-level load balancing,
//! language-prior routing, and their per-stage combinations.
//!
//! Each loss has a plain evaluation over logits or routing traces and a
//! graph builder used for training. The two share weights construction
//! and are checked against each other in tests.

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax_rows, Graph, NodeId};
use crate::data::{TaggedBatch, TokenTag};
use crate::error::{Error, Result};
use crate::model::{ForwardOutput, LayerTrace, RoutingTrace};

/// Default balance weight in post-pretraining.
pub const DEFAULT_ALPHA: f64 = 0.01;
/// Default LPR weight in review.
pub const DEFAULT_GAMMA: f64 = 0.1;

/// Mean cross-entropy over positions that have a target.
pub fn ntp_loss(logits: &Array2<f64>, targets: &[Option<usize>]) -> Result<f64> {
    if logits.nrows() != targets.len() {
        return Err(Error::Config(format!(
            "{} logit rows for {} targets",
            logits.nrows(),
            targets.len()
        )));
    }
    let count = targets.iter().flatten().count();
    if count == 0 {
        return Err(Error::Data("every position is padding".into()));
    }
    let probs = softmax_rows(logits);
    let total: f64 = targets
        .iter()
        .enumerate()
        .filter_map(|(r, t)| t.map(|t| -probs[[r, t]].ln()))
        .sum();
    Ok(total / count as f64)
}

/// Constant weights `f_i / T` for active rows, so that
/// `Σ weights ∘ G = Σ_i f_i P_i`.
fn balance_weights(layer: &LayerTrace, active: &[bool]) -> Result<Array2<f64>> {
    let (tokens, n) = layer.scores.dim();
    let k = layer.top_k();
    if active.len() != tokens {
        return Err(Error::Config(format!(
            "{} activity flags for {tokens} routed tokens",
            active.len()
        )));
    }
    let t = active.iter().filter(|&&a| a).count();
    if t == 0 {
        return Err(Error::Data("routing trace has no tokens".into()));
    }
    let mut counts = vec![0usize; n];
    for (row, _) in layer.selected.rows().into_iter().zip(active).filter(|(_, &a)| a) {
        for &e in row {
            counts[e] += 1;
        }
    }
    let t = t as f64;
    let f: Vec<f64> = counts.iter().map(|&c| n as f64 / (k as f64 * t) * c as f64).collect();
    Ok(Array2::from_shape_fn((tokens, n), |(r, i)| {
        if active[r] {
            f[i] / t
        } else {
            0.0
        }
    }))
}

/// Per-layer `Σ_i f_i P_i`.
pub fn balance_terms(trace: &RoutingTrace, k: usize) -> Result<Vec<f64>> {
    if trace.layers.is_empty() {
        return Err(Error::Data("empty routing trace".into()));
    }
    trace
        .layers
        .iter()
        .map(|layer| {
            if layer.top_k() != k {
                return Err(Error::Config(format!(
                    "trace routed top-{}, asked for top-{k}",
                    layer.top_k()
                )));
            }
            let w = balance_weights(layer, &trace.active)?;
            Ok((&w * &layer.scores).sum())
        })
        .collect()
}

/// Load-balancing loss averaged over layers.
pub fn balance_loss(trace: &RoutingTrace, k: usize) -> Result<f64> {
    let terms = balance_terms(trace, k)?;
    Ok(terms.iter().sum::<f64>() / terms.len() as f64)
}

fn lpr_weights(tokens: usize, n: usize, tags: &[TokenTag], scale: f64) -> Array2<f64> {
    let mut w = Array2::zeros((tokens, n));
    for (r, &tag) in tags.iter().enumerate() {
        if tag == TokenTag::Original {
            w[[r, 0]] = scale;
        }
    }
    w
}

fn check_tags(trace: &RoutingTrace, tags: &[TokenTag]) -> Result<usize> {
    if let Some(l) = trace.layers.first() {
        if l.num_tokens() != tags.len() {
            return Err(Error::Config(format!(
                "{} tags for {} routed tokens",
                tags.len(),
                l.num_tokens()
            )));
        }
    }
    Ok(tags.iter().filter(|&&t| t == TokenTag::Original).count())
}

/// Mean over original-language tokens and layers of `-ln G_0`. Zero when
/// the batch has no original-language tokens.
pub fn lpr_loss(trace: &RoutingTrace, tags: &[TokenTag]) -> Result<f64> {
    let n_orig = check_tags(trace, tags)?;
    if n_orig == 0 || trace.layers.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for layer in &trace.layers {
        for (r, &tag) in tags.iter().enumerate() {
            if tag == TokenTag::Original {
                total -= layer.scores[[r, 0]].ln();
            }
        }
    }
    Ok(total / (n_orig * trace.layers.len()) as f64)
}

/// Raw loss values before stage weighting.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub ntp: f64,
    pub balance: f64,
    pub per_layer_balance: Vec<f64>,
    pub lpr: f64,
    /// Non-pad tokens.
    pub tokens: usize,
    pub original_tokens: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ntp: f64,
    pub balance: f64,
    pub lpr: f64,
    pub total: f64,
    pub per_layer_balance: Vec<f64>,
    pub tokens: usize,
    pub original_tokens: usize,
}

/// Post-pretraining: `ntp + α·balance`. The LPR value is reported but
/// does not enter the total.
pub fn stage1_objective(terms: &LossTerms, alpha: f64) -> LossBreakdown {
    LossBreakdown {
        ntp: terms.ntp,
        balance: terms.balance,
        lpr: terms.lpr,
        total: terms.ntp + alpha * terms.balance,
        per_layer_balance: terms.per_layer_balance.clone(),
        tokens: terms.tokens,
        original_tokens: terms.original_tokens,
    }
}

/// Review: `ntp + γ·lpr`, no balance term.
pub fn stage2_objective(terms: &LossTerms, gamma: f64) -> LossBreakdown {
    LossBreakdown {
        ntp: terms.ntp,
        balance: 0.0,
        lpr: terms.lpr,
        total: terms.ntp + gamma * terms.lpr,
        per_layer_balance: Vec::new(),
        tokens: terms.tokens,
        original_tokens: terms.original_tokens,
    }
}

/// Single-stage variant: `ntp + α·balance + γ·lpr`.
pub fn one_stage_objective(terms: &LossTerms, alpha: f64, gamma: f64) -> LossBreakdown {
    LossBreakdown {
        total: terms.ntp + alpha * terms.balance + gamma * terms.lpr,
        ..stage1_objective(terms, alpha)
    }
}

/// Weights on each term of the graph objective. `None` leaves a term out
/// of the graph entirely.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ObjectiveWeights {
    pub alpha: Option<f64>,
    pub gamma: Option<f64>,
}

/// Mean next-token cross-entropy over the batch's scored positions.
pub fn ntp_node(g: &mut Graph, out: &ForwardOutput, batch: &TaggedBatch) -> Result<NodeId> {
    let targets = batch.targets();
    if targets.iter().all(Option::is_none) {
        return Err(Error::Data("every position is padding".into()));
    }
    Ok(g.cross_entropy(out.logits, &targets)?)
}

/// Balance loss averaged over routed layers, with the per-layer values.
/// `None` for a dense model.
pub fn balance_node(g: &mut Graph, out: &ForwardOutput) -> Result<Option<(NodeId, Vec<f64>)>> {
    let n_layers = out.layers.len() as f64;
    let mut per_layer = Vec::with_capacity(out.layers.len());
    let mut total: Option<NodeId> = None;
    for (nodes, lt) in out.layers.iter().zip(&out.trace.layers) {
        let w = balance_weights(lt, &out.trace.active)?;
        let term = g.weighted_sum(nodes.scores, w)?;
        per_layer.push(g.scalar(term));
        let term = g.scale(term, 1.0 / n_layers);
        total = Some(match total {
            Some(acc) => g.add(acc, term)?,
            None => term,
        });
    }
    Ok(total.map(|t| (t, per_layer)))
}

/// LPR loss over the original-language tokens of `tags`. `None` when
/// there are no such tokens or no routed layers.
pub fn lpr_node(g: &mut Graph, out: &ForwardOutput, tags: &[TokenTag]) -> Result<Option<NodeId>> {
    let n_orig = check_tags(&out.trace, tags)?;
    if n_orig == 0 || out.layers.is_empty() {
        return Ok(None);
    }
    let scale = -1.0 / (n_orig as f64 * out.layers.len() as f64);
    let mut total: Option<NodeId> = None;
    for (nodes, lt) in out.layers.iter().zip(&out.trace.layers) {
        let w = lpr_weights(lt.num_tokens(), lt.num_experts(), tags, scale);
        let term = g.weighted_log_sum(nodes.scores, w)?;
        total = Some(match total {
            Some(acc) => g.add(acc, term)?,
            None => term,
        });
    }
    Ok(total)
}

/// Builds the training scalar on the graph and returns it with the
/// breakdown of its value.
pub fn build_objective(
    g: &mut Graph,
    out: &ForwardOutput,
    batch: &TaggedBatch,
    weights: ObjectiveWeights,
) -> Result<(NodeId, LossBreakdown)> {
    let ntp = ntp_node(g, out, batch)?;
    let mut total = ntp;
    let mut terms = LossTerms {
        ntp: g.scalar(ntp),
        tokens: batch.count(TokenTag::Original) + batch.count(TokenTag::Expanded),
        original_tokens: batch.count(TokenTag::Original),
        ..LossTerms::default()
    };
    if let Some((bal, per_layer)) = balance_node(g, out)? {
        terms.balance = g.scalar(bal);
        terms.per_layer_balance = per_layer;
        if let Some(alpha) = weights.alpha {
            let scaled = g.scale(bal, alpha);
            total = g.add(total, scaled)?;
        }
    }
    if let Some(lpr) = lpr_node(g, out, &batch.flat_tags())? {
        terms.lpr = g.scalar(lpr);
        if let Some(gamma) = weights.gamma {
            let scaled = g.scale(lpr, gamma);
            total = g.add(total, scaled)?;
        }
    }
    let breakdown = match (weights.alpha, weights.gamma) {
        (Some(a), Some(c)) => one_stage_objective(&terms, a, c),
        (None, Some(c)) => stage2_objective(&terms, c),
        (Some(a), None) => stage1_objective(&terms, a),
        (None, None) => stage1_objective(&terms, 0.0),
    };
    Ok((total, breakdown))
}

/// Per-row `-ln softmax[target]`, for evaluation code that needs
/// per-token losses rather than their mean.
pub fn token_nll(logits: &Array2<f64>, targets: &[Option<usize>]) -> Vec<Option<f64>> {
    let probs = softmax_rows(logits);
    probs
        .axis_iter(Axis(0))
        .zip(targets)
        .map(|(row, t)| t.map(|t| -row[t].ln()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn trace_from(scores: Array2<f64>, k: usize) -> RoutingTrace {
        let t = scores.nrows();
        RoutingTrace {
            layers: vec![LayerTrace::from_scores(scores, k).unwrap()],
            active: vec![true; t],
        }
    }

    #[test]
    fn uniform_logits_give_ln_v() {
        let v = 258;
        let logits = Array2::zeros((4, v));
        let l = ntp_loss(&logits, &[Some(1), Some(7), None, Some(200)]).unwrap();
        assert!((l - (v as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_logits_near_zero() {
        let mut logits = Array2::zeros((2, 5));
        logits[[0, 3]] = 30.0;
        logits[[1, 1]] = 30.0;
        let l = ntp_loss(&logits, &[Some(3), Some(1)]).unwrap();
        assert!(l < 1e-9, "{l}");
    }

    #[test]
    fn two_token_hand_computed() {
        let logits = array![[0.2, -1.0, 0.5], [1.5, 0.0, -0.3]];
        let l = ntp_loss(&logits, &[Some(2), Some(1)]).unwrap();
        let lse0 = (0.2f64.exp() + (-1.0f64).exp() + 0.5f64.exp()).ln();
        let lse1 = (1.5f64.exp() + 1.0 + (-0.3f64).exp()).ln();
        let expected = 0.5 * ((lse0 - 0.5) + (lse1 - 0.0));
        assert!((l - expected).abs() < 1e-14);
    }

    #[test]
    fn all_pad_is_an_error() {
        assert!(ntp_loss(&Array2::zeros((2, 3)), &[None, None]).is_err());
    }

    #[test]
    fn uniform_routing_balance_is_one() {
        // 4 experts, K = 2, 4 tokens; each expert picked exactly twice.
        let mut scores = Array2::from_elem((4, 4), 0.25);
        let picks = [[0, 1], [2, 3], [0, 2], [1, 3]];
        let mut lt = LayerTrace::from_scores(scores.clone(), 2).unwrap();
        for (r, p) in picks.iter().enumerate() {
            lt.selected[[r, 0]] = p[0];
            lt.selected[[r, 1]] = p[1];
        }
        scores.fill(0.25);
        let trace = RoutingTrace {
            layers: vec![lt],
            active: vec![true; 4],
        };
        assert!((balance_loss(&trace, 2).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn collapse_balance_is_two() {
        let scores = Array2::from_shape_fn((6, 4), |(_, i)| if i < 2 { 0.5 } else { 0.0 });
        let trace = trace_from(scores, 2);
        assert!((balance_loss(&trace, 2).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn pads_are_ignored_by_balance() {
        let scores = Array2::from_shape_fn((3, 4), |(r, i)| {
            if r == 2 {
                [0.7, 0.1, 0.1, 0.1][i]
            } else if i < 2 {
                0.5
            } else {
                0.0
            }
        });
        let mut trace = trace_from(scores, 2);
        trace.active = vec![true, true, false];
        assert!((balance_loss(&trace, 2).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn lpr_cases() {
        let mut scores = Array2::zeros((3, 3));
        scores.column_mut(0).fill(1.0);
        let tags = [TokenTag::Original, TokenTag::Expanded, TokenTag::Original];
        assert_eq!(lpr_loss(&trace_from(scores, 2), &tags).unwrap(), 0.0);

        let uniform = Array2::from_elem((3, 6), 1.0 / 6.0);
        let l = lpr_loss(&trace_from(uniform.clone(), 2), &tags).unwrap();
        assert!((l - 6f64.ln()).abs() < 1e-12);

        let none = [TokenTag::Expanded, TokenTag::Expanded, TokenTag::Pad];
        assert_eq!(lpr_loss(&trace_from(uniform, 2), &none).unwrap(), 0.0);
    }

    #[test]
    fn lpr_decreases_in_g0() {
        let tags = [TokenTag::Original];
        let mut prev = f64::INFINITY;
        for g0 in [0.05, 0.2, 0.4, 0.7, 0.95] {
            let rest = (1.0 - g0) / 2.0;
            let t = trace_from(array![[g0, rest, rest]], 1);
            let l = lpr_loss(&t, &tags).unwrap();
            assert!(l < prev);
            prev = l;
        }
    }

    #[test]
    fn stage_objectives() {
        let terms = LossTerms {
            ntp: 2.0,
            balance: 1.0,
            lpr: 6f64.ln(),
            ..LossTerms::default()
        };
        assert_eq!(stage1_objective(&terms, 0.0).total, 2.0);
        assert!((stage1_objective(&terms, DEFAULT_ALPHA).total - 2.01).abs() < 1e-12);
        assert_eq!(DEFAULT_ALPHA, 0.01);
        assert_eq!(DEFAULT_GAMMA, 0.1);

        let terms = LossTerms { ntp: 1.5, ..terms };
        let s2 = stage2_objective(&terms, DEFAULT_GAMMA);
        assert!((s2.total - (1.5 + 0.1 * 6f64.ln())).abs() < 1e-12);
        assert_eq!(s2.balance, 0.0);
        assert_eq!(stage2_objective(&terms, 0.0).total, 1.5);
    }
}
