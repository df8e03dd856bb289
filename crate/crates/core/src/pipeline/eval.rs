//! Per-language perplexity and routing statistics.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use ndarray::Axis;
use serde::{Deserialize, Serialize};

use crate::data::{eval_batches, Document, Role, TokenTag};
use crate::error::{Error, Result};
use crate::model::{lm_forward, Model};
use crate::objectives::token_nll;

/// Bins of the G_0 histogram over `[0, 1]`.
pub const HISTOGRAM_BINS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerplexityRow {
    pub lang: String,
    pub role: Role,
    pub tokens: usize,
    pub mean_loss: f64,
    pub perplexity: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PerplexityTable {
    pub rows: Vec<PerplexityRow>,
}

impl PerplexityTable {
    pub fn get(&self, lang: &str) -> Option<&PerplexityRow> {
        self.rows.iter().find(|r| r.lang == lang)
    }

    /// Token-weighted mean loss over all languages with `role`.
    pub fn mean_loss(&self, role: Role) -> Option<f64> {
        let (sum, n) = self
            .rows
            .iter()
            .filter(|r| r.role == role)
            .fold((0.0, 0usize), |(s, n), r| {
                (s + r.mean_loss * r.tokens as f64, n + r.tokens)
            });
        (n > 0).then(|| sum / n as f64)
    }

    pub fn perplexity(&self, role: Role) -> Option<f64> {
        self.mean_loss(role).map(f64::exp)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("lang,role,tokens,mean_loss,perplexity\n");
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{:.17e},{:.17e}",
                r.lang, r.role, r.tokens, r.mean_loss, r.perplexity
            )
            .expect("writing to a string");
        }
        out
    }
}

/// `exp(mean NTP loss)` per language over `docs`, packed into
/// `seq_len`-token rows.
pub fn perplexity(model: &Model, docs: &[Document], seq_len: usize, batch_size: usize) -> Result<PerplexityTable> {
    let mut by_lang: BTreeMap<&str, Vec<Document>> = BTreeMap::new();
    for d in docs {
        by_lang.entry(d.lang.as_str()).or_default().push(d.clone());
    }
    let mut rows = Vec::new();
    for (lang, docs) in by_lang {
        let role = docs[0].role;
        if docs.iter().any(|d| d.role != role) {
            return Err(Error::Data(format!("language {lang} appears with both roles")));
        }
        let (mut sum, mut count) = (0.0, 0usize);
        for batch in eval_batches(&docs, seq_len, batch_size) {
            let (logits, _) = lm_forward(&batch, model)?;
            let (b, t, v) = logits.dim();
            let flat = logits.into_shape_with_order((b * t, v)).expect("contiguous logits");
            for nll in token_nll(&flat, &batch.targets()).into_iter().flatten() {
                sum += nll;
                count += 1;
            }
        }
        if count == 0 {
            log::warn!("no scored tokens for language {lang}; omitted");
            continue;
        }
        let mean_loss = sum / count as f64;
        rows.push(PerplexityRow {
            lang: lang.to_string(),
            role,
            tokens: count,
            mean_loss,
            perplexity: mean_loss.exp(),
        });
    }
    Ok(PerplexityTable { rows })
}

/// Routing statistics for one language role in one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingRow {
    pub role: Role,
    pub layer: usize,
    pub tokens: usize,
    pub mean_g0: f64,
    pub median_g0: f64,
    /// Counts of G_0 in equal-width bins over `[0, 1]`.
    pub histogram: Vec<usize>,
    /// Fraction of tokens whose top-1 expert is expert 0.
    pub top1_rate: f64,
    /// Per expert, selections per token; sums to K.
    pub selection_fractions: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RoutingStats {
    pub num_experts: usize,
    pub top_k: usize,
    pub rows: Vec<RoutingRow>,
}

impl RoutingStats {
    pub fn get(&self, role: Role, layer: usize) -> Option<&RoutingRow> {
        self.rows.iter().find(|r| r.role == role && r.layer == layer)
    }

    fn layer_mean(&self, role: Role, f: impl Fn(&RoutingRow) -> f64) -> Option<f64> {
        let rows: Vec<&RoutingRow> = self.rows.iter().filter(|r| r.role == role).collect();
        (!rows.is_empty()).then(|| rows.iter().map(|r| f(r)).sum::<f64>() / rows.len() as f64)
    }

    /// Mean G_0 for `role`, averaged over layers.
    pub fn mean_g0(&self, role: Role) -> Option<f64> {
        self.layer_mean(role, |r| r.mean_g0)
    }

    /// Frozen-expert top-1 rate for `role`, averaged over layers.
    pub fn top1_rate(&self, role: Role) -> Option<f64> {
        self.layer_mean(role, |r| r.top1_rate)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("role,layer,tokens,mean_g0,median_g0,top1_rate");
        for i in 0..self.num_experts {
            write!(out, ",sel_{i}").expect("writing to a string");
        }
        for i in 0..HISTOGRAM_BINS {
            write!(out, ",hist_{i}").expect("writing to a string");
        }
        out.push('\n');
        for r in &self.rows {
            write!(
                out,
                "{},{},{},{:.17e},{:.17e},{:.17e}",
                r.role, r.layer, r.tokens, r.mean_g0, r.median_g0, r.top1_rate
            )
            .expect("writing to a string");
            for f in &r.selection_fractions {
                write!(out, ",{f:.17e}").expect("writing to a string");
            }
            for c in &r.histogram {
                write!(out, ",{c}").expect("writing to a string");
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Default)]
struct Accum {
    g0: Vec<f64>,
    top1: usize,
    selections: Vec<usize>,
}

/// Frozen-expert scores and expert loads over `docs`, split by language
/// role and layer. Pads are skipped.
pub fn routing_report(model: &Model, docs: &[Document], seq_len: usize, batch_size: usize) -> Result<RoutingStats> {
    let moe = model
        .config()
        .moe
        .ok_or_else(|| Error::Config("routing statistics need a routed model".into()))?;
    let n = moe.num_experts;
    let mut acc: BTreeMap<(Role, usize), Accum> = BTreeMap::new();
    for batch in eval_batches(docs, seq_len, batch_size) {
        let (_, trace) = lm_forward(&batch, model)?;
        let tags = batch.flat_tags();
        for (l, layer) in trace.layers.iter().enumerate() {
            for (t, tag) in tags.iter().enumerate() {
                let role = match tag {
                    TokenTag::Original => Role::Original,
                    TokenTag::Expanded => Role::Expanded,
                    TokenTag::Pad => continue,
                };
                let a = acc.entry((role, l)).or_default();
                if a.selections.is_empty() {
                    a.selections = vec![0; n];
                }
                a.g0.push(layer.scores[[t, 0]]);
                let picks = layer.selected.index_axis(Axis(0), t);
                if picks[0] == 0 {
                    a.top1 += 1;
                }
                for &e in picks {
                    a.selections[e] += 1;
                }
            }
        }
    }
    let rows = acc
        .into_iter()
        .map(|((role, layer), mut a)| {
            let tokens = a.g0.len();
            let mean_g0 = a.g0.iter().sum::<f64>() / tokens as f64;
            a.g0.sort_by(f64::total_cmp);
            let median_g0 = if tokens % 2 == 1 {
                a.g0[tokens / 2]
            } else {
                0.5 * (a.g0[tokens / 2 - 1] + a.g0[tokens / 2])
            };
            let mut histogram = vec![0; HISTOGRAM_BINS];
            for &g in &a.g0 {
                histogram[((g * HISTOGRAM_BINS as f64) as usize).min(HISTOGRAM_BINS - 1)] += 1;
            }
            RoutingRow {
                role,
                layer,
                tokens,
                mean_g0,
                median_g0,
                histogram,
                top1_rate: a.top1 as f64 / tokens as f64,
                selection_fractions: a.selections.iter().map(|&c| c as f64 / tokens as f64).collect(),
            }
        })
        .collect();
    Ok(RoutingStats {
        num_experts: n,
        top_k: moe.top_k,
        rows,
    })
}
