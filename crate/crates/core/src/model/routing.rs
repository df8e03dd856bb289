use ndarray::Array2;

use crate::autodiff::softmax_rows;
use crate::error::{Error, Result};

/// Full softmax over experts for one token: `softmax(x · W_r)`.
pub fn router_scores(x: &[f64], router: &Array2<f64>) -> Result<Vec<f64>> {
    if x.len() != router.nrows() {
        return Err(Error::Config(format!(
            "token of width {} against router of {} rows",
            x.len(),
            router.nrows()
        )));
    }
    let x = Array2::from_shape_vec((1, x.len()), x.to_vec()).expect("row shape");
    Ok(softmax_rows(&x.dot(router)).into_raw_vec_and_offset().0)
}

/// Top-K selection with weights renormalized over the chosen experts.
#[derive(Debug, Clone, PartialEq)]
pub struct TopK {
    /// Selected expert indices, highest score first.
    pub indices: Vec<usize>,
    /// `G_i / Σ_{j∈T} G_j`, aligned with `indices`.
    pub weights: Vec<f64>,
}

/// Pick the `k` largest scores; equal scores go to the lower index.
pub fn select_topk(scores: &[f64], k: usize) -> Result<TopK> {
    if k == 0 || k > scores.len() {
        return Err(Error::Config(format!("top-k {k} outside 1..={}", scores.len())));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    // Stable sort keeps ascending index order among ties.
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order.truncate(k);
    let total: f64 = order.iter().map(|&i| scores[i]).sum();
    let weights = order.iter().map(|&i| scores[i] / total).collect();
    Ok(TopK {
        indices: order,
        weights,
    })
}

/// Routing decisions of one MoE layer for every token in a batch, flattened
/// row-major over `batch x seq`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace {
    /// `tokens x N` full softmax scores.
    pub scores: Array2<f64>,
    /// `tokens x K`, highest score first.
    pub selected: Array2<usize>,
    /// `tokens x K` renormalized weights aligned with `selected`.
    pub weights: Array2<f64>,
}

impl LayerTrace {
    pub fn num_tokens(&self) -> usize {
        self.scores.nrows()
    }

    pub fn num_experts(&self) -> usize {
        self.scores.ncols()
    }

    pub fn top_k(&self) -> usize {
        self.selected.ncols()
    }

    /// Build from score rows by running [`select_topk`] on each.
    pub fn from_scores(scores: Array2<f64>, k: usize) -> Result<Self> {
        let t = scores.nrows();
        let mut selected = Array2::zeros((t, k));
        let mut weights = Array2::zeros((t, k));
        for (r, row) in scores.rows().into_iter().enumerate() {
            let row = row.to_vec();
            let top = select_topk(&row, k)?;
            for j in 0..k {
                selected[[r, j]] = top.indices[j];
                weights[[r, j]] = top.weights[j];
            }
        }
        Ok(Self {
            scores,
            selected,
            weights,
        })
    }
}

/// Per-layer routing for a batch. `active[t]` is false at pad positions,
/// which every routing statistic and loss ignores.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RoutingTrace {
    pub layers: Vec<LayerTrace>,
    pub active: Vec<bool>,
}

impl RoutingTrace {
    pub fn num_active(&self) -> usize {
        self.active.iter().filter(|&&a| a).count()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }
}
