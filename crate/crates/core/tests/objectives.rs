mod common;

use moe_lpr::autodiff::Graph;
use moe_lpr::data::TokenTag;
use moe_lpr::model::{forward, Binding, LayerTrace, Model, RoutingTrace};
use moe_lpr::objectives::{
    balance_loss, build_objective, lpr_loss, ntp_loss, stage1_objective, stage2_objective, LossTerms, ObjectiveWeights,
};
use ndarray::Array2;
use proptest::prelude::*;
use rand::Rng;

use common::{random_batch, random_matrix, randomize_routers, rng, small_config};

fn random_scores(r: &mut rand_chacha::ChaCha8Rng, t: usize, n: usize) -> Array2<f64> {
    let logits = random_matrix(r, t, n, 3.0);
    moe_lpr::autodiff::softmax_rows(&logits)
}

/// Recount selections and score means independently of the library.
fn recount(scores: &Array2<f64>, k: usize, active: &[bool]) -> f64 {
    let (t, n) = scores.dim();
    let live: Vec<usize> = (0..t).filter(|&i| active[i]).collect();
    let tt = live.len() as f64;
    let mut loss = 0.0;
    for e in 0..n {
        let mut selected = 0usize;
        let mut p = 0.0;
        for &i in &live {
            let row: Vec<f64> = scores.row(i).to_vec();
            // Rank of e: experts strictly better, or equal with lower index.
            let better = (0..n)
                .filter(|&j| row[j] > row[e] || (row[j] == row[e] && j < e))
                .count();
            if better < k {
                selected += 1;
            }
            p += row[e];
        }
        let f = n as f64 / (k as f64 * tt) * selected as f64;
        loss += f * p / tt;
    }
    loss
}

#[test]
fn graph_losses_agree_with_trace_evaluation() {
    let mut r = rng(12);
    let mut model = Model::init(small_config(Some((4, 2))), 3).unwrap();
    randomize_routers(&mut model, &mut r, 1.0);
    let batch = random_batch(&mut r, 3, 12, 40, 4);
    let mut g = Graph::new();
    let b = Binding::new(&mut g, &model, |_| false);
    let out = forward(&mut g, &model, &b, &batch).unwrap();
    let (_, breakdown) = build_objective(
        &mut g,
        &out,
        &batch,
        ObjectiveWeights {
            alpha: Some(0.01),
            gamma: None,
        },
    )
    .unwrap();
    let logits = g.value(out.logits).clone();
    assert!((breakdown.ntp - ntp_loss(&logits, &batch.targets()).unwrap()).abs() < 1e-12);
    assert!((breakdown.balance - balance_loss(&out.trace, 2).unwrap()).abs() < 1e-12);
    assert!((breakdown.lpr - lpr_loss(&out.trace, &batch.flat_tags()).unwrap()).abs() < 1e-12);
    assert!((breakdown.total - (breakdown.ntp + 0.01 * breakdown.balance)).abs() < 1e-12);
    for (layer, &v) in out.trace.layers.iter().zip(&breakdown.per_layer_balance) {
        assert!((v - recount(&layer.scores, 2, &out.trace.active)).abs() < 1e-12);
    }
}

#[test]
fn balance_can_fall_below_one() {
    // N = 3, K = 1: two tokens pick expert 0 by a hair, the third splits
    // its mass between experts 1 and 2. Counts anti-correlate with mean
    // scores.
    let scores = ndarray::array![[0.34, 0.33, 0.33], [0.34, 0.33, 0.33], [0.0, 0.5, 0.5]];
    let trace = RoutingTrace {
        layers: vec![LayerTrace::from_scores(scores.clone(), 1).unwrap()],
        active: vec![true; 3],
    };
    let loss = balance_loss(&trace, 1).unwrap();
    assert!((loss - recount(&scores, 1, &[true; 3])).abs() < 1e-12);
    assert!(loss < 1.0);
}

#[test]
fn empty_trace_is_an_error() {
    let trace = RoutingTrace {
        layers: vec![],
        active: vec![],
    };
    assert!(balance_loss(&trace, 2).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn balance_matches_brute_force_recount(seed in 0u64..10_000, n in 2usize..7, t in 1usize..40) {
        let mut r = rng(seed);
        let k = r.random_range(1..=n);
        let scores = random_scores(&mut r, t, n);
        let active: Vec<bool> = (0..t).map(|i| i == 0 || r.random_bool(0.8)).collect();
        let trace = RoutingTrace {
            layers: vec![LayerTrace::from_scores(scores.clone(), k).unwrap()],
            active: active.clone(),
        };
        let got = balance_loss(&trace, k).unwrap();
        prop_assert!((got - recount(&scores, k, &active)).abs() < 1e-12);
        prop_assert!(got >= 0.0);
    }

    #[test]
    fn uniform_scores_give_one_for_any_selection(seed in 0u64..10_000, n in 2usize..7, t in 1usize..30) {
        let mut r = rng(seed);
        let k = r.random_range(1..=n);
        let mut layer = LayerTrace::from_scores(Array2::from_elem((t, n), 1.0 / n as f64), k).unwrap();
        for row in 0..t {
            let picks = rand::seq::index::sample(&mut r, n, k);
            for (j, e) in picks.into_iter().enumerate() {
                layer.selected[[row, j]] = e;
            }
        }
        let trace = RoutingTrace { layers: vec![layer], active: vec![true; t] };
        prop_assert!((balance_loss(&trace, k).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn balanced_selection_gives_one_for_any_scores(seed in 0u64..10_000, n in 2usize..7, rounds in 1usize..5) {
        // Each token selects a cyclic window of K experts, so every expert
        // is chosen exactly K·T/N times.
        let mut r = rng(seed);
        let k = r.random_range(1..=n);
        let t = n * rounds;
        let mut layer = LayerTrace::from_scores(random_scores(&mut r, t, n), k).unwrap();
        for row in 0..t {
            for j in 0..k {
                layer.selected[[row, j]] = (row + j) % n;
            }
        }
        let trace = RoutingTrace { layers: vec![layer], active: vec![true; t] };
        prop_assert!((balance_loss(&trace, k).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn lpr_decreases_as_any_g0_rises(seed in 0u64..10_000, t in 1usize..12, which in 0usize..12, bump in 0.01f64..0.9) {
        let which = which % t;
        let mut r = rng(seed);
        let n = 4;
        let scores = random_scores(&mut r, t, n);
        let tags: Vec<TokenTag> = (0..t).map(|i| if i == which || r.random_bool(0.5) { TokenTag::Original } else { TokenTag::Expanded }).collect();
        let mut raised = scores.clone();
        let g0 = raised[[which, 0]];
        let new_g0 = g0 + (1.0 - g0) * bump;
        let rest = (1.0 - new_g0) / (1.0 - g0);
        for e in 1..n {
            raised[[which, e]] *= rest;
        }
        raised[[which, 0]] = new_g0;
        let trace = |s: Array2<f64>| RoutingTrace { layers: vec![LayerTrace::from_scores(s, 2).unwrap()], active: vec![true; t] };
        prop_assert!(lpr_loss(&trace(raised), &tags).unwrap() < lpr_loss(&trace(scores), &tags).unwrap());
    }

    #[test]
    fn ntp_is_invariant_to_row_order(seed in 0u64..10_000, rows in 1usize..10) {
        let mut r = rng(seed);
        let logits = random_matrix(&mut r, rows, 7, 4.0);
        let targets: Vec<Option<usize>> = (0..rows).map(|i| (i == 0 || r.random_bool(0.7)).then(|| r.random_range(0..7))).collect();
        let mut order: Vec<usize> = (0..rows).collect();
        order.reverse();
        let permuted = logits.select(ndarray::Axis(0), &order);
        let permuted_targets: Vec<Option<usize>> = order.iter().map(|&i| targets[i]).collect();
        let a = ntp_loss(&logits, &targets).unwrap();
        let b = ntp_loss(&permuted, &permuted_targets).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn stage_totals_follow_their_weights(ntp in 0.0f64..10.0, bal in 0.0f64..4.0, lpr in 0.0f64..4.0, w in 0.0f64..1.0) {
        let terms = LossTerms { ntp, balance: bal, lpr, ..LossTerms::default() };
        prop_assert!((stage1_objective(&terms, w).total - (ntp + w * bal)).abs() < 1e-12);
        prop_assert!((stage2_objective(&terms, w).total - (ntp + w * lpr)).abs() < 1e-12);
    }
}
