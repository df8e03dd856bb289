#![allow(dead_code)]

use moe_lpr::autodiff::Tensor;
use moe_lpr::data::{PackedSequence, TaggedBatch, TokenTag};
use moe_lpr::model::{Model, ModelConfig, MoeConfig};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn small_config(moe: Option<(usize, usize)>) -> ModelConfig {
    ModelConfig {
        vocab_size: 40,
        hidden: 16,
        layers: 2,
        heads: 2,
        ffn_dim: 32,
        max_seq_len: 16,
        moe: moe.map(|(num_experts, top_k)| MoeConfig { num_experts, top_k }),
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random ids with a random original/expanded split per row and an
/// optional padded tail.
pub fn random_batch(rng: &mut ChaCha8Rng, batch: usize, seq: usize, vocab: usize, pad_tail: usize) -> TaggedBatch {
    let rows: Vec<PackedSequence> = (0..batch)
        .map(|_| {
            let cut = rng.random_range(0..=seq);
            let live = seq - pad_tail.min(seq);
            let ids = (0..seq)
                .map(|t| if t < live { rng.random_range(0..vocab) } else { 0 })
                .collect();
            let tags = (0..seq)
                .map(|t| {
                    if t >= live {
                        TokenTag::Pad
                    } else if t < cut {
                        TokenTag::Original
                    } else {
                        TokenTag::Expanded
                    }
                })
                .collect();
            PackedSequence { ids, tags }
        })
        .collect();
    TaggedBatch::from_sequences(&rows)
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-scale..scale))
}

/// Overwrite every router with weights of the given scale.
pub fn randomize_routers(model: &mut Model, rng: &mut ChaCha8Rng, scale: f64) {
    let config = model.config().clone();
    for l in 0..config.layers {
        let name = format!("layers.{l}.router");
        if let Some(t) = model.params_mut().get_mut(&name) {
            let (r, c) = t.array().dim();
            *t = Tensor::new(random_matrix(rng, r, c, scale));
        }
    }
}
