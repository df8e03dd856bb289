//! Decoder-only transformer whose FFN slots are either a single dense FFN
//! or a routed set of experts.
//!
//! Parameter names are stable and double as checkpoint keys:
//!
//! ```text
//! embed.tokens                      V x h
//! embed.positions                   S x h
//! layers.{l}.attn_norm.{gain,bias}  1 x h
//! layers.{l}.attn.{q,k,v,o}         h x h
//! layers.{l}.ffn_norm.{gain,bias}   1 x h
//! layers.{l}.ffn.{up,up_bias,down,down_bias}              dense block
//! layers.{l}.router                                       h x N
//! layers.{l}.experts.{i}.{up,up_bias,down,down_bias}      MoE block
//! final_norm.{gain,bias}            1 x h
//! lm_head                           h x V
//! ```

mod forward;
mod routing;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tensor};
use crate::error::{Error, Result};

pub use forward::{forward, lm_forward, moe_layer_forward, Binding, ForwardOutput, LayerNodes};
pub use routing::{router_scores, select_topk, LayerTrace, RoutingTrace, TopK};

/// Routed-FFN shape: `N` experts, `K` active per token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MoeConfig {
    pub num_experts: usize,
    pub top_k: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub max_seq_len: usize,
    /// `None` for a dense model.
    pub moe: Option<MoeConfig>,
}

impl Default for ModelConfig {
    /// Desk-scale dense base: 2 layers, h = 64, FFN 256, byte vocabulary.
    fn default() -> Self {
        Self {
            vocab_size: crate::data::VOCAB_SIZE,
            hidden: 64,
            layers: 2,
            heads: 4,
            ffn_dim: 256,
            max_seq_len: 64,
            moe: None,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("hidden", self.hidden),
            ("layers", self.layers),
            ("heads", self.heads),
            ("ffn_dim", self.ffn_dim),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "hidden {} not divisible by heads {}",
                self.hidden, self.heads
            )));
        }
        if let Some(m) = self.moe {
            if m.num_experts == 0 {
                return Err(Error::Config("need at least one expert".into()));
            }
            if m.top_k == 0 || m.top_k > m.num_experts {
                return Err(Error::Config(format!(
                    "top-k {} outside 1..={}",
                    m.top_k, m.num_experts
                )));
            }
        }
        Ok(())
    }

    pub fn is_moe(&self) -> bool {
        self.moe.is_some()
    }

    pub fn num_experts(&self) -> usize {
        self.moe.map_or(1, |m| m.num_experts)
    }

    pub fn top_k(&self) -> usize {
        self.moe.map_or(1, |m| m.top_k)
    }
}

/// What a parameter is, recovered from its name.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Embedding,
    Norm,
    Attention,
    Head,
    DenseFfn { layer: usize },
    Router { layer: usize },
    Expert { layer: usize, index: usize },
}

impl ParamKind {
    pub fn of(name: &str) -> Option<ParamKind> {
        if name.starts_with("embed.") {
            return Some(ParamKind::Embedding);
        }
        if name == "lm_head" {
            return Some(ParamKind::Head);
        }
        if name.starts_with("final_norm.") {
            return Some(ParamKind::Norm);
        }
        let rest = name.strip_prefix("layers.")?;
        let (layer, rest) = rest.split_once('.')?;
        let layer: usize = layer.parse().ok()?;
        if rest.starts_with("attn_norm.") || rest.starts_with("ffn_norm.") {
            Some(ParamKind::Norm)
        } else if rest.starts_with("attn.") {
            Some(ParamKind::Attention)
        } else if rest.starts_with("ffn.") {
            Some(ParamKind::DenseFfn { layer })
        } else if rest == "router" {
            Some(ParamKind::Router { layer })
        } else {
            let rest = rest.strip_prefix("experts.")?;
            let (index, _) = rest.split_once('.')?;
            Some(ParamKind::Expert {
                layer,
                index: index.parse().ok()?,
            })
        }
    }
}

pub(crate) const FFN_TENSORS: [&str; 4] = ["up", "up_bias", "down", "down_bias"];

pub(crate) fn expert_prefix(layer: usize, index: usize) -> String {
    format!("layers.{layer}.experts.{index}")
}

pub(crate) fn router_name(layer: usize) -> String {
    format!("layers.{layer}.router")
}

/// A model is its configuration plus a named parameter store.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
}

impl Model {
    /// Assemble from parts, checking that every expected tensor is present
    /// with the right shape and nothing else is.
    pub fn from_parts(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let expected = expected_shapes(&config);
        if expected.len() != params.len() {
            return Err(Error::Config(format!(
                "expected {} tensors, found {}",
                expected.len(),
                params.len()
            )));
        }
        for (name, shape) in &expected {
            match params.get(name) {
                None => return Err(Error::Config(format!("missing tensor {name}"))),
                Some(t) if t.shape() != *shape => {
                    return Err(Error::Config(format!(
                        "tensor {name} has shape {:?}, expected {:?}",
                        t.shape(),
                        shape
                    )))
                }
                Some(_) => {}
            }
        }
        Ok(Self { config, params })
    }

    /// Fresh random model.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let (h, v) = (config.hidden, config.vocab_size);
        let resid_std = WEIGHT_STD / (2.0 * config.layers as f64).sqrt();
        params.insert("embed.tokens", normal(&mut rng, v, h, WEIGHT_STD));
        params.insert("embed.positions", normal(&mut rng, config.max_seq_len, h, WEIGHT_STD));
        for l in 0..config.layers {
            insert_norm(&mut params, &format!("layers.{l}.attn_norm"), h);
            for p in ["q", "k", "v"] {
                params.insert(format!("layers.{l}.attn.{p}"), normal(&mut rng, h, h, WEIGHT_STD));
            }
            params.insert(format!("layers.{l}.attn.o"), normal(&mut rng, h, h, resid_std));
            insert_norm(&mut params, &format!("layers.{l}.ffn_norm"), h);
            match config.moe {
                None => init_ffn(&mut rng, &mut params, &format!("layers.{l}.ffn"), &config),
                Some(m) => {
                    params.insert(router_name(l), init_router(&mut rng, h, m.num_experts));
                    for i in 0..m.num_experts {
                        init_ffn(&mut rng, &mut params, &expert_prefix(l, i), &config);
                    }
                }
            }
        }
        insert_norm(&mut params, "final_norm", h);
        params.insert("lm_head", normal(&mut rng, h, v, WEIGHT_STD));
        Self::from_parts(config, params)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn into_parts(self) -> (ModelConfig, ParamStore) {
        (self.config, self.params)
    }

    pub fn param(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Config(format!("no parameter named {name}")))
    }

    pub fn census(&self) -> ParamCensus {
        param_census(self)
    }
}

const WEIGHT_STD: f64 = 0.02;

fn normal(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("positive std");
    Tensor::new(Array2::from_shape_fn((rows, cols), |_| dist.sample(rng)))
}

fn insert_norm(params: &mut ParamStore, prefix: &str, h: usize) {
    params.insert(format!("{prefix}.gain"), Tensor::new(Array2::ones((1, h))));
    params.insert(format!("{prefix}.bias"), Tensor::zeros(1, h));
}

/// FFN initializer shared by dense models and randomly initialized experts.
pub(crate) fn init_ffn(rng: &mut ChaCha8Rng, params: &mut ParamStore, prefix: &str, config: &ModelConfig) {
    let (h, f) = (config.hidden, config.ffn_dim);
    let resid_std = WEIGHT_STD / (2.0 * config.layers as f64).sqrt();
    params.insert(format!("{prefix}.up"), normal(rng, h, f, WEIGHT_STD));
    params.insert(format!("{prefix}.up_bias"), Tensor::zeros(1, f));
    params.insert(format!("{prefix}.down"), normal(rng, f, h, resid_std));
    params.insert(format!("{prefix}.down_bias"), Tensor::zeros(1, h));
}

/// Router weights, uniform in `±0.02/√h`.
pub(crate) fn init_router(rng: &mut ChaCha8Rng, h: usize, n: usize) -> Tensor {
    let bound = 0.02 / (h as f64).sqrt();
    Tensor::new(Array2::from_shape_fn((h, n), |_| rng.random_range(-bound..=bound)))
}

fn expected_shapes(config: &ModelConfig) -> Vec<(String, [usize; 2])> {
    let (h, v, f) = (config.hidden, config.vocab_size, config.ffn_dim);
    let mut out = vec![
        ("embed.tokens".to_string(), [v, h]),
        ("embed.positions".to_string(), [config.max_seq_len, h]),
    ];
    let ffn = |out: &mut Vec<(String, [usize; 2])>, prefix: &str| {
        out.push((format!("{prefix}.up"), [h, f]));
        out.push((format!("{prefix}.up_bias"), [1, f]));
        out.push((format!("{prefix}.down"), [f, h]));
        out.push((format!("{prefix}.down_bias"), [1, h]));
    };
    for l in 0..config.layers {
        out.push((format!("layers.{l}.attn_norm.gain"), [1, h]));
        out.push((format!("layers.{l}.attn_norm.bias"), [1, h]));
        for p in ["q", "k", "v", "o"] {
            out.push((format!("layers.{l}.attn.{p}"), [h, h]));
        }
        out.push((format!("layers.{l}.ffn_norm.gain"), [1, h]));
        out.push((format!("layers.{l}.ffn_norm.bias"), [1, h]));
        match config.moe {
            None => ffn(&mut out, &format!("layers.{l}.ffn")),
            Some(m) => {
                out.push((router_name(l), [h, m.num_experts]));
                for i in 0..m.num_experts {
                    ffn(&mut out, &expert_prefix(l, i));
                }
            }
        }
    }
    out.push(("final_norm.gain".to_string(), [1, h]));
    out.push(("final_norm.bias".to_string(), [1, h]));
    out.push(("lm_head".to_string(), [h, v]));
    out
}

/// Total parameters and parameters touched by one token's forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCensus {
    pub total: usize,
    pub activated_per_token: usize,
    /// All router weights.
    pub router: usize,
}

/// Activated = everything outside the expert banks and routers, plus `K`
/// experts and the `K` matching router columns per MoE layer. Counting the
/// whole `h×N` router would make the activated count grow with `N`.
pub fn param_census(model: &Model) -> ParamCensus {
    let total = model.params.num_scalars();
    let mut inactive = 0;
    let mut router = 0;
    if let Some(m) = model.config.moe {
        for l in 0..model.config.layers {
            let r = model.params.get(&router_name(l)).map_or(0, Tensor::len);
            router += r;
            inactive += r / m.num_experts * (m.num_experts - m.top_k);
            let expert_size: usize = FFN_TENSORS
                .iter()
                .map(|t| {
                    model
                        .params
                        .get(&format!("{}.{t}", expert_prefix(l, 0)))
                        .map_or(0, Tensor::len)
                })
                .sum();
            inactive += (m.num_experts - m.top_k) * expert_size;
        }
    }
    ParamCensus {
        total,
        activated_per_token: total - inactive,
        router,
    }
}
