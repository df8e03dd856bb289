//! Dense → MoE surgery, per-stage trainability masks, and checkpoints.

mod checkpoint;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, TrainabilityMask};
use crate::error::{Error, Result};
use crate::model::{expert_prefix, init_ffn, init_router, router_name, Model, MoeConfig, ParamKind, FFN_TENSORS};

pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, CheckpointError, FreezeFlags, FORMAT_VERSION, MAGIC,
};

/// How the new experts are initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitMode {
    /// Byte copies of the dense FFN.
    ExpertCopy,
    /// Fresh draws from the dense model's FFN initializer.
    Random,
}

impl fmt::Display for InitMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InitMode::ExpertCopy => "expert-copy",
            InitMode::Random => "random",
        })
    }
}

impl FromStr for InitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "expert-copy" | "expert_copy" => Ok(InitMode::ExpertCopy),
            "random" => Ok(InitMode::Random),
            other => Err(Error::Config(format!("unknown init mode {other:?}"))),
        }
    }
}

/// Which parameters a training run may update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    /// Every parameter: dense pretraining and full fine-tuning.
    Full,
    /// Post-pretraining: new experts and routers.
    Stage1,
    /// Review: routers only.
    Stage2,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Full => "full",
            Stage::Stage1 => "stage1",
            Stage::Stage2 => "stage2",
        })
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Stage::Full),
            "stage1" => Ok(Stage::Stage1),
            "stage2" => Ok(Stage::Stage2),
            other => Err(Error::Config(format!("unknown stage {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UpcycleOptions {
    pub num_experts: usize,
    pub top_k: usize,
    pub init: InitMode,
    /// Seeds router (and random-expert) initialization.
    pub seed: u64,
}

impl Default for UpcycleOptions {
    fn default() -> Self {
        Self {
            num_experts: 6,
            top_k: 2,
            init: InitMode::ExpertCopy,
            seed: 0,
        }
    }
}

/// Turn every dense FFN into expert 0 of an `N`-expert layer and add a
/// router.
pub fn upcycle_model(dense: &Model, opts: UpcycleOptions) -> Result<Model> {
    if dense.config().is_moe() {
        return Err(Error::Config("upcycle input is already an MoE model".into()));
    }
    if opts.num_experts < 2 {
        return Err(Error::Config(format!(
            "upcycling needs at least 2 experts, got {}",
            opts.num_experts
        )));
    }
    let mut config = dense.config().clone();
    config.moe = Some(MoeConfig {
        num_experts: opts.num_experts,
        top_k: opts.top_k,
    });
    config.validate()?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut params = ParamStore::new();
    for (name, t) in dense.params().iter() {
        match ParamKind::of(name) {
            Some(ParamKind::DenseFfn { layer }) => {
                if name != format!("layers.{layer}.ffn.up") {
                    continue;
                }
                params.insert(
                    router_name(layer),
                    init_router(&mut rng, config.hidden, opts.num_experts),
                );
                for i in 0..opts.num_experts {
                    if i > 0 && opts.init == InitMode::Random {
                        init_ffn(&mut rng, &mut params, &expert_prefix(layer, i), &config);
                        continue;
                    }
                    for part in FFN_TENSORS {
                        let src = dense.param(&format!("layers.{layer}.ffn.{part}"))?;
                        params.insert(format!("{}.{part}", expert_prefix(layer, i)), src.clone());
                    }
                }
            }
            Some(_) => params.insert(name, t.clone()),
            None => return Err(Error::Config(format!("unrecognized tensor {name}"))),
        }
    }
    Model::from_parts(config, params)
}

/// Checkpoint-level upcycle; the result carries freeze metadata for both
/// stages.
pub fn upcycle(dense: &Checkpoint, opts: UpcycleOptions) -> Result<Checkpoint> {
    let model = dense.to_model()?;
    let moe = upcycle_model(&model, opts)?;
    Checkpoint::from_model(&moe, opts.seed)
}

/// Trainable set for `stage`. Attention, embeddings, norms, the output
/// head and expert 0 are frozen in both MoE stages.
pub fn trainable_mask(model: &Model, stage: Stage) -> Result<TrainabilityMask> {
    if stage != Stage::Full && !model.config().is_moe() {
        return Err(Error::Config(format!("{stage} training needs an upcycled MoE model")));
    }
    let names = model.params().names();
    Ok(TrainabilityMask::from_fn(names, |name| {
        let kind = ParamKind::of(name);
        match stage {
            Stage::Full => true,
            Stage::Stage1 => matches!(
                kind,
                Some(ParamKind::Router { .. }) | Some(ParamKind::Expert { index: 1.., .. })
            ),
            Stage::Stage2 => matches!(kind, Some(ParamKind::Router { .. })),
        }
    }))
}
