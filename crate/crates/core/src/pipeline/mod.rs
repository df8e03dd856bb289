//! Stage trainer, evaluation, routing forensics and the forgetting
//! experiment.

mod eval;
mod experiment;

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::{adam_step, cosine_lr, default_warmup, AdamConfig, Graph, OptimizerState, TrainabilityMask};
use crate::data::{build_batches, mix_corpora, BatchStream, Document, MixRatio, TaggedBatch, TokenTag};
use crate::error::{Error, Result};
use crate::model::{forward, Binding, Model};
use crate::objectives::{build_objective, LossBreakdown, ObjectiveWeights, DEFAULT_ALPHA, DEFAULT_GAMMA};
use crate::upcycle::{save_checkpoint, trainable_mask, Checkpoint, Stage};

pub use eval::{perplexity, routing_report, PerplexityRow, PerplexityTable, RoutingRow, RoutingStats, HISTOGRAM_BINS};
pub use experiment::{
    forgetting_experiment, freeze_audit, synthetic_corpora, CellKind, CellReport, ExperimentConfig, ExperimentCorpus,
    ExperimentReport, FreezeAudit, ReplayAudit, SyntheticCorpora,
};

/// Hyperparameters of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub stage: Stage,
    pub steps: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub base_lr: f64,
    #[serde(default)]
    pub min_lr: f64,
    /// Defaults to 1% of `steps`.
    #[serde(default)]
    pub warmup: Option<usize>,
    #[serde(default)]
    pub weight_decay: f64,
    /// Balance weight. Not allowed in stage 2.
    #[serde(default)]
    pub alpha: Option<f64>,
    /// LPR weight. Stage 2, or stage 1 with `one_stage`.
    #[serde(default)]
    pub gamma: Option<f64>,
    /// Moves LPR and replay into stage 1.
    #[serde(default)]
    pub one_stage: bool,
    /// Original:expanded document mix of the training stream.
    #[serde(default)]
    pub replay_ratio: Option<MixRatio>,
    pub seed: u64,
    /// Keep a last-good copy every this many steps (and write it when
    /// `checkpoint_dir` is set).
    #[serde(default)]
    pub checkpoint_every: Option<usize>,
    #[serde(default)]
    pub checkpoint_dir: Option<PathBuf>,
}

impl StageConfig {
    fn base(stage: Stage, steps: usize, batch_size: usize, seq_len: usize, base_lr: f64) -> Self {
        Self {
            stage,
            steps,
            batch_size,
            seq_len,
            base_lr,
            min_lr: 0.0,
            warmup: None,
            weight_decay: 0.0,
            alpha: None,
            gamma: None,
            one_stage: false,
            replay_ratio: None,
            seed: 0,
            checkpoint_every: None,
            checkpoint_dir: None,
        }
    }

    /// Every parameter trainable, NTP only.
    pub fn full(steps: usize, batch_size: usize, seq_len: usize, base_lr: f64) -> Self {
        Self::base(Stage::Full, steps, batch_size, seq_len, base_lr)
    }

    /// Post-pretraining with `α = 0.01`.
    pub fn stage1(steps: usize, batch_size: usize, seq_len: usize, base_lr: f64) -> Self {
        Self {
            alpha: Some(DEFAULT_ALPHA),
            ..Self::base(Stage::Stage1, steps, batch_size, seq_len, base_lr)
        }
    }

    /// Review with `γ = 0.1` on a 1:2 original:expanded mix.
    pub fn stage2(steps: usize, batch_size: usize, seq_len: usize, base_lr: f64) -> Self {
        Self {
            gamma: Some(DEFAULT_GAMMA),
            replay_ratio: Some(MixRatio::new(1, 2)),
            ..Self::base(Stage::Stage2, steps, batch_size, seq_len, base_lr)
        }
    }

    pub fn warmup_steps(&self) -> usize {
        self.warmup.unwrap_or_else(|| default_warmup(self.steps))
    }

    /// Tokens (pads included) the run will consume.
    pub fn token_budget(&self) -> usize {
        self.steps * self.batch_size * self.seq_len
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 || self.seq_len == 0 {
            return bad("batch size and sequence length must be at least 1".into());
        }
        if !(self.base_lr.is_finite() && self.base_lr >= 0.0) {
            return bad(format!("learning rate {} is not a non-negative number", self.base_lr));
        }
        if self.warmup_steps() > self.steps {
            return bad(format!(
                "warmup of {} steps exceeds the {} total",
                self.warmup_steps(),
                self.steps
            ));
        }
        for (name, v) in [("alpha", self.alpha), ("gamma", self.gamma)] {
            if let Some(v) = v {
                if !(v.is_finite() && v >= 0.0) {
                    return bad(format!("{name} must be a non-negative number, got {v}"));
                }
            }
        }
        if self.checkpoint_every == Some(0) {
            return bad("checkpoint cadence must be at least 1 step".into());
        }
        match self.stage {
            Stage::Stage2 if self.alpha.is_some() => {
                bad("alpha is a stage-1 setting; review trains without the balance loss".into())
            }
            Stage::Stage2 if self.one_stage => bad("the one-stage variant replaces review and runs as stage 1".into()),
            Stage::Stage1 if !self.one_stage && self.gamma.is_some() => {
                bad("gamma is a stage-2 setting (use the one-stage variant to add LPR to stage 1)".into())
            }
            Stage::Stage1 if !self.one_stage && self.replay_ratio.is_some() => {
                bad("replay ratio applies to stage 2 only".into())
            }
            Stage::Full if self.gamma.is_some() || self.one_stage || self.replay_ratio.is_some() => {
                bad("full training takes no gamma, replay ratio or one-stage flag".into())
            }
            _ => Ok(()),
        }
    }

    fn objective_weights(&self) -> ObjectiveWeights {
        ObjectiveWeights {
            alpha: self.alpha,
            gamma: self.gamma,
        }
    }

    /// Training stream for this stage. With a replay ratio, documents are
    /// mixed in fixed windows and streamed in that order so the token
    /// share of each role tracks the ratio.
    pub fn stream(&self, original: &[Document], expanded: &[Document]) -> Result<BatchStream> {
        match self.replay_ratio {
            Some(ratio) => {
                let mixed = mix_corpora(original, expanded, ratio, None, self.seed)?;
                Ok(build_batches(&mixed.docs, self.seq_len, self.batch_size, self.seed)?.ordered())
            }
            None => {
                let docs: Vec<Document> = original.iter().chain(expanded).cloned().collect();
                build_batches(&docs, self.seq_len, self.batch_size, self.seed)
            }
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub ntp: f64,
    pub balance: f64,
    pub lpr: f64,
    pub total: f64,
    pub tokens: usize,
    pub original_tokens: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub records: Vec<StepRecord>,
    /// Non-pad tokens consumed.
    pub tokens_seen: usize,
    pub original_tokens_seen: usize,
}

impl TrainingLog {
    fn push(&mut self, step: usize, lr: f64, b: &LossBreakdown) {
        self.tokens_seen += b.tokens;
        self.original_tokens_seen += b.original_tokens;
        self.records.push(StepRecord {
            step,
            lr,
            ntp: b.ntp,
            balance: b.balance,
            lpr: b.lpr,
            total: b.total,
            tokens: b.tokens,
            original_tokens: b.original_tokens,
        });
    }

    pub fn last(&self) -> Option<&StepRecord> {
        self.records.last()
    }

    /// One JSON object per line.
    pub fn to_ndjson(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("records serialize") + "\n")
            .collect()
    }

    pub fn write_ndjson(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_ndjson()).map_err(|e| Error::io(path, e))
    }
}

/// Result of a completed run.
#[derive(Debug, Clone)]
pub struct StageOutcome {
    pub model: Model,
    pub log: TrainingLog,
}

/// A run stopped by a non-finite loss or gradient. `last_good` is the most
/// recent cadence snapshot, or the starting model.
#[derive(Debug)]
pub struct StageAbort {
    pub step: usize,
    pub error: Error,
    pub last_good: Box<Model>,
    pub last_good_step: usize,
    pub log: TrainingLog,
}

impl fmt::Display for StageAbort {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "training aborted at step {} ({}); last good state from step {}",
            self.step, self.error, self.last_good_step
        )
    }
}

impl std::error::Error for StageAbort {}

impl From<StageAbort> for Error {
    fn from(a: StageAbort) -> Self {
        match a.error {
            Error::Numeric(_) => Error::Numeric(a.to_string()),
            other => other,
        }
    }
}

/// Train `model` for `config.steps` steps on `data`, updating only the
/// parameters `mask` marks trainable.
pub fn run_stage(
    model: Model,
    mask: &TrainabilityMask,
    config: &StageConfig,
    data: &mut dyn Iterator<Item = TaggedBatch>,
) -> Result<StageOutcome, StageAbort> {
    let fail = |model: Model, error: Error| StageAbort {
        step: 0,
        error,
        last_good: Box::new(model),
        last_good_step: 0,
        log: TrainingLog::default(),
    };
    if let Err(e) = config.validate() {
        return Err(fail(model, e));
    }
    match trainable_mask(&model, config.stage) {
        Ok(expected) if &expected == mask => {}
        Ok(_) => {
            return Err(fail(
                model,
                Error::Config(format!("trainability mask does not match {}", config.stage)),
            ))
        }
        Err(e) => return Err(fail(model, e)),
    }
    if config.gamma.is_some() && !model.config().is_moe() {
        return Err(fail(model, Error::Config("gamma needs a routed model".into())));
    }

    let weights = config.objective_weights();
    let warmup = config.warmup_steps();
    let mut opt = OptimizerState::new(AdamConfig {
        weight_decay: config.weight_decay,
        ..AdamConfig::default()
    });
    let mut model = model;
    let mut log = TrainingLog::default();
    let mut last_good = (model.clone(), 0usize);

    for step in 0..config.steps {
        let result = train_step(&mut model, mask, config, &weights, &mut opt, data, step, warmup);
        match result {
            Ok((lr, breakdown)) => log.push(step, lr, &breakdown),
            Err(error) => {
                log::error!("step {step}: {error}");
                return Err(StageAbort {
                    step,
                    error,
                    last_good: Box::new(last_good.0),
                    last_good_step: last_good.1,
                    log,
                });
            }
        }
        if let Some(every) = config.checkpoint_every {
            let done = step + 1;
            if done % every == 0 || done == config.steps {
                last_good = (model.clone(), done);
                if let Some(dir) = &config.checkpoint_dir {
                    let path = dir.join(format!("{}-step{done:06}.ckpt", config.stage));
                    let written = Checkpoint::from_model(&model, config.seed).and_then(|c| save_checkpoint(&path, &c));
                    if let Err(error) = written {
                        return Err(StageAbort {
                            step,
                            error,
                            last_good: Box::new(last_good.0),
                            last_good_step: last_good.1,
                            log,
                        });
                    }
                }
            }
        }
        if step % 100 == 0 || step + 1 == config.steps {
            if let Some(r) = log.last() {
                log::debug!(
                    "{} step {step}: lr {:.3e} ntp {:.4} balance {:.4} lpr {:.4}",
                    config.stage,
                    r.lr,
                    r.ntp,
                    r.balance,
                    r.lpr
                );
            }
        }
    }
    Ok(StageOutcome { model, log })
}

#[allow(clippy::too_many_arguments)]
fn train_step(
    model: &mut Model,
    mask: &TrainabilityMask,
    config: &StageConfig,
    weights: &ObjectiveWeights,
    opt: &mut OptimizerState,
    data: &mut dyn Iterator<Item = TaggedBatch>,
    step: usize,
    warmup: usize,
) -> Result<(f64, LossBreakdown)> {
    let lr = cosine_lr(step, config.steps, config.base_lr, warmup, config.min_lr)?;
    let batch = data
        .next()
        .ok_or_else(|| Error::Data(format!("data stream ended before step {step}")))?;
    let mut g = Graph::new();
    let binding = Binding::new(&mut g, model, |n| mask.is_trainable(n));
    let out = forward(&mut g, model, &binding, &batch)?;
    let (loss, breakdown) = build_objective(&mut g, &out, &batch, *weights)?;
    if !breakdown.total.is_finite() {
        return Err(Error::Numeric(format!("loss is {}", breakdown.total)));
    }
    let mut grads = g.backward(loss)?;
    let grads = binding.collect_gradients(&mut grads);
    adam_step(model.params_mut(), &grads, opt, lr, mask)?;
    Ok((lr, breakdown))
}

/// Share of original-language tokens among the non-pad tokens of a batch.
pub fn original_share(batch: &TaggedBatch) -> f64 {
    let o = batch.count(TokenTag::Original);
    let e = batch.count(TokenTag::Expanded);
    if o + e == 0 {
        0.0
    } else {
        o as f64 / (o + e) as f64
    }
}
