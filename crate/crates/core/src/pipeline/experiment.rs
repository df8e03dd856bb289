//! The forgetting experiment: a dense base pretrained on the original
//! language, then every comparison cell trained from it in parallel.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::thread;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    perplexity, routing_report, run_stage, PerplexityTable, RoutingStats, StageConfig, StepRecord, TrainingLog,
};
use crate::autodiff::TrainabilityMask;
use crate::data::{Document, Role, SynthConfig};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::upcycle::{trainable_mask, upcycle_model, Checkpoint, InitMode, Stage, UpcycleOptions};

/// Document counts for the synthetic corpora. Every language draws its
/// splits from disjoint generator seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentCorpus {
    /// Per original-role language, for the dense base.
    pub pretrain_docs: usize,
    /// Per expanded-role language: documents from a dialect (same alphabet,
    /// unrelated chain) mixed into base pretraining, so the base knows the
    /// script but none of the language's statistics.
    pub pretrain_script_docs: usize,
    /// Per expanded-role language, for stage 1 and dense fine-tuning.
    pub stage1_docs: usize,
    /// Replayed from the first original language's pretraining documents.
    pub review_original_docs: usize,
    /// Taken from the stage-1 documents.
    pub review_expanded_docs: usize,
    /// Held-out documents per language.
    pub eval_docs: usize,
}

impl Default for ExperimentCorpus {
    fn default() -> Self {
        Self {
            pretrain_docs: 400,
            pretrain_script_docs: 40,
            stage1_docs: 400,
            review_original_docs: 12,
            review_expanded_docs: 24,
            eval_docs: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// Dense base architecture.
    pub model: ModelConfig,
    pub num_experts: usize,
    pub top_k: usize,
    pub synth: SynthConfig,
    pub corpus: ExperimentCorpus,
    pub pretrain: StageConfig,
    pub dense_finetune: StageConfig,
    pub stage1: StageConfig,
    pub stage2: StageConfig,
    pub eval_seq_len: usize,
    pub eval_batch_size: usize,
    pub seed: u64,
    /// Run independent cells on separate threads. Each cell is itself
    /// single-threaded, so results do not depend on this flag.
    pub parallel: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            num_experts: 4,
            top_k: 2,
            synth: SynthConfig::default(),
            corpus: ExperimentCorpus::default(),
            pretrain: StageConfig {
                seed: 11,
                ..StageConfig::full(2000, 8, 64, 3e-3)
            },
            dense_finetune: StageConfig {
                seed: 12,
                ..StageConfig::full(2000, 8, 64, 1e-3)
            },
            stage1: StageConfig {
                seed: 12,
                ..StageConfig::stage1(2000, 32, 64, 2e-3)
            },
            stage2: StageConfig {
                seed: 13,
                ..StageConfig::stage2(300, 4, 32, 1e-3)
            },
            eval_seq_len: 64,
            eval_batch_size: 16,
            seed: 7,
            parallel: true,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.model.is_moe() {
            return Err(Error::Config("the experiment's base model must be dense".into()));
        }
        for (name, cfg, stage) in [
            ("pretrain", &self.pretrain, Stage::Full),
            ("dense_finetune", &self.dense_finetune, Stage::Full),
            ("stage1", &self.stage1, Stage::Stage1),
            ("stage2", &self.stage2, Stage::Stage2),
        ] {
            cfg.validate()?;
            if cfg.stage != stage {
                return Err(Error::Config(format!("{name} must run as {stage}")));
            }
            if cfg.seq_len > self.model.max_seq_len {
                return Err(Error::Config(format!(
                    "{name} sequence length {} exceeds the model maximum {}",
                    cfg.seq_len, self.model.max_seq_len
                )));
            }
        }
        if self.eval_seq_len == 0 || self.eval_seq_len > self.model.max_seq_len {
            return Err(Error::Config(format!(
                "eval sequence length must be in 1..={}",
                self.model.max_seq_len
            )));
        }
        if self.stage2.replay_ratio.is_none() {
            return Err(Error::Config("review needs a replay ratio".into()));
        }
        Ok(())
    }
}

/// Cells of the comparison matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CellKind {
    /// The pretrained dense model.
    Base,
    DenseFullFinetune,
    /// Expert-copy upcycle after stage 1.
    WithoutReview,
    /// Stage 2 with `γ = 0`.
    WithoutLpr,
    /// The full two-stage pipeline.
    MoeLpr,
    /// Random-init experts after stage 1.
    WithoutEcStage1,
    /// Random-init experts after both stages.
    WithoutEc,
}

impl CellKind {
    pub const ALL: [CellKind; 7] = [
        CellKind::Base,
        CellKind::DenseFullFinetune,
        CellKind::WithoutReview,
        CellKind::WithoutLpr,
        CellKind::MoeLpr,
        CellKind::WithoutEcStage1,
        CellKind::WithoutEc,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CellKind::Base => "base",
            CellKind::DenseFullFinetune => "dense-full-finetune",
            CellKind::WithoutReview => "without-review",
            CellKind::WithoutLpr => "without-lpr",
            CellKind::MoeLpr => "moe-lpr",
            CellKind::WithoutEcStage1 => "without-ec-stage1",
            CellKind::WithoutEc => "without-ec",
        }
    }
}

impl fmt::Display for CellKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.name())
    }
}

/// Hash comparison of every frozen tensor before and after a run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezeAudit {
    pub stage: Stage,
    pub frozen_checked: usize,
    pub trainable: usize,
    /// Frozen tensors whose SHA-256 changed; empty when the audit passes.
    pub changed: Vec<String>,
}

impl FreezeAudit {
    pub fn passed(&self) -> bool {
        self.changed.is_empty() && self.frozen_checked > 0
    }
}

/// Compare SHA-256 digests of every tensor `mask` marks frozen.
pub fn freeze_audit(before: &Model, after: &Model, mask: &TrainabilityMask, stage: Stage) -> FreezeAudit {
    let a = before.params().digests();
    let b = after.params().digests();
    let mut audit = FreezeAudit {
        stage,
        frozen_checked: 0,
        trainable: 0,
        changed: Vec::new(),
    };
    for (name, hash) in &a {
        if mask.is_trainable(name) {
            audit.trainable += 1;
            continue;
        }
        audit.frozen_checked += 1;
        if b.get(name) != Some(hash) {
            audit.changed.push(name.clone());
        }
    }
    audit
}

/// Original-language tokens consumed by review against all tokens
/// consumed by stage 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReplayAudit {
    pub stage1_tokens: usize,
    pub review_original_tokens: usize,
    pub review_tokens: usize,
    pub fraction: f64,
    /// Whether `fraction < 0.01`.
    pub passed: bool,
}

impl ReplayAudit {
    pub fn new(stage1: &TrainingLog, review: &TrainingLog) -> Self {
        let fraction = if stage1.tokens_seen == 0 {
            f64::INFINITY
        } else {
            review.original_tokens_seen as f64 / stage1.tokens_seen as f64
        };
        Self {
            stage1_tokens: stage1.tokens_seen,
            review_original_tokens: review.original_tokens_seen,
            review_tokens: review.tokens_seen,
            fraction,
            passed: fraction < 0.01,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct CellReport {
    pub perplexity: Option<PerplexityTable>,
    pub routing: Option<RoutingStats>,
    pub freeze_audit: Option<FreezeAudit>,
    pub final_step: Option<StepRecord>,
    pub tokens_seen: usize,
    pub original_tokens_seen: usize,
    /// SHA-256 of the serialized checkpoint.
    pub checkpoint_sha256: Option<String>,
    pub failure: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub cells: BTreeMap<CellKind, CellReport>,
    pub replay: Option<ReplayAudit>,
    /// Trained models by cell; not serialized.
    #[serde(skip)]
    pub models: BTreeMap<CellKind, Model>,
    #[serde(skip)]
    pub logs: BTreeMap<CellKind, TrainingLog>,
}

impl ExperimentReport {
    pub fn cell(&self, kind: CellKind) -> Option<&CellReport> {
        self.cells.get(&kind)
    }

    /// Mean per-token loss of `role` in a completed cell.
    pub fn loss(&self, kind: CellKind, role: Role) -> Option<f64> {
        self.cell(kind)?.perplexity.as_ref()?.mean_loss(role)
    }

    pub fn perplexity_csv(&self) -> String {
        let mut out = String::from("cell,lang,role,tokens,mean_loss,perplexity\n");
        for (kind, cell) in &self.cells {
            if let Some(t) = &cell.perplexity {
                for line in t.to_csv().lines().skip(1) {
                    out.push_str(&format!("{kind},{line}\n"));
                }
            }
        }
        out
    }

    pub fn routing_csv(&self) -> String {
        let mut header = None;
        let mut body = String::new();
        for (kind, cell) in &self.cells {
            if let Some(r) = &cell.routing {
                let csv = r.to_csv();
                let mut lines = csv.lines();
                let head = lines.next().unwrap_or_default();
                header.get_or_insert_with(|| format!("cell,{head}\n"));
                for line in lines {
                    body.push_str(&format!("{kind},{line}\n"));
                }
            }
        }
        header.unwrap_or_default() + &body
    }

    /// Writes `report.json`, `perplexity.csv`, `routing.csv` and one
    /// training log per trained cell into `dir`.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let write = |name: &str, contents: String| {
            let path = dir.join(name);
            std::fs::write(&path, contents).map_err(|e| Error::io(&path, e))
        };
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::Data(e.to_string()))?;
        write("report.json", json + "\n")?;
        write("perplexity.csv", self.perplexity_csv())?;
        write("routing.csv", self.routing_csv())?;
        for (kind, log) in &self.logs {
            write(&format!("train-{kind}.ndjson"), log.to_ndjson())?;
        }
        Ok(())
    }
}

/// Chain-seed offset of the pretraining dialect of each expanded language.
const DIALECT_OFFSET: u64 = 7_919;

/// Every split the experiment draws from the synthetic languages.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyntheticCorpora {
    /// Original-language documents for the dense base.
    pub pretrain: Vec<Document>,
    /// Dialect documents in each expanded language's alphabet, also for the
    /// dense base.
    pub script: Vec<Document>,
    /// Expanded-language documents for stage 1 and dense fine-tuning.
    pub stage1: Vec<Document>,
    pub review_original: Vec<Document>,
    pub review_expanded: Vec<Document>,
    pub eval: Vec<Document>,
}

pub fn synthetic_corpora(cfg: &ExperimentConfig) -> Result<SyntheticCorpora> {
    let c = &cfg.corpus;
    let seed = cfg.seed;
    let mut pretrain = Vec::new();
    let mut stage1 = Vec::new();
    let mut eval = Vec::new();
    let mut script = Vec::new();
    for (i, lang) in cfg.synth.languages.iter().enumerate() {
        let split = |n: u64| seed.wrapping_mul(1_000).wrapping_add(10 * i as u64 + n);
        match lang.role {
            Role::Original => pretrain.extend(lang.generate(c.pretrain_docs, split(1))),
            Role::Expanded => {
                stage1.extend(lang.generate(c.stage1_docs, split(1)));
                let dialect = lang.dialect(lang.chain_seed.wrapping_add(DIALECT_OFFSET));
                script.extend(dialect.generate(c.pretrain_script_docs, split(3)));
            }
        }
        eval.extend(lang.generate(c.eval_docs, split(2)));
    }
    let first_orig = &cfg.synth.original().lang;
    let review_original: Vec<Document> = pretrain
        .iter()
        .filter(|d| &d.lang == first_orig)
        .take(c.review_original_docs)
        .cloned()
        .collect();
    let review_expanded: Vec<Document> = stage1.iter().take(c.review_expanded_docs).cloned().collect();
    if pretrain.is_empty() || stage1.is_empty() {
        return Err(Error::Data("experiment needs original and expanded documents".into()));
    }
    Ok(SyntheticCorpora {
        pretrain,
        script,
        stage1,
        review_original,
        review_expanded,
        eval,
    })
}

struct Trained {
    model: Model,
    log: TrainingLog,
    audit: FreezeAudit,
}

fn train(model: &Model, cfg: &StageConfig, original: &[Document], expanded: &[Document]) -> Result<Trained> {
    let mask = trainable_mask(model, cfg.stage)?;
    let mut stream = cfg.stream(original, expanded)?;
    let out = run_stage(model.clone(), &mask, cfg, &mut stream)?;
    let audit = freeze_audit(model, &out.model, &mask, cfg.stage);
    Ok(Trained {
        model: out.model,
        log: out.log,
        audit,
    })
}

type CellResult = (CellKind, Result<Trained>);

fn checkpoint_hash(model: &Model, seed: u64) -> Result<String> {
    let bytes = Checkpoint::from_model(model, seed)?.to_bytes();
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Run every cell of the comparison matrix. A failed cell is reported
/// with its error and the cells depending on it are marked as skipped.
pub fn forgetting_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let data = synthetic_corpora(cfg)?;
    let dense = Model::init(cfg.model.clone(), cfg.seed)?;
    log::info!("pretraining the dense base for {} steps", cfg.pretrain.steps);
    let base = train(&dense, &cfg.pretrain, &data.pretrain, &data.script)?;

    let upcycled = |init: InitMode| {
        upcycle_model(
            &base.model,
            UpcycleOptions {
                num_experts: cfg.num_experts,
                top_k: cfg.top_k,
                init,
                seed: cfg.seed,
            },
        )
    };
    let no_lpr = StageConfig {
        gamma: Some(0.0),
        ..cfg.stage2.clone()
    };

    let review = |m: &Model, s: &StageConfig| train(m, s, &data.review_original, &data.review_expanded);
    let chain = |init: InitMode, after_stage1: CellKind, variants: Vec<(CellKind, &StageConfig)>| -> Vec<CellResult> {
        let s1 = upcycled(init).and_then(|m| train(&m, &cfg.stage1, &[], &data.stage1));
        let s1 = match s1 {
            Ok(t) => t,
            Err(e) => {
                let mut out = vec![(after_stage1, Err(e))];
                for (kind, _) in variants {
                    out.push((kind, Err(Error::Config(format!("skipped: {after_stage1} failed")))));
                }
                return out;
            }
        };
        let reviewed: Vec<CellResult> = if cfg.parallel {
            thread::scope(|s| {
                let handles: Vec<_> = variants
                    .iter()
                    .map(|&(kind, sc)| {
                        let m = &s1.model;
                        s.spawn(move || (kind, review(m, sc)))
                    })
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("cell thread panicked"))
                    .collect()
            })
        } else {
            variants
                .iter()
                .map(|&(kind, sc)| (kind, review(&s1.model, sc)))
                .collect()
        };
        let mut out = vec![(after_stage1, Ok(s1))];
        out.extend(reviewed);
        out
    };

    let dense_cell = || -> Vec<CellResult> {
        vec![(
            CellKind::DenseFullFinetune,
            train(&base.model, &cfg.dense_finetune, &[], &data.stage1),
        )]
    };
    let ec_cell = || {
        chain(
            InitMode::ExpertCopy,
            CellKind::WithoutReview,
            vec![(CellKind::MoeLpr, &cfg.stage2), (CellKind::WithoutLpr, &no_lpr)],
        )
    };
    let random_cell = || {
        chain(
            InitMode::Random,
            CellKind::WithoutEcStage1,
            vec![(CellKind::WithoutEc, &cfg.stage2)],
        )
    };

    let results: Vec<CellResult> = if cfg.parallel {
        thread::scope(|s| {
            let a = s.spawn(dense_cell);
            let b = s.spawn(ec_cell);
            let c = s.spawn(random_cell);
            [a, b, c]
                .into_iter()
                .flat_map(|h| h.join().expect("cell thread panicked"))
                .collect()
        })
    } else {
        [dense_cell(), ec_cell(), random_cell()].into_iter().flatten().collect()
    };

    let mut report = ExperimentReport {
        config: cfg.clone(),
        cells: BTreeMap::new(),
        replay: None,
        models: BTreeMap::new(),
        logs: BTreeMap::new(),
    };
    let evaluate = |t: Trained| -> (CellReport, Model, TrainingLog) {
        let mut cell = CellReport {
            final_step: t.log.last().cloned(),
            tokens_seen: t.log.tokens_seen,
            original_tokens_seen: t.log.original_tokens_seen,
            freeze_audit: (t.audit.stage != Stage::Full).then_some(t.audit),
            ..CellReport::default()
        };
        let evaluated = (|| -> Result<()> {
            cell.perplexity = Some(perplexity(&t.model, &data.eval, cfg.eval_seq_len, cfg.eval_batch_size)?);
            if t.model.config().is_moe() {
                cell.routing = Some(routing_report(
                    &t.model,
                    &data.eval,
                    cfg.eval_seq_len,
                    cfg.eval_batch_size,
                )?);
            }
            cell.checkpoint_sha256 = Some(checkpoint_hash(&t.model, cfg.seed)?);
            Ok(())
        })();
        if let Err(e) = evaluated {
            cell.failure = Some(e.to_string());
        }
        (cell, t.model, t.log)
    };

    for (kind, result) in std::iter::once((CellKind::Base, Ok(base))).chain(results) {
        match result {
            Ok(t) => {
                let (cell, model, log) = evaluate(t);
                report.cells.insert(kind, cell);
                report.models.insert(kind, model);
                report.logs.insert(kind, log);
            }
            Err(e) => {
                log::error!("cell {kind} failed: {e}");
                report.cells.insert(
                    kind,
                    CellReport {
                        failure: Some(e.to_string()),
                        ..CellReport::default()
                    },
                );
            }
        }
    }
    if let (Some(s1), Some(s2)) = (
        report.logs.get(&CellKind::WithoutReview),
        report.logs.get(&CellKind::MoeLpr),
    ) {
        report.replay = Some(ReplayAudit::new(s1, s2));
    }
    Ok(report)
}
