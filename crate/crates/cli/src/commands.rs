//! Subcommand implementations.

use std::path::{Path, PathBuf};

use moe_lpr::data::{ingest_corpus, Document, DocumentSet, MixRatio, Role, VOCAB_SIZE};
use moe_lpr::model::{Model, ModelConfig};
use moe_lpr::pipeline::{
    forgetting_experiment, perplexity, routing_report, run_stage, synthetic_corpora, CellKind, ExperimentConfig,
    StageConfig, TrainingLog,
};
use moe_lpr::upcycle::{
    load_checkpoint, save_checkpoint, trainable_mask, upcycle, Checkpoint, InitMode, UpcycleOptions,
};
use moe_lpr::{Error, Result};

use crate::args::{
    Cli, Command, EvalArgs, ExperimentArgs, GenSynthArgs, Merge, OptimArgs, PretrainArgs, ReviewArgs, TrainArgs,
    UpcycleArgs,
};
use crate::config::{load_section, manifest_path, sibling, RunManifest};

pub fn dispatch(cli: Cli) -> Result<()> {
    let file = cli.config.as_deref();
    let section = cli.command.section();
    match cli.command {
        Command::GenSynth(a) => gen_synth(a.merge(load_section(file, section)?), file),
        Command::Pretrain(a) => pretrain(a.merge(load_section(file, section)?), file),
        Command::Upcycle(a) => upcycle_cmd(a.merge(load_section(file, section)?), file),
        Command::Train(a) => train(a.merge(load_section(file, section)?), file),
        Command::Review(a) => review(a.merge(load_section(file, section)?), file),
        Command::Eval(a) => eval(a.merge(load_section(file, section)?), file, false),
        Command::RouteStats(a) => eval(a.merge(load_section(file, section)?), file, true),
        Command::Experiment(a) => experiment(a.merge(load_section(file, section)?), file),
    }
}

fn required<T: Clone>(value: &Option<T>, flag: &str) -> Result<T> {
    value
        .clone()
        .ok_or_else(|| Error::Config(format!("--{flag} is required (flag or config key)")))
}

fn load_docs(path: &Path) -> Result<DocumentSet> {
    let set = ingest_corpus(path)?;
    if set.is_empty() {
        return Err(Error::Data(format!("{} holds no valid documents", path.display())));
    }
    Ok(set)
}

fn write_jsonl(path: &Path, docs: Vec<Document>) -> Result<()> {
    DocumentSet::new(docs).write_jsonl(path)
}

fn gen_synth(a: GenSynthArgs, file: Option<&Path>) -> Result<()> {
    let dir = required(&a.out_dir, "out-dir")?;
    let mut cfg = ExperimentConfig::default();
    if let Some(n) = a.docs {
        cfg.corpus.pretrain_docs = n;
        cfg.corpus.stage1_docs = n;
    }
    if let Some(n) = a.eval_docs {
        cfg.corpus.eval_docs = n;
    }
    if a.held_out_language.unwrap_or(false) {
        cfg.synth = cfg.synth.with_held_out_language();
    }
    if let Some(len) = a.doc_len {
        for l in &mut cfg.synth.languages {
            l.doc_len = len;
        }
    }
    cfg.seed = a.seed.unwrap_or(cfg.seed);
    let c = synthetic_corpora(&cfg)?;

    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut pretrain = c.pretrain.clone();
    pretrain.extend(c.script);
    let mut review = c.review_original;
    review.extend(c.review_expanded);
    let files = [
        ("pretrain.jsonl", pretrain),
        ("original.jsonl", c.pretrain),
        ("expanded.jsonl", c.stage1),
        ("review.jsonl", review),
        ("eval.jsonl", c.eval),
    ];
    let mut outputs = Vec::new();
    for (name, docs) in files {
        let path = dir.join(name);
        write_jsonl(&path, docs)?;
        outputs.push(path);
    }
    let mut m = RunManifest::new("gen-synth", file, &a);
    m.seed = Some(cfg.seed);
    m.outputs = outputs;
    m.write(&dir.join("manifest.json"))?;
    log::info!("wrote synthetic corpora to {}", dir.display());
    Ok(())
}

fn stage_config(base: StageConfig, o: &OptimArgs) -> StageConfig {
    StageConfig {
        steps: o.steps.unwrap_or(base.steps),
        batch_size: o.batch_size.unwrap_or(base.batch_size),
        seq_len: o.seq_len.unwrap_or(base.seq_len),
        base_lr: o.lr.unwrap_or(base.base_lr),
        min_lr: o.min_lr.unwrap_or(base.min_lr),
        warmup: o.warmup.or(base.warmup),
        weight_decay: o.weight_decay.unwrap_or(base.weight_decay),
        seed: o.seed.unwrap_or(base.seed),
        checkpoint_every: o.checkpoint_every.or(base.checkpoint_every),
        checkpoint_dir: o.checkpoint_dir.clone().or(base.checkpoint_dir),
        ..base
    }
}

/// Run one stage and write the checkpoint, training log and manifest. On
/// abort the last good state is saved next to the intended output.
fn run_and_save(
    model: Model,
    stage: &StageConfig,
    original: &[Document],
    expanded: &[Document],
    out: &Path,
    log_path: Option<PathBuf>,
    mut manifest: RunManifest,
) -> Result<TrainingLog> {
    let mask = trainable_mask(&model, stage.stage)?;
    let mut stream = stage.stream(original, expanded)?;
    if let Some(dir) = &stage.checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let log_path = log_path.unwrap_or_else(|| sibling(out, "log.ndjson"));
    manifest.model = Some(model.config().clone());
    manifest.stage = Some(stage.clone());
    manifest.seed = Some(stage.seed);
    manifest.outputs = vec![out.to_path_buf(), log_path.clone()];
    manifest.write(&manifest_path(out))?;
    match run_stage(model, &mask, stage, &mut stream) {
        Ok(done) => {
            save_checkpoint(out, &Checkpoint::from_model(&done.model, stage.seed)?)?;
            done.log.write_ndjson(&log_path)?;
            if let Some(r) = done.log.last() {
                log::info!(
                    "{} done: ntp {:.4} balance {:.4} lpr {:.4} over {} tokens ({} original)",
                    stage.stage,
                    r.ntp,
                    r.balance,
                    r.lpr,
                    done.log.tokens_seen,
                    done.log.original_tokens_seen
                );
            }
            Ok(done.log)
        }
        Err(abort) => {
            let keep = sibling(out, "last-good.ckpt");
            save_checkpoint(&keep, &Checkpoint::from_model(&abort.last_good, stage.seed)?)?;
            abort.log.write_ndjson(&log_path)?;
            log::error!("kept the step-{} state at {}", abort.last_good_step, keep.display());
            Err(abort.into())
        }
    }
}

fn pretrain(a: PretrainArgs, file: Option<&Path>) -> Result<()> {
    let data = required(&a.data, "data")?;
    let out = required(&a.out, "out")?;
    let d = ModelConfig::default();
    let config = ModelConfig {
        vocab_size: VOCAB_SIZE,
        hidden: a.hidden.unwrap_or(d.hidden),
        layers: a.layers.unwrap_or(d.layers),
        heads: a.heads.unwrap_or(d.heads),
        ffn_dim: a.ffn_dim.unwrap_or(d.ffn_dim),
        max_seq_len: a.max_seq_len.unwrap_or(d.max_seq_len),
        moe: None,
    };
    let model = Model::init(config, a.init_seed.unwrap_or(0))?;
    let stage = stage_config(ExperimentConfig::default().pretrain, &a.optim);
    let docs = load_docs(&data)?;
    let mut m = RunManifest::new("pretrain", file, &a);
    m.inputs = vec![data];
    run_and_save(model, &stage, &docs.docs, &[], &out, a.optim.log.clone(), m)?;
    Ok(())
}

fn upcycle_cmd(a: UpcycleArgs, file: Option<&Path>) -> Result<()> {
    let input = required(&a.input, "in")?;
    let out = required(&a.out, "out")?;
    let d = UpcycleOptions::default();
    let opts = UpcycleOptions {
        num_experts: a.experts.unwrap_or(d.num_experts),
        top_k: a.top_k.unwrap_or(d.top_k),
        init: a
            .init
            .as_deref()
            .map(str::parse)
            .transpose()?
            .unwrap_or(InitMode::ExpertCopy),
        seed: a.seed.unwrap_or(d.seed),
    };
    let dense = load_checkpoint(&input)?;
    let moe = upcycle(&dense, opts)?;
    save_checkpoint(&out, &moe)?;
    let census = moe.to_model()?.census();
    log::info!(
        "{} experts ({}), top-{}: {} parameters, {} activated per token",
        opts.num_experts,
        opts.init,
        opts.top_k,
        census.total,
        census.activated_per_token
    );
    let mut m = RunManifest::new("upcycle", file, &a);
    m.model = Some(moe.config.clone());
    m.seed = Some(opts.seed);
    m.inputs = vec![input];
    m.outputs = vec![out.clone()];
    m.write(&manifest_path(&out))
}

fn parse_ratio(s: &Option<String>) -> Result<Option<MixRatio>> {
    s.as_deref().map(str::parse).transpose()
}

fn train(a: TrainArgs, file: Option<&Path>) -> Result<()> {
    let model_path = required(&a.model, "model")?;
    let data = required(&a.data, "data")?;
    let out = required(&a.out, "out")?;
    let one_stage = a.one_stage.unwrap_or(false);
    let base = ExperimentConfig::default().stage1;
    let stage = StageConfig {
        alpha: Some(a.alpha.unwrap_or(base.alpha.unwrap_or(0.0))),
        one_stage,
        gamma: a.gamma.or(if one_stage {
            Some(moe_lpr::objectives::DEFAULT_GAMMA)
        } else {
            None
        }),
        replay_ratio: parse_ratio(&a.replay_ratio)?.or(if one_stage { Some(MixRatio::new(1, 2)) } else { None }),
        ..stage_config(base, &a.optim)
    };
    stage.validate()?;
    let model = load_checkpoint(&model_path)?.to_model()?;
    let docs = load_docs(&data)?;
    let (original, expanded) = if one_stage {
        (docs.with_role(Role::Original), docs.with_role(Role::Expanded))
    } else {
        (Vec::new(), docs.docs.clone())
    };
    let mut m = RunManifest::new("train", file, &a);
    m.inputs = vec![model_path, data];
    run_and_save(model, &stage, &original, &expanded, &out, a.optim.log.clone(), m)?;
    Ok(())
}

fn review(a: ReviewArgs, file: Option<&Path>) -> Result<()> {
    if a.alpha.is_some() {
        return Err(Error::Config(
            "--alpha is a stage-1 setting; review removes the load-balancing loss".into(),
        ));
    }
    let model_path = required(&a.model, "model")?;
    let data = required(&a.data, "data")?;
    let out = required(&a.out, "out")?;
    let base = ExperimentConfig::default().stage2;
    let stage = StageConfig {
        gamma: a.gamma.or(base.gamma),
        replay_ratio: parse_ratio(&a.replay_ratio)?.or(base.replay_ratio),
        ..stage_config(base, &a.optim)
    };
    stage.validate()?;
    let model = load_checkpoint(&model_path)?.to_model()?;
    let docs = load_docs(&data)?;
    let mut m = RunManifest::new("review", file, &a);
    m.inputs = vec![model_path, data];
    let log = run_and_save(
        model,
        &stage,
        &docs.with_role(Role::Original),
        &docs.with_role(Role::Expanded),
        &out,
        a.optim.log.clone(),
        m,
    )?;
    log::info!(
        "review consumed {} original-language tokens of {}",
        log.original_tokens_seen,
        log.tokens_seen
    );
    Ok(())
}

fn eval(a: EvalArgs, file: Option<&Path>, routing: bool) -> Result<()> {
    let model_path = required(&a.model, "model")?;
    let data = required(&a.data, "data")?;
    let model = load_checkpoint(&model_path)?.to_model()?;
    let docs = load_docs(&data)?;
    let seq_len = a.seq_len.unwrap_or(model.config().max_seq_len);
    let batch_size = a.batch_size.unwrap_or(16);
    let csv = if routing {
        routing_report(&model, &docs.docs, seq_len, batch_size)?.to_csv()
    } else {
        perplexity(&model, &docs.docs, seq_len, batch_size)?.to_csv()
    };
    match &a.out {
        Some(out) => {
            std::fs::write(out, &csv).map_err(|e| Error::io(out, e))?;
            let mut m = RunManifest::new(if routing { "route-stats" } else { "eval" }, file, &a);
            m.model = Some(model.config().clone());
            m.inputs = vec![model_path, data];
            m.outputs = vec![out.clone()];
            m.write(&manifest_path(out))?;
        }
        None => print!("{csv}"),
    }
    Ok(())
}

fn experiment(a: ExperimentArgs, file: Option<&Path>) -> Result<()> {
    let dir = required(&a.out_dir, "out-dir")?;
    let mut cfg = ExperimentConfig::default();
    let scale = a.scale.unwrap_or(1.0);
    if !(scale.is_finite() && scale > 0.0) {
        return Err(Error::Config(format!("scale must be positive, got {scale}")));
    }
    for stage in [
        &mut cfg.pretrain,
        &mut cfg.dense_finetune,
        &mut cfg.stage1,
        &mut cfg.stage2,
    ] {
        stage.steps = ((stage.steps as f64 * scale).round() as usize).max(1);
    }
    cfg.parallel = !a.sequential.unwrap_or(false);
    if a.held_out_language.unwrap_or(false) {
        cfg.synth = cfg.synth.with_held_out_language();
    }
    cfg.num_experts = a.experts.unwrap_or(cfg.num_experts);
    cfg.seed = a.seed.unwrap_or(cfg.seed);

    let report = forgetting_experiment(&cfg)?;
    report.write_dir(&dir)?;
    let mut outputs = vec![
        dir.join("report.json"),
        dir.join("perplexity.csv"),
        dir.join("routing.csv"),
    ];
    if a.save_checkpoints.unwrap_or(false) {
        for (kind, model) in &report.models {
            let path = dir.join(format!("{kind}.ckpt"));
            save_checkpoint(&path, &Checkpoint::from_model(model, cfg.seed)?)?;
            outputs.push(path);
        }
    }
    let mut m = RunManifest::new("experiment", file, &a);
    m.model = Some(cfg.model.clone());
    m.seed = Some(cfg.seed);
    m.outputs = outputs;
    m.write(&dir.join("manifest.json"))?;

    let failed: Vec<String> = report
        .cells
        .iter()
        .filter_map(|(k, c)| c.failure.as_ref().map(|f| format!("{k}: {f}")))
        .collect();
    for kind in CellKind::ALL {
        if let Some(ppl) = report.cell(kind).and_then(|c| c.perplexity.as_ref()) {
            let fmt = |r| ppl.perplexity(r).map_or("-".into(), |p| format!("{p:.3}"));
            println!(
                "{kind:>20}  ppl original {:>8}  expanded {:>8}",
                fmt(Role::Original),
                fmt(Role::Expanded)
            );
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("cells failed: {}", failed.join("; "))))
    }
}
