use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use elicit_core::corpus::{
    corpus_stats, dialogue_seed, load_corpus, shuffled_baseline, stratified_split, write_dialogues,
    write_shards, Bucket, Dialogue, DomainTag, Role,
};
use elicit_core::lm::{TinyLm, Vocab};
use elicit_core::metrics::{evaluate_generation_protocol, reference_report, EvalConfig, MetricReport};
use elicit_core::providers::{
    stable_hash, ChatRole, DecodingParams, LmScorer, Message, ReferenceEmbedder, ReferenceExtractor,
    ReferenceTokenizer,
};
use elicit_core::reward::{annotate_corpus, attach_corpus, audit_records};
use elicit_core::segmentation::{read_blocks, segment_corpus, write_blocks, Block, BlockSource};
use elicit_core::training::{load_artifact, save_artifact, train, Example, LogRecord};
use elicit_core::BASELINE_PROMPT;
use log::{info, warn};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, MODEL_BASE, MODEL_PROMPTED, MODEL_TUNED};
use crate::{report, CliError};

pub const BUCKETS: [Bucket; 3] = [Bucket::Train, Bucket::Dev, Bucket::Test];

/// Everything a stage needs.
pub struct Ctx<'a> {
    pub cfg: &'a RunConfig,
    pub out: &'a Path,
    pub cache_dir: Option<&'a Path>,
}

impl Ctx<'_> {
    fn stage_dir(&self, stage: &str) -> Result<PathBuf, CliError> {
        let dir = self.out.join(stage);
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        fs::write(dir.join("config.toml"), self.cfg.to_toml())
            .with_context(|| format!("writing config snapshot in {}", dir.display()))?;
        Ok(dir)
    }

    /// Path of an upstream artifact, or a missing-artifact error naming the
    /// stage that produces it.
    fn require(&self, stage: &'static str, rel: &str) -> Result<PathBuf, CliError> {
        let path = self.out.join(stage).join(rel);
        if path.exists() {
            Ok(path)
        } else {
            Err(CliError::MissingArtifact { stage, path })
        }
    }

    fn bucket_dialogues(&self, bucket: Bucket) -> Result<Vec<Dialogue>, CliError> {
        let dir = self.require("split", bucket.as_str())?;
        let files = jsonl_files(&dir)?;
        Ok(load_strict(&files, self.cfg)?)
    }
}

fn jsonl_files(dir: &Path) -> anyhow::Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x == "jsonl"))
        .collect();
    files.sort();
    Ok(files)
}

/// Loads pipeline-internal dialogue files, where any invalid record is a
/// runtime failure.
fn load_strict(files: &[PathBuf], cfg: &RunConfig) -> anyhow::Result<Vec<Dialogue>> {
    let report = load_corpus(files, cfg.exec())?;
    if let Some(r) = report.rejected.first() {
        return Err(anyhow!("{}: {}", r.path.display(), r.error));
    }
    Ok(report.dialogues)
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> anyhow::Result<()> {
    let file = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> anyhow::Result<Vec<T>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).with_context(|| format!("{}:{}", path.display(), i + 1)))
        .collect()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct RejectedRecord {
    path: String,
    error: String,
}

fn corpus_files(cfg: &RunConfig) -> Result<Vec<PathBuf>, CliError> {
    if cfg.paths.corpus.is_empty() {
        return Err(CliError::Config("paths.corpus: no corpus files configured".into()));
    }
    let mut files = Vec::new();
    for (i, p) in cfg.paths.corpus.iter().enumerate() {
        if p.is_dir() {
            files.extend(jsonl_files(p)?);
        } else if p.is_file() {
            files.push(p.clone());
        } else {
            return Err(CliError::Config(format!(
                "paths.corpus[{i}]: {} does not exist",
                p.display()
            )));
        }
    }
    Ok(files)
}

pub fn ingest(ctx: &Ctx) -> Result<(), CliError> {
    let files = corpus_files(ctx.cfg)?;
    let report = load_corpus(&files, ctx.cfg.exec())?;
    let dir = ctx.stage_dir("ingest")?;
    let rejected: Vec<RejectedRecord> = report
        .rejected
        .iter()
        .map(|r| RejectedRecord {
            path: r.path.display().to_string(),
            error: r.error.to_string(),
        })
        .collect();
    for r in &rejected {
        warn!("rejected record in {}: {}", r.path, r.error);
    }
    write_jsonl(&dir.join("validation.jsonl"), &rejected)?;
    write_dialogues(&dir.join("dialogues.jsonl"), &report.dialogues)?;
    let stats = corpus_stats(&report.dialogues, &ReferenceTokenizer, ctx.cfg.exec());
    write_json(&dir.join("stats.json"), &stats)?;
    if report.dialogues.is_empty() {
        return Err(anyhow!("no valid dialogues in {} file(s)", files.len()).into());
    }
    info!(
        "ingest: {} dialogues, {} turns, {} rejected records",
        stats.total.dialogues,
        stats.total.turns,
        rejected.len()
    );
    Ok(())
}

pub fn split(ctx: &Ctx) -> Result<(), CliError> {
    let src = ctx.require("ingest", "dialogues.jsonl")?;
    let dialogues = load_strict(&[src], ctx.cfg)?;
    let split = stratified_split(&dialogues, ctx.cfg.split.fractions(), ctx.cfg.seed)?;
    let dir = ctx.stage_dir("split")?;
    write_json(&dir.join("manifest.json"), &split.manifest())?;
    for bucket in BUCKETS {
        let bdir = dir.join(bucket.as_str());
        if bdir.exists() {
            fs::remove_dir_all(&bdir).with_context(|| format!("clearing {}", bdir.display()))?;
        }
        fs::create_dir_all(&bdir).with_context(|| format!("creating {}", bdir.display()))?;
        let members: Vec<Dialogue> = dialogues
            .iter()
            .filter(|d| split.bucket_of(&d.dialogue_id) == Some(bucket))
            .cloned()
            .collect();
        let shards = write_shards(&bdir, bucket.as_str(), &members, ctx.cfg.split.shard_size)?;
        info!("split: {} {} dialogues in {} shard(s)", members.len(), bucket.as_str(), shards.len());
    }
    Ok(())
}

fn block_index(blocks: &[Block]) -> Vec<BlockSource> {
    blocks
        .iter()
        .filter_map(|b| {
            b.target_turn.map(|t| BlockSource {
                block_id: b.block_id.clone(),
                dialogue_id: b.dialogue_id.clone(),
                target_turn: t,
            })
        })
        .collect()
}

pub fn segment(ctx: &Ctx) -> Result<(), CliError> {
    let per_bucket: Vec<(Bucket, Vec<Dialogue>)> = BUCKETS
        .iter()
        .map(|&b| Ok((b, ctx.bucket_dialogues(b)?)))
        .collect::<Result<_, CliError>>()?;
    let dir = ctx.stage_dir("segment")?;
    let mut drops = BTreeMap::new();
    for (bucket, dialogues) in per_bucket {
        let (blocks, report) =
            segment_corpus(&dialogues, &ctx.cfg.segmentation, &ReferenceTokenizer, ctx.cfg.exec());
        write_blocks(&dir.join(format!("{}.jsonl", bucket.as_str())), &blocks, &ctx.cfg.segmentation)?;
        write_jsonl(&dir.join(format!("{}.index.jsonl", bucket.as_str())), &block_index(&blocks))?;
        info!(
            "segment: {} {} blocks ({} backchannel, {} over token cap)",
            blocks.len(),
            bucket.as_str(),
            report.backchannel,
            report.too_long
        );
        drops.insert(bucket.as_str(), report);
    }
    write_json(&dir.join("drops.json"), &drops)?;
    Ok(())
}

fn read_indexed_blocks(blocks: &Path, index: &Path) -> anyhow::Result<Vec<Block>> {
    let sources: HashMap<String, BlockSource> = read_jsonl::<BlockSource>(index)?
        .into_iter()
        .map(|s| (s.block_id.clone(), s))
        .collect();
    read_blocks(blocks)?
        .into_iter()
        .map(|mut b| {
            let s = sources
                .get(&b.block_id)
                .ok_or_else(|| anyhow!("{}: block {} missing from index", index.display(), b.block_id))?;
            b.dialogue_id = s.dialogue_id.clone();
            b.target_turn = Some(s.target_turn);
            Ok(b)
        })
        .collect()
}

pub fn annotate(ctx: &Ctx) -> Result<(), CliError> {
    let mut inputs = Vec::new();
    for bucket in BUCKETS {
        let name = bucket.as_str();
        let blocks = ctx.require("segment", &format!("{name}.jsonl"))?;
        let index = ctx.require("segment", &format!("{name}.index.jsonl"))?;
        inputs.push((bucket, ctx.bucket_dialogues(bucket)?, blocks, index));
    }
    let dir = ctx.stage_dir("annotate")?;
    let mut audit = Vec::new();
    for (bucket, dialogues, blocks_path, index_path) in inputs {
        let name = bucket.as_str();
        let traces = annotate_corpus(&dialogues, &ReferenceExtractor, ctx.cfg.awr.gamma, ctx.cfg.exec())?;
        let blocks = attach_corpus(read_indexed_blocks(&blocks_path, &index_path)?, &traces)?;
        write_blocks(&dir.join(format!("{name}.jsonl")), &blocks, &ctx.cfg.segmentation)?;
        fs::copy(&index_path, dir.join(format!("{name}.index.jsonl")))
            .with_context(|| format!("copying {}", index_path.display()))?;
        audit.extend(traces.iter().flat_map(audit_records));
        let total: u32 = traces.iter().map(|t| t.total_reward()).sum();
        info!("annotate: {} {} blocks, {total} credited entities", blocks.len(), name);
    }
    write_jsonl(&dir.join("rewards.jsonl"), &audit)?;
    Ok(())
}

pub fn shuffle_baseline(ctx: &Ctx) -> Result<(), CliError> {
    let test = ctx.bucket_dialogues(Bucket::Test)?;
    let shuffled: Vec<Dialogue> = test
        .iter()
        .map(|d| shuffled_baseline(d, dialogue_seed(ctx.cfg.seed, &d.dialogue_id)))
        .collect();
    let dir = ctx.stage_dir("shuffle-baseline")?;
    write_dialogues(&dir.join("dialogues.jsonl"), &shuffled)?;
    let (blocks, report) =
        segment_corpus(&shuffled, &ctx.cfg.segmentation, &ReferenceTokenizer, ctx.cfg.exec());
    write_blocks(&dir.join("test.jsonl"), &blocks, &ctx.cfg.segmentation)?;
    write_json(&dir.join("drops.json"), &report)?;
    info!("shuffle-baseline: {} shuffled test blocks", blocks.len());
    Ok(())
}

// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct PretrainedBase {
    model: TinyLm,
    losses: Vec<f64>,
}

fn training_vocab(dialogues: &[Dialogue], cfg: &RunConfig) -> Vocab {
    let instructions: Vec<String> = DomainTag::ALL
        .iter()
        .map(|d| cfg.segmentation.system_instruction(*d))
        .collect();
    Vocab::build(
        dialogues
            .iter()
            .flat_map(|d| d.turns.iter().map(|t| t.utterance.as_str()))
            .chain(instructions.iter().map(String::as_str)),
    )
}

/// The base model pretrained on respondent turns of the training split,
/// reused from the provider cache when an identical one exists.
fn pretrained_base(ctx: &Ctx, dialogues: &[Dialogue]) -> anyhow::Result<PretrainedBase> {
    let cfg = ctx.cfg;
    let texts: Vec<String> = dialogues
        .iter()
        .flat_map(|d| d.turns.iter().filter(|t| t.role == Role::Respondent))
        .map(|t| t.utterance.clone())
        .collect();
    let vocab = training_vocab(dialogues, cfg);
    let key_material = serde_json::to_string(&(
        &vocab,
        cfg.lm_config(),
        cfg.lm.pretrain_epochs,
        cfg.lm.pretrain_batch_size,
        cfg.lm.pretrain_learning_rate,
        &texts,
    ))?;
    let key = format!("tiny-base-{:016x}.json", stable_hash(key_material.as_bytes()));
    let cached = ctx.cache_dir.map(|d| d.join(&key));
    if let Some(path) = cached.as_ref().filter(|p| p.exists()) {
        match read_json::<PretrainedBase>(path) {
            Ok(b) => {
                info!("train: reusing cached base model {}", path.display());
                return Ok(b);
            }
            Err(e) => warn!("ignoring unreadable cache entry {}: {e:#}", path.display()),
        }
    }
    let mut model = TinyLm::new(vocab, cfg.lm_config());
    info!(
        "train: pretraining base ({} parameters) on {} respondent turns",
        model.parameter_count(),
        texts.len()
    );
    let losses = model.pretrain_base(
        &texts,
        cfg.lm.pretrain_epochs,
        cfg.lm.pretrain_batch_size,
        cfg.lm.pretrain_learning_rate,
        cfg.exec(),
    );
    let base = PretrainedBase { model, losses };
    if let Some(path) = cached {
        let stored = path
            .parent()
            .map_or(Ok(()), fs::create_dir_all)
            .map_err(anyhow::Error::from)
            .and_then(|_| write_json(&path, &base));
        if let Err(e) = stored {
            warn!("could not cache base model at {}: {e:#}", path.display());
        }
    }
    Ok(base)
}

fn examples(blocks: &[Block], cfg: &RunConfig) -> Vec<Example> {
    blocks.iter().map(|b| Example::from_block(b, &cfg.segmentation)).collect()
}

pub fn train_stage(ctx: &Ctx) -> Result<(), CliError> {
    let cfg = ctx.cfg;
    let train_path = ctx.require("annotate", "train.jsonl")?;
    let manifest = ctx.require("split", "manifest.json")?;
    let dialogues = ctx.bucket_dialogues(Bucket::Train)?;
    let mut train_blocks = read_blocks(&train_path)?;
    if let Some(cap) = cfg.lm.max_train_blocks {
        train_blocks.truncate(cap);
    }
    let dev_path = ctx.out.join("annotate").join("dev.jsonl");
    let dev_blocks = if dev_path.exists() { read_blocks(&dev_path)? } else { Vec::new() };
    let split_hash = format!(
        "{:016x}",
        stable_hash(&fs::read(&manifest).with_context(|| format!("reading {}", manifest.display()))?)
    );

    let base = pretrained_base(ctx, &dialogues)?;
    let dir = ctx.stage_dir("train")?;
    write_json(&dir.join("pretrain.json"), &base.losses)?;
    let outcome = train(
        base.model,
        &examples(&train_blocks, cfg),
        &examples(&dev_blocks, cfg),
        &cfg.awr,
        cfg.exec(),
    )?;
    write_jsonl(&dir.join("log.jsonl"), &outcome.log)?;
    save_artifact(&dir.join("artifact"), &outcome.model, &cfg.awr, Some(split_hash))?;
    let steps = outcome.log.iter().filter(|r| matches!(r, LogRecord::Step { .. })).count();
    let dev = outcome.log.iter().rev().find_map(|r| match r {
        LogRecord::Dev { micro_ppl, .. } => Some(*micro_ppl),
        _ => None,
    });
    match dev {
        Some(p) => info!("train: {steps} steps on {} blocks, dev micro-PPL {p:.3}", train_blocks.len()),
        None => info!("train: {steps} steps on {} blocks", train_blocks.len()),
    }
    Ok(())
}

// ---------------------------------------------------------------------------

/// Replaces every system message with the bundled baseline prompt.
struct PromptedScorer<'a> {
    inner: &'a dyn LmScorer,
}

impl PromptedScorer<'_> {
    fn rewrite(context: &[Message]) -> Vec<Message> {
        context
            .iter()
            .map(|m| match m.role {
                ChatRole::System => Message::new(ChatRole::System, BASELINE_PROMPT),
                _ => m.clone(),
            })
            .collect()
    }
}

impl LmScorer for PromptedScorer<'_> {
    fn id(&self) -> String {
        format!("{}+baseline-prompt", self.inner.id())
    }

    fn concurrency(&self) -> elicit_core::providers::Concurrency {
        self.inner.concurrency()
    }

    fn score_target(&self, context: &[Message], target: &str) -> elicit_core::Result<Vec<f64>> {
        self.inner.score_target(&Self::rewrite(context), target)
    }

    fn generate(&self, context: &[Message], params: &DecodingParams) -> elicit_core::Result<String> {
        self.inner.generate(&Self::rewrite(context), params)
    }

    fn hidden_state(&self, messages: &[Message]) -> elicit_core::Result<Vec<f64>> {
        self.inner.hidden_state(&Self::rewrite(messages))
    }
}

/// Contents of `evaluate/report.json`.
#[derive(Debug, Serialize, Deserialize)]
pub struct EvaluationFile {
    pub decoding: DecodingParams,
    pub sources: Vec<MetricReport>,
}

pub fn evaluate(ctx: &Ctx) -> Result<(), CliError> {
    let cfg = ctx.cfg;
    let test_path = ctx.require("annotate", "test.jsonl")?;
    let shuffled_path = ctx.require("shuffle-baseline", "test.jsonl")?;
    let models = if cfg.evaluate.models.is_empty() {
        None
    } else {
        let dir = ctx.require("train", "artifact")?;
        ctx.require("train", "artifact/manifest.json")?;
        let tuned = load_artifact(&dir)?;
        let mut base = tuned.clone();
        for t in base.adapter.tensors_mut() {
            t.iter_mut().for_each(|x| *x = 0.0);
        }
        Some((base, tuned))
    };
    let test = read_blocks(&test_path)?;
    let shuffled = read_blocks(&shuffled_path)?;
    let (embedder, tokenizer, exec) = (ReferenceEmbedder, ReferenceTokenizer, cfg.exec());
    let mut sources = vec![
        reference_report("real", &test, &embedder, &tokenizer, &cfg.progression, exec)?,
        reference_report("shuffled", &shuffled, &embedder, &tokenizer, &cfg.progression, exec)?,
    ];
    if let Some((base, tuned)) = &models {
        let eval = EvalConfig {
            segmentation: cfg.segmentation.clone(),
            progression: cfg.progression,
            decoding: cfg.decoding,
        };
        let prompted = PromptedScorer { inner: base };
        for name in &cfg.evaluate.models {
            let scorer: &dyn LmScorer = match name.as_str() {
                MODEL_BASE => base,
                MODEL_TUNED => tuned,
                MODEL_PROMPTED => &prompted,
                other => unreachable!("validated model name {other}"),
            };
            info!("evaluate: generating {} test turns with {name}", test.len());
            sources.push(evaluate_generation_protocol(name, &test, scorer, &embedder, &tokenizer, &eval, exec)?);
        }
    }
    sources.retain(|s| {
        let empty = s.total.n_blocks == 0;
        if empty {
            warn!("evaluate: source {} has no blocks", s.source);
        }
        !empty
    });
    let dir = ctx.stage_dir("evaluate")?;
    write_json(
        &dir.join("report.json"),
        &EvaluationFile {
            decoding: cfg.decoding,
            sources,
        },
    )?;
    Ok(())
}

pub fn report_stage(ctx: &Ctx) -> Result<(), CliError> {
    let path = ctx.require("evaluate", "report.json")?;
    let eval: EvaluationFile = read_json(&path)?;
    if eval.sources.iter().all(|s| s.total.n_blocks == 0) {
        return Err(anyhow!("no evaluation records in {}", path.display()).into());
    }
    let dir = ctx.stage_dir("report")?;
    fs::write(dir.join("report.md"), report::markdown(&eval))
        .with_context(|| format!("writing {}", dir.display()))?;
    if ctx.cfg.report.plots {
        for (name, svg) in report::plots(&eval) {
            fs::write(dir.join(format!("{name}.svg")), svg)
                .with_context(|| format!("writing {name}.svg"))?;
        }
    }
    info!("report: wrote {}", dir.join("report.md").display());
    Ok(())
}
