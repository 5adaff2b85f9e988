//! Offline policy optimization: advantage-weighted regression with a jointly
//! trained value head, and the plain supervised trainer it reduces to.

use std::fs;
use std::path::Path;

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::lm::{collate, Adam, Adapter, BaseParams, Encoded, Grad, GradTarget, LmConfig, TinyLm, ValueHead, Vocab};
use crate::metrics::micro_perplexity;
use crate::providers::{LmScorer, Message};
use crate::segmentation::{Block, SegmentationConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AwrConfig {
    pub temperature: f64,
    /// 0 gives uniform weights (supervised fine-tuning), 1 pure advantage
    /// weighting.
    pub alpha: f64,
    /// Discount of the returns-to-go the critic regresses on.
    pub gamma: f64,
    pub weight_max: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    pub max_consecutive_failures: usize,
}

impl Default for AwrConfig {
    fn default() -> Self {
        AwrConfig {
            temperature: 1.0,
            alpha: 0.25,
            gamma: 0.9,
            weight_max: 20.0,
            batch_size: 8,
            learning_rate: 0.01,
            epochs: 3,
            seed: 0,
            max_consecutive_failures: 3,
        }
    }
}

impl AwrConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::Config("awr.temperature must be > 0".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config("awr.alpha must lie in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config("awr.gamma must lie in [0, 1]".into()));
        }
        if !(self.weight_max >= 1.0) {
            return Err(Error::Config("awr.weight_max must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("awr.batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("awr.learning_rate must be > 0".into()));
        }
        Ok(())
    }
}

/// `returns - values`, elementwise.
pub fn compute_advantages(returns: &[f64], values: &[f64]) -> Result<Vec<f64>> {
    returns
        .iter()
        .zip(values)
        .map(|(r, v)| {
            if v.is_finite() {
                Ok(r - v)
            } else {
                Err(Error::NonFinite(format!("value prediction {v}")))
            }
        })
        .collect()
}

/// `w = clip(exp(A / T), weight_max)`, normalized to mean 1 over the batch,
/// then blended with uniform weights: `(1 - alpha) + alpha * w`.
pub fn compute_weights(advantages: &[f64], cfg: &AwrConfig) -> Vec<f64> {
    if advantages.is_empty() {
        return Vec::new();
    }
    let raw: Vec<f64> = advantages
        .iter()
        .map(|a| (a / cfg.temperature).exp().min(cfg.weight_max))
        .collect();
    let mean = raw.iter().sum::<f64>() / raw.len() as f64;
    raw.iter()
        .map(|w| (1.0 - cfg.alpha) + cfg.alpha * (w / mean))
        .collect()
}

/// `-(1/|B|) * sum_i w_i * loglik_i`.
pub fn weighted_policy_loss(logliks: &[f64], weights: &[f64]) -> f64 {
    let s: f64 = logliks.iter().zip(weights).map(|(l, w)| w * l).sum();
    -s / logliks.len() as f64
}

/// Mean squared error between predictions and returns.
pub fn value_loss(values: &[f64], returns: &[f64]) -> f64 {
    values
        .iter()
        .zip(returns)
        .map(|(v, r)| (v - r).powi(2))
        .sum::<f64>()
        / values.len() as f64
}

/// Gradient of [`value_loss`] with respect to the head's weights and bias.
pub fn value_head_grad(head: &ValueHead, hiddens: &[Vec<f64>], returns: &[f64]) -> ValueHead {
    let n = hiddens.len() as f64;
    let mut g = ValueHead::zeros(head.w.len());
    for (h, r) in hiddens.iter().zip(returns) {
        let e = 2.0 * (head.predict(h) - r) / n;
        for (gw, hi) in g.w.iter_mut().zip(h) {
            *gw += e * hi;
        }
        g.b += e;
    }
    g
}

/// A training example: rendered context (system first), the real elicitor
/// turn and its return-to-go.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub context: Vec<Message>,
    pub target: String,
    pub return_to_go: f64,
}

impl Example {
    pub fn from_block(b: &Block, cfg: &SegmentationConfig) -> Self {
        Example {
            context: b.context_messages(cfg),
            target: b.target.clone(),
            return_to_go: b.return_to_go,
        }
    }
}

/// Everything one AWR step works on.
#[derive(Debug, Clone)]
pub struct WeightedBatch {
    pub sequences: Vec<Encoded>,
    pub returns: Vec<f64>,
    pub hiddens: Vec<Vec<f64>>,
    pub values: Vec<f64>,
    pub advantages: Vec<f64>,
    pub weights: Vec<f64>,
}

impl WeightedBatch {
    /// Encodes and pads the examples, evaluates the current critic and
    /// derives advantages and weights.
    pub fn build(model: &TinyLm, examples: &[Example], cfg: &AwrConfig, exec: Exec) -> Result<Self> {
        let sequences = collate(
            examples
                .iter()
                .map(|e| model.encode_example(&e.context, &e.target))
                .collect(),
        );
        let returns: Vec<f64> = examples.iter().map(|e| e.return_to_go).collect();
        let hiddens = exec.map(&sequences, |s| model.hidden_at_end(s));
        let values: Vec<f64> = hiddens.iter().map(|h| model.value_head.predict(h)).collect();
        let advantages = compute_advantages(&returns, &values)?;
        let weights = compute_weights(&advantages, cfg);
        Ok(WeightedBatch {
            sequences,
            returns,
            hiddens,
            values,
            advantages,
            weights,
        })
    }

    pub fn masked_tokens(&self) -> usize {
        self.sequences.iter().map(Encoded::masked_count).sum()
    }
}

/// Weighted policy loss of a batch under `model`.
pub fn policy_loss(model: &TinyLm, batch: &WeightedBatch, exec: Exec) -> Result<f64> {
    if batch.masked_tokens() == 0 {
        return Err(Error::NoTargetTokens);
    }
    let logliks: Vec<f64> = exec
        .map(&batch.sequences, |s| model.sequence_pass(s, 0.0, None).loglik);
    Ok(weighted_policy_loss(&logliks, &batch.weights))
}

fn adapter_grads(model: &TinyLm, seqs: &[Encoded], scales: &[f64], exec: Exec) -> (Vec<f64>, Adapter) {
    let idx: Vec<usize> = (0..seqs.len()).collect();
    let passes = exec.map(&idx, |&i| model.sequence_pass(&seqs[i], scales[i], Some(GradTarget::Adapter)));
    let mut total = model.adapter.zeros_like();
    let mut logliks = Vec::with_capacity(passes.len());
    for p in passes {
        logliks.push(p.loglik);
        if let Some(Grad::Adapter(g)) = p.grad {
            total.add_assign(&g);
        }
    }
    (logliks, total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Step {
        epoch: usize,
        step: usize,
        policy_loss: f64,
        value_loss: f64,
        weight_min: f64,
        weight_mean: f64,
        weight_max: f64,
    },
    Skipped {
        epoch: usize,
        step: usize,
        reason: String,
    },
    Dev {
        epoch: usize,
        micro_ppl: f64,
    },
}

/// Loss record of one combined actor/critic step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub weight_min: f64,
    pub weight_mean: f64,
    pub weight_max: f64,
}

/// Actor-critic trainer. Only the adapter and the value head change; the
/// base parameters are never written.
pub struct AwrTrainer {
    pub model: TinyLm,
    pub cfg: AwrConfig,
    pub exec: Exec,
    adapter_opt: Adam,
    value_opt: Adam,
    consecutive_failures: usize,
    pub skipped_steps: usize,
}

impl AwrTrainer {
    pub fn new(model: TinyLm, cfg: AwrConfig, exec: Exec) -> Result<Self> {
        cfg.validate()?;
        Ok(AwrTrainer {
            adapter_opt: Adam::new(cfg.learning_rate),
            value_opt: Adam::new(cfg.learning_rate),
            model,
            cfg,
            exec,
            consecutive_failures: 0,
            skipped_steps: 0,
        })
    }

    /// One gradient step on `L_policy + L_value`. A non-finite loss skips
    /// the step (`Ok(None)`) until `max_consecutive_failures` is reached.
    pub fn combined_step(&mut self, examples: &[Example]) -> Result<Option<StepRecord>> {
        let batch = match WeightedBatch::build(&self.model, examples, &self.cfg, self.exec) {
            Ok(b) => b,
            Err(e @ Error::NonFinite(_)) => return self.fail(e),
            Err(e) => return Err(e),
        };
        if batch.masked_tokens() == 0 {
            return Err(Error::NoTargetTokens);
        }
        let n = batch.sequences.len() as f64;
        let scales: Vec<f64> = batch.weights.iter().map(|w| w / n).collect();
        let (logliks, grad) = adapter_grads(&self.model, &batch.sequences, &scales, self.exec);
        let policy = weighted_policy_loss(&logliks, &batch.weights);
        let vloss = value_loss(&batch.values, &batch.returns);
        if !(policy.is_finite() && vloss.is_finite()) {
            return self.fail(Error::NonFinite(format!("loss policy={policy} value={vloss}")));
        }
        self.consecutive_failures = 0;
        let vgrad = value_head_grad(&self.model.value_head, &batch.hiddens, &batch.returns);
        self.adapter_opt
            .step(&mut self.model.adapter.tensors_mut(), &grad.tensors());
        let vb = vec![vgrad.b];
        let mut head_b = vec![self.model.value_head.b];
        self.value_opt.step(
            &mut [&mut self.model.value_head.w, &mut head_b],
            &[&vgrad.w, &vb],
        );
        self.model.value_head.b = head_b[0];
        let w = &batch.weights;
        Ok(Some(StepRecord {
            policy_loss: policy,
            value_loss: vloss,
            weight_min: w.iter().cloned().fold(f64::INFINITY, f64::min),
            weight_mean: w.iter().sum::<f64>() / n,
            weight_max: w.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        }))
    }

    fn fail(&mut self, e: Error) -> Result<Option<StepRecord>> {
        self.consecutive_failures += 1;
        self.skipped_steps += 1;
        if self.consecutive_failures >= self.cfg.max_consecutive_failures {
            return Err(e);
        }
        warn!("step skipped: {e}");
        Ok(None)
    }
}

/// Supervised fine-tuning: every example weighted equally, no critic.
pub struct SftTrainer {
    pub model: TinyLm,
    pub exec: Exec,
    opt: Adam,
}

impl SftTrainer {
    pub fn new(model: TinyLm, learning_rate: f64, exec: Exec) -> Self {
        SftTrainer {
            model,
            exec,
            opt: Adam::new(learning_rate),
        }
    }

    /// Mean negative log-likelihood of the batch, then one adapter update.
    pub fn step(&mut self, examples: &[Example]) -> Result<f64> {
        let seqs = collate(
            examples
                .iter()
                .map(|e| self.model.encode_example(&e.context, &e.target))
                .collect(),
        );
        if seqs.iter().map(Encoded::masked_count).sum::<usize>() == 0 {
            return Err(Error::NoTargetTokens);
        }
        let n = seqs.len() as f64;
        let scales = vec![1.0 / n; seqs.len()];
        let (logliks, grad) = adapter_grads(&self.model, &seqs, &scales, self.exec);
        let loss = -logliks.iter().sum::<f64>() / n;
        self.opt
            .step(&mut self.model.adapter.tensors_mut(), &grad.tensors());
        Ok(loss)
    }
}

/// Epoch-wise batch order shared by both trainers.
pub fn epoch_batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// Micro perplexity of the real targets under `scorer`.
pub fn dev_perplexity(scorer: &dyn LmScorer, examples: &[Example], exec: Exec) -> Result<f64> {
    let scored: Vec<Vec<f64>> = exec
        .map(examples, |e| scorer.score_target(&e.context, &e.target))
        .into_iter()
        .collect::<Result<_>>()?;
    micro_perplexity(&scored)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: TinyLm,
    pub log: Vec<LogRecord>,
}

/// Runs `cfg.epochs` epochs of shuffled mini-batches, logging every step and
/// the dev micro perplexity after each epoch.
pub fn train(
    model: TinyLm,
    train_set: &[Example],
    dev_set: &[Example],
    cfg: &AwrConfig,
    exec: Exec,
) -> Result<TrainOutcome> {
    if train_set.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    let mut trainer = AwrTrainer::new(model, cfg.clone(), exec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = Vec::new();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        for batch in epoch_batches(train_set.len(), cfg.batch_size, &mut rng) {
            let examples: Vec<Example> = batch.iter().map(|&i| train_set[i].clone()).collect();
            match trainer.combined_step(&examples)? {
                Some(r) => log.push(LogRecord::Step {
                    epoch,
                    step,
                    policy_loss: r.policy_loss,
                    value_loss: r.value_loss,
                    weight_min: r.weight_min,
                    weight_mean: r.weight_mean,
                    weight_max: r.weight_max,
                }),
                None => log.push(LogRecord::Skipped {
                    epoch,
                    step,
                    reason: "non-finite loss".into(),
                }),
            }
            step += 1;
        }
        if !dev_set.is_empty() {
            match dev_perplexity(&trainer.model, dev_set, exec) {
                Ok(ppl) => log.push(LogRecord::Dev {
                    epoch,
                    micro_ppl: ppl,
                }),
                Err(e) => warn!("dev evaluation failed after epoch {epoch}: {e}"),
            }
        }
    }
    Ok(TrainOutcome {
        model: trainer.model,
        log,
    })
}

/// SFT counterpart of [`train`], with the same batch order. Returns the
/// per-step losses.
pub fn train_sft(
    model: TinyLm,
    train_set: &[Example],
    cfg: &AwrConfig,
    exec: Exec,
) -> Result<(TinyLm, Vec<f64>)> {
    if train_set.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    cfg.validate()?;
    let mut trainer = SftTrainer::new(model, cfg.learning_rate, exec);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut losses = Vec::new();
    for _ in 0..cfg.epochs {
        for batch in epoch_batches(train_set.len(), cfg.batch_size, &mut rng) {
            let examples: Vec<Example> = batch.iter().map(|&i| train_set[i].clone()).collect();
            losses.push(trainer.step(&examples)?);
        }
    }
    Ok((trainer.model, losses))
}

/// Metadata stored next to the adapter weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactManifest {
    pub awr: AwrConfig,
    pub lm: LmConfig,
    pub seed: u64,
    pub split_manifest_hash: Option<String>,
    pub base_checksum: String,
}

#[derive(Serialize, Deserialize)]
struct BaseFile {
    config: LmConfig,
    vocab: Vocab,
    base: BaseParams,
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let text = serde_json::to_string(v)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Writes `adapter.json`, `value_head.json`, `base.json` and
/// `manifest.json` into `dir`.
pub fn save_artifact(
    dir: &Path,
    model: &TinyLm,
    cfg: &AwrConfig,
    split_manifest_hash: Option<String>,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_json(&dir.join("adapter.json"), &model.adapter)?;
    write_json(&dir.join("value_head.json"), &model.value_head)?;
    write_json(
        &dir.join("base.json"),
        &BaseFile {
            config: model.config,
            vocab: model.vocab.clone(),
            base: model.base.clone(),
        },
    )?;
    write_json(
        &dir.join("manifest.json"),
        &ArtifactManifest {
            awr: cfg.clone(),
            lm: model.config,
            seed: cfg.seed,
            split_manifest_hash,
            base_checksum: format!("{:016x}", model.base.checksum()),
        },
    )
}

pub fn load_artifact(dir: &Path) -> Result<TinyLm> {
    let base: BaseFile = read_json(&dir.join("base.json"))?;
    Ok(TinyLm {
        config: base.config,
        vocab: base.vocab,
        base: base.base,
        adapter: read_json(&dir.join("adapter.json"))?,
        value_head: read_json(&dir.join("value_head.json"))?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn advantage_examples() {
        assert_eq!(compute_advantages(&[1.0, 3.0], &[0.0, 0.0]).unwrap(), vec![1.0, 3.0]);
        assert_eq!(compute_advantages(&[1.0, 3.0], &[1.0, 3.0]).unwrap(), vec![0.0, 0.0]);
        let a = compute_advantages(&[18.5506], &[10.0]).unwrap();
        assert!((a[0] - 8.5506).abs() < 1e-12);
        assert!(compute_advantages(&[1.0], &[f64::NAN]).is_err());
    }

    #[test]
    fn weight_examples() {
        let cfg = AwrConfig::default();
        for alpha in [0.0, 0.25, 1.0] {
            let w = compute_weights(&[0.7; 5], &AwrConfig { alpha, ..cfg.clone() });
            assert!(w.iter().all(|x| (x - 1.0).abs() < 1e-12));
        }
        let w = compute_weights(&[1.0, -1.0], &AwrConfig { alpha: 1.0, ..cfg.clone() });
        let e = std::f64::consts::E;
        let expected = [2.0 * e / (e + 1.0 / e), 2.0 / e / (e + 1.0 / e)];
        assert!((w[0] - expected[0]).abs() < 1e-12 && (w[1] - expected[1]).abs() < 1e-12);
        assert!((w[0] - 1.762).abs() < 1e-3 && (w[1] - 0.238).abs() < 1e-3);
        let sft = compute_weights(&[5.0, -3.0, 0.1], &AwrConfig { alpha: 0.0, ..cfg.clone() });
        assert_eq!(sft, vec![1.0, 1.0, 1.0]);
        // The clip keeps huge advantages finite.
        let big = compute_weights(&[1e6, 0.0], &AwrConfig { alpha: 1.0, ..cfg });
        assert!(big.iter().all(|w| w.is_finite()));
    }

    #[test]
    fn value_loss_examples() {
        assert_eq!(value_loss(&[1.0, 3.0], &[1.0, 3.0]), 0.0);
        assert_eq!(value_loss(&[0.0, 0.0], &[1.0, 3.0]), 5.0);
        assert!((value_loss(&[10.0], &[18.5506]) - 73.11276036).abs() < 1e-6);
    }

    #[test]
    fn policy_loss_linearity() {
        let ll = [-3.0, -5.0, -2.0];
        let base = weighted_policy_loss(&ll, &[1.0, 1.0, 1.0]);
        let moved = weighted_policy_loss(&ll, &[2.0, 0.5, 0.5]);
        // Delta = -(1/3) * (1 * -3 + -0.5 * -5 + -0.5 * -2)
        let predicted = base - (1.0 * -3.0 + -0.5 * -5.0 + -0.5 * -2.0) / 3.0;
        assert!((moved - predicted).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        assert!(AwrConfig { temperature: 0.0, ..Default::default() }.validate().is_err());
        assert!(AwrConfig { alpha: 1.5, ..Default::default() }.validate().is_err());
        assert!(AwrConfig { weight_max: 0.5, ..Default::default() }.validate().is_err());
        assert!(AwrConfig::default().validate().is_ok());
    }
}
