//! Conformity (micro perplexity, response length), Progression and
//! Turn-Length Ratio, plus the next-turn generation evaluation protocol.

use std::collections::BTreeMap;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::corpus::{Dialogue, DomainTag, Role};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::providers::{Concurrency, DecodingParams, Embedder, LmScorer, Tokenizer};
use crate::segmentation::{Block, SegmentationConfig};

/// `1 - cos(a, b)`, clamped to `[0, 2]`.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    (1.0 - dot / (na * nb)).clamp(0.0, 2.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProgressionConfig {
    pub k: usize,
    pub gamma: f64,
}

impl Default for ProgressionConfig {
    /// Block evaluation setting: window 5 over six-turn blocks, decay 0.5.
    fn default() -> Self {
        ProgressionConfig { k: 5, gamma: 0.5 }
    }
}

impl ProgressionConfig {
    /// Adjacent-pair chain form (`k = 1`, no decay).
    pub fn symmetric() -> Self {
        ProgressionConfig { k: 1, gamma: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 1 {
            return Err(Error::Config("progression.k must be >= 1".into()));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config("progression.gamma must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

/// Average decayed cosine distance between each embedding and its `k`
/// predecessors, over positions `k+1..=L`.
pub fn progression(embeddings: &[Vec<f64>], cfg: &ProgressionConfig) -> Result<f64> {
    cfg.validate()?;
    let len = embeddings.len();
    if len <= cfg.k {
        return Err(Error::SequenceTooShort {
            len,
            window: cfg.k,
        });
    }
    let weights: Vec<f64> = (1..=cfg.k).map(|j| cfg.gamma.powi(j as i32)).collect();
    let norm: f64 = weights.iter().sum();
    let total: f64 = (cfg.k..len)
        .map(|t| {
            let s: f64 = weights
                .iter()
                .enumerate()
                .map(|(j, w)| w * cosine_distance(&embeddings[t - j - 1], &embeddings[t]))
                .sum();
            s / norm
        })
        .sum();
    Ok(total / (len - cfg.k) as f64)
}

/// Mean respondent length over mean elicitor length.
pub fn turn_length_ratio(respondent: &[f64], elicitor: &[f64]) -> Result<f64> {
    if respondent.is_empty() {
        return Err(Error::EmptyLengths("respondent"));
    }
    if elicitor.is_empty() {
        return Err(Error::EmptyLengths("elicitor"));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (r, e) = (mean(respondent), mean(elicitor));
    if e <= 0.0 {
        return Err(Error::ZeroMeanLength("elicitor"));
    }
    Ok(r / e)
}

/// Turn-length ratio of a whole dialogue under `tokenizer`.
pub fn dialogue_tlr(d: &Dialogue, tokenizer: &dyn Tokenizer) -> Result<f64> {
    let lens = |role: Role| -> Vec<f64> {
        d.turns
            .iter()
            .filter(|t| t.role == role)
            .map(|t| tokenizer.count(&t.utterance) as f64)
            .collect()
    };
    turn_length_ratio(&lens(Role::Respondent), &lens(Role::Elicitor))
}

fn check_logprobs(segments: &[Vec<f64>]) -> Result<usize> {
    let mut n = 0;
    for lp in segments.iter().flatten() {
        if !lp.is_finite() || *lp > 0.0 {
            return Err(Error::NonFinite(format!("log-probability {lp}")));
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::NoTargetTokens);
    }
    Ok(n)
}

/// Pools every target token across segments before exponentiating.
pub fn micro_perplexity(segments: &[Vec<f64>]) -> Result<f64> {
    let n = check_logprobs(segments)?;
    let sum: f64 = segments.iter().flatten().sum();
    Ok((-sum / n as f64).exp())
}

/// Mean of per-segment perplexities; empty segments are ignored. Reported
/// alongside [`micro_perplexity`] as a secondary figure.
pub fn macro_perplexity(segments: &[Vec<f64>]) -> Result<f64> {
    check_logprobs(segments)?;
    let ppls: Vec<f64> = segments
        .iter()
        .filter(|s| !s.is_empty())
        .map(|s| (-s.iter().sum::<f64>() / s.len() as f64).exp())
        .collect();
    Ok(ppls.iter().sum::<f64>() / ppls.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LengthStats {
    pub mean: f64,
    pub count: usize,
    pub excluded: usize,
}

/// Mean token count. Utterances that are empty after trimming are excluded
/// and counted.
pub fn response_length_stats<S: AsRef<str>>(
    utterances: &[S],
    tokenizer: &dyn Tokenizer,
) -> Result<LengthStats> {
    let mut total = 0usize;
    let mut count = 0usize;
    let mut excluded = 0usize;
    for u in utterances {
        let u = u.as_ref();
        if u.trim().is_empty() {
            excluded += 1;
            continue;
        }
        total += tokenizer.count(u);
        count += 1;
    }
    if excluded > 0 {
        warn!("{excluded} empty utterance(s) excluded from length statistics");
    }
    if count == 0 {
        return Err(Error::EmptyLengths("utterance"));
    }
    Ok(LengthStats {
        mean: total as f64 / count as f64,
        count,
        excluded,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderIds {
    pub tokenizer: String,
    pub embedder: String,
    pub scorer: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainRow {
    /// Domain name, or `"total"`.
    pub domain: String,
    pub n_blocks: usize,
    pub skipped: usize,
    pub degenerate: usize,
    pub progression: Option<f64>,
    pub tlr: Option<f64>,
    pub micro_ppl: Option<f64>,
    pub macro_ppl: Option<f64>,
    pub mean_len: Option<f64>,
}

/// Metric aggregates for one evaluated source (a model, or the real or
/// shuffled reference).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub source: String,
    pub providers: ProviderIds,
    pub progression_config: ProgressionConfig,
    pub decoding: Option<DecodingParams>,
    pub domains: Vec<DomainRow>,
    pub total: DomainRow,
}

impl MetricReport {
    pub fn row(&self, domain: DomainTag) -> Option<&DomainRow> {
        self.domains.iter().find(|r| r.domain == domain.as_str())
    }
}

#[derive(Debug, Clone, Default)]
struct BlockOutcome {
    failed: bool,
    degenerate: bool,
    elicitor_lens: Vec<f64>,
    respondent_lens: Vec<f64>,
    progression: Option<f64>,
    logprobs: Option<Vec<f64>>,
}

#[derive(Debug, Default)]
struct Acc {
    n: usize,
    skipped: usize,
    degenerate: usize,
    prog: Vec<f64>,
    elic: Vec<f64>,
    resp: Vec<f64>,
    lps: Vec<Vec<f64>>,
}

impl Acc {
    fn add(&mut self, o: &BlockOutcome) {
        self.n += 1;
        if o.failed {
            self.skipped += 1;
            return;
        }
        if o.degenerate {
            self.degenerate += 1;
        }
        self.prog.extend(o.progression);
        self.elic.extend(&o.elicitor_lens);
        self.resp.extend(&o.respondent_lens);
        if let Some(lp) = &o.logprobs {
            self.lps.push(lp.clone());
        }
    }

    fn row(&self, domain: &str) -> DomainRow {
        let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
        DomainRow {
            domain: domain.to_string(),
            n_blocks: self.n,
            skipped: self.skipped,
            degenerate: self.degenerate,
            progression: mean(&self.prog),
            tlr: turn_length_ratio(&self.resp, &self.elic).ok(),
            micro_ppl: micro_perplexity(&self.lps).ok(),
            macro_ppl: macro_perplexity(&self.lps).ok(),
            mean_len: mean(&self.elic),
        }
    }
}

fn aggregate(blocks: &[Block], outcomes: &[BlockOutcome]) -> (Vec<DomainRow>, DomainRow) {
    let mut per: BTreeMap<DomainTag, Acc> = BTreeMap::new();
    let mut total = Acc::default();
    for (b, o) in blocks.iter().zip(outcomes) {
        per.entry(b.domain).or_default().add(o);
        total.add(o);
    }
    let rows = per.iter().map(|(d, a)| a.row(d.as_str())).collect();
    (rows, total.row("total"))
}

fn block_progression(
    utterances: &[&str],
    embedder: &dyn Embedder,
    cfg: &ProgressionConfig,
) -> (Option<f64>, bool) {
    let embs: Vec<_> = utterances.iter().map(|u| embedder.embed(u)).collect();
    if embs.iter().any(|e| e.degenerate) {
        return (None, true);
    }
    let vecs: Vec<Vec<f64>> = embs.into_iter().map(|e| e.vector).collect();
    (progression(&vecs, cfg).ok(), false)
}

/// Settings for [`evaluate_generation_protocol`].
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalConfig {
    pub segmentation: SegmentationConfig,
    pub progression: ProgressionConfig,
    pub decoding: DecodingParams,
}

/// Next-turn generation evaluation: for each block the scorer writes the
/// final elicitor turn from the context alone.
///
/// * response length and the elicitor side of TLR use the generated turn;
/// * the respondent side of TLR uses the real respondent context turns;
/// * Progression runs over the context embeddings plus the generated turn;
/// * micro perplexity scores the real target under the scorer.
///
/// Blocks whose generation fails are skipped and counted.
pub fn evaluate_generation_protocol(
    source: &str,
    blocks: &[Block],
    scorer: &dyn LmScorer,
    embedder: &dyn Embedder,
    tokenizer: &dyn Tokenizer,
    cfg: &EvalConfig,
    exec: Exec,
) -> Result<MetricReport> {
    cfg.progression.validate()?;
    let exec = match scorer.concurrency() {
        Concurrency::SingleThreaded => Exec::Sequential,
        Concurrency::Concurrent => exec,
    };
    let outcomes = exec.map(blocks, |b| {
        let ctx = b.context_messages(&cfg.segmentation);
        let generated = match scorer.generate(&ctx, &cfg.decoding) {
            Ok(g) => g,
            Err(e) => {
                warn!("generation failed for block {}: {e}", b.block_id);
                return BlockOutcome {
                    failed: true,
                    ..Default::default()
                };
            }
        };
        let mut out = BlockOutcome {
            respondent_lens: b
                .context
                .iter()
                .filter(|(r, _)| *r == Role::Respondent)
                .map(|(_, u)| tokenizer.count(u) as f64)
                .collect(),
            ..Default::default()
        };
        if generated.trim().is_empty() {
            out.degenerate = true;
        } else {
            out.elicitor_lens.push(tokenizer.count(&generated) as f64);
            let mut utts: Vec<&str> = b.context.iter().map(|(_, u)| u.as_str()).collect();
            utts.push(&generated);
            let (p, degenerate) = block_progression(&utts, embedder, &cfg.progression);
            out.progression = p;
            out.degenerate = degenerate;
        }
        match scorer.score_target(&ctx, &b.target) {
            Ok(lp) => out.logprobs = Some(lp),
            Err(e) => warn!("scoring failed for block {}: {e}", b.block_id),
        }
        out
    });
    let (domains, total) = aggregate(blocks, &outcomes);
    Ok(MetricReport {
        source: source.to_string(),
        providers: ProviderIds {
            tokenizer: tokenizer.id().to_string(),
            embedder: embedder.id().to_string(),
            scorer: Some(scorer.id()),
        },
        progression_config: cfg.progression,
        decoding: Some(cfg.decoding),
        domains,
        total,
    })
}

/// Metrics of human-written blocks (the real or shuffled references),
/// computed exactly as [`evaluate_generation_protocol`] would for a scorer
/// that reproduced the real target: Progression over all six turns, TLR of
/// respondent context turns against targets, response length of targets.
/// No perplexity.
pub fn reference_report(
    source: &str,
    blocks: &[Block],
    embedder: &dyn Embedder,
    tokenizer: &dyn Tokenizer,
    cfg: &ProgressionConfig,
    exec: Exec,
) -> Result<MetricReport> {
    cfg.validate()?;
    let outcomes = exec.map(blocks, |b| {
        let mut utts: Vec<&str> = b.context.iter().map(|(_, u)| u.as_str()).collect();
        utts.push(&b.target);
        let (progression, degenerate) = block_progression(&utts, embedder, cfg);
        BlockOutcome {
            respondent_lens: b
                .context
                .iter()
                .filter(|(r, _)| *r == Role::Respondent)
                .map(|(_, u)| tokenizer.count(u) as f64)
                .collect(),
            elicitor_lens: vec![tokenizer.count(&b.target) as f64],
            progression,
            degenerate,
            ..Default::default()
        }
    });
    let (domains, total) = aggregate(blocks, &outcomes);
    Ok(MetricReport {
        source: source.to_string(),
        providers: ProviderIds {
            tokenizer: tokenizer.id().to_string(),
            embedder: embedder.id().to_string(),
            scorer: None,
        },
        progression_config: *cfg,
        decoding: None,
        domains,
        total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn progression_examples() {
        let same = vec![vec![1.0, 2.0]; 4];
        assert!(progression(&same, &ProgressionConfig::symmetric()).unwrap().abs() < 1e-12);

        let e1 = vec![1.0, 0.0];
        let e2 = vec![0.0, 1.0];
        let alt = vec![e1.clone(), e2.clone(), e1.clone(), e2.clone()];
        assert!((progression(&alt, &ProgressionConfig::symmetric()).unwrap() - 1.0).abs() < 1e-12);

        let h = std::f64::consts::FRAC_1_SQRT_2;
        let u = vec![e1, e2, vec![h, h]];
        let p = progression(&u, &ProgressionConfig { k: 2, gamma: 0.5 }).unwrap();
        assert!((p - (1.0 - h)).abs() < 1e-6, "{p}");
        assert!((p - 0.2929).abs() < 1e-4);
    }

    #[test]
    fn progression_too_short() {
        let u = vec![vec![1.0]; 5];
        assert!(matches!(
            progression(&u, &ProgressionConfig::default()),
            Err(Error::SequenceTooShort { len: 5, window: 5 })
        ));
    }

    #[test]
    fn tlr_examples_and_errors() {
        assert_eq!(turn_length_ratio(&[10.0, 20.0], &[5.0, 10.0]).unwrap(), 2.0);
        assert_eq!(turn_length_ratio(&[3.0, 4.0], &[3.0, 4.0]).unwrap(), 1.0);
        assert!(matches!(
            turn_length_ratio(&[], &[1.0]),
            Err(Error::EmptyLengths("respondent"))
        ));
        assert!(matches!(
            turn_length_ratio(&[1.0], &[0.0]),
            Err(Error::ZeroMeanLength("elicitor"))
        ));
    }

    #[test]
    fn perplexity_examples() {
        let v = 50.0f64;
        let uniform = vec![vec![-v.ln(); 3], vec![-v.ln(); 7]];
        assert!((micro_perplexity(&uniform).unwrap() - v).abs() < 1e-9);
        assert_eq!(micro_perplexity(&[vec![0.0, 0.0]]).unwrap(), 1.0);
        let two = vec![vec![0.5f64.ln()], vec![0.25f64.ln()]];
        assert!((micro_perplexity(&two).unwrap() - 2.0 * 2f64.sqrt()).abs() < 1e-9);
        assert!(matches!(micro_perplexity(&[vec![]]), Err(Error::NoTargetTokens)));
        assert!(micro_perplexity(&[vec![0.1]]).is_err());
    }

    #[test]
    fn length_stats() {
        use crate::providers::ReferenceTokenizer;
        let s = response_length_stats(&["a b", "a b c d"], &ReferenceTokenizer).unwrap();
        assert_eq!(s.mean, 3.0);
        let s = response_length_stats(&["a b", "   "], &ReferenceTokenizer).unwrap();
        assert_eq!((s.mean, s.excluded), (2.0, 1));
        assert!(response_length_stats::<&str>(&[], &ReferenceTokenizer).is_err());
    }

    fn vecs(n: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
        prop::collection::vec(
            prop::collection::vec(-5.0f64..5.0, 3).prop_filter("nonzero", |v| {
                v.iter().map(|x| x * x).sum::<f64>() > 1e-6
            }),
            n..n + 6,
        )
    }

    proptest! {
        #[test]
        fn progression_bounded_and_scale_invariant(u in vecs(6), c in 0.1f64..10.0) {
            let cfg = ProgressionConfig::default();
            let p = progression(&u, &cfg).unwrap();
            prop_assert!((0.0..=2.0).contains(&p));
            let scaled: Vec<Vec<f64>> = u.iter().map(|v| v.iter().map(|x| x * c).collect()).collect();
            prop_assert!((progression(&scaled, &cfg).unwrap() - p).abs() < 1e-9);
        }

        #[test]
        fn symmetric_progression_reverses(u in vecs(2)) {
            let cfg = ProgressionConfig::symmetric();
            let mut r = u.clone();
            r.reverse();
            prop_assert!((progression(&u, &cfg).unwrap() - progression(&r, &cfg).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn micro_ppl_ignores_partition(lps in prop::collection::vec(-8.0f64..0.0, 1..40), cut in 0usize..40) {
            let cut = cut.min(lps.len());
            let whole = micro_perplexity(std::slice::from_ref(&lps)).unwrap();
            let parts = micro_perplexity(&[lps[..cut].to_vec(), lps[cut..].to_vec()]).unwrap();
            prop_assert!((whole - parts).abs() <= 1e-9 * whole.max(1.0));
        }
    }
}
