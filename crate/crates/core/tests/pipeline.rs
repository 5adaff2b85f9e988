use std::collections::BTreeSet;
use std::fs;

use elicit_core::corpus::{
    load_corpus, stratified_split, Role, write_dialogues, write_shards, Bucket, Dialogue, DomainTag,
    SplitFractions,
};
use elicit_core::exec::Exec;
use elicit_core::lm::{LmConfig, TinyLm, Vocab};
use elicit_core::metrics::{evaluate_generation_protocol, EvalConfig};
use elicit_core::providers::{LmScorer, ReferenceEmbedder, ReferenceExtractor, ReferenceTokenizer};
use elicit_core::reward::{annotate_corpus, attach_corpus};
use elicit_core::segmentation::{read_blocks, segment_corpus, write_blocks, Block, SegmentationConfig};
use elicit_core::synthetic::{dialogue_from_pairs, topical_corpus, TopicalConfig};
use elicit_core::training::{load_artifact, save_artifact, train, AwrConfig, Example, LogRecord};

fn corpus(n: usize) -> Vec<Dialogue> {
    topical_corpus(&TopicalConfig {
        dialogues: n,
        turns: 20,
        ..Default::default()
    })
}

fn annotated_blocks(dialogues: &[Dialogue], exec: Exec) -> Vec<Block> {
    let cfg = SegmentationConfig::default();
    let (blocks, _) = segment_corpus(dialogues, &cfg, &ReferenceTokenizer, exec);
    let traces = annotate_corpus(dialogues, &ReferenceExtractor, 0.9, exec).unwrap();
    attach_corpus(blocks, &traces).unwrap()
}

#[test]
fn loader_skips_and_reports_bad_records() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mixed.jsonl");
    let good = corpus(3);
    write_dialogues(&path, &good).unwrap();
    let mut text = fs::read_to_string(&path).unwrap();
    text.push_str("{not json}\n");
    text.push_str(&good[0].to_json_line().replace("\"respondent\"", "\"moderator\""));
    text.push('\n');
    text.push_str(&good[1].to_json_line());
    text.push('\n');
    fs::write(&path, text).unwrap();

    let report = load_corpus(&[&path], Exec::Parallel).unwrap();
    assert_eq!(report.dialogues, good);
    assert_eq!(report.rejected.len(), 3);
    let messages: Vec<String> = report.rejected.iter().map(|r| r.error.to_string()).collect();
    assert!(messages.iter().any(|m| m.contains("topical-0000") && m.contains("role")), "{messages:?}");
    assert!(messages.iter().any(|m| m.contains("duplicate")), "{messages:?}");
}

#[test]
fn split_is_stratified_deterministic_and_round_trips() {
    let mut ds = Vec::new();
    for (domain, n) in [
        (DomainTag::AcademicInterviews, 148),
        (DomainTag::JournalisticInvestigations, 129),
        (DomainTag::JudicialProceedings, 621),
        (DomainTag::OralHistory, 1383),
    ] {
        for i in 0..n {
            let mut d = dialogue_from_pairs(&format!("{}-{i}", domain.as_str()), &[]);
            d.domain = domain;
            ds.push(d);
        }
    }
    let a = stratified_split(&ds, SplitFractions::default(), 42).unwrap();
    let b = stratified_split(&ds, SplitFractions::default(), 42).unwrap();
    assert_eq!(a, b);
    assert_eq!((a.train.len(), a.dev.len(), a.test.len()), (1824, 228, 229));
    let c = stratified_split(&ds, SplitFractions::default(), 43).unwrap();
    assert_ne!(a.test, c.test);
    for domain in DomainTag::ALL {
        let n = ds.iter().filter(|d| d.domain == domain).count() as f64;
        let test = ds
            .iter()
            .filter(|d| d.domain == domain && a.bucket_of(&d.dialogue_id) == Some(Bucket::Test))
            .count() as f64;
        assert!((test - 0.1 * n).abs() <= 1.0, "{domain}: {test} of {n}");
    }
    let json = serde_json::to_string(&a.manifest()).unwrap();
    let back: elicit_core::corpus::SplitManifest = serde_json::from_str(&json).unwrap();
    assert_eq!(back.into_split(), a);
}

#[test]
fn shards_of_training_split() {
    let ds: Vec<Dialogue> = (0..1824)
        .map(|i| dialogue_from_pairs(&format!("d{i}"), &[(Role::Elicitor, "hello there")]))
        .collect();
    let dir = tempfile::tempdir().unwrap();
    let paths = write_shards(dir.path(), "train", &ds, 128).unwrap();
    assert_eq!(paths.len(), 15);
    let last = fs::read_to_string(&paths[14]).unwrap();
    assert_eq!(last.lines().count(), 32);
    let reread = load_corpus(&paths, Exec::Sequential).unwrap();
    assert_eq!(reread.dialogues, ds);
}

#[test]
fn blocks_round_trip_through_jsonl() {
    let blocks = annotated_blocks(&corpus(4), Exec::Parallel);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("blocks.jsonl");
    let cfg = SegmentationConfig::default();
    write_blocks(&path, &blocks, &cfg).unwrap();
    let back = read_blocks(&path).unwrap();
    assert_eq!(back.len(), blocks.len());
    for (a, b) in blocks.iter().zip(&back) {
        assert_eq!((&a.block_id, &a.context, &a.target), (&b.block_id, &b.context, &b.target));
        assert_eq!((a.reward, a.return_to_go, a.domain), (b.reward, b.return_to_go, b.domain));
    }
}

#[test]
fn earlier_blocks_discount_later_returns() {
    let gamma: f64 = 0.9;
    let dialogues = corpus(6);
    let blocks = annotated_blocks(&dialogues, Exec::Sequential);
    for d in &dialogues {
        let elicitor_turns: Vec<usize> = d
            .turns
            .iter()
            .enumerate()
            .filter(|(_, t)| t.role == Role::Elicitor)
            .map(|(i, _)| i)
            .collect();
        let mine: Vec<&Block> = blocks.iter().filter(|b| b.dialogue_id == d.dialogue_id).collect();
        for w in mine.windows(2) {
            let step = |b: &Block| elicitor_turns.iter().position(|&t| Some(t) == b.target_turn).unwrap();
            let delta = step(w[1]) - step(w[0]);
            assert!(w[0].return_to_go + 1e-12 >= gamma.powi(delta as i32) * w[1].return_to_go);
        }
    }
}

#[test]
fn sequential_and_parallel_agree() {
    let dialogues = corpus(12);
    let seq = annotated_blocks(&dialogues, Exec::Sequential);
    let par = annotated_blocks(&dialogues, Exec::Parallel);
    assert_eq!(seq, par);

    let texts: Vec<&str> = dialogues.iter().flat_map(|d| d.turns.iter().map(|t| t.utterance.as_str())).collect();
    let lm = TinyLm::new(Vocab::build(texts), LmConfig::default());
    let cfg = EvalConfig::default();
    let run = |exec| {
        evaluate_generation_protocol("tiny", &seq, &lm, &ReferenceEmbedder, &ReferenceTokenizer, &cfg, exec).unwrap()
    };
    assert_eq!(run(Exec::Sequential), run(Exec::Parallel));

    let examples: Vec<Example> = seq.iter().take(24).map(|b| Example::from_block(b, &cfg.segmentation)).collect();
    let awr = AwrConfig { epochs: 1, ..Default::default() };
    let a = train(lm.clone(), &examples, &examples[..4], &awr, Exec::Sequential).unwrap();
    let b = train(lm.clone(), &examples, &examples[..4], &awr, Exec::Parallel).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(a.model, b.model);
}

#[test]
fn training_is_deterministic_reduces_loss_and_round_trips() {
    let dialogues = corpus(16);
    let cfg = SegmentationConfig::default();
    let blocks = annotated_blocks(&dialogues, Exec::Parallel);
    let examples: Vec<Example> = blocks.iter().take(64).map(|b| Example::from_block(b, &cfg)).collect();
    let texts: Vec<&str> = dialogues.iter().flat_map(|d| d.turns.iter().map(|t| t.utterance.as_str())).collect();
    let lm = TinyLm::new(Vocab::build(texts), LmConfig::default());
    let awr = AwrConfig { epochs: 3, ..Default::default() };
    let a = train(lm.clone(), &examples, &examples[..8], &awr, Exec::Parallel).unwrap();
    let b = train(lm, &examples, &examples[..8], &awr, Exec::Parallel).unwrap();
    assert_eq!(a.log, b.log);
    let losses: Vec<f64> = a
        .log
        .iter()
        .filter_map(|r| match r {
            LogRecord::Step { policy_loss, .. } => Some(*policy_loss),
            _ => None,
        })
        .collect();
    assert!(losses.last().unwrap() < &losses[0], "{losses:?}");
    let dev: Vec<f64> = a
        .log
        .iter()
        .filter_map(|r| match r {
            LogRecord::Dev { micro_ppl, .. } => Some(*micro_ppl),
            _ => None,
        })
        .collect();
    assert_eq!(dev.len(), 3);

    let dir = tempfile::tempdir().unwrap();
    save_artifact(dir.path(), &a.model, &awr, Some("abc".into())).unwrap();
    let back = load_artifact(dir.path()).unwrap();
    assert_eq!(back, a.model);
    let ctx = &examples[0].context;
    assert_eq!(
        back.score_target(ctx, &examples[0].target).unwrap(),
        a.model.score_target(ctx, &examples[0].target).unwrap()
    );
}

#[test]
fn empty_training_set_is_an_error() {
    let lm = TinyLm::new(Vocab::build(["a b"]), LmConfig::default());
    assert!(train(lm, &[], &[], &AwrConfig::default(), Exec::Sequential).is_err());
}

#[test]
fn split_ids_are_disjoint() {
    let ds = corpus(40);
    let s = stratified_split(&ds, SplitFractions::default(), 1).unwrap();
    let all: BTreeSet<&String> = s.train.iter().chain(&s.dev).chain(&s.test).collect();
    assert_eq!(all.len(), 40);
}
