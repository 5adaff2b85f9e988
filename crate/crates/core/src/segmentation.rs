//! Fixed-window segmentation of dialogues into training/evaluation blocks.

use std::fs;
use std::io::{BufWriter, Write};
use std::ops::AddAssign;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{Dialogue, DomainTag, Role};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::providers::{ChatRole, Message, Tokenizer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegmentationConfig {
    pub window_turns: usize,
    pub max_tokens: usize,
    pub min_target_words: usize,
    /// `{domain}` is replaced by the domain's display name.
    pub system_template: String,
}

impl Default for SegmentationConfig {
    fn default() -> Self {
        SegmentationConfig {
            window_turns: 6,
            max_tokens: 512,
            min_target_words: 3,
            system_template: "Act as an information elicitation agent for {domain}.".into(),
        }
    }
}

impl SegmentationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window_turns < 2 {
            return Err(Error::Config("segmentation.window_turns must be >= 2".into()));
        }
        if self.max_tokens < 1 {
            return Err(Error::Config("segmentation.max_tokens must be >= 1".into()));
        }
        if self.min_target_words < 1 {
            return Err(Error::Config("segmentation.min_target_words must be >= 1".into()));
        }
        Ok(())
    }

    pub fn system_instruction(&self, domain: DomainTag) -> String {
        self.system_template.replace("{domain}", domain.display_name())
    }
}

/// A window of dialogue turns ending in an elicitor utterance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub block_id: String,
    pub dialogue_id: String,
    pub domain: DomainTag,
    pub context: Vec<(Role, String)>,
    pub target: String,
    /// Position of the target turn in the source dialogue. Unknown for
    /// blocks read back from a block file.
    pub target_turn: Option<usize>,
    pub reward: u32,
    pub return_to_go: f64,
}

impl Block {
    pub fn to_record(&self, cfg: &SegmentationConfig) -> BlockRecord {
        BlockRecord {
            block_id: self.block_id.clone(),
            domain: self.domain,
            factual_novelty_score: self.reward,
            return_to_go: self.return_to_go,
            messages: render_block_messages(self, cfg),
        }
    }

    /// Context rendered as chat messages (system instruction first), without
    /// the target.
    pub fn context_messages(&self, cfg: &SegmentationConfig) -> Vec<Message> {
        let mut msgs = render_block_messages(self, cfg);
        msgs.pop();
        msgs
    }
}

/// One line of a block file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockRecord {
    pub block_id: String,
    pub domain: DomainTag,
    pub factual_novelty_score: u32,
    pub return_to_go: f64,
    pub messages: Vec<Message>,
}

impl BlockRecord {
    pub fn into_block(self) -> Result<Block> {
        let malformed = |m: &str| Error::MalformedBlock {
            block_id: self.block_id.clone(),
            message: m.to_string(),
        };
        let dialogue_id = match self.block_id.rsplit_once(':') {
            Some((d, idx)) if idx.parse::<usize>().is_ok() => d.to_string(),
            _ => return Err(malformed("block_id must be <dialogue_id>:<index>")),
        };
        let mut msgs = self.messages.iter();
        match msgs.next() {
            Some(m) if m.role == ChatRole::System => {}
            _ => return Err(malformed("first message must be the system instruction")),
        }
        let mut turns = Vec::new();
        for m in msgs {
            let role = match m.role {
                ChatRole::User => Role::Respondent,
                ChatRole::Assistant => Role::Elicitor,
                ChatRole::System => return Err(malformed("system message after the first")),
            };
            turns.push((role, m.content.clone()));
        }
        let target = match turns.pop() {
            Some((Role::Elicitor, t)) => t,
            _ => return Err(malformed("last message must be an assistant turn")),
        };
        Ok(Block {
            block_id: self.block_id,
            dialogue_id,
            domain: self.domain,
            context: turns,
            target,
            target_turn: None,
            reward: self.factual_novelty_score,
            return_to_go: self.return_to_go,
        })
    }
}

/// Sidecar record linking a block to its source turn, so rewards can be
/// attached after segmentation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSource {
    pub block_id: String,
    pub dialogue_id: String,
    pub target_turn: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DropReport {
    pub candidates: usize,
    pub kept: usize,
    pub backchannel: usize,
    pub too_long: usize,
}

impl AddAssign for DropReport {
    fn add_assign(&mut self, o: Self) {
        self.candidates += o.candidates;
        self.kept += o.kept;
        self.backchannel += o.backchannel;
        self.too_long += o.too_long;
    }
}

/// System message, then context turns (respondent as `user`, elicitor as
/// `assistant`), then the target as `assistant`.
pub fn render_block_messages(b: &Block, cfg: &SegmentationConfig) -> Vec<Message> {
    let mut msgs = Vec::with_capacity(b.context.len() + 2);
    msgs.push(Message::new(ChatRole::System, cfg.system_instruction(b.domain)));
    for (role, text) in &b.context {
        let r = match role {
            Role::Respondent => ChatRole::User,
            Role::Elicitor => ChatRole::Assistant,
        };
        msgs.push(Message::new(r, text.clone()));
    }
    msgs.push(Message::new(ChatRole::Assistant, b.target.clone()));
    msgs
}

fn word_count(s: &str) -> usize {
    s.split_whitespace().count()
}

/// Drops blocks whose target has fewer than `min_target_words` words
/// (backchannels) or whose rendered sequence exceeds `max_tokens`.
pub fn filter_blocks(
    blocks: Vec<Block>,
    cfg: &SegmentationConfig,
    tokenizer: &dyn Tokenizer,
) -> (Vec<Block>, DropReport) {
    let mut report = DropReport {
        candidates: blocks.len(),
        ..Default::default()
    };
    let kept: Vec<Block> = blocks
        .into_iter()
        .filter(|b| {
            if word_count(&b.target) < cfg.min_target_words {
                report.backchannel += 1;
                return false;
            }
            if tokenizer.count_messages(&render_block_messages(b, cfg)) > cfg.max_tokens {
                report.too_long += 1;
                return false;
            }
            true
        })
        .collect();
    report.kept = kept.len();
    (kept, report)
}

/// Stride-1 windows of `window_turns` turns whose last turn is an elicitor
/// turn, filtered, then numbered `{dialogue_id}:{i}` in emission order.
pub fn segment_dialogue(
    d: &Dialogue,
    cfg: &SegmentationConfig,
    tokenizer: &dyn Tokenizer,
) -> (Vec<Block>, DropReport) {
    let w = cfg.window_turns;
    let mut candidates = Vec::new();
    for end in w.saturating_sub(1)..d.turns.len() {
        let target = &d.turns[end];
        if target.role != Role::Elicitor {
            continue;
        }
        candidates.push(Block {
            block_id: String::new(),
            dialogue_id: d.dialogue_id.clone(),
            domain: d.domain,
            context: d.turns[end + 1 - w..end]
                .iter()
                .map(|t| (t.role, t.utterance.clone()))
                .collect(),
            target: target.utterance.clone(),
            target_turn: Some(end),
            reward: 0,
            return_to_go: 0.0,
        });
    }
    let (mut kept, report) = filter_blocks(candidates, cfg, tokenizer);
    for (i, b) in kept.iter_mut().enumerate() {
        b.block_id = format!("{}:{i}", d.dialogue_id);
    }
    (kept, report)
}

/// Segments every dialogue; blocks come back in dialogue order.
pub fn segment_corpus(
    dialogues: &[Dialogue],
    cfg: &SegmentationConfig,
    tokenizer: &dyn Tokenizer,
    exec: Exec,
) -> (Vec<Block>, DropReport) {
    let per = exec.map(dialogues, |d| segment_dialogue(d, cfg, tokenizer));
    let mut blocks = Vec::new();
    let mut report = DropReport::default();
    for (b, r) in per {
        blocks.extend(b);
        report += r;
    }
    (blocks, report)
}

pub fn write_blocks(path: &Path, blocks: &[Block], cfg: &SegmentationConfig) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for b in blocks {
        serde_json::to_writer(&mut w, &b.to_record(cfg))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_blocks(path: &Path) -> Result<Vec<Block>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str::<BlockRecord>(l)?.into_block())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::providers::ReferenceTokenizer;
    use crate::synthetic::dialogue_from_pairs;

    fn alternating(n: usize) -> Dialogue {
        let turns: Vec<(Role, String)> = (0..n)
            .map(|i| {
                let r = if i % 2 == 0 { Role::Elicitor } else { Role::Respondent };
                (r, format!("turn number {i} here"))
            })
            .collect();
        let refs: Vec<(Role, &str)> = turns.iter().map(|(r, s)| (*r, s.as_str())).collect();
        dialogue_from_pairs("alt", &refs)
    }

    #[test]
    fn eight_turn_alternating_gives_one_block() {
        let (blocks, rep) =
            segment_dialogue(&alternating(8), &SegmentationConfig::default(), &ReferenceTokenizer);
        assert_eq!(blocks.len(), 1);
        assert_eq!(blocks[0].target_turn, Some(6));
        assert_eq!(blocks[0].block_id, "alt:0");
        assert_eq!(blocks[0].context.len(), 5);
        assert_eq!(rep.candidates, 1);
    }

    #[test]
    fn short_dialogue_gives_no_blocks() {
        let (blocks, _) =
            segment_dialogue(&alternating(5), &SegmentationConfig::default(), &ReferenceTokenizer);
        assert!(blocks.is_empty());
    }

    fn block_with(target: &str, ctx: &[(Role, &str)]) -> Block {
        Block {
            block_id: "x:0".into(),
            dialogue_id: "x".into(),
            domain: DomainTag::JournalisticInvestigations,
            context: ctx.iter().map(|(r, s)| (*r, s.to_string())).collect(),
            target: target.into(),
            target_turn: None,
            reward: 0,
            return_to_go: 0.0,
        }
    }

    #[test]
    fn backchannel_filter_boundary() {
        let cfg = SegmentationConfig::default();
        let (kept, rep) = filter_blocks(
            vec![block_with("Okay.", &[]), block_with("Got it, continue.", &[])],
            &cfg,
            &ReferenceTokenizer,
        );
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].target, "Got it, continue.");
        assert_eq!(rep.backchannel, 1);
    }

    #[test]
    fn token_cap_boundary() {
        let cfg = SegmentationConfig {
            system_template: "sys".into(),
            ..Default::default()
        };
        // 1 system token + 3 target tokens + filler.
        let fill = |n: usize| vec!["w"; n].join(" ");
        let at_cap = fill(512 - 4);
        let over = fill(513 - 4);
        let a = block_with("one two three", &[(Role::Respondent, &at_cap)]);
        let b = block_with("one two three", &[(Role::Respondent, &over)]);
        assert_eq!(
            ReferenceTokenizer.count_messages(&render_block_messages(&a, &cfg)),
            512
        );
        let (kept, rep) = filter_blocks(vec![a, b], &cfg, &ReferenceTokenizer);
        assert_eq!(kept.len(), 1);
        assert_eq!(rep.too_long, 1);
    }

    #[test]
    fn rendering_maps_roles_per_turn() {
        let cfg = SegmentationConfig::default();
        let b = block_with(
            "and then what?",
            &[(Role::Elicitor, "first"), (Role::Respondent, "second")],
        );
        let msgs = render_block_messages(&b, &cfg);
        assert_eq!(msgs.len(), 4);
        assert_eq!(
            msgs[0].content,
            "Act as an information elicitation agent for journalistic investigations."
        );
        assert_eq!(msgs[1].role, ChatRole::Assistant);
        assert_eq!(msgs[2].role, ChatRole::User);
        assert_eq!(msgs[3].role, ChatRole::Assistant);
        let back = b.to_record(&cfg).into_block().unwrap();
        assert_eq!(back.context, b.context);
        assert_eq!(back.target, b.target);
    }
}
