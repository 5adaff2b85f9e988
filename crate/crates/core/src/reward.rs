//! Entity-novelty rewards and discounted returns-to-go.
//!
//! An elicitor turn is credited with the number of entities in the
//! immediately following respondent reply that nobody has mentioned before
//! in the dialogue. Entities the elicitor itself mentions go into the ledger
//! before the reply is scored, so repeating them back earns nothing.

use std::collections::{HashMap, HashSet};

use log::warn;
use serde::{Deserialize, Serialize};

use crate::corpus::{Dialogue, Role, TurnId};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::providers::EntityExtractor;
use crate::segmentation::Block;

/// Case-folds and collapses internal whitespace.
pub fn normalize_entity(surface: &str) -> String {
    surface
        .split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

/// Entities seen so far in one dialogue.
#[derive(Debug, Clone, Default)]
pub struct EntityLedger {
    seen: HashSet<String>,
}

impl EntityLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.seen.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seen.is_empty()
    }

    pub fn contains(&self, key: &str) -> bool {
        self.seen.contains(key)
    }

    /// Keys of `keys` not yet in the ledger, first occurrence order.
    pub fn novel<'a>(&self, keys: &'a [String]) -> Vec<&'a String> {
        keys.iter().filter(|k| !self.seen.contains(*k)).collect()
    }

    pub fn extend<'a>(&mut self, keys: impl IntoIterator<Item = &'a String>) {
        self.seen.extend(keys.into_iter().cloned());
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardStep {
    /// Position of the elicitor turn in the dialogue.
    pub turn_index: usize,
    pub turn_id: TurnId,
    pub reward: u32,
    pub new_entities: Vec<String>,
    pub return_to_go: f64,
}

/// Per-elicitor-turn rewards of one dialogue.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardTrace {
    pub dialogue_id: String,
    pub gamma: f64,
    pub steps: Vec<RewardStep>,
    /// Ledger size after each turn.
    pub ledger_sizes: Vec<usize>,
}

impl RewardTrace {
    pub fn total_reward(&self) -> u32 {
        self.steps.iter().map(|s| s.reward).sum()
    }

    pub fn step_for_turn(&self, turn_index: usize) -> Option<&RewardStep> {
        self.steps
            .binary_search_by_key(&turn_index, |s| s.turn_index)
            .ok()
            .map(|i| &self.steps[i])
    }
}

/// `out[i] = rewards[i] + gamma * out[i + 1]`, evaluated back to front.
pub fn returns_to_go(rewards: &[f64], gamma: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::Config(format!("gamma must lie in [0, 1], got {gamma}")));
    }
    if let Some(r) = rewards.iter().find(|r| !r.is_finite()) {
        return Err(Error::NonFinite(format!("reward {r}")));
    }
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for (o, r) in out.iter_mut().zip(rewards).rev() {
        acc = r + gamma * acc;
        *o = acc;
    }
    Ok(out)
}

fn entity_keys(extractor: &dyn EntityExtractor, text: &str, turn_id: &TurnId) -> Vec<String> {
    let ents = match extractor.extract(text) {
        Ok(e) => e,
        Err(e) => {
            warn!("entity extraction failed on turn {turn_id}: {e}; treating as no entities");
            Vec::new()
        }
    };
    let mut seen = HashSet::new();
    ents.into_iter()
        .map(|e| normalize_entity(&e.surface))
        .filter(|k| !k.is_empty() && seen.insert(k.clone()))
        .collect()
}

pub fn annotate_rewards(
    d: &Dialogue,
    extractor: &dyn EntityExtractor,
    gamma: f64,
) -> Result<RewardTrace> {
    let mut ledger = EntityLedger::new();
    let mut steps: Vec<RewardStep> = Vec::new();
    let mut ledger_sizes = Vec::with_capacity(d.turns.len());
    let mut awaiting_reply: Option<usize> = None;
    for (i, turn) in d.turns.iter().enumerate() {
        let keys = entity_keys(extractor, &turn.utterance, &turn.turn_id);
        match turn.role {
            Role::Elicitor => {
                ledger.extend(&keys);
                steps.push(RewardStep {
                    turn_index: i,
                    turn_id: turn.turn_id.clone(),
                    reward: 0,
                    new_entities: Vec::new(),
                    return_to_go: 0.0,
                });
                awaiting_reply = Some(steps.len() - 1);
            }
            Role::Respondent => {
                if let Some(s) = awaiting_reply.take() {
                    let novel: Vec<String> = ledger.novel(&keys).into_iter().cloned().collect();
                    steps[s].reward = novel.len() as u32;
                    steps[s].new_entities = novel;
                }
                ledger.extend(&keys);
            }
        }
        ledger_sizes.push(ledger.len());
    }
    let rewards: Vec<f64> = steps.iter().map(|s| f64::from(s.reward)).collect();
    for (s, rtg) in steps.iter_mut().zip(returns_to_go(&rewards, gamma)?) {
        s.return_to_go = rtg;
    }
    Ok(RewardTrace {
        dialogue_id: d.dialogue_id.clone(),
        gamma,
        steps,
        ledger_sizes,
    })
}

pub fn annotate_corpus(
    dialogues: &[Dialogue],
    extractor: &dyn EntityExtractor,
    gamma: f64,
    exec: Exec,
) -> Result<Vec<RewardTrace>> {
    exec.map(dialogues, |d| annotate_rewards(d, extractor, gamma))
        .into_iter()
        .collect()
}

/// Copies reward and return-to-go of each block's target turn from `trace`.
pub fn attach_rewards_to_blocks(blocks: Vec<Block>, trace: &RewardTrace) -> Result<Vec<Block>> {
    blocks
        .into_iter()
        .map(|mut b| {
            let step = b
                .target_turn
                .and_then(|t| trace.step_for_turn(t))
                .ok_or_else(|| Error::MissingTraceEntry(b.block_id.clone()))?;
            b.reward = step.reward;
            b.return_to_go = step.return_to_go;
            Ok(b)
        })
        .collect()
}

/// Attaches rewards to blocks from many dialogues at once.
pub fn attach_corpus(blocks: Vec<Block>, traces: &[RewardTrace]) -> Result<Vec<Block>> {
    let by_id: HashMap<&str, &RewardTrace> =
        traces.iter().map(|t| (t.dialogue_id.as_str(), t)).collect();
    blocks
        .into_iter()
        .map(|b| {
            let trace = by_id
                .get(b.dialogue_id.as_str())
                .ok_or_else(|| Error::MissingTraceEntry(b.block_id.clone()))?;
            Ok(attach_rewards_to_blocks(vec![b], trace)?.remove(0))
        })
        .collect()
}

/// One line of the reward audit file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardAuditRecord {
    pub dialogue_id: String,
    pub turn_id: TurnId,
    pub credited: Vec<String>,
    pub reward: u32,
    pub return_to_go: f64,
}

pub fn audit_records(trace: &RewardTrace) -> Vec<RewardAuditRecord> {
    trace
        .steps
        .iter()
        .map(|s| RewardAuditRecord {
            dialogue_id: trace.dialogue_id.clone(),
            turn_id: s.turn_id.clone(),
            credited: s.new_entities.clone(),
            reward: s.reward,
            return_to_go: s.return_to_go,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::providers::{Entity, ReferenceExtractor};
    use crate::synthetic::dialogue_from_pairs;

    /// Returns the comma-separated entity list written after `|` in a turn.
    struct PipeExtractor;

    impl EntityExtractor for PipeExtractor {
        fn id(&self) -> String {
            "pipe".into()
        }
        fn extract(&self, text: &str) -> Result<Vec<Entity>> {
            if text.contains("FAIL") {
                return Err(Error::Provider("boom".into()));
            }
            let Some((_, list)) = text.split_once('|') else {
                return Ok(vec![]);
            };
            Ok(list
                .split(',')
                .map(|s| Entity {
                    surface: s.trim().to_string(),
                    label: "X".into(),
                    start: 0,
                    end: 0,
                })
                .collect())
        }
    }

    #[test]
    fn set_difference_over_two_replies() {
        let d = dialogue_from_pairs(
            "d",
            &[
                (Role::Elicitor, "where did you go?"),
                (Role::Respondent, "went |Mexico, Guatemala"),
                (Role::Elicitor, "and after?"),
                (Role::Respondent, "back |Mexico, Dec. 1"),
            ],
        );
        let t = annotate_rewards(&d, &PipeExtractor, 0.9).unwrap();
        let r: Vec<u32> = t.steps.iter().map(|s| s.reward).collect();
        assert_eq!(r, vec![2, 1]);
        assert_eq!(t.steps[1].new_entities, vec!["dec. 1"]);
    }

    #[test]
    fn elicitor_mentions_are_preseeded() {
        let d = dialogue_from_pairs(
            "d",
            &[
                (Role::Elicitor, "What about NASA?"),
                (Role::Respondent, "I loved NASA."),
            ],
        );
        let t = annotate_rewards(&d, &ReferenceExtractor, 0.9).unwrap();
        assert_eq!(t.steps[0].reward, 0);
        assert_eq!(t.ledger_sizes, vec![1, 1]);
    }

    #[test]
    fn empty_reply_and_extractor_failure() {
        let d = dialogue_from_pairs(
            "d",
            &[
                (Role::Elicitor, "go on"),
                (Role::Respondent, "nothing much"),
                (Role::Elicitor, "and?"),
                (Role::Respondent, "FAIL |Rome"),
            ],
        );
        let t = annotate_rewards(&d, &PipeExtractor, 0.9).unwrap();
        assert_eq!(t.total_reward(), 0);
    }

    #[test]
    fn returns_to_go_examples() {
        let r = returns_to_go(&[1.0, 2.0, 3.0], 0.9).unwrap();
        let expected = [5.23, 4.7, 3.0];
        for (a, b) in r.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12, "{r:?}");
        }
        assert_eq!(returns_to_go(&[1.0, 2.0], 0.0).unwrap(), vec![1.0, 2.0]);
        assert_eq!(returns_to_go(&[0.0; 4], 0.9).unwrap(), vec![0.0; 4]);
        assert!(returns_to_go(&[], 0.9).unwrap().is_empty());
        assert!(returns_to_go(&[1.0], 1.5).is_err());
    }

    #[test]
    fn final_target_gets_zero() {
        let d = dialogue_from_pairs(
            "d",
            &[
                (Role::Elicitor, "q |A"),
                (Role::Respondent, "r |B"),
                (Role::Elicitor, "last |C"),
            ],
        );
        let t = annotate_rewards(&d, &PipeExtractor, 0.9).unwrap();
        let mk = |turn| Block {
            block_id: format!("d:{turn}"),
            dialogue_id: "d".into(),
            domain: d.domain,
            context: vec![],
            target: String::new(),
            target_turn: Some(turn),
            reward: 9,
            return_to_go: 9.0,
        };
        let out = attach_rewards_to_blocks(vec![mk(0), mk(2)], &t).unwrap();
        assert_eq!((out[0].reward, out[0].return_to_go), (1, 1.0));
        assert_eq!((out[1].reward, out[1].return_to_go), (0, 0.0));
        let err = attach_rewards_to_blocks(vec![mk(1)], &t).unwrap_err();
        assert!(err.to_string().contains("d:1"));
    }
}
