//! Test-double scorers.

use std::collections::HashMap;

use super::{stable_hash, DecodingParams, LmScorer, Message, ReferenceTokenizer, Tokenizer};
use crate::error::{Error, Result};

fn context_key(context: &[Message]) -> u64 {
    let mut bytes = Vec::new();
    for m in context {
        bytes.extend_from_slice(format!("{:?}", m.role).as_bytes());
        bytes.push(0);
        bytes.extend_from_slice(m.content.as_bytes());
        bytes.push(0);
    }
    stable_hash(&bytes)
}

fn hashed_features(messages: &[Message], dim: usize) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    for m in messages {
        for tok in ReferenceTokenizer.tokenize(&m.content) {
            v[(stable_hash(tok.as_bytes()) % dim as u64) as usize] += 1.0;
        }
    }
    v
}

/// Assigns probability `1 / vocab_size` to every target token and always
/// generates the same reply.
#[derive(Debug, Clone)]
pub struct UniformScorer {
    pub vocab_size: usize,
    pub reply: String,
}

impl UniformScorer {
    pub fn new(vocab_size: usize) -> Self {
        UniformScorer {
            vocab_size,
            reply: "Could you tell me more about that?".into(),
        }
    }
}

impl LmScorer for UniformScorer {
    fn id(&self) -> String {
        format!("uniform-{}", self.vocab_size)
    }

    fn score_target(&self, _context: &[Message], target: &str) -> Result<Vec<f64>> {
        let lp = -(self.vocab_size as f64).ln();
        Ok(vec![lp; ReferenceTokenizer.count(target)])
    }

    fn generate(&self, _context: &[Message], _params: &DecodingParams) -> Result<String> {
        Ok(self.reply.clone())
    }

    fn hidden_state(&self, messages: &[Message]) -> Result<Vec<f64>> {
        Ok(hashed_features(messages, 8))
    }
}

/// Knows the real next turn for a fixed set of contexts. Generation returns
/// it verbatim and scoring assigns it probability 1.
#[derive(Debug, Clone, Default)]
pub struct EchoScorer {
    targets: HashMap<u64, String>,
}

impl EchoScorer {
    pub fn new<'a>(pairs: impl IntoIterator<Item = (&'a [Message], &'a str)>) -> Self {
        EchoScorer {
            targets: pairs
                .into_iter()
                .map(|(c, t)| (context_key(c), t.to_string()))
                .collect(),
        }
    }
}

impl LmScorer for EchoScorer {
    fn id(&self) -> String {
        "echo-real-target".into()
    }

    fn score_target(&self, _context: &[Message], target: &str) -> Result<Vec<f64>> {
        Ok(vec![0.0; ReferenceTokenizer.count(target)])
    }

    fn generate(&self, context: &[Message], _params: &DecodingParams) -> Result<String> {
        self.targets
            .get(&context_key(context))
            .cloned()
            .ok_or_else(|| Error::Provider("echo scorer: unknown context".into()))
    }

    fn hidden_state(&self, messages: &[Message]) -> Result<Vec<f64>> {
        Ok(hashed_features(messages, 8))
    }
}
