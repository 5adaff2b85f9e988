//! Model-facing abstractions and deterministic reference implementations.
//!
//! Every quantity that depends on a model (token counts, log-probabilities,
//! generations, hidden states, sentence embeddings, entity mentions) goes
//! through one of the traits below. Reports record each provider's `id()`
//! because metric values are only comparable under the same providers.

mod embedder;
mod extractor;
mod scorer;
mod tokenizer;

use serde::{Deserialize, Serialize};

use crate::error::Result;

pub use embedder::ReferenceEmbedder;
pub use extractor::{LabelFilter, ReferenceExtractor};
pub use scorer::{EchoScorer, UniformScorer};
pub use tokenizer::ReferenceTokenizer;

/// FNV-1a, 64 bit. Stable across platforms and releases, unlike `std`'s
/// default hasher.
pub fn stable_hash(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChatRole {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Message {
    pub role: ChatRole,
    pub content: String,
}

impl Message {
    pub fn new(role: ChatRole, content: impl Into<String>) -> Self {
        Message {
            role,
            content: content.into(),
        }
    }
}

/// Whether a provider may be called from several threads at once.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Concurrency {
    #[default]
    Concurrent,
    SingleThreaded,
}

pub trait Tokenizer: Send + Sync {
    fn id(&self) -> &str;

    fn tokenize(&self, text: &str) -> Vec<String>;

    /// Token ids. The default hashes token strings into 32 bits.
    fn encode(&self, text: &str) -> Vec<u32> {
        self.tokenize(text)
            .iter()
            .map(|t| stable_hash(t.as_bytes()) as u32)
            .collect()
    }

    fn count(&self, text: &str) -> usize {
        self.tokenize(text).len()
    }

    /// Fixed number of template tokens added per chat message.
    fn message_overhead(&self) -> usize {
        0
    }

    /// Token length of a rendered chat sequence.
    fn count_messages(&self, messages: &[Message]) -> usize {
        messages
            .iter()
            .map(|m| self.count(&m.content) + self.message_overhead())
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodingParams {
    pub max_new_tokens: usize,
    /// 0 means greedy.
    pub temperature: f64,
    pub seed: u64,
}

impl Default for DecodingParams {
    fn default() -> Self {
        DecodingParams {
            max_new_tokens: 64,
            temperature: 0.0,
            seed: 0,
        }
    }
}

/// Causal language model access used by evaluation and training.
pub trait LmScorer: Send + Sync {
    fn id(&self) -> String;

    fn concurrency(&self) -> Concurrency {
        Concurrency::Concurrent
    }

    /// Log-probability of every token of `target` given `context` and the
    /// preceding target tokens. Values are `<= 0`.
    fn score_target(&self, context: &[Message], target: &str) -> Result<Vec<f64>>;

    /// Generates the next assistant message for `context`.
    fn generate(&self, context: &[Message], params: &DecodingParams) -> Result<String>;

    /// Hidden vector at the last non-padding position of the rendered
    /// sequence.
    fn hidden_state(&self, messages: &[Message]) -> Result<Vec<f64>>;
}

/// A unit-norm sentence embedding. `degenerate` is set when the text had no
/// tokens and a fixed basis vector was returned instead.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub vector: Vec<f64>,
    pub degenerate: bool,
}

pub trait Embedder: Send + Sync {
    fn id(&self) -> &str;
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Embedding;
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Entity {
    pub surface: String,
    pub label: String,
    /// Byte offsets into the source utterance.
    pub start: usize,
    pub end: usize,
}

pub trait EntityExtractor: Send + Sync {
    fn id(&self) -> String;
    fn extract(&self, text: &str) -> Result<Vec<Entity>>;
}
