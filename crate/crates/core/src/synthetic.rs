//! Synthetic corpora for tests, benchmarks and demo runs.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Map;

use crate::corpus::{Dialogue, DomainTag, Role, Turn, TurnId};

/// A minimal valid dialogue with turn ids `0..n` (oral history domain).
pub fn dialogue_from_pairs(id: &str, turns: &[(Role, &str)]) -> Dialogue {
    Dialogue {
        dialogue_id: id.to_string(),
        metadata: Map::new(),
        broad_source: "synthetic".into(),
        domain: DomainTag::OralHistory,
        title: None,
        elicitors: vec!["interviewer".into()],
        respondents: vec!["narrator".into()],
        languages: vec!["en".into()],
        turns: turns
            .iter()
            .enumerate()
            .map(|(i, (role, u))| Turn {
                turn_id: TurnId::Int(i as i64),
                timestamp: None,
                speaker: match role {
                    Role::Elicitor => "interviewer".into(),
                    Role::Respondent => "narrator".into(),
                },
                role: *role,
                utterance: u.to_string(),
            })
            .collect(),
    }
}

const SYLLABLES: [&str; 16] = [
    "ka", "lo", "mi", "ren", "tas", "vo", "qui", "bel", "dor", "fen", "gal", "hu", "zin", "pra",
    "sol", "wex",
];

const PLACES: [&str; 12] = [
    "Green Bay", "Tacoma", "Lisbon", "Nairobi", "Quito", "Oslo", "Dayton", "Perth", "Malaga",
    "Fresno", "Bergen", "Accra",
];

const OPENERS: [&str; 8] = ["so", "and", "tell me about", "what about", "how was", "why", "who", "remember"];

fn pseudo_word(rng: &mut ChaCha8Rng) -> String {
    let n = rng.gen_range(2..=3);
    (0..n).map(|_| *SYLLABLES.choose(rng).expect("nonempty")).collect()
}

/// Word lists of `n_topics` disjoint synthetic topics.
pub fn topic_vocabularies(n_topics: usize, words_per_topic: usize, seed: u64) -> Vec<Vec<String>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = std::collections::HashSet::new();
    (0..n_topics)
        .map(|_| {
            let mut words = Vec::new();
            while words.len() < words_per_topic {
                let w = pseudo_word(&mut rng);
                if seen.insert(w.clone()) {
                    words.push(w);
                }
            }
            words
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TopicalConfig {
    pub dialogues: usize,
    pub turns: usize,
    pub topics: usize,
    pub words_per_topic: usize,
    /// Per-turn probability of moving to a new topic.
    pub drift: f64,
    pub respondent_words: (usize, usize),
    pub seed: u64,
}

impl Default for TopicalConfig {
    fn default() -> Self {
        TopicalConfig {
            dialogues: 40,
            turns: 40,
            topics: 40,
            words_per_topic: 10,
            drift: 0.2,
            respondent_words: (16, 24),
            seed: 7,
        }
    }
}

/// Strictly alternating elicitor/respondent dialogues that drift through
/// synthetic topics. Elicitor turns are short questions built from the
/// current topic's words; respondent turns are about three times longer and
/// sometimes name a place and a year. Domains cycle through all four tags.
pub fn topical_corpus(cfg: &TopicalConfig) -> Vec<Dialogue> {
    let topics = topic_vocabularies(cfg.topics, cfg.words_per_topic, cfg.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    (0..cfg.dialogues)
        .map(|i| {
            let mut topic = rng.gen_range(0..topics.len());
            let mut turns: Vec<(Role, String)> = Vec::with_capacity(cfg.turns);
            for t in 0..cfg.turns {
                if t > 0 && rng.gen_bool(cfg.drift) {
                    topic = rng.gen_range(0..topics.len());
                }
                let words = &topics[topic];
                let text = if t % 2 == 0 {
                    let n = rng.gen_range(4..=5);
                    let body: Vec<&str> = (0..n)
                        .map(|_| words.choose(&mut rng).expect("nonempty").as_str())
                        .collect();
                    format!("{} {} ?", OPENERS.choose(&mut rng).expect("nonempty"), body.join(" "))
                } else {
                    let n = rng.gen_range(cfg.respondent_words.0..=cfg.respondent_words.1);
                    let mut body: Vec<String> = (0..n)
                        .map(|_| words.choose(&mut rng).expect("nonempty").clone())
                        .collect();
                    if rng.gen_bool(0.4) {
                        body.push(format!(
                            "near {} in {}",
                            PLACES.choose(&mut rng).expect("nonempty"),
                            rng.gen_range(1950..2020)
                        ));
                    }
                    format!("{} .", body.join(" "))
                };
                let role = if t % 2 == 0 { Role::Elicitor } else { Role::Respondent };
                turns.push((role, text));
            }
            let refs: Vec<(Role, &str)> = turns.iter().map(|(r, s)| (*r, s.as_str())).collect();
            let mut d = dialogue_from_pairs(&format!("topical-{i:04}"), &refs);
            d.domain = DomainTag::ALL[i % 4];
            d
        })
        .collect()
}

/// Dialogues with random role sequences (including runs of the same role),
/// backchannels, and occasional very long turns, for exercising
/// segmentation filters.
pub fn random_role_corpus(n: usize, seed: u64) -> Vec<Dialogue> {
    const BACKCHANNELS: [&str; 5] = ["Okay.", "Hmm.", "Got it.", "Right, sure.", "Yes"];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let len = rng.gen_range(1..=40);
            let turns: Vec<(Role, String)> = (0..len)
                .map(|_| {
                    let role = if rng.gen_bool(0.5) { Role::Elicitor } else { Role::Respondent };
                    let roll: f64 = rng.gen();
                    let text = if roll < 0.15 {
                        BACKCHANNELS.choose(&mut rng).expect("nonempty").to_string()
                    } else {
                        let words = if roll > 0.97 {
                            rng.gen_range(150..320)
                        } else {
                            rng.gen_range(1..30)
                        };
                        (0..words)
                            .map(|_| pseudo_word(&mut rng))
                            .collect::<Vec<_>>()
                            .join(" ")
                    };
                    (role, text)
                })
                .collect();
            let refs: Vec<(Role, &str)> = turns.iter().map(|(r, s)| (*r, s.as_str())).collect();
            let mut d = dialogue_from_pairs(&format!("random-{i:04}"), &refs);
            d.domain = DomainTag::ALL[i % 4];
            d
        })
        .collect()
}
