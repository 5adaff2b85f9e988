use std::collections::BTreeSet;

use super::{Entity, EntityExtractor};
use crate::error::Result;

/// Rule-based stand-in for a named-entity model.
///
/// | rule | result |
/// |------|--------|
/// | word of exactly four ASCII digits (punctuation stripped) | `DATE` entity, any position |
/// | maximal run of capitalized words, none sentence-initial | one `NAME` entity |
/// | sentence-initial word (first word, or after `.` `!` `?`) | never starts or joins a run |
/// | `I` and its contractions | never capitalized-entity words |
/// | trailing punctuation on a word (`,` `;` `.` ...) | closes the run after that word |
///
/// So `"I visited Green Bay in 1995."` gives `Green Bay` and `1995`, and
/// `"The End"` gives only `End`.
#[derive(Debug, Clone, Copy, Default)]
pub struct ReferenceExtractor;

struct Word<'a> {
    core: &'a str,
    start: usize,
    end: usize,
    trailing_punct: bool,
    ends_sentence: bool,
}

fn words(text: &str) -> Vec<Word<'_>> {
    let mut out = Vec::new();
    let mut offset = 0;
    for raw in text.split_whitespace() {
        let raw_start = offset + text[offset..].find(raw).expect("word is in text");
        offset = raw_start + raw.len();
        let lead = raw.len() - raw.trim_start_matches(|c: char| !c.is_alphanumeric()).len();
        let trimmed = raw.trim_matches(|c: char| !c.is_alphanumeric());
        let tail = &raw[lead + trimmed.len()..];
        let closing = tail.trim_end_matches(['"', '\'', ')', ']', '\u{201d}', '\u{2019}']);
        out.push(Word {
            core: trimmed,
            start: raw_start + lead,
            end: raw_start + lead + trimmed.len(),
            trailing_punct: !tail.is_empty(),
            ends_sentence: closing.ends_with(['.', '!', '?']),
        });
    }
    out
}

fn is_year(w: &str) -> bool {
    w.len() == 4 && w.bytes().all(|b| b.is_ascii_digit())
}

fn is_pronoun_i(w: &str) -> bool {
    matches!(w, "I" | "I'm" | "I've" | "I'd" | "I'll" | "I\u{2019}m")
}

impl EntityExtractor for ReferenceExtractor {
    fn id(&self) -> String {
        "reference-capitalized-runs-v1".into()
    }

    fn extract(&self, text: &str) -> Result<Vec<Entity>> {
        let mut out = Vec::new();
        let mut run: Option<(usize, usize)> = None;
        let mut sentence_start = true;
        let flush = |run: &mut Option<(usize, usize)>, out: &mut Vec<Entity>| {
            if let Some((s, e)) = run.take() {
                out.push(Entity {
                    surface: text[s..e].to_string(),
                    label: "NAME".into(),
                    start: s,
                    end: e,
                });
            }
        };
        for w in words(text) {
            let initial = sentence_start;
            sentence_start = w.ends_sentence;
            if w.core.is_empty() {
                flush(&mut run, &mut out);
                continue;
            }
            if is_year(w.core) {
                flush(&mut run, &mut out);
                out.push(Entity {
                    surface: w.core.to_string(),
                    label: "DATE".into(),
                    start: w.start,
                    end: w.end,
                });
                continue;
            }
            let capitalized = w.core.chars().next().is_some_and(char::is_uppercase);
            if capitalized && !initial && !is_pronoun_i(w.core) {
                run = Some(match run {
                    Some((s, _)) => (s, w.end),
                    None => (w.start, w.end),
                });
                if w.trailing_punct {
                    flush(&mut run, &mut out);
                }
            } else {
                flush(&mut run, &mut out);
            }
        }
        flush(&mut run, &mut out);
        Ok(out)
    }
}

/// Keeps only entities whose label is in `labels`.
pub struct LabelFilter<E> {
    pub inner: E,
    pub labels: BTreeSet<String>,
}

impl<E: EntityExtractor> EntityExtractor for LabelFilter<E> {
    fn id(&self) -> String {
        let labels: Vec<&str> = self.labels.iter().map(String::as_str).collect();
        format!("{}[{}]", self.inner.id(), labels.join(","))
    }

    fn extract(&self, text: &str) -> Result<Vec<Entity>> {
        let mut ents = self.inner.extract(text)?;
        ents.retain(|e| self.labels.contains(&e.label));
        Ok(ents)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn surfaces(text: &str) -> Vec<String> {
        ReferenceExtractor
            .extract(text)
            .unwrap()
            .into_iter()
            .map(|e| e.surface)
            .collect()
    }

    #[test]
    fn rule_table_examples() {
        assert_eq!(surfaces("I visited Green Bay in 1995."), vec!["Green Bay", "1995"]);
        assert!(surfaces("hello there").is_empty());
        assert_eq!(surfaces("The End"), vec!["End"]);
        assert_eq!(surfaces("What about NASA?"), vec!["NASA"]);
        assert!(surfaces("NASA was great.").is_empty());
        assert_eq!(surfaces("Yes. Then Paris, London and Rome."), vec!["Paris", "London", "Rome"]);
        assert_eq!(surfaces("and I went to Peace Corps"), vec!["Peace Corps"]);
    }

    #[test]
    fn offsets_point_at_surface() {
        let text = "  So, in \"Green Bay\" we farmed since 1970.";
        for e in ReferenceExtractor.extract(text).unwrap() {
            assert!(e.end <= text.len());
            assert_eq!(&text[e.start..e.end], e.surface);
        }
    }

    #[test]
    fn label_filter() {
        let f = LabelFilter {
            inner: ReferenceExtractor,
            labels: ["DATE".to_string()].into_iter().collect(),
        };
        let got: Vec<String> = f
            .extract("I visited Green Bay in 1995.")
            .unwrap()
            .into_iter()
            .map(|e| e.surface)
            .collect();
        assert_eq!(got, vec!["1995"]);
    }
}
