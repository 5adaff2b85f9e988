use super::Tokenizer;

/// Splits on whitespace and emits every punctuation character as its own
/// token: `"Hello, world"` becomes `["Hello", ",", "world"]`.
///
/// Concatenation can only merge tokens, so
/// `count(a + b) <= count(a) + count(b)` (constant 0).
#[derive(Debug, Clone, Copy, Default)]
pub struct ReferenceTokenizer;

impl Tokenizer for ReferenceTokenizer {
    fn id(&self) -> &str {
        "reference-wordpunct-v1"
    }

    fn tokenize(&self, text: &str) -> Vec<String> {
        let mut out = Vec::new();
        let mut word = String::new();
        for c in text.chars() {
            if c.is_alphanumeric() {
                word.push(c);
                continue;
            }
            if !word.is_empty() {
                out.push(std::mem::take(&mut word));
            }
            if !c.is_whitespace() {
                out.push(c.to_string());
            }
        }
        if !word.is_empty() {
            out.push(word);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rule_examples() {
        let t = ReferenceTokenizer;
        assert_eq!(t.tokenize("Hello, world"), vec!["Hello", ",", "world"]);
        assert_eq!(t.count(""), 0);
        assert_eq!(t.count("a a a"), 3);
        assert_eq!(t.tokenize("That's 1995."), vec!["That", "'", "s", "1995", "."]);
    }

    proptest! {
        #[test]
        fn concat_is_subadditive(a in ".{0,40}", b in ".{0,40}") {
            let t = ReferenceTokenizer;
            let joined = format!("{a}{b}");
            prop_assert!(t.count(&joined) <= t.count(&a) + t.count(&b));
            prop_assert_eq!(t.tokenize(&a), t.tokenize(&a));
        }
    }
}
