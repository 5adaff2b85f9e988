use super::{stable_hash, Embedder, Embedding};

pub const REFERENCE_EMBEDDING_DIM: usize = 64;

/// Hashed bag of lowercased words, L2-normalized, 64 dimensions.
/// Punctuation is ignored.
#[derive(Debug, Clone, Copy, Default)]
pub struct ReferenceEmbedder;

impl ReferenceEmbedder {
    pub fn bucket(word: &str) -> usize {
        (stable_hash(word.as_bytes()) % REFERENCE_EMBEDDING_DIM as u64) as usize
    }
}

impl Embedder for ReferenceEmbedder {
    fn id(&self) -> &str {
        "reference-hashed-bow-64"
    }

    fn dim(&self) -> usize {
        REFERENCE_EMBEDDING_DIM
    }

    fn embed(&self, text: &str) -> Embedding {
        let mut v = vec![0.0; REFERENCE_EMBEDDING_DIM];
        for word in text
            .split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
        {
            v[Self::bucket(&word.to_lowercase())] += 1.0;
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            v[0] = 1.0;
            return Embedding {
                vector: v,
                degenerate: true,
            };
        }
        v.iter_mut().for_each(|x| *x /= norm);
        Embedding {
            vector: v,
            degenerate: false,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::cosine_distance;

    #[test]
    fn identical_and_scaled_texts() {
        let e = ReferenceEmbedder;
        let a = e.embed("the river bank");
        assert_eq!(a, e.embed("the river bank"));
        let twice = e.embed("the river bank the river bank");
        assert!(cosine_distance(&a.vector, &twice.vector).abs() < 1e-12);
        let norm: f64 = a.vector.iter().map(|x| x * x).sum();
        assert!((norm - 1.0).abs() < 1e-12);
    }

    #[test]
    fn disjoint_collision_free_pair_is_orthogonal() {
        // Brute-force a pair of words from a small vocabulary that hash to
        // different buckets.
        let vocab = ["apple", "river", "stone", "cloud", "tiger", "piano", "lemon"];
        let mut pair = None;
        'outer: for a in vocab {
            for b in vocab {
                if a != b && ReferenceEmbedder::bucket(a) != ReferenceEmbedder::bucket(b) {
                    pair = Some((a, b));
                    break 'outer;
                }
            }
        }
        let (a, b) = pair.expect("some pair does not collide");
        let e = ReferenceEmbedder;
        let d = cosine_distance(&e.embed(a).vector, &e.embed(b).vector);
        assert!((d - 1.0).abs() < 1e-12);
    }

    #[test]
    fn empty_text_is_flagged() {
        let e = ReferenceEmbedder.embed(" ... ");
        assert!(e.degenerate);
        assert_eq!(e.vector[0], 1.0);
    }
}
