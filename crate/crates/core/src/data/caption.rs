use std::collections::BTreeMap;

use rand::Rng;

use crate::encoder::{tokenize, Vocab};
use crate::error::{Error, Result};

fn counts(text: &str) -> BTreeMap<String, f64> {
    let mut m = BTreeMap::new();
    for t in tokenize(text) {
        *m.entry(t).or_insert(0.0) += 1.0;
    }
    m
}

fn cosine(a: &BTreeMap<String, f64>, b: &BTreeMap<String, f64>) -> f64 {
    let dot: f64 = a.iter().filter_map(|(k, x)| b.get(k).map(|y| x * y)).sum();
    let na = a.values().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.values().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Picks the candidate whose bag-of-words count vector has the highest
/// cosine similarity with `image_tags`. Ties go to the lowest index.
pub fn select_caption<S: AsRef<str>>(candidates: &[S], image_tags: &str) -> Result<usize> {
    if candidates.is_empty() {
        return Err(Error::Usage("select_caption needs at least one candidate".into()));
    }
    let tags = counts(image_tags);
    let mut best = (0, f64::NEG_INFINITY);
    for (i, c) in candidates.iter().enumerate() {
        let s = cosine(&counts(c.as_ref()), &tags);
        if s > best.1 {
            best = (i, s);
        }
    }
    Ok(best.0)
}

/// Replaces each token, with probability `rate`, by a uniformly drawn
/// non-reserved vocabulary word.
pub fn corrupt_caption<R: Rng + ?Sized>(caption: &str, rate: f64, vocab: &Vocab, rng: &mut R) -> String {
    let content = &vocab.words()[2..];
    tokenize(caption)
        .into_iter()
        .map(|t| {
            if !content.is_empty() && rng.gen::<f64>() < rate {
                content[rng.gen_range(0..content.len())].clone()
            } else {
                t
            }
        })
        .collect::<Vec<_>>()
        .join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_candidate() {
        assert_eq!(select_caption(&["anything"], "else").unwrap(), 0);
    }

    #[test]
    fn bus_beats_cat() {
        // cosine = 2/√15 ≈ 0.516 against 0
        let c = ["a bus on the road", "a cat"];
        assert_eq!(select_caption(&c, "bus road street").unwrap(), 0);
        let c = ["a cat", "a bus on the road"];
        assert_eq!(select_caption(&c, "bus road street").unwrap(), 1);
    }

    #[test]
    fn all_zero_ties_to_first() {
        assert_eq!(select_caption(&["x", "y", "z"], "w").unwrap(), 0);
        assert!(select_caption::<&str>(&[], "w").is_err());
    }

    #[test]
    fn corruption_rates() {
        let v = Vocab::new(["a", "b", "c", "d"]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(corrupt_caption("a b c", 0.0, &v, &mut rng), "a b c");
        let out = corrupt_caption("a b c", 1.0, &v, &mut rng);
        assert_eq!(tokenize(&out).len(), 3);
    }
}
