use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

/// Word-level vocabulary. Ids 0 and 1 are reserved for padding and
/// unknown words.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    words: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Builds a vocabulary from content words; reserved tokens are prepended
    /// and duplicates dropped.
    pub fn new<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut v = Vocab {
            words: vec![PAD_TOKEN.to_owned(), UNK_TOKEN.to_owned()],
            index: HashMap::new(),
        };
        v.index.insert(PAD_TOKEN.to_owned(), PAD);
        v.index.insert(UNK_TOKEN.to_owned(), UNK);
        for w in words {
            let w = w.as_ref().to_lowercase();
            if !v.index.contains_key(&w) {
                v.index.insert(w.clone(), v.words.len());
                v.words.push(w);
            }
        }
        v
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }
}

impl TryFrom<Vec<String>> for Vocab {
    type Error = Error;

    fn try_from(words: Vec<String>) -> Result<Self> {
        if words.len() < 2 || words[PAD] != PAD_TOKEN || words[UNK] != UNK_TOKEN {
            return Err(Error::Data(
                "vocabulary must start with the <pad> and <unk> tokens".into(),
            ));
        }
        let v = Vocab::new(words.into_iter().skip(2));
        Ok(v)
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.words
    }
}

/// Lowercased runs of alphanumeric characters.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Token ids for `caption`, truncated or padded to exactly `length`.
pub fn tokenize_pad(caption: &str, vocab: &Vocab, length: usize) -> Vec<usize> {
    let mut ids: Vec<usize> = tokenize(caption)
        .iter()
        .take(length)
        .map(|w| vocab.id(w))
        .collect();
    ids.resize(length, PAD);
    ids
}
