use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
const SPECIALS: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];

/// Whitespace word-level caption vocabulary with start/end/pad/unknown tokens.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct CaptionVocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for CaptionVocab {
    fn from(words: Vec<String>) -> Self {
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        CaptionVocab { words, index }
    }
}

impl From<CaptionVocab> for Vec<String> {
    fn from(v: CaptionVocab) -> Self {
        v.words
    }
}

impl CaptionVocab {
    /// Special tokens followed by `words` in the given order, duplicates dropped.
    pub fn new<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut all: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        for w in words {
            let w = w.into();
            if !all.contains(&w) {
                all.push(w);
            }
        }
        CaptionVocab::from(all)
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

    pub fn word(&self, id: usize) -> &str {
        self.words.get(id).map_or(SPECIALS[UNK], String::as_str)
    }

    /// Word ids of a caption, without start or end tokens.
    pub fn encode(&self, caption: &str) -> Vec<usize> {
        caption.split_whitespace().map(|w| self.id(w)).collect()
    }

    /// Joins word ids back into text, dropping special tokens.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| i >= SPECIALS.len())
            .map(|&i| self.word(i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn words_to_ids(&self, words: &[String]) -> Result<Vec<usize>> {
        words
            .iter()
            .map(|w| match w.as_str() {
                "</s>" => Ok(EOS),
                _ => self
                    .index
                    .get(w)
                    .copied()
                    .ok_or_else(|| Error::data(format!("token '{w}' not in caption vocabulary"))),
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let v = CaptionVocab::new(["a", "dog", "barks", "a"]);
        assert_eq!(v.len(), 7);
        let ids = v.encode("a dog barks");
        assert_eq!(ids, vec![4, 5, 6]);
        assert_eq!(v.decode(&[BOS, 4, 5, 6, EOS]), "a dog barks");
        assert_eq!(v.encode("a cat"), vec![4, UNK]);
        let json = serde_json::to_string(&v).unwrap();
        assert_eq!(serde_json::from_str::<CaptionVocab>(&json).unwrap(), v);
    }
}
