use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::SequenceError;

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const IMG: u32 = 3;
pub const IMG_END: u32 = 4;
pub const USER: u32 = 5;
pub const ASSISTANT: u32 = 6;
pub const UNK: u32 = 7;

/// Surface forms of the reserved ids `0..8`, in id order.
pub const SPECIAL_WORDS: [&str; 8] = [
    "<pad>",
    "<s>",
    "</s>",
    "[IMG]",
    "[/IMG]",
    "USER:",
    "ASSISTANT:",
    "<unk>",
];

/// Word-level vocabulary. Ids `0..8` are the fixed special tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, u32>,
}

impl From<Vec<String>> for Vocab {
    fn from(words: Vec<String>) -> Self {
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as u32))
            .collect();
        Self { words, index }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.words
    }
}

impl Vocab {
    /// Builds a vocabulary from content words; specials are prepended and
    /// duplicates dropped (first occurrence wins).
    pub fn new<S: AsRef<str>>(words: impl IntoIterator<Item = S>) -> Self {
        let mut all: Vec<String> = SPECIAL_WORDS.iter().map(|s| s.to_string()).collect();
        let mut seen: std::collections::HashSet<String> = all.iter().cloned().collect();
        for w in words {
            let w = w.as_ref().to_string();
            if !w.is_empty() && !w.contains(char::is_whitespace) && seen.insert(w.clone()) {
                all.push(w);
            }
        }
        Self::from(all)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        self.words.get(id as usize).map(String::as_str)
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    /// Whitespace tokenisation; unknown words are an error.
    pub fn tokenize(&self, text: &str) -> Result<Vec<u32>, SequenceError> {
        text.split_whitespace()
            .map(|w| {
                self.id(w)
                    .ok_or_else(|| SequenceError::UnknownWord(w.to_string()))
            })
            .collect()
    }

    /// Like [`Vocab::tokenize`] but maps unknown words to `<unk>`.
    pub fn tokenize_lossy(&self, text: &str) -> Vec<u32> {
        text.split_whitespace()
            .map(|w| self.id(w).unwrap_or(UNK))
            .collect()
    }

    pub fn detokenize(&self, ids: &[u32]) -> String {
        ids.iter()
            .map(|&i| self.word(i).unwrap_or(SPECIAL_WORDS[UNK as usize]))
            .collect::<Vec<_>>()
            .join(" ")
    }
}
