//! Token and answer vocabularies.

use std::collections::{BTreeSet, HashMap};

pub const UNK: &str = "<unk>";
pub const BOA: &str = "<boa>";

/// Token vocabulary for the text encoder. Rows 0 and 1 are the unknown-token
/// and begin-of-answer markers.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Builds a vocabulary from `tokens`; specials are prepended and
    /// duplicates dropped, keeping first occurrence order.
    pub fn new<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut v = Self { tokens: Vec::new(), index: HashMap::new() };
        for t in [UNK, BOA] {
            v.push(t);
        }
        for t in tokens {
            v.push(t.as_ref());
        }
        v
    }

    /// Sorted unique tokens from many token sequences.
    pub fn from_sequences<'a>(seqs: impl IntoIterator<Item = &'a [String]>) -> Self {
        let set: BTreeSet<&str> = seqs.into_iter().flatten().map(String::as_str).collect();
        Self::new(set)
    }

    fn push(&mut self, t: &str) {
        if !self.index.contains_key(t) {
            self.index.insert(t.to_string(), self.tokens.len());
            self.tokens.push(t.to_string());
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Row for `token`, falling back to the unknown-token row.
    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(0)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn boa(&self) -> usize {
        1
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Tokens after the two specials, the form stored in configs.
    pub fn user_tokens(&self) -> &[String] {
        &self.tokens[2..]
    }
}

/// Output classes of the open-ended word decoder.
#[derive(Clone, Debug, PartialEq)]
pub struct AnswerVocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl AnswerVocab {
    pub fn new<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut v = Self { words: Vec::new(), index: HashMap::new() };
        for w in words {
            let w = w.as_ref();
            if !v.index.contains_key(w) {
                v.index.insert(w.to_string(), v.words.len());
                v.words.push(w.to_string());
            }
        }
        if v.words.is_empty() {
            v.index.insert(UNK.to_string(), 0);
            v.words.push(UNK.to_string());
        }
        v
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn index(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn word(&self, i: usize) -> &str {
        &self.words[i]
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }
}

/// Lower-cased whitespace tokenization.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}
