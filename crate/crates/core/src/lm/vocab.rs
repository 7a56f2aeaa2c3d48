//! Closed word-level vocabulary with five reserved special tokens.

use std::collections::{BTreeSet, HashMap};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const P_START: usize = 3;
pub const P_END: usize = 4;

pub const SPECIALS: [&str; 5] = ["<pad>", "<bos>", "<eos>", "<p_start>", "<p_end>"];

const PUNCT: &[char] = &['.', ',', '?', '!', ';', ':'];

/// Lowercase, split on whitespace, and peel sentence punctuation into its
/// own tokens.
pub fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let mut word = String::new();
        for ch in chunk.chars() {
            if PUNCT.contains(&ch) {
                if !word.is_empty() {
                    out.push(std::mem::take(&mut word));
                }
                out.push(ch.to_string());
            } else {
                word.extend(ch.to_lowercase());
            }
        }
        if !word.is_empty() {
            out.push(word);
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Specials first, then every distinct word of `texts` in sorted order.
    pub fn from_texts<'a, I: IntoIterator<Item = &'a str>>(texts: I) -> Self {
        let mut set = BTreeSet::new();
        for t in texts {
            set.extend(split_words(t));
        }
        let words = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(set.into_iter().filter(|w| !SPECIALS.contains(&w.as_str())))
            .collect();
        Self::from_list(words).expect("constructed vocabulary is valid")
    }

    /// Rebuild from a stored word list (specials must lead, words unique).
    pub fn from_list(words: Vec<String>) -> Result<Self> {
        if words.len() < SPECIALS.len() || words[..SPECIALS.len()] != SPECIALS {
            return Err(Error::invalid("vocabulary must start with the five special tokens"));
        }
        let mut index = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if index.insert(w.clone(), i).is_some() {
                return Err(Error::invalid(format!("duplicate vocabulary entry `{w}`")));
            }
        }
        Ok(Vocab { words, index })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(|s| s.as_str())
    }

    pub fn is_special(id: usize) -> bool {
        id < SPECIALS.len()
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        split_words(text)
            .into_iter()
            .map(|w| self.id(&w).ok_or(Error::UnknownWord(w)))
            .collect()
    }

    /// Text for `ids`, stopping at `<eos>` and skipping other specials.
    pub fn decode(&self, ids: &[usize]) -> String {
        let mut out = String::new();
        for &id in ids {
            if id == EOS {
                break;
            }
            if Self::is_special(id) {
                continue;
            }
            let Some(w) = self.word(id) else { continue };
            let attach = w.len() == 1 && w.chars().all(|c| PUNCT.contains(&c));
            if !out.is_empty() && !attach {
                out.push(' ');
            }
            out.push_str(w);
        }
        out
    }
}
