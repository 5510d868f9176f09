use std::collections::HashMap;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const MASK: usize = 3;

const BUILTIN: &str = include_str!("../../assets/vocab.txt");

/// Closed word list; line number is the id.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    words: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocab {
    pub fn builtin() -> Vocab {
        Vocab::parse(BUILTIN).expect("bundled vocabulary is well formed")
    }

    /// One word per line; the first four lines are pad, bos, eos, mask.
    pub fn parse(text: &str) -> Result<Vocab> {
        let words: Vec<String> = text.lines().map(|l| l.trim().to_string()).filter(|l| !l.is_empty()).collect();
        if words.len() < 4 {
            return Err(Error::Data("vocabulary lacks the four special tokens".into()));
        }
        let mut ids = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if ids.insert(w.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate vocabulary word `{w}`")));
            }
        }
        Ok(Vocab { words, ids })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.ids.get(word).copied()
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    pub fn is_special(id: usize) -> bool {
        id <= MASK
    }

    /// Whitespace tokenization framed by bos/eos; unknown words are errors.
    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        let mut ids = vec![BOS];
        for w in text.split_whitespace() {
            ids.push(self.id(w).ok_or_else(|| Error::Data(format!("out-of-vocabulary word `{w}`")))?);
        }
        ids.push(EOS);
        Ok(ids)
    }

    /// Inverse of [`Vocab::tokenize`]: drops pad/bos and stops at eos.
    pub fn detokenize(&self, ids: &[usize]) -> String {
        ids.iter()
            .take_while(|&&i| i != EOS)
            .filter(|&&i| i != BOS && i != PAD)
            .map(|&i| self.word(i).unwrap_or("[unk]"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}
