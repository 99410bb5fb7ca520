use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::model::{BOS_ID, EOS_ID, PAD_ID};
use crate::{Error, Result};

pub const DEFAULT_SENTINELS: u32 = 100;
pub const DEFAULT_VOCAB_CAP: usize = 8192;

/// Lowercased word-level tokens: runs of alphanumeric characters, every
/// other non-space character on its own.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for c in text.chars() {
        if c.is_alphanumeric() {
            word.extend(c.to_lowercase());
            continue;
        }
        if !word.is_empty() {
            out.push(std::mem::take(&mut word));
        }
        if !c.is_whitespace() {
            out.push(c.to_lowercase().collect());
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

/// Token ↔ id map. Ids: PAD 0, BOS 1, EOS 2, sentinels `3..3+S`, UNK `3+S`,
/// then corpus tokens by descending frequency (ties alphabetical).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocab {
    num_sentinels: u32,
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

impl Vocab {
    pub fn new(num_sentinels: u32, tokens: Vec<String>) -> Result<Self> {
        let mut v = Vocab {
            num_sentinels,
            tokens,
            index: HashMap::new(),
        };
        v.reindex()?;
        Ok(v)
    }

    fn reindex(&mut self) -> Result<()> {
        let first = self.first_corpus_id();
        self.index = HashMap::with_capacity(self.tokens.len());
        for (i, t) in self.tokens.iter().enumerate() {
            if self.index.insert(t.clone(), first + i as u32).is_some() {
                return Err(Error::Invalid(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(())
    }

    /// Build from raw texts keeping the `cap` most frequent tokens.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, cap: usize, num_sentinels: u32) -> Self {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for text in texts {
            for t in tokenize(text) {
                *counts.entry(t).or_default() += 1;
            }
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(cap);
        Vocab::new(num_sentinels, ranked.into_iter().map(|(t, _)| t).collect()).expect("counts have unique keys")
    }

    pub fn num_sentinels(&self) -> u32 {
        self.num_sentinels
    }

    pub fn sentinel(&self, i: usize) -> Result<u32> {
        if i >= self.num_sentinels as usize {
            return Err(Error::Invalid(format!(
                "needs sentinel {i} but only {} exist",
                self.num_sentinels
            )));
        }
        Ok(EOS_ID + 1 + i as u32)
    }

    pub fn is_sentinel(&self, id: u32) -> bool {
        id > EOS_ID && id <= EOS_ID + self.num_sentinels
    }

    pub fn unk_id(&self) -> u32 {
        EOS_ID + 1 + self.num_sentinels
    }

    fn first_corpus_id(&self) -> u32 {
        self.unk_id() + 1
    }

    pub fn size(&self) -> usize {
        self.first_corpus_id() as usize + self.tokens.len()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or_else(|| self.unk_id())
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        tokenize(text).iter().map(|t| self.id(t)).collect()
    }

    pub fn token(&self, id: u32) -> Option<String> {
        match id {
            PAD_ID => Some("<pad>".into()),
            BOS_ID => Some("<s>".into()),
            EOS_ID => Some("</s>".into()),
            _ if self.is_sentinel(id) => Some(format!("<extra_id_{}>", id - EOS_ID - 1)),
            _ if id == self.unk_id() => Some("<unk>".into()),
            _ => self.tokens.get((id - self.first_corpus_id()) as usize).cloned(),
        }
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or_else(|| "<?>".into()))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("vocab serialises")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let mut v: Vocab = serde_json::from_str(s)?;
        v.reindex()?;
        Ok(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenizer_splits_punctuation_and_lowercases() {
        assert_eq!(
            tokenize("Hello, World! It's 3.5"),
            ["hello", ",", "world", "!", "it", "'", "s", "3", ".", "5"]
        );
        assert!(tokenize("  \n ").is_empty());
    }

    #[test]
    fn reserved_ids_are_never_corpus_tokens() {
        let v = Vocab::build(["b a a c c c"], 10, 4);
        assert_eq!(v.unk_id(), 7);
        assert_eq!(v.id("c"), 8);
        assert_eq!(v.id("a"), 9);
        assert_eq!(v.id("b"), 10);
        assert_eq!(v.id("zzz"), 7);
        assert_eq!(v.size(), 11);
        assert_eq!(v.sentinel(0).unwrap(), 3);
        assert_eq!(v.sentinel(3).unwrap(), 6);
        assert!(v.sentinel(4).is_err());
        for id in 0..v.size() as u32 {
            let t = v.token(id).unwrap();
            if id >= 8 {
                assert_eq!(v.id(&t), id);
            }
        }
    }

    #[test]
    fn cap_keeps_most_frequent() {
        let v = Vocab::build(["x y y z z z"], 2, 1);
        assert_eq!(v.size(), 3 + 1 + 1 + 2);
        assert_eq!(v.id("x"), v.unk_id());
    }

    #[test]
    fn json_round_trip() {
        let v = Vocab::build(["the cat sat on the mat"], 100, 8);
        let back = Vocab::from_json(&v.to_json()).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.id("cat"), v.id("cat"));
    }
}
