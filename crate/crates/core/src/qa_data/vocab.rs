use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::tokenize::tokenize_text;
use super::RawExample;

pub const PAD: usize = 0;
pub const START: usize = 1;
pub const SEP: usize = 2;
pub const END: usize = 3;
pub const UNK: usize = 4;
pub const NUM_RESERVED: usize = 5;

const RESERVED: [&str; NUM_RESERVED] = ["[PAD]", "[START]", "[SEP]", "[END]", "[UNK]"];

/// Token <-> id bijection with training-split frequencies.
///
/// Non-reserved ids are assigned in order of decreasing training frequency
/// (ties broken lexicographically), so id order equals frequency rank for
/// every token seen in training.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "VocabFile", into = "VocabFile")]
pub struct Vocabulary {
    tokens: Vec<String>,
    frequency: Vec<u64>,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    tokens: Vec<String>,
    frequency: Vec<u64>,
}

impl TryFrom<VocabFile> for Vocabulary {
    type Error = String;

    fn try_from(f: VocabFile) -> Result<Self, String> {
        if f.tokens.len() != f.frequency.len() {
            return Err("tokens and frequency lengths differ".into());
        }
        if f.tokens.len() < NUM_RESERVED || f.tokens[..NUM_RESERVED] != RESERVED {
            return Err("reserved tokens missing or reordered".into());
        }
        let mut index = HashMap::with_capacity(f.tokens.len());
        for (i, t) in f.tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(format!("duplicate token {t:?}"));
            }
        }
        Ok(Vocabulary {
            tokens: f.tokens,
            frequency: f.frequency,
            index,
        })
    }
}

impl From<Vocabulary> for VocabFile {
    fn from(v: Vocabulary) -> Self {
        VocabFile {
            tokens: v.tokens,
            frequency: v.frequency,
        }
    }
}

impl Vocabulary {
    /// Builds the vocabulary from the questions and contexts of a training split.
    pub fn build(train: &[RawExample]) -> Self {
        let mut counts: HashMap<String, u64> = HashMap::new();
        for ex in train {
            for tok in tokenize_text(&ex.question)
                .into_iter()
                .chain(tokenize_text(&ex.context))
            {
                *counts.entry(tok.text).or_default() += 1;
            }
        }
        Self::from_counts(counts)
    }

    pub fn from_counts(counts: HashMap<String, u64>) -> Self {
        let mut entries: Vec<(String, u64)> = counts
            .into_iter()
            .filter(|(t, _)| !RESERVED.contains(&t.as_str()))
            .collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let mut frequency = vec![0; NUM_RESERVED];
        for (t, c) in entries {
            tokens.push(t);
            frequency.push(c);
        }
        let index = tokens.iter().cloned().enumerate().map(|(i, t)| (t, i)).collect();
        Vocabulary {
            tokens,
            frequency,
            index,
        }
    }

    /// Appends tokens that are not yet present, with frequency zero.
    pub fn extend_unseen<I: IntoIterator<Item = String>>(&mut self, tokens: I) {
        for t in tokens {
            if !self.index.contains_key(&t) {
                self.index.insert(t.clone(), self.tokens.len());
                self.tokens.push(t);
                self.frequency.push(0);
            }
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Id of a normalized token, `UNK` when absent.
    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn frequency(&self, id: usize) -> u64 {
        self.frequency.get(id).copied().unwrap_or(0)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Non-reserved ids ordered by decreasing frequency, ties by id.
    /// Position `r` in the result has frequency rank `r + 1`.
    pub fn ranked_ids(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = (NUM_RESERVED..self.len()).collect();
        ids.sort_by(|&a, &b| self.frequency[b].cmp(&self.frequency[a]).then(a.cmp(&b)));
        ids
    }

    /// Hex SHA-256 over the ordered token list.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update([0u8]);
        }
        hex::encode(h.finalize())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ex(q: &str, c: &str) -> RawExample {
        RawExample {
            id: "x".into(),
            question: q.into(),
            context: c.into(),
            answer_text: c.split(' ').next().unwrap().into(),
            answer_char_start: 0,
            extra_answers: vec![],
        }
    }

    #[test]
    fn reserved_ids_are_fixed() {
        let v = Vocabulary::build(&[ex("who ?", "a b c")]);
        assert_eq!(v.token(PAD), Some("[PAD]"));
        assert_eq!(v.id("[START]"), START);
        assert_eq!(v.id("[SEP]"), SEP);
        assert_eq!(v.id("[END]"), END);
        assert_eq!(v.id("never-seen"), UNK);
    }

    #[test]
    fn ids_follow_frequency() {
        let v = Vocabulary::build(&[ex("b b", "a b c c")]);
        assert_eq!(v.id("b"), NUM_RESERVED);
        assert_eq!(v.frequency(v.id("b")), 3);
        assert_eq!(v.id("c"), NUM_RESERVED + 1);
        assert_eq!(v.ranked_ids()[0], v.id("b"));
    }

    #[test]
    fn serde_roundtrip_rebuilds_index() {
        let v = Vocabulary::build(&[ex("who ?", "a b c")]);
        let s = serde_json::to_string(&v).unwrap();
        let back: Vocabulary = serde_json::from_str(&s).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.hash(), v.hash());
        assert!(serde_json::from_str::<Vocabulary>(r#"{"tokens":["a"],"frequency":[1]}"#).is_err());
    }
}
