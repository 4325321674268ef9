//! QA data: SQuAD ingestion, the synthetic toy corpus, tokenization into the
//! `[START] question [SEP] context [END]` layout, and padded batching.

mod batch;
mod squad;
mod synth;
mod tokenize;
mod vocab;

use serde::{Deserialize, Serialize};

pub use batch::{batchify, Batch, RowInfo};
pub use squad::{load_squad_json, write_squad_json, SquadLoad};
pub use synth::{synthesize_toy_dataset, ToyDatasetSpec};
pub use tokenize::{
    detokenize, read_tokenized_cache, tokenize_and_align, tokenize_text, write_tokenized_cache, TextToken,
};
pub use vocab::{Vocabulary, END, NUM_RESERVED, PAD, SEP, START, UNK};

use crate::error::{Result, SwepError};

/// One question with its context and gold answer, before tokenization.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawExample {
    pub id: String,
    pub question: String,
    pub context: String,
    pub answer_text: String,
    /// Offset of the answer in `context`, counted in characters.
    pub answer_char_start: usize,
    /// Further acceptable answers, used only for evaluation.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub extra_answers: Vec<String>,
}

impl RawExample {
    pub fn validate(&self) -> Result<()> {
        let fail = |message: &str| SwepError::Validation {
            id: self.id.clone(),
            message: message.to_string(),
        };
        if self.question.trim().is_empty() {
            return Err(fail("empty question"));
        }
        if self.context.trim().is_empty() {
            return Err(fail("empty context"));
        }
        if self.answer_text.is_empty() {
            return Err(fail("empty answer"));
        }
        let found: String = self
            .context
            .chars()
            .skip(self.answer_char_start)
            .take(self.answer_text.chars().count())
            .collect();
        if found != self.answer_text {
            return Err(fail(&format!(
                "answer {:?} not found at char offset {} (found {:?})",
                self.answer_text, self.answer_char_start, found
            )));
        }
        Ok(())
    }

    /// The primary answer followed by every extra answer.
    pub fn gold_answers(&self) -> Vec<&str> {
        std::iter::once(self.answer_text.as_str())
            .chain(self.extra_answers.iter().map(String::as_str))
            .collect()
    }
}

/// A tokenized example laid out as `[START] q_1..q_M [SEP] c_1..c_L [END]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizedExample {
    pub id: String,
    pub token_ids: Vec<usize>,
    #[serde(rename = "M")]
    pub question_len: usize,
    #[serde(rename = "L")]
    pub context_len: usize,
    /// Inclusive `(start, end)` token positions of the answer.
    pub span: (usize, usize),
    /// Character range of every context token in the original context.
    #[serde(skip)]
    pub context_offsets: Vec<(usize, usize)>,
}

impl TokenizedExample {
    /// Sequence length `T = L + M + 3`.
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn sep_position(&self) -> usize {
        self.question_len + 1
    }

    /// Token positions holding context tokens.
    pub fn context_range(&self) -> std::ops::Range<usize> {
        self.question_len + 2..self.question_len + 2 + self.context_len
    }

    /// All-true mask of length `T`.
    pub fn padding_mask(&self) -> Vec<bool> {
        vec![true; self.len()]
    }

    /// Checks the structural invariants of the layout.
    pub fn check_layout(&self) -> Result<()> {
        let t = self.len();
        let bad = |m: String| SwepError::Validation {
            id: self.id.clone(),
            message: m,
        };
        if t != self.context_len + self.question_len + 3 {
            return Err(bad(format!(
                "T = {t} but L + M + 3 = {}",
                self.context_len + self.question_len + 3
            )));
        }
        if self.token_ids[0] != START || self.token_ids[self.sep_position()] != SEP || self.token_ids[t - 1] != END {
            return Err(bad("special symbols misplaced".into()));
        }
        let (s, e) = self.span;
        if !(self.question_len + 2 <= s && s <= e && e <= t - 2) {
            return Err(bad(format!("span ({s}, {e}) outside the context region")));
        }
        Ok(())
    }
}
