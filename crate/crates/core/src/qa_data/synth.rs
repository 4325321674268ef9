use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{RawExample, Vocabulary};
use crate::error::{Result, SwepError};
use crate::rng::seeded;

/// Generator settings for the synthetic "which token follows wX ?" corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyDatasetSpec {
    pub n_examples: usize,
    /// Number of content words `w0 .. w{vocab_size-1}`.
    pub vocab_size: usize,
    /// Inclusive range of context lengths in tokens.
    pub context_len_range: (usize, usize),
    pub seed: u64,
    /// Exponent `s` of the `1 / rank^s` word distribution.
    #[serde(default = "default_zipf")]
    pub zipf_exponent: f64,
}

fn default_zipf() -> f64 {
    1.0
}

impl Default for ToyDatasetSpec {
    fn default() -> Self {
        ToyDatasetSpec {
            n_examples: 200,
            vocab_size: 64,
            context_len_range: (8, 16),
            seed: 7,
            zipf_exponent: 1.0,
        }
    }
}

impl ToyDatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.context_len_range;
        if self.vocab_size < 10 {
            return Err(SwepError::Config(format!("vocab_size {} < 10", self.vocab_size)));
        }
        if self.n_examples < 1 {
            return Err(SwepError::Config("n_examples must be at least 1".into()));
        }
        if lo < 2 || lo > hi {
            return Err(SwepError::Config(format!(
                "context_len_range ({lo}, {hi}) cannot hold a queried token and its successor"
            )));
        }
        if !(self.zipf_exponent.is_finite() && self.zipf_exponent >= 0.0) {
            return Err(SwepError::Config("zipf_exponent must be finite and >= 0".into()));
        }
        Ok(())
    }
}

const MAX_ATTEMPTS: usize = 10_000;

/// Builds `n_examples` QA pairs over Zipf-distributed random token sequences.
///
/// Each question names a token that occurs exactly once in its context, so
/// the answer (the following token) is unique. The result is a pure function
/// of `spec`.
pub fn synthesize_toy_dataset(spec: &ToyDatasetSpec) -> Result<(Vec<RawExample>, Vocabulary)> {
    spec.validate()?;
    let mut rng = seeded(spec.seed);
    let words: Vec<String> = (0..spec.vocab_size).map(|i| format!("w{i}")).collect();
    let weights: Vec<f64> = (0..spec.vocab_size)
        .map(|r| 1.0 / ((r + 1) as f64).powf(spec.zipf_exponent))
        .collect();
    let dist = WeightedIndex::new(&weights).map_err(|e| SwepError::Config(e.to_string()))?;
    let (lo, hi) = spec.context_len_range;

    let mut examples = Vec::with_capacity(spec.n_examples);
    for i in 0..spec.n_examples {
        let mut made = None;
        for _ in 0..MAX_ATTEMPTS {
            let len = rng.random_range(lo..=hi);
            let ctx: Vec<usize> = (0..len).map(|_| dist.sample(&mut rng)).collect();
            let candidates: Vec<usize> = (0..len - 1)
                .filter(|&j| ctx.iter().filter(|&&w| w == ctx[j]).count() == 1)
                .collect();
            if candidates.is_empty() {
                continue;
            }
            let j = candidates[rng.random_range(0..candidates.len())];
            made = Some((ctx, j));
            break;
        }
        let (ctx, j) = made.ok_or_else(|| {
            SwepError::Config("could not place a unique queried token; widen the vocabulary or contexts".into())
        })?;
        let context = ctx.iter().map(|&w| words[w].as_str()).collect::<Vec<_>>().join(" ");
        let answer_char_start: usize = ctx[..=j].iter().map(|&w| words[w].len() + 1).sum();
        examples.push(RawExample {
            id: format!("toy-{i:05}"),
            question: format!("which token follows {} ?", words[ctx[j]]),
            context,
            answer_text: words[ctx[j + 1]].clone(),
            answer_char_start,
            extra_answers: vec![],
        });
    }

    let mut vocab = Vocabulary::build(&examples);
    vocab.extend_unseen(words);
    Ok((examples, vocab))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qa_data::tokenize_and_align;

    fn spec() -> ToyDatasetSpec {
        ToyDatasetSpec {
            n_examples: 200,
            vocab_size: 64,
            context_len_range: (8, 16),
            seed: 7,
            zipf_exponent: 1.0,
        }
    }

    #[test]
    fn same_spec_same_bytes() {
        let (a, va) = synthesize_toy_dataset(&spec()).unwrap();
        let (b, vb) = synthesize_toy_dataset(&spec()).unwrap();
        assert_eq!(serde_json::to_vec(&a).unwrap(), serde_json::to_vec(&b).unwrap());
        assert_eq!(serde_json::to_vec(&va).unwrap(), serde_json::to_vec(&vb).unwrap());
        let (c, _) = synthesize_toy_dataset(&ToyDatasetSpec { seed: 8, ..spec() }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn every_example_aligns() {
        let (exs, vocab) = synthesize_toy_dataset(&spec()).unwrap();
        for ex in &exs {
            ex.validate().unwrap();
            let t = tokenize_and_align(ex, &vocab).unwrap();
            t.check_layout().unwrap();
            assert_eq!(vocab.token(t.token_ids[t.span.0]), Some(ex.answer_text.as_str()));
        }
    }

    #[test]
    fn frequencies_are_zipf_like() {
        let (_, vocab) = synthesize_toy_dataset(&spec()).unwrap();
        let ranked = vocab.ranked_ids();
        assert!(vocab.frequency(ranked[0]) > vocab.frequency(ranked[9]));
        let w0 = vocab.frequency(vocab.id("w0"));
        let w40 = vocab.frequency(vocab.id("w40"));
        assert!(w0 > 4 * w40, "w0 {w0} w40 {w40}");
        assert_eq!(vocab.len(), 5 + 64 + 4);
    }

    #[test]
    fn infeasible_specs_are_rejected() {
        let bad = ToyDatasetSpec {
            context_len_range: (1, 4),
            ..spec()
        };
        assert!(matches!(synthesize_toy_dataset(&bad), Err(SwepError::Config(_))));
        let bad = ToyDatasetSpec {
            vocab_size: 9,
            ..spec()
        };
        assert!(synthesize_toy_dataset(&bad).is_err());
        let bad = ToyDatasetSpec {
            n_examples: 0,
            ..spec()
        };
        assert!(synthesize_toy_dataset(&bad).is_err());
    }
}
