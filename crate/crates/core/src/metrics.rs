//! Exact match and token F1 with SQuAD answer normalization.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    /// Percentage in `[0, 100]`.
    pub em: f64,
    /// Percentage in `[0, 100]`.
    pub f1: f64,
    pub n_examples: usize,
}

/// Lowercase, drop ASCII punctuation, drop the articles `a`, `an`, `the`,
/// collapse whitespace.
pub fn normalize_answer(s: &str) -> String {
    let lower = s.to_lowercase();
    let no_punct: String = lower.chars().filter(|c| !c.is_ascii_punctuation()).collect();
    no_punct
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// 100 if the normalized strings are equal, else 0.
pub fn exact_match(prediction: &str, gold: &str) -> f64 {
    if normalize_answer(prediction) == normalize_answer(gold) {
        100.0
    } else {
        0.0
    }
}

/// Token-overlap F1 (percentage) over normalized whitespace tokens.
pub fn f1_score(prediction: &str, gold: &str) -> f64 {
    let p = normalize_answer(prediction);
    let g = normalize_answer(gold);
    let p: Vec<&str> = p.split_whitespace().collect();
    let g: Vec<&str> = g.split_whitespace().collect();
    if p.is_empty() || g.is_empty() {
        return if p.is_empty() && g.is_empty() { 100.0 } else { 0.0 };
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for w in &g {
        *counts.entry(w).or_default() += 1;
    }
    let mut common = 0usize;
    for w in &p {
        if let Some(c) = counts.get_mut(w) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let precision = common as f64 / p.len() as f64;
    let recall = common as f64 / g.len() as f64;
    100.0 * 2.0 * precision * recall / (precision + recall)
}

/// `(em, f1)` of one prediction, each the max over the gold answers.
pub fn score_example<S: AsRef<str>>(prediction: &str, golds: &[S]) -> (f64, f64) {
    golds.iter().fold((0.0f64, 0.0f64), |(em, f1), g| {
        (
            em.max(exact_match(prediction, g.as_ref())),
            f1.max(f1_score(prediction, g.as_ref())),
        )
    })
}

/// Macro average over `(prediction, golds)` pairs. Empty input scores 0.
pub fn evaluate_predictions<S: AsRef<str>>(pairs: &[(String, Vec<S>)]) -> EvalResult {
    let n = pairs.len();
    if n == 0 {
        return EvalResult {
            em: 0.0,
            f1: 0.0,
            n_examples: 0,
        };
    }
    let (em, f1) = pairs.iter().fold((0.0, 0.0), |(em, f1), (p, golds)| {
        let (e, f) = score_example(p, golds);
        (em + e, f1 + f)
    });
    EvalResult {
        em: em / n as f64,
        f1: f1 / n as f64,
        n_examples: n,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn normalization_examples() {
        assert_eq!(normalize_answer("The  Cat."), "cat");
        assert_eq!(normalize_answer("an apple, a pear"), "apple pear");
        assert_eq!(normalize_answer("theory"), "theory");
        assert_eq!(normalize_answer(""), "");
    }

    #[test]
    fn documented_cases() {
        assert_eq!(score_example("the cat", &["The cat."]), (100.0, 100.0));
        assert_eq!(score_example("cat", &["the cat"]), (100.0, 100.0));
        let (em, f1) = score_example("cat", &["big cat"]);
        assert_eq!(em, 0.0);
        assert!((f1 - 200.0 / 3.0).abs() < 1e-12);
        assert_eq!(score_example("", &["cat"]), (0.0, 0.0));
    }

    #[test]
    fn max_over_golds() {
        let (em, f1) = score_example("red fox", &["blue fox", "red fox jumps"]);
        assert_eq!(em, 0.0);
        assert!((f1 - 80.0).abs() < 1e-12);
    }

    #[test]
    fn empty_input_is_zero() {
        let r = evaluate_predictions::<String>(&[]);
        assert_eq!((r.em, r.f1, r.n_examples), (0.0, 0.0, 0));
    }

    proptest! {
        #[test]
        fn em_never_exceeds_f1(p in "[a-c ]{0,12}", g in "[a-c ]{0,12}") {
            let (em, f1) = score_example(&p, &[g]);
            prop_assert!(em <= f1);
            prop_assert!((0.0..=100.0).contains(&f1));
        }
    }
}
