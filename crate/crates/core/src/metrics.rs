//! Answer-quality metrics: token F1, BLEU-1 and containment accuracy.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

fn strip_punct(text: &str) -> String {
    text.to_lowercase().chars().filter(|c| !c.is_ascii_punctuation()).collect()
}

/// SQuAD-style normalization: lowercase, drop punctuation, drop the
/// articles a/an/the, collapse whitespace.
pub fn normalize_answer(text: &str) -> String {
    strip_punct(text)
        .split_whitespace()
        .filter(|t| !matches!(*t, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

fn counts<'a>(tokens: &[&'a str]) -> HashMap<&'a str, usize> {
    let mut m = HashMap::new();
    for t in tokens {
        *m.entry(*t).or_insert(0) += 1;
    }
    m
}

fn overlap(pred: &[&str], gold: &[&str]) -> usize {
    let g = counts(gold);
    counts(pred).iter().map(|(t, n)| (*n).min(*g.get(t).unwrap_or(&0))).sum()
}

pub fn token_f1(prediction: &str, gold: &str) -> f64 {
    let p = normalize_answer(prediction);
    let g = normalize_answer(gold);
    let pt: Vec<&str> = p.split_whitespace().collect();
    let gt: Vec<&str> = g.split_whitespace().collect();
    if pt.is_empty() && gt.is_empty() {
        return 1.0;
    }
    if pt.is_empty() || gt.is_empty() {
        return 0.0;
    }
    let common = overlap(&pt, &gt);
    if common == 0 {
        return 0.0;
    }
    let precision = common as f64 / pt.len() as f64;
    let recall = common as f64 / gt.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Clipped unigram precision times the brevity penalty. Tokens are
/// lowercased and stripped of punctuation; articles are kept.
pub fn bleu1(prediction: &str, gold: &str) -> f64 {
    let p = strip_punct(prediction);
    let g = strip_punct(gold);
    let pt: Vec<&str> = p.split_whitespace().collect();
    let gt: Vec<&str> = g.split_whitespace().collect();
    if pt.is_empty() {
        return 0.0;
    }
    let precision = overlap(&pt, &gt) as f64 / pt.len() as f64;
    let bp = if pt.len() < gt.len() { (1.0 - gt.len() as f64 / pt.len() as f64).exp() } else { 1.0 };
    precision * bp
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccuracyRule {
    /// Normalized gold appears in the normalized prediction on token boundaries.
    #[default]
    Containment,
    Exact,
}

pub fn accuracy(prediction: &str, gold: &str, rule: AccuracyRule) -> f64 {
    let p = normalize_answer(prediction);
    let g = normalize_answer(gold);
    let hit = match rule {
        AccuracyRule::Exact => p == g,
        AccuracyRule::Containment if g.is_empty() => p.is_empty(),
        AccuracyRule::Containment => format!(" {p} ").contains(&format!(" {g} ")),
    };
    if hit { 1.0 } else { 0.0 }
}

/// Leaf scoring choice for tree rollouts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LeafMetric {
    #[default]
    F1,
    Accuracy,
}

impl LeafMetric {
    pub fn score(self, prediction: &str, gold: &str) -> f64 {
        match self {
            LeafMetric::F1 => token_f1(prediction, gold),
            LeafMetric::Accuracy => accuracy(prediction, gold, AccuracyRule::Containment),
        }
    }
}

/// Token-count estimate used for cost reporting (characters / 4).
pub fn estimate_tokens(text: &str) -> usize {
    text.chars().count().div_ceil(4)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f1_fixtures() {
        assert!((token_f1("in the park yesterday", "the park") - 0.5).abs() < 1e-12);
        assert_eq!(token_f1("Paris", "paris."), 1.0);
        assert_eq!(token_f1("red", "blue"), 0.0);
        assert_eq!(token_f1("", ""), 1.0);
        assert_eq!(token_f1("the", "x"), 0.0);
    }

    #[test]
    fn bleu_fixtures() {
        assert!((bleu1("blue car", "blue") - 0.5).abs() < 1e-12);
        assert_eq!(bleu1("same words", "same words"), 1.0);
        assert!((bleu1("blue", "blue car") - (-1.0f64).exp()).abs() < 1e-12);
        assert_eq!(bleu1("", "x"), 0.0);
    }

    #[test]
    fn accuracy_rules() {
        assert_eq!(accuracy("She lives in New York.", "new york", AccuracyRule::Containment), 1.0);
        assert_eq!(accuracy("Yorkshire", "york", AccuracyRule::Containment), 0.0);
        assert_eq!(accuracy("2023-05-07", "2023-05-07", AccuracyRule::Exact), 1.0);
        assert_eq!(accuracy("unknown", "Denver", AccuracyRule::Containment), 0.0);
    }
}
