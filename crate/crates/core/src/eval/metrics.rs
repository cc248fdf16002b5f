//! Token-level F1 and ROUGE-L.
//!
//! F1 uses QA-style normalization: lowercase, drop every character that is
//! neither alphanumeric nor whitespace, drop the articles `a`, `an`, `the`,
//! then split on whitespace. ROUGE-L uses the retrieval tokenizer (lowercase
//! alphanumeric runs) and keeps articles. Both take the maximum over the
//! gold references.

use std::collections::HashMap;

use crate::index::tokenize;

const ARTICLES: [&str; 3] = ["a", "an", "the"];

pub fn normalize_answer(text: &str) -> Vec<String> {
    let cleaned: String = text
        .chars()
        .filter(|c| c.is_alphanumeric() || c.is_whitespace())
        .flat_map(char::to_lowercase)
        .collect();
    cleaned
        .split_whitespace()
        .filter(|t| !ARTICLES.contains(t))
        .map(str::to_string)
        .collect()
}

/// F-measure from overlap counts; 1.0 when both sides are empty.
fn f_measure(overlap: usize, pred_len: usize, gold_len: usize) -> f64 {
    if pred_len == 0 && gold_len == 0 {
        return 1.0;
    }
    if pred_len == 0 || gold_len == 0 || overlap == 0 {
        return 0.0;
    }
    let p = overlap as f64 / pred_len as f64;
    let r = overlap as f64 / gold_len as f64;
    2.0 * p * r / (p + r)
}

pub fn token_f1_single(prediction: &str, gold: &str) -> f64 {
    let pred = normalize_answer(prediction);
    let gold = normalize_answer(gold);
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in &gold {
        *counts.entry(t.as_str()).or_insert(0) += 1;
    }
    let mut overlap = 0;
    for t in &pred {
        if let Some(c) = counts.get_mut(t.as_str()) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    f_measure(overlap, pred.len(), gold.len())
}

/// Max token F1 over `golds`; 0.0 for an empty gold list.
pub fn token_f1(prediction: &str, golds: &[impl AsRef<str>]) -> f64 {
    golds
        .iter()
        .map(|g| token_f1_single(prediction, g.as_ref()))
        .fold(0.0, f64::max)
}

/// Length of the longest common subsequence, O(n·m) time, O(m) space.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L F-measure (β = 1) over pre-tokenized sequences.
pub fn rouge_l_tokens<T: PartialEq>(pred: &[T], gold: &[T]) -> f64 {
    f_measure(lcs_len(pred, gold), pred.len(), gold.len())
}

pub fn rouge_l_single(prediction: &str, gold: &str) -> f64 {
    rouge_l_tokens(&tokenize(prediction), &tokenize(gold))
}

pub fn rouge_l(prediction: &str, golds: &[impl AsRef<str>]) -> f64 {
    let pred = tokenize(prediction);
    golds
        .iter()
        .map(|g| rouge_l_tokens(&pred, &tokenize(g.as_ref())))
        .fold(0.0, f64::max)
}
