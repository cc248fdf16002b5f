//! Lowercasing tokenizer shared by retrieval, ROUGE-L and deduplication.
//!
//! A term is a maximal run of alphanumeric characters; everything else
//! (whitespace, punctuation, symbols) separates terms.

/// Byte spans `(start, end)` of each term in `text`.
pub fn term_spans(text: &str) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    let mut start = None;
    for (i, c) in text.char_indices() {
        if c.is_alphanumeric() {
            if start.is_none() {
                start = Some(i);
            }
        } else if let Some(s) = start.take() {
            spans.push((s, i));
        }
    }
    if let Some(s) = start {
        spans.push((s, text.len()));
    }
    spans
}

pub fn tokenize(text: &str) -> Vec<String> {
    term_spans(text)
        .into_iter()
        .map(|(s, e)| text[s..e].to_lowercase())
        .collect()
}

/// Cuts `text` right after its `budget`-th term. Returns the (possibly
/// unchanged) prefix and whether anything was dropped.
pub fn truncate_to_terms(text: &str, budget: usize) -> (&str, bool) {
    let spans = term_spans(text);
    if spans.len() <= budget {
        return (text, false);
    }
    if budget == 0 {
        return ("", true);
    }
    (&text[..spans[budget - 1].1], true)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splits_on_punctuation_and_lowercases() {
        assert_eq!(
            tokenize("Cisplatin and carboplatin."),
            vec!["cisplatin", "and", "carboplatin"]
        );
    }

    #[test]
    fn empty_input() {
        assert!(tokenize("").is_empty());
        assert!(tokenize("  ,;  ").is_empty());
    }

    #[test]
    fn case_folding() {
        assert_eq!(tokenize("A a A"), vec!["a", "a", "a"]);
    }

    #[test]
    fn unicode_whitespace_and_letters() {
        assert_eq!(tokenize("Ätiologie\u{00a0}IL-6\u{2003}β-cells"), vec![
            "ätiologie", "il", "6", "β", "cells"
        ]);
    }

    #[test]
    fn truncation_keeps_trailing_text_of_last_term_only() {
        let (t, cut) = truncate_to_terms("one, two; three four", 2);
        assert_eq!(t, "one, two");
        assert!(cut);
        let (t, cut) = truncate_to_terms("one two", 2);
        assert_eq!(t, "one two");
        assert!(!cut);
    }
}
