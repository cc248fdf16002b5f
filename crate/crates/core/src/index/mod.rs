//! Okapi BM25 retrieval over an unlabeled domain corpus.
//!
//! ```text
//! score(d, q) = Σ_{t ∈ q} idf(t) · tf(t,d)·(k1 + 1) / (tf(t,d) + k1·(1 − b + b·|d| / avgdl))
//! idf(t)      = max(0, ln((N − df(t) + 0.5) / (df(t) + 0.5)))
//! ```
//!
//! Query terms are summed with multiplicity, so a term repeated in the query
//! contributes once per occurrence. Documents sharing no term with the query
//! are never returned. Relevance weights are the raw scores normalized over
//! the returned set.

mod builder;
mod corpus;
mod store;
mod tokenize;

use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use builder::{build_index, IndexBuilder, DEFAULT_SHARD_DOCS};
pub use corpus::{read_corpus, CorpusFormat, CorpusReader};
pub use store::{FORMAT_VERSION, MAGIC};
pub use tokenize::{term_spans, tokenize, truncate_to_terms};

/// Retrieval depth used when none is configured.
pub const DEFAULT_TOP_K: usize = 5;
/// Maximum number of query terms sent to the scorer.
pub const DEFAULT_QUERY_TERM_BUDGET: usize = 512;

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("duplicate doc_id {0}")]
    DuplicateDocId(u64),
    #[error("document {0} has empty text")]
    EmptyDocument(u64),
    #[error("corpus contains no documents")]
    EmptyCorpus,
    #[error("k must be at least 1")]
    ZeroK,
    #[error("invalid BM25 parameters: {0}")]
    InvalidParams(String),
    #[error("corpus line {line}: {message}")]
    CorpusParse { line: usize, message: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("not an index file (bad magic)")]
    BadMagic,
    #[error("index format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("index checksum mismatch (file truncated or corrupt)")]
    Checksum,
    #[error("corrupt index: {0}")]
    Corrupt(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self { k1: 1.2, b: 0.75 }
    }
}

impl Bm25Params {
    pub fn validate(&self) -> Result<(), IndexError> {
        if !(self.k1.is_finite() && self.k1 >= 0.0) {
            return Err(IndexError::InvalidParams(format!("k1 = {}", self.k1)));
        }
        if !(0.0..=1.0).contains(&self.b) {
            return Err(IndexError::InvalidParams(format!("b = {}", self.b)));
        }
        Ok(())
    }
}

/// How raw BM25 scores become retrieval weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WeightNormalization {
    /// `score / Σ score`; uniform when every returned score is zero.
    #[default]
    Proportional,
    Softmax { temperature: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QueryOptions {
    pub term_budget: usize,
    pub normalization: WeightNormalization,
}

impl Default for QueryOptions {
    fn default() -> Self {
        Self {
            term_budget: DEFAULT_QUERY_TERM_BUDGET,
            normalization: WeightNormalization::Proportional,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: u64,
    pub text: String,
}

impl Document {
    pub fn new(doc_id: u64, text: impl Into<String>) -> Self {
        Self {
            doc_id,
            text: text.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Posting {
    pub doc_id: u64,
    pub tf: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct DocEntry {
    pub len: u32,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedDoc {
    pub doc_id: u64,
    pub text: String,
    pub raw_score: f64,
    pub weight: f64,
}

/// Ranked documents plus what happened to the query on the way in.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryResult {
    pub docs: Vec<RetrievedDoc>,
    pub query_terms: usize,
    pub query_truncated: bool,
}

/// Immutable BM25 index. Share it freely across query threads.
#[derive(Debug, Clone, PartialEq)]
pub struct InvertedIndex {
    params: Bm25Params,
    postings: BTreeMap<String, Vec<Posting>>,
    docs: BTreeMap<u64, DocEntry>,
    avgdl: f64,
}

pub fn idf(num_docs: u64, doc_freq: u64) -> f64 {
    let n = num_docs as f64;
    let df = doc_freq as f64;
    ((n - df + 0.5) / (df + 0.5)).ln().max(0.0)
}

/// Saturating term-frequency component; nondecreasing in `tf`.
pub fn tf_component(tf: u32, doc_len: u32, avgdl: f64, params: Bm25Params) -> f64 {
    let tf = tf as f64;
    let norm = 1.0 - params.b + params.b * doc_len as f64 / avgdl;
    tf * (params.k1 + 1.0) / (tf + params.k1 * norm)
}

impl InvertedIndex {
    pub(crate) fn from_parts(
        params: Bm25Params,
        postings: BTreeMap<String, Vec<Posting>>,
        docs: BTreeMap<u64, DocEntry>,
    ) -> Result<Self, IndexError> {
        if docs.is_empty() {
            return Err(IndexError::EmptyCorpus);
        }
        let total_len: u64 = docs.values().map(|d| d.len as u64).sum();
        let avgdl = total_len as f64 / docs.len() as f64;
        Ok(Self {
            params,
            postings,
            docs,
            avgdl,
        })
    }

    pub fn params(&self) -> Bm25Params {
        self.params
    }

    pub fn num_docs(&self) -> u64 {
        self.docs.len() as u64
    }

    pub fn avgdl(&self) -> f64 {
        self.avgdl
    }

    pub fn num_terms(&self) -> usize {
        self.postings.len()
    }

    pub fn postings(&self, term: &str) -> Option<&[Posting]> {
        self.postings.get(term).map(Vec::as_slice)
    }

    pub fn doc_len(&self, doc_id: u64) -> Option<u32> {
        self.docs.get(&doc_id).map(|d| d.len)
    }

    pub fn doc_text(&self, doc_id: u64) -> Option<&str> {
        self.docs.get(&doc_id).map(|d| d.text.as_str())
    }

    pub fn doc_ids(&self) -> impl Iterator<Item = u64> + '_ {
        self.docs.keys().copied()
    }

    pub(crate) fn terms(&self) -> &BTreeMap<String, Vec<Posting>> {
        &self.postings
    }

    pub(crate) fn docs(&self) -> &BTreeMap<u64, DocEntry> {
        &self.docs
    }

    /// Top-`k` documents under the default query options.
    pub fn query_top_k(&self, query: &str, k: usize) -> Result<Vec<RetrievedDoc>, IndexError> {
        Ok(self.query(query, k, &QueryOptions::default())?.docs)
    }

    pub fn query(
        &self,
        query: &str,
        k: usize,
        options: &QueryOptions,
    ) -> Result<QueryResult, IndexError> {
        if k == 0 {
            return Err(IndexError::ZeroK);
        }
        let mut terms = tokenize(query);
        let query_truncated = terms.len() > options.term_budget;
        terms.truncate(options.term_budget);

        let n = self.num_docs();
        let mut scores: HashMap<u64, f64> = HashMap::new();
        for term in &terms {
            let Some(list) = self.postings.get(term) else {
                continue;
            };
            let term_idf = idf(n, list.len() as u64);
            for p in list {
                let len = self.docs[&p.doc_id].len;
                *scores.entry(p.doc_id).or_insert(0.0) +=
                    term_idf * tf_component(p.tf, len, self.avgdl, self.params);
            }
        }

        let mut ranked: Vec<(u64, f64)> = scores.into_iter().collect();
        let order = |a: &(u64, f64), b: &(u64, f64)| rank_key(b.1).cmp(&rank_key(a.1)).then(a.0.cmp(&b.0));
        if ranked.len() > k {
            ranked.select_nth_unstable_by(k - 1, order);
            ranked.truncate(k);
        }
        ranked.sort_unstable_by(order);

        let weights = normalize_weights(
            &ranked.iter().map(|r| r.1).collect::<Vec<_>>(),
            options.normalization,
        );
        let docs = ranked
            .into_iter()
            .zip(weights)
            .map(|((doc_id, raw_score), weight)| RetrievedDoc {
                doc_id,
                text: self.docs[&doc_id].text.clone(),
                raw_score,
                weight,
            })
            .collect();
        Ok(QueryResult {
            docs,
            query_terms: terms.len(),
            query_truncated,
        })
    }
}

/// Scores are compared at 1e-9 resolution so that mathematically equal
/// scores summed in a different order still tie and fall back to doc id.
fn rank_key(score: f64) -> i64 {
    (score * 1e9).round() as i64
}

pub fn normalize_weights(scores: &[f64], normalization: WeightNormalization) -> Vec<f64> {
    if scores.is_empty() {
        return Vec::new();
    }
    match normalization {
        WeightNormalization::Proportional => {
            let total: f64 = scores.iter().sum();
            if total > 0.0 {
                scores.iter().map(|s| s / total).collect()
            } else {
                vec![1.0 / scores.len() as f64; scores.len()]
            }
        }
        WeightNormalization::Softmax { temperature } => {
            let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores
                .iter()
                .map(|s| ((s - max) / temperature).exp())
                .collect();
            let total: f64 = exps.iter().sum();
            exps.into_iter().map(|e| e / total).collect()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> Vec<Document> {
        vec![
            Document::new(1, "Lung cancer and breast cancer screening."),
            Document::new(2, "Drug interaction between warfarin and aspirin."),
            Document::new(3, "Cancer drug trials report a drug interaction."),
        ]
    }

    #[test]
    fn postings_match_hand_count() {
        let idx = build_index(toy(), Bm25Params::default()).unwrap();
        // "cancer": doc 1 twice, doc 3 once.
        assert_eq!(
            idx.postings("cancer").unwrap(),
            &[Posting { doc_id: 1, tf: 2 }, Posting { doc_id: 3, tf: 1 }]
        );
        assert_eq!(idx.postings("drug").unwrap(), &[
            Posting { doc_id: 2, tf: 1 },
            Posting { doc_id: 3, tf: 2 }
        ]);
        assert_eq!(idx.doc_len(1), Some(6));
        assert!((idx.avgdl() - (6.0 + 6.0 + 7.0) / 3.0).abs() < 1e-12);
    }

    #[test]
    fn single_doc_average_is_its_length() {
        let idx = build_index(vec![Document::new(9, "one two three")], Bm25Params::default()).unwrap();
        assert_eq!(idx.avgdl(), 3.0);
    }

    #[test]
    fn absent_term_gives_empty_result() {
        let idx = build_index(toy(), Bm25Params::default()).unwrap();
        assert!(idx.query_top_k("zebrafish", 5).unwrap().is_empty());
        assert!(idx.query_top_k("", 5).unwrap().is_empty());
    }

    #[test]
    fn zero_k_is_rejected() {
        let idx = build_index(toy(), Bm25Params::default()).unwrap();
        assert!(matches!(idx.query_top_k("cancer", 0), Err(IndexError::ZeroK)));
    }

    #[test]
    fn weights_are_proportional_and_sum_to_one() {
        let idx = build_index(toy(), Bm25Params::default()).unwrap();
        let res = idx.query_top_k("warfarin aspirin lung screening trials", 5).unwrap();
        assert_eq!(res.len(), 3);
        let total: f64 = res.iter().map(|d| d.raw_score).sum();
        assert!(total > 0.0);
        for d in &res {
            assert!((d.weight - d.raw_score / total).abs() < 1e-12);
        }
        assert!((res.iter().map(|d| d.weight).sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(res.windows(2).all(|w| w[0].raw_score >= w[1].raw_score));

        // Every term here sits in 2 of 3 docs, so idf clamps to 0 everywhere.
        let flat = idx.query_top_k("drug interaction cancer", 5).unwrap();
        assert!(flat.iter().all(|d| d.raw_score == 0.0 && (d.weight - 1.0 / 3.0).abs() < 1e-15));
        assert_eq!(flat.iter().map(|d| d.doc_id).collect::<Vec<_>>(), vec![1, 2, 3]);
    }

    #[test]
    fn common_terms_floor_to_zero_and_weights_stay_uniform() {
        // "and" appears in every document: idf floors at 0.
        let docs = vec![
            Document::new(1, "a and b"),
            Document::new(2, "c and d"),
        ];
        let idx = build_index(docs, Bm25Params::default()).unwrap();
        let res = idx.query_top_k("and", 5).unwrap();
        assert_eq!(res.iter().map(|d| d.doc_id).collect::<Vec<_>>(), vec![1, 2]);
        assert!(res.iter().all(|d| d.raw_score == 0.0 && d.weight == 0.5));
    }

    #[test]
    fn softmax_weights_sum_to_one() {
        let w = normalize_weights(&[3.0, 1.0, 0.5], WeightNormalization::Softmax { temperature: 1.0 });
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(w[0] > w[1] && w[1] > w[2]);
    }

    #[test]
    fn query_budget_truncates() {
        let idx = build_index(toy(), Bm25Params::default()).unwrap();
        let opts = QueryOptions {
            term_budget: 1,
            ..QueryOptions::default()
        };
        let res = idx.query("warfarin cancer", 5, &opts).unwrap();
        assert!(res.query_truncated);
        assert_eq!(res.query_terms, 1);
        assert_eq!(res.docs.len(), 1);
        assert_eq!(res.docs[0].doc_id, 2);
    }

    #[test]
    fn tf_component_is_monotone() {
        let p = Bm25Params::default();
        let mut prev = 0.0;
        for tf in 0..200 {
            let c = tf_component(tf, 40, 25.0, p);
            assert!(c >= prev);
            prev = c;
        }
        assert!(prev < p.k1 + 1.0);
    }

    #[test]
    fn invalid_params() {
        assert!(Bm25Params { k1: -1.0, b: 0.75 }.validate().is_err());
        assert!(Bm25Params { k1: 1.2, b: 1.5 }.validate().is_err());
        assert!(Bm25Params::default().validate().is_ok());
    }
}
