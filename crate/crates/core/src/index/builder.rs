use std::collections::{BTreeMap, HashSet};

use super::{tokenize, Bm25Params, DocEntry, Document, IndexError, InvertedIndex, Posting};

/// Documents per in-memory shard before it is sealed.
pub const DEFAULT_SHARD_DOCS: usize = 100_000;

#[derive(Debug, Default)]
struct Shard {
    postings: BTreeMap<String, Vec<Posting>>,
    docs: BTreeMap<u64, DocEntry>,
}

impl Shard {
    fn add(&mut self, doc: Document) {
        let terms = tokenize(&doc.text);
        let mut counts: BTreeMap<String, u32> = BTreeMap::new();
        for t in &terms {
            *counts.entry(t.clone()).or_insert(0) += 1;
        }
        for (term, tf) in counts {
            self.postings.entry(term).or_default().push(Posting {
                doc_id: doc.doc_id,
                tf,
            });
        }
        self.docs.insert(
            doc.doc_id,
            DocEntry {
                len: terms.len() as u32,
                text: doc.text,
            },
        );
    }

    fn seal(mut self) -> Self {
        for list in self.postings.values_mut() {
            list.sort_unstable_by_key(|p| p.doc_id);
        }
        self
    }
}

/// Streaming index construction. Documents accumulate in a bounded shard;
/// full shards are sealed and all shards are merged by [`IndexBuilder::finish`].
#[derive(Debug)]
pub struct IndexBuilder {
    params: Bm25Params,
    shard_docs: usize,
    current: Shard,
    sealed: Vec<Shard>,
    seen: HashSet<u64>,
}

impl IndexBuilder {
    pub fn new(params: Bm25Params) -> Result<Self, IndexError> {
        Self::with_shard_docs(params, DEFAULT_SHARD_DOCS)
    }

    pub fn with_shard_docs(params: Bm25Params, shard_docs: usize) -> Result<Self, IndexError> {
        params.validate()?;
        Ok(Self {
            params,
            shard_docs: shard_docs.max(1),
            current: Shard::default(),
            sealed: Vec::new(),
            seen: HashSet::new(),
        })
    }

    pub fn add(&mut self, doc: Document) -> Result<(), IndexError> {
        if doc.text.trim().is_empty() {
            return Err(IndexError::EmptyDocument(doc.doc_id));
        }
        if !self.seen.insert(doc.doc_id) {
            return Err(IndexError::DuplicateDocId(doc.doc_id));
        }
        self.current.add(doc);
        if self.current.docs.len() >= self.shard_docs {
            let full = std::mem::take(&mut self.current);
            self.sealed.push(full.seal());
        }
        Ok(())
    }

    pub fn extend<I>(&mut self, docs: I) -> Result<(), IndexError>
    where
        I: IntoIterator<Item = Result<Document, IndexError>>,
    {
        for doc in docs {
            self.add(doc?)?;
        }
        Ok(())
    }

    pub fn num_docs(&self) -> usize {
        self.seen.len()
    }

    pub fn finish(mut self) -> Result<InvertedIndex, IndexError> {
        if !self.current.docs.is_empty() {
            let last = std::mem::take(&mut self.current);
            self.sealed.push(last.seal());
        }
        let merged = merge_shards(self.sealed);
        InvertedIndex::from_parts(self.params, merged.postings, merged.docs)
    }
}

fn merge_shards(shards: Vec<Shard>) -> Shard {
    // Pairwise merges run on scoped threads; each level halves the shard count.
    let mut level = shards;
    while level.len() > 1 {
        let mut pairs = Vec::new();
        let mut iter = level.into_iter();
        while let Some(a) = iter.next() {
            pairs.push((a, iter.next()));
        }
        level = std::thread::scope(|scope| {
            let handles: Vec<_> = pairs
                .into_iter()
                .map(|(a, b)| {
                    scope.spawn(move || match b {
                        Some(b) => merge_two(a, b),
                        None => a,
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("shard merge panicked"))
                .collect()
        });
    }
    level.pop().unwrap_or_default()
}

fn merge_two(mut a: Shard, b: Shard) -> Shard {
    a.docs.extend(b.docs);
    for (term, list) in b.postings {
        let dst = a.postings.entry(term).or_default();
        let left = std::mem::take(dst);
        *dst = merge_sorted(left, list);
    }
    a
}

fn merge_sorted(a: Vec<Posting>, b: Vec<Posting>) -> Vec<Posting> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        if a[i].doc_id <= b[j].doc_id {
            out.push(a[i]);
            i += 1;
        } else {
            out.push(b[j]);
            j += 1;
        }
    }
    out.extend_from_slice(&a[i..]);
    out.extend_from_slice(&b[j..]);
    out
}

/// Builds an index from an in-memory document collection.
pub fn build_index<I>(docs: I, params: Bm25Params) -> Result<InvertedIndex, IndexError>
where
    I: IntoIterator<Item = Document>,
{
    let mut builder = IndexBuilder::new(params)?;
    for doc in docs {
        builder.add(doc)?;
    }
    builder.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus(n: u64) -> Vec<Document> {
        (0..n)
            .map(|i| {
                Document::new(
                    i * 7 % 101,
                    format!("term{} common term{} word{}", i % 5, i % 3, i),
                )
            })
            .collect()
    }

    #[test]
    fn sharded_build_equals_single_shard() {
        let one = build_index(corpus(40), Bm25Params::default()).unwrap();
        for shard in [1, 3, 7, 64] {
            let mut b = IndexBuilder::with_shard_docs(Bm25Params::default(), shard).unwrap();
            for d in corpus(40) {
                b.add(d).unwrap();
            }
            assert_eq!(b.finish().unwrap(), one, "shard size {shard}");
        }
    }

    #[test]
    fn permutation_yields_identical_index() {
        let mut docs = corpus(30);
        let a = build_index(docs.clone(), Bm25Params::default()).unwrap();
        docs.reverse();
        docs.swap(3, 17);
        let b = build_index(docs, Bm25Params::default()).unwrap();
        assert_eq!(a, b);
        assert_eq!(
            a.query_top_k("term1 common", 10).unwrap(),
            b.query_top_k("term1 common", 10).unwrap()
        );
    }

    #[test]
    fn invariants_hold() {
        let idx = build_index(corpus(50), Bm25Params::default()).unwrap();
        for list in idx.terms().values() {
            assert!(list.windows(2).all(|w| w[0].doc_id < w[1].doc_id));
            assert!(list.iter().all(|p| idx.doc_len(p.doc_id).is_some()));
        }
        let mean = idx.docs().values().map(|d| d.len as f64).sum::<f64>() / idx.num_docs() as f64;
        assert!((idx.avgdl() - mean).abs() <= 1e-9 * mean);
    }

    #[test]
    fn duplicate_id_rejected() {
        let docs = vec![Document::new(1, "a"), Document::new(1, "b")];
        assert!(matches!(
            build_index(docs, Bm25Params::default()),
            Err(IndexError::DuplicateDocId(1))
        ));
    }

    #[test]
    fn empty_corpus_rejected() {
        assert!(matches!(
            build_index(Vec::new(), Bm25Params::default()),
            Err(IndexError::EmptyCorpus)
        ));
    }

    #[test]
    fn empty_text_rejected() {
        assert!(matches!(
            build_index(vec![Document::new(4, "  ")], Bm25Params::default()),
            Err(IndexError::EmptyDocument(4))
        ));
    }
}
