//! Plain bag-of-words baselines: BM25 ranking over an inverted index and
//! TF-IDF cosine candidate generation between two corpora.
//!
//! Tokens are lowercase alphanumeric runs. No stemming, no stop words.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::sort_by_score;
use crate::model::{Candidate, CandidateKey, CandidateList, DocumentRecord, RankedResult};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RetrievalError {
    #[error("cannot index an empty corpus")]
    EmptyCorpus,
    #[error("no fields selected for indexing")]
    NoFields,
    #[error("document '{0}' has no title")]
    MissingTitle(String),
    #[error("k must be at least 1")]
    ZeroK,
}

pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

fn document_tokens(doc: &DocumentRecord, fields: &[String]) -> Vec<String> {
    fields
        .iter()
        .filter_map(|f| doc.fields.get(f))
        .flatten()
        .flat_map(|v| tokenize(v))
        .collect()
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

/// Immutable once built; safe to query from many threads.
#[derive(Debug, Clone)]
pub struct InvertedIndex {
    /// term -> (internal doc id, term frequency), sorted by doc id.
    postings: HashMap<String, Vec<(u32, u32)>>,
    doc_lengths: Vec<u32>,
    avg_doc_length: f64,
    doc_ids: Vec<String>,
    fields: Vec<String>,
}

impl InvertedIndex {
    pub fn build(corpus: &[DocumentRecord], fields: &[&str]) -> Result<Self, RetrievalError> {
        if fields.is_empty() {
            return Err(RetrievalError::NoFields);
        }
        if corpus.is_empty() {
            return Err(RetrievalError::EmptyCorpus);
        }
        let fields: Vec<String> = fields.iter().map(|f| (*f).to_owned()).collect();
        let mut postings: HashMap<String, Vec<(u32, u32)>> = HashMap::new();
        let mut doc_lengths = Vec::with_capacity(corpus.len());
        let mut doc_ids = Vec::with_capacity(corpus.len());
        for (internal, doc) in corpus.iter().enumerate() {
            let internal = u32::try_from(internal).expect("corpus larger than u32::MAX");
            let tokens = document_tokens(doc, &fields);
            doc_lengths.push(tokens.len() as u32);
            doc_ids.push(doc.doc_id.clone());
            let mut tf: HashMap<String, u32> = HashMap::new();
            for t in tokens {
                *tf.entry(t).or_default() += 1;
            }
            for (term, count) in tf {
                postings.entry(term).or_default().push((internal, count));
            }
        }
        let avg_doc_length =
            doc_lengths.iter().map(|&l| f64::from(l)).sum::<f64>() / doc_lengths.len() as f64;
        Ok(Self {
            postings,
            doc_lengths,
            avg_doc_length,
            doc_ids,
            fields,
        })
    }

    pub fn doc_count(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn avg_doc_length(&self) -> f64 {
        self.avg_doc_length
    }

    pub fn doc_length(&self, doc_id: &str) -> Option<u32> {
        self.doc_ids
            .iter()
            .position(|d| d == doc_id)
            .map(|i| self.doc_lengths[i])
    }

    pub fn fields(&self) -> &[String] {
        &self.fields
    }

    /// (doc id, term frequency) pairs for `term`.
    pub fn postings(&self, term: &str) -> Vec<(&str, u32)> {
        self.postings
            .get(term)
            .map(|list| {
                list.iter()
                    .map(|&(d, tf)| (self.doc_ids[d as usize].as_str(), tf))
                    .collect()
            })
            .unwrap_or_default()
    }

    pub fn document_frequency(&self, term: &str) -> usize {
        self.postings.get(term).map_or(0, Vec::len)
    }

    /// Every document matching at least one query term, best first, ties by
    /// ascending doc id. Repeated query terms count once.
    pub fn bm25_search(&self, query: &str, params: Bm25Params) -> Vec<RankedResult> {
        let terms: BTreeSet<String> = tokenize(query).into_iter().collect();
        let n = self.doc_count() as f64;
        let mut scores: HashMap<u32, f64> = HashMap::new();
        for term in &terms {
            let Some(list) = self.postings.get(term) else {
                continue;
            };
            let df = list.len() as f64;
            let idf = (1.0 + (n - df + 0.5) / (df + 0.5)).ln();
            for &(doc, tf) in list {
                let tf = f64::from(tf);
                let len = f64::from(self.doc_lengths[doc as usize]);
                let norm = params.k1 * (1.0 - params.b + params.b * len / self.avg_doc_length);
                *scores.entry(doc).or_default() += idf * tf * (params.k1 + 1.0) / (tf + norm);
            }
        }
        let mut hits: Vec<(u32, f64)> = scores.into_iter().collect();
        hits.sort_by(|a, b| {
            b.1.total_cmp(&a.1)
                .then_with(|| self.doc_ids[a.0 as usize].cmp(&self.doc_ids[b.0 as usize]))
        });
        hits.into_iter()
            .enumerate()
            .map(|(i, (doc, score))| RankedResult {
                doc_id: self.doc_ids[doc as usize].clone(),
                rank: i + 1,
                score,
            })
            .collect()
    }
}

pub fn build_index(corpus: &[DocumentRecord], fields: &[&str]) -> Result<InvertedIndex, RetrievalError> {
    InvertedIndex::build(corpus, fields)
}

/// Top `k` BM25 results for `query`; empty when the query has no tokens.
pub fn bm25_rank(
    index: &InvertedIndex,
    query: &str,
    k: usize,
    params: Bm25Params,
) -> Result<Vec<RankedResult>, RetrievalError> {
    if k == 0 {
        return Err(RetrievalError::ZeroK);
    }
    let mut results = index.bm25_search(query, params);
    results.truncate(k);
    Ok(results)
}

/// Title of a publication: `title`, falling back to `title_en`, then the
/// literature schema's `TITLE`.
pub fn publication_title(doc: &DocumentRecord) -> Option<String> {
    ["title", "title_en", "TITLE"]
        .iter()
        .find_map(|f| doc.field_text(f))
        .filter(|t| !t.trim().is_empty())
}

/// Ranks research datasets for a publication by querying the dataset index
/// with the publication title.
pub fn recommend_for_publication(
    index: &InvertedIndex,
    publication: &DocumentRecord,
    k: usize,
    params: Bm25Params,
) -> Result<Vec<RankedResult>, RetrievalError> {
    let title = publication_title(publication)
        .ok_or_else(|| RetrievalError::MissingTitle(publication.doc_id.clone()))?;
    bm25_rank(index, &title, k, params)
}

/// Sparse unit-length vector, sorted by term id.
type SparseVec = Vec<(u32, f64)>;

fn cosine(a: &SparseVec, b: &SparseVec) -> f64 {
    let (mut i, mut j, mut dot) = (0, 0, 0.0);
    while i < a.len() && j < b.len() {
        match a[i].0.cmp(&b[j].0) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                dot += a[i].1 * b[j].1;
                i += 1;
                j += 1;
            }
        }
    }
    dot.clamp(0.0, 1.0)
}

/// For each source document, the `top_k` most similar targets by cosine over
/// raw-count tf times smoothed idf, `ln((1 + N) / (1 + df)) + 1`, with `N`
/// and `df` taken over both corpora together. Sources whose vector is zero get
/// an empty list; zero-similarity targets are still listed after the others.
pub fn tfidf_candidates(
    sources: &[DocumentRecord],
    targets: &[DocumentRecord],
    fields: &[&str],
    top_k: usize,
) -> Result<BTreeMap<String, CandidateList>, RetrievalError> {
    if top_k == 0 {
        return Err(RetrievalError::ZeroK);
    }
    if sources.is_empty() || targets.is_empty() {
        return Err(RetrievalError::EmptyCorpus);
    }
    if fields.is_empty() {
        return Err(RetrievalError::NoFields);
    }
    let fields: Vec<String> = fields.iter().map(|f| (*f).to_owned()).collect();

    let mut vocab: HashMap<String, u32> = HashMap::new();
    let mut counts_of = |doc: &DocumentRecord| -> BTreeMap<u32, f64> {
        let mut counts = BTreeMap::new();
        for token in document_tokens(doc, &fields) {
            let next = vocab.len() as u32;
            let id = *vocab.entry(token).or_insert(next);
            *counts.entry(id).or_insert(0.0) += 1.0;
        }
        counts
    };
    let source_counts: Vec<_> = sources.iter().map(&mut counts_of).collect();
    let target_counts: Vec<_> = targets.iter().map(&mut counts_of).collect();

    let mut df: HashMap<u32, f64> = HashMap::new();
    for counts in source_counts.iter().chain(&target_counts) {
        for term in counts.keys() {
            *df.entry(*term).or_default() += 1.0;
        }
    }
    let n = (sources.len() + targets.len()) as f64;
    let weigh = |counts: &BTreeMap<u32, f64>| -> SparseVec {
        let raw: SparseVec = counts
            .iter()
            .map(|(t, tf)| (*t, tf * (((1.0 + n) / (1.0 + df[t])).ln() + 1.0)))
            .collect();
        let norm = raw.iter().map(|(_, w)| w * w).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Vec::new();
        }
        raw.into_iter().map(|(t, w)| (t, w / norm)).collect()
    };
    let source_vecs: Vec<SparseVec> = source_counts.iter().map(weigh).collect();
    let target_vecs: Vec<SparseVec> = target_counts.iter().map(weigh).collect();

    let mut out = BTreeMap::new();
    for (source, vec) in sources.iter().zip(&source_vecs) {
        let mut candidates = Vec::new();
        if !vec.is_empty() {
            candidates = targets
                .iter()
                .zip(&target_vecs)
                .map(|(t, tv)| Candidate {
                    doc_id: t.doc_id.clone(),
                    score: Some(cosine(vec, tv)),
                })
                .collect();
            sort_by_score(&mut candidates);
            candidates.truncate(top_k);
        }
        out.insert(
            source.doc_id.clone(),
            CandidateList {
                key: CandidateKey::Item(source.doc_id.clone()),
                qstr: None,
                candidates,
            },
        );
    }
    Ok(out)
}
