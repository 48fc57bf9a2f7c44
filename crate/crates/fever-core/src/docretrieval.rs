//! Candidate document retrieval from a local index: exact normalized-title
//! matches of claim phrases first, TF-IDF cosine over titles and first
//! sentences to fill the remaining slots.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{detokenize_title, Corpus};
use crate::tokenizer::tokenize;

#[derive(Debug, Error)]
pub enum DocRetrievalError {
    #[error("cannot retrieve from an empty index")]
    EmptyIndex,
    #[error("index file error: {0}")]
    Format(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Lowercased, detokenized, whitespace-collapsed form shared by titles and
/// claim phrases; applying it twice is a no-op.
pub fn normalize_title(s: &str) -> String {
    detokenize_title(s).to_lowercase()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TitleIndex {
    /// normalized title -> page ids (several pages may normalize alike)
    titles: BTreeMap<String, Vec<String>>,
    page_ids: Vec<String>,
    /// token -> (doc position, ln(1+tf)) postings over title + first sentence
    postings: BTreeMap<String, Vec<(u32, f64)>>,
    /// token -> document frequency
    doc_freq: BTreeMap<String, u32>,
    doc_norms: Vec<f64>,
}

impl TitleIndex {
    pub fn build(corpus: &Corpus) -> TitleIndex {
        let mut titles: BTreeMap<String, Vec<String>> = BTreeMap::new();
        let mut page_ids = Vec::new();
        let mut per_doc_counts: Vec<HashMap<String, u32>> = Vec::new();
        for page in corpus.pages() {
            titles
                .entry(normalize_title(&page.page_id))
                .or_default()
                .push(page.page_id.clone());
            let mut text = detokenize_title(&page.page_id);
            if let Some((_, first)) = page.sentences.iter().find(|(_, s)| !s.is_empty()) {
                text.push(' ');
                text.push_str(first);
            }
            let mut counts = HashMap::new();
            for tok in tokenize(&text) {
                *counts.entry(tok).or_insert(0) += 1;
            }
            page_ids.push(page.page_id.clone());
            per_doc_counts.push(counts);
        }

        let mut postings: BTreeMap<String, Vec<(u32, f64)>> = BTreeMap::new();
        let mut doc_freq: BTreeMap<String, u32> = BTreeMap::new();
        for (doc, counts) in per_doc_counts.iter().enumerate() {
            for (tok, &tf) in counts {
                postings
                    .entry(tok.clone())
                    .or_default()
                    .push((doc as u32, (1.0 + tf as f64).ln()));
                *doc_freq.entry(tok.clone()).or_insert(0) += 1;
            }
        }
        for list in postings.values_mut() {
            list.sort_by_key(|&(doc, _)| doc);
        }

        let n_docs = page_ids.len() as f64;
        let mut doc_norms = vec![0.0; page_ids.len()];
        for (tok, list) in &postings {
            let idf = (n_docs / doc_freq[tok] as f64).ln();
            for &(doc, tf_w) in list {
                let w = tf_w * idf;
                doc_norms[doc as usize] += w * w;
            }
        }
        for n in &mut doc_norms {
            *n = n.sqrt();
        }

        TitleIndex {
            titles,
            page_ids,
            postings,
            doc_freq,
            doc_norms,
        }
    }

    pub fn num_docs(&self) -> usize {
        self.page_ids.len()
    }

    pub fn lookup_title(&self, phrase: &str) -> &[String] {
        self.titles
            .get(&normalize_title(phrase))
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    fn idf(&self, token: &str) -> f64 {
        match self.doc_freq.get(token) {
            Some(&df) => (self.page_ids.len() as f64 / df as f64).ln(),
            None => 0.0,
        }
    }

    /// Cosine similarity of the claim against every overlapping document.
    fn tfidf_scores(&self, claim_text: &str) -> Vec<(usize, f64)> {
        let mut q_counts: HashMap<String, u32> = HashMap::new();
        for tok in tokenize(claim_text) {
            *q_counts.entry(tok).or_insert(0) += 1;
        }
        let mut q_norm = 0.0;
        let mut scores: HashMap<usize, f64> = HashMap::new();
        for (tok, &tf) in &q_counts {
            let idf = self.idf(tok);
            if idf <= 0.0 {
                continue;
            }
            let qw = (1.0 + tf as f64).ln() * idf;
            q_norm += qw * qw;
            if let Some(list) = self.postings.get(tok) {
                for &(doc, tf_w) in list {
                    *scores.entry(doc as usize).or_insert(0.0) += qw * tf_w * idf;
                }
            }
        }
        if q_norm == 0.0 {
            return Vec::new();
        }
        let q_norm = q_norm.sqrt();
        let mut out: Vec<(usize, f64)> = scores
            .into_iter()
            .filter(|&(_, s)| s > 0.0)
            .map(|(doc, s)| (doc, s / (q_norm * self.doc_norms[doc].max(1e-12))))
            .collect();
        out.sort_by(|a, b| {
            b.1.total_cmp(&a.1)
                .then_with(|| self.page_ids[a.0].cmp(&self.page_ids[b.0]))
        });
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), DocRetrievalError> {
        let json =
            serde_json::to_string(self).map_err(|e| DocRetrievalError::Format(e.to_string()))?;
        fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<TitleIndex, DocRetrievalError> {
        let content = fs::read_to_string(path)?;
        serde_json::from_str(&content).map_err(|e| DocRetrievalError::Format(e.to_string()))
    }
}

const FUNCTION_WORDS: [&str; 3] = ["of", "the", "and"];
const VERB_HINTS: [&str; 24] = [
    "is", "are", "was", "were", "has", "have", "had", "does", "did", "do", "can", "could", "will",
    "would", "shall", "should", "may", "might", "must", "be", "been", "being", "works", "worked",
];

fn strip_punct(word: &str) -> &str {
    word.trim_matches(|c: char| !c.is_alphanumeric())
}

fn is_capitalized(word: &str) -> bool {
    strip_punct(word)
        .chars()
        .next()
        .map(|c| c.is_uppercase())
        .unwrap_or(false)
}

/// Maximal runs of capitalized tokens (interior of/the/and allowed) plus the
/// claim prefix up to the first verb-like token when it names something
/// capitalized; original casing kept, duplicates removed.
pub fn extract_phrases(claim_text: &str) -> Vec<String> {
    let words: Vec<&str> = claim_text.split_whitespace().collect();
    let mut phrases: Vec<String> = Vec::new();

    let mut i = 0;
    while i < words.len() {
        if !is_capitalized(words[i]) {
            i += 1;
            continue;
        }
        let mut run: Vec<&str> = vec![strip_punct(words[i])];
        let mut j = i + 1;
        let mut pending: Vec<&str> = Vec::new();
        while j < words.len() {
            let core = strip_punct(words[j]);
            if is_capitalized(words[j]) {
                run.append(&mut pending);
                run.push(core);
                j += 1;
            } else if FUNCTION_WORDS.contains(&core) {
                pending.push(core);
                j += 1;
            } else {
                break;
            }
        }
        let phrase = run.join(" ");
        if !phrase.is_empty() && !phrases.contains(&phrase) {
            phrases.push(phrase);
        }
        i = j;
    }

    // Prefix up to the first verb-like token, when it contains a name.
    let cut = words
        .iter()
        .position(|w| {
            let core = strip_punct(w);
            core.chars().next().is_some_and(|c| c.is_lowercase())
                && VERB_HINTS.contains(&core.to_lowercase().as_str())
        })
        .unwrap_or(0);
    if cut > 0 && words[..cut].iter().any(|w| is_capitalized(w)) {
        let prefix = words[..cut]
            .iter()
            .map(|w| strip_punct(w))
            .collect::<Vec<_>>()
            .join(" ");
        if !prefix.is_empty() && !phrases.contains(&prefix) {
            phrases.push(prefix);
        }
    }

    phrases
}

/// Ranked candidate documents for a claim: exact title matches of extracted
/// phrases (longer phrase first, ties by page id), then TF-IDF fills.
pub fn retrieve_docs(
    index: &TitleIndex,
    claim_text: &str,
    k: usize,
) -> Result<Vec<String>, DocRetrievalError> {
    assert!(k >= 1, "k must be at least 1");
    if index.num_docs() == 0 {
        return Err(DocRetrievalError::EmptyIndex);
    }

    // Best (longest) matching phrase per page.
    let mut exact: HashMap<String, usize> = HashMap::new();
    for phrase in extract_phrases(claim_text) {
        let tokens = phrase.split_whitespace().count();
        for page in index.lookup_title(&phrase) {
            let best = exact.entry(page.clone()).or_insert(0);
            if tokens > *best {
                *best = tokens;
            }
        }
    }
    let mut ranked: Vec<(usize, String)> = exact.into_iter().map(|(p, l)| (l, p)).collect();
    ranked.sort_by(|a, b| b.0.cmp(&a.0).then_with(|| a.1.cmp(&b.1)));

    let mut out: Vec<String> = ranked.into_iter().map(|(_, p)| p).collect();
    let mut seen: HashSet<String> = out.iter().cloned().collect();
    if out.len() < k {
        for (doc, _) in index.tfidf_scores(claim_text) {
            if out.len() >= k {
                break;
            }
            let page = &index.page_ids[doc];
            if seen.insert(page.clone()) {
                out.push(page.clone());
            }
        }
    }
    out.truncate(k);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::WikiPage;

    fn page(id: &str, first: &str) -> WikiPage {
        WikiPage::new(id.to_string(), vec![(0, first.to_string())]).unwrap()
    }

    fn sample_corpus() -> Corpus {
        Corpus::new(vec![
            page("Roman_Atwood", "Roman Atwood is a content creator and vlogger ."),
            page("Furia_-LRB-film-RRB-", "Furia is a 1999 French film ."),
            page("Anna_Politkovskaya", "Anna Politkovskaya was a journalist ."),
            page("Kushan_Empire", "The Kushan Empire was a syncretic empire ."),
        ])
    }

    #[test]
    fn phrases_from_capitalized_runs() {
        assert_eq!(
            extract_phrases("Roman Atwood is a content creator."),
            vec!["Roman Atwood"]
        );
        assert_eq!(
            extract_phrases("Furia is adapted from a short story by Anna Politkovskaya."),
            vec!["Furia", "Anna Politkovskaya"]
        );
        assert!(extract_phrases("the sky is blue").is_empty());
    }

    #[test]
    fn phrases_allow_interior_function_words() {
        let got = extract_phrases("The Lord of the Rings was written by Tolkien.");
        assert!(got.contains(&"The Lord of the Rings".to_string()), "{got:?}");
    }

    #[test]
    fn exact_title_match_ranks_first() {
        let index = TitleIndex::build(&sample_corpus());
        let docs = retrieve_docs(&index, "Roman Atwood is a content creator.", 3).unwrap();
        assert_eq!(docs[0], "Roman_Atwood");
    }

    #[test]
    fn escaped_title_matches_plain_phrase() {
        let index = TitleIndex::build(&sample_corpus());
        let docs = retrieve_docs(&index, "Furia ( film ) is from 1999.", 2).unwrap();
        assert_eq!(docs[0], "Furia_-LRB-film-RRB-");
    }

    #[test]
    fn no_overlap_gives_empty_result() {
        let index = TitleIndex::build(&sample_corpus());
        let docs = retrieve_docs(&index, "zzz qqq xxx", 5).unwrap();
        assert!(docs.is_empty());
    }

    #[test]
    fn k_one_truncates_to_exact_match() {
        let index = TitleIndex::build(&sample_corpus());
        let docs = retrieve_docs(&index, "Roman Atwood is a content creator.", 1).unwrap();
        assert_eq!(docs, vec!["Roman_Atwood".to_string()]);
    }

    #[test]
    fn results_are_deterministic_and_duplicate_free() {
        let index = TitleIndex::build(&sample_corpus());
        let a = retrieve_docs(&index, "The journalist Anna Politkovskaya wrote about film .", 4)
            .unwrap();
        let b = retrieve_docs(&index, "The journalist Anna Politkovskaya wrote about film .", 4)
            .unwrap();
        assert_eq!(a, b);
        let unique: HashSet<&String> = a.iter().collect();
        assert_eq!(unique.len(), a.len());
    }

    #[test]
    fn empty_index_is_an_error() {
        let index = TitleIndex::build(&Corpus::new(vec![]));
        assert!(matches!(
            retrieve_docs(&index, "anything", 3),
            Err(DocRetrievalError::EmptyIndex)
        ));
    }

    #[test]
    fn normalization_is_idempotent() {
        for s in ["Roman_Atwood", "Furia_-LRB-film-RRB-", "plain title"] {
            let once = normalize_title(s);
            assert_eq!(normalize_title(&once), once);
        }
    }

    #[test]
    fn index_file_roundtrip() {
        let index = TitleIndex::build(&sample_corpus());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("index.json");
        index.save(&path).unwrap();
        let loaded = TitleIndex::load(&path).unwrap();
        let a = retrieve_docs(&index, "Roman Atwood makes videos .", 4).unwrap();
        let b = retrieve_docs(&loaded, "Roman Atwood makes videos .", 4).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn tfidf_fills_after_exact_matches() {
        let index = TitleIndex::build(&sample_corpus());
        // "journalist" only overlaps the Politkovskaya page; the exact match
        // for Furia must still outrank it.
        let docs = retrieve_docs(&index, "Furia was reviewed by a journalist .", 3).unwrap();
        assert_eq!(docs[0], "Furia_-LRB-film-RRB-");
        assert!(docs.contains(&"Anna_Politkovskaya".to_string()));
    }
}
