//! Sentence (evidence) retrieval: candidate generation over retrieved
//! documents, pointwise and pairwise training objectives, hard negative
//! mining, and ranked top-5 selection with optional score thresholding.

mod sampler;
mod train;

pub use sampler::{hnm_select_pairwise, hnm_select_pointwise, sample_random_negatives};
pub use train::{encode_examples, train_retriever, RetrieverTrainConfig, TrainLog, TrainLogEntry};

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::corpus::{prepend_title, Candidate, Claim, Corpus};
use crate::encoder::{forward, softmax, EncoderError, ModelParams};
use crate::tokenizer::{encode_pair, Vocabulary};

/// Class index of "is evidence" under the two-class pointwise head.
pub const EVIDENCE_CLASS: usize = 1;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("no positive candidates to train on")]
    NoPositives,
    #[error("candidate for claim {0} is missing its evidence label")]
    MissingLabel(i64),
    #[error("claim {0} has no text available")]
    MissingClaim(i64),
    #[error("encoder error: {0}")]
    Encoder(#[from] EncoderError),
    #[error("predictions file error at line {line}: {msg}")]
    Predictions { line: usize, msg: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Which training objective drives the retriever.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossMode {
    Pointwise,
    Ranknet,
    Hinge,
}

impl LossMode {
    pub fn is_pairwise(&self) -> bool {
        matches!(self, LossMode::Ranknet | LossMode::Hinge)
    }

    /// Head width: two-class softmax for pointwise, scalar score otherwise.
    pub fn num_classes(&self) -> usize {
        if self.is_pairwise() {
            1
        } else {
            2
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplingStrategy {
    Random,
    Hnm,
}

/// Mean pointwise cross entropy `-sum_i y_i log p_i` over a batch of
/// distributions, probabilities clamped at 1e-12.
pub fn pointwise_loss(probs: &[Vec<f64>], one_hot: &[Vec<f64>]) -> f64 {
    assert_eq!(probs.len(), one_hot.len());
    assert!(!probs.is_empty());
    let mut total = 0.0;
    for (p, y) in probs.iter().zip(one_hot) {
        assert_eq!(p.len(), y.len());
        for (pi, yi) in p.iter().zip(y) {
            if *yi != 0.0 {
                total -= yi * pi.max(1e-12).ln();
            }
        }
    }
    total / probs.len() as f64
}

/// `-log sigmoid(o_pos - o_neg)`, computed as `softplus(-(o_pos - o_neg))`.
pub fn ranknet_loss(o_pos: f64, o_neg: f64) -> f64 {
    let delta = o_pos - o_neg;
    if -delta > 0.0 {
        -delta + delta.exp().ln_1p()
    } else {
        (-delta).exp().ln_1p()
    }
}

/// Margin loss `max(0, 1 + o_neg - o_pos)`.
pub fn hinge_loss(o_pos: f64, o_neg: f64) -> f64 {
    (1.0 + o_neg - o_pos).max(0.0)
}

/// One candidate per non-empty sentence of each retrieved page, title
/// prepended; evidence labels come from the gold groups when the claim has
/// them (a sentence is positive iff it appears in any group).
pub fn gen_candidates(corpus: &Corpus, claim: &Claim, docs: &[String]) -> Vec<Candidate> {
    let labels_available = claim.label != crate::corpus::ClaimLabel::Unknown;
    let mut out = Vec::new();
    for page_id in docs {
        let Some(page) = corpus.page(page_id) else {
            continue;
        };
        for (idx, text) in &page.sentences {
            if text.is_empty() {
                continue;
            }
            let is_evidence = labels_available.then(|| {
                claim
                    .evidence_groups
                    .iter()
                    .any(|g| g.contains(&(page_id.clone(), *idx)))
            });
            out.push(Candidate {
                claim_id: claim.claim_id,
                page_id: page_id.clone(),
                sentence_index: *idx,
                text: prepend_title(page_id, text),
                is_evidence,
                score: None,
            });
        }
    }
    out
}

/// Model score used for ranking: evidence-class probability under the
/// pointwise head, raw scalar output under the pairwise heads.
pub fn score_candidates(
    params: &ModelParams,
    vocab: &Vocabulary,
    claim_text: &str,
    candidates: &mut [Candidate],
    batch_size: usize,
) -> Result<(), RetrievalError> {
    let max_len = params.config.max_len;
    let pointwise = params.config.num_classes == 2;
    for chunk in candidates.chunks_mut(batch_size.max(1)) {
        let encoded: Vec<_> = chunk
            .iter()
            .map(|c| encode_pair(vocab, &c.text, claim_text, max_len))
            .collect();
        let (logits, _) = forward(params, &encoded, false, 0)?;
        for (cand, row) in chunk.iter_mut().zip(&logits) {
            let score = if pointwise {
                softmax(row)[EVIDENCE_CLASS]
            } else {
                row[0]
            };
            cand.score = Some(score);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalOutput {
    pub claim_id: i64,
    /// Every scored candidate, best first; kept for threshold sweeps.
    pub ranked: Vec<Candidate>,
    /// Up to five (page, sentence, score) kept after thresholding.
    pub top5: Vec<(String, usize, f64)>,
    pub threshold_applied: Option<f64>,
}

/// Threshold-filter then truncate a ranked (page, sentence, score) list.
pub fn select_top(
    ranked: &[(String, usize, f64)],
    threshold: Option<f64>,
    limit: usize,
) -> Vec<(String, usize, f64)> {
    ranked
        .iter()
        .filter(|(_, _, s)| threshold.map(|t| *s >= t).unwrap_or(true))
        .take(limit)
        .cloned()
        .collect()
}

/// Sort scored candidates (score descending, ties by page then sentence) and
/// keep the top five at or above the threshold.
pub fn rank_and_select(
    claim_id: i64,
    mut candidates: Vec<Candidate>,
    threshold: Option<f64>,
) -> RetrievalOutput {
    candidates.sort_by(|a, b| {
        let sa = a.score.unwrap_or(f64::NEG_INFINITY);
        let sb = b.score.unwrap_or(f64::NEG_INFINITY);
        sb.total_cmp(&sa)
            .then_with(|| a.page_id.cmp(&b.page_id))
            .then_with(|| a.sentence_index.cmp(&b.sentence_index))
    });
    let ranked_triples: Vec<(String, usize, f64)> = candidates
        .iter()
        .map(|c| (c.page_id.clone(), c.sentence_index, c.score.unwrap_or(f64::NEG_INFINITY)))
        .collect();
    let top5 = select_top(&ranked_triples, threshold, 5);
    RetrievalOutput {
        claim_id,
        ranked: candidates,
        top5,
        threshold_applied: threshold,
    }
}

/// One line of the retrieval predictions file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalPrediction {
    pub id: i64,
    pub predicted_evidence: Vec<(String, usize)>,
    pub scores: Vec<f64>,
}

impl From<&RetrievalOutput> for RetrievalPrediction {
    fn from(out: &RetrievalOutput) -> Self {
        RetrievalPrediction {
            id: out.claim_id,
            predicted_evidence: out
                .top5
                .iter()
                .map(|(p, i, _)| (p.clone(), *i))
                .collect(),
            scores: out.top5.iter().map(|(_, _, s)| *s).collect(),
        }
    }
}

/// Write `{"id", "predicted_evidence": [[page, idx], ...], "scores": [...]}`
/// lines.
pub fn write_retrieval_predictions<W: Write>(
    outputs: &[RetrievalOutput],
    mut w: W,
) -> Result<(), RetrievalError> {
    for out in outputs {
        let pred = RetrievalPrediction::from(out);
        let obj = serde_json::json!({
            "id": pred.id,
            "predicted_evidence": pred.predicted_evidence,
            "scores": pred.scores,
        });
        writeln!(w, "{obj}")?;
    }
    Ok(())
}

pub fn read_retrieval_predictions(path: &Path) -> Result<Vec<RetrievalPrediction>, RetrievalError> {
    let reader = BufReader::new(File::open(path)?);
    let mut preds = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: &str| RetrievalError::Predictions {
            line: lineno + 1,
            msg: msg.to_string(),
        };
        let v: Value = serde_json::from_str(&line)
            .map_err(|e| RetrievalError::Predictions {
                line: lineno + 1,
                msg: format!("bad json: {e}"),
            })?;
        let id = v.get("id").and_then(Value::as_i64).ok_or_else(|| err("missing id"))?;
        let mut predicted_evidence = Vec::new();
        for entry in v
            .get("predicted_evidence")
            .and_then(Value::as_array)
            .ok_or_else(|| err("missing predicted_evidence"))?
        {
            let pair = entry.as_array().ok_or_else(|| err("evidence entry not a pair"))?;
            if pair.len() != 2 {
                return Err(err("evidence entry not a pair"));
            }
            let page = pair[0].as_str().ok_or_else(|| err("page not a string"))?;
            let idx = pair[1].as_u64().ok_or_else(|| err("index not an integer"))?;
            predicted_evidence.push((page.to_string(), idx as usize));
        }
        let scores = v
            .get("scores")
            .and_then(Value::as_array)
            .map(|a| a.iter().filter_map(Value::as_f64).collect())
            .unwrap_or_default();
        preds.push(RetrievalPrediction {
            id,
            predicted_evidence,
            scores,
        });
    }
    Ok(preds)
}

/// Full scored candidate lists, persisted for threshold sweeps.
pub fn write_scored_candidates<W: Write>(
    outputs: &[RetrievalOutput],
    mut w: W,
) -> Result<(), RetrievalError> {
    for out in outputs {
        let items: Vec<Value> = out
            .ranked
            .iter()
            .map(|c| serde_json::json!([c.page_id, c.sentence_index, c.score.unwrap_or(0.0)]))
            .collect();
        writeln!(
            w,
            "{}",
            serde_json::json!({ "id": out.claim_id, "candidates": items })
        )?;
    }
    Ok(())
}

/// Claim id -> ranked (page, sentence, score), as written by
/// [`write_scored_candidates`].
pub fn read_scored_candidates(
    path: &Path,
) -> Result<BTreeMap<i64, Vec<(String, usize, f64)>>, RetrievalError> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = BTreeMap::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| RetrievalError::Predictions {
            line: lineno + 1,
            msg,
        };
        let v: Value =
            serde_json::from_str(&line).map_err(|e| err(format!("bad json: {e}")))?;
        let id = v
            .get("id")
            .and_then(Value::as_i64)
            .ok_or_else(|| err("missing id".into()))?;
        let mut items = Vec::new();
        for entry in v
            .get("candidates")
            .and_then(Value::as_array)
            .ok_or_else(|| err("missing candidates".into()))?
        {
            let triple = entry
                .as_array()
                .filter(|a| a.len() == 3)
                .ok_or_else(|| err("candidate entry not a triple".into()))?;
            items.push((
                triple[0]
                    .as_str()
                    .ok_or_else(|| err("page not a string".into()))?
                    .to_string(),
                triple[1]
                    .as_u64()
                    .ok_or_else(|| err("index not an integer".into()))? as usize,
                triple[2]
                    .as_f64()
                    .ok_or_else(|| err("score not a number".into()))?,
            ));
        }
        out.insert(id, items);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{ClaimLabel, EvidenceGroup, WikiPage};

    #[test]
    fn pointwise_loss_closed_forms() {
        let l = pointwise_loss(&[vec![0.2, 0.8]], &[vec![0.0, 1.0]]);
        assert!((l - 0.223_143_551_314_209_76).abs() < 1e-9, "got {l}");
        let zero = pointwise_loss(&[vec![0.0, 1.0]], &[vec![0.0, 1.0]]);
        assert_eq!(zero, 0.0);
        // Mean semantics: two samples with losses 0.2 and 0.4 average to 0.3.
        let p1 = (-0.2f64).exp();
        let p2 = (-0.4f64).exp();
        let mean = pointwise_loss(
            &[vec![1.0 - p1, p1], vec![1.0 - p2, p2]],
            &[vec![0.0, 1.0], vec![0.0, 1.0]],
        );
        assert!((mean - 0.3).abs() < 1e-12);
    }

    #[test]
    fn pointwise_loss_clamps_zero_probability() {
        let l = pointwise_loss(&[vec![1.0, 0.0]], &[vec![0.0, 1.0]]);
        assert!(l.is_finite());
        assert!((l - (-(1e-12f64).ln())).abs() < 1e-6);
    }

    #[test]
    fn ranknet_loss_closed_forms() {
        assert!((ranknet_loss(0.3, 0.3) - std::f64::consts::LN_2).abs() < 1e-9);
        assert!((ranknet_loss(2.0, 0.0) - (1.0 + (-2.0f64).exp()).ln()).abs() < 1e-9);
        // Stabilized form survives a huge margin without overflowing.
        let l = ranknet_loss(50.0, 0.0);
        assert!(l.is_finite() && l < 1e-20);
        let l = ranknet_loss(0.0, 750.0);
        assert!(l.is_finite() && (l - 750.0).abs() < 1e-9);
    }

    #[test]
    fn hinge_loss_closed_forms() {
        assert!((hinge_loss(0.2, 0.5) - 1.3).abs() < 1e-15);
        assert_eq!(hinge_loss(1.5, 0.5), 0.0);
        assert_eq!(hinge_loss(0.7, 0.7), 1.0);
    }

    fn fixture() -> (Corpus, Claim) {
        let page = WikiPage::new(
            "P".to_string(),
            vec![
                (0, "first sentence .".into()),
                (1, "second sentence .".into()),
                (2, String::new()),
                (3, "the gold sentence .".into()),
                (4, "fourth sentence .".into()),
                (5, "fifth sentence .".into()),
            ],
        )
        .unwrap();
        let claim = Claim {
            claim_id: 7,
            text: "a claim .".into(),
            label: ClaimLabel::Supported,
            evidence_groups: vec![EvidenceGroup::from([("P".to_string(), 3)])],
        };
        (Corpus::new(vec![page]), claim)
    }

    #[test]
    fn gen_candidates_labels_gold_membership() {
        let (corpus, claim) = fixture();
        let cands = gen_candidates(&corpus, &claim, &["P".to_string()]);
        // Empty sentence at index 2 is skipped.
        assert_eq!(cands.len(), 5);
        let positives: Vec<_> = cands.iter().filter(|c| c.is_evidence == Some(true)).collect();
        assert_eq!(positives.len(), 1);
        assert_eq!(positives[0].sentence_index, 3);
        assert!(positives[0].text.starts_with("P . "));
    }

    #[test]
    fn gen_candidates_all_negative_when_gold_pages_missed() {
        let (corpus, mut claim) = fixture();
        claim.evidence_groups = vec![EvidenceGroup::from([("Другой".to_string(), 0)])];
        let cands = gen_candidates(&corpus, &claim, &["P".to_string()]);
        assert!(cands.iter().all(|c| c.is_evidence == Some(false)));
    }

    #[test]
    fn gen_candidates_unknown_label_leaves_none() {
        let (corpus, mut claim) = fixture();
        claim.label = ClaimLabel::Unknown;
        claim.evidence_groups.clear();
        let cands = gen_candidates(&corpus, &claim, &["P".to_string()]);
        assert!(cands.iter().all(|c| c.is_evidence.is_none()));
    }

    fn scored(claim_id: i64, scores: &[f64]) -> Vec<Candidate> {
        scores
            .iter()
            .enumerate()
            .map(|(i, &s)| Candidate {
                claim_id,
                page_id: "P".into(),
                sentence_index: i,
                text: format!("P . s{i}"),
                is_evidence: Some(false),
                score: Some(s),
            })
            .collect()
    }

    #[test]
    fn rank_and_select_takes_top_five() {
        let out = rank_and_select(1, scored(1, &[0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3]), None);
        assert_eq!(out.top5.len(), 5);
        let idxs: Vec<usize> = out.top5.iter().map(|(_, i, _)| *i).collect();
        assert_eq!(idxs, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn threshold_filters_before_truncation() {
        let out = rank_and_select(1, scored(1, &[0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3]), Some(0.65));
        assert_eq!(out.top5.len(), 3);
        assert!(out.top5.iter().all(|(_, _, s)| *s >= 0.65));
        // A threshold below the sixth score trims nothing the cap would not.
        let out = rank_and_select(1, scored(1, &[0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3]), Some(0.45));
        assert_eq!(out.top5.len(), 5);
    }

    #[test]
    fn empty_candidates_give_empty_output() {
        let out = rank_and_select(1, Vec::new(), None);
        assert!(out.ranked.is_empty());
        assert!(out.top5.is_empty());
    }

    #[test]
    fn ties_break_by_page_then_sentence() {
        let mut cands = scored(1, &[0.5, 0.5, 0.5]);
        cands[2].page_id = "A".into();
        let out = rank_and_select(1, cands, None);
        assert_eq!(out.ranked[0].page_id, "A");
        assert_eq!(out.ranked[1].sentence_index, 0);
        assert_eq!(out.ranked[2].sentence_index, 1);
    }

    #[test]
    fn output_is_permutation_truncation_of_input() {
        let cands = scored(1, &[0.1, 0.9, 0.4, 0.6]);
        let input: std::collections::HashSet<(String, usize)> = cands
            .iter()
            .map(|c| (c.page_id.clone(), c.sentence_index))
            .collect();
        let out = rank_and_select(1, cands, Some(0.3));
        for (p, i, _) in &out.top5 {
            assert!(input.contains(&(p.clone(), *i)));
        }
        assert_eq!(out.ranked.len(), 4);
    }

    #[test]
    fn predictions_file_roundtrip() {
        let out = rank_and_select(42, scored(42, &[0.9, 0.2]), None);
        let mut buf = Vec::new();
        write_retrieval_predictions(&[out.clone()], &mut buf).unwrap();
        let mut f = tempfile::NamedTempFile::new().unwrap();
        std::io::Write::write_all(&mut f, &buf).unwrap();
        let preds = read_retrieval_predictions(f.path()).unwrap();
        assert_eq!(preds.len(), 1);
        assert_eq!(preds[0].id, 42);
        assert_eq!(preds[0].predicted_evidence, vec![("P".to_string(), 0), ("P".to_string(), 1)]);
    }

    #[test]
    fn scored_candidates_roundtrip() {
        let out = rank_and_select(9, scored(9, &[0.3, 0.8, 0.5]), None);
        let mut buf = Vec::new();
        write_scored_candidates(&[out.clone()], &mut buf).unwrap();
        let mut f = tempfile::NamedTempFile::new().unwrap();
        std::io::Write::write_all(&mut f, &buf).unwrap();
        let loaded = read_scored_candidates(f.path()).unwrap();
        let items = &loaded[&9];
        assert_eq!(items.len(), 3);
        assert_eq!(items[0].2, 0.8);
    }
}
