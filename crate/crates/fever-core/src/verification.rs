//! Claim verification: a three-class classifier over (evidence, claim) pairs
//! built from the retrieval top-5, and the NEI-default verdict aggregation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{prepend_title, Claim, ClaimLabel, Corpus};
use crate::encoder::{
    adam_step, batch_loss, forward, init_params, loss_and_grads, softmax, EncoderConfig,
    EncoderError, LossTarget, ModelParams, OptState,
};
use crate::sentretrieval::{RetrievalPrediction, TrainLog, TrainLogEntry};
use crate::tokenizer::{encode_pair, EncodedPair, Vocabulary};

#[derive(Debug, Error)]
pub enum VerifyError {
    #[error("cannot train a verifier on an empty dataset")]
    EmptyDataset,
    #[error("encoder error: {0}")]
    Encoder(#[from] EncoderError),
}

/// Final three-way decision for a claim.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Verdict {
    Supported,
    Refuted,
    NotEnoughInfo,
}

impl Verdict {
    pub const ALL: [Verdict; 3] = [Verdict::Supported, Verdict::Refuted, Verdict::NotEnoughInfo];

    /// Class index under the three-class head; also the argmax tie order.
    pub fn class_index(&self) -> usize {
        match self {
            Verdict::Supported => 0,
            Verdict::Refuted => 1,
            Verdict::NotEnoughInfo => 2,
        }
    }

    pub fn from_class_index(idx: usize) -> Verdict {
        Self::ALL[idx]
    }

    pub fn as_fever_str(&self) -> &'static str {
        match self {
            Verdict::Supported => "SUPPORTS",
            Verdict::Refuted => "REFUTES",
            Verdict::NotEnoughInfo => "NOT ENOUGH INFO",
        }
    }

    pub fn from_fever_str(s: &str) -> Option<Verdict> {
        match s {
            "SUPPORTS" => Some(Verdict::Supported),
            "REFUTES" => Some(Verdict::Refuted),
            "NOT ENOUGH INFO" => Some(Verdict::NotEnoughInfo),
            _ => None,
        }
    }

    pub fn from_claim_label(label: ClaimLabel) -> Option<Verdict> {
        match label {
            ClaimLabel::Supported => Some(Verdict::Supported),
            ClaimLabel::Refuted => Some(Verdict::Refuted),
            ClaimLabel::NotEnoughInfo => Some(Verdict::NotEnoughInfo),
            ClaimLabel::Unknown => None,
        }
    }
}

/// One (evidence sentence, claim) training pair with its verdict target.
#[derive(Debug, Clone, PartialEq)]
pub struct VerifyExample {
    pub claim_id: i64,
    pub evidence_text: String,
    pub claim_text: String,
    pub target: Verdict,
}

/// Pair each claim with its retrieved top-5 sentences. A pair is labelled
/// with the claim verdict when the sentence belongs to a gold group;
/// everything else, including all pairs of NEI claims, gets NEI.
pub fn build_verify_dataset(
    claims: &[Claim],
    predictions: &[RetrievalPrediction],
    corpus: &Corpus,
) -> Vec<VerifyExample> {
    let by_id: std::collections::HashMap<i64, &Claim> =
        claims.iter().map(|c| (c.claim_id, c)).collect();
    let mut out = Vec::new();
    for pred in predictions {
        let Some(claim) = by_id.get(&pred.id) else {
            continue;
        };
        for (page_id, idx) in &pred.predicted_evidence {
            let Some(text) = corpus.page(page_id).and_then(|p| p.sentence(*idx)) else {
                continue;
            };
            let in_gold = claim
                .evidence_groups
                .iter()
                .any(|g| g.contains(&(page_id.clone(), *idx)));
            let target = match (claim.label, in_gold) {
                (ClaimLabel::Supported, true) => Verdict::Supported,
                (ClaimLabel::Refuted, true) => Verdict::Refuted,
                _ => Verdict::NotEnoughInfo,
            };
            out.push(VerifyExample {
                claim_id: claim.claim_id,
                evidence_text: prepend_title(page_id, text),
                claim_text: claim.text.clone(),
                target,
            });
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct VerifierTrainConfig {
    pub encoder: EncoderConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for VerifierTrainConfig {
    fn default() -> Self {
        VerifierTrainConfig {
            encoder: EncoderConfig::default(),
            epochs: 2,
            batch_size: 32,
            learning_rate: 1e-3,
            seed: 0,
        }
    }
}

/// Train the three-class verifier with shuffled mini-batches of mean
/// cross entropy.
pub fn train_verifier(
    dataset: &[VerifyExample],
    vocab: &Vocabulary,
    cfg: &VerifierTrainConfig,
) -> Result<(ModelParams, TrainLog), VerifyError> {
    if dataset.is_empty() {
        return Err(VerifyError::EmptyDataset);
    }
    let mut enc_cfg = cfg.encoder.clone();
    enc_cfg.num_classes = 3;
    enc_cfg.seed = cfg.seed;

    let encoded: Vec<(EncodedPair, usize)> = dataset
        .iter()
        .map(|ex| {
            (
                encode_pair(vocab, &ex.evidence_text, &ex.claim_text, enc_cfg.max_len),
                ex.target.class_index(),
            )
        })
        .collect();

    let mut params = init_params(&enc_cfg)?;
    let mut opt = OptState::new(&params, cfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = TrainLog::default();

    let eval_n = cfg.batch_size.min(encoded.len());
    let eval_batch: Vec<EncodedPair> = encoded[..eval_n].iter().map(|(e, _)| e.clone()).collect();
    let eval_target = LossTarget::Classes(encoded[..eval_n].iter().map(|&(_, t)| t).collect());
    let eval_loss = |params: &ModelParams| -> Result<f64, VerifyError> {
        let (logits, _) = forward(params, &eval_batch, false, 0)?;
        Ok(batch_loss(&logits, &eval_target)?)
    };
    log.eval.push(TrainLogEntry {
        step: 0,
        loss: eval_loss(&params)?,
    });

    let mut order: Vec<usize> = (0..encoded.len()).collect();
    let mut step = 0u64;
    for _epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            step += 1;
            let batch: Vec<EncodedPair> = chunk.iter().map(|&i| encoded[i].0.clone()).collect();
            let targets = LossTarget::Classes(chunk.iter().map(|&i| encoded[i].1).collect());
            let (logits, cache) = forward(&params, &batch, true, step)?;
            let (loss, grads) = loss_and_grads(&params, &cache, &logits, &targets)?;
            adam_step(&mut params, &grads, &mut opt)?;
            log.steps.push(TrainLogEntry { step, loss });
        }
        log.eval.push(TrainLogEntry {
            step,
            loss: eval_loss(&params)?,
        });
    }
    Ok((params, log))
}

/// Classify one (evidence, claim) pair; argmax ties resolve in the order
/// SUPPORTED, REFUTED, NEI.
pub fn classify_pair(
    params: &ModelParams,
    vocab: &Vocabulary,
    evidence_text: &str,
    claim_text: &str,
) -> Result<(Verdict, Vec<f64>), VerifyError> {
    let pair = encode_pair(vocab, evidence_text, claim_text, params.config.max_len);
    let (logits, _) = forward(params, &[pair], false, 0)?;
    let probs = softmax(&logits[0]);
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = i;
        }
    }
    Ok((Verdict::from_class_index(best), probs))
}

/// Batched [`classify_pair`] with the same argmax and tie rules.
pub fn classify_batch(
    params: &ModelParams,
    vocab: &Vocabulary,
    pairs: &[(String, String)],
    batch_size: usize,
) -> Result<Vec<Verdict>, VerifyError> {
    let mut out = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(batch_size.max(1)) {
        let encoded: Vec<EncodedPair> = chunk
            .iter()
            .map(|(ev, cl)| encode_pair(vocab, ev, cl, params.config.max_len))
            .collect();
        let (logits, _) = forward(params, &encoded, false, 0)?;
        for row in &logits {
            let probs = softmax(row);
            let mut best = 0;
            for (i, &p) in probs.iter().enumerate() {
                if p > probs[best] {
                    best = i;
                }
            }
            out.push(Verdict::from_class_index(best));
        }
    }
    Ok(out)
}

/// Reduce per-sentence verdicts: SUPPORTED if any sentence supports, else
/// REFUTED if any rejects, else NEI (also for the empty list).
pub fn aggregate_verdict(verdicts: &[Verdict]) -> Verdict {
    if verdicts.contains(&Verdict::Supported) {
        Verdict::Supported
    } else if verdicts.contains(&Verdict::Refuted) {
        Verdict::Refuted
    } else {
        Verdict::NotEnoughInfo
    }
}
