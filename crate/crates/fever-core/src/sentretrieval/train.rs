//! Retriever training: balanced 16/16 pointwise batches or 32-pair batches,
//! with either uniform random negatives or online hard negative mining.
//!
//! An epoch is one pass over the shuffled negative pool; the scarce positives
//! cycle (reshuffled on wraparound) to keep every batch balanced.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::sampler::{hnm_select_pairwise, hnm_select_pointwise};
use super::{LossMode, RetrievalError, SamplingStrategy, EVIDENCE_CLASS};
use crate::corpus::{Candidate, Claim};
use crate::encoder::{
    adam_step, batch_loss, forward, init_params, loss_and_grads, EncoderConfig, LossTarget,
    ModelParams, OptState,
};
use crate::tokenizer::{encode_pair, EncodedPair, Vocabulary};

pub const POINTWISE_POS_PER_BATCH: usize = 16;
pub const POINTWISE_NEG_PER_BATCH: usize = 16;
pub const POINTWISE_HNM_POOL: usize = 64;
pub const PAIRWISE_PAIRS_PER_BATCH: usize = 32;
pub const PAIRWISE_HNM_POOL: usize = 128;

#[derive(Debug, Clone)]
pub struct RetrieverTrainConfig {
    pub mode: LossMode,
    pub sampling: SamplingStrategy,
    pub encoder: EncoderConfig,
    /// None uses the mode default: 3 epochs for pairwise HNM, 1 otherwise.
    pub epochs: Option<usize>,
    pub learning_rate: f64,
    pub seed: u64,
}

impl RetrieverTrainConfig {
    pub fn effective_epochs(&self) -> usize {
        self.epochs.unwrap_or(
            if self.mode.is_pairwise() && self.sampling == SamplingStrategy::Hnm {
                3
            } else {
                1
            },
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainLogEntry {
    pub step: u64,
    pub loss: f64,
}

/// Per-step training losses plus the fixed evaluation batch curve (step 0 and
/// each epoch end).
#[derive(Debug, Clone, Default, serde::Serialize, serde::Deserialize)]
pub struct TrainLog {
    pub steps: Vec<TrainLogEntry>,
    pub eval: Vec<TrainLogEntry>,
}

/// Encode (candidate sentence, claim) pairs, keeping the evidence labels.
pub fn encode_examples(
    candidates: &[Candidate],
    claims: &[Claim],
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<(Vec<EncodedPair>, Vec<bool>), RetrievalError> {
    let text_by_id: std::collections::HashMap<i64, &str> = claims
        .iter()
        .map(|c| (c.claim_id, c.text.as_str()))
        .collect();
    let mut encoded = Vec::with_capacity(candidates.len());
    let mut labels = Vec::with_capacity(candidates.len());
    for cand in candidates {
        let claim_text = text_by_id
            .get(&cand.claim_id)
            .ok_or(RetrievalError::MissingClaim(cand.claim_id))?;
        let label = cand
            .is_evidence
            .ok_or(RetrievalError::MissingLabel(cand.claim_id))?;
        encoded.push(encode_pair(vocab, &cand.text, claim_text, max_len));
        labels.push(label);
    }
    Ok((encoded, labels))
}

/// Cycles positive indices, reshuffling whenever the list wraps.
struct PositiveCycle {
    order: Vec<usize>,
    cursor: usize,
}

impl PositiveCycle {
    fn new(mut order: Vec<usize>, rng: &mut ChaCha8Rng) -> Self {
        order.shuffle(rng);
        PositiveCycle { order, cursor: 0 }
    }

    fn take(&mut self, n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            if self.cursor == self.order.len() {
                self.order.shuffle(rng);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

fn eval_loss(
    params: &ModelParams,
    batch: &[EncodedPair],
    target: &LossTarget,
) -> Result<f64, RetrievalError> {
    let (logits, _) = forward(params, batch, false, 0)?;
    Ok(batch_loss(&logits, target)?)
}

/// Train the sentence retriever over labelled candidates. Returns the final
/// parameters and the loss curve log.
pub fn train_retriever(
    candidates: &[Candidate],
    claims: &[Claim],
    vocab: &Vocabulary,
    cfg: &RetrieverTrainConfig,
) -> Result<(ModelParams, TrainLog), RetrievalError> {
    let mut enc_cfg = cfg.encoder.clone();
    enc_cfg.num_classes = cfg.mode.num_classes();
    enc_cfg.seed = cfg.seed;
    let (encoded, labels) = encode_examples(candidates, claims, vocab, enc_cfg.max_len)?;

    let positives: Vec<usize> = (0..encoded.len()).filter(|&i| labels[i]).collect();
    let negatives: Vec<usize> = (0..encoded.len()).filter(|&i| !labels[i]).collect();
    if positives.is_empty() {
        return Err(RetrievalError::NoPositives);
    }

    let mut params = init_params(&enc_cfg)?;
    let mut opt = OptState::new(&params, cfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = TrainLog::default();

    // Fixed evaluation batch in input order for the training-sanity curve.
    let (eval_batch, eval_target) = if cfg.mode.is_pairwise() {
        let n = PAIRWISE_PAIRS_PER_BATCH.min(negatives.len()).max(1);
        let mut batch = Vec::with_capacity(2 * n);
        for i in 0..n.min(negatives.len()) {
            batch.push(encoded[positives[i % positives.len()]].clone());
            batch.push(encoded[negatives[i]].clone());
        }
        let target = match cfg.mode {
            LossMode::Ranknet => LossTarget::RanknetPairs,
            LossMode::Hinge => LossTarget::HingePairs,
            LossMode::Pointwise => unreachable!(),
        };
        (batch, target)
    } else {
        let npos = POINTWISE_POS_PER_BATCH.min(positives.len());
        let nneg = POINTWISE_NEG_PER_BATCH.min(negatives.len());
        let mut batch = Vec::with_capacity(npos + nneg);
        let mut targets = Vec::with_capacity(npos + nneg);
        for &i in positives.iter().take(npos) {
            batch.push(encoded[i].clone());
            targets.push(EVIDENCE_CLASS);
        }
        for &i in negatives.iter().take(nneg) {
            batch.push(encoded[i].clone());
            targets.push(1 - EVIDENCE_CLASS);
        }
        (batch, LossTarget::Classes(targets))
    };
    if !eval_batch.is_empty() {
        log.eval.push(TrainLogEntry {
            step: 0,
            loss: eval_loss(&params, &eval_batch, &eval_target)?,
        });
    }

    let mut pos_cycle = PositiveCycle::new(positives.clone(), &mut rng);
    let mut step: u64 = 0;
    let chunk_size = match (cfg.mode.is_pairwise(), cfg.sampling) {
        (false, SamplingStrategy::Random) => POINTWISE_NEG_PER_BATCH,
        (false, SamplingStrategy::Hnm) => POINTWISE_HNM_POOL,
        (true, SamplingStrategy::Random) => PAIRWISE_PAIRS_PER_BATCH,
        (true, SamplingStrategy::Hnm) => PAIRWISE_HNM_POOL,
    };

    for _epoch in 0..cfg.effective_epochs() {
        let mut neg_order = negatives.clone();
        neg_order.shuffle(&mut rng);
        for chunk in neg_order.chunks(chunk_size.max(1)) {
            if chunk.is_empty() {
                continue;
            }
            step += 1;
            let (batch, target) = if cfg.mode.is_pairwise() {
                let pool_pos = pos_cycle.take(chunk.len(), &mut rng);
                let pool: Vec<(EncodedPair, EncodedPair)> = pool_pos
                    .iter()
                    .zip(chunk)
                    .map(|(&p, &n)| (encoded[p].clone(), encoded[n].clone()))
                    .collect();
                let selected: Vec<usize> = match cfg.sampling {
                    SamplingStrategy::Random => (0..pool.len()).collect(),
                    SamplingStrategy::Hnm => {
                        hnm_select_pairwise(&params, &pool, PAIRWISE_PAIRS_PER_BATCH, cfg.mode)?
                    }
                };
                let mut batch = Vec::with_capacity(2 * selected.len());
                for &i in &selected {
                    batch.push(pool[i].0.clone());
                    batch.push(pool[i].1.clone());
                }
                let target = match cfg.mode {
                    LossMode::Ranknet => LossTarget::RanknetPairs,
                    LossMode::Hinge => LossTarget::HingePairs,
                    LossMode::Pointwise => unreachable!(),
                };
                (batch, target)
            } else {
                let selected_negs: Vec<usize> = match cfg.sampling {
                    SamplingStrategy::Random => chunk.to_vec(),
                    SamplingStrategy::Hnm => {
                        let pool: Vec<EncodedPair> =
                            chunk.iter().map(|&i| encoded[i].clone()).collect();
                        hnm_select_pointwise(&params, &pool, POINTWISE_NEG_PER_BATCH)?
                            .into_iter()
                            .map(|local| chunk[local])
                            .collect()
                    }
                };
                let npos = POINTWISE_POS_PER_BATCH
                    .min(positives.len())
                    .min(selected_negs.len().max(1));
                let pos_ids = pos_cycle.take(npos, &mut rng);
                let mut batch = Vec::with_capacity(npos + selected_negs.len());
                let mut targets = Vec::with_capacity(npos + selected_negs.len());
                for &i in &pos_ids {
                    batch.push(encoded[i].clone());
                    targets.push(EVIDENCE_CLASS);
                }
                for &i in &selected_negs {
                    batch.push(encoded[i].clone());
                    targets.push(1 - EVIDENCE_CLASS);
                }
                (batch, LossTarget::Classes(targets))
            };

            let (logits, cache) = forward(&params, &batch, true, step)?;
            let (loss, grads) = loss_and_grads(&params, &cache, &logits, &target)?;
            adam_step(&mut params, &grads, &mut opt)?;
            log.steps.push(TrainLogEntry { step, loss });
        }
        if !eval_batch.is_empty() {
            log.eval.push(TrainLogEntry {
                step,
                loss: eval_loss(&params, &eval_batch, &eval_target)?,
            });
        }
    }

    Ok((params, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::ClaimLabel;
    use crate::sentretrieval::score_candidates;

    fn marker_fixture(n_claims: usize) -> (Vec<Candidate>, Vec<Claim>, Vocabulary) {
        let mut candidates = Vec::new();
        let mut claims = Vec::new();
        let mut texts = Vec::new();
        for i in 0..n_claims {
            let claim_text = format!("subject{i} zz holds .");
            claims.push(Claim {
                claim_id: i as i64,
                text: claim_text.clone(),
                label: ClaimLabel::Supported,
                evidence_groups: vec![],
            });
            texts.push(claim_text);
            let mk = |idx: usize, text: String, pos: bool| Candidate {
                claim_id: i as i64,
                page_id: format!("Page{i}"),
                sentence_index: idx,
                text,
                is_evidence: Some(pos),
                score: None,
            };
            let pos_text = format!("page{i} . entity{i} zz detail .");
            candidates.push(mk(0, pos_text.clone(), true));
            texts.push(pos_text);
            for j in 1..5 {
                let neg_text = format!("page{i} . entity{i} plain item{j} .");
                candidates.push(mk(j, neg_text.clone(), false));
                texts.push(neg_text);
            }
        }
        let vocab =
            Vocabulary::build(texts.iter().map(String::as_str), 256).unwrap();
        (candidates, claims, vocab)
    }

    fn tiny_train_cfg(mode: LossMode, sampling: SamplingStrategy) -> RetrieverTrainConfig {
        RetrieverTrainConfig {
            mode,
            sampling,
            encoder: EncoderConfig {
                num_layers: 1,
                hidden_dim: 16,
                num_heads: 2,
                ffn_dim: 32,
                max_len: 16,
                vocab_size: 256,
                num_classes: 2,
                dropout_rate: 0.0,
                seed: 5,
            },
            epochs: Some(3),
            learning_rate: 5e-3,
            seed: 5,
        }
    }

    fn mean_scores(
        params: &ModelParams,
        vocab: &Vocabulary,
        candidates: &[Candidate],
        claims: &[Claim],
    ) -> (f64, f64) {
        let text_by_id: std::collections::HashMap<i64, &str> = claims
            .iter()
            .map(|c| (c.claim_id, c.text.as_str()))
            .collect();
        let mut pos = (0.0, 0usize);
        let mut neg = (0.0, 0usize);
        let mut work = candidates.to_vec();
        for cand in work.iter_mut() {
            let claim_text = text_by_id[&cand.claim_id];
            let mut one = vec![cand.clone()];
            score_candidates(params, vocab, claim_text, &mut one, 8).unwrap();
            let s = one[0].score.unwrap();
            if cand.is_evidence == Some(true) {
                pos = (pos.0 + s, pos.1 + 1);
            } else {
                neg = (neg.0 + s, neg.1 + 1);
            }
        }
        (pos.0 / pos.1 as f64, neg.0 / neg.1 as f64)
    }

    #[test]
    fn pointwise_training_separates_markers() {
        let (candidates, claims, vocab) = marker_fixture(16);
        let cfg = tiny_train_cfg(LossMode::Pointwise, SamplingStrategy::Random);
        let (params, log) = train_retriever(&candidates, &claims, &vocab, &cfg).unwrap();
        let (mean_pos, mean_neg) = mean_scores(&params, &vocab, &candidates, &claims);
        assert!(
            mean_pos > mean_neg,
            "positives {mean_pos} not above negatives {mean_neg}"
        );
        // Training-sanity: epoch-end eval loss at or below the step-0 loss.
        let first = log.eval.first().unwrap().loss;
        let last = log.eval.last().unwrap().loss;
        assert!(last <= first, "eval loss rose: {first} -> {last}");
    }

    #[test]
    fn ranknet_training_separates_markers() {
        let (candidates, claims, vocab) = marker_fixture(16);
        let cfg = tiny_train_cfg(LossMode::Ranknet, SamplingStrategy::Random);
        let (params, log) = train_retriever(&candidates, &claims, &vocab, &cfg).unwrap();
        let (mean_pos, mean_neg) = mean_scores(&params, &vocab, &candidates, &claims);
        assert!(mean_pos > mean_neg);
        assert!(log.eval.last().unwrap().loss <= log.eval.first().unwrap().loss);
    }

    #[test]
    fn hnm_modes_run_and_learn() {
        let (candidates, claims, vocab) = marker_fixture(16);
        for mode in [LossMode::Pointwise, LossMode::Hinge] {
            let mut cfg = tiny_train_cfg(mode, SamplingStrategy::Hnm);
            cfg.epochs = Some(3);
            let (params, _) = train_retriever(&candidates, &claims, &vocab, &cfg).unwrap();
            let (mean_pos, mean_neg) = mean_scores(&params, &vocab, &candidates, &claims);
            assert!(mean_pos > mean_neg, "{mode:?} failed: {mean_pos} vs {mean_neg}");
        }
    }

    #[test]
    fn training_is_deterministic_under_seed() {
        let (candidates, claims, vocab) = marker_fixture(8);
        let mut cfg = tiny_train_cfg(LossMode::Pointwise, SamplingStrategy::Random);
        cfg.epochs = Some(1);
        let (p1, l1) = train_retriever(&candidates, &claims, &vocab, &cfg).unwrap();
        let (p2, l2) = train_retriever(&candidates, &claims, &vocab, &cfg).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(
            l1.steps.iter().map(|e| e.loss).collect::<Vec<_>>(),
            l2.steps.iter().map(|e| e.loss).collect::<Vec<_>>()
        );
    }

    #[test]
    fn no_positives_is_an_error() {
        let (mut candidates, claims, vocab) = marker_fixture(4);
        for c in &mut candidates {
            c.is_evidence = Some(false);
        }
        let cfg = tiny_train_cfg(LossMode::Pointwise, SamplingStrategy::Random);
        assert!(matches!(
            train_retriever(&candidates, &claims, &vocab, &cfg),
            Err(RetrievalError::NoPositives)
        ));
    }

    #[test]
    fn default_epochs_follow_mode() {
        let base = tiny_train_cfg(LossMode::Pointwise, SamplingStrategy::Random);
        let mut cfg = base.clone();
        cfg.epochs = None;
        assert_eq!(cfg.effective_epochs(), 1);
        cfg.mode = LossMode::Ranknet;
        cfg.sampling = SamplingStrategy::Hnm;
        assert_eq!(cfg.effective_epochs(), 3);
        cfg.mode = LossMode::Pointwise;
        assert_eq!(cfg.effective_epochs(), 1);
    }
}
