//! Small transformer encoder for sentence-pair classification: token, segment
//! and position embeddings, N self-attention layers, and a linear head on the
//! first position, with hand-derived forward and backward passes.

mod adam;
mod backward;
mod checkpoint;
mod forward;
mod rng;
pub mod tensor;

pub use adam::{adam_step, OptState};
pub use checkpoint::{load_checkpoint, save_checkpoint, ParamDtype};
pub use forward::{forward, ForwardCache};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use tensor::Matrix;

pub const INIT_STD: f64 = 0.02;
pub const LN_EPS: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("non-finite value detected in layer {layer}")]
    NonFinite { layer: usize },
    #[error("mismatched cache: {0}")]
    MismatchedCache(String),
    #[error("non-finite gradient in {0}")]
    NonFiniteGrad(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    /// 2 for pointwise retrieval, 3 for verification, 1 for the scalar
    /// pairwise score head.
    pub num_classes: usize,
    pub dropout_rate: f64,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            num_layers: 2,
            hidden_dim: 64,
            num_heads: 4,
            ffn_dim: 256,
            max_len: 64,
            vocab_size: 512,
            num_classes: 2,
            dropout_rate: 0.1,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), EncoderError> {
        if self.hidden_dim == 0 || self.hidden_dim % self.num_heads != 0 {
            return Err(EncoderError::InvalidConfig(format!(
                "hidden_dim {} must be a positive multiple of num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        if !matches!(self.num_classes, 1 | 2 | 3) {
            return Err(EncoderError::InvalidConfig(format!(
                "num_classes must be 1, 2 or 3, got {}",
                self.num_classes
            )));
        }
        if self.vocab_size < crate::tokenizer::RESERVED {
            return Err(EncoderError::InvalidConfig(format!(
                "vocab_size {} smaller than the reserved token block",
                self.vocab_size
            )));
        }
        if self.max_len == 0 || self.ffn_dim == 0 {
            return Err(EncoderError::InvalidConfig(
                "max_len and ffn_dim must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(EncoderError::InvalidConfig(format!(
                "dropout_rate {} outside [0,1)",
                self.dropout_rate
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub attn_q_w: Matrix,
    pub attn_q_b: Matrix,
    pub attn_k_w: Matrix,
    pub attn_k_b: Matrix,
    pub attn_v_w: Matrix,
    pub attn_v_b: Matrix,
    pub attn_out_w: Matrix,
    pub attn_out_b: Matrix,
    pub ln1_gamma: Matrix,
    pub ln1_beta: Matrix,
    pub ffn_w1: Matrix,
    pub ffn_b1: Matrix,
    pub ffn_w2: Matrix,
    pub ffn_b2: Matrix,
    pub ln2_gamma: Matrix,
    pub ln2_beta: Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub config: EncoderConfig,
    pub token_emb: Matrix,
    pub segment_emb: Matrix,
    pub position_emb: Matrix,
    pub layers: Vec<LayerParams>,
    pub cls_weight: Matrix,
    pub cls_bias: Matrix,
}

/// Initialize weights from a truncated normal (scale 0.02, clipped at ±2σ);
/// layer-norm scales start at 1, all offsets and biases at 0.
pub fn init_params(cfg: &EncoderConfig) -> Result<ModelParams, EncoderError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let h = cfg.hidden_dim;
    let f = cfg.ffn_dim;
    let mut normal = |rows: usize, cols: usize| {
        let mut m = Matrix::zeros(rows, cols);
        for v in &mut m.data {
            *v = rng::truncated_normal(&mut rng, INIT_STD);
        }
        m
    };
    let token_emb = normal(cfg.vocab_size, h);
    let segment_emb = normal(2, h);
    let position_emb = normal(cfg.max_len, h);
    let mut layers = Vec::with_capacity(cfg.num_layers);
    for _ in 0..cfg.num_layers {
        layers.push(LayerParams {
            attn_q_w: normal(h, h),
            attn_q_b: Matrix::zeros(1, h),
            attn_k_w: normal(h, h),
            attn_k_b: Matrix::zeros(1, h),
            attn_v_w: normal(h, h),
            attn_v_b: Matrix::zeros(1, h),
            attn_out_w: normal(h, h),
            attn_out_b: Matrix::zeros(1, h),
            ln1_gamma: Matrix::filled(1, h, 1.0),
            ln1_beta: Matrix::zeros(1, h),
            ffn_w1: normal(h, f),
            ffn_b1: Matrix::zeros(1, f),
            ffn_w2: normal(f, h),
            ffn_b2: Matrix::zeros(1, h),
            ln2_gamma: Matrix::filled(1, h, 1.0),
            ln2_beta: Matrix::zeros(1, h),
        });
    }
    let cls_weight = normal(h, cfg.num_classes);
    let cls_bias = Matrix::zeros(1, cfg.num_classes);
    Ok(ModelParams {
        config: cfg.clone(),
        token_emb,
        segment_emb,
        position_emb,
        layers,
        cls_weight,
        cls_bias,
    })
}

impl ModelParams {
    /// All-zero parameter set with the same shapes; gradient and moment container.
    pub fn zeros_like(&self) -> ModelParams {
        let mut out = self.clone();
        for (_, m) in out.tensors_mut() {
            m.data.iter_mut().for_each(|v| *v = 0.0);
        }
        out
    }

    /// Named parameter tensors in a fixed order shared with [`Self::tensors_mut`].
    pub fn tensors(&self) -> Vec<(String, &Matrix)> {
        let mut v: Vec<(String, &Matrix)> = vec![
            ("token_emb".into(), &self.token_emb),
            ("segment_emb".into(), &self.segment_emb),
            ("position_emb".into(), &self.position_emb),
        ];
        for (i, layer) in self.layers.iter().enumerate() {
            v.push((format!("layer{i}.attn_q_w"), &layer.attn_q_w));
            v.push((format!("layer{i}.attn_q_b"), &layer.attn_q_b));
            v.push((format!("layer{i}.attn_k_w"), &layer.attn_k_w));
            v.push((format!("layer{i}.attn_k_b"), &layer.attn_k_b));
            v.push((format!("layer{i}.attn_v_w"), &layer.attn_v_w));
            v.push((format!("layer{i}.attn_v_b"), &layer.attn_v_b));
            v.push((format!("layer{i}.attn_out_w"), &layer.attn_out_w));
            v.push((format!("layer{i}.attn_out_b"), &layer.attn_out_b));
            v.push((format!("layer{i}.ln1_gamma"), &layer.ln1_gamma));
            v.push((format!("layer{i}.ln1_beta"), &layer.ln1_beta));
            v.push((format!("layer{i}.ffn_w1"), &layer.ffn_w1));
            v.push((format!("layer{i}.ffn_b1"), &layer.ffn_b1));
            v.push((format!("layer{i}.ffn_w2"), &layer.ffn_w2));
            v.push((format!("layer{i}.ffn_b2"), &layer.ffn_b2));
            v.push((format!("layer{i}.ln2_gamma"), &layer.ln2_gamma));
            v.push((format!("layer{i}.ln2_beta"), &layer.ln2_beta));
        }
        v.push(("cls_weight".into(), &self.cls_weight));
        v.push(("cls_bias".into(), &self.cls_bias));
        v
    }

    /// Mutable view of every tensor, same names and order as [`Self::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let mut v: Vec<(String, &mut Matrix)> = vec![
            ("token_emb".into(), &mut self.token_emb),
            ("segment_emb".into(), &mut self.segment_emb),
            ("position_emb".into(), &mut self.position_emb),
        ];
        for (i, layer) in self.layers.iter_mut().enumerate() {
            v.push((format!("layer{i}.attn_q_w"), &mut layer.attn_q_w));
            v.push((format!("layer{i}.attn_q_b"), &mut layer.attn_q_b));
            v.push((format!("layer{i}.attn_k_w"), &mut layer.attn_k_w));
            v.push((format!("layer{i}.attn_k_b"), &mut layer.attn_k_b));
            v.push((format!("layer{i}.attn_v_w"), &mut layer.attn_v_w));
            v.push((format!("layer{i}.attn_v_b"), &mut layer.attn_v_b));
            v.push((format!("layer{i}.attn_out_w"), &mut layer.attn_out_w));
            v.push((format!("layer{i}.attn_out_b"), &mut layer.attn_out_b));
            v.push((format!("layer{i}.ln1_gamma"), &mut layer.ln1_gamma));
            v.push((format!("layer{i}.ln1_beta"), &mut layer.ln1_beta));
            v.push((format!("layer{i}.ffn_w1"), &mut layer.ffn_w1));
            v.push((format!("layer{i}.ffn_b1"), &mut layer.ffn_b1));
            v.push((format!("layer{i}.ffn_w2"), &mut layer.ffn_w2));
            v.push((format!("layer{i}.ffn_b2"), &mut layer.ffn_b2));
            v.push((format!("layer{i}.ln2_gamma"), &mut layer.ln2_gamma));
            v.push((format!("layer{i}.ln2_beta"), &mut layer.ln2_beta));
        }
        v.push(("cls_weight".into(), &mut self.cls_weight));
        v.push(("cls_bias".into(), &mut self.cls_bias));
        v
    }

    pub fn tensor_names(&self) -> Vec<String> {
        self.tensors().into_iter().map(|(n, _)| n).collect()
    }

    pub fn add_assign(&mut self, other: &ModelParams) {
        for ((_, a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for (_, m) in self.tensors_mut() {
            m.data.iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|(_, m)| m.is_finite())
    }
}

/// Loss head selection together with its targets.
#[derive(Debug, Clone)]
pub enum LossTarget {
    /// Softmax cross entropy against per-sample class indices.
    Classes(Vec<usize>),
    /// Batch rows are consecutive (positive, negative) pairs scored by the
    /// scalar head; loss is `softplus(-(o_pos - o_neg))` per pair.
    RanknetPairs,
    /// Same pairing, margin loss `max(0, 1 + o_neg - o_pos)` per pair.
    HingePairs,
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / sum).collect()
}

fn loss_and_dlogits(
    logits: &[Vec<f64>],
    target: &LossTarget,
) -> Result<(f64, Vec<Vec<f64>>), EncoderError> {
    let batch = logits.len();
    if batch == 0 {
        return Err(EncoderError::MismatchedCache("empty batch".into()));
    }
    let classes = logits[0].len();
    if logits.iter().any(|row| row.len() != classes) {
        return Err(EncoderError::MismatchedCache(
            "ragged logit rows".into(),
        ));
    }

    let mut d_logits = vec![vec![0.0; classes]; batch];
    let loss = match target {
        LossTarget::Classes(targets) => {
            if targets.len() != batch {
                return Err(EncoderError::MismatchedCache(
                    "target count does not match batch".into(),
                ));
            }
            let mut total = 0.0;
            for (i, (row, &t)) in logits.iter().zip(targets).enumerate() {
                if t >= classes {
                    return Err(EncoderError::MismatchedCache(format!(
                        "target class {t} out of range"
                    )));
                }
                let p = softmax(row);
                total += -(p[t].max(1e-12)).ln();
                for c in 0..classes {
                    d_logits[i][c] = (p[c] - if c == t { 1.0 } else { 0.0 }) / batch as f64;
                }
            }
            total / batch as f64
        }
        LossTarget::RanknetPairs | LossTarget::HingePairs => {
            if classes != 1 {
                return Err(EncoderError::MismatchedCache(
                    "pairwise losses require the scalar score head".into(),
                ));
            }
            if batch % 2 != 0 {
                return Err(EncoderError::MismatchedCache(
                    "pairwise batch must have an even number of rows".into(),
                ));
            }
            let pairs = batch / 2;
            let mut total = 0.0;
            for p in 0..pairs {
                let o_pos = logits[2 * p][0];
                let o_neg = logits[2 * p + 1][0];
                let delta = o_pos - o_neg;
                match target {
                    LossTarget::RanknetPairs => {
                        total += softplus(-delta);
                        let g = sigmoid(delta) - 1.0;
                        d_logits[2 * p][0] = g / pairs as f64;
                        d_logits[2 * p + 1][0] = -g / pairs as f64;
                    }
                    LossTarget::HingePairs => {
                        let margin = 1.0 + o_neg - o_pos;
                        if margin > 0.0 {
                            total += margin;
                            d_logits[2 * p][0] = -1.0 / pairs as f64;
                            d_logits[2 * p + 1][0] = 1.0 / pairs as f64;
                        }
                    }
                    LossTarget::Classes(_) => unreachable!(),
                }
            }
            total / pairs as f64
        }
    };
    if !loss.is_finite() {
        return Err(EncoderError::NonFiniteGrad("loss".into()));
    }
    Ok((loss, d_logits))
}

/// Mean batch loss under the given head, without touching gradients.
pub fn batch_loss(logits: &[Vec<f64>], target: &LossTarget) -> Result<f64, EncoderError> {
    loss_and_dlogits(logits, target).map(|(loss, _)| loss)
}

/// Mean batch loss and parameter-shaped gradients for the given head.
///
/// The cache must come from a matching [`forward`] call on the same batch.
pub fn loss_and_grads(
    params: &ModelParams,
    cache: &ForwardCache,
    logits: &[Vec<f64>],
    target: &LossTarget,
) -> Result<(f64, ModelParams), EncoderError> {
    if cache.len() != logits.len() {
        return Err(EncoderError::MismatchedCache(format!(
            "cache holds {} samples, logits {}",
            cache.len(),
            logits.len()
        )));
    }
    if logits
        .first()
        .is_some_and(|row| row.len() != params.config.num_classes)
    {
        return Err(EncoderError::MismatchedCache(
            "logit width does not match num_classes".into(),
        ));
    }
    let (loss, d_logits) = loss_and_dlogits(logits, target)?;
    let grads = backward::backward_batch(params, cache, &d_logits)?;
    Ok((loss, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::{encode_pair, Vocabulary};

    fn tiny_cfg() -> EncoderConfig {
        EncoderConfig {
            num_layers: 1,
            hidden_dim: 8,
            num_heads: 2,
            ffn_dim: 16,
            max_len: 8,
            vocab_size: 32,
            num_classes: 2,
            dropout_rate: 0.0,
            seed: 42,
        }
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let cfg = tiny_cfg();
        let a = init_params(&cfg).unwrap();
        let b = init_params(&cfg).unwrap();
        assert_eq!(a, b);
        let mut cfg2 = cfg.clone();
        cfg2.seed = 43;
        let c = init_params(&cfg2).unwrap();
        assert_ne!(a.token_emb.data, c.token_emb.data);
    }

    #[test]
    fn init_layer_norm_scales_are_one() {
        let p = init_params(&tiny_cfg()).unwrap();
        assert!(p.layers[0].ln1_gamma.data.iter().all(|&v| v == 1.0));
        assert!(p.layers[0].ln2_gamma.data.iter().all(|&v| v == 1.0));
        assert!(p.layers[0].ln1_beta.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn init_weights_within_two_sigma() {
        let p = init_params(&tiny_cfg()).unwrap();
        assert!(p.token_emb.data.iter().all(|v| v.abs() <= 2.0 * INIT_STD));
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut cfg = tiny_cfg();
        cfg.num_heads = 3;
        assert!(init_params(&cfg).is_err());
        let mut cfg = tiny_cfg();
        cfg.num_classes = 5;
        assert!(init_params(&cfg).is_err());
    }

    fn tiny_batch(vocab: &Vocabulary, cfg: &EncoderConfig) -> Vec<crate::tokenizer::EncodedPair> {
        vec![
            encode_pair(vocab, "a b c", "d", cfg.max_len),
            encode_pair(vocab, "b d", "a c", cfg.max_len),
        ]
    }

    #[test]
    fn duplicated_batch_keeps_mean_loss() {
        let cfg = tiny_cfg();
        let vocab = Vocabulary::build(["a b c d"], cfg.vocab_size).unwrap();
        let params = init_params(&cfg).unwrap();
        let batch = tiny_batch(&vocab, &cfg);
        let (logits, cache) = forward(&params, &batch, false, 0).unwrap();
        let (loss, _) =
            loss_and_grads(&params, &cache, &logits, &LossTarget::Classes(vec![0, 1])).unwrap();

        let mut doubled = batch.clone();
        doubled.extend(batch.clone());
        let (logits2, cache2) = forward(&params, &doubled, false, 0).unwrap();
        let (loss2, _) = loss_and_grads(
            &params,
            &cache2,
            &logits2,
            &LossTarget::Classes(vec![0, 1, 0, 1]),
        )
        .unwrap();
        assert!((loss - loss2).abs() < 1e-12);
    }

    #[test]
    fn uniform_targets_on_equal_logits_zero_bias_grad_sum() {
        // With identical logits for both classes and balanced targets, the
        // classifier-bias gradient components cancel.
        let cfg = tiny_cfg();
        let vocab = Vocabulary::build(["a b c d"], cfg.vocab_size).unwrap();
        let mut params = init_params(&cfg).unwrap();
        // Zero classifier weights force identical logits across classes.
        params.cls_weight = Matrix::zeros(cfg.hidden_dim, 2);
        params.cls_bias = Matrix::zeros(1, 2);
        let batch = tiny_batch(&vocab, &cfg);
        let (logits, cache) = forward(&params, &batch, false, 0).unwrap();
        assert_eq!(logits[0][0], logits[0][1]);
        let (_, grads) =
            loss_and_grads(&params, &cache, &logits, &LossTarget::Classes(vec![0, 1])).unwrap();
        let sum: f64 = grads.cls_bias.data.iter().sum();
        assert!(sum.abs() < 1e-12);
    }

    #[test]
    fn mismatched_cache_is_an_error() {
        let cfg = tiny_cfg();
        let vocab = Vocabulary::build(["a b c d"], cfg.vocab_size).unwrap();
        let params = init_params(&cfg).unwrap();
        let batch = tiny_batch(&vocab, &cfg);
        let (logits, cache) = forward(&params, &batch, false, 0).unwrap();
        let short = &logits[..1];
        assert!(matches!(
            loss_and_grads(&params, &cache, short, &LossTarget::Classes(vec![0])),
            Err(EncoderError::MismatchedCache(_))
        ));
    }
}
