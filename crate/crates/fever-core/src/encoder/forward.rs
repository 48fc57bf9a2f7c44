//! Forward pass with activation caching for the hand-derived backward pass.
//!
//! Padded positions past the last real token are skipped entirely; interior
//! masked positions (never produced by the tokenizer, but legal input) are
//! excluded from attention with a large negative pre-softmax bias. Both are
//! equivalent to an additive -inf mask on padded keys.

use rayon::prelude::*;

use super::rng::counter_uniform;
use super::tensor::Matrix;
use super::{EncoderConfig, EncoderError, LayerParams, ModelParams, LN_EPS};
use crate::tokenizer::EncodedPair;

const MASK_NEG: f64 = -1e30;

pub(super) const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
pub(super) const GELU_A: f64 = 0.044_715;

#[inline]
pub(super) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

#[inline]
pub(super) fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Per-row normalization cache: normalized values and 1/sqrt(var+eps).
#[derive(Debug, Clone)]
pub(super) struct LnCache {
    pub xhat: Matrix,
    pub inv_std: Vec<f64>,
}

pub(super) fn layer_norm(x: &Matrix, gamma: &Matrix, beta: &Matrix) -> (Matrix, LnCache) {
    let h = x.cols;
    let mut out = Matrix::zeros(x.rows, h);
    let mut xhat = Matrix::zeros(x.rows, h);
    let mut inv_std = Vec::with_capacity(x.rows);
    for r in 0..x.rows {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / h as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / h as f64;
        let is = 1.0 / (var + LN_EPS).sqrt();
        inv_std.push(is);
        for c in 0..h {
            let xh = (row[c] - mean) * is;
            xhat.set(r, c, xh);
            out.set(r, c, gamma.data[c] * xh + beta.data[c]);
        }
    }
    (out, LnCache { xhat, inv_std })
}

#[derive(Debug, Clone)]
pub(super) struct LayerCache {
    pub x_in: Matrix,
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    /// Softmax attention probabilities, one L×L matrix per head.
    pub attn: Vec<Matrix>,
    pub ctx: Matrix,
    pub attn_drop: Option<Matrix>,
    pub ln1: LnCache,
    pub x1: Matrix,
    pub ffn_z: Matrix,
    pub ffn_act: Matrix,
    pub ffn_drop: Option<Matrix>,
    pub ln2: LnCache,
    pub x2: Matrix,
}

#[derive(Debug, Clone)]
pub(super) struct SampleCache {
    pub pair: EncodedPair,
    pub eff_len: usize,
    /// Embedding sum after dropout; input to the first layer.
    pub x0: Matrix,
    pub emb_drop: Option<Matrix>,
    pub layers: Vec<LayerCache>,
}

impl SampleCache {
    pub fn final_hidden(&self) -> &Matrix {
        self.layers.last().map(|l| &l.x2).unwrap_or(&self.x0)
    }
}

/// Activations for a whole batch, consumed by [`super::loss_and_grads`].
pub struct ForwardCache {
    pub(super) samples: Vec<SampleCache>,
    pub(super) train_mode: bool,
}

impl ForwardCache {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn train_mode(&self) -> bool {
        self.train_mode
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Attention rows (per layer, per head) for inspection in tests.
    pub fn attention_rows(&self, sample: usize, layer: usize, head: usize) -> Vec<Vec<f64>> {
        let a = &self.samples[sample].layers[layer].attn[head];
        (0..a.rows).map(|r| a.row(r).to_vec()).collect()
    }

    /// Normalized pre-scale layer-norm outputs for inspection in tests.
    pub fn layer_norm_xhat(&self, sample: usize, layer: usize, which: usize) -> &Matrix {
        let l = &self.samples[sample].layers[layer];
        if which == 0 {
            &l.ln1.xhat
        } else {
            &l.ln2.xhat
        }
    }

    pub fn effective_len(&self, sample: usize) -> usize {
        self.samples[sample].eff_len
    }
}

struct DropoutCtx {
    seed: u64,
    step: u64,
    rate: f64,
}

/// Inverted dropout mask (0 or 1/(1-rate)) from the counter RNG.
fn dropout_mask(ctx: &DropoutCtx, site: u64, sample_idx: u64, rows: usize, cols: usize) -> Matrix {
    let keep_scale = 1.0 / (1.0 - ctx.rate);
    let mut m = Matrix::zeros(rows, cols);
    for (i, v) in m.data.iter_mut().enumerate() {
        let u = counter_uniform(ctx.seed, ctx.step, site, sample_idx << 32 | i as u64);
        *v = if u >= ctx.rate { keep_scale } else { 0.0 };
    }
    m
}

fn apply_mask(x: &mut Matrix, mask: &Matrix) {
    for (v, &m) in x.data.iter_mut().zip(&mask.data) {
        *v *= m;
    }
}

fn check_finite(m: &Matrix, layer: usize) -> Result<(), EncoderError> {
    if m.is_finite() {
        Ok(())
    } else {
        Err(EncoderError::NonFinite { layer })
    }
}

fn attention(
    cfg: &EncoderConfig,
    layer: &LayerParams,
    x: &Matrix,
    key_bias: &[f64],
) -> (Matrix, Matrix, Matrix, Vec<Matrix>, Matrix) {
    let len = x.rows;
    let dk = cfg.head_dim();
    let scale = 1.0 / (dk as f64).sqrt();

    let mut q = x.matmul(&layer.attn_q_w);
    q.add_bias_row(&layer.attn_q_b);
    let mut k = x.matmul(&layer.attn_k_w);
    k.add_bias_row(&layer.attn_k_b);
    let mut v = x.matmul(&layer.attn_v_w);
    v.add_bias_row(&layer.attn_v_b);

    let mut attn = Vec::with_capacity(cfg.num_heads);
    let mut ctx = Matrix::zeros(len, cfg.hidden_dim);
    for h in 0..cfg.num_heads {
        let lo = h * dk;
        let hi = lo + dk;
        let mut a = Matrix::zeros(len, len);
        for i in 0..len {
            let qi = &q.row(i)[lo..hi];
            let row = a.row_mut(i);
            let mut max = f64::NEG_INFINITY;
            for (j, slot) in row.iter_mut().enumerate() {
                let s = super::tensor::dot(qi, &k.row(j)[lo..hi]) * scale + key_bias[j];
                *slot = s;
                if s > max {
                    max = s;
                }
            }
            let mut sum = 0.0;
            for slot in row.iter_mut() {
                *slot = (*slot - max).exp();
                sum += *slot;
            }
            for slot in row.iter_mut() {
                *slot /= sum;
            }
        }
        for i in 0..len {
            for j in 0..len {
                let aij = a.get(i, j);
                if aij == 0.0 {
                    continue;
                }
                let vj = &v.row(j)[lo..hi];
                let ci = &mut ctx.row_mut(i)[lo..hi];
                for (c, &vv) in ci.iter_mut().zip(vj) {
                    *c += aij * vv;
                }
            }
        }
        attn.push(a);
    }
    (q, k, v, attn, ctx)
}

fn forward_sample(
    params: &ModelParams,
    pair: &EncodedPair,
    dropout: Option<&DropoutCtx>,
    sample_idx: usize,
) -> Result<SampleCache, EncoderError> {
    let cfg = &params.config;
    let max_len = pair.token_ids.len();
    if max_len > cfg.max_len {
        return Err(EncoderError::MismatchedCache(format!(
            "encoded length {max_len} exceeds model max_len {}",
            cfg.max_len
        )));
    }
    // Positions past the last unmasked token carry no information; skip them.
    let eff_len = pair
        .attention_mask
        .iter()
        .rposition(|&m| m == 1)
        .map(|p| p + 1)
        .unwrap_or(1);
    // Additive bias for interior masked keys (none for tokenizer output).
    let key_bias: Vec<f64> = (0..eff_len)
        .map(|j| {
            if pair.attention_mask[j] == 1 {
                0.0
            } else {
                MASK_NEG
            }
        })
        .collect();

    let h = cfg.hidden_dim;
    let mut x0 = Matrix::zeros(eff_len, h);
    for p in 0..eff_len {
        let tok = pair.token_ids[p] as usize;
        if tok >= cfg.vocab_size {
            return Err(EncoderError::MismatchedCache(format!(
                "token id {tok} outside vocab of {}",
                cfg.vocab_size
            )));
        }
        let seg = pair.segment_ids[p] as usize;
        let row = x0.row_mut(p);
        for (c, slot) in row.iter_mut().enumerate() {
            *slot = params.token_emb.get(tok, c)
                + params.segment_emb.get(seg, c)
                + params.position_emb.get(p, c);
        }
    }
    let emb_drop = dropout.map(|ctx| dropout_mask(ctx, 0, sample_idx as u64, eff_len, h));
    if let Some(mask) = &emb_drop {
        apply_mask(&mut x0, mask);
    }
    check_finite(&x0, 0)?;

    let mut x = x0.clone();
    let mut layers = Vec::with_capacity(cfg.num_layers);
    for (li, layer) in params.layers.iter().enumerate() {
        let (q, k, v, attn, ctx) = attention(cfg, layer, &x, &key_bias);
        let mut attn_out = ctx.matmul(&layer.attn_out_w);
        attn_out.add_bias_row(&layer.attn_out_b);
        let attn_drop =
            dropout.map(|c| dropout_mask(c, (3 * li + 1) as u64, sample_idx as u64, eff_len, h));
        if let Some(mask) = &attn_drop {
            apply_mask(&mut attn_out, mask);
        }
        let mut res1 = x.clone();
        res1.add_assign(&attn_out);
        let (x1, ln1) = layer_norm(&res1, &layer.ln1_gamma, &layer.ln1_beta);

        let mut ffn_z = x1.matmul(&layer.ffn_w1);
        ffn_z.add_bias_row(&layer.ffn_b1);
        let mut ffn_act = ffn_z.clone();
        for vv in &mut ffn_act.data {
            *vv = gelu(*vv);
        }
        let mut ffn_out = ffn_act.matmul(&layer.ffn_w2);
        ffn_out.add_bias_row(&layer.ffn_b2);
        let ffn_drop =
            dropout.map(|c| dropout_mask(c, (3 * li + 2) as u64, sample_idx as u64, eff_len, h));
        if let Some(mask) = &ffn_drop {
            apply_mask(&mut ffn_out, mask);
        }
        let mut res2 = x1.clone();
        res2.add_assign(&ffn_out);
        let (x2, ln2) = layer_norm(&res2, &layer.ln2_gamma, &layer.ln2_beta);
        check_finite(&x2, li + 1)?;

        layers.push(LayerCache {
            x_in: x,
            q,
            k,
            v,
            attn,
            ctx,
            attn_drop,
            ln1,
            x1,
            ffn_z,
            ffn_act,
            ffn_drop,
            ln2,
            x2: x2.clone(),
        });
        x = x2;
    }

    Ok(SampleCache {
        pair: pair.clone(),
        eff_len,
        x0,
        emb_drop,
        layers,
    })
}

/// Run the encoder over a batch, returning per-sample logits and the
/// activation cache. Dropout is active only in `train_mode`; masks are
/// derived from (seed, step, site, sample, element) so runs are replayable.
pub fn forward(
    params: &ModelParams,
    batch: &[EncodedPair],
    train_mode: bool,
    step: u64,
) -> Result<(Vec<Vec<f64>>, ForwardCache), EncoderError> {
    let cfg = &params.config;
    let dropout = if train_mode && cfg.dropout_rate > 0.0 {
        Some(DropoutCtx {
            seed: cfg.seed,
            step,
            rate: cfg.dropout_rate,
        })
    } else {
        None
    };

    let samples: Vec<SampleCache> = batch
        .par_iter()
        .enumerate()
        .map(|(i, pair)| forward_sample(params, pair, dropout.as_ref(), i))
        .collect::<Result<_, _>>()?;

    let mut logits = Vec::with_capacity(samples.len());
    for sample in &samples {
        let h0 = sample.final_hidden().row(0);
        let mut row = params.cls_bias.data.clone();
        for (c, slot) in row.iter_mut().enumerate() {
            for (k, &hv) in h0.iter().enumerate() {
                *slot += hv * params.cls_weight.get(k, c);
            }
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(EncoderError::NonFinite {
                layer: cfg.num_layers + 1,
            });
        }
        logits.push(row);
    }

    Ok((
        logits,
        ForwardCache {
            samples,
            train_mode,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{init_params, EncoderConfig};
    use crate::tokenizer::{encode_pair, Vocabulary, CLS_ID, PAD_ID};

    fn cfg() -> EncoderConfig {
        EncoderConfig {
            num_layers: 2,
            hidden_dim: 8,
            num_heads: 2,
            ffn_dim: 16,
            max_len: 10,
            vocab_size: 32,
            num_classes: 2,
            dropout_rate: 0.0,
            seed: 3,
        }
    }

    #[test]
    fn all_pad_after_cls_is_finite() {
        let params = init_params(&cfg()).unwrap();
        let pair = EncodedPair {
            token_ids: vec![CLS_ID, PAD_ID, PAD_ID, PAD_ID, PAD_ID, PAD_ID, PAD_ID, PAD_ID, PAD_ID, PAD_ID],
            segment_ids: vec![0; 10],
            attention_mask: vec![1, 0, 0, 0, 0, 0, 0, 0, 0, 0],
        };
        let (logits, cache) = forward(&params, &[pair], false, 0).unwrap();
        assert!(logits[0].iter().all(|v| v.is_finite()));
        assert_eq!(cache.effective_len(0), 1);
    }

    #[test]
    fn permuting_batch_permutes_logits() {
        let c = cfg();
        let vocab = Vocabulary::build(["a b c d e"], c.vocab_size).unwrap();
        let params = init_params(&c).unwrap();
        let batch = vec![
            encode_pair(&vocab, "a b", "c", c.max_len),
            encode_pair(&vocab, "d e", "a", c.max_len),
            encode_pair(&vocab, "c", "b d", c.max_len),
        ];
        let (logits, _) = forward(&params, &batch, false, 0).unwrap();
        let permuted = vec![batch[2].clone(), batch[0].clone(), batch[1].clone()];
        let (logits_p, _) = forward(&params, &permuted, false, 0).unwrap();
        assert_eq!(logits_p[0], logits[2]);
        assert_eq!(logits_p[1], logits[0]);
        assert_eq!(logits_p[2], logits[1]);
    }

    #[test]
    fn inference_is_reproducible() {
        let c = cfg();
        let vocab = Vocabulary::build(["a b c"], c.vocab_size).unwrap();
        let params = init_params(&c).unwrap();
        let batch = vec![encode_pair(&vocab, "a b c", "a", c.max_len)];
        let (l1, _) = forward(&params, &batch, false, 0).unwrap();
        let (l2, _) = forward(&params, &batch, false, 7).unwrap();
        assert_eq!(l1, l2);
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let c = cfg();
        let vocab = Vocabulary::build(["a b c d"], c.vocab_size).unwrap();
        let params = init_params(&c).unwrap();
        let batch = vec![encode_pair(&vocab, "a b c", "d a", c.max_len)];
        let (_, cache) = forward(&params, &batch, false, 0).unwrap();
        for layer in 0..c.num_layers {
            for head in 0..c.num_heads {
                for row in cache.attention_rows(0, layer, head) {
                    let sum: f64 = row.iter().sum();
                    assert!((sum - 1.0).abs() < 1e-6, "row sums to {sum}");
                }
            }
        }
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let c = cfg();
        let vocab = Vocabulary::build(["a b c d"], c.vocab_size).unwrap();
        let params = init_params(&c).unwrap();
        let batch = vec![encode_pair(&vocab, "a b c", "d", c.max_len)];
        let (_, cache) = forward(&params, &batch, false, 0).unwrap();
        for which in 0..2 {
            let xhat = cache.layer_norm_xhat(0, 0, which);
            for r in 0..xhat.rows {
                let row = xhat.row(r);
                let mean: f64 = row.iter().sum::<f64>() / row.len() as f64;
                let var: f64 =
                    row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / row.len() as f64;
                assert!(mean.abs() < 1e-5);
                assert!((var - 1.0).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn dropout_only_in_train_mode() {
        let mut c = cfg();
        c.dropout_rate = 0.5;
        let vocab = Vocabulary::build(["a b c d"], c.vocab_size).unwrap();
        let params = init_params(&c).unwrap();
        let batch = vec![encode_pair(&vocab, "a b c", "d", c.max_len)];
        let (eval1, _) = forward(&params, &batch, false, 0).unwrap();
        let (eval2, _) = forward(&params, &batch, false, 1).unwrap();
        assert_eq!(eval1, eval2);
        let (train1, _) = forward(&params, &batch, true, 0).unwrap();
        let (train1b, _) = forward(&params, &batch, true, 0).unwrap();
        assert_eq!(train1, train1b);
        let (train2, _) = forward(&params, &batch, true, 1).unwrap();
        assert_ne!(train1, train2);
        assert_ne!(eval1, train1);
    }

    #[test]
    fn padded_tail_does_not_change_logits() {
        // Same content encoded at two max_lens gives identical position-0 logits.
        let c = cfg();
        let vocab = Vocabulary::build(["a b c"], c.vocab_size).unwrap();
        let params = init_params(&c).unwrap();
        let short = encode_pair(&vocab, "a b", "c", 8);
        let long = encode_pair(&vocab, "a b", "c", 10);
        let (l_short, _) = forward(&params, &[short], false, 0).unwrap();
        let (l_long, _) = forward(&params, &[long], false, 0).unwrap();
        for (a, b) in l_short[0].iter().zip(&l_long[0]) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
