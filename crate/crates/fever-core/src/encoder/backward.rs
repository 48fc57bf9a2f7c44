//! Hand-derived backward pass; one gradient contribution per sample, summed
//! in batch order so results do not depend on worker scheduling.

use rayon::prelude::*;

use super::forward::{gelu_grad, ForwardCache, LnCache, SampleCache};
use super::tensor::Matrix;
use super::{EncoderError, ModelParams};

/// d(loss)/d(res) for `out = gamma * xhat + beta`, accumulating the scale and
/// offset gradients into `d_gamma`/`d_beta`.
fn layer_norm_backward(
    d_out: &Matrix,
    ln: &LnCache,
    gamma: &Matrix,
    d_gamma: &mut Matrix,
    d_beta: &mut Matrix,
) -> Matrix {
    let h = d_out.cols;
    let mut d_res = Matrix::zeros(d_out.rows, h);
    for r in 0..d_out.rows {
        let dy = d_out.row(r);
        let xhat = ln.xhat.row(r);
        let inv_std = ln.inv_std[r];
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for c in 0..h {
            d_gamma.data[c] += dy[c] * xhat[c];
            d_beta.data[c] += dy[c];
            let dxh = dy[c] * gamma.data[c];
            mean_dxhat += dxh;
            mean_dxhat_xhat += dxh * xhat[c];
        }
        mean_dxhat /= h as f64;
        mean_dxhat_xhat /= h as f64;
        let out = d_res.row_mut(r);
        for c in 0..h {
            let dxh = dy[c] * gamma.data[c];
            out[c] = inv_std * (dxh - mean_dxhat - xhat[c] * mean_dxhat_xhat);
        }
    }
    d_res
}

fn masked(d: &Matrix, mask: &Option<Matrix>) -> Matrix {
    match mask {
        None => d.clone(),
        Some(m) => {
            let mut out = d.clone();
            for (v, &k) in out.data.iter_mut().zip(&m.data) {
                *v *= k;
            }
            out
        }
    }
}

fn backward_sample(
    params: &ModelParams,
    sample: &SampleCache,
    d_logits: &[f64],
) -> ModelParams {
    let cfg = &params.config;
    let h = cfg.hidden_dim;
    let heads = cfg.num_heads;
    let dk = cfg.head_dim();
    let scale = 1.0 / (dk as f64).sqrt();
    let len = sample.eff_len;

    let mut g = params.zeros_like();

    // Classification head reads only position 0 of the last layer.
    let h0 = sample.final_hidden().row(0);
    let mut d_x = Matrix::zeros(len, h);
    {
        let d_h0 = d_x.row_mut(0);
        for (c, &dl) in d_logits.iter().enumerate() {
            if dl == 0.0 {
                continue;
            }
            g.cls_bias.data[c] += dl;
            for k in 0..h {
                g.cls_weight.data[k * cfg.num_classes + c] += h0[k] * dl;
                d_h0[k] += params.cls_weight.get(k, c) * dl;
            }
        }
    }

    for (li, layer) in params.layers.iter().enumerate().rev() {
        let cache = &sample.layers[li];
        let lp = &layer;
        let lg = &mut g.layers[li];

        // x2 = LN2(x1 + dropout(ffn_out))
        let d_res2 = layer_norm_backward(
            &d_x,
            &cache.ln2,
            &lp.ln2_gamma,
            &mut lg.ln2_gamma,
            &mut lg.ln2_beta,
        );
        let mut d_x1 = d_res2.clone();
        let d_ffn_out = masked(&d_res2, &cache.ffn_drop);

        // ffn_out = gelu(x1·W1 + b1)·W2 + b2
        lg.ffn_w2.add_assign(&cache.ffn_act.matmul_transa(&d_ffn_out));
        lg.ffn_b2.add_assign(&d_ffn_out.col_sums());
        let d_act = d_ffn_out.matmul_transb(&lp.ffn_w2);
        let mut d_z = d_act;
        for (v, &z) in d_z.data.iter_mut().zip(&cache.ffn_z.data) {
            *v *= gelu_grad(z);
        }
        lg.ffn_w1.add_assign(&cache.x1.matmul_transa(&d_z));
        lg.ffn_b1.add_assign(&d_z.col_sums());
        d_x1.add_assign(&d_z.matmul_transb(&lp.ffn_w1));

        // x1 = LN1(x_in + dropout(attn_out))
        let d_res1 = layer_norm_backward(
            &d_x1,
            &cache.ln1,
            &lp.ln1_gamma,
            &mut lg.ln1_gamma,
            &mut lg.ln1_beta,
        );
        let mut d_x_in = d_res1.clone();
        let d_attn_out = masked(&d_res1, &cache.attn_drop);

        // attn_out = ctx·W_o + b_o
        lg.attn_out_w.add_assign(&cache.ctx.matmul_transa(&d_attn_out));
        lg.attn_out_b.add_assign(&d_attn_out.col_sums());
        let d_ctx = d_attn_out.matmul_transb(&lp.attn_out_w);

        // Per-head scaled dot-product attention.
        let mut d_q = Matrix::zeros(len, h);
        let mut d_k = Matrix::zeros(len, h);
        let mut d_v = Matrix::zeros(len, h);
        for hd in 0..heads {
            let lo = hd * dk;
            let hi = lo + dk;
            let a = &cache.attn[hd];

            // dA = d_ctx_h · V_hᵀ ; dV_h = Aᵀ · d_ctx_h
            let mut d_a = Matrix::zeros(len, len);
            for i in 0..len {
                let dci = &d_ctx.row(i)[lo..hi];
                for j in 0..len {
                    d_a.set(i, j, super::tensor::dot(dci, &cache.v.row(j)[lo..hi]));
                    let aij = a.get(i, j);
                    if aij != 0.0 {
                        let dvj = &mut d_v.row_mut(j)[lo..hi];
                        for (dv, &dc) in dvj.iter_mut().zip(dci) {
                            *dv += aij * dc;
                        }
                    }
                }
            }

            // softmax backward: dS = A ⊙ (dA − rowsum(dA ⊙ A))
            for i in 0..len {
                let a_row = a.row(i);
                let mut inner = 0.0;
                for j in 0..len {
                    inner += d_a.get(i, j) * a_row[j];
                }
                let da_row = d_a.row_mut(i);
                for (j, slot) in da_row.iter_mut().enumerate() {
                    *slot = a_row[j] * (*slot - inner);
                }
            }

            // S = scale · Q_h K_hᵀ
            for i in 0..len {
                let ds_row = d_a.row(i);
                for (j, &ds) in ds_row.iter().enumerate() {
                    if ds == 0.0 {
                        continue;
                    }
                    let kj = &cache.k.row(j)[lo..hi];
                    let qi = &cache.q.row(i)[lo..hi];
                    let dqi = &mut d_q.row_mut(i)[lo..hi];
                    for (dq, &kv) in dqi.iter_mut().zip(kj) {
                        *dq += scale * ds * kv;
                    }
                    let dkj = &mut d_k.row_mut(j)[lo..hi];
                    for (dkv, &qv) in dkj.iter_mut().zip(qi) {
                        *dkv += scale * ds * qv;
                    }
                }
            }
        }

        // Q = x_in·W_q + b_q, etc.
        lg.attn_q_w.add_assign(&cache.x_in.matmul_transa(&d_q));
        lg.attn_q_b.add_assign(&d_q.col_sums());
        d_x_in.add_assign(&d_q.matmul_transb(&lp.attn_q_w));
        lg.attn_k_w.add_assign(&cache.x_in.matmul_transa(&d_k));
        lg.attn_k_b.add_assign(&d_k.col_sums());
        d_x_in.add_assign(&d_k.matmul_transb(&lp.attn_k_w));
        lg.attn_v_w.add_assign(&cache.x_in.matmul_transa(&d_v));
        lg.attn_v_b.add_assign(&d_v.col_sums());
        d_x_in.add_assign(&d_v.matmul_transb(&lp.attn_v_w));

        d_x = d_x_in;
    }

    // Embedding sum (token + segment + position), then dropout.
    let d_emb = masked(&d_x, &sample.emb_drop);
    for p in 0..len {
        let tok = sample.pair.token_ids[p] as usize;
        let seg = sample.pair.segment_ids[p] as usize;
        let row = d_emb.row(p);
        let t_row = g.token_emb.row_mut(tok);
        for (t, &d) in t_row.iter_mut().zip(row) {
            *t += d;
        }
        let s_row = g.segment_emb.row_mut(seg);
        for (s, &d) in s_row.iter_mut().zip(row) {
            *s += d;
        }
        let p_row = g.position_emb.row_mut(p);
        for (pv, &d) in p_row.iter_mut().zip(row) {
            *pv += d;
        }
    }

    g
}

pub(super) fn backward_batch(
    params: &ModelParams,
    cache: &ForwardCache,
    d_logits: &[Vec<f64>],
) -> Result<ModelParams, EncoderError> {
    let per_sample: Vec<ModelParams> = cache
        .samples
        .par_iter()
        .zip(d_logits.par_iter())
        .map(|(sample, dl)| backward_sample(params, sample, dl))
        .collect();

    let mut total = params.zeros_like();
    for g in &per_sample {
        total.add_assign(g);
    }
    if !total.all_finite() {
        return Err(EncoderError::NonFiniteGrad("batch gradient".into()));
    }
    Ok(total)
}
