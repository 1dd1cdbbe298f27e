//! Forward and backward passes of the pre-norm decoder.
//!
//! Layer `l`:
//! ```text
//! h = rmsnorm(x) * g_attn;  x = x + attention(h) * Wo
//! h = rmsnorm(x) * g_ffn;   x = x + gelu(h * W1 + b1) * W2 + b2
//! ```
//! followed by a final RMS norm and the output head. Attention for query `q`
//! only reads keys in `mask.key_range(q)`, so other segments and padding
//! contribute nothing, not even rounding noise.

use super::{ModelConfig, ModelError, ModelParams};
use crate::encoding::{normalize_patch, TokenElement};
use crate::packing::{AttentionMask, PackedSequence};
use crate::tensor::Matrix;

const NORM_EPS: f64 = 1e-6;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

struct LayerCache {
    x_in: Matrix,
    attn_inv_rms: Vec<f64>,
    h_attn: Matrix,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    /// `probs[head][query]` over the query's key range.
    probs: Vec<Vec<Vec<f64>>>,
    attn_out: Matrix,
    x_mid: Matrix,
    ffn_inv_rms: Vec<f64>,
    h_ffn: Matrix,
    pre_act: Matrix,
    act: Matrix,
}

/// Activations kept for the backward pass.
pub struct ForwardCache {
    mask: AttentionMask,
    positions: Vec<usize>,
    elements: Vec<TokenElement>,
    layers: Vec<LayerCache>,
    x_final: Matrix,
    final_inv_rms: Vec<f64>,
    h_final: Matrix,
}

fn rmsnorm(x: &Matrix, gain: &[f64]) -> (Matrix, Vec<f64>) {
    let d = x.cols();
    let mut out = Matrix::zeros(x.rows(), d);
    let mut inv = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = x.row(r);
        let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
        let s = 1.0 / (ms + NORM_EPS).sqrt();
        for ((o, &xv), &g) in out.row_mut(r).iter_mut().zip(row).zip(gain) {
            *o = xv * s * g;
        }
        inv.push(s);
    }
    (out, inv)
}

/// Returns `dx` and accumulates `dgain`.
fn rmsnorm_backward(x: &Matrix, inv: &[f64], gain: &[f64], dy: &Matrix, dgain: &mut [f64]) -> Matrix {
    let d = x.cols();
    let mut dx = Matrix::zeros(x.rows(), d);
    for (r, &s) in inv.iter().enumerate() {
        let (xr, dyr) = (x.row(r), dy.row(r));
        let mut dot = 0.0;
        for j in 0..d {
            dgain[j] += dyr[j] * xr[j] * s;
            dot += dyr[j] * gain[j] * xr[j];
        }
        let coef = dot * s * s * s / d as f64;
        for (j, o) in dx.row_mut(r).iter_mut().enumerate() {
            *o = dyr[j] * gain[j] * s - xr[j] * coef;
        }
    }
    dx
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn check_input(seq: &PackedSequence, params: &ModelParams, cfg: &ModelConfig) -> Result<(), ModelError> {
    cfg.validate()?;
    params.check_shapes(cfg)?;
    let n = seq.len();
    if n > cfg.max_seq_len {
        return Err(ModelError::SequenceTooLong {
            len: n,
            max: cfg.max_seq_len,
        });
    }
    if seq.segment_ids.len() != n || seq.loss_mask.len() != n {
        return Err(ModelError::Shape("packed sequence columns differ in length".into()));
    }
    for (t, el) in seq.elements.iter().enumerate() {
        match el {
            TokenElement::Text(id) if *id >= cfg.text_vocab_size => {
                return Err(ModelError::TokenOutOfRange {
                    position: t,
                    id: *id,
                    limit: cfg.text_vocab_size,
                })
            }
            TokenElement::Patch(p) if p.len() != cfg.patch_len() => {
                return Err(ModelError::Shape(format!(
                    "patch at {t} has {} values, model expects {}",
                    p.len(),
                    cfg.patch_len()
                )))
            }
            _ => {}
        }
    }
    Ok(())
}

fn embed(seq: &PackedSequence, positions: &[usize], params: &ModelParams, cfg: &ModelConfig) -> Result<Matrix, ModelError> {
    let vocab = cfg.vocab();
    let mut x = Matrix::zeros(seq.len(), cfg.d_model);
    for (t, el) in seq.elements.iter().enumerate() {
        let row: Vec<f64> = match el {
            TokenElement::Pad => continue,
            TokenElement::Patch(p) => params.projector.project(p)?,
            _ => {
                let id = el.table_id(&vocab).expect("text or special") as usize;
                params.token_embedding.row(id).to_vec()
            }
        };
        let pos = params.position_embedding.row(positions[t]);
        for ((o, a), b) in x.row_mut(t).iter_mut().zip(&row).zip(pos) {
            *o = a + b;
        }
    }
    Ok(x)
}

fn attention(q: &Matrix, k: &Matrix, v: &Matrix, mask: &AttentionMask, n_heads: usize) -> (Matrix, Vec<Vec<Vec<f64>>>) {
    let (n, d) = (q.rows(), q.cols());
    let hd = d / n_heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut out = Matrix::zeros(n, d);
    let mut probs = vec![vec![Vec::new(); n]; n_heads];
    for (h, head_probs) in probs.iter_mut().enumerate() {
        let cols = h * hd..(h + 1) * hd;
        for (qi, slot) in head_probs.iter_mut().enumerate() {
            let keys = mask.key_range(qi);
            if keys.is_empty() {
                continue;
            }
            let qv = &q.row(qi)[cols.clone()];
            let scores: Vec<f64> = keys
                .clone()
                .map(|kj| qv.iter().zip(&k.row(kj)[cols.clone()]).map(|(a, b)| a * b).sum::<f64>() * scale)
                .collect();
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            let p: Vec<f64> = exps.iter().map(|e| e / z).collect();
            let o = &mut out.row_mut(qi)[cols.clone()];
            for (&pj, kj) in p.iter().zip(keys) {
                for (ov, vv) in o.iter_mut().zip(&v.row(kj)[cols.clone()]) {
                    *ov += pj * vv;
                }
            }
            *slot = p;
        }
    }
    (out, probs)
}

/// Logits of shape `len x (text_vocab + 3)`.
pub fn forward(seq: &PackedSequence, params: &ModelParams, cfg: &ModelConfig) -> Result<Matrix, ModelError> {
    forward_with_cache(seq, params, cfg).map(|(logits, _)| logits)
}

pub fn forward_with_cache(
    seq: &PackedSequence,
    params: &ModelParams,
    cfg: &ModelConfig,
) -> Result<(Matrix, ForwardCache), ModelError> {
    check_input(seq, params, cfg)?;
    let mask = seq.attention();
    let positions = seq.segment_positions();
    let mut x = embed(seq, &positions, params, cfg)?;
    let mut layers = Vec::with_capacity(params.layers.len());
    for lp in &params.layers {
        let x_in = x.clone();
        let (h_attn, attn_inv_rms) = rmsnorm(&x, &lp.attn_norm);
        let q = h_attn.matmul(&lp.wq);
        let k = h_attn.matmul(&lp.wk);
        let v = h_attn.matmul(&lp.wv);
        let (attn_out, probs) = attention(&q, &k, &v, &mask, cfg.n_heads);
        x.add_assign(&attn_out.matmul(&lp.wo));
        let x_mid = x.clone();
        let (h_ffn, ffn_inv_rms) = rmsnorm(&x, &lp.ffn_norm);
        let mut pre_act = h_ffn.matmul(&lp.w1);
        pre_act.add_row_vector(&lp.b1);
        let act = Matrix::from_vec(pre_act.rows(), pre_act.cols(), pre_act.data().iter().map(|&z| gelu(z)).collect());
        let mut ffn_out = act.matmul(&lp.w2);
        ffn_out.add_row_vector(&lp.b2);
        x.add_assign(&ffn_out);
        layers.push(LayerCache {
            x_in,
            attn_inv_rms,
            h_attn,
            q,
            k,
            v,
            probs,
            attn_out,
            x_mid,
            ffn_inv_rms,
            h_ffn,
            pre_act,
            act,
        });
    }
    let (h_final, final_inv_rms) = rmsnorm(&x, &params.final_norm);
    let logits = match &params.head {
        Some(head) => h_final.matmul(head),
        None => h_final.matmul_t(&params.token_embedding),
    };
    let cache = ForwardCache {
        mask,
        positions,
        elements: seq.elements.clone(),
        layers,
        x_final: x,
        final_inv_rms,
        h_final,
    };
    Ok((logits, cache))
}

/// Accumulates parameter gradients for `dlogits` into `grads`.
pub fn backward(params: &ModelParams, cfg: &ModelConfig, cache: &ForwardCache, dlogits: &Matrix, grads: &mut ModelParams) {
    let d = cfg.d_model;
    let hd = cfg.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();

    let dh_final = match (&params.head, grads.head.as_mut()) {
        (Some(head), Some(dhead)) => {
            cache.h_final.t_matmul_into(dlogits, dhead);
            dlogits.matmul_t(head)
        }
        _ => {
            dlogits.t_matmul_into(&cache.h_final, &mut grads.token_embedding);
            dlogits.matmul(&params.token_embedding)
        }
    };
    let mut dx = rmsnorm_backward(&cache.x_final, &cache.final_inv_rms, &params.final_norm, &dh_final, &mut grads.final_norm);

    for ((lp, lc), lg) in params.layers.iter().zip(&cache.layers).zip(grads.layers.iter_mut()).rev() {
        // feed-forward block
        lc.act.t_matmul_into(&dx, &mut lg.w2);
        dx.sum_rows_into(&mut lg.b2);
        let mut dpre = dx.matmul_t(&lp.w2);
        for (g, &z) in dpre.data_mut().iter_mut().zip(lc.pre_act.data()) {
            *g *= gelu_grad(z);
        }
        lc.h_ffn.t_matmul_into(&dpre, &mut lg.w1);
        dpre.sum_rows_into(&mut lg.b1);
        let dh_ffn = dpre.matmul_t(&lp.w1);
        dx.add_assign(&rmsnorm_backward(&lc.x_mid, &lc.ffn_inv_rms, &lp.ffn_norm, &dh_ffn, &mut lg.ffn_norm));

        // attention block
        lc.attn_out.t_matmul_into(&dx, &mut lg.wo);
        let dattn = dx.matmul_t(&lp.wo);
        let n = dattn.rows();
        let mut dq = Matrix::zeros(n, d);
        let mut dk = Matrix::zeros(n, d);
        let mut dv = Matrix::zeros(n, d);
        for h in 0..cfg.n_heads {
            let cols = h * hd..(h + 1) * hd;
            for qi in 0..n {
                let keys = cache.mask.key_range(qi);
                if keys.is_empty() {
                    continue;
                }
                let p = &lc.probs[h][qi];
                let dout = &dattn.row(qi)[cols.clone()];
                let dp: Vec<f64> = keys
                    .clone()
                    .map(|kj| dout.iter().zip(&lc.v.row(kj)[cols.clone()]).map(|(a, b)| a * b).sum())
                    .collect();
                let avg: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                for (j, kj) in keys.enumerate() {
                    for (dvv, o) in dv.row_mut(kj)[cols.clone()].iter_mut().zip(dout) {
                        *dvv += p[j] * o;
                    }
                    let ds = p[j] * (dp[j] - avg) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    for c in cols.clone() {
                        dq[(qi, c)] += ds * lc.k[(kj, c)];
                        dk[(kj, c)] += ds * lc.q[(qi, c)];
                    }
                }
            }
        }
        lc.h_attn.t_matmul_into(&dq, &mut lg.wq);
        lc.h_attn.t_matmul_into(&dk, &mut lg.wk);
        lc.h_attn.t_matmul_into(&dv, &mut lg.wv);
        let mut dh_attn = dq.matmul_t(&lp.wq);
        dh_attn.add_assign(&dk.matmul_t(&lp.wk));
        dh_attn.add_assign(&dv.matmul_t(&lp.wv));
        dx.add_assign(&rmsnorm_backward(&lc.x_in, &lc.attn_inv_rms, &lp.attn_norm, &dh_attn, &mut lg.attn_norm));
    }

    let vocab = cfg.vocab();
    for (t, el) in cache.elements.iter().enumerate() {
        let g = dx.row(t);
        match el {
            TokenElement::Pad => continue,
            TokenElement::Patch(p) => {
                let xin = normalize_patch(p);
                for (i, &xi) in xin.iter().enumerate() {
                    if xi == 0.0 {
                        continue;
                    }
                    for (w, &gv) in grads.projector.matrix.row_mut(i).iter_mut().zip(g) {
                        *w += xi * gv;
                    }
                }
                for (b, &gv) in grads.projector.bias.iter_mut().zip(g) {
                    *b += gv;
                }
            }
            _ => {
                let id = el.table_id(&vocab).expect("text or special") as usize;
                for (w, &gv) in grads.token_embedding.row_mut(id).iter_mut().zip(g) {
                    *w += gv;
                }
            }
        }
        for (w, &gv) in grads.position_embedding.row_mut(cache.positions[t]).iter_mut().zip(g) {
            *w += gv;
        }
    }
}
