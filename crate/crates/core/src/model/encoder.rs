use super::{EncoderVariant, Matrix, ModelConfig, SpanClassifierParams};

pub(crate) struct EncoderCache {
    /// Token vectors `h`, `n x d`.
    pub h: Matrix,
    /// Window variant only: context means and mixer pre-activations.
    ctx: Matrix,
    pre: Matrix,
}

fn window(i: usize, n: usize, radius: usize) -> std::ops::Range<usize> {
    i.saturating_sub(radius)..(i + radius + 1).min(n)
}

pub(crate) fn encode_cached(tokens: &[usize], params: &SpanClassifierParams, cfg: &ModelConfig) -> EncoderCache {
    let n = tokens.len();
    let d = cfg.embed_dim;
    let emb = |t: usize| params.embedding.row(t);
    match cfg.encoder {
        EncoderVariant::Lookup => {
            let mut h = Matrix::zeros(n, d);
            for (i, &t) in tokens.iter().enumerate() {
                h.row_mut(i).copy_from_slice(emb(t));
            }
            EncoderCache {
                h,
                ctx: Matrix::zeros(0, 0),
                pre: Matrix::zeros(0, 0),
            }
        }
        EncoderVariant::Window => {
            let mut ctx = Matrix::zeros(n, d);
            for i in 0..n {
                let win = window(i, n, cfg.window_radius);
                let scale = 1.0 / win.len() as f64;
                let row = ctx.row_mut(i);
                for j in win {
                    for (c, &e) in row.iter_mut().zip(emb(tokens[j])) {
                        *c += e;
                    }
                }
                for c in row.iter_mut() {
                    *c *= scale;
                }
            }
            let out_dim = params.mixer.weight.rows;
            let mut pre = Matrix::zeros(n, out_dim);
            let mut h = Matrix::zeros(n, out_dim);
            let mut tmp = vec![0.0; out_dim];
            for (i, &tok) in tokens.iter().enumerate() {
                let w = &params.mixer.weight;
                w.matvec_block(0, emb(tok), &mut tmp);
                let p = pre.row_mut(i);
                p.copy_from_slice(&tmp);
                w.matvec_block(d, ctx.row(i), &mut tmp);
                for ((p, &t), &b) in p.iter_mut().zip(&tmp).zip(&params.mixer.bias.data) {
                    *p += t + b;
                }
                for (hv, &pv) in h.row_mut(i).iter_mut().zip(pre.row(i)) {
                    *hv = pv.max(0.0);
                }
            }
            EncoderCache { h, ctx, pre }
        }
    }
}

/// Contextual token vectors for a tokenized sentence.
pub fn encode(tokens: &[usize], params: &SpanClassifierParams, cfg: &ModelConfig) -> Matrix {
    encode_cached(tokens, params, cfg).h
}

/// Accumulates parameter gradients given `dL/dh`.
pub(crate) fn encoder_backward(
    tokens: &[usize],
    cache: &EncoderCache,
    dh: &Matrix,
    params: &SpanClassifierParams,
    cfg: &ModelConfig,
    grads: &mut SpanClassifierParams,
) {
    let n = tokens.len();
    let d = cfg.embed_dim;
    match cfg.encoder {
        EncoderVariant::Lookup => {
            for (i, &t) in tokens.iter().enumerate() {
                for (g, &v) in grads.embedding.row_mut(t).iter_mut().zip(dh.row(i)) {
                    *g += v;
                }
            }
        }
        EncoderVariant::Window => {
            let mut du = vec![0.0; params.mixer.weight.rows];
            let mut de = vec![0.0; d];
            let mut dc = vec![0.0; d];
            for i in 0..n {
                for ((u, &g), &p) in du.iter_mut().zip(dh.row(i)).zip(cache.pre.row(i)) {
                    *u = if p > 0.0 { g } else { 0.0 };
                }
                if du.iter().all(|&v| v == 0.0) {
                    continue;
                }
                let e_i = params.embedding.row(tokens[i]);
                grads.mixer.weight.add_outer_block(0, &du, e_i);
                grads.mixer.weight.add_outer_block(d, &du, cache.ctx.row(i));
                for (b, &u) in grads.mixer.bias.data.iter_mut().zip(&du) {
                    *b += u;
                }
                de.fill(0.0);
                dc.fill(0.0);
                params.mixer.weight.add_matvec_t_block(0, &du, &mut de);
                params.mixer.weight.add_matvec_t_block(d, &du, &mut dc);
                for (g, &v) in grads.embedding.row_mut(tokens[i]).iter_mut().zip(&de) {
                    *g += v;
                }
                let win = window(i, n, cfg.window_radius);
                let scale = 1.0 / win.len() as f64;
                for j in win {
                    for (g, &v) in grads.embedding.row_mut(tokens[j]).iter_mut().zip(&dc) {
                        *g += v * scale;
                    }
                }
            }
        }
    }
}
