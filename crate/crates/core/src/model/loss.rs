//! Summed cross-entropy over a batch of sentences, optional TopNeg negative
//! selection, and exact gradients.
//!
//! The first hidden layer acts on `h_i ⊕ h_j ⊕ D[w]`, so its weight splits
//! into three column blocks. Projecting every token (and every width row)
//! through those blocks once per sentence turns each span's first-layer
//! pre-activation into a sum of three cached vectors; the backward pass
//! mirrors that by accumulating per-token and per-width gradients before
//! touching the weight.

use rand::seq::index::sample;
use rand::Rng;

use super::encoder::{encode_cached, encoder_backward, EncoderCache};
use super::head::{check_finite, head_backward, head_from_pre, softmax, span_repr};
use super::{dot, Matrix, ModelConfig, SpanClassifierParams};
use crate::corpus::NON_ENTITY;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchItem {
    pub start: usize,
    pub end: usize,
    pub label: usize,
}

impl BatchItem {
    pub fn is_positive(&self) -> bool {
        self.label > NON_ENTITY
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BatchSentence<'a> {
    pub tokens: &'a [usize],
    pub items: &'a [BatchItem],
}

/// Spans of a group of sentences trained in one optimizer step. Positives
/// are items with a label above 0, negatives the rest.
#[derive(Debug, Clone, Default)]
pub struct Batch<'a> {
    pub sentences: Vec<BatchSentence<'a>>,
}

impl<'a> Batch<'a> {
    pub fn new(sentences: Vec<BatchSentence<'a>>) -> Self {
        Batch { sentences }
    }

    pub fn len(&self) -> usize {
        self.sentences.iter().map(|s| s.items.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(sentence, item)` positions of positive samples.
    pub fn positives(&self) -> Vec<(usize, usize)> {
        self.positions(true)
    }

    pub fn negatives(&self) -> Vec<(usize, usize)> {
        self.positions(false)
    }

    fn positions(&self, positive: bool) -> Vec<(usize, usize)> {
        self.sentences
            .iter()
            .enumerate()
            .flat_map(|(s, sent)| {
                sent.items
                    .iter()
                    .enumerate()
                    .filter(move |(_, it)| it.is_positive() == positive)
                    .map(move |(i, _)| (s, i))
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NegativePolicy {
    /// Every negative contributes a loss term.
    All,
    /// Only the `ceil(ratio * |X_neg|)` negatives most similar to the
    /// batch's positives contribute.
    TopNeg { ratio: f64 },
}

#[derive(Debug, Clone)]
pub struct LossAndGrads {
    pub loss: f64,
    pub grads: SpanClassifierParams,
    /// Number of samples that contributed a loss term.
    pub num_terms: usize,
    /// `(sentence, item)` positions of negatives used for the loss.
    pub selected_negatives: Vec<(usize, usize)>,
}

/// Number of negatives kept by TopNeg: `ceil(ratio * n)`, at least one when
/// any negatives exist.
pub fn topneg_count(num_negatives: usize, ratio: f64) -> usize {
    if num_negatives == 0 {
        return 0;
    }
    // the tolerance keeps e.g. 0.05 * 40 from rounding up to 3
    let k = (ratio * num_negatives as f64 - 1e-9).ceil();
    (k.max(1.0) as usize).min(num_negatives)
}

fn unit(v: &[f64]) -> Vec<f64> {
    let norm = dot(v, v).sqrt();
    if norm == 0.0 {
        vec![0.0; v.len()]
    } else {
        v.iter().map(|x| x / norm).collect()
    }
}

/// Mean cosine similarity of each negative to the positives.
pub(crate) fn similarity_scores(positives: &[Vec<f64>], negatives: &[Vec<f64>]) -> Vec<f64> {
    let Some(first) = positives.first() else {
        return vec![0.0; negatives.len()];
    };
    let mut centroid = vec![0.0; first.len()];
    for p in positives {
        for (c, u) in centroid.iter_mut().zip(unit(p)) {
            *c += u;
        }
    }
    let m = positives.len() as f64;
    for c in &mut centroid {
        *c /= m;
    }
    negatives.iter().map(|n| dot(&unit(n), &centroid)).collect()
}

/// Indices (ascending) of the negatives kept by TopNeg. Negatives are ranked
/// by mean cosine similarity to the positives, highest first, ties broken by
/// index. Without positives a uniform random subset of the same size is
/// drawn from `rng`.
pub fn topneg_select<R: Rng + ?Sized>(
    positives: &[Vec<f64>],
    negatives: &[Vec<f64>],
    ratio: f64,
    rng: &mut R,
) -> Vec<usize> {
    let k = topneg_count(negatives.len(), ratio);
    let mut chosen: Vec<usize> = if positives.is_empty() {
        sample(rng, negatives.len(), k).into_vec()
    } else {
        let phi = similarity_scores(positives, negatives);
        let mut order: Vec<usize> = (0..negatives.len()).collect();
        order.sort_by(|&a, &b| phi[b].total_cmp(&phi[a]).then(a.cmp(&b)));
        order.truncate(k);
        order
    };
    chosen.sort_unstable();
    chosen
}

struct FirstLayerProjection {
    /// `n x H` projections of each token through the start and end blocks.
    start: Matrix,
    end: Matrix,
}

fn project_tokens(h: &Matrix, params: &SpanClassifierParams, d: usize) -> FirstLayerProjection {
    let w = &params.hidden[0].weight;
    let mut start = Matrix::zeros(h.rows, w.rows);
    let mut end = Matrix::zeros(h.rows, w.rows);
    for i in 0..h.rows {
        w.matvec_block(0, h.row(i), start.row_mut(i));
        w.matvec_block(d, h.row(i), end.row_mut(i));
    }
    FirstLayerProjection { start, end }
}

/// `(L + 1) x H` projections of each width row through the width block.
pub(crate) fn project_widths(params: &SpanClassifierParams, cfg: &ModelConfig) -> Matrix {
    let w = &params.hidden[0].weight;
    let mut out = Matrix::zeros(params.width.rows, w.rows);
    for r in 0..params.width.rows {
        w.matvec_block(2 * cfg.token_dim(), params.width.row(r), out.row_mut(r));
    }
    out
}

/// First-layer pre-activation of span `(start, end)` from cached projections.
fn first_pre(proj: &FirstLayerProjection, widths: &Matrix, bias: &[f64], start: usize, end: usize) -> Vec<f64> {
    let a = proj.start.row(start);
    let b = proj.end.row(end);
    let c = widths.row(end - start);
    (0..bias.len()).map(|k| a[k] + b[k] + c[k] + bias[k]).collect()
}

/// Eval-mode logits for a list of spans of one sentence.
pub(crate) fn sentence_logits(
    tokens: &[usize],
    spans: &[(usize, usize)],
    params: &SpanClassifierParams,
    cfg: &ModelConfig,
    widths: &Matrix,
) -> Result<Vec<Vec<f64>>> {
    let cache = encode_cached(tokens, params, cfg);
    let proj = project_tokens(&cache.h, params, cfg.token_dim());
    let bias = &params.hidden[0].bias.data;
    let mut out = Vec::with_capacity(spans.len());
    for &(s, e) in spans {
        check_span(s, e, tokens.len(), cfg)?;
        let trace = head_from_pre::<rand_chacha::ChaCha8Rng>(first_pre(&proj, widths, bias, s, e), params, None);
        check_finite(&trace.logits, "logits", params)?;
        out.push(trace.logits);
    }
    Ok(out)
}

fn check_span(start: usize, end: usize, n: usize, cfg: &ModelConfig) -> Result<()> {
    if start > end || end >= n || end - start > cfg.max_width {
        return Err(Error::contract(format!(
            "span ({start}, {end}) invalid for {n} tokens and max width {}",
            cfg.max_width
        )));
    }
    Ok(())
}

/// `-log softmax(z)[label]`.
fn neg_log_prob(z: &[f64], label: usize) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = z.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
    lse - z[label]
}

/// Loss, number of contributing samples, and the selected negatives.
type Objective = (f64, usize, Vec<(usize, usize)>);

/// Summed cross-entropy of the batch (train mode) and, when `grads` is
/// given, its exact gradient accumulated into it.
///
/// Random draws happen in a fixed order: the TopNeg fallback subset (if
/// any), then one dropout mask per hidden layer for each contributing
/// sample in batch order.
pub(crate) fn batch_objective<R: Rng + ?Sized>(
    batch: &Batch<'_>,
    params: &SpanClassifierParams,
    cfg: &ModelConfig,
    policy: NegativePolicy,
    rng: &mut R,
    mut grads: Option<&mut SpanClassifierParams>,
) -> Result<Objective> {
    if batch.is_empty() {
        return Err(Error::contract("empty batch"));
    }
    for sent in &batch.sentences {
        for it in sent.items {
            check_span(it.start, it.end, sent.tokens.len(), cfg)?;
            if it.label >= cfg.num_classes {
                return Err(Error::contract(format!(
                    "label {} outside {} classes",
                    it.label, cfg.num_classes
                )));
            }
        }
    }
    let caches: Vec<EncoderCache> = batch
        .sentences
        .iter()
        .map(|s| encode_cached(s.tokens, params, cfg))
        .collect();

    let negatives = batch.negatives();
    let mut include: Vec<Vec<bool>> = batch
        .sentences
        .iter()
        .map(|s| s.items.iter().map(|it| it.is_positive()).collect())
        .collect();
    let selected = match policy {
        NegativePolicy::All => negatives.clone(),
        NegativePolicy::TopNeg { ratio } => {
            let repr = |&(s, i): &(usize, usize)| {
                let it = batch.sentences[s].items[i];
                span_repr(&caches[s].h, it.start, it.end, params, cfg)
            };
            let pos_vecs = batch.positives().iter().map(repr).collect::<Result<Vec<_>>>()?;
            let neg_vecs = negatives.iter().map(repr).collect::<Result<Vec<_>>>()?;
            topneg_select(&pos_vecs, &neg_vecs, ratio, rng)
                .into_iter()
                .map(|k| negatives[k])
                .collect()
        }
    };
    for &(s, i) in &selected {
        include[s][i] = true;
    }

    let widths = project_widths(params, cfg);
    let mut d_widths = grads.as_ref().map(|_| Matrix::zeros(widths.rows, widths.cols));
    let bias0 = &params.hidden[0].bias.data;
    let hidden = cfg.hidden_dim;
    let mut loss = 0.0;
    let mut terms = 0usize;

    for (s, sent) in batch.sentences.iter().enumerate() {
        let cache = &caches[s];
        let n = sent.tokens.len();
        let proj = project_tokens(&cache.h, params, cfg.token_dim());
        let mut d_start = Matrix::zeros(n, hidden);
        let mut d_end = Matrix::zeros(n, hidden);
        let mut touched = false;
        for (i, it) in sent.items.iter().enumerate() {
            if !include[s][i] {
                continue;
            }
            let pre0 = first_pre(&proj, &widths, bias0, it.start, it.end);
            let trace = head_from_pre(pre0, params, Some((cfg.dropout, &mut *rng)));
            check_finite(&trace.logits, "logits", params)?;
            loss += neg_log_prob(&trace.logits, it.label);
            terms += 1;
            if let Some(g) = grads.as_deref_mut() {
                let mut dz = softmax(&trace.logits);
                dz[it.label] -= 1.0;
                let dpre0 = head_backward(&trace, &dz, params, g);
                add_into(d_start.row_mut(it.start), &dpre0);
                add_into(d_end.row_mut(it.end), &dpre0);
                add_into(
                    d_widths.as_mut().expect("width grads").row_mut(it.end - it.start),
                    &dpre0,
                );
                touched = true;
            }
        }
        if let (Some(g), true) = (grads.as_deref_mut(), touched) {
            let d = cfg.token_dim();
            let w0 = &params.hidden[0].weight;
            let mut dh = Matrix::zeros(n, d);
            for t in 0..n {
                let (ds, de) = (d_start.row(t), d_end.row(t));
                g.hidden[0].weight.add_outer_block(0, ds, cache.h.row(t));
                g.hidden[0].weight.add_outer_block(d, de, cache.h.row(t));
                let row = dh.row_mut(t);
                w0.add_matvec_t_block(0, ds, row);
                w0.add_matvec_t_block(d, de, row);
            }
            encoder_backward(sent.tokens, cache, &dh, params, cfg, g);
        }
    }

    if let (Some(g), Some(dw)) = (grads, d_widths) {
        let col0 = 2 * cfg.token_dim();
        let w0 = &params.hidden[0].weight;
        for r in 0..dw.rows {
            let dc = dw.row(r);
            if dc.iter().all(|&v| v == 0.0) {
                continue;
            }
            g.hidden[0].weight.add_outer_block(col0, dc, params.width.row(r));
            w0.add_matvec_t_block(col0, dc, g.width.row_mut(r));
        }
    }
    if !loss.is_finite() {
        return Err(Error::numeric("loss", "non-finite batch loss"));
    }
    Ok((loss, terms, selected))
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Summed cross-entropy over the batch's positives and the negatives chosen
/// by `policy`, with the exact gradient of every parameter.
pub fn loss_and_grads<R: Rng + ?Sized>(
    batch: &Batch<'_>,
    params: &SpanClassifierParams,
    cfg: &ModelConfig,
    policy: NegativePolicy,
    rng: &mut R,
) -> Result<LossAndGrads> {
    let mut grads = params.zeros_like();
    let (loss, num_terms, selected_negatives) = batch_objective(batch, params, cfg, policy, rng, Some(&mut grads))?;
    Ok(LossAndGrads {
        loss,
        grads,
        num_terms,
        selected_negatives,
    })
}
