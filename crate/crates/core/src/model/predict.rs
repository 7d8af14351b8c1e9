use std::cmp::Ordering;

use super::head::softmax;
use super::loss::{project_widths, sentence_logits};
use super::{ModelConfig, SpanClassifierParams};
use crate::corpus::{Span, NON_ENTITY};
use crate::error::Result;

/// Eval-mode logits for the given spans of one tokenized sentence.
pub fn score_spans(
    tokens: &[usize],
    spans: &[(usize, usize)],
    params: &SpanClassifierParams,
    cfg: &ModelConfig,
) -> Result<Vec<Vec<f64>>> {
    sentence_logits(tokens, spans, params, cfg, &project_widths(params, cfg))
}

/// A scored candidate entity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Candidate {
    pub span: Span,
    pub prob: f64,
}

/// Greedy overlap resolution: highest probability first, then earlier
/// start, then shorter width.
pub(crate) fn resolve_overlaps(mut candidates: Vec<Candidate>) -> Vec<Span> {
    candidates.sort_by(|a, b| {
        b.prob
            .total_cmp(&a.prob)
            .then(a.span.start.cmp(&b.span.start))
            .then(a.span.width().cmp(&b.span.width()))
    });
    let mut kept: Vec<Span> = Vec::new();
    for c in candidates {
        if kept.iter().all(|k| !k.overlaps(&c.span)) {
            kept.push(c.span);
        }
    }
    kept.sort();
    kept
}

/// First index of the largest value.
fn argmax(p: &[f64]) -> usize {
    let mut best = NON_ENTITY;
    for (i, v) in p.iter().enumerate() {
        if v.total_cmp(&p[best]) == Ordering::Greater {
            best = i;
        }
    }
    best
}

/// Decodes per-span class probabilities into non-overlapping typed spans:
/// each span takes its argmax class, non-entity spans are dropped, and
/// overlaps are resolved greedily by probability, then earlier start, then
/// shorter width.
pub fn decode_spans(spans: &[(usize, usize)], probs: &[Vec<f64>]) -> Vec<Span> {
    let candidates = spans
        .iter()
        .zip(probs)
        .filter_map(|(&(s, e), p)| {
            let k = argmax(p);
            (k != NON_ENTITY).then(|| Candidate {
                span: Span::new(s, e, k),
                prob: p[k],
            })
        })
        .collect();
    resolve_overlaps(candidates)
}

/// Non-overlapping typed spans predicted for a tokenized sentence.
pub fn predict_spans(tokens: &[usize], params: &SpanClassifierParams, cfg: &ModelConfig) -> Result<Vec<Span>> {
    let n = tokens.len();
    let spans: Vec<(usize, usize)> = (0..n)
        .flat_map(|s| (s..n.min(s + cfg.max_width + 1)).map(move |e| (s, e)))
        .collect();
    let probs: Vec<Vec<f64>> = score_spans(tokens, &spans, params, cfg)?
        .iter()
        .map(|z| softmax(z))
        .collect();
    Ok(decode_spans(&spans, &probs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::EncoderVariant;

    fn cand(s: usize, e: usize, l: usize, prob: f64) -> Candidate {
        Candidate {
            span: Span::new(s, e, l),
            prob,
        }
    }

    #[test]
    fn higher_probability_wins_overlap() {
        let kept = resolve_overlaps(vec![cand(0, 2, 1, 0.8), cand(1, 3, 2, 0.9)]);
        assert_eq!(kept, vec![Span::new(1, 3, 2)]);
    }

    #[test]
    fn disjoint_candidates_kept() {
        let kept = resolve_overlaps(vec![cand(0, 1, 1, 0.6), cand(3, 3, 2, 0.7)]);
        assert_eq!(kept, vec![Span::new(0, 1, 1), Span::new(3, 3, 2)]);
    }

    #[test]
    fn ties_prefer_earlier_then_shorter() {
        let kept = resolve_overlaps(vec![cand(1, 2, 1, 0.7), cand(0, 1, 1, 0.7)]);
        assert_eq!(kept, vec![Span::new(0, 1, 1)]);
        let kept = resolve_overlaps(vec![cand(0, 2, 1, 0.7), cand(0, 0, 2, 0.7)]);
        assert_eq!(kept, vec![Span::new(0, 0, 2)]);
    }

    #[test]
    fn all_non_entity_predicts_nothing() {
        let cfg = ModelConfig {
            vocab_size: 6,
            embed_dim: 2,
            encoder: EncoderVariant::Lookup,
            window_radius: 0,
            hidden_dim: 3,
            num_layers: 2,
            width_embed_dim: 2,
            max_width: 3,
            num_classes: 3,
            dropout: 0.0,
        };
        let mut p = SpanClassifierParams::zeros(&cfg);
        p.output.bias.data = vec![2.0, 0.0, 0.0];
        assert!(predict_spans(&[2, 3, 4, 5], &p, &cfg).unwrap().is_empty());
        p.output.bias.data = vec![0.0, 2.0, 0.0];
        // every span is a candidate with equal probability: the earliest,
        // shortest spans win
        let pred = predict_spans(&[2, 3, 4], &p, &cfg).unwrap();
        assert_eq!(pred, vec![Span::new(0, 0, 1), Span::new(1, 1, 1), Span::new(2, 2, 1)]);
    }
}
