//! Oracles shared by the integration suites. Everything here goes through
//! the public per-span API (`encode`, `span_repr`, `forward`) rather than the
//! batched training path it is used to check.

#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use spanclean::model::{
    encode, forward, loss_and_grads, Batch, BatchItem, BatchSentence, EncoderVariant, Mode, ModelConfig,
    NegativePolicy, SpanClassifierParams,
};
use spanclean::rng::seeded;

/// A random model config within the gradient-check envelope.
pub fn random_config(rng: &mut ChaCha8Rng, encoder: EncoderVariant, dropout: f64) -> ModelConfig {
    ModelConfig {
        vocab_size: rng.random_range(6..=20),
        embed_dim: rng.random_range(2..=6),
        encoder,
        window_radius: rng.random_range(0..=2),
        hidden_dim: rng.random_range(2..=8),
        num_layers: rng.random_range(1..=2),
        width_embed_dim: rng.random_range(1..=4),
        max_width: rng.random_range(1..=3),
        num_classes: rng.random_range(2..=4),
        dropout,
    }
}

pub struct OwnedBatch {
    pub tokens: Vec<Vec<usize>>,
    pub items: Vec<Vec<BatchItem>>,
}

impl OwnedBatch {
    pub fn random(rng: &mut ChaCha8Rng, cfg: &ModelConfig, sentences: usize) -> Self {
        let mut tokens = Vec::new();
        let mut items = Vec::new();
        for _ in 0..sentences {
            let n = rng.random_range(2..=6);
            let t: Vec<usize> = (0..n).map(|_| rng.random_range(1..cfg.vocab_size)).collect();
            let mut it = Vec::new();
            for s in 0..n {
                for e in s..n.min(s + cfg.max_width + 1) {
                    let label = if rng.random::<f64>() < 0.3 {
                        rng.random_range(1..cfg.num_classes)
                    } else {
                        0
                    };
                    it.push(BatchItem {
                        start: s,
                        end: e,
                        label,
                    });
                }
            }
            tokens.push(t);
            items.push(it);
        }
        OwnedBatch { tokens, items }
    }

    pub fn batch(&self) -> Batch<'_> {
        Batch::new(
            self.tokens
                .iter()
                .zip(&self.items)
                .map(|(t, i)| BatchSentence { tokens: t, items: i })
                .collect(),
        )
    }
}

/// Summed cross-entropy over positives plus the listed negatives, computed
/// span by span through the explicit head. Dropout masks are drawn from a
/// fresh `seeded(mask_seed)` stream in batch order, matching the training
/// path's draw order when no TopNeg fallback draw happens.
pub fn reference_loss(
    batch: &Batch<'_>,
    params: &SpanClassifierParams,
    cfg: &ModelConfig,
    selected_negatives: &[(usize, usize)],
    mask_seed: u64,
) -> f64 {
    let mut rng = seeded(mask_seed);
    let mut loss = 0.0;
    for (s, sent) in batch.sentences.iter().enumerate() {
        let h = encode(sent.tokens, params, cfg);
        for (i, it) in sent.items.iter().enumerate() {
            if !it.is_positive() && !selected_negatives.contains(&(s, i)) {
                continue;
            }
            let mut x = Vec::new();
            x.extend_from_slice(h.row(it.start));
            x.extend_from_slice(h.row(it.end));
            x.extend_from_slice(params.width.row(it.end - it.start));
            let (_, p) = forward(&x, params, cfg, Mode::Train, &mut rng).unwrap();
            loss -= p[it.label].ln();
        }
    }
    loss
}

pub struct GradCheck {
    pub max_rel_error: f64,
    pub coordinates: usize,
    pub worst: String,
}

/// Compares analytic gradients with central differences of the reference
/// loss on every coordinate. Relative error is
/// `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn gradient_check(
    batch: &Batch<'_>,
    params: &SpanClassifierParams,
    cfg: &ModelConfig,
    policy: NegativePolicy,
    eps: f64,
) -> GradCheck {
    let mask_seed = 77;
    let analytic = loss_and_grads(batch, params, cfg, policy, &mut seeded(mask_seed)).unwrap();
    let selected = analytic.selected_negatives.clone();
    let base = reference_loss(batch, params, cfg, &selected, mask_seed);
    assert!(
        (base - analytic.loss).abs() <= 1e-9 * base.abs().max(1.0),
        "reference loss {base} vs training loss {}",
        analytic.loss
    );
    let names = params.tensor_names();
    let mut worst = (0.0f64, String::new());
    let mut coords = 0;
    let mut probe = params.clone();
    for (t, name) in names.iter().enumerate() {
        let len = params.tensors()[t].len();
        for k in 0..len {
            let orig = params.tensors()[t].data[k];
            probe.tensors_mut()[t].data[k] = orig + eps;
            let up = reference_loss(batch, &probe, cfg, &selected, mask_seed);
            probe.tensors_mut()[t].data[k] = orig - eps;
            let down = reference_loss(batch, &probe, cfg, &selected, mask_seed);
            probe.tensors_mut()[t].data[k] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic.grads.tensors()[t].data[k];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            coords += 1;
            if rel > worst.0 {
                worst = (rel, format!("{name}[{k}]: analytic {a:e}, numeric {numeric:e}"));
            }
        }
    }
    GradCheck {
        max_rel_error: worst.0,
        coordinates: coords,
        worst: worst.1,
    }
}
