use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::loss::{batch_objective, Batch, BatchItem, BatchSentence, NegativePolicy};
use super::vocab::Vocab;
use super::{ModelConfig, SpanClassifierParams};
use crate::corpus::{SampleKey, SpanDataset};
use crate::error::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSentence {
    pub sentence_id: usize,
    pub tokens: Vec<usize>,
    pub items: Vec<BatchItem>,
}

/// Tokenized sentences with the samples that receive supervision.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingData {
    pub sentences: Vec<TrainingSentence>,
}

impl TrainingData {
    /// One entry per sentence holding at least one enumerated sample; masked
    /// spans are already absent from `dataset.samples`.
    pub fn from_dataset(dataset: &SpanDataset, vocab: &Vocab) -> Self {
        let ranges = dataset.sentence_ranges();
        let sentences = dataset
            .sentences
            .iter()
            .enumerate()
            .filter(|(sid, _)| !ranges[*sid].is_empty())
            .map(|(sid, s)| TrainingSentence {
                sentence_id: sid,
                tokens: vocab.ids(&s.tokens),
                items: dataset.samples[ranges[sid].clone()]
                    .iter()
                    .map(|x| BatchItem {
                        start: x.start,
                        end: x.end,
                        label: x.assigned_label,
                    })
                    .collect(),
            })
            .collect();
        TrainingData { sentences }
    }

    pub fn keys(&self) -> impl Iterator<Item = SampleKey> + '_ {
        self.sentences.iter().flat_map(|s| {
            s.items
                .iter()
                .map(move |it| SampleKey::new(s.sentence_id, it.start, it.end))
        })
    }

    pub fn num_samples(&self) -> usize {
        self.sentences.iter().map(|s| s.items.len()).sum()
    }

    pub fn num_positives(&self) -> usize {
        self.sentences
            .iter()
            .flat_map(|s| &s.items)
            .filter(|it| it.is_positive())
            .count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    m: SpanClassifierParams,
    v: SpanClassifierParams,
    t: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &SpanClassifierParams) -> Self {
        Adam {
            config,
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut SpanClassifierParams, grads: &SpanClassifierParams) {
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        let tensors = params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(self.m.tensors_mut())
            .zip(self.v.tensors_mut());
        for (((p, g), m), v) in tensors {
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m.data[i] = beta1 * m.data[i] + (1.0 - beta1) * gi;
                v.data[i] = beta2 * v.data[i] + (1.0 - beta2) * gi * gi;
                let m_hat = m.data[i] / bc1;
                let v_hat = v.data[i] / bc2;
                p.data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EpochStats {
    /// Sum of batch losses.
    pub loss: f64,
    pub steps: usize,
    /// Loss terms across all batches.
    pub terms: usize,
}

/// One pass over the data: sentences shuffled, grouped `batch_size` at a
/// time, one Adam step per group.
pub fn train_epoch<R: Rng + ?Sized>(
    data: &TrainingData,
    params: &mut SpanClassifierParams,
    adam: &mut Adam,
    cfg: &ModelConfig,
    batch_size: usize,
    policy: NegativePolicy,
    rng: &mut R,
) -> Result<EpochStats> {
    let mut order: Vec<usize> = (0..data.sentences.len()).collect();
    order.shuffle(rng);
    let mut stats = EpochStats::default();
    let mut grads = params.zeros_like();
    for chunk in order.chunks(batch_size.max(1)) {
        let batch = Batch::new(
            chunk
                .iter()
                .map(|&i| BatchSentence {
                    tokens: &data.sentences[i].tokens,
                    items: &data.sentences[i].items,
                })
                .collect(),
        );
        if batch.is_empty() {
            continue;
        }
        grads.fill(0.0);
        let (loss, terms, _) = batch_objective(&batch, params, cfg, policy, rng, Some(&mut grads))?;
        adam.step(params, &grads);
        stats.loss += loss;
        stats.terms += terms;
        stats.steps += 1;
    }
    if let Some(name) = params.first_non_finite() {
        return Err(crate::Error::numeric(name, "non-finite parameter after update"));
    }
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::enumerate_samples;
    use crate::distant::{generate_synthetic, SynthConfig};
    use crate::model::EncoderVariant;
    use crate::rng::seeded;

    fn setup(n: usize) -> (TrainingData, ModelConfig) {
        let (ds, _) = generate_synthetic(&SynthConfig {
            num_sentences: n,
            seed: 1,
            ..Default::default()
        })
        .unwrap();
        let ds = enumerate_samples(&ds, 4);
        let vocab = Vocab::build(&ds, false);
        let cfg = ModelConfig {
            vocab_size: vocab.len(),
            embed_dim: 8,
            encoder: EncoderVariant::Window,
            window_radius: 1,
            hidden_dim: 16,
            num_layers: 2,
            width_embed_dim: 8,
            max_width: 4,
            num_classes: ds.label_set.num_classes(),
            dropout: 0.2,
        };
        (TrainingData::from_dataset(&ds, &vocab), cfg)
    }

    #[test]
    fn zero_learning_rate_leaves_params_unchanged() {
        let (data, cfg) = setup(20);
        let mut p = SpanClassifierParams::init(&cfg, &mut seeded(0)).unwrap();
        let before = p.clone();
        let mut adam = Adam::new(
            AdamConfig {
                lr: 0.0,
                ..Default::default()
            },
            &p,
        );
        train_epoch(&data, &mut p, &mut adam, &cfg, 16, NegativePolicy::All, &mut seeded(1)).unwrap();
        assert_eq!(p, before);
        assert_eq!(adam.steps(), 2);
    }

    #[test]
    fn same_seed_gives_bit_identical_params() {
        let (data, cfg) = setup(40);
        let run = || {
            let mut p = SpanClassifierParams::init(&cfg, &mut seeded(3)).unwrap();
            let mut adam = Adam::new(AdamConfig::default(), &p);
            let mut rng = seeded(4);
            for _ in 0..2 {
                train_epoch(
                    &data,
                    &mut p,
                    &mut adam,
                    &cfg,
                    16,
                    NegativePolicy::TopNeg { ratio: 0.05 },
                    &mut rng,
                )
                .unwrap();
            }
            p
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn training_reduces_loss() {
        let (data, cfg) = setup(60);
        let mut p = SpanClassifierParams::init(&cfg, &mut seeded(5)).unwrap();
        let mut adam = Adam::new(AdamConfig::default(), &p);
        let mut rng = seeded(6);
        let first = train_epoch(&data, &mut p, &mut adam, &cfg, 16, NegativePolicy::All, &mut rng).unwrap();
        let mut last = first;
        for _ in 0..9 {
            last = train_epoch(&data, &mut p, &mut adam, &cfg, 16, NegativePolicy::All, &mut rng).unwrap();
        }
        assert!(last.loss < 0.9 * first.loss, "{} -> {}", first.loss, last.loss);
    }

    #[test]
    fn repeated_batch_loss_is_non_increasing() {
        let (data, mut cfg) = setup(16);
        // dropout off so each step sees the same objective
        cfg.dropout = 0.0;
        let batch = Batch::new(
            data.sentences
                .iter()
                .map(|s| BatchSentence {
                    tokens: &s.tokens,
                    items: &s.items,
                })
                .collect(),
        );
        for seed in 0..5 {
            let mut p = SpanClassifierParams::init(&cfg, &mut seeded(seed)).unwrap();
            let mut adam = Adam::new(AdamConfig::default(), &p);
            let mut prev = f64::INFINITY;
            for step in 0..20 {
                let mut g = p.zeros_like();
                let (loss, _, _) =
                    batch_objective(&batch, &p, &cfg, NegativePolicy::All, &mut seeded(0), Some(&mut g)).unwrap();
                assert!(loss <= prev, "seed {seed} step {step}: {prev} -> {loss}");
                prev = loss;
                adam.step(&mut p, &g);
            }
        }
    }
}
