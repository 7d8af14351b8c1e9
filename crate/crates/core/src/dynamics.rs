//! Per-sample training trajectories: margin, AUM, confidence, variability.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{SampleKey, SpanDataset};
use crate::error::{Error, Result};
use crate::model::{score_spans, softmax, ModelConfig, SpanClassifierParams};

/// `z[y] - max_{k != y} z[k]`.
pub fn margin(z: &[f64], assigned: usize) -> Result<f64> {
    if z.len() < 2 {
        return Err(Error::contract(format!(
            "margin needs at least 2 logits, got {}",
            z.len()
        )));
    }
    if assigned >= z.len() {
        return Err(Error::contract(format!(
            "assigned label {assigned} out of range for {} logits",
            z.len()
        )));
    }
    let other = z
        .iter()
        .enumerate()
        .filter(|&(k, _)| k != assigned)
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(z[assigned] - other)
}

/// One sample's eval-mode outputs at the end of an epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSnapshot {
    pub logits: Vec<f64>,
    pub margin: f64,
    pub prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicsRecord {
    pub sentence_id: usize,
    pub start: usize,
    pub end: usize,
    pub assigned_label: usize,
    pub margins: Vec<f64>,
    pub probs: Vec<f64>,
    pub aum: f64,
    pub confidence: f64,
    pub variability: f64,
    /// Per-epoch logits, kept only when requested.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logits: Option<Vec<Vec<f64>>>,
}

impl DynamicsRecord {
    pub fn key(&self) -> SampleKey {
        SampleKey::new(self.sentence_id, self.start, self.end)
    }

    pub fn is_positive(&self) -> bool {
        self.assigned_label > crate::corpus::NON_ENTITY
    }

    pub fn epochs(&self) -> usize {
        self.margins.len()
    }
}

/// Eval-mode pass over every enumerated sample of `dataset`, in sample
/// order. `token_ids[sid]` is the tokenized sentence `sid`.
///
/// Sentences are scored in parallel; each sample's value depends only on
/// its own sentence, so the result is identical to a sequential pass.
pub fn snapshot_epoch(
    dataset: &SpanDataset,
    token_ids: &[Vec<usize>],
    params: &SpanClassifierParams,
    cfg: &ModelConfig,
) -> Result<Vec<SampleSnapshot>> {
    let ranges = dataset.sentence_ranges();
    let per_sentence: Vec<Result<Vec<SampleSnapshot>>> = ranges
        .par_iter()
        .enumerate()
        .filter(|(_, r)| !r.is_empty())
        .map(|(sid, r)| {
            let samples = &dataset.samples[r.clone()];
            let spans: Vec<(usize, usize)> = samples.iter().map(|s| (s.start, s.end)).collect();
            let logits = score_spans(&token_ids[sid], &spans, params, cfg)?;
            samples
                .iter()
                .zip(logits)
                .map(|(s, z)| {
                    let m = margin(&z, s.assigned_label)?;
                    let prob = softmax(&z)[s.assigned_label];
                    Ok(SampleSnapshot {
                        logits: z,
                        margin: m,
                        prob,
                    })
                })
                .collect()
        })
        .collect();
    let mut out = Vec::with_capacity(dataset.samples.len());
    for chunk in per_sentence {
        out.extend(chunk?);
    }
    Ok(out)
}

/// Accumulates snapshots across epochs for a fixed sample set.
#[derive(Debug, Clone)]
pub struct DynamicsTracker {
    records: Vec<DynamicsRecord>,
    keep_logits: bool,
}

impl DynamicsTracker {
    pub fn new(dataset: &SpanDataset, keep_logits: bool) -> Self {
        let records = dataset
            .samples
            .iter()
            .map(|s| DynamicsRecord {
                sentence_id: s.sentence_id,
                start: s.start,
                end: s.end,
                assigned_label: s.assigned_label,
                margins: Vec::new(),
                probs: Vec::new(),
                aum: 0.0,
                confidence: 0.0,
                variability: 0.0,
                logits: keep_logits.then(Vec::new),
            })
            .collect();
        DynamicsTracker { records, keep_logits }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Appends one epoch; `snapshots` must follow the tracker's sample order.
    pub fn push_epoch(&mut self, snapshots: Vec<SampleSnapshot>) -> Result<()> {
        if snapshots.len() != self.records.len() {
            return Err(Error::contract(format!(
                "snapshot has {} samples, tracker has {}",
                snapshots.len(),
                self.records.len()
            )));
        }
        for (rec, snap) in self.records.iter_mut().zip(snapshots) {
            rec.margins.push(snap.margin);
            rec.probs.push(snap.prob);
            if self.keep_logits {
                rec.logits.get_or_insert_with(Vec::new).push(snap.logits);
            }
        }
        Ok(())
    }

    pub fn finalize(self) -> Result<Vec<DynamicsRecord>> {
        finalize(self.records)
    }
}

/// Fills aum, confidence and (population) variability. Any non-finite
/// aggregate is a numeric error naming the sample.
pub fn finalize(mut records: Vec<DynamicsRecord>) -> Result<Vec<DynamicsRecord>> {
    for r in &mut records {
        let e = r.margins.len();
        if e == 0 || r.probs.len() != e {
            return Err(Error::contract(format!(
                "record {:?} has {} margins and {} probs",
                r.key(),
                e,
                r.probs.len()
            )));
        }
        let n = e as f64;
        r.aum = r.margins.iter().sum::<f64>() / n;
        r.confidence = r.probs.iter().sum::<f64>() / n;
        let var = r.probs.iter().map(|p| (p - r.confidence).powi(2)).sum::<f64>() / n;
        r.variability = var.sqrt();
        if !(r.aum.is_finite() && r.confidence.is_finite() && r.variability.is_finite()) {
            return Err(Error::numeric(
                "dynamics",
                format!("non-finite aggregate for sample {:?}: aum {}", r.key(), r.aum),
            ));
        }
    }
    Ok(records)
}

pub fn write_dynamics(records: &[DynamicsRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("dynamics records serialize"));
        out.push('\n');
    }
    out
}

pub fn read_dynamics(text: &str) -> Result<Vec<DynamicsRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::parse(i + 1, e.to_string())))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{enumerate_samples, parse_spans};
    use crate::model::{EncoderVariant, Vocab};
    use crate::rng::seeded;
    use proptest::prelude::*;

    fn record(margins: Vec<f64>, probs: Vec<f64>) -> DynamicsRecord {
        DynamicsRecord {
            sentence_id: 0,
            start: 0,
            end: 0,
            assigned_label: 1,
            margins,
            probs,
            aum: 0.0,
            confidence: 0.0,
            variability: 0.0,
            logits: None,
        }
    }

    #[test]
    fn margin_examples() {
        assert_eq!(margin(&[2.0, 5.0, 1.0], 1).unwrap(), 3.0);
        assert_eq!(margin(&[0.0, 0.0], 0).unwrap(), 0.0);
        assert_eq!(margin(&[0.0, 0.0], 1).unwrap(), 0.0);
        assert!(margin(&[2.0, 5.0, 1.0], 0).unwrap() < 0.0);
        assert!(matches!(margin(&[1.0], 0), Err(Error::Contract(_))));
        assert!(matches!(margin(&[1.0, 2.0], 2), Err(Error::Contract(_))));
    }

    #[test]
    fn finalize_examples() {
        let r = &finalize(vec![record(vec![3.0, 1.0, -1.0], vec![0.9, 0.8, 0.7])]).unwrap()[0];
        assert_eq!(r.aum, 1.0);
        assert!((r.confidence - 0.8).abs() < 1e-15);
        assert!((r.variability - (0.02f64 / 3.0).sqrt()).abs() < 1e-12);
        assert!((r.variability - 0.0816497).abs() < 1e-7);

        let r = &finalize(vec![record(vec![2.5], vec![0.4])]).unwrap()[0];
        assert_eq!((r.aum, r.confidence, r.variability), (2.5, 0.4, 0.0));

        assert!(matches!(
            finalize(vec![record(vec![], vec![])]),
            Err(Error::Contract(_))
        ));
        assert!(matches!(
            finalize(vec![record(vec![f64::INFINITY], vec![0.5])]),
            Err(Error::Numeric { .. })
        ));
    }

    fn small_setup() -> (SpanDataset, Vec<Vec<usize>>, ModelConfig) {
        let text = concat!(
            r#"{"tokens":["a","b","c","d"],"spans":[{"start":0,"end":1,"label":"X"}]}"#,
            "\n",
            r#"{"tokens":["c","a"],"spans":[{"start":1,"end":1,"label":"Y"}]}"#,
            "\n",
            r#"{"tokens":["d"],"spans":[]}"#,
            "\n",
        );
        let ds = enumerate_samples(&parse_spans(text, None).unwrap(), 2);
        let vocab = Vocab::build(&ds, false);
        let ids = ds.sentences.iter().map(|s| vocab.ids(&s.tokens)).collect();
        let cfg = ModelConfig {
            vocab_size: vocab.len(),
            embed_dim: 3,
            encoder: EncoderVariant::Window,
            window_radius: 1,
            hidden_dim: 4,
            num_layers: 2,
            width_embed_dim: 2,
            max_width: 2,
            num_classes: 3,
            dropout: 0.5,
        };
        (ds, ids, cfg)
    }

    #[test]
    fn zero_model_snapshot_has_zero_margins() {
        let (ds, ids, cfg) = small_setup();
        let snaps = snapshot_epoch(&ds, &ids, &SpanClassifierParams::zeros(&cfg), &cfg).unwrap();
        assert_eq!(snaps.len(), ds.samples.len());
        for s in snaps {
            assert_eq!(s.margin, 0.0);
            assert!((s.prob - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn parallel_snapshot_matches_sample_by_sample() {
        let (ds, ids, cfg) = small_setup();
        let params = SpanClassifierParams::init(&cfg, &mut seeded(4)).unwrap();
        let snaps = snapshot_epoch(&ds, &ids, &params, &cfg).unwrap();
        for (s, snap) in ds.samples.iter().zip(&snaps) {
            let z = &score_spans(&ids[s.sentence_id], &[(s.start, s.end)], &params, &cfg).unwrap()[0];
            assert_eq!(&snap.logits, z);
            assert_eq!(snap.margin, margin(z, s.assigned_label).unwrap());
        }
    }

    #[test]
    fn tracker_records_every_epoch_and_round_trips() {
        let (ds, ids, cfg) = small_setup();
        let mut tracker = DynamicsTracker::new(&ds, true);
        let mut rng = seeded(1);
        for _ in 0..3 {
            let params = SpanClassifierParams::init(&cfg, &mut rng).unwrap();
            tracker
                .push_epoch(snapshot_epoch(&ds, &ids, &params, &cfg).unwrap())
                .unwrap();
        }
        let records = tracker.finalize().unwrap();
        assert_eq!(records.len(), ds.samples.len());
        for (r, s) in records.iter().zip(&ds.samples) {
            assert_eq!(r.key(), s.key());
            assert_eq!(r.epochs(), 3);
            assert_eq!(r.logits.as_ref().unwrap().len(), 3);
            assert!(r.probs.iter().all(|&p| p > 0.0 && p < 1.0));
        }
        assert_eq!(read_dynamics(&write_dynamics(&records)).unwrap(), records);
    }

    proptest! {
        #[test]
        fn aggregates_are_means_and_variability_is_non_negative(
            pairs in proptest::collection::vec((-20.0f64..20.0, 0.001f64..0.999), 1..12)
        ) {
            let (m, p): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let r = &finalize(vec![record(m.clone(), p.clone())]).unwrap()[0];
            let mut sum = 0.0;
            for v in &m { sum += v; }
            prop_assert_eq!(r.aum, sum / m.len() as f64);
            prop_assert!(r.variability >= 0.0);
            let lo = p.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(r.confidence >= lo - 1e-15 && r.confidence <= hi + 1e-15);
        }

        #[test]
        fn margin_sign_follows_argmax(z in proptest::collection::vec(-10.0f64..10.0, 2..6), y in 0usize..6) {
            let y = y % z.len();
            let m = margin(&z, y).unwrap();
            let others_max = z.iter().enumerate().filter(|&(k, _)| k != y).map(|(_, &v)| v).fold(f64::NEG_INFINITY, f64::max);
            if z[y] > others_max { prop_assert!(m > 0.0); }
            if z[y] < others_max { prop_assert!(m < 0.0); }
        }
    }
}
