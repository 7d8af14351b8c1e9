//! Threshold samples and percentile cutoffs on their AUM.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::corpus::{SampleKey, SpanDataset};
use crate::dynamics::DynamicsRecord;
use crate::error::{Error, Result};
use crate::rng::stream_rng;

/// Stream id of the rng that picks threshold samples.
const SELECTION_STREAM: u64 = 0x7415;

/// Integer quotas proportional to `counts` that sum to `total`.
///
/// Each class first gets `floor(total * count / sum)`; leftover units go to
/// the largest fractional remainders (ties to the lower index). A class never
/// receives more than its count: any excess is handed to the next-largest
/// remainder that still has room.
pub fn largest_remainder(counts: &[usize], total: usize) -> Result<Vec<usize>> {
    let sum: usize = counts.iter().sum();
    if total > sum {
        return Err(Error::config(format!("quota {total} exceeds available {sum}")));
    }
    if total == 0 {
        return Ok(vec![0; counts.len()]);
    }
    let (t, n) = (total as u128, sum as u128);
    let mut quotas: Vec<usize> = counts.iter().map(|&c| (t * c as u128 / n) as usize).collect();
    let mut order: Vec<usize> = (0..counts.len()).collect();
    // largest remainder first; stable sort keeps lower indices first on ties
    order.sort_by_key(|&i| std::cmp::Reverse(t * counts[i] as u128 % n));
    let mut left = total - quotas.iter().sum::<usize>();
    while left > 0 {
        let before = left;
        for &i in &order {
            if left == 0 {
                break;
            }
            if quotas[i] < counts[i] {
                quotas[i] += 1;
                left -= 1;
            }
        }
        debug_assert!(left < before, "quota allocation made no progress");
    }
    Ok(quotas)
}

/// `round(positives / (c + 1))`, halves rounded up.
pub fn quota_total(num_positives: usize, num_types: usize) -> usize {
    let d = num_types + 1;
    (2 * num_positives + d) / (2 * d)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdPlan {
    /// Positive quota for each entity type, indexed by label - 1.
    pub positive_quotas: Vec<usize>,
    pub negative_quota: usize,
    pub positive_keys: Vec<SampleKey>,
    pub negative_keys: Vec<SampleKey>,
    pub fake_label: usize,
    pub seed: u64,
}

impl ThresholdPlan {
    pub fn quota_total(&self) -> usize {
        self.negative_quota
    }
}

/// Relabels a stratified set of positives and a uniform set of negatives to
/// the fake class `c + 1`. Only `samples` change; the sentences keep their
/// original annotation.
pub fn build_threshold_dataset(dataset: &SpanDataset, seed: u64) -> Result<(SpanDataset, ThresholdPlan)> {
    let c = dataset.label_set.num_types();
    let fake = dataset.label_set.fake_label();
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); c];
    let mut negatives = Vec::new();
    for (i, s) in dataset.samples.iter().enumerate() {
        if s.is_positive() {
            by_class[s.assigned_label - 1].push(i);
        } else {
            negatives.push(i);
        }
    }
    let n_pos: usize = by_class.iter().map(Vec::len).sum();
    if n_pos < c + 1 {
        return Err(Error::config(format!(
            "threshold samples need at least {} positives, found {n_pos}",
            c + 1
        )));
    }
    let total = quota_total(n_pos, c);
    if total > negatives.len() {
        return Err(Error::config(format!(
            "threshold run needs {total} negatives, found {}",
            negatives.len()
        )));
    }
    let counts: Vec<usize> = by_class.iter().map(Vec::len).collect();
    let quotas = largest_remainder(&counts, total)?;

    let mut rng = stream_rng(seed, SELECTION_STREAM);
    let mut chosen_pos = Vec::with_capacity(total);
    for (pool, &q) in by_class.iter().zip(&quotas) {
        let mut picked: Vec<usize> = sample(&mut rng, pool.len(), q).into_iter().map(|j| pool[j]).collect();
        picked.sort_unstable();
        chosen_pos.extend(picked);
    }
    let mut chosen_neg: Vec<usize> = sample(&mut rng, negatives.len(), total)
        .into_iter()
        .map(|j| negatives[j])
        .collect();
    chosen_neg.sort_unstable();
    chosen_pos.sort_unstable();

    let mut out = dataset.clone();
    for &i in chosen_pos.iter().chain(&chosen_neg) {
        out.samples[i].assigned_label = fake;
        out.samples[i].is_threshold_sample = true;
    }
    let plan = ThresholdPlan {
        positive_quotas: quotas,
        negative_quota: total,
        positive_keys: chosen_pos.iter().map(|&i| dataset.samples[i].key()).collect(),
        negative_keys: chosen_neg.iter().map(|&i| dataset.samples[i].key()).collect(),
        fake_label: fake,
        seed,
    };
    Ok((out, plan))
}

/// Nearest-rank percentile of ascending `sorted`: the value at 1-based rank
/// `ceil(k * m / 100)`, clamped to `[1, m]`.
pub fn nearest_rank(sorted: &[f64], k: f64) -> Result<f64> {
    if sorted.is_empty() {
        return Err(Error::contract("percentile of an empty set"));
    }
    if !(k > 0.0 && k <= 100.0) {
        return Err(Error::config(format!("percentile must lie in (0, 100], got {k}")));
    }
    let m = sorted.len();
    // multiply before dividing so exact products (90 * 10) stay exact; the
    // tolerance absorbs representation error in fractional k
    let rank = ((k * m as f64) / 100.0 - 1e-9).ceil() as usize;
    Ok(sorted[rank.clamp(1, m) - 1])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdPair {
    pub tau_pos: f64,
    pub tau_neg: f64,
    pub k_pos: f64,
    pub k_neg: f64,
    pub seed: u64,
    pub epochs: usize,
}

fn sorted_aums(records: &BTreeMap<SampleKey, &DynamicsRecord>, keys: &[SampleKey]) -> Result<Vec<f64>> {
    let mut v = keys
        .iter()
        .map(|k| {
            records
                .get(k)
                .map(|r| r.aum)
                .ok_or_else(|| Error::contract(format!("no dynamics for threshold sample {k:?}")))
        })
        .collect::<Result<Vec<f64>>>()?;
    v.sort_by(f64::total_cmp);
    Ok(v)
}

/// Percentile cutoffs over the finalized threshold-run dynamics; positives
/// and negatives are ranked separately.
pub fn estimate_thresholds(
    records: &[DynamicsRecord],
    plan: &ThresholdPlan,
    k_pos: f64,
    k_neg: f64,
) -> Result<ThresholdPair> {
    if plan.positive_keys.is_empty() || plan.negative_keys.is_empty() {
        return Err(Error::contract("threshold plan has no samples"));
    }
    let by_key: BTreeMap<SampleKey, &DynamicsRecord> = records.iter().map(|r| (r.key(), r)).collect();
    let epochs = by_key.get(&plan.positive_keys[0]).map_or(0, |r| r.epochs());
    Ok(ThresholdPair {
        tau_pos: nearest_rank(&sorted_aums(&by_key, &plan.positive_keys)?, k_pos)?,
        tau_neg: nearest_rank(&sorted_aums(&by_key, &plan.negative_keys)?, k_neg)?,
        k_pos,
        k_neg,
        seed: plan.seed,
        epochs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{enumerate_samples, LabelSet, Sentence, Span};
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    #[test]
    fn nearest_rank_examples() {
        let v: Vec<f64> = (1..=10).map(f64::from).collect();
        assert_eq!(nearest_rank(&v, 90.0).unwrap(), 9.0);
        assert_eq!(nearest_rank(&v, 100.0).unwrap(), 10.0);
        assert_eq!(nearest_rank(&v, 10.0).unwrap(), 1.0);
        assert_eq!(nearest_rank(&v, 0.001).unwrap(), 1.0);
        assert_eq!(nearest_rank(&v, 91.0).unwrap(), 10.0);
        assert!(matches!(nearest_rank(&[], 50.0), Err(Error::Contract(_))));
        assert!(matches!(nearest_rank(&v, 0.0), Err(Error::Config(_))));
        assert!(matches!(nearest_rank(&v, 100.5), Err(Error::Config(_))));
    }

    #[test]
    fn largest_remainder_examples() {
        assert_eq!(largest_remainder(&[50, 30, 20], 20).unwrap(), vec![10, 6, 4]);
        assert_eq!(largest_remainder(&[50, 30, 21], 20).unwrap(), vec![10, 6, 4]);
        assert_eq!(largest_remainder(&[1, 1, 1], 2).unwrap(), vec![1, 1, 0]);
        assert_eq!(largest_remainder(&[0, 5], 3).unwrap(), vec![0, 3]);
        assert!(largest_remainder(&[1, 1], 3).is_err());
    }

    #[test]
    fn quota_total_rounds() {
        assert_eq!(quota_total(100, 4), 20);
        assert_eq!(quota_total(101, 3), 25);
        assert_eq!(quota_total(102, 3), 26); // 25.5 rounds up
        assert_eq!(quota_total(4, 3), 1);
    }

    fn dataset(counts: &[usize]) -> SpanDataset {
        let names: Vec<String> = (0..counts.len()).map(|i| format!("T{i}")).collect();
        let labels = LabelSet::new(names).unwrap();
        let mut sentences = Vec::new();
        for (ty, &n) in counts.iter().enumerate() {
            for _ in 0..n {
                let tokens = vec!["x".to_string(); 3];
                sentences.push(Sentence::new(tokens, vec![Span::new(1, 1, ty + 1)], None).unwrap());
            }
        }
        enumerate_samples(&SpanDataset::new(labels, sentences), 2)
    }

    #[test]
    fn plan_matches_quota_example() {
        let ds = dataset(&[40, 30, 20, 10]);
        let (tds, plan) = build_threshold_dataset(&ds, 7).unwrap();
        assert_eq!(plan.quota_total(), 20);
        assert_eq!(plan.positive_quotas, vec![8, 6, 4, 2]);
        assert_eq!(plan.positive_keys.len(), 20);
        assert_eq!(plan.negative_keys.len(), 20);
        assert_eq!(plan.fake_label, 5);
        let pos: BTreeSet<_> = plan.positive_keys.iter().collect();
        assert!(plan.negative_keys.iter().all(|k| !pos.contains(k)));
        for (a, b) in ds.samples.iter().zip(&tds.samples) {
            let chosen = plan.positive_keys.contains(&a.key()) || plan.negative_keys.contains(&a.key());
            if chosen {
                assert_eq!(b.assigned_label, 5);
                assert!(b.is_threshold_sample);
            } else {
                assert_eq!(a, b);
            }
        }
        for k in &plan.positive_keys {
            assert!(ds.samples.iter().any(|s| s.key() == *k && s.is_positive()));
        }
        // per-class quotas hit the right classes
        let mut per_class = [0usize; 4];
        for k in &plan.positive_keys {
            let s = ds.samples.iter().find(|s| s.key() == *k).unwrap();
            per_class[s.assigned_label - 1] += 1;
        }
        assert_eq!(per_class, [8, 6, 4, 2]);
        assert_eq!(tds.sentences, ds.sentences);
        assert_eq!(build_threshold_dataset(&ds, 7).unwrap().1, plan);
    }

    #[test]
    fn too_few_positives_is_config_error() {
        let ds = dataset(&[1, 1]);
        assert!(matches!(build_threshold_dataset(&ds, 0), Err(Error::Config(_))));
    }

    fn rec(sid: usize, aum: f64) -> DynamicsRecord {
        DynamicsRecord {
            sentence_id: sid,
            start: 0,
            end: 0,
            assigned_label: 3,
            margins: vec![aum],
            probs: vec![0.5],
            aum,
            confidence: 0.5,
            variability: 0.0,
            logits: None,
        }
    }

    #[test]
    fn thresholds_rank_each_polarity_separately() {
        let records: Vec<_> = (0..20).map(|i| rec(i, i as f64)).collect();
        let plan = ThresholdPlan {
            positive_quotas: vec![10],
            negative_quota: 10,
            positive_keys: (0..10).map(|i| SampleKey::new(i, 0, 0)).collect(),
            negative_keys: (10..20).map(|i| SampleKey::new(i, 0, 0)).collect(),
            fake_label: 2,
            seed: 3,
        };
        let t = estimate_thresholds(&records, &plan, 100.0, 90.0).unwrap();
        assert_eq!(t.tau_pos, 9.0);
        assert_eq!(t.tau_neg, 18.0);
        assert_eq!((t.seed, t.epochs), (3, 1));

        let empty = ThresholdPlan {
            positive_keys: vec![],
            ..plan.clone()
        };
        assert!(matches!(
            estimate_thresholds(&records, &empty, 90.0, 90.0),
            Err(Error::Contract(_))
        ));
        assert!(matches!(
            estimate_thresholds(&records[..5], &plan, 90.0, 90.0),
            Err(Error::Contract(_))
        ));
    }

    proptest! {
        #[test]
        fn quotas_sum_and_stay_within_one(counts in proptest::collection::vec(0usize..200, 1..8), frac in 0.0f64..1.0) {
            let sum: usize = counts.iter().sum();
            let total = (sum as f64 * frac) as usize;
            let q = largest_remainder(&counts, total).unwrap();
            prop_assert_eq!(q.iter().sum::<usize>(), total);
            for (&qi, &ci) in q.iter().zip(&counts) {
                prop_assert!(qi <= ci);
                if sum > 0 {
                    let exact = total as f64 * ci as f64 / sum as f64;
                    prop_assert!((qi as f64 - exact).abs() < 1.0 + 1e-9);
                }
            }
        }

        #[test]
        fn tau_is_monotone_in_k(mut v in proptest::collection::vec(-10.0f64..10.0, 1..50), a in 0.01f64..100.0, b in 0.01f64..100.0) {
            v.sort_by(f64::total_cmp);
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(nearest_rank(&v, lo).unwrap() <= nearest_rank(&v, hi).unwrap());
        }
    }
}
