//! Threshold run, main run, AUM filter, and final-model training.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::corpus::{enumerate_samples, SampleKey, Span, SpanDataset, NON_ENTITY};
use crate::dynamics::{snapshot_epoch, DynamicsRecord, DynamicsTracker};
use crate::error::{Error, Result};
use crate::evaluation::{audit_noise, score_spans, AuditRow, ScoreReport};
use crate::model::{
    predict_spans, train_epoch, Adam, AdamConfig, EncoderVariant, ModelConfig, NegativePolicy, SpanClassifierParams,
    TrainingData, Vocab,
};
use crate::rng::stream_rng;
use crate::threshold::{build_threshold_dataset, estimate_thresholds, ThresholdPair, ThresholdPlan};

const INIT_STREAM: u64 = 1;
const TRAIN_STREAM: u64 = 2;

/// Model shape minus the parts fixed by the data (vocabulary and classes).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSettings {
    pub embed_dim: usize,
    pub encoder: EncoderVariant,
    pub window_radius: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub width_embed_dim: usize,
    pub max_width: usize,
    pub dropout: f64,
    /// Lowercase tokens before vocabulary lookup.
    pub lowercase: bool,
}

impl Default for ModelSettings {
    fn default() -> Self {
        let m = ModelConfig::default();
        ModelSettings {
            embed_dim: m.embed_dim,
            encoder: m.encoder,
            window_radius: m.window_radius,
            hidden_dim: m.hidden_dim,
            num_layers: m.num_layers,
            width_embed_dim: m.width_embed_dim,
            max_width: m.max_width,
            dropout: m.dropout,
            lowercase: false,
        }
    }
}

impl ModelSettings {
    pub fn model_config(&self, vocab_size: usize, num_classes: usize) -> Result<ModelConfig> {
        let cfg = ModelConfig {
            vocab_size,
            embed_dim: self.embed_dim,
            encoder: self.encoder,
            window_radius: self.window_radius,
            hidden_dim: self.hidden_dim,
            num_layers: self.num_layers,
            width_embed_dim: self.width_embed_dim,
            max_width: self.max_width,
            num_classes,
            dropout: self.dropout,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CleanConfig {
    /// Epochs for both the threshold run and the main run.
    pub epochs: usize,
    /// Percentile for the positive threshold, in (0, 100].
    pub k_pos: f64,
    /// Percentile for the negative threshold, in (0, 100].
    pub k_neg: f64,
    pub topneg: bool,
    /// Fraction of negatives kept per batch when `topneg` is on.
    pub topneg_ratio: f64,
    pub lr: f64,
    /// Sentences per optimizer step.
    pub batch_size: usize,
    /// Also mask the span of a removed positive instead of letting it
    /// become a negative.
    pub mask_removed_positives: bool,
    /// Persist per-epoch logits in the dynamics dumps.
    pub keep_logits: bool,
    /// Epochs for `train_final`; defaults to `epochs`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub final_epochs: Option<usize>,
    pub model: ModelSettings,
}

impl Default for CleanConfig {
    fn default() -> Self {
        CleanConfig {
            epochs: 5,
            k_pos: 100.0,
            k_neg: 90.0,
            topneg: true,
            topneg_ratio: 0.05,
            lr: 1e-3,
            batch_size: 1,
            mask_removed_positives: true,
            keep_logits: false,
            final_epochs: None,
            model: ModelSettings::default(),
        }
    }
}

impl CleanConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs must be >= 1"));
        }
        for (name, k) in [("k_pos", self.k_pos), ("k_neg", self.k_neg)] {
            if !(k > 0.0 && k <= 100.0) {
                return Err(Error::config(format!("{name} must lie in (0, 100], got {k}")));
            }
        }
        if !(self.topneg_ratio > 0.0 && self.topneg_ratio <= 1.0) {
            return Err(Error::config(format!(
                "topneg_ratio must lie in (0, 1], got {}",
                self.topneg_ratio
            )));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        if self.final_epochs == Some(0) {
            return Err(Error::config("final_epochs must be >= 1"));
        }
        self.model.model_config(2, 2).map(|_| ())
    }

    pub fn policy(&self) -> NegativePolicy {
        if self.topneg {
            NegativePolicy::TopNeg {
                ratio: self.topneg_ratio,
            }
        } else {
            NegativePolicy::All
        }
    }
}

/// Trains a freshly initialized model on `dataset.samples` for `epochs`
/// epochs, snapshotting every sample after each epoch.
fn train_tracked(
    dataset: &SpanDataset,
    vocab: &Vocab,
    model_cfg: &ModelConfig,
    cfg: &CleanConfig,
    epochs: usize,
    seed: u64,
    track: bool,
) -> Result<(SpanClassifierParams, Option<Vec<DynamicsRecord>>)> {
    let mut params = SpanClassifierParams::init(model_cfg, &mut stream_rng(seed, INIT_STREAM))?;
    let mut adam = Adam::new(
        AdamConfig {
            lr: cfg.lr,
            ..Default::default()
        },
        &params,
    );
    let mut rng = stream_rng(seed, TRAIN_STREAM);
    let data = TrainingData::from_dataset(dataset, vocab);
    let token_ids: Vec<Vec<usize>> = dataset.sentences.iter().map(|s| vocab.ids(&s.tokens)).collect();
    let mut tracker = track.then(|| DynamicsTracker::new(dataset, cfg.keep_logits));
    for epoch in 0..epochs {
        let stats = train_epoch(
            &data,
            &mut params,
            &mut adam,
            model_cfg,
            cfg.batch_size,
            cfg.policy(),
            &mut rng,
        )?;
        log::debug!(
            "epoch {}/{epochs}: loss {:.4} over {} terms",
            epoch + 1,
            stats.loss,
            stats.terms
        );
        if let Some(t) = tracker.as_mut() {
            t.push_epoch(snapshot_epoch(dataset, &token_ids, &params, model_cfg)?)?;
        }
    }
    let records = tracker.map(DynamicsTracker::finalize).transpose()?;
    Ok((params, records))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct KeptRemoved {
    pub kept: usize,
    pub removed: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FilterOutcome {
    pub removed_positives: Vec<SampleKey>,
    pub removed_negatives: Vec<SampleKey>,
}

/// Keeps a sample iff `aum >= tau` for its polarity. Returns the cleaned
/// dataset (re-enumerated) and the removed keys. `records` must follow
/// `dataset.samples` one to one.
pub fn filter_dataset(
    dataset: &SpanDataset,
    records: &[DynamicsRecord],
    tau_pos: f64,
    tau_neg: f64,
    mask_removed_positives: bool,
) -> Result<(SpanDataset, FilterOutcome)> {
    let max_width = dataset
        .max_width
        .ok_or_else(|| Error::contract("filter needs an enumerated dataset"))?;
    check_alignment(dataset, records)?;
    let mut outcome = FilterOutcome::default();
    let mut cleaned = dataset.clone();
    for r in records {
        if !r.aum.is_finite() {
            return Err(Error::numeric("dynamics", format!("non-finite aum for {:?}", r.key())));
        }
        if r.is_positive() {
            if r.aum < tau_pos {
                outcome.removed_positives.push(r.key());
                let spans = &mut cleaned.sentences[r.sentence_id].distant_spans;
                spans.retain(|s| s.position() != (r.start, r.end));
                if mask_removed_positives {
                    cleaned.mask_list.insert(r.key());
                }
            }
        } else if r.aum < tau_neg {
            outcome.removed_negatives.push(r.key());
            cleaned.mask_list.insert(r.key());
        }
    }
    Ok((enumerate_samples(&cleaned, max_width), outcome))
}

fn check_alignment(dataset: &SpanDataset, records: &[DynamicsRecord]) -> Result<()> {
    if records.len() != dataset.samples.len() {
        return Err(Error::contract(format!(
            "{} dynamics records for {} samples",
            records.len(),
            dataset.samples.len()
        )));
    }
    for (r, s) in records.iter().zip(&dataset.samples) {
        if r.key() != s.key() || r.assigned_label != s.assigned_label {
            return Err(Error::contract(format!(
                "dynamics record {:?} does not match sample order",
                r.key()
            )));
        }
    }
    Ok(())
}

/// Exhaustive post-filter check: every surviving sample existed before,
/// every original sample is either kept with its label or removed, and
/// removal happened exactly when `aum < tau` for its polarity.
pub fn verify_filter(
    original: &SpanDataset,
    records: &[DynamicsRecord],
    tau_pos: f64,
    tau_neg: f64,
    cleaned: &SpanDataset,
    mask_removed_positives: bool,
) -> Result<()> {
    let fail = |msg: String| Err(Error::contract(format!("filter invariant: {msg}")));
    let after: BTreeMap<SampleKey, usize> = cleaned.samples.iter().map(|s| (s.key(), s.assigned_label)).collect();
    let before: BTreeSet<SampleKey> = original.samples.iter().map(|s| s.key()).collect();
    if let Some(k) = after.keys().find(|k| !before.contains(k)) {
        return fail(format!("{k:?} appears only after cleaning"));
    }
    for r in records {
        let tau = if r.is_positive() { tau_pos } else { tau_neg };
        let removed = r.aum < tau;
        let label_after = after.get(&r.key());
        let consistent = match (removed, label_after) {
            (false, Some(&l)) => l == r.assigned_label,
            (true, None) => !r.is_positive() || mask_removed_positives,
            (true, Some(&l)) => r.is_positive() && !mask_removed_positives && l == NON_ENTITY,
            (false, None) => false,
        };
        if !consistent {
            return fail(format!(
                "{:?} (label {}, aum {}, tau {tau}) -> {label_after:?}",
                r.key(),
                r.assigned_label,
                r.aum
            ));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DetectionScore {
    /// Samples removed by the filter.
    pub flagged: usize,
    /// Samples whose distant label disagrees with gold.
    pub mislabeled: usize,
    pub correctly_flagged: usize,
    pub precision: f64,
    pub recall: f64,
}

impl DetectionScore {
    fn new(flagged: usize, mislabeled: usize, correctly_flagged: usize) -> Self {
        let r = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        DetectionScore {
            flagged,
            mislabeled,
            correctly_flagged,
            precision: r(correctly_flagged, flagged),
            recall: r(correctly_flagged, mislabeled),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct NoiseIdentification {
    pub positive: DetectionScore,
    pub negative: DetectionScore,
}

/// A positive sample is mislabeled when its typed span is not in gold; a
/// negative one when its position is a gold entity.
pub fn is_mislabeled(dataset: &SpanDataset, key: SampleKey, assigned_label: usize) -> Option<bool> {
    let gold = dataset.sentences.get(key.sentence_id)?.gold_spans.as_ref()?;
    Some(if assigned_label > NON_ENTITY {
        !gold.contains(&Span::new(key.start, key.end, assigned_label))
    } else {
        gold.iter().any(|g| g.position() == (key.start, key.end))
    })
}

fn noise_identification(
    dataset: &SpanDataset,
    records: &[DynamicsRecord],
    outcome: &FilterOutcome,
) -> Option<NoiseIdentification> {
    if !dataset.has_gold() {
        return None;
    }
    let removed: BTreeSet<SampleKey> = outcome
        .removed_positives
        .iter()
        .chain(&outcome.removed_negatives)
        .copied()
        .collect();
    // (flagged, mislabeled, both) per polarity
    let mut counts = [(0, 0, 0); 2];
    for r in records {
        let c = &mut counts[usize::from(r.is_positive())];
        let flagged = removed.contains(&r.key());
        let bad = is_mislabeled(dataset, r.key(), r.assigned_label)?;
        c.0 += usize::from(flagged);
        c.1 += usize::from(bad);
        c.2 += usize::from(flagged && bad);
    }
    Some(NoiseIdentification {
        negative: DetectionScore::new(counts[0].0, counts[0].1, counts[0].2),
        positive: DetectionScore::new(counts[1].0, counts[1].1, counts[1].2),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSummary {
    pub positive_quotas: BTreeMap<String, usize>,
    pub negative_quota: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CleaningReport {
    pub thresholds: ThresholdPair,
    pub threshold_samples: ThresholdSummary,
    pub total_samples: usize,
    pub positives: KeptRemoved,
    pub negatives: KeptRemoved,
    /// Positive samples per entity type.
    pub per_class: BTreeMap<String, KeptRemoved>,
    pub removed_positive_keys: Vec<SampleKey>,
    pub removed_negative_keys: Vec<SampleKey>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub noise_identification: Option<NoiseIdentification>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub audit_before: Option<Vec<AuditRow>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub audit_after: Option<Vec<AuditRow>>,
    pub seed: u64,
    pub config: CleanConfig,
}

impl CleaningReport {
    pub fn summary(&self) -> String {
        let mut s = format!(
            "tau_pos {:.6} (k={}), tau_neg {:.6} (k={})\npositives kept {} removed {}\nnegatives kept {} removed {}",
            self.thresholds.tau_pos,
            self.thresholds.k_pos,
            self.thresholds.tau_neg,
            self.thresholds.k_neg,
            self.positives.kept,
            self.positives.removed,
            self.negatives.kept,
            self.negatives.removed
        );
        if let Some(n) = &self.noise_identification {
            s.push_str(&format!(
                "\nnoise identification: positives P {:.3} R {:.3}, negatives P {:.3} R {:.3}",
                n.positive.precision, n.positive.recall, n.negative.precision, n.negative.recall
            ));
        }
        s
    }
}

#[derive(Debug, Clone)]
pub struct CleaningOutput {
    pub cleaned: SpanDataset,
    pub report: CleaningReport,
    pub plan: ThresholdPlan,
    pub threshold_dynamics: Vec<DynamicsRecord>,
    pub main_dynamics: Vec<DynamicsRecord>,
}

/// Derived seeds of the two runs.
pub fn run_seeds(seed: u64) -> (u64, u64) {
    (seed, seed.wrapping_add(1))
}

/// The full cleaning procedure. The dataset is (re-)enumerated with the
/// model's width cap; existing masks are respected.
pub fn run_dynclean(dataset: &SpanDataset, cfg: &CleanConfig, seed: u64) -> Result<CleaningOutput> {
    cfg.validate()?;
    let ds = enumerate_samples(dataset, cfg.model.max_width);
    let vocab = Vocab::build(&ds, cfg.model.lowercase);
    let c = ds.label_set.num_types();
    let (threshold_seed, main_seed) = run_seeds(seed);

    let started = Instant::now();
    let (tds, plan) = build_threshold_dataset(&ds, threshold_seed)?;
    let tcfg = cfg.model.model_config(vocab.len(), c + 2)?;
    let (_, threshold_dynamics) = train_tracked(&tds, &vocab, &tcfg, cfg, cfg.epochs, threshold_seed, true)?;
    let threshold_dynamics = threshold_dynamics.expect("tracked run");
    let thresholds = estimate_thresholds(&threshold_dynamics, &plan, cfg.k_pos, cfg.k_neg)?;
    log::info!(
        "threshold run: {:.1?}, tau_pos {}, tau_neg {}",
        started.elapsed(),
        thresholds.tau_pos,
        thresholds.tau_neg
    );

    let started = Instant::now();
    let mcfg = cfg.model.model_config(vocab.len(), c + 1)?;
    let (_, main_dynamics) = train_tracked(&ds, &vocab, &mcfg, cfg, cfg.epochs, main_seed, true)?;
    let main_dynamics = main_dynamics.expect("tracked run");
    log::info!("main run: {:.1?}", started.elapsed());

    let (cleaned, outcome) = filter_dataset(
        &ds,
        &main_dynamics,
        thresholds.tau_pos,
        thresholds.tau_neg,
        cfg.mask_removed_positives,
    )?;
    verify_filter(
        &ds,
        &main_dynamics,
        thresholds.tau_pos,
        thresholds.tau_neg,
        &cleaned,
        cfg.mask_removed_positives,
    )?;

    let report = build_report(&ds, &cleaned, &main_dynamics, &outcome, &plan, thresholds, cfg, seed)?;
    Ok(CleaningOutput {
        cleaned,
        report,
        plan,
        threshold_dynamics,
        main_dynamics,
    })
}

#[allow(clippy::too_many_arguments)]
fn build_report(
    ds: &SpanDataset,
    cleaned: &SpanDataset,
    records: &[DynamicsRecord],
    outcome: &FilterOutcome,
    plan: &ThresholdPlan,
    thresholds: ThresholdPair,
    cfg: &CleanConfig,
    seed: u64,
) -> Result<CleaningReport> {
    let labels = &ds.label_set;
    let mut per_class: BTreeMap<String, KeptRemoved> = labels
        .types()
        .iter()
        .map(|t| (t.clone(), KeptRemoved::default()))
        .collect();
    let removed_pos: BTreeSet<SampleKey> = outcome.removed_positives.iter().copied().collect();
    let mut positives = KeptRemoved::default();
    for r in records.iter().filter(|r| r.is_positive()) {
        let entry = per_class.get_mut(labels.name(r.assigned_label)).expect("known label");
        if removed_pos.contains(&r.key()) {
            entry.removed += 1;
            positives.removed += 1;
        } else {
            entry.kept += 1;
            positives.kept += 1;
        }
    }
    let total_neg = records.len() - positives.kept - positives.removed;
    let negatives = KeptRemoved {
        kept: total_neg - outcome.removed_negatives.len(),
        removed: outcome.removed_negatives.len(),
    };
    let has_gold = ds.has_gold();
    Ok(CleaningReport {
        thresholds,
        threshold_samples: ThresholdSummary {
            positive_quotas: labels
                .types()
                .iter()
                .cloned()
                .zip(plan.positive_quotas.iter().copied())
                .collect(),
            negative_quota: plan.negative_quota,
        },
        total_samples: records.len(),
        positives,
        negatives,
        per_class,
        removed_positive_keys: outcome.removed_positives.clone(),
        removed_negative_keys: outcome.removed_negatives.clone(),
        noise_identification: noise_identification(ds, records, outcome),
        audit_before: if has_gold { Some(audit_noise(ds)?) } else { None },
        audit_after: if has_gold { Some(audit_noise(cleaned)?) } else { None },
        seed,
        config: *cfg,
    })
}

/// A trained classifier with what is needed to apply it.
#[derive(Debug, Clone)]
pub struct FinalModel {
    pub params: SpanClassifierParams,
    pub vocab: Vocab,
    pub config: ModelConfig,
    pub epochs: usize,
}

impl FinalModel {
    pub fn predict(&self, dataset: &SpanDataset) -> Result<Vec<Vec<Span>>> {
        dataset
            .sentences
            .iter()
            .map(|s| predict_spans(&self.vocab.ids(&s.tokens), &self.params, &self.config))
            .collect()
    }

    /// Scores predictions against gold spans, or against the distant layer
    /// when the corpus carries no separate gold layer.
    pub fn evaluate(&self, dataset: &SpanDataset) -> Result<ScoreReport> {
        let gold: Vec<Vec<Span>> = dataset
            .sentences
            .iter()
            .map(|s| s.gold_spans.clone().unwrap_or_else(|| s.distant_spans.clone()))
            .collect();
        score_spans(&self.predict(dataset)?, &gold, &dataset.label_set)
    }
}

/// Trains on the surviving samples of a cleaned dataset (masked spans never
/// enter a batch) and optionally scores a held-out split.
pub fn train_final(
    cleaned: &SpanDataset,
    test: Option<&SpanDataset>,
    cfg: &CleanConfig,
    seed: u64,
) -> Result<(FinalModel, Option<ScoreReport>)> {
    cfg.validate()?;
    let ds = enumerate_samples(cleaned, cfg.model.max_width);
    if ds.num_positive_samples() == 0 {
        return Err(Error::config("training set has no positive samples"));
    }
    let vocab = Vocab::build(&ds, cfg.model.lowercase);
    let data = TrainingData::from_dataset(&ds, &vocab);
    if let Some(k) = data.keys().find(|k| ds.mask_list.contains(k)) {
        return Err(Error::contract(format!("masked span {k:?} reached the training data")));
    }
    let mcfg = cfg.model.model_config(vocab.len(), ds.label_set.num_classes())?;
    let epochs = cfg.final_epochs.unwrap_or(cfg.epochs);
    let started = Instant::now();
    let (params, _) = train_tracked(&ds, &vocab, &mcfg, cfg, epochs, seed, false)?;
    log::info!("final model: {epochs} epochs in {:.1?}", started.elapsed());
    let model = FinalModel {
        params,
        vocab,
        config: mcfg,
        epochs,
    };
    let score = test.map(|t| model.evaluate(t)).transpose()?;
    Ok((model, score))
}
