//! Distant annotation: dictionary matching, controlled noise injection, and a
//! synthetic corpus generator used by the audit harness.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::corpus::{LabelSet, Sentence, Span, SpanDataset};
use crate::error::{Error, Result};
use crate::rng::stream_rng;

/// Surface form (token sequence) to entity type.
#[derive(Debug, Clone, Default)]
pub struct Gazetteer {
    entries: HashMap<Vec<String>, usize>,
    max_len: usize,
}

impl Gazetteer {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds an entry. A surface form that is already present is overwritten.
    pub fn insert(&mut self, surface: Vec<String>, label: usize) -> Result<()> {
        if surface.is_empty() {
            return Err(Error::config("gazetteer surface form is empty"));
        }
        self.max_len = self.max_len.max(surface.len());
        if let Some(prev) = self.entries.insert(surface.clone(), label) {
            if prev != label {
                log::warn!("gazetteer entry {:?} retyped {prev} -> {label}", surface.join(" "));
            }
        }
        Ok(())
    }

    /// Reads `surface form<TAB>TYPE` lines. Surface forms are split on
    /// whitespace into tokens.
    pub fn parse(text: &str, labels: &LabelSet) -> Result<Self> {
        let mut g = Gazetteer::new();
        for (idx, line) in text.lines().enumerate() {
            let line = line.strip_suffix('\r').unwrap_or(line);
            if line.trim().is_empty() {
                continue;
            }
            let (surface, ty) = line
                .split_once('\t')
                .ok_or_else(|| Error::parse(idx + 1, "expected \"surface<TAB>TYPE\""))?;
            let label = labels
                .index_of(ty.trim())
                .ok_or_else(|| Error::parse(idx + 1, format!("unknown entity type {ty:?}")))?;
            let tokens: Vec<String> = surface.split_whitespace().map(str::to_string).collect();
            g.insert(tokens, label)
                .map_err(|e| Error::parse(idx + 1, e.to_string()))?;
        }
        Ok(g)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Longest entry starting at `start`, as `(length, label)`.
    fn longest_match(&self, tokens: &[String], start: usize) -> Option<(usize, usize)> {
        let limit = self.max_len.min(tokens.len() - start);
        (1..=limit)
            .rev()
            .find_map(|len| self.entries.get(&tokens[start..start + len]).map(|&l| (len, l)))
    }
}

/// Replaces the distant layer with greedy left-to-right longest matches.
pub fn annotate(dataset: &SpanDataset, gazetteer: &Gazetteer) -> SpanDataset {
    let mut out = dataset.clone();
    out.samples.clear();
    out.max_width = None;
    for sentence in &mut out.sentences {
        let mut spans = Vec::new();
        let mut i = 0;
        while i < sentence.tokens.len() {
            match gazetteer.longest_match(&sentence.tokens, i) {
                Some((len, label)) => {
                    spans.push(Span::new(i, i + len - 1, label));
                    i += len;
                }
                None => i += 1,
            }
        }
        sentence.distant_spans = spans;
    }
    out
}

/// Noise rates. The seed is supplied by the caller and is not part of the
/// serialized form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSpec {
    /// Fraction of gold spans dropped (false negatives).
    pub fn_rate: f64,
    /// Fraction of kept gold spans whose type is flipped.
    pub fp_type_rate: f64,
    /// Expected spurious spans per sentence.
    pub fp_spurious_rate: f64,
    /// Widest spurious span (inclusive-end width).
    pub max_width: usize,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec {
            fn_rate: 0.25,
            fp_type_rate: 0.10,
            fp_spurious_rate: 0.05,
            max_width: 2,
            seed: 0,
        }
    }
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("fn_rate", self.fn_rate), ("fp_type_rate", self.fp_type_rate)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        if !(self.fp_spurious_rate >= 0.0 && self.fp_spurious_rate.is_finite()) {
            return Err(Error::config("fp_spurious_rate must be finite and >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseOp {
    Dropped,
    Flipped,
    Added,
}

/// One corrupted span. For `Flipped`, `label` is the new type and
/// `original_label` the gold type.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct LedgerEntry {
    pub sentence_id: usize,
    pub start: usize,
    pub end: usize,
    pub label: usize,
    pub original_label: Option<usize>,
    pub op: NoiseOp,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct NoiseLedger {
    pub entries: Vec<LedgerEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct LedgerRecord {
    sentence_id: usize,
    start: usize,
    end: usize,
    label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    original_label: Option<String>,
    op: NoiseOp,
}

impl NoiseLedger {
    pub fn count(&self, op: NoiseOp) -> usize {
        self.entries.iter().filter(|e| e.op == op).count()
    }

    pub fn to_jsonl(&self, labels: &LabelSet) -> String {
        let mut out = String::new();
        for e in &self.entries {
            let rec = LedgerRecord {
                sentence_id: e.sentence_id,
                start: e.start,
                end: e.end,
                label: labels.name(e.label).to_string(),
                original_label: e.original_label.map(|l| labels.name(l).to_string()),
                op: e.op,
            };
            out.push_str(&serde_json::to_string(&rec).expect("ledger serializes"));
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str, labels: &LabelSet) -> Result<Self> {
        let mut entries = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: LedgerRecord = serde_json::from_str(line).map_err(|e| Error::parse(idx + 1, e.to_string()))?;
            let lookup = |name: &str| {
                labels
                    .index_of(name)
                    .ok_or_else(|| Error::parse(idx + 1, format!("unknown label {name:?}")))
            };
            entries.push(LedgerEntry {
                sentence_id: rec.sentence_id,
                start: rec.start,
                end: rec.end,
                label: lookup(&rec.label)?,
                original_label: rec.original_label.as_deref().map(lookup).transpose()?,
                op: rec.op,
            });
        }
        Ok(NoiseLedger { entries })
    }
}

/// Derives a distant layer from gold by dropping, retyping, and adding
/// spans. Each sentence draws from its own random stream, so the result does
/// not depend on processing order.
pub fn inject_noise(dataset: &SpanDataset, spec: &NoiseSpec) -> Result<(SpanDataset, NoiseLedger)> {
    spec.validate()?;
    let c = dataset.label_set.num_types();
    if c < 2 && spec.fp_type_rate > 0.0 {
        return Err(Error::config("type flipping needs at least two entity types"));
    }
    if c == 0 && spec.fp_spurious_rate > 0.0 {
        return Err(Error::config("spurious spans need at least one entity type"));
    }
    let poisson = if spec.fp_spurious_rate > 0.0 {
        Some(Poisson::new(spec.fp_spurious_rate).map_err(|e| Error::config(e.to_string()))?)
    } else {
        None
    };

    let mut out = dataset.clone();
    out.samples.clear();
    out.max_width = None;
    let mut ledger = NoiseLedger::default();

    for (sid, sentence) in out.sentences.iter_mut().enumerate() {
        let gold = sentence
            .gold_spans
            .clone()
            .ok_or_else(|| Error::Data(format!("sentence {sid} has no gold spans")))?;
        let mut rng = stream_rng(spec.seed, sid as u64);
        let mut distant = Vec::with_capacity(gold.len());
        for g in &gold {
            if rng.random::<f64>() < spec.fn_rate {
                ledger.entries.push(LedgerEntry {
                    sentence_id: sid,
                    start: g.start,
                    end: g.end,
                    label: g.label,
                    original_label: None,
                    op: NoiseOp::Dropped,
                });
                continue;
            }
            if spec.fp_type_rate > 0.0 && rng.random::<f64>() < spec.fp_type_rate {
                // uniform over the other c - 1 types
                let mut new = rng.random_range(1..c);
                if new >= g.label {
                    new += 1;
                }
                ledger.entries.push(LedgerEntry {
                    sentence_id: sid,
                    start: g.start,
                    end: g.end,
                    label: new,
                    original_label: Some(g.label),
                    op: NoiseOp::Flipped,
                });
                distant.push(Span::new(g.start, g.end, new));
            } else {
                distant.push(*g);
            }
        }
        if let Some(poisson) = &poisson {
            let count = poisson.sample(&mut rng) as usize;
            let n = sentence.tokens.len();
            for _ in 0..count {
                if let Some(span) = draw_spurious(&mut rng, n, spec.max_width, c, &distant, &gold) {
                    ledger.entries.push(LedgerEntry {
                        sentence_id: sid,
                        start: span.start,
                        end: span.end,
                        label: span.label,
                        original_label: None,
                        op: NoiseOp::Added,
                    });
                    distant.push(span);
                }
            }
        }
        distant.sort();
        sentence.distant_spans = distant;
    }
    Ok((out, ledger))
}

const SPURIOUS_ATTEMPTS: usize = 32;

fn draw_spurious(
    rng: &mut ChaCha8Rng,
    n: usize,
    max_width: usize,
    c: usize,
    distant: &[Span],
    gold: &[Span],
) -> Option<Span> {
    for _ in 0..SPURIOUS_ATTEMPTS {
        let width = rng.random_range(0..=max_width.min(n - 1));
        let start = rng.random_range(0..n - width);
        let label = rng.random_range(1..=c);
        let cand = Span::new(start, start + width, label);
        if distant.iter().chain(gold).all(|s| !s.overlaps(&cand)) {
            return Some(cand);
        }
    }
    None
}

/// Synthetic corpus shape. As with [`NoiseSpec`], the seed is not
/// serialized.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub vocab_size: usize,
    pub num_types: usize,
    pub num_sentences: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Probability that an entity run starts at a free position.
    pub entity_rate: f64,
    pub max_entity_len: usize,
    /// Size of each type's token pool; the rest of the vocabulary is
    /// background.
    pub tokens_per_type: usize,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            vocab_size: 200,
            num_types: 3,
            num_sentences: 500,
            min_len: 6,
            max_len: 16,
            entity_rate: 0.12,
            max_entity_len: 3,
            tokens_per_type: 10,
            seed: 0,
        }
    }
}

/// Fewest background tokens a synthetic vocabulary may have.
const MIN_BACKGROUND: usize = 10;

/// Vocabulary layout shared by every corpus generated from the same
/// `(vocab_size, num_types, tokens_per_type)`: each type owns a disjoint block of tokens and
/// the remainder is background.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthVocab {
    pub type_tokens: Vec<Vec<String>>,
    pub background: Vec<String>,
}

impl SynthVocab {
    pub fn new(vocab_size: usize, num_types: usize, tokens_per_type: usize) -> Result<Self> {
        if num_types < 2 {
            return Err(Error::config("synthetic corpus needs at least 2 entity types"));
        }
        if num_types > 99 {
            return Err(Error::config("synthetic corpus supports at most 99 entity types"));
        }
        if tokens_per_type == 0 {
            return Err(Error::config("tokens_per_type must be >= 1"));
        }
        let per_type = tokens_per_type;
        if vocab_size < per_type * num_types + MIN_BACKGROUND {
            return Err(Error::config(format!(
                "vocab size {vocab_size} too small for {num_types} types of {per_type} tokens (need >= {})",
                per_type * num_types + MIN_BACKGROUND
            )));
        }
        let type_tokens = (0..num_types)
            .map(|t| (0..per_type).map(|k| format!("e{:02}_{k:03}", t + 1)).collect())
            .collect();
        let background = (0..vocab_size - per_type * num_types)
            .map(|k| format!("w{k:04}"))
            .collect();
        Ok(SynthVocab {
            type_tokens,
            background,
        })
    }

    pub fn type_names(num_types: usize) -> Vec<String> {
        (1..=num_types).map(|t| format!("T{t:02}")).collect()
    }
}

/// Exact counts recorded while generating.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SynthBookkeeping {
    pub sentences: usize,
    pub entities_per_type: BTreeMap<String, usize>,
}

impl SynthBookkeeping {
    pub fn total_entities(&self) -> usize {
        self.entities_per_type.values().sum()
    }
}

/// Background sentences with embedded entity runs. Gold spans mark the runs
/// and the distant layer starts out equal to gold.
pub fn generate_synthetic(config: &SynthConfig) -> Result<(SpanDataset, SynthBookkeeping)> {
    if config.min_len == 0 || config.min_len > config.max_len {
        return Err(Error::config("sentence length range must satisfy 1 <= min <= max"));
    }
    if config.max_entity_len == 0 {
        return Err(Error::config("max_entity_len must be >= 1"));
    }
    if !(0.0..=1.0).contains(&config.entity_rate) {
        return Err(Error::config("entity_rate must lie in [0, 1]"));
    }
    let vocab = SynthVocab::new(config.vocab_size, config.num_types, config.tokens_per_type)?;
    let names = SynthVocab::type_names(config.num_types);
    let labels = LabelSet::new(names.clone())?;
    let mut book = SynthBookkeeping {
        sentences: config.num_sentences,
        entities_per_type: names.iter().map(|n| (n.clone(), 0)).collect(),
    };

    let mut sentences = Vec::with_capacity(config.num_sentences);
    for sid in 0..config.num_sentences {
        let mut rng = stream_rng(config.seed, sid as u64);
        let len = rng.random_range(config.min_len..=config.max_len);
        let mut tokens = Vec::with_capacity(len);
        let mut spans = Vec::new();
        while tokens.len() < len {
            let pos = tokens.len();
            if rng.random::<f64>() < config.entity_rate {
                let width = rng.random_range(1..=config.max_entity_len).min(len - pos);
                let ty = rng.random_range(0..config.num_types);
                let pool = &vocab.type_tokens[ty];
                for _ in 0..width {
                    tokens.push(pool[rng.random_range(0..pool.len())].clone());
                }
                spans.push(Span::new(pos, pos + width - 1, ty + 1));
                *book.entities_per_type.get_mut(&names[ty]).expect("type name") += 1;
            }
            // entity runs are always followed by background, keeping gold
            // boundaries unambiguous
            if tokens.len() < len {
                let bg = &vocab.background;
                tokens.push(bg[rng.random_range(0..bg.len())].clone());
            }
        }
        sentences.push(Sentence::new(tokens, spans.clone(), Some(spans))?);
    }
    Ok((SpanDataset::new(labels, sentences), book))
}
