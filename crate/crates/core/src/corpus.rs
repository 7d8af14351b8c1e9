//! Annotated corpora, the label space, and candidate-span enumeration.
//!
//! Spans use inclusive end offsets: a span `(start, end)` covers tokens
//! `start..=end` and has width `end - start`, so a width cap of `L` allows
//! spans of up to `L + 1` tokens.
//!
//! Two on-disk formats are supported:
//!
//! * BIO: `token<TAB>tag` per line, blank line between sentences.
//! * Span records: one JSON object per line with `tokens`, `spans`, and
//!   optional `gold_spans` / `masked_spans` arrays. This is the canonical
//!   interchange format of the pipeline.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Index of the non-entity label.
pub const NON_ENTITY: usize = 0;

/// Ordered entity type names. Index 0 is the non-entity label, entity types
/// occupy `1..=c`, and `c + 1` is reserved for threshold samples.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSet {
    entity_types: Vec<String>,
}

impl LabelSet {
    pub fn new<S: Into<String>>(types: impl IntoIterator<Item = S>) -> Result<Self> {
        let entity_types: Vec<String> = types.into_iter().map(Into::into).collect();
        let mut seen = HashSet::new();
        for name in &entity_types {
            if name.is_empty() {
                return Err(Error::config("entity type names must be nonempty"));
            }
            if name == "O" {
                return Err(Error::config("\"O\" is reserved for the non-entity label"));
            }
            if !seen.insert(name.as_str()) {
                return Err(Error::config(format!("duplicate entity type {name:?}")));
            }
        }
        Ok(LabelSet { entity_types })
    }

    pub fn empty() -> Self {
        LabelSet {
            entity_types: Vec::new(),
        }
    }

    /// Number of entity types `c`.
    pub fn num_types(&self) -> usize {
        self.entity_types.len()
    }

    /// Classifier output size for an ordinary run (`c + 1`).
    pub fn num_classes(&self) -> usize {
        self.entity_types.len() + 1
    }

    /// Label index of the fake class used in threshold runs (`c + 1`).
    pub fn fake_label(&self) -> usize {
        self.entity_types.len() + 1
    }

    pub fn types(&self) -> &[String] {
        &self.entity_types
    }

    /// 1-based index of an entity type.
    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entity_types.iter().position(|t| t == name).map(|i| i + 1)
    }

    /// Display name for a label index; `O` for the non-entity label and
    /// `FAKE` for the threshold class.
    pub fn name(&self, label: usize) -> &str {
        if label == NON_ENTITY {
            "O"
        } else if label <= self.entity_types.len() {
            &self.entity_types[label - 1]
        } else {
            "FAKE"
        }
    }

    /// Label set built from the sorted, de-duplicated type names.
    pub fn from_names<'a>(names: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let sorted: BTreeSet<&str> = names.into_iter().collect();
        LabelSet::new(sorted)
    }
}

/// A labeled token span with an inclusive end.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
    pub label: usize,
}

impl Span {
    pub fn new(start: usize, end: usize, label: usize) -> Self {
        Span { start, end, label }
    }

    pub fn width(&self) -> usize {
        self.end - self.start
    }

    pub fn overlaps(&self, other: &Span) -> bool {
        self.start <= other.end && other.start <= self.end
    }

    pub fn position(&self) -> (usize, usize) {
        (self.start, self.end)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sentence {
    pub tokens: Vec<String>,
    pub gold_spans: Option<Vec<Span>>,
    pub distant_spans: Vec<Span>,
}

impl Sentence {
    /// Builds a sentence, checking span bounds and that no position carries
    /// two spans in the same annotation layer.
    pub fn new(tokens: Vec<String>, distant_spans: Vec<Span>, gold_spans: Option<Vec<Span>>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::Data("sentence has no tokens".into()));
        }
        validate_layer(&distant_spans, tokens.len(), "spans")?;
        if let Some(gold) = &gold_spans {
            validate_layer(gold, tokens.len(), "gold_spans")?;
        }
        let mut distant_spans = distant_spans;
        distant_spans.sort();
        let gold_spans = gold_spans.map(|mut g| {
            g.sort();
            g
        });
        Ok(Sentence {
            tokens,
            gold_spans,
            distant_spans,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

fn validate_layer(spans: &[Span], n: usize, layer: &str) -> Result<()> {
    let mut positions = HashSet::new();
    for s in spans {
        if s.start > s.end || s.end >= n {
            return Err(Error::Data(format!(
                "{layer}: span ({}, {}) out of range for {n} tokens",
                s.start, s.end
            )));
        }
        if s.label == NON_ENTITY {
            return Err(Error::Data(format!("{layer}: span labeled with the non-entity class")));
        }
        if !positions.insert((s.start, s.end)) {
            return Err(Error::Data(format!(
                "{layer}: duplicate span at ({}, {})",
                s.start, s.end
            )));
        }
    }
    Ok(())
}

/// Identifies a candidate span within a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SampleKey {
    pub sentence_id: usize,
    pub start: usize,
    pub end: usize,
}

impl SampleKey {
    pub fn new(sentence_id: usize, start: usize, end: usize) -> Self {
        SampleKey {
            sentence_id,
            start,
            end,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpanSample {
    pub sentence_id: usize,
    pub start: usize,
    pub end: usize,
    pub assigned_label: usize,
    pub is_threshold_sample: bool,
}

impl SpanSample {
    pub fn key(&self) -> SampleKey {
        SampleKey::new(self.sentence_id, self.start, self.end)
    }

    pub fn width(&self) -> usize {
        self.end - self.start
    }

    pub fn is_positive(&self) -> bool {
        self.assigned_label > NON_ENTITY
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpanDataset {
    pub label_set: LabelSet,
    pub sentences: Vec<Sentence>,
    /// Enumerated candidates, sorted by key. Empty until [`enumerate_samples`].
    pub samples: Vec<SpanSample>,
    pub mask_list: BTreeSet<SampleKey>,
    /// Width cap used for the current enumeration.
    pub max_width: Option<usize>,
}

impl SpanDataset {
    pub fn new(label_set: LabelSet, sentences: Vec<Sentence>) -> Self {
        SpanDataset {
            label_set,
            sentences,
            samples: Vec::new(),
            mask_list: BTreeSet::new(),
            max_width: None,
        }
    }

    pub fn has_gold(&self) -> bool {
        !self.sentences.is_empty() && self.sentences.iter().all(|s| s.gold_spans.is_some())
    }

    pub fn num_positive_samples(&self) -> usize {
        self.samples.iter().filter(|s| s.is_positive()).count()
    }

    /// Samples grouped by sentence as index ranges into `samples`.
    pub fn sentence_ranges(&self) -> Vec<std::ops::Range<usize>> {
        let mut ranges = vec![0..0; self.sentences.len()];
        let mut i = 0;
        while i < self.samples.len() {
            let sid = self.samples[i].sentence_id;
            let begin = i;
            while i < self.samples.len() && self.samples[i].sentence_id == sid {
                i += 1;
            }
            ranges[sid] = begin..i;
        }
        ranges
    }

    /// Copies gold spans from a second corpus with identical tokens.
    pub fn attach_gold(&mut self, gold: &SpanDataset) -> Result<()> {
        if gold.sentences.len() != self.sentences.len() {
            return Err(Error::Data(format!(
                "gold corpus has {} sentences, expected {}",
                gold.sentences.len(),
                self.sentences.len()
            )));
        }
        for (i, (s, g)) in self.sentences.iter_mut().zip(&gold.sentences).enumerate() {
            if s.tokens != g.tokens {
                return Err(Error::Data(format!("gold sentence {i} has different tokens")));
            }
            let mut spans = Vec::with_capacity(g.distant_spans.len());
            for span in &g.distant_spans {
                let label = self
                    .label_set
                    .index_of(gold.label_set.name(span.label))
                    .ok_or_else(|| {
                        Error::Data(format!(
                            "gold label {:?} not in label set",
                            gold.label_set.name(span.label)
                        ))
                    })?;
                spans.push(Span::new(span.start, span.end, label));
            }
            spans.sort();
            s.gold_spans = Some(spans);
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// BIO
// ---------------------------------------------------------------------------

enum Tag<'a> {
    Outside,
    Begin(&'a str),
    Inside(&'a str),
}

fn parse_tag(tag: &str, line: usize) -> Result<Tag<'_>> {
    if tag == "O" {
        return Ok(Tag::Outside);
    }
    let (prefix, ty) = tag
        .split_once('-')
        .ok_or_else(|| Error::parse(line, format!("unknown tag {tag:?}")))?;
    if ty.is_empty() {
        return Err(Error::parse(line, format!("tag {tag:?} has no type")));
    }
    match prefix {
        "B" => Ok(Tag::Begin(ty)),
        "I" => Ok(Tag::Inside(ty)),
        _ => Err(Error::parse(line, format!("unknown tag prefix {prefix:?}"))),
    }
}

/// Parses `token<TAB>tag` lines. Tags become the distant annotation layer.
///
/// With `labels = None` the label set is the sorted set of types found in the
/// input; otherwise a type outside `labels` is a parse error.
pub fn parse_bio(text: &str, labels: Option<&LabelSet>) -> Result<SpanDataset> {
    // (tokens, raw spans with type names)
    // spans carry (start, end, type, line of the opening tag)
    type RawSpan = (usize, usize, String, usize);
    let mut raw: Vec<(Vec<String>, Vec<RawSpan>)> = Vec::new();
    let mut tokens: Vec<String> = Vec::new();
    let mut spans: Vec<RawSpan> = Vec::new();
    let mut open: Option<(usize, String, usize)> = None;

    let flush = |tokens: &mut Vec<String>,
                 spans: &mut Vec<RawSpan>,
                 open: &mut Option<(usize, String, usize)>,
                 raw: &mut Vec<(Vec<String>, Vec<RawSpan>)>| {
        if let Some((start, ty, line)) = open.take() {
            spans.push((start, tokens.len() - 1, ty, line));
        }
        if !tokens.is_empty() {
            raw.push((std::mem::take(tokens), std::mem::take(spans)));
        }
    };

    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.trim().is_empty() {
            flush(&mut tokens, &mut spans, &mut open, &mut raw);
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 2 {
            return Err(Error::parse(
                lineno,
                format!("expected 2 tab-separated fields, found {}", fields.len()),
            ));
        }
        let (token, tag) = (fields[0], fields[1]);
        if token.is_empty() {
            return Err(Error::parse(lineno, "empty token"));
        }
        let pos = tokens.len();
        match parse_tag(tag, lineno)? {
            Tag::Outside => {
                if let Some((start, ty, l)) = open.take() {
                    spans.push((start, pos - 1, ty, l));
                }
            }
            Tag::Begin(ty) => {
                if let Some((start, prev, l)) = open.take() {
                    spans.push((start, pos - 1, prev, l));
                }
                open = Some((pos, ty.to_string(), lineno));
            }
            Tag::Inside(ty) => match &open {
                Some((_, cur, _)) if cur == ty => {}
                _ => {
                    // orphan I- starts a new span
                    if let Some((start, prev, l)) = open.take() {
                        spans.push((start, pos - 1, prev, l));
                    }
                    open = Some((pos, ty.to_string(), lineno));
                }
            },
        }
        tokens.push(token.to_string());
    }
    flush(&mut tokens, &mut spans, &mut open, &mut raw);

    let label_set = match labels {
        Some(l) => l.clone(),
        None => LabelSet::from_names(raw.iter().flat_map(|(_, s)| s.iter().map(|(_, _, t, _)| t.as_str())))?,
    };
    let mut sentences = Vec::with_capacity(raw.len());
    for (tokens, spans) in raw {
        let mut typed = Vec::with_capacity(spans.len());
        for (start, end, ty, line) in spans {
            let label = label_set
                .index_of(&ty)
                .ok_or_else(|| Error::parse(line, format!("unknown entity type {ty:?}")))?;
            typed.push(Span::new(start, end, label));
        }
        sentences.push(Sentence::new(tokens, typed, None)?);
    }
    Ok(SpanDataset::new(label_set, sentences))
}

/// Writes the distant layer as canonical BIO. Overlapping spans cannot be
/// expressed and are rejected.
pub fn write_bio(dataset: &SpanDataset) -> Result<String> {
    let mut out = String::new();
    for (sid, sentence) in dataset.sentences.iter().enumerate() {
        if sid > 0 {
            out.push('\n');
        }
        let mut tags: Vec<String> = vec!["O".to_string(); sentence.len()];
        let mut covered = vec![false; sentence.len()];
        for span in &sentence.distant_spans {
            let name = dataset.label_set.name(span.label);
            for pos in span.start..=span.end {
                if covered[pos] {
                    return Err(Error::Data(format!(
                        "sentence {sid}: overlapping spans cannot be written as BIO"
                    )));
                }
                covered[pos] = true;
                let prefix = if pos == span.start { "B" } else { "I" };
                tags[pos] = format!("{prefix}-{name}");
            }
        }
        for (token, tag) in sentence.tokens.iter().zip(&tags) {
            let _ = writeln!(out, "{token}\t{tag}");
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Span records
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpanRecord {
    pub start: usize,
    pub end: usize,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskRecord {
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SentenceRecord {
    pub tokens: Vec<String>,
    pub spans: Vec<SpanRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_spans: Option<Vec<SpanRecord>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub masked_spans: Vec<MaskRecord>,
}

fn to_spans(records: &[SpanRecord], labels: &LabelSet, line: usize) -> Result<Vec<Span>> {
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(records.len());
    for r in records {
        if r.end < r.start {
            return Err(Error::parse(line, format!("span end {} < start {}", r.end, r.start)));
        }
        let label = labels
            .index_of(&r.label)
            .ok_or_else(|| Error::parse(line, format!("unknown label {:?}", r.label)))?;
        if !seen.insert((r.start, r.end)) {
            return Err(Error::parse(line, format!("duplicate span ({}, {})", r.start, r.end)));
        }
        out.push(Span::new(r.start, r.end, label));
    }
    Ok(out)
}

fn to_records(spans: &[Span], labels: &LabelSet) -> Vec<SpanRecord> {
    spans
        .iter()
        .map(|s| SpanRecord {
            start: s.start,
            end: s.end,
            label: labels.name(s.label).to_string(),
        })
        .collect()
}

/// Parses span records (one JSON object per line; blank lines ignored).
///
/// With `labels = None` the label set is the sorted set of names in both the
/// `spans` and `gold_spans` layers.
pub fn parse_spans(text: &str, labels: Option<&LabelSet>) -> Result<SpanDataset> {
    let mut records = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: SentenceRecord = serde_json::from_str(line).map_err(|e| Error::parse(idx + 1, e.to_string()))?;
        records.push((idx + 1, rec));
    }
    let label_set = match labels {
        Some(l) => l.clone(),
        None => LabelSet::from_names(records.iter().flat_map(|(_, r)| {
            r.spans
                .iter()
                .chain(r.gold_spans.iter().flatten())
                .map(|s| s.label.as_str())
        }))?,
    };
    let mut sentences = Vec::with_capacity(records.len());
    let mut mask_list = BTreeSet::new();
    for (sid, (line, rec)) in records.into_iter().enumerate() {
        let n = rec.tokens.len();
        if n == 0 {
            return Err(Error::parse(line, "record has no tokens"));
        }
        let distant = to_spans(&rec.spans, &label_set, line)?;
        let gold = rec
            .gold_spans
            .as_ref()
            .map(|g| to_spans(g, &label_set, line))
            .transpose()?;
        for s in distant.iter().chain(gold.iter().flatten()) {
            if s.end >= n {
                return Err(Error::parse(
                    line,
                    format!("span ({}, {}) out of range for {n} tokens", s.start, s.end),
                ));
            }
        }
        for m in &rec.masked_spans {
            if m.end < m.start || m.end >= n {
                return Err(Error::parse(
                    line,
                    format!("masked span ({}, {}) out of range", m.start, m.end),
                ));
            }
            mask_list.insert(SampleKey::new(sid, m.start, m.end));
        }
        let sentence = Sentence::new(rec.tokens, distant, gold).map_err(|e| Error::parse(line, e.to_string()))?;
        sentences.push(sentence);
    }
    let mut ds = SpanDataset::new(label_set, sentences);
    ds.mask_list = mask_list;
    Ok(ds)
}

pub fn sentence_record(dataset: &SpanDataset, sid: usize) -> SentenceRecord {
    let sentence = &dataset.sentences[sid];
    let lo = SampleKey::new(sid, 0, 0);
    let hi = SampleKey::new(sid + 1, 0, 0);
    SentenceRecord {
        tokens: sentence.tokens.clone(),
        spans: to_records(&sentence.distant_spans, &dataset.label_set),
        gold_spans: sentence.gold_spans.as_ref().map(|g| to_records(g, &dataset.label_set)),
        masked_spans: dataset
            .mask_list
            .range(lo..hi)
            .map(|k| MaskRecord {
                start: k.start,
                end: k.end,
            })
            .collect(),
    }
}

/// Canonical span-record serialization: one line per sentence, spans sorted.
pub fn write_spans(dataset: &SpanDataset) -> String {
    let mut out = String::new();
    for sid in 0..dataset.sentences.len() {
        let rec = sentence_record(dataset, sid);
        out.push_str(&serde_json::to_string(&rec).expect("span records serialize"));
        out.push('\n');
    }
    out
}

// ---------------------------------------------------------------------------
// Enumeration and statistics
// ---------------------------------------------------------------------------

/// Number of spans of width `<= max_width` in a sentence of `n` tokens.
pub fn span_count(n: usize, max_width: usize) -> usize {
    if n == 0 {
        return 0;
    }
    (0..=max_width.min(n - 1)).map(|w| n - w).sum()
}

/// Emits every span of width `<= max_width` that is not masked. Positives
/// are exactly the distant spans that fit under the cap; wider distant spans
/// are skipped with a warning.
pub fn enumerate_samples(dataset: &SpanDataset, max_width: usize) -> SpanDataset {
    let mut out = dataset.clone();
    out.samples.clear();
    out.max_width = Some(max_width);
    let mut overlong = 0usize;
    for (sid, sentence) in dataset.sentences.iter().enumerate() {
        let n = sentence.len();
        let labels: BTreeMap<(usize, usize), usize> =
            sentence.distant_spans.iter().map(|s| (s.position(), s.label)).collect();
        overlong += sentence.distant_spans.iter().filter(|s| s.width() > max_width).count();
        for start in 0..n {
            for end in start..n.min(start + max_width + 1) {
                let key = SampleKey::new(sid, start, end);
                if dataset.mask_list.contains(&key) {
                    continue;
                }
                out.samples.push(SpanSample {
                    sentence_id: sid,
                    start,
                    end,
                    assigned_label: labels.get(&(start, end)).copied().unwrap_or(NON_ENTITY),
                    is_threshold_sample: false,
                });
            }
        }
    }
    if overlong > 0 {
        log::warn!("{overlong} distant spans exceed max width {max_width} and are not positives");
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DatasetStats {
    pub sentences: usize,
    pub tokens: usize,
    /// Distant spans of every width, per type name.
    pub entities: BTreeMap<String, usize>,
    pub total_entities: usize,
    /// Positive samples (distant spans under the width cap), per type name.
    pub positives: BTreeMap<String, usize>,
    pub total_positives: usize,
    pub negatives: usize,
    pub masked: usize,
    pub overlong_spans: usize,
    pub gold_entities: Option<usize>,
}

pub fn dataset_stats(dataset: &SpanDataset) -> DatasetStats {
    let mut stats = DatasetStats {
        sentences: dataset.sentences.len(),
        masked: dataset.mask_list.len(),
        ..Default::default()
    };
    for ty in dataset.label_set.types() {
        stats.entities.insert(ty.clone(), 0);
        stats.positives.insert(ty.clone(), 0);
    }
    for sentence in &dataset.sentences {
        stats.tokens += sentence.len();
        for span in &sentence.distant_spans {
            *stats
                .entities
                .entry(dataset.label_set.name(span.label).to_string())
                .or_default() += 1;
            stats.total_entities += 1;
            if dataset.max_width.is_some_and(|l| span.width() > l) {
                stats.overlong_spans += 1;
            }
        }
    }
    for sample in &dataset.samples {
        if sample.is_positive() {
            *stats
                .positives
                .entry(dataset.label_set.name(sample.assigned_label).to_string())
                .or_default() += 1;
            stats.total_positives += 1;
        } else {
            stats.negatives += 1;
        }
    }
    if dataset.has_gold() {
        stats.gold_entities = Some(
            dataset
                .sentences
                .iter()
                .map(|s| s.gold_spans.as_ref().map_or(0, Vec::len))
                .sum(),
        );
    }
    stats
}
