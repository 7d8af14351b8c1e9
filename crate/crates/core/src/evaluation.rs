//! Exact-match span scoring, annotation audits and data-map export.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{LabelSet, Span, SpanDataset};
use crate::dynamics::DynamicsRecord;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SpanScore {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl SpanScore {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        SpanScore {
            tp,
            fp,
            fn_,
            precision,
            recall,
            f1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ScoreReport {
    pub micro: SpanScore,
    pub per_class: BTreeMap<String, SpanScore>,
}

/// Micro and per-class exact-match scores. Each gold span can be matched by
/// at most one prediction.
pub fn score_spans(predicted: &[Vec<Span>], gold: &[Vec<Span>], labels: &LabelSet) -> Result<ScoreReport> {
    if predicted.len() != gold.len() {
        return Err(Error::contract(format!(
            "{} predicted sentences vs {} gold sentences",
            predicted.len(),
            gold.len()
        )));
    }
    // (tp, fp, fn) per label index
    let mut counts: BTreeMap<usize, (usize, usize, usize)> = (1..=labels.num_types()).map(|l| (l, (0, 0, 0))).collect();
    for (pred, gold) in predicted.iter().zip(gold) {
        let mut remaining: HashMap<Span, usize> = HashMap::new();
        for g in gold {
            *remaining.entry(*g).or_default() += 1;
        }
        for p in pred {
            let c = counts.entry(p.label).or_default();
            match remaining.get_mut(p) {
                Some(n) if *n > 0 => {
                    *n -= 1;
                    c.0 += 1;
                }
                _ => c.1 += 1,
            }
        }
        for (g, n) in remaining {
            counts.entry(g.label).or_default().2 += n;
        }
    }
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    let mut per_class = BTreeMap::new();
    for (label, (a, b, c)) in counts {
        tp += a;
        fp += b;
        fn_ += c;
        per_class.insert(labels.name(label).to_string(), SpanScore::from_counts(a, b, c));
    }
    Ok(ScoreReport {
        micro: SpanScore::from_counts(tp, fp, fn_),
        per_class,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct AuditRow {
    pub label: String,
    /// Distant spans of this type.
    pub positives: usize,
    /// Distant spans of this type that match a gold span exactly.
    pub true_positives: usize,
    /// Distant spans not in gold plus gold spans not in distant, this type.
    pub false_annotations: usize,
}

/// Compares the distant layer with gold, per entity type.
pub fn audit_noise(dataset: &SpanDataset) -> Result<Vec<AuditRow>> {
    if !dataset.has_gold() {
        return Err(Error::contract("audit needs gold spans on every sentence"));
    }
    let mut rows: Vec<AuditRow> = dataset
        .label_set
        .types()
        .iter()
        .map(|t| AuditRow {
            label: t.clone(),
            ..Default::default()
        })
        .collect();
    for s in &dataset.sentences {
        let gold = s.gold_spans.as_deref().unwrap_or_default();
        for d in &s.distant_spans {
            let row = &mut rows[d.label - 1];
            row.positives += 1;
            if gold.contains(d) {
                row.true_positives += 1;
            } else {
                row.false_annotations += 1;
            }
        }
        for g in gold {
            if !s.distant_spans.contains(g) {
                rows[g.label - 1].false_annotations += 1;
            }
        }
    }
    Ok(rows)
}

pub fn format_audit(rows: &[AuditRow]) -> String {
    let mut out = format!("{:<12} {:>10} {:>10} {:>10}\n", "type", "positives", "true", "false");
    for r in rows {
        let _ = writeln!(
            out,
            "{:<12} {:>10} {:>10} {:>10}",
            r.label, r.positives, r.true_positives, r.false_annotations
        );
    }
    out
}

// ---------------------------------------------------------------------------
// Data map
// ---------------------------------------------------------------------------

pub const DATAMAP_HEADER: &str = "sentence_id,start,end,label,aum,confidence,variability,is_positive";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatamapRow {
    pub sentence_id: usize,
    pub start: usize,
    pub end: usize,
    pub label: usize,
    pub aum: f64,
    pub confidence: f64,
    pub variability: f64,
    pub is_positive: bool,
}

impl From<&DynamicsRecord> for DatamapRow {
    fn from(r: &DynamicsRecord) -> Self {
        DatamapRow {
            sentence_id: r.sentence_id,
            start: r.start,
            end: r.end,
            label: r.assigned_label,
            aum: r.aum,
            confidence: r.confidence,
            variability: r.variability,
            is_positive: r.is_positive(),
        }
    }
}

/// CSV text with a header row; floats use the shortest representation
/// that reads back exactly.
pub fn datamap_csv(records: &[DynamicsRecord]) -> String {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(DATAMAP_HEADER.split(',')).expect("in-memory write");
    for r in records {
        w.serialize(DatamapRow::from(r)).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv output is UTF-8")
}

pub fn read_datamap(text: &str) -> Result<Vec<DatamapRow>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header = r.headers().map_err(|e| Error::parse(1, e.to_string()))?;
    if header.iter().collect::<Vec<_>>().join(",") != DATAMAP_HEADER {
        return Err(Error::parse(1, "missing data-map header"));
    }
    r.deserialize()
        .enumerate()
        .map(|(i, row)| row.map_err(|e| Error::parse(i + 2, e.to_string())))
        .collect()
}

/// AUM values splitting the records into three equal-count bands
/// (nearest-rank 1/3 and 2/3 cut points).
pub fn aum_terciles(records: &[DynamicsRecord]) -> Option<(f64, f64)> {
    if records.is_empty() {
        return None;
    }
    let mut v: Vec<f64> = records.iter().map(|r| r.aum).collect();
    v.sort_by(f64::total_cmp);
    let m = v.len();
    let at = |num: usize| v[(num * m).div_ceil(3).clamp(1, m) - 1];
    Some((at(1), at(2)))
}

const TERCILE_COLORS: [&str; 3] = ["#d62728", "#ff7f0e", "#2ca02c"];

/// Scatter of variability (x) against confidence (y), colored by AUM
/// tercile (red = lowest).
pub fn datamap_svg(records: &[DynamicsRecord]) -> String {
    let (w, h, pad) = (480.0, 480.0, 48.0);
    let plot = w - 2.0 * pad;
    let max_var = records.iter().map(|r| r.variability).fold(0.0f64, f64::max).max(1e-12);
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(out, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<rect x="{pad}" y="{pad}" width="{plot}" height="{plot}" fill="none" stroke="black"/>"#
    );
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" font-size="12" text-anchor="middle">variability (0 to {max_var:.3})</text>"#,
        w / 2.0,
        h - 12.0
    );
    let _ = writeln!(
        out,
        r#"<text x="14" y="{}" font-size="12" text-anchor="middle" transform="rotate(-90 14 {})">confidence (0 to 1)</text>"#,
        h / 2.0,
        h / 2.0
    );
    if let Some((t1, t2)) = aum_terciles(records) {
        for r in records {
            let band = if r.aum <= t1 {
                0
            } else if r.aum <= t2 {
                1
            } else {
                2
            };
            let x = pad + plot * r.variability / max_var;
            let y = pad + plot * (1.0 - r.confidence);
            let _ = writeln!(
                out,
                r#"<circle cx="{x:.2}" cy="{y:.2}" r="1.5" fill="{}" fill-opacity="0.6"/>"#,
                TERCILE_COLORS[band]
            );
        }
    }
    out.push_str("</svg>\n");
    out
}

/// Writes the data-map table and scatter plot.
pub fn export_datamap(records: &[DynamicsRecord], csv_path: &Path, svg_path: &Path) -> Result<()> {
    std::fs::write(csv_path, datamap_csv(records))?;
    std::fs::write(svg_path, datamap_svg(records))?;
    Ok(())
}
