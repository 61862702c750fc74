//! Labeled-CSV evaluation: accuracy, confusion matrix and stage latencies.
//!
//! Rows are `class_index,title,body` with 1-based class indices, as in the
//! DBpedia ontology files. Quoted fields use doubled-quote escaping.

use std::io::Read;
use std::str::FromStr;

use serde::Serialize;

use crate::pipeline::{Classifier, PipelineError, StageTimings};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("malformed CSV at row {row}: {reason}")]
    MalformedCsv { row: usize, reason: String },
    #[error("row {row}: class index {index} outside 1..={classes}")]
    LabelOutOfRange { row: usize, index: i64, classes: usize },
    #[error("row {row}: {source}")]
    Classify {
        row: usize,
        #[source]
        source: PipelineError,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Which CSV fields make up the classified text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TextField {
    /// `title + " " + body`.
    #[default]
    TitleBody,
    Title,
    Body,
}

impl FromStr for TextField {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "title+body" | "both" => Ok(TextField::TitleBody),
            "title" => Ok(TextField::Title),
            "body" => Ok(TextField::Body),
            other => Err(format!("unknown text field {other:?} (title+body, title, body)")),
        }
    }
}

impl TextField {
    pub fn select(self, title: &str, body: &str) -> String {
        match self {
            TextField::TitleBody => format!("{title} {body}"),
            TextField::Title => title.to_string(),
            TextField::Body => body.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// 0-based.
    pub class: usize,
    pub text: String,
}

/// Parses every row of a dataset. Class indices are checked against
/// `num_classes` and converted to 0-based.
pub fn read_dataset<R: Read>(
    reader: R,
    num_classes: usize,
    field: TextField,
    limit: Option<usize>,
) -> Result<Vec<Sample>, EvalError> {
    let mut csv = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(reader);
    let mut out = Vec::new();
    for (i, record) in csv.records().enumerate() {
        if limit.is_some_and(|l| out.len() >= l) {
            break;
        }
        let row = i + 1;
        let record = record.map_err(|e| EvalError::MalformedCsv {
            row,
            reason: e.to_string(),
        })?;
        if record.len() != 3 {
            return Err(EvalError::MalformedCsv {
                row,
                reason: format!("expected 3 fields (class_index, title, body), found {}", record.len()),
            });
        }
        let index: i64 = record[0].trim().parse().map_err(|_| EvalError::MalformedCsv {
            row,
            reason: format!("field 1: class index {:?} is not an integer", &record[0]),
        })?;
        if index < 1 || index as u64 > num_classes as u64 {
            return Err(EvalError::LabelOutOfRange {
                row,
                index,
                classes: num_classes,
            });
        }
        out.push(Sample {
            class: index as usize - 1,
            text: field.select(&record[1], &record[2]),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MeanLatency {
    pub preprocess_ms: f64,
    pub inference_ms: f64,
    pub postprocess_ms: f64,
    pub total_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub dataset: String,
    pub labels: Vec<String>,
    pub total: usize,
    pub correct: usize,
    pub accuracy: f64,
    /// Rows per true class.
    pub per_class_counts: Vec<usize>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    pub mean_latency: MeanLatency,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_text(&self) -> String {
        use std::fmt::Write;
        let mut s = String::new();
        let _ = writeln!(s, "dataset: {}", self.dataset);
        let _ = writeln!(s, "rows: {}  correct: {}  accuracy: {:.4}", self.total, self.correct, self.accuracy);
        let l = &self.mean_latency;
        let _ = writeln!(
            s,
            "mean latency ms: preprocess {:.3}  inference {:.3}  postprocess {:.3}  total {:.3}",
            l.preprocess_ms, l.inference_ms, l.postprocess_ms, l.total_ms
        );
        let (p, i, t) = crate::pipeline::DEVICE_REFERENCE_MS;
        let _ = writeln!(s, "device reference ms: preprocess {p}  inference {i}  total {t}");
        let _ = writeln!(s, "confusion (rows = true, cols = predicted):");
        for (k, row) in self.confusion.iter().enumerate() {
            let cells: Vec<String> = row.iter().map(|c| format!("{c:>6}")).collect();
            let _ = writeln!(s, "{:>24} {}", self.labels.get(k).map_or("", String::as_str), cells.join(""));
        }
        s
    }
}

/// Classifies every sample and accumulates the report.
pub fn evaluate(classifier: &Classifier, dataset: &str, samples: &[Sample]) -> Result<EvalReport, EvalError> {
    let n = classifier.model().num_classes().unwrap_or(0);
    let mut confusion = vec![vec![0usize; n]; n];
    let mut sum = StageTimings::default();
    for (row, s) in samples.iter().enumerate() {
        let c = classifier.classify(&s.text).map_err(|source| EvalError::Classify { row: row + 1, source })?;
        confusion[s.class][c.index] += 1;
        sum.preprocess_ms += c.timings.preprocess_ms;
        sum.inference_ms += c.timings.inference_ms;
        sum.postprocess_ms += c.timings.postprocess_ms;
        sum.total_ms += c.timings.total_ms;
    }
    let total = samples.len();
    let correct = (0..n).map(|k| confusion[k][k]).sum();
    let mean = |v: f64| if total == 0 { 0.0 } else { v / total as f64 };
    Ok(EvalReport {
        dataset: dataset.to_string(),
        labels: (0..n).map(|k| classifier.label_of(k)).collect(),
        total,
        correct,
        accuracy: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
        per_class_counts: confusion.iter().map(|r| r.iter().sum()).collect(),
        confusion,
        mean_latency: MeanLatency {
            preprocess_ms: mean(sum.preprocess_ms),
            inference_ms: mean(sum.inference_ms),
            postprocess_ms: mean(sum.postprocess_ms),
            total_ms: mean(sum.total_ms),
        },
    })
}
