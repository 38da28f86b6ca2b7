//! Dataset ingestion (CSV / JSONL) and deterministic train/val/test splitting.

use crate::tensor::Prng;
use crate::text::normalize;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawRecord {
    pub text: String,
    pub label: u8,
    /// Sorted, deduplicated identity-group tags; possibly empty.
    pub subgroups: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RowError {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Default)]
pub struct LoadReport {
    pub records: Vec<RawRecord>,
    pub errors: Vec<RowError>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataFormat {
    Csv,
    Jsonl,
}

impl FromStr for DataFormat {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(DataFormat::Csv),
            "jsonl" => Ok(DataFormat::Jsonl),
            other => Err(format!("unknown dataset format {other:?} (expected csv or jsonl)")),
        }
    }
}

impl fmt::Display for DataFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DataFormat::Csv => "csv",
            DataFormat::Jsonl => "jsonl",
        })
    }
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{malformed} of {total} rows are malformed (>10%); first: line {first_line}: {first_message}")]
    TooManyMalformed {
        malformed: usize,
        total: usize,
        first_line: usize,
        first_message: String,
    },
    #[error("dataset has no valid records")]
    Empty,
    #[error("split ratios {0:?} do not sum to 1")]
    BadRatios([f64; 3]),
    #[error("the {0} split is empty")]
    EmptySplit(&'static str),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

fn parse_label(raw: &str) -> Result<u8, String> {
    match raw.trim() {
        "0" => Ok(0),
        "1" => Ok(1),
        other => Err(format!("unknown label value {other:?}")),
    }
}

fn parse_subgroups(raw: &str) -> Vec<String> {
    let mut tags: Vec<String> = raw
        .split('|')
        .map(|s| s.trim().to_lowercase())
        .filter(|s| !s.is_empty())
        .collect();
    tags.sort();
    tags.dedup();
    tags
}

fn finish_record(text: &str, label: u8, subgroups: Vec<String>) -> Result<RawRecord, String> {
    if normalize(text).is_empty() {
        return Err("text is empty after normalization".into());
    }
    Ok(RawRecord { text: text.to_string(), label, subgroups })
}

/// Loads `text,label[,subgroups]` rows. Malformed rows land in the error
/// report; more than 10% malformed aborts the load.
pub fn load_dataset(path: &Path, format: DataFormat) -> Result<LoadReport, DataError> {
    let raw = std::fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut report = LoadReport::default();
    let mut total = 0usize;
    match format {
        DataFormat::Csv => {
            let mut rdr = csv::ReaderBuilder::new()
                .has_headers(true)
                .flexible(true)
                .from_reader(raw.as_bytes());
            let headers = rdr.headers()?.clone();
            let col = |name: &str| headers.iter().position(|h| h.eq_ignore_ascii_case(name));
            let (Some(text_col), Some(label_col)) = (col("text"), col("label")) else {
                return Err(DataError::TooManyMalformed {
                    malformed: 1,
                    total: 1,
                    first_line: 1,
                    first_message: "header must contain text and label columns".into(),
                });
            };
            let sub_col = col("subgroups");
            for (i, row) in rdr.records().enumerate() {
                let line = i + 2; // header is line 1
                total += 1;
                let parsed = (|| -> Result<RawRecord, String> {
                    let row = row.map_err(|e| e.to_string())?;
                    let text = row.get(text_col).ok_or("missing text field")?;
                    let label = parse_label(row.get(label_col).ok_or("missing label field")?)?;
                    let subgroups = sub_col
                        .and_then(|c| row.get(c))
                        .map(parse_subgroups)
                        .unwrap_or_default();
                    finish_record(text, label, subgroups)
                })();
                match parsed {
                    Ok(rec) => report.records.push(rec),
                    Err(message) => report.errors.push(RowError { line, message }),
                }
            }
        }
        DataFormat::Jsonl => {
            for (i, lraw) in raw.lines().enumerate() {
                let line = i + 1;
                if lraw.trim().is_empty() {
                    continue;
                }
                total += 1;
                let parsed = (|| -> Result<RawRecord, String> {
                    let v: serde_json::Value =
                        serde_json::from_str(lraw).map_err(|e| e.to_string())?;
                    let text = v
                        .get("text")
                        .and_then(|t| t.as_str())
                        .ok_or("missing or non-string text")?;
                    let label = match v.get("label") {
                        Some(serde_json::Value::Number(n)) => {
                            parse_label(&n.to_string())?
                        }
                        Some(serde_json::Value::String(s)) => parse_label(s)?,
                        _ => return Err("missing or non-scalar label".into()),
                    };
                    let subgroups = match v.get("subgroups") {
                        None | Some(serde_json::Value::Null) => Vec::new(),
                        Some(serde_json::Value::Array(items)) => {
                            let mut tags: Vec<String> = items
                                .iter()
                                .filter_map(|t| t.as_str())
                                .map(|s| s.trim().to_lowercase())
                                .filter(|s| !s.is_empty())
                                .collect();
                            tags.sort();
                            tags.dedup();
                            tags
                        }
                        _ => return Err("subgroups must be an array of strings".into()),
                    };
                    finish_record(text, label, subgroups)
                })();
                match parsed {
                    Ok(rec) => report.records.push(rec),
                    Err(message) => report.errors.push(RowError { line, message }),
                }
            }
        }
    }
    if total == 0 || report.records.is_empty() {
        return Err(DataError::Empty);
    }
    if report.errors.len() * 10 > total {
        let first = &report.errors[0];
        return Err(DataError::TooManyMalformed {
            malformed: report.errors.len(),
            total,
            first_line: first.line,
            first_message: first.message.clone(),
        });
    }
    Ok(report)
}

#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Vec<RawRecord>,
    pub val: Vec<RawRecord>,
    pub test: Vec<RawRecord>,
}

/// Largest-remainder apportionment of n into three parts proportional to ratios.
fn apportion(n: usize, ratios: [f64; 3]) -> [usize; 3] {
    let exact: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for i in 0..(n - assigned) {
        counts[order[i % 3]] += 1;
    }
    [counts[0], counts[1], counts[2]]
}

/// Deterministic shuffle-then-cut split. Stratified mode apportions each label
/// class independently, keeping label proportions within one example per split.
pub fn split(
    records: &[RawRecord],
    ratios: [f64; 3],
    seed: u64,
    stratified: bool,
) -> Result<Splits, DataError> {
    if (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 || ratios.iter().any(|r| *r < 0.0) {
        return Err(DataError::BadRatios(ratios));
    }
    let mut rng = Prng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..records.len()).collect();
    idx.shuffle(&mut rng);

    let mut parts: [Vec<usize>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    if stratified {
        for label in [0u8, 1u8] {
            let bucket: Vec<usize> =
                idx.iter().copied().filter(|&i| records[i].label == label).collect();
            let counts = apportion(bucket.len(), ratios);
            let mut offset = 0;
            for (part, &c) in parts.iter_mut().zip(&counts) {
                part.extend_from_slice(&bucket[offset..offset + c]);
                offset += c;
            }
        }
    } else {
        let counts = apportion(idx.len(), ratios);
        let mut offset = 0;
        for (part, &c) in parts.iter_mut().zip(&counts) {
            part.extend_from_slice(&idx[offset..offset + c]);
            offset += c;
        }
    }
    let gather = |ids: &[usize]| ids.iter().map(|&i| records[i].clone()).collect::<Vec<_>>();
    let splits = Splits {
        train: gather(&parts[0]),
        val: gather(&parts[1]),
        test: gather(&parts[2]),
    };
    if splits.train.is_empty() {
        return Err(DataError::EmptySplit("train"));
    }
    if splits.val.is_empty() {
        return Err(DataError::EmptySplit("val"));
    }
    if splits.test.is_empty() {
        return Err(DataError::EmptySplit("test"));
    }
    Ok(splits)
}
