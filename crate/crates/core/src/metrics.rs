//! Per-step training metrics and their JSONL / CSV serialization.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numfmt::format_f64;

/// One training step's snapshot.
///
/// `mean_reward`, `mean_entropy` and `kl_to_reference` describe the policy
/// that produced the step's rollout; `grad_norm`, `clip_ratio` and `mean_is`
/// come from the step's final inner update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsRecord {
    pub step: u64,
    pub mean_reward: f64,
    pub mean_entropy: f64,
    pub grad_norm: f64,
    pub clip_ratio: f64,
    pub mean_is: f64,
    pub kl_to_reference: f64,
    pub groups_retained: u64,
}

/// Field names in declaration order; the CSV header and JSON key order.
pub const METRIC_FIELDS: [&str; 8] = [
    "step",
    "mean_reward",
    "mean_entropy",
    "grad_norm",
    "clip_ratio",
    "mean_is",
    "kl_to_reference",
    "groups_retained",
];

impl MetricsRecord {
    /// Values rendered in [`METRIC_FIELDS`] order.
    pub fn rendered_values(&self) -> [String; 8] {
        [
            self.step.to_string(),
            format_f64(self.mean_reward),
            format_f64(self.mean_entropy),
            format_f64(self.grad_norm),
            format_f64(self.clip_ratio),
            format_f64(self.mean_is),
            format_f64(self.kl_to_reference),
            self.groups_retained.to_string(),
        ]
    }

    fn from_fields(values: &[&str]) -> std::result::Result<Self, String> {
        if values.len() != METRIC_FIELDS.len() {
            return Err(format!("expected {} fields, got {}", METRIC_FIELDS.len(), values.len()));
        }
        let f = |i: usize| -> std::result::Result<f64, String> {
            values[i]
                .parse::<f64>()
                .map_err(|e| format!("{}: {e}", METRIC_FIELDS[i]))
        };
        let u = |i: usize| -> std::result::Result<u64, String> {
            values[i]
                .parse::<u64>()
                .map_err(|e| format!("{}: {e}", METRIC_FIELDS[i]))
        };
        Ok(MetricsRecord {
            step: u(0)?,
            mean_reward: f(1)?,
            mean_entropy: f(2)?,
            grad_norm: f(3)?,
            clip_ratio: f(4)?,
            mean_is: f(5)?,
            kl_to_reference: f(6)?,
            groups_retained: u(7)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MetricsFormat {
    #[default]
    Jsonl,
    Csv,
}

impl MetricsFormat {
    pub fn extension(self) -> &'static str {
        match self {
            MetricsFormat::Jsonl => "jsonl",
            MetricsFormat::Csv => "csv",
        }
    }
}

impl std::str::FromStr for MetricsFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "jsonl" => Ok(MetricsFormat::Jsonl),
            "csv" => Ok(MetricsFormat::Csv),
            other => Err(Error::Config(format!("unknown metrics format {other:?}"))),
        }
    }
}

/// Renders one JSON object from `(key, already-rendered value)` pairs.
pub(crate) fn json_object(pairs: &[(&str, String)]) -> String {
    let body: Vec<String> = pairs
        .iter()
        .map(|(k, v)| format!("\"{k}\":{v}"))
        .collect();
    format!("{{{}}}", body.join(","))
}

/// JSONL: one object per line. CSV: header plus one row per record.
/// Output always ends with a newline, except JSONL with no records, which is
/// empty.
pub fn render_metrics(records: &[MetricsRecord], format: MetricsFormat) -> String {
    let mut out = String::new();
    match format {
        MetricsFormat::Jsonl => {
            for r in records {
                let values = r.rendered_values();
                let pairs: Vec<(&str, String)> = METRIC_FIELDS
                    .iter()
                    .copied()
                    .zip(values)
                    .collect();
                out.push_str(&json_object(&pairs));
                out.push('\n');
            }
        }
        MetricsFormat::Csv => {
            out.push_str(&METRIC_FIELDS.join(","));
            out.push('\n');
            for r in records {
                out.push_str(&r.rendered_values().join(","));
                out.push('\n');
            }
        }
    }
    out
}

pub fn emit_metrics(records: &[MetricsRecord], format: MetricsFormat, path: &Path) -> Result<()> {
    std::fs::write(path, render_metrics(records, format)).map_err(|e| Error::io(path, e))
}

/// Parses text produced by [`render_metrics`].
pub fn parse_metrics(text: &str, format: MetricsFormat, origin: &Path) -> Result<Vec<MetricsRecord>> {
    let err = |line: usize, message: String| Error::Parse {
        path: origin.to_path_buf(),
        message: format!("line {line}: {message}"),
    };
    match format {
        MetricsFormat::Jsonl => text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| serde_json::from_str(l).map_err(|e| err(i + 1, e.to_string())))
            .collect(),
        MetricsFormat::Csv => {
            let mut lines = text.lines().enumerate();
            match lines.next() {
                Some((_, header)) if header == METRIC_FIELDS.join(",") => {}
                _ => return Err(err(1, "missing or unexpected header".into())),
            }
            lines
                .filter(|(_, l)| !l.trim().is_empty())
                .map(|(i, l)| {
                    let fields: Vec<&str> = l.split(',').collect();
                    MetricsRecord::from_fields(&fields).map_err(|m| err(i + 1, m))
                })
                .collect()
        }
    }
}

pub fn read_metrics(path: &Path, format: MetricsFormat) -> Result<Vec<MetricsRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_metrics(&text, format, path)
}
