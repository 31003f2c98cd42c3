use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{LabeledSeries, SeriesLabels};
use crate::error::{Error, Result};

const FIXED_COLUMNS: [&str; 3] = ["subject", "label", "timestamp"];

/// Column mapping for [`load_csv`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CsvSchema {
    /// Channel columns to keep, in order. `None` keeps every channel column.
    #[serde(default)]
    pub channels: Option<Vec<String>>,
    /// Nominal sample rate in Hz. When absent it is inferred from the median
    /// timestamp spacing of each subject.
    #[serde(default)]
    pub sample_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CsvData {
    pub series: Vec<LabeledSeries>,
    pub class_names: Vec<String>,
    pub channel_names: Vec<String>,
}

struct Row {
    line: u64,
    timestamp: f64,
    label: String,
    values: Vec<f64>,
}

fn parse_err(path: &Path, line: u64, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

/// Sorts labels numerically when they are all integers, lexically otherwise.
fn order_labels(labels: BTreeSet<String>) -> Vec<String> {
    let mut out: Vec<String> = labels.into_iter().collect();
    if out.iter().all(|l| l.parse::<i64>().is_ok()) {
        out.sort_by_key(|l| l.parse::<i64>().expect("checked"));
    }
    out
}

fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    Some(values[values.len() / 2])
}

/// Reads `subject,label,timestamp,<channels...>` rows.
///
/// Returns one series per subject and contiguous recording segment, in order
/// of each subject's first appearance. A spacing larger than twice the
/// nominal sample period starts a new segment.
pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<CsvData> {
    let file = std::fs::File::open(path).map_err(|e| Error::from(e).context(format!("reading {}", path.display())))?;
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(std::io::BufReader::new(file));
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| parse_err(path, 1, e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    if header.len() < 4 || header[..3] != FIXED_COLUMNS {
        return Err(parse_err(
            path,
            1,
            format!("header must be subject,label,timestamp,<channels...>, got {}", header.join(",")),
        ));
    }
    let all_channels = &header[3..];
    let picks: Vec<usize> = match &schema.channels {
        None => (0..all_channels.len()).collect(),
        Some(wanted) => wanted
            .iter()
            .map(|w| {
                all_channels
                    .iter()
                    .position(|c| c == w)
                    .ok_or_else(|| parse_err(path, 1, format!("missing channel column '{w}'")))
            })
            .collect::<Result<_>>()?,
    };
    let channel_names: Vec<String> = picks.iter().map(|&i| all_channels[i].clone()).collect();

    let mut subjects: Vec<(String, Vec<Row>)> = Vec::new();
    let mut labels = BTreeSet::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(path, line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != header.len() {
            return Err(parse_err(
                path,
                line,
                format!("expected {} fields, found {}", header.len(), record.len()),
            ));
        }
        let field = |i: usize| -> Result<f64> {
            let raw = &record[i];
            if raw.is_empty() {
                return Err(parse_err(path, line, format!("missing value for '{}'", header[i])));
            }
            let v: f64 = raw
                .parse()
                .map_err(|_| parse_err(path, line, format!("bad number '{raw}' for '{}'", header[i])))?;
            if !v.is_finite() {
                return Err(parse_err(path, line, format!("non-finite value for '{}'", header[i])));
            }
            Ok(v)
        };
        let subject = &record[0];
        let label = &record[1];
        if subject.is_empty() || label.is_empty() {
            return Err(parse_err(path, line, "missing subject or label"));
        }
        let timestamp = field(2)?;
        let mut values = Vec::with_capacity(all_channels.len());
        for i in 0..all_channels.len() {
            values.push(field(3 + i)?);
        }
        let values = picks.iter().map(|&i| values[i]).collect();
        labels.insert(label.to_string());
        let row = Row {
            line,
            timestamp,
            label: label.to_string(),
            values,
        };
        match subjects.iter_mut().find(|(s, _)| s == subject) {
            Some((_, rows)) => {
                let prev = rows.last().expect("non-empty");
                if row.timestamp <= prev.timestamp {
                    return Err(parse_err(
                        path,
                        line,
                        format!(
                            "timestamp {} does not increase past {} (line {}) for subject {subject}",
                            row.timestamp, prev.timestamp, prev.line
                        ),
                    ));
                }
                rows.push(row);
            }
            None => subjects.push((subject.to_string(), vec![row])),
        }
    }
    if subjects.is_empty() {
        return Err(parse_err(path, 1, "no data rows"));
    }

    let class_names = order_labels(labels);
    let source = path.display().to_string();
    let mut series = Vec::new();
    for (subject, rows) in subjects {
        let mut diffs: Vec<f64> = rows.windows(2).map(|w| w[1].timestamp - w[0].timestamp).collect();
        let period = match schema.sample_rate {
            Some(rate) if rate > 0.0 => 1000.0 / rate,
            Some(rate) => return Err(Error::Config(format!("sample rate must be positive, got {rate}"))),
            None => median(&mut diffs).unwrap_or(1000.0),
        };
        let mut start = 0;
        for end in 1..=rows.len() {
            let split = end == rows.len() || rows[end].timestamp - rows[end - 1].timestamp > 2.0 * period;
            if !split {
                continue;
            }
            let seg = &rows[start..end];
            let channels = (0..picks.len())
                .map(|c| seg.iter().map(|r| r.values[c]).collect())
                .collect();
            let per_step = seg
                .iter()
                .map(|r| class_names.iter().position(|n| *n == r.label).expect("collected"))
                .collect();
            series.push(LabeledSeries::new(
                subject.clone(),
                source.clone(),
                channels,
                1000.0 / period,
                SeriesLabels::PerStep(per_step),
            )?);
            start = end;
        }
    }
    Ok(CsvData {
        series,
        class_names,
        channel_names,
    })
}

/// Keeps every `factor`-th sample.
pub fn decimate(series: &LabeledSeries, factor: usize) -> Result<LabeledSeries> {
    if factor == 0 {
        return Err(Error::Config("decimation factor must be positive".into()));
    }
    let keep = |v: &[f64]| v.iter().copied().step_by(factor).collect::<Vec<_>>();
    let labels = match &series.labels {
        SeriesLabels::PerStep(l) => SeriesLabels::PerStep(l.iter().copied().step_by(factor).collect()),
        SeriesLabels::Sequence(l) => SeriesLabels::Sequence(*l),
    };
    LabeledSeries::new(
        series.subject.clone(),
        series.source.clone(),
        series.channels.iter().map(|c| keep(c)).collect(),
        series.sample_rate / factor as f64,
        labels,
    )
}
