use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::evaluation::report::csv_io;
use crate::synthdata::{events_from_labels, LabeledSeries};

fn parse_err(path: &Path, row: usize, column: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        row,
        column,
        message: message.into(),
    }
}

/// Reads `timestamp,<f_1>,...,<f_D>[,label]`.
///
/// Rows and columns in errors are 1-based file coordinates (the header is
/// row 1). With `has_label` the last column must be named `label`; without
/// it labels are all 0 and a trailing `label` column, if any, is ignored.
pub fn load_csv(path: &Path, has_label: bool) -> Result<LabeledSeries> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)
        .map_err(|e| parse_err(path, 1, 1, e.to_string()))?;
    let header = reader.headers().map_err(|e| parse_err(path, 1, 1, e.to_string()))?.clone();
    let label_col = header.iter().position(|h| h.trim() == "label");
    if has_label && label_col != Some(header.len() - 1) {
        return Err(parse_err(path, 1, header.len(), "expected a trailing `label` column"));
    }
    let width = header.len();
    let dim = width - 1 - usize::from(label_col.is_some());
    if dim == 0 {
        return Err(parse_err(path, 1, 1, "header has no feature columns"));
    }
    let mut values = Vec::new();
    let mut labels = Vec::new();
    for (k, record) in reader.records().enumerate() {
        let row = k + 2;
        let record = record.map_err(|e| parse_err(path, row, 1, e.to_string()))?;
        if record.len() != width {
            return Err(parse_err(
                path,
                row,
                record.len().min(width) + 1,
                format!("expected {width} fields, found {}", record.len()),
            ));
        }
        for c in 1..=dim {
            let cell = record[c].trim();
            let v: f64 = cell
                .parse()
                .map_err(|_| parse_err(path, row, c + 1, format!("`{cell}` is not a number")))?;
            if !v.is_finite() {
                return Err(parse_err(path, row, c + 1, format!("non-finite value `{cell}`")));
            }
            values.push(v);
        }
        labels.push(match (has_label, label_col) {
            (true, Some(c)) => match record[c].trim() {
                "0" => 0,
                "1" => 1,
                other => return Err(parse_err(path, row, c + 1, format!("label `{other}` is not 0 or 1"))),
            },
            _ => 0,
        });
    }
    if labels.is_empty() {
        return Err(parse_err(path, 2, 1, "no data rows"));
    }
    Ok(LabeledSeries {
        dim,
        values,
        events: events_from_labels(&labels),
        labels,
    })
}

/// Writes the series with integer timestamps, features `f1..fD` and labels.
pub fn write_csv(path: &Path, series: &LabeledSeries) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_io)?;
    let mut header = vec!["timestamp".to_string()];
    header.extend((1..=series.dim).map(|j| format!("f{j}")));
    header.push("label".into());
    w.write_record(&header).map_err(csv_io)?;
    for t in 0..series.len() {
        let mut rec = Vec::with_capacity(series.dim + 2);
        rec.push(t.to_string());
        rec.extend(series.row(t).iter().map(f64::to_string));
        rec.push(series.labels[t].to_string());
        w.write_record(&rec).map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

/// One `start,end` pair (inclusive) per line.
pub fn write_events(path: &Path, events: &[(usize, usize)]) -> Result<()> {
    let text: String = events.iter().map(|(s, e)| format!("{s},{e}\n")).collect();
    fs::write(path, text)?;
    Ok(())
}

pub fn read_events(path: &Path) -> Result<Vec<(usize, usize)>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (k, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let bad = || parse_err(path, k + 1, 1, format!("`{line}` is not a `start,end` pair"));
        let (a, b) = line.split_once(',').ok_or_else(bad)?;
        let (a, b): (usize, usize) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
        if a > b {
            return Err(bad());
        }
        out.push((a, b));
    }
    Ok(out)
}
