//! CSV prediction tables: `p_1..p_k` or `z_1..z_k` plus an optional 1-based
//! `label` column.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::types::{validate_prob_matrix, LogitMatrix, Predictions, INGEST_TOL};

#[derive(Debug, Clone)]
pub struct Table {
    pub predictions: Predictions,
    /// 0-based.
    pub labels: Option<Vec<usize>>,
}

pub fn load_table(path: &Path) -> Result<Table> {
    let file = std::fs::File::open(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    read_table(file)
}

fn parse_err(line: usize, cause: impl Into<String>) -> Error {
    Error::ParseError { line, cause: cause.into() }
}

pub fn read_table<R: Read>(reader: R) -> Result<Table> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header = rdr.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();

    let mut probs = Vec::new();
    let mut logits = Vec::new();
    let mut label_col = None;
    for (col, name) in header.iter().enumerate() {
        if name == "label" {
            label_col = Some(col);
            continue;
        }
        let (kind, idx) = match name.split_once('_') {
            Some((kind @ ("p" | "z"), idx)) => (kind, idx),
            _ => return Err(parse_err(1, format!("unknown column `{name}`"))),
        };
        let idx: usize = idx.parse().ok().filter(|&i| i >= 1).ok_or_else(|| parse_err(1, format!("bad column `{name}`")))?;
        if kind == "p" { &mut probs } else { &mut logits }.push((idx, col));
    }
    if !probs.is_empty() && !logits.is_empty() {
        return Err(Error::MixedSchema);
    }
    let is_prob = !probs.is_empty();
    let mut cols = if is_prob { probs } else { logits };
    cols.sort_unstable();
    if cols.len() < 2 || cols.iter().enumerate().any(|(i, (idx, _))| *idx != i + 1) {
        return Err(parse_err(1, "prediction columns must be p_1..p_k or z_1..z_k with k >= 2"));
    }
    let k = cols.len();

    let mut rows = Vec::new();
    let mut lines = Vec::new();
    let mut labels = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            parse_err(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let row = cols
            .iter()
            .map(|&(_, c)| {
                let field = record.get(c).unwrap_or("");
                field.parse::<f64>().map_err(|_| parse_err(line, format!("not a number: `{field}`")))
            })
            .collect::<Result<Vec<f64>>>()?;
        if let Some(c) = label_col {
            let field = record.get(c).unwrap_or("");
            let label: i64 = field.parse().map_err(|_| parse_err(line, format!("not an integer label: `{field}`")))?;
            if label < 1 || label as usize > k {
                return Err(Error::LabelRange { label, k });
            }
            labels.push(label as usize - 1);
        }
        rows.push(row);
        lines.push(line);
    }
    if rows.is_empty() {
        return Err(parse_err(2, "no data rows"));
    }

    let predictions = if is_prob {
        let probs = validate_prob_matrix(rows, INGEST_TOL).map_err(|e| {
            let line = match &e {
                Error::NegativeEntry { row, .. } | Error::RowSumViolation { row, .. } => lines[*row],
                _ => lines[0],
            };
            parse_err(line, format!("{e:?}"))
        })?;
        Predictions::Probs(probs)
    } else {
        Predictions::Logits(LogitMatrix::new(rows).map_err(|e| parse_err(lines[0], e.to_string()))?)
    };
    Ok(Table { predictions, labels: label_col.map(|_| labels) })
}

/// Writes predictions with full-precision values; labels are written 1-based.
pub fn write_table<W: Write>(writer: W, predictions: &Predictions, labels: Option<&[usize]>) -> Result<()> {
    let k = predictions.classes();
    let mut w = csv::Writer::from_writer(writer);
    let prefix = match predictions {
        Predictions::Probs(_) => "p",
        Predictions::Logits(_) => "z",
    };
    let mut header: Vec<String> = (1..=k).map(|i| format!("{prefix}_{i}")).collect();
    if labels.is_some() {
        header.push("label".into());
    }
    let io = |e: csv::Error| Error::Io(e.to_string());
    w.write_record(&header).map_err(io)?;
    for i in 0..predictions.rows() {
        let row = match predictions {
            Predictions::Probs(p) => p.row(i),
            Predictions::Logits(z) => z.row(i),
        };
        let mut rec: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        if let Some(l) = labels {
            rec.push((l[i] + 1).to_string());
        }
        w.write_record(&rec).map_err(io)?;
    }
    w.flush()?;
    Ok(())
}
