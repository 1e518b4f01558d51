//! Delimited numeric matrix files: one observation per row, `D` columns,
//! comma- or whitespace-separated, optional header row. Missing entries are
//! the literal token `NaN` (any case) or an empty comma-delimited field.
//! The writer emits shortest round-trip float formatting, so write→read is
//! lossless.

use std::fmt::Write as _;
use std::path::Path;

use geode::DataSet;
use nalgebra::DMatrix;

use crate::{CliError, Result};

/// A parsed matrix file. `data` is `None` when the file holds no data rows
/// (commands that tabulate per-row output then emit an empty table).
#[derive(Debug, Clone)]
pub struct MatrixFile {
    pub data: Option<DataSet>,
    pub header: Option<Vec<String>>,
}

fn is_missing_token(tok: &str) -> bool {
    tok.is_empty() || tok.eq_ignore_ascii_case("nan")
}

fn parse_token(tok: &str) -> Option<f64> {
    // `parse::<f64>` accepts "NaN"/"inf"; missingness is handled upstream
    // and non-finite observed values are rejected downstream.
    tok.parse::<f64>().ok()
}

fn split_line(line: &str, comma: bool) -> Vec<&str> {
    if comma {
        line.split(',').map(str::trim).collect()
    } else {
        line.split_whitespace().collect()
    }
}

/// Reads a matrix file, sniffing the delimiter and an optional header.
pub fn read_matrix(path: &Path) -> Result<MatrixFile> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?;
    parse_matrix(&text).map_err(|msg| CliError::Data(format!("{}: {msg}", path.display())))
}

/// Parses matrix text. Split out for tests.
pub fn parse_matrix(text: &str) -> std::result::Result<MatrixFile, String> {
    let lines: Vec<&str> = text
        .lines()
        .filter(|l| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        .collect();
    if lines.is_empty() {
        return Ok(MatrixFile {
            data: None,
            header: None,
        });
    }
    let comma = lines[0].contains(',');

    // Header: the first line has a field that is neither numeric nor a
    // missing-entry token.
    let first = split_line(lines[0], comma);
    let has_header = first
        .iter()
        .any(|tok| !is_missing_token(tok) && parse_token(tok).is_none());
    let (header, body) = if has_header {
        (
            Some(first.iter().map(|s| s.to_string()).collect::<Vec<_>>()),
            &lines[1..],
        )
    } else {
        (None, &lines[..])
    };
    if body.is_empty() {
        return Ok(MatrixFile { data: None, header });
    }

    let cols = split_line(body[0], comma).len();
    if cols == 0 {
        return Err("no columns in first data row".into());
    }
    let n = body.len();
    let mut values = DMatrix::<f64>::zeros(cols, n);
    let mut missing: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (i, line) in body.iter().enumerate() {
        let toks = split_line(line, comma);
        if toks.len() != cols {
            return Err(format!(
                "row {} has {} fields, expected {cols}",
                i + 1,
                toks.len()
            ));
        }
        for (j, tok) in toks.iter().enumerate() {
            if is_missing_token(tok) {
                missing[i].push(j);
            } else {
                match parse_token(tok) {
                    Some(v) if v.is_finite() => values[(j, i)] = v,
                    Some(v) if v.is_nan() => missing[i].push(j),
                    _ => {
                        return Err(format!(
                            "row {}, column {}: unparseable field {tok:?}",
                            i + 1,
                            j + 1
                        ))
                    }
                }
            }
        }
        if missing[i].len() == cols {
            return Err(format!("row {} has no observed entries", i + 1));
        }
    }
    let data = DataSet::with_missing(values, missing).map_err(|e| e.to_string())?;
    Ok(MatrixFile {
        data: Some(data),
        header,
    })
}

/// Serializes a data set back to delimited text (comma-separated, `NaN`
/// for missing cells, shortest round-trip float formatting).
pub fn format_matrix(data: &DataSet, header: Option<&[String]>) -> String {
    let mut out = String::new();
    if let Some(h) = header {
        out.push_str(&h.join(","));
        out.push('\n');
    }
    for i in 0..data.len() {
        let miss = data.missing(i);
        for j in 0..data.dim() {
            if j > 0 {
                out.push(',');
            }
            if miss.binary_search(&j).is_ok() {
                out.push_str("NaN");
            } else {
                let _ = write!(out, "{}", data.values()[(j, i)]);
            }
        }
        out.push('\n');
    }
    out
}

pub fn write_matrix(path: &Path, data: &DataSet, header: Option<&[String]>) -> Result<()> {
    std::fs::write(path, format_matrix(data, header))
        .map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))
}
