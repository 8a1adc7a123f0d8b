//! Comma-separated tables with a provenance preamble, and their plain-text
//! renderings.

use std::fs;
use std::path::Path;

use serde_json::Value;

use crate::error::{CliError, Result};

/// Lines starting with this are comments; readers must skip them.
pub const COMMENT: u8 = b'#';

/// CSV text: `# `-prefixed provenance lines, a header row, then `rows`.
pub fn render_csv(provenance: &Value, headers: &[&str], rows: &[Vec<String>]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(headers)?;
    for r in rows {
        w.write_record(r)?;
    }
    let body = w.into_inner().map_err(|e| CliError::Config(e.to_string()))?;
    let mut out = preamble(provenance);
    out.push_str(&String::from_utf8(body).expect("csv of strings is utf-8"));
    Ok(out)
}

pub fn preamble(provenance: &Value) -> String {
    let tool = provenance.get("tool").and_then(Value::as_str).unwrap_or("?");
    let version = provenance.get("version").and_then(Value::as_str).unwrap_or("?");
    let command = provenance.get("command").and_then(Value::as_str).unwrap_or("?");
    let mut out = format!("# {tool} {version} {command}\n");
    out.push_str("# provenance ");
    out.push_str(&serde_json::to_string(provenance).expect("json value serializes"));
    out.push('\n');
    out
}

/// Header and data rows of a CSV written by [`render_csv`].
pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(COMMENT))
        .from_reader(text.as_bytes());
    let headers = r.headers()?.iter().map(str::to_string).collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        rows.push(rec?.iter().map(str::to_string).collect());
    }
    Ok((headers, rows))
}

/// Left-aligned columns separated by two spaces, with a rule under the header.
pub fn render_text(headers: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = headers.iter().map(|h| h.chars().count()).collect();
    for r in rows {
        for (w, cell) in widths.iter_mut().zip(r) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let line = |cells: Vec<&str>| -> String {
        let padded: Vec<String> = cells
            .iter()
            .zip(&widths)
            .map(|(c, &w)| format!("{c}{}", " ".repeat(w - c.chars().count())))
            .collect();
        padded.join("  ").trim_end().to_string() + "\n"
    };
    let mut out = line(headers.to_vec());
    let rule: Vec<String> = widths.iter().map(|&w| "-".repeat(w)).collect();
    out.push_str(&line(rule.iter().map(String::as_str).collect()));
    for r in rows {
        out.push_str(&line(r.iter().map(String::as_str).collect()));
    }
    out
}

/// Appends `*` to the largest value of each listed column. Cells that do
/// not parse as numbers are skipped; ties are all marked.
pub fn mark_best(rows: &mut [Vec<String>], columns: &[usize]) {
    for &c in columns {
        let best = rows
            .iter()
            .filter_map(|r| r.get(c)?.parse::<f64>().ok())
            .fold(f64::NEG_INFINITY, f64::max);
        if !best.is_finite() {
            continue;
        }
        for r in rows.iter_mut() {
            if let Some(cell) = r.get_mut(c) {
                if cell.parse::<f64>().is_ok_and(|v| v == best) {
                    cell.push('*');
                }
            }
        }
    }
}
