//! Renders CSV outputs as aligned text tables.

use std::path::{Path, PathBuf};

use crate::error::{CliError, CliResult};
use crate::fsio::read_input;

/// Numbers with long fractions are shown to 4 decimals; everything else as is.
fn cell(s: &str) -> String {
    match s.parse::<f64>() {
        Ok(v) if s.contains('.') && s.len() > 8 => format!("{v:.4}"),
        _ => s.to_string(),
    }
}

/// Numeric columns are right-aligned, text columns left-aligned.
pub fn render_table(csv_text: &str) -> CliResult<String> {
    let mut r = csv::ReaderBuilder::new().has_headers(false).flexible(true).from_reader(csv_text.as_bytes());
    let mut rows: Vec<Vec<String>> = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| CliError::usage(format!("csv: {e}")))?;
        rows.push(rec.iter().map(cell).collect());
    }
    let Some(header) = rows.first() else {
        return Ok(String::new());
    };
    let cols = rows.iter().map(Vec::len).max().unwrap_or(header.len());
    let mut width = vec![0; cols];
    let mut numeric = vec![true; cols];
    for (i, row) in rows.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            width[j] = width[j].max(v.chars().count());
            if i > 0 && !v.is_empty() && v.parse::<f64>().is_err() {
                numeric[j] = false;
            }
        }
    }
    let mut out = String::new();
    let line = |row: &[String], out: &mut String| {
        let cells: Vec<String> = (0..cols)
            .map(|j| {
                let v = row.get(j).map(String::as_str).unwrap_or("");
                if numeric[j] {
                    format!("{v:>w$}", w = width[j])
                } else {
                    format!("{v:<w$}", w = width[j])
                }
            })
            .collect();
        out.push_str(cells.join("  ").trim_end());
        out.push('\n');
    };
    line(header, &mut out);
    out.push_str(&width.iter().map(|&w| "-".repeat(w)).collect::<Vec<_>>().join("  "));
    out.push('\n');
    for row in &rows[1..] {
        line(row, &mut out);
    }
    Ok(out)
}

/// CSV files named by `paths`; directories contribute their `*.csv` files
/// (non-recursive, sorted).
pub fn collect_csvs(paths: &[PathBuf]) -> CliResult<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = std::fs::read_dir(p)
                .map_err(|e| CliError::usage(format!("report: {}: {e}", p.display())))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x == "csv"))
                .collect();
            found.sort();
            out.extend(found);
        } else {
            out.push(p.clone());
        }
    }
    if out.is_empty() {
        return Err(CliError::usage("report: no CSV files found"));
    }
    Ok(out)
}

pub fn render_file(path: &Path) -> CliResult<String> {
    let text = read_input(path, "report")?;
    Ok(format!("== {}\n{}", path.display(), render_table(&text)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn columns_line_up() {
        let t = render_table("task,value\ncls,0.123456789\nner_long,1\n").unwrap();
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines[0], "task       value");
        assert_eq!(lines[1], "--------  ------");
        assert_eq!(lines[2], "cls       0.1235");
        assert_eq!(lines[3], "ner_long       1");
    }

    #[test]
    fn empty_input_renders_nothing() {
        assert_eq!(render_table("").unwrap(), "");
    }
}
