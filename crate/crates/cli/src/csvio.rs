//! Plain numeric CSV: one header line, comma-separated rows.

use std::path::Path;

use crate::error::CliError;

pub fn render(header: &[String], rows: impl IntoIterator<Item = Vec<String>>) -> String {
    let mut out = header.join(",");
    out.push('\n');
    for r in rows {
        out.push_str(&r.join(","));
        out.push('\n');
    }
    out
}

/// Header and rows of a CSV file; every cell kept as text.
pub fn parse(text: &str) -> Result<(Vec<String>, Vec<Vec<String>>), CliError> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines
        .next()
        .ok_or_else(|| CliError::Io("empty CSV".into()))?
        .split(',')
        .map(|s| s.trim().to_string())
        .collect::<Vec<_>>();
    let mut rows = Vec::new();
    for (i, l) in lines.enumerate() {
        let r: Vec<String> = l.split(',').map(|s| s.trim().to_string()).collect();
        if r.len() != header.len() {
            return Err(CliError::Io(format!(
                "CSV row {} has {} cells, header has {}",
                i + 1,
                r.len(),
                header.len()
            )));
        }
        rows.push(r);
    }
    Ok((header, rows))
}

pub fn column(header: &[String], name: &str) -> Result<usize, CliError> {
    header
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| CliError::Io(format!("CSV has no column `{name}`")))
}

pub fn number(cell: &str) -> Result<f64, CliError> {
    cell.parse::<f64>()
        .map_err(|_| CliError::Io(format!("`{cell}` is not a number")))
}

/// Row-major values of a paired control CSV (`t` column followed by `width` columns).
pub fn read_matrix(path: &Path, width: usize) -> Result<Vec<f64>, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Validation(format!("cannot read {}: {e}", path.display())))?;
    let (header, rows) = parse(&text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
    if header.len() != width + 1 {
        return Err(CliError::Validation(format!(
            "{}: {} value columns, expected {width}",
            path.display(),
            header.len() - 1
        )));
    }
    let mut out = Vec::with_capacity(rows.len() * width);
    for r in &rows {
        for c in &r[1..] {
            out.push(number(c).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?);
        }
    }
    Ok(out)
}

/// Shortest round-trip text of a float.
pub fn num(x: f64) -> String {
    format!("{x:?}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_then_parse() {
        let text = render(
            &["t".into(), "f1".into()],
            vec![vec![num(0.0), num(0.1)], vec![num(0.5), num(-2.25e-7)]],
        );
        let (h, rows) = parse(&text).unwrap();
        assert_eq!(h, ["t", "f1"]);
        assert_eq!(number(&rows[1][1]).unwrap(), -2.25e-7);
    }

    #[test]
    fn ragged_rows_fail() {
        assert!(parse("a,b\n1\n").is_err());
    }
}
