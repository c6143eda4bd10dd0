//! CSV output with a versioned header line.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::Result;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Shortest round-trip formatting, so outputs are reproducible bit for bit.
pub fn fmt(v: f64) -> String {
    format!("{v:?}")
}

pub fn header_line(command: &str) -> String {
    format!("# ebsde-lab v{VERSION} {command}")
}

pub fn csv_string<I>(command: &str, columns: &[&str], rows: I) -> String
where
    I: IntoIterator<Item = Vec<String>>,
{
    let mut out = String::new();
    let _ = writeln!(out, "{}", header_line(command));
    let _ = writeln!(out, "{}", columns.join(","));
    for row in rows {
        let _ = writeln!(out, "{}", row.join(","));
    }
    out
}

pub fn write_csv<I>(path: &Path, command: &str, columns: &[&str], rows: I) -> Result<()>
where
    I: IntoIterator<Item = Vec<String>>,
{
    std::fs::write(path, csv_string(command, columns, rows))?;
    Ok(())
}

/// Data rows of a CSV written by [`csv_string`], skipping comments and the
/// column header.
pub fn read_rows(text: &str) -> Vec<Vec<String>> {
    text.lines()
        .filter(|l| !l.starts_with('#') && !l.trim().is_empty())
        .skip(1)
        .map(|l| l.split(',').map(|s| s.trim().to_string()).collect())
        .collect()
}

/// Serde adapter writing `NaN` as `null` and reading `null` back as `NaN`.
pub(crate) mod nan_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
        if v.is_nan() {
            s.serialize_none()
        } else {
            s.serialize_some(v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip() {
        let s = csv_string("solve", &["a", "b"], vec![vec![fmt(0.1), fmt(3.0)]]);
        assert!(s.starts_with("# ebsde-lab v0.1.0 solve\na,b\n"));
        let rows = read_rows(&s);
        assert_eq!(rows, vec![vec!["0.1".to_string(), "3.0".to_string()]]);
    }
}
