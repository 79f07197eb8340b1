//! Dataset CSV input and output. The schema is a `site,treatment,outcome`
//! header followed by one observation per row; validation failures cite
//! 1-based file line numbers, with the header on line 1.

use std::path::Path;

use lrvb::models::{DataRow, MicrocreditDataset};
use lrvb::{Error, Result};

const HEADER: [&str; 3] = ["site", "treatment", "outcome"];

pub fn load_dataset(path: &Path) -> Result<MicrocreditDataset> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::InvalidData(format!("{}: {e}", path.display())))?;
    parse_dataset(&text)
        .map_err(|e| Error::InvalidData(format!("{}: {e}", path.display())))
}

fn parse_dataset(text: &str) -> std::result::Result<MicrocreditDataset, String> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(text.as_bytes());
    let headers = reader.headers().map_err(|e| e.to_string())?;
    if headers.iter().collect::<Vec<_>>() != HEADER {
        return Err(format!(
            "line 1: header must be `{}`, got `{}`",
            HEADER.join(","),
            headers.iter().collect::<Vec<_>>().join(",")
        ));
    }
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| e.to_string())?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != 3 {
            return Err(format!("line {line}: expected 3 fields, got {}", record.len()));
        }
        let site: usize = record[0]
            .trim()
            .parse()
            .map_err(|_| format!("line {line}: site must be a positive integer, got `{}`", &record[0]))?;
        if site == 0 {
            return Err(format!("line {line}: site must be a positive integer, got `0`"));
        }
        let treatment: i64 = record[1]
            .trim()
            .parse()
            .map_err(|_| format!("line {line}: treatment must be 0 or 1, got `{}`", &record[1]))?;
        if treatment != 0 && treatment != 1 {
            return Err(format!("line {line}: treatment must be 0 or 1, got `{treatment}`"));
        }
        let outcome: f64 = record[2]
            .trim()
            .parse()
            .map_err(|_| format!("line {line}: outcome must be a finite number, got `{}`", &record[2]))?;
        if !outcome.is_finite() {
            return Err(format!("line {line}: outcome must be a finite number, got `{outcome}`"));
        }
        rows.push(DataRow { site, treatment: treatment as u8, outcome });
    }
    MicrocreditDataset::new(rows).map_err(|e| e.to_string())
}

/// CSV text of a dataset in its canonical row order. Outcomes print in
/// shortest round-trip form, so loading the text back reproduces the
/// dataset bit for bit.
pub fn dataset_to_csv(data: &MicrocreditDataset) -> String {
    let mut out = HEADER.join(",");
    out.push('\n');
    for row in data.rows() {
        out.push_str(&format!("{},{},{}\n", row.site, row.treatment, row.outcome));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn a_valid_file_round_trips() {
        let text = "site,treatment,outcome\n1,0,0.5\n1,1,1.25\n2,0,-0.75\n2,1,0.125\n";
        let data = parse_dataset(text).unwrap();
        assert_eq!(data.n_sites(), 2);
        assert_eq!(data.n_rows(), 4);
        assert_eq!(dataset_to_csv(&data), text);
    }

    #[test]
    fn the_header_is_checked_on_line_1() {
        let err = parse_dataset("site,arm,outcome\n1,0,0.5\n").unwrap_err();
        assert!(err.contains("line 1"), "{err}");
        assert!(err.contains("site,treatment,outcome"), "{err}");
    }

    #[test]
    fn a_bad_treatment_cites_its_line() {
        let mut text = String::from("site,treatment,outcome\n");
        for i in 0..15 {
            text.push_str(&format!("1,{},{}.5\n", i % 2, i));
        }
        text.push_str("1,2,0.5\n");
        let err = parse_dataset(&text).unwrap_err();
        assert!(err.contains("line 17"), "{err}");
        assert!(err.contains("treatment must be 0 or 1"), "{err}");
    }

    #[test]
    fn a_short_row_cites_its_line() {
        let err = parse_dataset("site,treatment,outcome\n1,0,0.5\n1,0\n").unwrap_err();
        assert!(err.contains("line 3"), "{err}");
        assert!(err.contains("expected 3 fields"), "{err}");
    }

    #[test]
    fn non_numeric_outcomes_cite_their_line() {
        let err = parse_dataset("site,treatment,outcome\n1,0,n/a\n").unwrap_err();
        assert!(err.contains("line 2"), "{err}");
        assert!(err.contains("outcome"), "{err}");
        let err = parse_dataset("site,treatment,outcome\n1,0,inf\n").unwrap_err();
        assert!(err.contains("finite"), "{err}");
    }

    #[test]
    fn sites_must_be_positive_integers() {
        let err = parse_dataset("site,treatment,outcome\n0,0,0.5\n").unwrap_err();
        assert!(err.contains("line 2"), "{err}");
        assert!(err.contains("positive integer"), "{err}");
        let err = parse_dataset("site,treatment,outcome\n1.5,0,0.5\n").unwrap_err();
        assert!(err.contains("line 2"), "{err}");
    }
}
