//! Comma-separated event tables: a header of marker names, then numeric rows.

use std::fmt::Write as _;

use super::FcmSample;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Parses a CSV event table. When `label_column` is given, that column is
/// removed from the features and binarized (nonzero becomes 1).
pub fn load_csv_sample(text: &str, label_column: Option<&str>, sample_id: &str) -> Result<FcmSample> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::Csv { row: 1, detail: e.to_string() })?
        .iter()
        .map(str::to_string)
        .collect();
    if header.is_empty() || header.iter().all(String::is_empty) {
        return Err(Error::Csv { row: 1, detail: "missing header".into() });
    }
    let label_idx = match label_column {
        Some(name) => Some(header.iter().position(|h| h == name).ok_or_else(|| Error::Csv {
            row: 1,
            detail: format!("label column `{name}` not in header"),
        })?),
        None => None,
    };
    let markers: Vec<String> = header
        .iter()
        .enumerate()
        .filter(|(j, _)| Some(*j) != label_idx)
        .map(|(_, h)| h.clone())
        .collect();
    if markers.is_empty() {
        return Err(Error::Csv { row: 1, detail: "no feature columns".into() });
    }

    let mut values = Vec::new();
    let mut labels = Vec::new();
    let mut n = 0usize;
    for (i, rec) in rdr.records().enumerate() {
        // 1-based line number; the header is line 1.
        let row = rec.as_ref().ok().and_then(|r| r.position()).map_or(i + 2, |p| p.line() as usize);
        let rec = rec.map_err(|e| Error::Csv { row, detail: e.to_string() })?;
        if rec.len() == 1 && rec.get(0) == Some("") {
            continue;
        }
        if rec.len() != header.len() {
            return Err(Error::Csv {
                row,
                detail: format!("{} fields, header has {}", rec.len(), header.len()),
            });
        }
        for (j, cell) in rec.iter().enumerate() {
            let v: f32 = cell.parse().map_err(|_| Error::Csv {
                row,
                detail: format!("non-numeric value `{cell}` in column `{}`", header[j]),
            })?;
            if Some(j) == label_idx {
                labels.push(u8::from(v != 0.0));
            } else {
                values.push(v);
            }
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::Csv { row: 2, detail: "no event rows".into() });
    }
    let f = markers.len();
    FcmSample::new(
        sample_id,
        markers,
        Tensor::from_vec(n, f, values),
        label_idx.map(|_| labels),
    )
}

/// Writes a sample as CSV; labels, when present, go to a trailing `label_column`.
pub fn write_csv_sample(sample: &FcmSample, label_column: &str) -> String {
    let mut out = String::new();
    out.push_str(&sample.markers.join(","));
    if sample.labels.is_some() {
        out.push(',');
        out.push_str(label_column);
    }
    out.push('\n');
    for i in 0..sample.n_events() {
        for (j, v) in sample.events.row(i).iter().enumerate() {
            if j > 0 {
                out.push(',');
            }
            write!(out, "{v}").unwrap();
        }
        if let Some(l) = &sample.labels {
            write!(out, ",{}", l[i]).unwrap();
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn basic_with_labels() {
        let s = load_csv_sample("a,b,label\n1,2,0\n3,4,1", Some("label"), "s").unwrap();
        assert_eq!(s.events, Tensor::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        assert_eq!(s.labels, Some(vec![0, 1]));
        assert_eq!(s.markers, vec!["a", "b"]);
    }

    #[test]
    fn label_binarized() {
        let s = load_csv_sample("a,y\n1,2.5\n3,0", Some("y"), "s").unwrap();
        assert_eq!(s.labels, Some(vec![1, 0]));
    }

    #[test]
    fn no_label_column() {
        let s = load_csv_sample("a,b\n1,2\n", None, "s").unwrap();
        assert!(s.labels.is_none());
    }

    #[test]
    fn empty_body() {
        assert!(load_csv_sample("a,b\n", None, "s").is_err());
        assert!(load_csv_sample("", None, "s").is_err());
    }

    #[test]
    fn ragged_row_reports_line() {
        match load_csv_sample("a,b\n1,2\n3\n", None, "s") {
            Err(Error::Csv { row, .. }) => assert_eq!(row, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn non_numeric_cell() {
        match load_csv_sample("a,b\n1,x\n", None, "s") {
            Err(Error::Csv { row, detail }) => {
                assert_eq!(row, 2);
                assert!(detail.contains("`x`"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn round_trip() {
        let s = load_csv_sample("a,b,label\n0.1,-2e-3,1\n3.25,4,0", Some("label"), "s").unwrap();
        let back = load_csv_sample(&write_csv_sample(&s, "label"), Some("label"), "s").unwrap();
        assert_eq!(s, back);
    }
}
