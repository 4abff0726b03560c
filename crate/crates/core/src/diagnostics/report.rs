use std::io::Write;

use serde::Serialize;

use super::{DiagError, XLRSRecord};

/// Serializes rows with a header line taken from the field names.
pub fn write_csv<T: Serialize, W: Write>(rows: &[T], out: W) -> Result<(), DiagError> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct XlrsRow<'a> {
    step: usize,
    source: &'a str,
    target: &'a str,
    value: f64,
    n_pairs: usize,
}

/// Trajectory CSV with columns `step,source,target,value,n_pairs`.
pub fn xlrs_csv(records: &[XLRSRecord]) -> Result<String, DiagError> {
    let rows: Vec<XlrsRow> = records
        .iter()
        .map(|r| XlrsRow {
            step: r.step,
            source: &r.source_lang,
            target: &r.target_lang,
            value: r.value,
            n_pairs: r.n_pairs,
        })
        .collect();
    let mut buf = Vec::new();
    write_csv(&rows, &mut buf)?;
    Ok(String::from_utf8(buf).expect("csv output is utf-8"))
}

/// Markdown table with row labels in the first column; `None` cells print `-`.
pub fn markdown_table(corner: &str, columns: &[String], rows: &[(String, Vec<Option<String>>)]) -> String {
    let mut out = format!("| {corner} |");
    for c in columns {
        out.push_str(&format!(" {c} |"));
    }
    out.push_str("\n|---|");
    out.push_str(&"---|".repeat(columns.len()));
    out.push('\n');
    for (label, cells) in rows {
        out.push_str(&format!("| {label} |"));
        for cell in cells {
            out.push_str(&format!(" {} |", cell.as_deref().unwrap_or("-")));
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn xlrs_csv_has_one_row_per_record() {
        let rec = |step, t: &str| XLRSRecord {
            step,
            source_lang: "en".into(),
            target_lang: t.into(),
            value: 0.5,
            n_pairs: 3,
        };
        let csv = xlrs_csv(&[rec(0, "de"), rec(0, "zh"), rec(100, "de")]).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "step,source,target,value,n_pairs");
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[3], "100,en,de,0.5,3");
    }

    #[test]
    fn markdown_shape() {
        let t = markdown_table(
            "src",
            &["de".into(), "zh".into()],
            &[("en".into(), vec![Some("1.0".into()), None])],
        );
        assert_eq!(t, "| src | de | zh |\n|---|---|---|\n| en | 1.0 | - |\n");
    }
}
