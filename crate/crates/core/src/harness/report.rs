use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub pivots: String,
    pub known: usize,
    pub rep: usize,
    pub metric: String,
    pub value: f64,
    pub wall_ms: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub rows: Vec<ReportRow>,
}

impl Report {
    pub fn push(&mut self, row: ReportRow) {
        self.rows.push(row);
    }

    pub fn extend(&mut self, other: Report) {
        self.rows.extend(other.rows);
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Orders rows by every column except `value` and `wall_ms`.
    pub fn sort(&mut self) {
        self.rows.sort_by(|a, b| {
            (&a.method, &a.pivots, a.known, a.rep, &a.metric).cmp(&(&b.method, &b.pivots, b.known, b.rep, &b.metric))
        });
    }

    pub fn filter<'a>(&'a self, method: &'a str, metric: &'a str) -> impl Iterator<Item = &'a ReportRow> + 'a {
        self.rows.iter().filter(move |r| r.method == method && r.metric == metric)
    }
}

/// Writes `report` as CSV with rows in sorted order.
pub fn emit_report(report: &Report, path: impl AsRef<Path>) -> Result<()> {
    if report.is_empty() {
        return Err(Error::EmptyReport);
    }
    let mut sorted = report.clone();
    sorted.sort();
    let mut writer = csv::Writer::from_path(path)?;
    for row in &sorted.rows {
        writer.serialize(row)?;
    }
    writer.flush()?;
    Ok(())
}

pub fn load_report(path: impl AsRef<Path>) -> Result<Report> {
    let mut reader = csv::Reader::from_path(path)?;
    let rows = reader.deserialize().collect::<std::result::Result<Vec<ReportRow>, _>>()?;
    Ok(Report { rows })
}
