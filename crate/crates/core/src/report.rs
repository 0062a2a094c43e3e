//! Rate-distortion curves and table rendering.

use std::fmt::Write;

use crate::error::{Error, Result};

/// One operating point of a trained model.
#[derive(Clone, Debug, PartialEq)]
pub struct RdPoint {
    pub lambda_id: String,
    pub bpp: f64,
    pub psnr_db: f64,
    pub msssim_db: f64,
    /// Hex digest of the model that produced the point.
    pub digest: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RdCurve {
    /// Sorted by bpp.
    pub points: Vec<RdPoint>,
    /// Indices `i` whose segment from point `i - 1` loses quality in either
    /// metric while spending more bits. Empty unless the isotonic check ran.
    pub flagged: Vec<usize>,
}

/// Orders points by bpp. A repeated `lambda_id` keeps the point that comes
/// last in `points`.
pub fn assemble_curve(points: &[RdPoint], isotonic: bool) -> Result<RdCurve> {
    let mut kept: Vec<RdPoint> = Vec::new();
    for p in points {
        if !(p.bpp > 0.0 && p.bpp.is_finite()) {
            return Err(Error::Invalid(format!("point `{}` has bpp {}", p.lambda_id, p.bpp)));
        }
        if !(p.psnr_db.is_finite() && p.msssim_db.is_finite()) {
            return Err(Error::Invalid(format!(
                "point `{}` has a non-finite metric",
                p.lambda_id
            )));
        }
        match kept.iter_mut().find(|q| q.lambda_id == p.lambda_id) {
            Some(q) => *q = p.clone(),
            None => kept.push(p.clone()),
        }
    }
    if kept.len() < 2 {
        return Err(Error::Invalid(format!(
            "a curve needs at least 2 distinct points, got {}",
            kept.len()
        )));
    }
    kept.sort_by(|a, b| a.bpp.total_cmp(&b.bpp).then_with(|| a.lambda_id.cmp(&b.lambda_id)));
    let flagged = if isotonic {
        (1..kept.len())
            .filter(|&i| kept[i].psnr_db < kept[i - 1].psnr_db || kept[i].msssim_db < kept[i - 1].msssim_db)
            .collect()
    } else {
        Vec::new()
    };
    Ok(RdCurve { points: kept, flagged })
}

impl RdCurve {
    pub fn table(&self) -> Table {
        let mut t = Table::new(&["lambda", "bpp", "psnr_db", "msssim_db", "digest", "flag"]);
        for (i, p) in self.points.iter().enumerate() {
            t.push(vec![
                p.lambda_id.clone(),
                fmt_value(p.bpp),
                fmt_value(p.psnr_db),
                fmt_value(p.msssim_db),
                p.digest.clone(),
                if self.flagged.contains(&i) { "non-monotone" } else { "" }.to_string(),
            ])
            .expect("row width matches");
        }
        t
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TableFormat {
    Csv,
    Text,
}

/// Rows of pre-formatted cells under a header.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(columns: &[&str]) -> Self {
        Self {
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) -> Result<()> {
        if row.len() != self.columns.len() {
            return Err(Error::Invalid(format!(
                "row has {} cells, table has {} columns",
                row.len(),
                self.columns.len()
            )));
        }
        self.rows.push(row);
        Ok(())
    }

    /// Parses the output of [`render_table`] in CSV form.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Invalid("empty CSV".into()))?;
        let mut t = Table {
            columns: header.split(',').map(str::to_string).collect(),
            rows: Vec::new(),
        };
        for line in lines {
            t.push(line.split(',').map(str::to_string).collect())?;
        }
        Ok(t)
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }
}

/// Shortest round-trip decimal form; infinities print as `inf`/`-inf`.
pub fn fmt_value(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".into()
    } else if v == f64::NEG_INFINITY {
        "-inf".into()
    } else {
        format!("{v}")
    }
}

/// CSV: comma separated, no quoting, LF line endings. Text: columns padded
/// to a common width with a rule under the header.
pub fn render_table(table: &Table, format: TableFormat) -> Vec<u8> {
    let mut out = String::new();
    match format {
        TableFormat::Csv => {
            out.push_str(&table.columns.join(","));
            out.push('\n');
            for r in &table.rows {
                out.push_str(&r.join(","));
                out.push('\n');
            }
        }
        TableFormat::Text => {
            let widths: Vec<usize> = (0..table.columns.len())
                .map(|j| {
                    table
                        .rows
                        .iter()
                        .map(|r| r[j].chars().count())
                        .chain([table.columns[j].chars().count()])
                        .max()
                        .unwrap_or(0)
                })
                .collect();
            let line = |cells: &[String], out: &mut String| {
                let parts: Vec<String> = cells.iter().zip(&widths).map(|(c, &w)| format!("{c:<w$}")).collect();
                let _ = writeln!(out, "{}", parts.join("  ").trim_end());
            };
            line(&table.columns, &mut out);
            let rule: Vec<String> = widths.iter().map(|&w| "-".repeat(w)).collect();
            let _ = writeln!(out, "{}", rule.join("  "));
            for r in &table.rows {
                line(r, &mut out);
            }
        }
    }
    out.into_bytes()
}
