//! Tabular reports, emitted both as CSV and as aligned text.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{io_error, CliResult};

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Format {
    Csv,
    Text,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    /// Short machine name, used in file names.
    pub name: String,
    pub title: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(name: &str, title: &str, header: &[&str]) -> Self {
        Table {
            name: name.to_string(),
            title: title.to_string(),
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn csv(&self) -> String {
        let mut s = self.header.join(",");
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.iter().map(|c| csv_field(c)).collect::<Vec<_>>().join(","));
            s.push('\n');
        }
        s
    }

    pub fn text(&self) -> String {
        let widths: Vec<usize> = (0..self.header.len())
            .map(|c| {
                self.rows
                    .iter()
                    .map(|r| r[c].len())
                    .chain(std::iter::once(self.header[c].len()))
                    .max()
                    .unwrap_or(0)
            })
            .collect();
        let line = |cells: &[String]| {
            let mut out = String::new();
            for (i, (c, w)) in cells.iter().zip(&widths).enumerate() {
                if i > 0 {
                    out.push_str("  ");
                }
                // numbers right-aligned, labels left-aligned
                if c.parse::<f64>().is_ok() {
                    out.push_str(&format!("{c:>w$}"));
                } else {
                    out.push_str(&format!("{c:<w$}"));
                }
            }
            out.trim_end().to_string()
        };
        let mut s = format!("{}\n", self.title);
        s.push_str(&line(&self.header));
        s.push('\n');
        s.push_str(&widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("  "));
        s.push('\n');
        for r in &self.rows {
            s.push_str(&line(r));
            s.push('\n');
        }
        s
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Fixed-precision number formatting so reports are byte-stable.
pub fn num(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.6}")
    } else {
        format!("{x}")
    }
}

#[derive(Clone, Debug, Default)]
pub struct Report {
    pub name: String,
    pub tables: Vec<Table>,
}

impl Report {
    pub fn new(name: &str) -> Self {
        Report {
            name: name.to_string(),
            tables: Vec::new(),
        }
    }

    pub fn text(&self) -> String {
        self.tables.iter().map(Table::text).collect::<Vec<_>>().join("\n")
    }

    pub fn render(&self, format: Format) -> String {
        match format {
            Format::Text => self.text(),
            Format::Csv => self
                .tables
                .iter()
                .map(|t| format!("# {}\n{}", t.name, t.csv()))
                .collect::<Vec<_>>()
                .join("\n"),
        }
    }

    /// Writes `<name>.<table>.csv` per table and `<name>.txt`; returns the
    /// file names relative to `dir`.
    pub fn write(&self, dir: &Path) -> CliResult<Vec<PathBuf>> {
        let mut written = Vec::new();
        for t in &self.tables {
            let rel = PathBuf::from(format!("{}.{}.csv", self.name, t.name));
            write_file(&dir.join(&rel), &t.csv())?;
            written.push(rel);
        }
        let rel = PathBuf::from(format!("{}.txt", self.name));
        write_file(&dir.join(&rel), &self.text())?;
        written.push(rel);
        Ok(written)
    }
}

pub fn write_file(path: &Path, content: &str) -> CliResult<()> {
    fs::write(path, content).map_err(|e| io_error(path, e))
}
