//! CSV output with a commented metadata header.
//!
//! Every file starts with lines beginning `# `: the library version, the seed,
//! free-form notes (e.g. the stopping rule) and the full config echo. The CSV
//! header and rows follow. Readers can skip the header with `comment = '#'`.

use std::io::Write;

use serde::Serialize;

use super::config::ExperimentConfig;
use crate::Result;

/// Header lines written before the CSV rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Metadata {
    pub lines: Vec<String>,
}

impl Metadata {
    pub fn new(config: &ExperimentConfig, notes: &[String]) -> Self {
        let mut lines = vec![
            format!("gnnd {}", crate::VERSION),
            format!("experiment = {}", config.kind.as_str()),
            format!("seed = {}", config.seed),
        ];
        lines.extend(notes.iter().cloned());
        lines.push("config:".into());
        lines.extend(config.to_toml().lines().map(|l| format!("  {l}")));
        Self { lines }
    }
}

/// Writes the metadata header and the rows.
pub fn write_csv<W: Write, R: Serialize>(mut w: W, meta: &Metadata, rows: &[R]) -> Result<()> {
    for l in &meta.lines {
        writeln!(w, "# {l}")?;
    }
    let mut wr = csv::Writer::from_writer(w);
    for r in rows {
        wr.serialize(r)?;
    }
    wr.flush()?;
    Ok(())
}

/// [`write_csv`] into a string.
pub fn csv_string<R: Serialize>(meta: &Metadata, rows: &[R]) -> Result<String> {
    let mut buf = Vec::new();
    write_csv(&mut buf, meta, rows)?;
    Ok(String::from_utf8(buf).expect("csv output is UTF-8"))
}
