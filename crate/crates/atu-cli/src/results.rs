//! Result rows and the comma-delimited results file.
//!
//! Fixed header: `digest,label,metric,mean,ci95,n,wall_seconds,seed`.
//! One row per (configuration, metric). `digest` identifies the
//! configuration content (seed excluded), `label` is the human-readable
//! preset or sweep tag, `ci95` is the normal-approximation 95% half-width
//! over the evaluation tasks, and `wall_seconds` is informational (the
//! only field not reproduced bit-exactly by a rerun). Floats are written
//! in shortest round-trip form, so equal runs produce byte-equal mean
//! fields.

use std::path::Path;

use anyhow::{bail, Context, Result};

pub const HEADER: &str = "digest,label,metric,mean,ci95,n,wall_seconds,seed";

#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub digest: String,
    pub label: String,
    pub metric: String,
    pub mean: f64,
    pub ci95: f64,
    pub n: usize,
    pub wall_seconds: f64,
    pub seed: u64,
}

impl ResultRow {
    pub fn to_csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.digest,
            self.label,
            self.metric,
            self.mean,
            self.ci95,
            self.n,
            self.wall_seconds,
            self.seed
        )
    }

    pub fn parse(line: &str) -> Result<Self> {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 8 {
            bail!("result row has {} fields, expected 8: {line}", fields.len());
        }
        Ok(ResultRow {
            digest: fields[0].to_string(),
            label: fields[1].to_string(),
            metric: fields[2].to_string(),
            mean: fields[3].parse().context("mean")?,
            ci95: fields[4].parse().context("ci95")?,
            n: fields[5].parse().context("n")?,
            wall_seconds: fields[6].parse().context("wall_seconds")?,
            seed: fields[7].parse().context("seed")?,
        })
    }
}

pub fn write_results(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let mut text = String::from(HEADER);
    text.push('\n');
    for row in rows {
        text.push_str(&row.to_csv_line());
        text.push('\n');
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn read_results(path: &Path) -> Result<Vec<ResultRow>> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == HEADER => {}
        other => bail!("bad results header in {}: {:?}", path.display(), other),
    }
    lines.map(ResultRow::parse).collect()
}
