//! Metric CSV files: `#` comment lines holding the resolved configuration
//! and seed, then `metric,value,dataset,checkpoint,seed` rows.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use xmodal_core::eval::{MetricReport, REPORT_HEADER};

use crate::config::Config;
use crate::error::{Result, XmodalError};

pub fn header(config: &Config, seed: u64, command: &str) -> String {
    let mut out = format!("# command = {command}\n# seed = {seed}\n");
    for line in config.render().lines() {
        out.push_str("# ");
        out.push_str(line);
        out.push('\n');
    }
    out.push_str(REPORT_HEADER);
    out.push('\n');
    out
}

/// Append-only CSV sink. Creation truncates any previous file.
pub struct MetricCsv {
    path: PathBuf,
    file: std::fs::File,
}

impl MetricCsv {
    pub fn create(path: &Path, config: &Config, seed: u64, command: &str) -> Result<Self> {
        if let Some(dir) = path.parent() {
            crate::fsutil::create_dir(dir)?;
        }
        let mut file = std::fs::File::create(path).map_err(|e| XmodalError::io(path, e))?;
        file.write_all(header(config, seed, command).as_bytes())
            .map_err(|e| XmodalError::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            file,
        })
    }

    pub fn open_append(path: &Path) -> Result<Self> {
        let file = OpenOptions::new()
            .append(true)
            .open(path)
            .map_err(|e| XmodalError::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            file,
        })
    }

    pub fn append(&mut self, report: &MetricReport) -> Result<()> {
        self.file
            .write_all(report.csv_rows().as_bytes())
            .map_err(|e| XmodalError::io(&self.path, e))
    }

    pub fn row(
        &mut self,
        metric: &str,
        value: f64,
        dataset: &str,
        checkpoint: &str,
        seed: u64,
    ) -> Result<()> {
        let mut r = MetricReport::new();
        r.push(metric, value, dataset, checkpoint, seed)?;
        self.append(&r)
    }
}

/// One parsed data row.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvRow {
    pub metric: String,
    pub value: f64,
    pub dataset: String,
    pub checkpoint: String,
    pub seed: u64,
}

/// Reads the data rows of a metric CSV, skipping comments and the header.
/// Fields containing commas are not supported by this reader.
pub fn read_rows(path: &Path) -> Result<Vec<CsvRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| XmodalError::io(path, e))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.starts_with('#') || line == REPORT_HEADER || line.is_empty() {
            continue;
        }
        let bad = |detail: &str| XmodalError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            detail: detail.into(),
        };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return Err(bad("expected 5 fields"));
        }
        rows.push(CsvRow {
            metric: f[0].into(),
            value: f[1].parse().map_err(|_| bad("bad value"))?,
            dataset: f[2].into(),
            checkpoint: f[3].into(),
            seed: f[4].parse().map_err(|_| bad("bad seed"))?,
        });
    }
    Ok(rows)
}
