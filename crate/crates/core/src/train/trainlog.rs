//! Append-only CSV training log.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::losses::LossReport;

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub lr_scale: f64,
    pub report: LossReport,
}

impl LogRow {
    fn header(&self) -> Vec<String> {
        let mut h = vec!["step".to_string(), "lr_scale".to_string()];
        h.extend(self.report.entries.iter().map(|e| e.name.clone()));
        h.push("total".into());
        h
    }

    fn record(&self) -> Vec<String> {
        let mut r = vec![self.step.to_string(), format!("{:e}", self.lr_scale)];
        r.extend(self.report.entries.iter().map(|e| format!("{:e}", e.value)));
        r.push(format!("{:e}", self.report.total));
        r
    }
}

/// Rows kept in memory and, when backed by a file, appended to it as they arrive.
pub struct TrainLog {
    path: Option<PathBuf>,
    file: Option<File>,
    header: Option<Vec<String>>,
    rows: Vec<LogRow>,
}

impl TrainLog {
    pub fn in_memory() -> Self {
        Self {
            path: None,
            file: None,
            header: None,
            rows: Vec::new(),
        }
    }

    /// Opens `path` for a run starting at `start`; rows from a previous run at
    /// or beyond `start` are dropped.
    pub fn open(path: &Path, start: u64) -> Result<Self> {
        let mut header = None;
        let mut kept = Vec::new();
        if start > 0 && path.exists() {
            let mut rdr = csv::Reader::from_path(path)
                .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
            header = Some(
                rdr.headers()
                    .map_err(|e| Error::Data(e.to_string()))?
                    .iter()
                    .map(str::to_string)
                    .collect::<Vec<_>>(),
            );
            for rec in rdr.records() {
                let rec = rec.map_err(|e| Error::Data(e.to_string()))?;
                let step: u64 = rec
                    .get(0)
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| Error::Data(format!("bad step in {}", path.display())))?;
                if step < start {
                    kept.push(rec);
                }
            }
        }
        let mut file = File::create(path).map_err(|e| Error::io(path, e))?;
        if let Some(h) = &header {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(h).map_err(|e| Error::Data(e.to_string()))?;
            for r in &kept {
                w.write_record(r).map_err(|e| Error::Data(e.to_string()))?;
            }
            let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
            file.write_all(&bytes).map_err(|e| Error::io(path, e))?;
        }
        drop(file);
        let file = OpenOptions::new().append(true).open(path).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path: Some(path.to_path_buf()),
            file: Some(file),
            header,
            rows: Vec::new(),
        })
    }

    pub fn push(&mut self, row: LogRow) -> Result<()> {
        if let Some(file) = self.file.as_mut() {
            let path = self.path.as_deref().unwrap();
            let mut w = csv::Writer::from_writer(Vec::new());
            match &self.header {
                None => {
                    let h = row.header();
                    w.write_record(&h).map_err(|e| Error::Data(e.to_string()))?;
                    self.header = Some(h);
                }
                Some(h) if *h != row.header() => {
                    return Err(Error::Data(format!(
                        "{} has columns {h:?}, the run logs {:?}",
                        path.display(),
                        row.header()
                    )));
                }
                Some(_) => {}
            }
            w.write_record(row.record()).map_err(|e| Error::Data(e.to_string()))?;
            let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
            file.write_all(&bytes).map_err(|e| Error::io(path, e))?;
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn rows(&self) -> &[LogRow] {
        &self.rows
    }

    pub fn into_rows(self) -> Vec<LogRow> {
        self.rows
    }
}
