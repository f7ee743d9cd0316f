use std::fs::OpenOptions;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Result, SaolError};
use crate::wsol::csv_error;

/// One line of the training log. Loss terms that were not computed are
/// logged as zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub epoch: u64,
    pub step: u64,
    pub loss_sl: f64,
    pub loss_ss1: f64,
    pub loss_ss2: f64,
    pub loss_sd: f64,
    pub acc_saol: f64,
    pub acc_gapfc: f64,
}

/// Append-only CSV log; the header is written when the file is created.
#[derive(Clone, Debug)]
pub struct MetricsLog {
    path: PathBuf,
}

impl MetricsLog {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        MetricsLog { path: path.into() }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&self, row: &MetricsRow) -> Result<()> {
        let fresh = !self.path.exists();
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .map_err(|e| SaolError::io(&self.path, e))?;
        let mut wr = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
        wr.serialize(row).map_err(|e| csv_error(&self.path, e))?;
        wr.flush().map_err(|e| SaolError::io(&self.path, e))
    }

    pub fn read(&self) -> Result<Vec<MetricsRow>> {
        let mut rd = csv::Reader::from_path(&self.path).map_err(|e| csv_error(&self.path, e))?;
        rd.deserialize()
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| csv_error(&self.path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_once_and_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let log = MetricsLog::new(dir.path().join("m.csv"));
        let row = MetricsRow {
            epoch: 1,
            step: 10,
            loss_sl: 0.5,
            loss_ss1: 0.0,
            loss_ss2: 0.25,
            loss_sd: 0.125,
            acc_saol: 0.9,
            acc_gapfc: 0.8,
        };
        log.append(&row).unwrap();
        log.append(&MetricsRow { epoch: 2, ..row.clone() }).unwrap();
        let text = std::fs::read_to_string(log.path()).unwrap();
        assert!(text.starts_with("epoch,step,loss_sl,loss_ss1,loss_ss2,loss_sd,acc_saol,acc_gapfc\n"));
        assert_eq!(text.lines().count(), 3);
        let rows = log.read().unwrap();
        assert_eq!(rows[0], row);
        assert_eq!(rows[1].epoch, 2);
    }
}
