use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One row of the metrics log. `epoch` is 1-based.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_err: f64,
    pub test_err: Option<f64>,
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Format {
            offset: 0,
            message: format!("{}: {other:?}", path.display()),
        },
    }
}

/// Write the log with header `epoch,lr,train_loss,train_err,test_err`.
pub fn write_metrics_csv(path: &Path, log: &[EpochMetrics]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    if log.is_empty() {
        w.write_record(["epoch", "lr", "train_loss", "train_err", "test_err"])
            .map_err(|e| csv_error(path, e))?;
    }
    for m in log {
        w.serialize(m).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<EpochMetrics>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    r.deserialize()
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| csv_error(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let log = vec![
            EpochMetrics { epoch: 1, lr: 0.1, train_loss: 2.3, train_err: 0.9, test_err: Some(0.85) },
            EpochMetrics { epoch: 2, lr: 0.01, train_loss: 1.5, train_err: 0.5, test_err: None },
        ];
        write_metrics_csv(&path, &log).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("epoch,lr,train_loss,train_err,test_err\n"));
        assert_eq!(read_metrics_csv(&path).unwrap(), log);
    }
}
