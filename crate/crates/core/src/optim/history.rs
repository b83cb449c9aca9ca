//! Per-epoch training diagnostics and their CSV form.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;
use thiserror::Error;

pub const HISTORY_HEADER: &str = "epoch,fit,defect,alpha,lr,seconds";

#[derive(Debug, Error)]
pub enum HistoryError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("bad history csv at line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// Mean fit and defect terms over the trajectories of one epoch, with the
/// penalty and learning rate in force and cumulative wall-clock seconds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub fit: f64,
    pub defect: f64,
    pub alpha: f64,
    pub lr: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn push(&mut self, r: EpochRecord) {
        self.records.push(r);
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(HISTORY_HEADER);
        s.push('\n');
        for r in &self.records {
            // `{:e}` round-trips f64 exactly.
            let _ = writeln!(
                s,
                "{},{:e},{:e},{:e},{:e},{:.3}",
                r.epoch, r.fit, r.defect, r.alpha, r.lr, r.seconds
            );
        }
        s
    }

    pub fn parse_csv(text: &str) -> Result<Self, HistoryError> {
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h.trim() == HISTORY_HEADER => {}
            _ => {
                return Err(HistoryError::Parse {
                    line: 1,
                    message: format!("expected header `{HISTORY_HEADER}`"),
                })
            }
        }
        let mut records = Vec::new();
        for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let err = |message: String| HistoryError::Parse {
                line: i + 2,
                message,
            };
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 6 {
                return Err(err(format!("expected 6 fields, got {}", fields.len())));
            }
            let f = |k: usize| {
                fields[k]
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| err(e.to_string()))
            };
            records.push(EpochRecord {
                epoch: fields[0]
                    .trim()
                    .parse()
                    .map_err(|e: std::num::ParseIntError| err(e.to_string()))?,
                fit: f(1)?,
                defect: f(2)?,
                alpha: f(3)?,
                lr: f(4)?,
                seconds: f(5)?,
            });
        }
        Ok(Self { records })
    }

    pub fn save(&self, path: &Path) -> Result<(), HistoryError> {
        fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, HistoryError> {
        Self::parse_csv(&fs::read_to_string(path)?)
    }
}
