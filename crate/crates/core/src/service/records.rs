use std::collections::{BTreeSet, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use chrono::NaiveDateTime;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forecaster::{Family, TargetSpec};
use crate::timefmt;
use crate::timeseries::TickIndex;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PredictionStatus {
    Ok,
    SkippedWarmup,
    Error,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReconcileState {
    Pending,
    Reconciled,
    Unreconcilable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    /// `<made_at>/<target>`, unique per record.
    pub id: String,
    pub tick: TickIndex,
    #[serde(with = "timefmt::minute")]
    pub made_at: NaiveDateTime,
    pub target: TargetSpec,
    pub family: Family,
    pub status: PredictionStatus,
    pub predicted: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub actual: Option<f64>,
    pub abs_err: Option<f64>,
    pub reconcile: ReconcileState,
    pub attempts: u32,
}

impl PredictionRecord {
    pub fn record_id(made_at: NaiveDateTime, target: TargetSpec) -> String {
        format!("{}/{}", timefmt::format(&made_at), target)
    }

    pub fn due_at(&self) -> NaiveDateTime {
        crate::forecaster::due_time(self.made_at, self.target)
    }
}

/// One line of the prediction log. Predictions are written once; later
/// lines only carry reconciliation outcomes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "kebab-case")]
enum LogEvent {
    Prediction(PredictionRecord),
    Reconciliation {
        id: String,
        actual: Option<f64>,
        abs_err: Option<f64>,
        attempts: u32,
        state: ReconcileState,
    },
}

/// Append-only prediction log with an in-memory index.
#[derive(Debug, Default)]
pub struct PredictionLog {
    records: Vec<PredictionRecord>,
    by_id: HashMap<String, usize>,
    /// Indices of records still pending, ordered by (due time, index).
    pending: BTreeSet<(NaiveDateTime, usize)>,
    path: Option<PathBuf>,
    writer: Option<BufWriter<File>>,
}

impl PredictionLog {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Open (and replay) the JSONL log at `path`, creating it if absent.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let mut log = Self::default();
        if path.exists() {
            let reader = BufReader::new(File::open(&path)?);
            for (n, line) in reader.lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let event: LogEvent = serde_json::from_str(&line).map_err(|e| {
                    Error::Validation(format!("{} line {}: {e}", path.display(), n + 1))
                })?;
                log.apply(event)?;
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        log.writer = Some(BufWriter::new(file));
        log.path = Some(path);
        Ok(log)
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    fn apply(&mut self, event: LogEvent) -> Result<()> {
        match event {
            LogEvent::Prediction(r) => {
                if self.by_id.contains_key(&r.id) {
                    return Err(Error::Validation(format!("duplicate prediction {}", r.id)));
                }
                let i = self.records.len();
                if r.reconcile == ReconcileState::Pending {
                    self.pending.insert((r.due_at(), i));
                }
                self.by_id.insert(r.id.clone(), i);
                self.records.push(r);
            }
            LogEvent::Reconciliation {
                id,
                actual,
                abs_err,
                attempts,
                state,
            } => {
                let &i = self
                    .by_id
                    .get(&id)
                    .ok_or_else(|| Error::Validation(format!("reconciliation for unknown {id}")))?;
                let r = &mut self.records[i];
                let due = r.due_at();
                r.actual = actual;
                r.abs_err = abs_err;
                r.attempts = attempts;
                r.reconcile = state;
                if state != ReconcileState::Pending {
                    self.pending.remove(&(due, i));
                }
            }
        }
        Ok(())
    }

    fn write(&mut self, event: &LogEvent) -> Result<()> {
        if let Some(w) = self.writer.as_mut() {
            serde_json::to_writer(&mut *w, event)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        if let Some(w) = self.writer.as_mut() {
            w.flush()?;
        }
        Ok(())
    }

    pub fn contains(&self, id: &str) -> bool {
        self.by_id.contains_key(id)
    }

    pub fn append(&mut self, records: &[PredictionRecord]) -> Result<()> {
        for r in records {
            if self.contains(&r.id) {
                return Err(Error::Validation(format!("duplicate prediction {}", r.id)));
            }
        }
        for r in records {
            let event = LogEvent::Prediction(r.clone());
            self.write(&event)?;
            self.apply(event)?;
        }
        self.flush()
    }

    /// Indices of pending records due at or before `now`.
    pub fn due(&self, now: NaiveDateTime) -> Vec<usize> {
        self.pending
            .iter()
            .take_while(|(due, _)| *due <= now)
            .map(|&(_, i)| i)
            .collect()
    }

    pub fn get(&self, i: usize) -> &PredictionRecord {
        &self.records[i]
    }

    /// Persist and apply a reconciliation outcome for record `i`.
    pub fn update(
        &mut self,
        i: usize,
        actual: Option<f64>,
        abs_err: Option<f64>,
        attempts: u32,
        state: ReconcileState,
    ) -> Result<()> {
        let event = LogEvent::Reconciliation {
            id: self.records[i].id.clone(),
            actual,
            abs_err,
            attempts,
            state,
        };
        self.write(&event)?;
        self.apply(event)
    }

    pub fn records(&self) -> &[PredictionRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Records made in `[from, to)`, optionally for one target.
    pub fn query(
        &self,
        from: NaiveDateTime,
        to: NaiveDateTime,
        target: Option<TargetSpec>,
    ) -> Vec<PredictionRecord> {
        self.records
            .iter()
            .filter(|r| r.made_at >= from && r.made_at < to)
            .filter(|r| target.is_none_or(|t| r.target == t))
            .cloned()
            .collect()
    }

    pub fn last_tick(&self) -> Option<NaiveDateTime> {
        self.records.iter().map(|r| r.made_at).max()
    }
}
