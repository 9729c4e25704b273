//! Encounter ingest, validation, persistence and time-range queries.
//!
//! Persistence is an append-only JSONL log replayed on open; all queries are
//! served from an in-memory index sorted by arrival time. Writers build a new
//! index and swap it in, so readers always see the snapshot current at the
//! time of their call.

use std::collections::HashMap;
use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use chrono::{Duration, NaiveDateTime};
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::timefmt;

/// Stay assumed for encounters without a recorded departure.
pub const DEFAULT_STAY_CAP_HOURS: i64 = 24;

/// One ED visit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncounterRecord {
    pub encounter_id: String,
    #[serde(with = "timefmt::minute")]
    pub arrival_time: NaiveDateTime,
    #[serde(with = "timefmt::minute_opt", default)]
    pub departure_time: Option<NaiveDateTime>,
    #[serde(default)]
    pub esi: Option<u8>,
}

impl EncounterRecord {
    pub fn new(
        encounter_id: impl Into<String>,
        arrival_time: NaiveDateTime,
        departure_time: Option<NaiveDateTime>,
        esi: Option<u8>,
    ) -> Result<Self> {
        let rec = Self {
            encounter_id: encounter_id.into(),
            arrival_time,
            departure_time,
            esi,
        };
        rec.validate().map_err(|r| Error::Validation(r.to_string()))?;
        Ok(rec)
    }

    fn validate(&self) -> std::result::Result<(), RejectReason> {
        if self.encounter_id.trim().is_empty() {
            return Err(RejectReason::MissingEncounterId);
        }
        if let Some(dep) = self.departure_time {
            if dep <= self.arrival_time {
                return Err(RejectReason::NonPositiveStay);
            }
        }
        if let Some(esi) = self.esi {
            if !(1..=5).contains(&esi) {
                return Err(RejectReason::EsiOutOfRange(i64::from(esi)));
            }
        }
        Ok(())
    }

    pub fn acuity(&self) -> Option<AcuityGroup> {
        self.esi.and_then(|e| acuity_group(e).ok())
    }

    /// Departure used for census reconstruction: the recorded one, or
    /// `arrival + cap` when absent.
    pub fn effective_departure(&self, cap: StayCap) -> NaiveDateTime {
        self.departure_time
            .unwrap_or(self.arrival_time + cap.duration())
    }
}

/// Upper bound on the assumed stay of encounters with no departure time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StayCap {
    pub hours: i64,
}

impl StayCap {
    pub fn duration(self) -> Duration {
        Duration::hours(self.hours)
    }
}

impl Default for StayCap {
    fn default() -> Self {
        Self {
            hours: DEFAULT_STAY_CAP_HOURS,
        }
    }
}

/// Three-way collapse of the ESI triage scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AcuityGroup {
    Emergent,
    Urgent,
    #[serde(rename = "nonurgent")]
    NonUrgent,
}

impl AcuityGroup {
    pub const ALL: [AcuityGroup; 3] = [Self::Emergent, Self::Urgent, Self::NonUrgent];

    pub fn index(self) -> usize {
        match self {
            Self::Emergent => 0,
            Self::Urgent => 1,
            Self::NonUrgent => 2,
        }
    }

    /// ESI levels that map to this group.
    pub fn esi_levels(self) -> &'static [u8] {
        match self {
            Self::Emergent => &[1, 2],
            Self::Urgent => &[3],
            Self::NonUrgent => &[4, 5],
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Emergent => "emergent",
            Self::Urgent => "urgent",
            Self::NonUrgent => "nonurgent",
        }
    }
}

impl fmt::Display for AcuityGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

pub fn acuity_group(esi: u8) -> Result<AcuityGroup> {
    match esi {
        1 | 2 => Ok(AcuityGroup::Emergent),
        3 => Ok(AcuityGroup::Urgent),
        4 | 5 => Ok(AcuityGroup::NonUrgent),
        other => Err(domain(format!("ESI {other} outside 1..5"))),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "detail", rename_all = "kebab-case")]
pub enum RejectReason {
    Malformed(String),
    MissingEncounterId,
    BadTimestamp(String),
    NonPositiveStay,
    EsiOutOfRange(i64),
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Malformed(m) => write!(f, "malformed row: {m}"),
            Self::MissingEncounterId => f.write_str("missing encounter_id"),
            Self::BadTimestamp(field) => write!(f, "bad timestamp in {field}"),
            Self::NonPositiveStay => f.write_str("non-positive stay"),
            Self::EsiOutOfRange(v) => write!(f, "esi {v} outside 1..5"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowReject {
    /// 1-based data row number (header excluded).
    pub row: usize,
    pub reason: RejectReason,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestReport {
    pub rows: usize,
    pub accepted: usize,
    pub rejected: usize,
    /// Accepted rows whose encounter_id replaced an existing record.
    pub replaced: usize,
    /// Accepted rows carrying a valid ESI.
    pub with_acuity: usize,
    pub rejects: Vec<RowReject>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputFormat {
    Csv,
    Jsonl,
}

impl InputFormat {
    pub fn from_path(path: &Path) -> Result<Self> {
        match path.extension().and_then(|e| e.to_str()) {
            Some("csv") => Ok(Self::Csv),
            Some("jsonl") | Some("json") | Some("ndjson") => Ok(Self::Jsonl),
            _ => Err(domain(format!(
                "cannot infer input format of {}; expected .csv or .jsonl",
                path.display()
            ))),
        }
    }
}

pub const CSV_HEADER: [&str; 4] = ["encounter_id", "arrival_time", "departure_time", "esi"];

/// Parse a whole source into per-row outcomes. Unreadable sources fail as a
/// whole; individual malformed rows become rejects.
pub fn parse_source<R: Read>(
    reader: R,
    format: InputFormat,
) -> Result<Vec<std::result::Result<EncounterRecord, RejectReason>>> {
    match format {
        InputFormat::Csv => parse_csv(reader),
        InputFormat::Jsonl => parse_jsonl(reader),
    }
}

fn parse_csv<R: Read>(
    reader: R,
) -> Result<Vec<std::result::Result<EncounterRecord, RejectReason>>> {
    let mut rdr = csv::ReaderBuilder::new()
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let mut cols = [0usize; 4];
    for (slot, name) in cols.iter_mut().zip(CSV_HEADER) {
        *slot = headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Validation(format!("CSV header lacks column {name:?}")))?;
    }
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = match row {
            Ok(r) => r,
            Err(e) if e.is_io_error() => return Err(e.into()),
            Err(e) => {
                out.push(Err(RejectReason::Malformed(e.to_string())));
                continue;
            }
        };
        let field = |i: usize| row.get(cols[i]).map(str::to_owned);
        let parsed = match (field(0), field(1), field(2), field(3)) {
            (Some(id), Some(arr), Some(dep), Some(esi)) => {
                build_record(id, Some(arr), non_empty(dep), non_empty(esi).map(RawEsi::Text))
            }
            _ => Err(RejectReason::Malformed(format!(
                "expected {} fields, found {}",
                headers.len(),
                row.len()
            ))),
        };
        out.push(parsed);
    }
    Ok(out)
}

fn parse_jsonl<R: Read>(
    reader: R,
) -> Result<Vec<std::result::Result<EncounterRecord, RejectReason>>> {
    let mut out = Vec::new();
    for line in BufReader::new(reader).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = match serde_json::from_str(&line) {
            Ok(v) => v,
            Err(e) => {
                out.push(Err(RejectReason::Malformed(e.to_string())));
                continue;
            }
        };
        let Some(obj) = value.as_object() else {
            out.push(Err(RejectReason::Malformed("row is not a JSON object".into())));
            continue;
        };
        let text = |k: &str| match obj.get(k) {
            Some(serde_json::Value::String(s)) => non_empty(s.clone()),
            Some(serde_json::Value::Number(n)) => Some(n.to_string()),
            _ => None,
        };
        let esi = match obj.get("esi") {
            None | Some(serde_json::Value::Null) => None,
            Some(serde_json::Value::Number(n)) => Some(RawEsi::Number(n.as_f64())),
            Some(serde_json::Value::String(s)) => non_empty(s.clone()).map(RawEsi::Text),
            Some(other) => Some(RawEsi::Text(other.to_string())),
        };
        out.push(build_record(
            text("encounter_id").unwrap_or_default(),
            text("arrival_time"),
            text("departure_time"),
            esi,
        ));
    }
    Ok(out)
}

enum RawEsi {
    Text(String),
    Number(Option<f64>),
}

fn non_empty(s: String) -> Option<String> {
    let t = s.trim();
    if t.is_empty() || t.eq_ignore_ascii_case("null") {
        None
    } else {
        Some(t.to_owned())
    }
}

fn build_record(
    id: String,
    arrival: Option<String>,
    departure: Option<String>,
    esi: Option<RawEsi>,
) -> std::result::Result<EncounterRecord, RejectReason> {
    let arrival_time = arrival
        .as_deref()
        .and_then(timefmt::parse)
        .ok_or_else(|| RejectReason::BadTimestamp("arrival_time".into()))?;
    let departure_time = match departure {
        None => None,
        Some(raw) => Some(
            timefmt::parse(&raw)
                .ok_or_else(|| RejectReason::BadTimestamp("departure_time".into()))?,
        ),
    };
    let esi = match esi {
        None => None,
        Some(raw) => {
            let value = match raw {
                RawEsi::Text(t) => t.parse::<f64>().ok(),
                RawEsi::Number(n) => n,
            };
            match value {
                Some(v) if v.fract() == 0.0 && (1.0..=5.0).contains(&v) => Some(v as u8),
                Some(v) if v.fract() == 0.0 => return Err(RejectReason::EsiOutOfRange(v as i64)),
                _ => return Err(RejectReason::Malformed("esi is not an integer".into())),
            }
        }
    };
    let rec = EncounterRecord {
        encounter_id: id.trim().to_owned(),
        arrival_time,
        departure_time,
        esi,
    };
    rec.validate()?;
    Ok(rec)
}

/// Immutable view of the store, ordered by `(arrival_time, encounter_id)`.
#[derive(Debug, Default)]
pub struct Snapshot {
    records: Vec<EncounterRecord>,
    /// Positions (into `records`) of encounters without a departure time.
    open: Vec<usize>,
    /// Longest recorded stay among records with a departure time.
    max_stay: Duration,
}

impl Snapshot {
    fn build(mut records: Vec<EncounterRecord>) -> Self {
        records.sort_by(|a, b| {
            a.arrival_time
                .cmp(&b.arrival_time)
                .then_with(|| a.encounter_id.cmp(&b.encounter_id))
        });
        let mut open = Vec::new();
        let mut max_stay = Duration::zero();
        for (i, r) in records.iter().enumerate() {
            match r.departure_time {
                Some(dep) => max_stay = max_stay.max(dep - r.arrival_time),
                None => open.push(i),
            }
        }
        Self {
            records,
            open,
            max_stay,
        }
    }

    pub fn records(&self) -> &[EncounterRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn first_arrival(&self) -> Option<NaiveDateTime> {
        self.records.first().map(|r| r.arrival_time)
    }

    pub fn last_arrival(&self) -> Option<NaiveDateTime> {
        self.records.last().map(|r| r.arrival_time)
    }

    fn lower_bound(&self, t: NaiveDateTime) -> usize {
        self.records.partition_point(|r| r.arrival_time < t)
    }

    /// Records with `arrival_time < end` and (no departure or
    /// `departure_time > start`), ordered by arrival time.
    pub fn query(&self, start: NaiveDateTime, end: NaiveDateTime) -> Result<Vec<EncounterRecord>> {
        if start >= end {
            return Err(domain(format!("empty query range [{start}, {end})")));
        }
        let lo = self.lower_bound(start - self.max_stay);
        let hi = self.lower_bound(end);
        let mut idx: Vec<usize> = (lo..hi)
            .filter(|&i| self.records[i].departure_time.is_some_and(|d| d > start))
            .collect();
        idx.extend(self.open.iter().copied().filter(|&i| i < hi));
        idx.sort_unstable();
        idx.dedup();
        Ok(idx.into_iter().map(|i| self.records[i].clone()).collect())
    }

    /// Records that can contribute to census or arrivals inside
    /// `[start, end]` once absent departures are capped.
    pub fn active_between(
        &self,
        start: NaiveDateTime,
        end: NaiveDateTime,
        cap: StayCap,
    ) -> &[EncounterRecord] {
        let reach = self.max_stay.max(cap.duration());
        let lo = self.lower_bound(start - reach);
        let hi = self.records.partition_point(|r| r.arrival_time <= end);
        &self.records[lo..hi.max(lo)]
    }
}

/// Append-log backed encounter store.
pub struct EventStore {
    state: RwLock<Arc<Snapshot>>,
    writer: Mutex<StoreWriter>,
}

struct StoreWriter {
    by_id: HashMap<String, EncounterRecord>,
    log: Option<PathBuf>,
}

impl Default for EventStore {
    fn default() -> Self {
        Self::in_memory()
    }
}

impl EventStore {
    pub fn in_memory() -> Self {
        Self {
            state: RwLock::new(Arc::new(Snapshot::default())),
            writer: Mutex::new(StoreWriter {
                by_id: HashMap::new(),
                log: None,
            }),
        }
    }

    /// Open (or create) a store persisted at `log_path`, replaying its log.
    pub fn open(log_path: impl AsRef<Path>) -> Result<Self> {
        let path = log_path.as_ref().to_path_buf();
        let mut by_id = HashMap::new();
        if path.exists() {
            let file = BufReader::new(File::open(&path)?);
            for (n, line) in file.lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let rec: EncounterRecord = serde_json::from_str(&line).map_err(|e| {
                    Error::Validation(format!("{}:{}: {e}", path.display(), n + 1))
                })?;
                by_id.insert(rec.encounter_id.clone(), rec);
            }
        } else if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let snapshot = Snapshot::build(by_id.values().cloned().collect());
        Ok(Self {
            state: RwLock::new(Arc::new(snapshot)),
            writer: Mutex::new(StoreWriter {
                by_id,
                log: Some(path),
            }),
        })
    }

    pub fn from_records(records: impl IntoIterator<Item = EncounterRecord>) -> Result<Self> {
        let store = Self::in_memory();
        store.insert_all(records)?;
        Ok(store)
    }

    /// The snapshot current at call time.
    pub fn snapshot(&self) -> Arc<Snapshot> {
        Arc::clone(&self.state.read().expect("store lock poisoned"))
    }

    pub fn ingest_path(&self, path: impl AsRef<Path>) -> Result<IngestReport> {
        let path = path.as_ref();
        let format = InputFormat::from_path(path)?;
        let file = File::open(path)?;
        self.ingest(file, format)
    }

    pub fn ingest<R: Read>(&self, source: R, format: InputFormat) -> Result<IngestReport> {
        let rows = parse_source(source, format)?;
        let mut report = IngestReport {
            rows: rows.len(),
            ..IngestReport::default()
        };
        let mut accepted = Vec::new();
        for (i, row) in rows.into_iter().enumerate() {
            match row {
                Ok(rec) => accepted.push(rec),
                Err(reason) => report.rejects.push(RowReject { row: i + 1, reason }),
            }
        }
        report.rejected = report.rejects.len();
        report.accepted = accepted.len();
        report.with_acuity = accepted.iter().filter(|r| r.esi.is_some()).count();
        report.replaced = self.insert_all(accepted)?;
        Ok(report)
    }

    /// Insert validated records, returning how many replaced an existing id.
    pub fn insert_all(&self, records: impl IntoIterator<Item = EncounterRecord>) -> Result<usize> {
        let mut writer = self.writer.lock().expect("store writer poisoned");
        let mut log = match &writer.log {
            Some(p) => Some(BufWriter::new(
                OpenOptions::new().create(true).append(true).open(p)?,
            )),
            None => None,
        };
        let mut replaced = 0;
        for rec in records {
            rec.validate().map_err(|r| Error::Validation(r.to_string()))?;
            if let Some(log) = log.as_mut() {
                serde_json::to_writer(&mut *log, &rec)?;
                log.write_all(b"\n")?;
            }
            if writer.by_id.insert(rec.encounter_id.clone(), rec).is_some() {
                replaced += 1;
            }
        }
        if let Some(mut log) = log {
            log.flush()?;
        }
        let snapshot = Snapshot::build(writer.by_id.values().cloned().collect());
        *self.state.write().expect("store lock poisoned") = Arc::new(snapshot);
        Ok(replaced)
    }

    pub fn query(&self, start: NaiveDateTime, end: NaiveDateTime) -> Result<Vec<EncounterRecord>> {
        self.snapshot().query(start, end)
    }

    pub fn len(&self) -> usize {
        self.snapshot().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Write every record in the external CSV format, ordered by arrival.
    pub fn export_csv<W: Write>(&self, out: W) -> Result<()> {
        write_csv(out, self.snapshot().records())
    }
}

pub fn write_csv<W: Write>(out: W, records: &[EncounterRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    for r in records {
        let dep = r.departure_time.map(|d| timefmt::format(&d)).unwrap_or_default();
        let esi = r.esi.map(|e| e.to_string()).unwrap_or_default();
        w.write_record([
            r.encounter_id.as_str(),
            &timefmt::format(&r.arrival_time),
            &dep,
            &esi,
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_jsonl<W: Write>(mut out: W, records: &[EncounterRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}
