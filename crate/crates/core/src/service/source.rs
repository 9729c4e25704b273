use std::sync::Arc;

use chrono::NaiveDateTime;

use crate::error::{Error, Result};
use crate::event_store::{EncounterRecord, EventStore, StayCap};
use crate::timeseries::{build_frame, Grid, SeriesFrame, TickIndex};

/// Where the live loop reads its series from.
pub trait SeriesSource: Send + Sync {
    fn grid(&self) -> Grid;

    /// Series over ticks `[start, end)` built only from what was known at
    /// `as_of`.
    fn frame(&self, start: TickIndex, end: TickIndex, as_of: NaiveDateTime) -> Result<SeriesFrame>;
}

/// Event-store backed source with an optional coverage start and injectable
/// outage windows.
pub struct StoreSource {
    store: Arc<EventStore>,
    grid: Grid,
    cap: StayCap,
    coverage_start: NaiveDateTime,
    gaps: Vec<(NaiveDateTime, NaiveDateTime)>,
}

impl StoreSource {
    /// Coverage starts at the grid epoch.
    pub fn new(store: Arc<EventStore>, grid: Grid, cap: StayCap) -> Self {
        Self {
            store,
            grid,
            cap,
            coverage_start: grid.epoch(),
            gaps: Vec::new(),
        }
    }

    /// Ticks before `start` are treated as unobserved.
    pub fn with_coverage_start(mut self, start: NaiveDateTime) -> Self {
        self.coverage_start = start;
        self
    }

    /// Mark `[start, end)` as a feed outage; frames touching it fail.
    pub fn add_gap(&mut self, start: NaiveDateTime, end: NaiveDateTime) {
        self.gaps.push((start, end));
    }

    pub fn store(&self) -> &Arc<EventStore> {
        &self.store
    }
}

impl SeriesSource for StoreSource {
    fn grid(&self) -> Grid {
        self.grid
    }

    fn frame(&self, start: TickIndex, end: TickIndex, as_of: NaiveDateTime) -> Result<SeriesFrame> {
        let first = self.grid.timestamp(start);
        let last = self.grid.timestamp(end - 1);
        if first < self.coverage_start {
            return Err(Error::InsufficientHistory(format!(
                "data before {} is not available (requested from {first})",
                self.coverage_start
            )));
        }
        if last > as_of {
            return Err(Error::DataGap(format!("{last} is not observed as of {as_of}")));
        }
        if let Some((a, b)) = self.gaps.iter().find(|(a, b)| *a <= last && *b > first) {
            return Err(Error::DataGap(format!("feed outage over [{a}, {b})")));
        }
        let snap = self.store.snapshot();
        let known: Vec<EncounterRecord> = snap
            .active_between(first, last, self.cap)
            .iter()
            .filter(|r| r.arrival_time <= as_of)
            .map(|r| EncounterRecord {
                departure_time: r.departure_time.filter(|d| *d <= as_of),
                ..r.clone()
            })
            .collect();
        build_frame(&known, self.grid, start, end, self.cap)
    }
}
