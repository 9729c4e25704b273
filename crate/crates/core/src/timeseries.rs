//! Census and per-acuity arrival counts on a 15-minute grid.
//!
//! Boundary conventions: a patient arriving exactly at tick `t` is counted in
//! the census at `t`, one departing exactly at `t` is not. Arrivals labelled
//! with tick `t` are those in the half-open window `(t - 15min, t]`.

use std::fmt;
use std::io::Write;
use std::ops::{Add, Sub};

use chrono::{Duration, NaiveDate, NaiveDateTime, Timelike};
use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};
use crate::event_store::{AcuityGroup, EncounterRecord, StayCap};
use crate::timefmt;

pub const TICK_MINUTES: i64 = 15;
pub const TICKS_PER_HOUR: i64 = 4;
pub const TICKS_PER_DAY: i64 = 96;
pub const TICKS_PER_WEEK: i64 = 7 * TICKS_PER_DAY;

/// Ordinal of a 15-minute interval relative to a [`Grid`] epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TickIndex(pub i64);

impl TickIndex {
    pub fn ordinal(self) -> i64 {
        self.0
    }
}

impl Add<i64> for TickIndex {
    type Output = TickIndex;
    fn add(self, rhs: i64) -> TickIndex {
        TickIndex(self.0 + rhs)
    }
}

impl Sub<i64> for TickIndex {
    type Output = TickIndex;
    fn sub(self, rhs: i64) -> TickIndex {
        TickIndex(self.0 - rhs)
    }
}

impl Sub for TickIndex {
    type Output = i64;
    fn sub(self, rhs: TickIndex) -> i64 {
        self.0 - rhs.0
    }
}

impl fmt::Display for TickIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "tick {}", self.0)
    }
}

/// Maps tick ordinals to local timestamps. The epoch is a local midnight.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grid {
    #[serde(with = "timefmt::minute")]
    epoch: NaiveDateTime,
}

impl Grid {
    pub fn new(epoch_date: NaiveDate) -> Self {
        Self {
            epoch: epoch_date.and_hms_opt(0, 0, 0).expect("midnight"),
        }
    }

    /// Grid anchored at midnight of the earliest arrival date.
    pub fn from_records<'a>(records: impl IntoIterator<Item = &'a EncounterRecord>) -> Option<Self> {
        records
            .into_iter()
            .map(|r| r.arrival_time)
            .min()
            .map(|t| Self::new(t.date()))
    }

    pub fn epoch(&self) -> NaiveDateTime {
        self.epoch
    }

    pub fn timestamp(&self, t: TickIndex) -> NaiveDateTime {
        self.epoch + Duration::minutes(t.0 * TICK_MINUTES)
    }

    /// Tick whose timestamp is exactly `ts`; errors when `ts` is off-grid.
    pub fn tick_at(&self, ts: NaiveDateTime) -> Result<TickIndex> {
        let minutes = (ts - self.epoch).num_minutes();
        if ts.second() != 0 || minutes.rem_euclid(TICK_MINUTES) != 0 {
            return Err(domain(format!("{ts} is not on the 15-minute grid")));
        }
        Ok(TickIndex(minutes.div_euclid(TICK_MINUTES)))
    }

    /// Smallest tick whose timestamp is `>= ts`.
    pub fn ceil_tick(&self, ts: NaiveDateTime) -> TickIndex {
        let secs = (ts - self.epoch).num_seconds();
        let step = TICK_MINUTES * 60;
        TickIndex(secs.div_euclid(step) + i64::from(secs.rem_euclid(step) != 0))
    }

    /// Largest tick whose timestamp is `<= ts`.
    pub fn floor_tick(&self, ts: NaiveDateTime) -> TickIndex {
        let secs = (ts - self.epoch).num_seconds();
        TickIndex(secs.div_euclid(TICK_MINUTES * 60))
    }
}

/// Which series of a frame a feature or target reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "series", content = "group")]
pub enum SeriesKind {
    Census,
    Arrivals(AcuityGroup),
}

impl SeriesKind {
    pub const ALL: [SeriesKind; 4] = [
        SeriesKind::Census,
        SeriesKind::Arrivals(AcuityGroup::Emergent),
        SeriesKind::Arrivals(AcuityGroup::Urgent),
        SeriesKind::Arrivals(AcuityGroup::NonUrgent),
    ];

    pub fn label(self) -> String {
        match self {
            SeriesKind::Census => "census".into(),
            SeriesKind::Arrivals(g) => format!("arrivals_{g}"),
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "census" => Some(SeriesKind::Census),
            "arrivals_emergent" | "emergent" => Some(SeriesKind::Arrivals(AcuityGroup::Emergent)),
            "arrivals_urgent" | "urgent" => Some(SeriesKind::Arrivals(AcuityGroup::Urgent)),
            "arrivals_nonurgent" | "nonurgent" => {
                Some(SeriesKind::Arrivals(AcuityGroup::NonUrgent))
            }
            _ => None,
        }
    }
}

impl fmt::Display for SeriesKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

/// Number of records present at `at`: arrived at or before it, effective
/// departure strictly after it.
pub fn census_at(records: &[EncounterRecord], at: NaiveDateTime, cap: StayCap) -> u32 {
    records
        .iter()
        .filter(|r| r.arrival_time <= at && r.effective_departure(cap) > at)
        .count() as u32
}

/// Arrivals of group `g` in the window `(t1, t2]`.
pub fn arrivals_in(
    records: &[EncounterRecord],
    g: AcuityGroup,
    t1: NaiveDateTime,
    t2: NaiveDateTime,
) -> Result<u32> {
    if t1 >= t2 {
        return Err(domain(format!("empty arrival window ({t1}, {t2}]")));
    }
    Ok(records
        .iter()
        .filter(|r| r.acuity() == Some(g) && r.arrival_time > t1 && r.arrival_time <= t2)
        .count() as u32)
}

/// Aligned census and arrival series over a contiguous tick range.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeriesFrame {
    grid: Grid,
    start: TickIndex,
    census: Vec<u32>,
    arrivals: [Vec<u32>; 3],
}

impl SeriesFrame {
    pub fn from_parts(
        grid: Grid,
        start: TickIndex,
        census: Vec<u32>,
        arrivals: [Vec<u32>; 3],
    ) -> Result<Self> {
        if arrivals.iter().any(|a| a.len() != census.len()) {
            return Err(domain("series lengths differ"));
        }
        Ok(Self {
            grid,
            start,
            census,
            arrivals,
        })
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn start(&self) -> TickIndex {
        self.start
    }

    /// One past the last tick.
    pub fn end(&self) -> TickIndex {
        self.start + self.census.len() as i64
    }

    pub fn len(&self) -> usize {
        self.census.len()
    }

    pub fn is_empty(&self) -> bool {
        self.census.is_empty()
    }

    pub fn contains(&self, t: TickIndex) -> bool {
        t >= self.start && t < self.end()
    }

    pub fn ticks(&self) -> impl Iterator<Item = TickIndex> {
        (self.start.0..self.end().0).map(TickIndex)
    }

    pub fn census(&self) -> &[u32] {
        &self.census
    }

    pub fn arrivals(&self, g: AcuityGroup) -> &[u32] {
        &self.arrivals[g.index()]
    }

    pub fn series(&self, kind: SeriesKind) -> &[u32] {
        match kind {
            SeriesKind::Census => &self.census,
            SeriesKind::Arrivals(g) => self.arrivals(g),
        }
    }

    /// Value of `kind` at tick `t`, if the frame covers it.
    pub fn value(&self, kind: SeriesKind, t: TickIndex) -> Option<u32> {
        self.contains(t)
            .then(|| self.series(kind)[(t - self.start) as usize])
    }

    pub fn timestamp(&self, t: TickIndex) -> NaiveDateTime {
        self.grid.timestamp(t)
    }

    /// Sub-frame over `[start, end)`, clipped to this frame.
    pub fn slice(&self, start: TickIndex, end: TickIndex) -> Result<SeriesFrame> {
        let s = start.max(self.start);
        let e = end.min(self.end());
        if s >= e {
            return Err(domain("slice outside frame"));
        }
        let (a, b) = ((s - self.start) as usize, (e - self.start) as usize);
        Ok(SeriesFrame {
            grid: self.grid,
            start: s,
            census: self.census[a..b].to_vec(),
            arrivals: std::array::from_fn(|g| self.arrivals[g][a..b].to_vec()),
        })
    }

    /// Append a frame that starts where this one ends.
    pub fn concat(mut self, next: &SeriesFrame) -> Result<SeriesFrame> {
        if next.grid != self.grid || next.start != self.end() {
            return Err(domain("frames are not adjacent on the same grid"));
        }
        self.census.extend_from_slice(&next.census);
        for (mine, theirs) in self.arrivals.iter_mut().zip(&next.arrivals) {
            mine.extend_from_slice(theirs);
        }
        Ok(self)
    }

    /// CSV `timestamp,census,arrivals_emergent,arrivals_urgent,arrivals_nonurgent`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "timestamp",
            "census",
            "arrivals_emergent",
            "arrivals_urgent",
            "arrivals_nonurgent",
        ])?;
        for (i, t) in self.ticks().enumerate() {
            w.write_record([
                timefmt::format(&self.timestamp(t)),
                self.census[i].to_string(),
                self.arrivals[0][i].to_string(),
                self.arrivals[1][i].to_string(),
                self.arrivals[2][i].to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Reconstruct the frame over ticks `[start, end)` from encounter records.
///
/// Runs in O(records + ticks) with difference arrays. Records need not be
/// sorted and may extend beyond the span.
pub fn build_frame(
    records: &[EncounterRecord],
    grid: Grid,
    start: TickIndex,
    end: TickIndex,
    cap: StayCap,
) -> Result<SeriesFrame> {
    if start >= end {
        return Err(domain(format!("empty frame span [{start}, {end})")));
    }
    let len = (end - start) as usize;
    let mut delta = vec![0i64; len + 1];
    let mut arrivals: [Vec<u32>; 3] = std::array::from_fn(|_| vec![0u32; len]);
    for r in records {
        // First tick at or after arrival: the record is present from it, and
        // it is also the tick whose window (t-15, t] contains the arrival.
        let first = grid.ceil_tick(r.arrival_time);
        let gone = grid.ceil_tick(r.effective_departure(cap));
        let lo = first.max(start);
        let hi = gone.min(end);
        if lo < hi {
            delta[(lo - start) as usize] += 1;
            delta[(hi - start) as usize] -= 1;
        }
        if let Some(g) = r.acuity() {
            if first >= start && first < end {
                arrivals[g.index()][(first - start) as usize] += 1;
            }
        }
    }
    let mut census = Vec::with_capacity(len);
    let mut running = 0i64;
    for d in &delta[..len] {
        running += d;
        census.push(running as u32);
    }
    SeriesFrame::from_parts(grid, start, census, arrivals)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ts(s: &str) -> NaiveDateTime {
        timefmt::parse(s).unwrap()
    }

    fn grid() -> Grid {
        Grid::new(NaiveDate::from_ymd_opt(2014, 1, 1).unwrap())
    }

    fn rec(id: &str, arr: &str, dep: Option<&str>, esi: Option<u8>) -> EncounterRecord {
        EncounterRecord::new(id, ts(arr), dep.map(ts), esi).unwrap()
    }

    #[test]
    fn grid_round_trip() {
        let g = grid();
        let t = g.tick_at(ts("2014-01-02T03:45")).unwrap();
        assert_eq!(t, TickIndex(96 + 15));
        assert_eq!(g.timestamp(t), ts("2014-01-02T03:45"));
        assert!(g.tick_at(ts("2014-01-02T03:40")).is_err());
        assert_eq!(g.ceil_tick(ts("2014-01-01T00:01")), TickIndex(1));
        assert_eq!(g.ceil_tick(ts("2014-01-01T00:15")), TickIndex(1));
        assert_eq!(g.floor_tick(ts("2014-01-01T00:29")), TickIndex(1));
        assert_eq!(g.ceil_tick(ts("2013-12-31T23:50")), TickIndex(0));
        assert_eq!(g.floor_tick(ts("2013-12-31T23:50")), TickIndex(-1));
    }

    #[test]
    fn census_boundaries() {
        let cap = StayCap::default();
        assert_eq!(census_at(&[], ts("2014-01-01T10:00"), cap), 0);
        let r = [rec("a", "2014-01-01T10:00", Some("2014-01-01T11:00"), Some(3))];
        assert_eq!(census_at(&r, ts("2014-01-01T09:45"), cap), 0);
        assert_eq!(census_at(&r, ts("2014-01-01T10:00"), cap), 1);
        assert_eq!(census_at(&r, ts("2014-01-01T10:45"), cap), 1);
        assert_eq!(census_at(&r, ts("2014-01-01T11:00"), cap), 0);
    }

    #[test]
    fn missing_departure_is_capped() {
        let cap = StayCap::default();
        let r = [rec("a", "2014-01-01T10:00", None, None)];
        assert_eq!(census_at(&r, ts("2014-01-02T09:45"), cap), 1);
        assert_eq!(census_at(&r, ts("2014-01-02T10:00"), cap), 0);
    }

    #[test]
    fn arrival_window_is_half_open() {
        let r = [
            rec("a", "2014-01-01T10:00", None, Some(3)),
            rec("b", "2014-01-01T10:15", None, Some(3)),
            rec("c", "2014-01-01T10:10", None, Some(1)),
            rec("d", "2014-01-01T10:10", None, None),
        ];
        let (t1, t2) = (ts("2014-01-01T10:00"), ts("2014-01-01T10:15"));
        assert_eq!(arrivals_in(&r, AcuityGroup::Urgent, t1, t2).unwrap(), 1);
        assert_eq!(arrivals_in(&r, AcuityGroup::Emergent, t1, t2).unwrap(), 1);
        assert_eq!(arrivals_in(&r, AcuityGroup::NonUrgent, t1, t2).unwrap(), 0);
        assert!(arrivals_in(&r, AcuityGroup::Urgent, t2, t1).is_err());
        assert!(arrivals_in(&r, AcuityGroup::Urgent, t1, t1).is_err());
    }

    #[test]
    fn single_encounter_step_function() {
        let g = grid();
        let r = [rec("a", "2014-01-01T00:20", Some("2014-01-01T01:05"), Some(2))];
        let f = build_frame(&r, g, TickIndex(0), TickIndex(8), StayCap::default()).unwrap();
        assert_eq!(f.census(), &[0, 0, 1, 1, 1, 0, 0, 0]);
        assert_eq!(f.arrivals(AcuityGroup::Emergent), &[0, 0, 1, 0, 0, 0, 0, 0]);
        assert_eq!(f.arrivals(AcuityGroup::Urgent).iter().sum::<u32>(), 0);
    }

    #[test]
    fn empty_span_is_an_error() {
        let g = grid();
        assert!(build_frame(&[], g, TickIndex(3), TickIndex(3), StayCap::default()).is_err());
    }

    #[test]
    fn adjacent_frames_concatenate() {
        let g = grid();
        let r = [
            rec("a", "2014-01-01T00:20", Some("2014-01-01T03:05"), Some(2)),
            rec("b", "2014-01-01T01:50", None, Some(4)),
            rec("c", "2014-01-01T02:00", Some("2014-01-01T02:01"), None),
        ];
        let cap = StayCap::default();
        let whole = build_frame(&r, g, TickIndex(0), TickIndex(20), cap).unwrap();
        let left = build_frame(&r, g, TickIndex(0), TickIndex(9), cap).unwrap();
        let right = build_frame(&r, g, TickIndex(9), TickIndex(20), cap).unwrap();
        assert_eq!(left.concat(&right).unwrap(), whole);
        assert_eq!(whole.slice(TickIndex(9), TickIndex(20)).unwrap(), right);
    }

    #[test]
    fn csv_export_header_and_rows() {
        let g = grid();
        let r = [rec("a", "2014-01-01T00:20", Some("2014-01-01T00:40"), Some(5))];
        let f = build_frame(&r, g, TickIndex(1), TickIndex(3), StayCap::default()).unwrap();
        let mut out = Vec::new();
        f.write_csv(&mut out).unwrap();
        assert_eq!(
            String::from_utf8(out).unwrap(),
            "timestamp,census,arrivals_emergent,arrivals_urgent,arrivals_nonurgent\n\
             2014-01-01T00:15,0,0,0,0\n\
             2014-01-01T00:30,1,0,0,1\n"
        );
    }
}
