//! The 54-column regressor row.
//!
//! Serialization order: 4 lags (15/30/45/60 min), 12 month, 24 hour, 7
//! day-of-week (Monday first), 4 quarter, weekend flag, evening flag, slope.

use std::io::Write;
use std::sync::LazyLock;

use chrono::{Datelike, NaiveDateTime, Timelike};
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::timefmt;
use crate::timeseries::{SeriesFrame, SeriesKind, TickIndex};

pub const FEATURE_DIM: usize = 54;
/// Bumped whenever the column order or meaning changes.
pub const FEATURE_ORDER_VERSION: u32 = 1;
/// Ticks of history a feature row needs.
pub const WARMUP_TICKS: i64 = 4;

pub const LAG_OFFSET: usize = 0;
pub const MONTH_OFFSET: usize = 4;
pub const HOUR_OFFSET: usize = 16;
pub const DOW_OFFSET: usize = 40;
pub const QUARTER_OFFSET: usize = 47;
pub const WEEKEND_INDEX: usize = 51;
pub const EVENING_INDEX: usize = 52;
pub const SLOPE_INDEX: usize = 53;

const MONTHS: [&str; 12] = [
    "jan", "feb", "mar", "apr", "may", "jun", "jul", "aug", "sep", "oct", "nov", "dec",
];
const DAYS: [&str; 7] = ["mon", "tue", "wed", "thu", "fri", "sat", "sun"];

pub static FEATURE_NAMES: LazyLock<Vec<String>> = LazyLock::new(|| {
    let mut names: Vec<String> = ["lag_15m", "lag_30m", "lag_45m", "lag_60m"]
        .into_iter()
        .map(String::from)
        .collect();
    names.extend(MONTHS.iter().map(|m| format!("month_{m}")));
    names.extend((0..24).map(|h| format!("hour_{h:02}")));
    names.extend(DAYS.iter().map(|d| format!("dow_{d}")));
    names.extend((1..=4).map(|q| format!("quarter_q{q}")));
    names.extend(["weekend", "evening", "slope"].map(String::from));
    names
});

/// Weights applied to the 15/30/45/60-minute lags inside the slope fit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LagWeights {
    pub w15: f64,
    pub w30: f64,
    pub w45: f64,
    pub w60: f64,
}

impl Default for LagWeights {
    fn default() -> Self {
        Self {
            w15: 2.0,
            w30: 0.5,
            w45: 0.25,
            w60: 0.05,
        }
    }
}

impl LagWeights {
    pub fn as_array(&self) -> [f64; 4] {
        [self.w15, self.w30, self.w45, self.w60]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalendarBlock {
    pub month_onehot: [f64; 12],
    pub hour_onehot: [f64; 24],
    pub dow_onehot: [f64; 7],
    pub quarter_onehot: [f64; 4],
    pub weekend_flag: f64,
    pub evening_flag: f64,
}

pub fn calendar_features(at: NaiveDateTime) -> CalendarBlock {
    let month = at.month0() as usize;
    let hour = at.hour() as usize;
    let dow = at.weekday().num_days_from_monday() as usize;
    let mut block = CalendarBlock {
        month_onehot: [0.0; 12],
        hour_onehot: [0.0; 24],
        dow_onehot: [0.0; 7],
        quarter_onehot: [0.0; 4],
        weekend_flag: f64::from(u8::from(dow >= 5)),
        evening_flag: f64::from(u8::from(!(8..20).contains(&hour))),
    };
    block.month_onehot[month] = 1.0;
    block.hour_onehot[hour] = 1.0;
    block.dow_onehot[dow] = 1.0;
    block.quarter_onehot[month / 3] = 1.0;
    block
}

/// Slope of the weighted least-squares line through `(-k, lags[k-1])`,
/// `k = 1..=4`. Units are series value per 15-minute step; positive means
/// the series was rising toward the prediction time.
pub fn weighted_slope(lags: [f64; 4], weights: &LagWeights) -> Result<f64> {
    if lags.iter().any(|v| !v.is_finite()) {
        return Err(domain("non-finite lag value"));
    }
    let w = weights.as_array();
    let xs = [-1.0, -2.0, -3.0, -4.0];
    let sw: f64 = w.iter().sum();
    let x_bar = w.iter().zip(xs).map(|(w, x)| w * x).sum::<f64>() / sw;
    let y_bar = w.iter().zip(lags).map(|(w, y)| w * y).sum::<f64>() / sw;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for k in 0..4 {
        let dx = xs[k] - x_bar;
        sxy += w[k] * dx * (lags[k] - y_bar);
        sxx += w[k] * dx * dx;
    }
    Ok(sxy / sxx)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    /// Values at t-15, t-30, t-45, t-60 minutes.
    pub lag_values: [f64; 4],
    pub calendar: CalendarBlock,
    pub slope: f64,
}

impl FeatureVector {
    pub fn to_array(&self) -> [f64; FEATURE_DIM] {
        let mut out = [0.0; FEATURE_DIM];
        out[LAG_OFFSET..MONTH_OFFSET].copy_from_slice(&self.lag_values);
        out[MONTH_OFFSET..HOUR_OFFSET].copy_from_slice(&self.calendar.month_onehot);
        out[HOUR_OFFSET..DOW_OFFSET].copy_from_slice(&self.calendar.hour_onehot);
        out[DOW_OFFSET..QUARTER_OFFSET].copy_from_slice(&self.calendar.dow_onehot);
        out[QUARTER_OFFSET..WEEKEND_INDEX].copy_from_slice(&self.calendar.quarter_onehot);
        out[WEEKEND_INDEX] = self.calendar.weekend_flag;
        out[EVENING_INDEX] = self.calendar.evening_flag;
        out[SLOPE_INDEX] = self.slope;
        out
    }
}

/// Lag values of `kind` at `t-1 .. t-4`, or a warm-up error.
pub fn lag_values(frame: &SeriesFrame, t: TickIndex, kind: SeriesKind) -> Result<[f64; 4]> {
    let mut lags = [0.0; 4];
    for (k, slot) in lags.iter_mut().enumerate() {
        let at = t - (k as i64 + 1);
        *slot = frame.value(kind, at).ok_or_else(|| {
            Error::InsufficientHistory(format!(
                "feature warm-up: {kind} lag at {} not covered by frame",
                frame.timestamp(at)
            ))
        })? as f64;
    }
    Ok(lags)
}

/// Feature row for predicting `kind` at tick `t`. Reads only ticks `< t`.
pub fn feature_row(frame: &SeriesFrame, t: TickIndex, kind: SeriesKind) -> Result<FeatureVector> {
    feature_row_weighted(frame, t, kind, &LagWeights::default())
}

pub fn feature_row_weighted(
    frame: &SeriesFrame,
    t: TickIndex,
    kind: SeriesKind,
    weights: &LagWeights,
) -> Result<FeatureVector> {
    let lag_values = lag_values(frame, t, kind)?;
    Ok(FeatureVector {
        lag_values,
        calendar: calendar_features(frame.timestamp(t)),
        slope: weighted_slope(lag_values, weights)?,
    })
}

/// CSV with a leading `timestamp` column followed by the 54 named features.
pub fn write_feature_csv<W: Write>(
    out: W,
    rows: impl IntoIterator<Item = (NaiveDateTime, FeatureVector)>,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["timestamp".to_string()];
    header.extend(FEATURE_NAMES.iter().cloned());
    w.write_record(&header)?;
    for (at, fv) in rows {
        let mut rec = vec![timefmt::format(&at)];
        rec.extend(fv.to_array().iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
