//! Population-stability monitoring and health report types.

use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};
use crate::features::{lag_values, weighted_slope, LagWeights, FEATURE_NAMES, LAG_OFFSET, SLOPE_INDEX};
use crate::forecaster::{Family, MetricsReport, Span, TargetSpec};
use crate::timeseries::{SeriesFrame, SeriesKind, TickIndex};

/// Floor applied to bin proportions so empty bins keep the index finite.
pub const PSI_FLOOR: f64 = 1e-4;
pub const PSI_BINS: usize = 10;

/// Monitored columns: the four lags and the slope.
pub const MONITORED_COLUMNS: [usize; 5] = [LAG_OFFSET, LAG_OFFSET + 1, LAG_OFFSET + 2, LAG_OFFSET + 3, SLOPE_INDEX];

/// Reference distribution of one feature of one series, binned at the
/// training deciles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureReference {
    pub series: SeriesKind,
    pub feature: String,
    /// Inner bin edges; bin `i` is `(edges[i-1], edges[i]]`.
    pub edges: Vec<f64>,
    pub expected: Vec<f64>,
}

impl FeatureReference {
    pub fn from_values(series: SeriesKind, feature: &str, values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(domain(format!("no reference values for {feature}")));
        }
        let edges = decile_edges(values);
        let expected = proportions(&edges, values);
        Ok(Self {
            series,
            feature: feature.to_string(),
            edges,
            expected,
        })
    }

    pub fn psi(&self, values: &[f64]) -> Result<f64> {
        if values.is_empty() {
            return Err(domain(format!("no current values for {}", self.feature)));
        }
        Ok(psi(&self.expected, &proportions(&self.edges, values)))
    }
}

/// Deduplicated interior decile cut points (nearest-rank).
pub fn decile_edges(values: &[f64]) -> Vec<f64> {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let mut edges: Vec<f64> = (1..PSI_BINS)
        .map(|k| sorted[((k * n).div_ceil(PSI_BINS)).saturating_sub(1).min(n - 1)])
        .collect();
    edges.dedup();
    // The top edge equal to the maximum would leave an always-empty bin.
    if edges.last() == sorted.last() {
        edges.pop();
    }
    edges
}

fn bin_of(edges: &[f64], v: f64) -> usize {
    edges.partition_point(|&e| e < v)
}

pub fn proportions(edges: &[f64], values: &[f64]) -> Vec<f64> {
    let mut counts = vec![0usize; edges.len() + 1];
    for &v in values {
        counts[bin_of(edges, v)] += 1;
    }
    let n = values.len() as f64;
    counts.into_iter().map(|c| c as f64 / n).collect()
}

/// `sum (a - e) ln(a / e)` with both proportions floored at [`PSI_FLOOR`].
pub fn psi(expected: &[f64], actual: &[f64]) -> f64 {
    expected
        .iter()
        .zip(actual)
        .map(|(&e, &a)| {
            let (e, a) = (e.max(PSI_FLOOR), a.max(PSI_FLOOR));
            (a - e) * (a / e).ln()
        })
        .sum()
}

/// Monitored feature values for every tick in `[from, to)` that has full lag
/// history in `frame`, one vector per monitored column.
pub fn monitored_values(
    frame: &SeriesFrame,
    kind: SeriesKind,
    from: TickIndex,
    to: TickIndex,
) -> Result<Vec<Vec<f64>>> {
    let weights = LagWeights::default();
    let mut cols = vec![Vec::new(); MONITORED_COLUMNS.len()];
    for t in (from.0..to.0).map(TickIndex) {
        let Ok(lags) = lag_values(frame, t, kind) else {
            continue;
        };
        for (j, &v) in lags.iter().enumerate() {
            cols[j].push(v);
        }
        cols[4].push(weighted_slope(lags, &weights)?);
    }
    Ok(cols)
}

/// References for all series and monitored columns over `[from, to)`.
pub fn build_references(frame: &SeriesFrame, from: TickIndex, to: TickIndex) -> Result<Vec<FeatureReference>> {
    let mut out = Vec::new();
    for kind in SeriesKind::ALL {
        let cols = monitored_values(frame, kind, from, to)?;
        for (j, values) in cols.iter().enumerate() {
            out.push(FeatureReference::from_values(
                kind,
                &FEATURE_NAMES[MONITORED_COLUMNS[j]],
                values,
            )?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AlarmReason {
    MaeDegradation,
    PopulationShift,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Alarm {
    /// `census/2h GBM` for model alarms, `census:lag_15m` for feature alarms.
    pub subject: String,
    pub reason: AlarmReason,
    pub value: f64,
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelHealth {
    pub target: TargetSpec,
    pub family: Family,
    pub rolling: MetricsReport,
    pub frozen_test_mae: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeaturePsi {
    pub series: SeriesKind,
    pub feature: String,
    pub psi: f64,
    pub n: usize,
}

impl FeaturePsi {
    pub fn subject(&self) -> String {
        format!("{}:{}", self.series.label(), self.feature)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HealthReport {
    pub window: Span,
    pub models: Vec<ModelHealth>,
    pub feature_psi: Vec<FeaturePsi>,
    pub alarms: Vec<Alarm>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Thresholds {
    pub psi: f64,
    /// Rolling MAE above `mae_ratio * frozen test MAE` raises an alarm.
    pub mae_ratio: f64,
    pub max_reconcile_attempts: u32,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            psi: 0.2,
            mae_ratio: 1.25,
            max_reconcile_attempts: 3,
        }
    }
}
