//! The live loop: score the 12 deployed models every tick, reconcile
//! actuals once horizons elapse, monitor model health and keep the
//! shift-action log.

mod actions;
mod monitor;
mod records;
mod scheduler;
mod source;

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use chrono::{Duration, NaiveDate, NaiveDateTime};
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::event_store::StayCap;
use crate::features::WARMUP_TICKS;
use crate::forecaster::{
    display_value, score, target_value, EvaluationRow, Family, Horizon, MetricsReport, ModelGrid,
    ModelParams, Span, TargetSpec, TrainConfig, TrainedModel, BASELINE_OFFSETS_WEEKS,
};
use crate::timefmt;
use crate::timeseries::{Grid, SeriesFrame, SeriesKind, TickIndex, TICKS_PER_WEEK};

pub use actions::{ActionAck, ActionLog, ActionType, ShiftAction, ShiftActionInput};
pub use monitor::{
    build_references, decile_edges, monitored_values, proportions, psi, Alarm, AlarmReason,
    FeaturePsi, FeatureReference, HealthReport, ModelHealth, Thresholds, MONITORED_COLUMNS,
    PSI_BINS, PSI_FLOOR,
};
pub use records::{PredictionLog, PredictionRecord, PredictionStatus, ReconcileState};
pub use scheduler::{replay, step, Clock, RealClock, ReplayClock, ReplaySummary, Scheduler};
pub use source::{SeriesSource, StoreSource};

/// Patients per nurse.
pub const NURSE_RATIO: f64 = 4.0;

/// Longest span the actuals endpoint returns in one call.
pub const MAX_ACTUALS_DAYS: i64 = 366;

/// Nurses needed for a census forecast at a 4:1 ratio.
pub fn staffing_recommendation(census_forecast: f64) -> Result<u32> {
    if !census_forecast.is_finite() || census_forecast < 0.0 {
        return Err(domain(format!(
            "census forecast must be a finite value >= 0, got {census_forecast}"
        )));
    }
    Ok((census_forecast / NURSE_RATIO).ceil() as u32)
}

/// Everything `train` produces for the service: the evaluated grid, the
/// calendar it was trained on and the feature references for drift checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelBundle {
    pub grid_epoch: NaiveDate,
    pub stay_cap: StayCap,
    pub models: ModelGrid,
    pub references: Vec<FeatureReference>,
}

impl ModelBundle {
    /// Train the grid on `frame` and take drift references from the rows
    /// before `split`.
    pub fn train(frame: &SeriesFrame, split: NaiveDateTime, cfg: &TrainConfig, cap: StayCap) -> Result<Self> {
        let models = crate::forecaster::train_all(frame, split, cfg)?;
        Self::from_grid(frame, models, cap)
    }

    pub fn from_grid(frame: &SeriesFrame, models: ModelGrid, cap: StayCap) -> Result<Self> {
        let split = frame.grid().tick_at(models.split)?;
        let references = build_references(frame, frame.start() + WARMUP_TICKS, split)?;
        Ok(Self {
            grid_epoch: frame.grid().epoch().date(),
            stay_cap: cap,
            models,
            references,
        })
    }

    pub fn grid(&self) -> Grid {
        Grid::new(self.grid_epoch)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let w = BufWriter::new(File::create(path)?);
        serde_json::to_writer(w, self)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let p = path.as_ref();
        let r = BufReader::new(File::open(p).map_err(|e| {
            Error::Config(format!("cannot open model bundle {}: {e}", p.display()))
        })?);
        Ok(serde_json::from_reader(r)?)
    }
}

/// One model per target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Deployment {
    models: Vec<TrainedModel>,
}

impl Deployment {
    /// Best test MAE per target unless `overrides` names a family.
    pub fn from_grid(grid: &ModelGrid, overrides: &[(TargetSpec, Family)]) -> Result<Self> {
        let mut chosen: BTreeMap<TargetSpec, TrainedModel> = grid
            .best_per_target()
            .into_iter()
            .map(|m| (m.target, m.clone()))
            .collect();
        for &(target, family) in overrides {
            let m = grid.get(target, family).ok_or_else(|| {
                Error::Config(format!("no trained {family} model for {target}"))
            })?;
            chosen.insert(target, m.clone());
        }
        Self::from_models(chosen.into_values().collect())
    }

    pub fn from_models(models: Vec<TrainedModel>) -> Result<Self> {
        let mut by_target: BTreeMap<TargetSpec, TrainedModel> = BTreeMap::new();
        for m in models {
            if by_target.insert(m.target, m).is_some() {
                return Err(Error::Config("deployment lists a target twice".into()));
            }
        }
        let ordered: Vec<TrainedModel> = TargetSpec::all()
            .into_iter()
            .map(|t| {
                by_target
                    .remove(&t)
                    .ok_or_else(|| Error::Config(format!("deployment has no model for {t}")))
            })
            .collect::<Result<_>>()?;
        Ok(Self { models: ordered })
    }

    pub fn models(&self) -> &[TrainedModel] {
        &self.models
    }

    pub fn get(&self, target: TargetSpec) -> &TrainedModel {
        self.models
            .iter()
            .find(|m| m.target == target)
            .expect("deployment covers every target")
    }

    /// Swap the model serving `model.target`.
    pub fn replace(&mut self, model: TrainedModel) {
        if let Some(slot) = self.models.iter_mut().find(|m| m.target == model.target) {
            *slot = model;
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReconcileSummary {
    pub reconciled: usize,
    pub unreconcilable: usize,
    /// Failed attempts left pending for a later retry.
    pub retried: usize,
}

impl ReconcileSummary {
    /// Records whose actual was filled or that were given up on.
    pub fn updated(&self) -> usize {
        self.reconciled + self.unreconcilable
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StaffingEntry {
    pub horizon: Horizon,
    #[serde(with = "timefmt::minute_opt")]
    pub made_at: Option<NaiveDateTime>,
    /// Census forecast as displayed (one decimal); `None` when unavailable.
    pub forecast: Option<f64>,
    pub nurses: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActualRow {
    #[serde(with = "timefmt::minute")]
    pub timestamp: NaiveDateTime,
    pub census: u32,
    pub arrivals_emergent: u32,
    pub arrivals_urgent: u32,
    pub arrivals_nonurgent: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeployedModel {
    pub target: TargetSpec,
    pub family: Family,
    pub trained_span: Span,
    pub metrics_on_test: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelsView {
    pub deployed: Vec<DeployedModel>,
    pub grid: Vec<EvaluationRow>,
}

pub struct Service {
    source: Box<dyn SeriesSource>,
    grid: Grid,
    deployment: Deployment,
    model_grid: Option<ModelGrid>,
    references: Vec<FeatureReference>,
    thresholds: Thresholds,
    predictions: PredictionLog,
    actions: ActionLog,
    now: Option<NaiveDateTime>,
}

impl Service {
    /// Service with in-memory logs.
    pub fn new(
        source: impl SeriesSource + 'static,
        deployment: Deployment,
        references: Vec<FeatureReference>,
        thresholds: Thresholds,
    ) -> Self {
        Self {
            grid: source.grid(),
            source: Box::new(source),
            deployment,
            model_grid: None,
            references,
            thresholds,
            predictions: PredictionLog::in_memory(),
            actions: ActionLog::in_memory(),
            now: None,
        }
    }

    pub fn from_bundle(
        bundle: ModelBundle,
        source: impl SeriesSource + 'static,
        overrides: &[(TargetSpec, Family)],
        thresholds: Thresholds,
    ) -> Result<Self> {
        if source.grid() != bundle.grid() {
            return Err(Error::Config(
                "series source and model bundle use different tick calendars".into(),
            ));
        }
        let deployment = Deployment::from_grid(&bundle.models, overrides)?;
        Ok(Self::new(source, deployment, bundle.references, thresholds).with_model_grid(bundle.models))
    }

    pub fn with_model_grid(mut self, grid: ModelGrid) -> Self {
        self.model_grid = Some(grid);
        self
    }

    /// Replace the in-memory logs with persistent ones.
    pub fn with_logs(mut self, predictions: PredictionLog, actions: ActionLog) -> Self {
        self.now = predictions.last_tick();
        self.predictions = predictions;
        self.actions = actions;
        self
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    /// Latest time the service has ticked or reconciled at.
    pub fn now(&self) -> Option<NaiveDateTime> {
        self.now
    }

    pub fn deployment(&self) -> &Deployment {
        &self.deployment
    }

    pub fn deployment_mut(&mut self) -> &mut Deployment {
        &mut self.deployment
    }

    pub fn predictions(&self) -> &PredictionLog {
        &self.predictions
    }

    pub fn thresholds(&self) -> Thresholds {
        self.thresholds
    }

    fn advance(&mut self, now: NaiveDateTime) {
        self.now = Some(self.now.map_or(now, |n| n.max(now)));
    }

    /// Score every deployed model at `now` and persist the 12 records.
    pub fn tick(&mut self, now: NaiveDateTime) -> Result<Vec<PredictionRecord>> {
        let t = self.grid.tick_at(now)?;
        if self
            .predictions
            .contains(&PredictionRecord::record_id(now, TargetSpec::all()[0]))
        {
            return Err(domain(format!("tick at {now} is already recorded")));
        }
        let lag_frame = self.source.frame(t - WARMUP_TICKS, t, now);
        let mut out = Vec::with_capacity(self.deployment.models().len());
        for model in self.deployment.models() {
            let outcome = match (&model.params, &lag_frame) {
                (ModelParams::Baseline, _) => self.baseline_forecast(model.target, t, now),
                (_, Ok(frame)) => score(model, frame, t),
                (_, Err(e)) => Err(echo(e)),
            };
            let (status, predicted, error) = match outcome {
                Ok(v) if v.is_finite() && v >= 0.0 => (PredictionStatus::Ok, Some(v), None),
                Ok(v) => (PredictionStatus::Error, None, Some(format!("invalid forecast {v}"))),
                Err(Error::InsufficientHistory(msg)) => (PredictionStatus::SkippedWarmup, None, Some(msg)),
                Err(e) => (PredictionStatus::Error, None, Some(e.to_string())),
            };
            out.push(PredictionRecord {
                id: PredictionRecord::record_id(now, model.target),
                tick: t,
                made_at: now,
                target: model.target,
                family: model.family,
                status,
                predicted,
                error,
                actual: None,
                abs_err: None,
                reconcile: ReconcileState::Pending,
                attempts: 0,
            });
        }
        self.predictions.append(&out)?;
        self.advance(now);
        Ok(out)
    }

    fn baseline_forecast(&self, target: TargetSpec, t: TickIndex, now: NaiveDateTime) -> Result<f64> {
        let h = target.horizon.ticks();
        let mut total = 0.0;
        for weeks in BASELINE_OFFSETS_WEEKS {
            let back = t - weeks * TICKS_PER_WEEK;
            let frame = self.source.frame(back, back + h + 1, now)?;
            total += target_value(&frame, target, back).expect("frame spans the horizon");
        }
        Ok(total / BASELINE_OFFSETS_WEEKS.len() as f64)
    }

    /// Fill actuals for every pending record whose horizon has elapsed.
    pub fn reconcile(&mut self, now: NaiveDateTime) -> Result<ReconcileSummary> {
        let mut summary = ReconcileSummary::default();
        for i in self.predictions.due(now) {
            let r = self.predictions.get(i);
            let (tick, target, predicted, attempts) = (r.tick, r.target, r.predicted, r.attempts + 1);
            let h = target.horizon.ticks();
            let actual = self
                .source
                .frame(tick, tick + h + 1, now)
                .map(|f| target_value(&f, target, tick).expect("frame spans the horizon"));
            match actual {
                Ok(a) => {
                    let abs_err = predicted.map(|p| (p - a).abs());
                    self.predictions
                        .update(i, Some(a), abs_err, attempts, ReconcileState::Reconciled)?;
                    summary.reconciled += 1;
                }
                Err(e) => {
                    let state = if attempts >= self.thresholds.max_reconcile_attempts {
                        summary.unreconcilable += 1;
                        ReconcileState::Unreconcilable
                    } else {
                        summary.retried += 1;
                        ReconcileState::Pending
                    };
                    log::warn!("reconcile attempt {attempts} failed: {e}");
                    self.predictions.update(i, None, None, attempts, state)?;
                }
            }
        }
        self.predictions.flush()?;
        self.advance(now);
        Ok(summary)
    }

    /// Health over the `window_days` before the service clock.
    pub fn health(&self, window_days: i64) -> Result<HealthReport> {
        let now = self
            .now
            .ok_or_else(|| domain("the service has not ticked yet"))?;
        self.health_at(now, window_days)
    }

    pub fn health_at(&self, now: NaiveDateTime, window_days: i64) -> Result<HealthReport> {
        if window_days <= 0 {
            return Err(domain("window_days must be positive"));
        }
        let start = now - Duration::days(window_days);
        let mut groups: BTreeMap<(TargetSpec, Family), (Vec<f64>, Vec<f64>)> = BTreeMap::new();
        for r in self.predictions.records() {
            if r.made_at < start || r.made_at >= now || r.reconcile != ReconcileState::Reconciled {
                continue;
            }
            if let (Some(p), Some(a)) = (r.predicted, r.actual) {
                let g = groups.entry((r.target, r.family)).or_default();
                g.0.push(p);
                g.1.push(a);
            }
        }
        if groups.is_empty() {
            return Err(domain(format!(
                "no reconciled predictions between {start} and {now}"
            )));
        }
        let mut alarms = Vec::new();
        let mut models = Vec::with_capacity(groups.len());
        for ((target, family), (preds, actuals)) in groups {
            let rolling = crate::forecaster::metrics(&preds, &actuals)?;
            let frozen = self.frozen_test_mae(target, family);
            if let Some(f) = frozen {
                let threshold = self.thresholds.mae_ratio * f;
                if rolling.mae > threshold {
                    alarms.push(Alarm {
                        subject: format!("{target} {family}"),
                        reason: AlarmReason::MaeDegradation,
                        value: rolling.mae,
                        threshold,
                    });
                }
            }
            models.push(ModelHealth {
                target,
                family,
                rolling,
                frozen_test_mae: frozen,
            });
        }
        let feature_psi = self.feature_psi(start, now)?;
        for f in &feature_psi {
            if f.psi > self.thresholds.psi {
                alarms.push(Alarm {
                    subject: f.subject(),
                    reason: AlarmReason::PopulationShift,
                    value: f.psi,
                    threshold: self.thresholds.psi,
                });
            }
        }
        Ok(HealthReport {
            window: Span { start, end: now },
            models,
            feature_psi,
            alarms,
        })
    }

    fn frozen_test_mae(&self, target: TargetSpec, family: Family) -> Option<f64> {
        let deployed = self.deployment.get(target);
        if deployed.family == family {
            return Some(deployed.metrics_on_test.mae);
        }
        self.model_grid
            .as_ref()
            .and_then(|g| g.get(target, family))
            .map(|m| m.metrics_on_test.mae)
    }

    /// PSI of each monitored feature over ticks in `[start, now)`.
    pub fn feature_psi(&self, start: NaiveDateTime, now: NaiveDateTime) -> Result<Vec<FeaturePsi>> {
        if self.references.is_empty() {
            return Ok(Vec::new());
        }
        let from = self.grid.ceil_tick(start);
        let to = self.grid.ceil_tick(now);
        if to <= from {
            return Ok(Vec::new());
        }
        let frame = match self.source.frame(from - WARMUP_TICKS, to, now) {
            Ok(f) => f,
            Err(e @ (Error::InsufficientHistory(_) | Error::DataGap(_))) => {
                log::warn!("feature PSI unavailable: {e}");
                return Ok(Vec::new());
            }
            Err(e) => return Err(e),
        };
        let mut cache: BTreeMap<SeriesKind, Vec<Vec<f64>>> = BTreeMap::new();
        let mut out = Vec::with_capacity(self.references.len());
        for r in &self.references {
            let Some(col) = MONITORED_COLUMNS
                .iter()
                .position(|&c| crate::features::FEATURE_NAMES[c] == r.feature)
            else {
                continue;
            };
            let values = match cache.entry(r.series) {
                std::collections::btree_map::Entry::Occupied(e) => e.into_mut(),
                std::collections::btree_map::Entry::Vacant(e) => {
                    e.insert(monitored_values(&frame, r.series, from, to)?)
                }
            };
            let values = &values[col];
            if values.is_empty() {
                continue;
            }
            out.push(FeaturePsi {
                series: r.series,
                feature: r.feature.clone(),
                psi: r.psi(values)?,
                n: values.len(),
            });
        }
        Ok(out)
    }

    pub fn record_shift_action(&mut self, input: ShiftActionInput) -> Result<ActionAck> {
        self.actions.record(input)
    }

    pub fn shift_actions(&self, from: NaiveDateTime, to: NaiveDateTime) -> Vec<ShiftAction> {
        self.actions.query(from, to)
    }

    pub fn forecasts(
        &self,
        from: NaiveDateTime,
        to: NaiveDateTime,
        target: Option<TargetSpec>,
    ) -> Vec<PredictionRecord> {
        self.predictions.query(from, to, target)
    }

    /// Observed series on ticks in `[from, to)`, limited to what the service
    /// clock has seen.
    pub fn actuals(&self, from: NaiveDateTime, to: NaiveDateTime) -> Result<Vec<ActualRow>> {
        if from >= to {
            return Err(domain(format!("empty range [{from}, {to})")));
        }
        if to - from > Duration::days(MAX_ACTUALS_DAYS) {
            return Err(domain(format!("range exceeds {MAX_ACTUALS_DAYS} days")));
        }
        let Some(now) = self.now else {
            return Ok(Vec::new());
        };
        let start = self.grid.ceil_tick(from);
        let end = self.grid.ceil_tick(to.min(now + Duration::minutes(1)));
        if end <= start {
            return Ok(Vec::new());
        }
        let frame = self.source.frame(start, end, now)?;
        Ok(frame
            .ticks()
            .map(|t| {
                let v = |k| frame.value(k, t).expect("tick in frame");
                ActualRow {
                    timestamp: frame.timestamp(t),
                    census: v(SeriesKind::Census),
                    arrivals_emergent: v(SeriesKind::Arrivals(crate::event_store::AcuityGroup::Emergent)),
                    arrivals_urgent: v(SeriesKind::Arrivals(crate::event_store::AcuityGroup::Urgent)),
                    arrivals_nonurgent: v(SeriesKind::Arrivals(crate::event_store::AcuityGroup::NonUrgent)),
                }
            })
            .collect())
    }

    /// Nurses needed per horizon from the latest census forecasts made at or
    /// before `at`.
    pub fn staffing(&self, at: NaiveDateTime) -> Result<Vec<StaffingEntry>> {
        Horizon::ALL
            .into_iter()
            .map(|h| {
                let target = TargetSpec::census(h);
                let latest = self.predictions.records().iter().rev().find(|r| {
                    r.target == target && r.made_at <= at && r.status == PredictionStatus::Ok
                });
                let Some(r) = latest else {
                    return Ok(StaffingEntry {
                        horizon: h,
                        made_at: None,
                        forecast: None,
                        nurses: None,
                    });
                };
                let shown = display_value(target, r.predicted.expect("ok records carry a value"));
                Ok(StaffingEntry {
                    horizon: h,
                    made_at: Some(r.made_at),
                    forecast: Some(shown),
                    nurses: Some(staffing_recommendation(shown)?),
                })
            })
            .collect()
    }

    pub fn models_view(&self) -> ModelsView {
        ModelsView {
            deployed: self
                .deployment
                .models()
                .iter()
                .map(|m| DeployedModel {
                    target: m.target,
                    family: m.family,
                    trained_span: m.trained_span,
                    metrics_on_test: m.metrics_on_test,
                })
                .collect(),
            grid: self.model_grid.as_ref().map(ModelGrid::report).unwrap_or_default(),
        }
    }
}

/// Re-raise a shared frame error for one record.
fn echo(e: &Error) -> Error {
    match e {
        Error::InsufficientHistory(m) => Error::InsufficientHistory(m.clone()),
        Error::DataGap(m) => Error::DataGap(m.clone()),
        other => Error::Model(other.to_string()),
    }
}
