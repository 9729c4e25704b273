use std::sync::{Arc, RwLock};

use chrono::{Duration, NaiveDate, NaiveDateTime};
use edf_core::event_store::{EventStore, StayCap};
use edf_core::features::{FEATURE_DIM, FEATURE_ORDER_VERSION};
use edf_core::forecaster::{Family, Horizon, MetricsReport, ModelParams, Span, TargetSpec, TrainedModel};
use edf_core::glm::{GlmModel, GlmSpec};
use edf_core::service::*;
use edf_core::simulator::{default_profile, generate_all};
use edf_core::timefmt::parse;
use edf_core::timeseries::{build_frame, census_at, Grid, SeriesKind};

fn ts(s: &str) -> NaiveDateTime {
    parse(s).unwrap()
}

fn grid() -> Grid {
    Grid::new(NaiveDate::from_ymd_opt(2017, 1, 1).unwrap())
}

const T0: &str = "2017-01-15T08:00";

fn store() -> Arc<EventStore> {
    let recs = generate_all(&default_profile(), ts("2017-01-01T00:00"), ts("2017-01-29T00:00")).unwrap();
    Arc::new(EventStore::from_records(recs).unwrap())
}

fn source() -> StoreSource {
    StoreSource::new(store(), grid(), StayCap::default())
}

fn constant_model(target: TargetSpec, value: f64, test_mae: f64) -> TrainedModel {
    TrainedModel {
        target,
        family: Family::Glm,
        params: ModelParams::Glm(GlmModel {
            spec: GlmSpec::unpenalized(),
            intercept: value.ln(),
            coefficients: vec![0.0; FEATURE_DIM],
            feature_order_version: FEATURE_ORDER_VERSION,
            train_deviance: 0.0,
            n_iter: 0,
            converged: true,
            warning: None,
        }),
        trained_span: Span { start: ts("2016-01-01T00:00"), end: ts("2017-01-01T00:00") },
        metrics_on_test: MetricsReport { rmse: test_mae, mae: test_mae, pct_abs_err_le4: 0.0, pct_accuracy_ge70: 0.0, n: 1 },
    }
}

fn deployment(census: f64, test_mae: f64) -> Deployment {
    let models = TargetSpec::all()
        .into_iter()
        .map(|t| match t.kind {
            SeriesKind::Census => constant_model(t, census, test_mae),
            SeriesKind::Arrivals(_) => constant_model(t, 1.0 + t.horizon.hours() as f64, test_mae),
        })
        .collect();
    Deployment::from_models(models).unwrap()
}

fn service_with(src: StoreSource, dep: Deployment) -> Service {
    Service::new(src, dep, Vec::new(), Thresholds::default())
}

#[test]
fn every_tick_writes_twelve_records() {
    let mut svc = service_with(source(), deployment(23.0, 4.0));
    let now = ts(T0);
    let recs = svc.tick(now).unwrap();
    assert_eq!(recs.len(), 12);
    let targets: Vec<TargetSpec> = recs.iter().map(|r| r.target).collect();
    assert_eq!(targets, TargetSpec::all());
    for r in &recs {
        assert_eq!(r.status, PredictionStatus::Ok);
        assert_eq!(r.made_at, now);
        assert_eq!(r.reconcile, ReconcileState::Pending);
        assert_eq!(r.id, format!("2017-01-15T08:00/{}", r.target));
        assert!(r.predicted.unwrap() > 0.0);
    }
    assert_eq!(svc.now(), Some(now));
    assert!(svc.tick(now).is_err(), "a tick is recorded once");
    assert_eq!(svc.predictions().len(), 12);
}

#[test]
fn cold_start_records_skipped_warmup() {
    let now = ts(T0);
    let src = source().with_coverage_start(now);
    let mut svc = service_with(src, deployment(23.0, 4.0));
    let recs = svc.tick(now).unwrap();
    assert_eq!(recs.len(), 12);
    assert!(recs.iter().all(|r| r.status == PredictionStatus::SkippedWarmup && r.predicted.is_none()));
    // After four ticks of coverage the lags exist.
    let later = now + Duration::hours(1);
    assert!(svc.tick(later).unwrap().iter().all(|r| r.status == PredictionStatus::Ok));
}

#[test]
fn baseline_without_history_is_skipped() {
    let mut dep = deployment(23.0, 4.0);
    let mut base = constant_model(TargetSpec::census(Horizon::H8), 1.0, 4.0);
    base.family = Family::Baseline;
    base.params = ModelParams::Baseline;
    dep.replace(base);
    let mut svc = service_with(source().with_coverage_start(ts("2017-01-01T00:00")), dep);
    let recs = svc.tick(ts(T0)).unwrap();
    let r = recs.iter().find(|r| r.target == TargetSpec::census(Horizon::H8)).unwrap();
    assert_eq!((r.family, r.status), (Family::Baseline, PredictionStatus::SkippedWarmup));
}

#[test]
fn reconcile_fills_actuals_once_due() {
    let src = source();
    let store = Arc::clone(src.store());
    let mut svc = service_with(src, deployment(23.0, 4.0));
    let now = ts(T0);
    svc.tick(now).unwrap();
    assert_eq!(svc.reconcile(now).unwrap().updated(), 0);
    let s2 = svc.reconcile(now + Duration::hours(2)).unwrap();
    assert_eq!((s2.reconciled, s2.unreconcilable), (4, 0));
    let s4 = svc.reconcile(now + Duration::hours(4)).unwrap();
    assert_eq!(s4.reconciled, 4);
    let s8 = svc.reconcile(now + Duration::hours(8)).unwrap();
    assert_eq!(s8.reconciled, 4);
    assert_eq!(svc.reconcile(now + Duration::hours(9)).unwrap().updated(), 0, "idempotent");

    let snap = store.snapshot();
    let recs = snap.records();
    for r in svc.predictions().records() {
        assert_eq!(r.reconcile, ReconcileState::Reconciled);
        let due = now + Duration::hours(r.target.horizon.hours());
        let want = match r.target.kind {
            SeriesKind::Census => f64::from(census_at(recs, due, StayCap::default())),
            SeriesKind::Arrivals(g) => recs
                .iter()
                .filter(|e| e.acuity() == Some(g) && e.arrival_time > now && e.arrival_time <= due)
                .count() as f64,
        };
        assert_eq!(r.actual, Some(want), "{}", r.target);
        assert_eq!(r.abs_err, Some((r.predicted.unwrap() - want).abs()));
        assert_eq!(r.attempts, 1);
    }
}

#[test]
fn outage_makes_records_unreconcilable_after_three_attempts() {
    let now = ts(T0);
    let mut src = source();
    src.add_gap(now + Duration::minutes(30), now + Duration::minutes(45));
    let mut svc = service_with(src, deployment(23.0, 4.0));
    svc.tick(now).unwrap();
    let due = now + Duration::hours(2);
    let first = svc.reconcile(due).unwrap();
    assert_eq!((first.reconciled, first.retried, first.unreconcilable), (0, 4, 0));
    svc.reconcile(due + Duration::minutes(15)).unwrap();
    let third = svc.reconcile(due + Duration::minutes(30)).unwrap();
    assert_eq!(third.unreconcilable, 4);
    let stuck: Vec<_> = svc
        .predictions()
        .records()
        .iter()
        .filter(|r| r.reconcile == ReconcileState::Unreconcilable)
        .collect();
    assert_eq!(stuck.len(), 4);
    assert!(stuck.iter().all(|r| r.attempts == 3 && r.actual.is_none()));
    assert_eq!(svc.reconcile(due + Duration::hours(1)).unwrap().unreconcilable, 0);
}

#[test]
fn degraded_model_raises_mae_alarm() {
    // exp(-30) forecasts against a census near 23.
    let mut svc = service_with(source(), deployment((-30f64).exp(), 1.0));
    replay(&mut svc, ts("2017-01-20T00:00"), ts("2017-01-21T08:00")).unwrap();
    let report = svc.health(1).unwrap();
    let alarmed: Vec<&Alarm> = report.alarms.iter().filter(|a| a.reason == AlarmReason::MaeDegradation).collect();
    assert!(alarmed.iter().any(|a| a.subject == "census/2h GLM"));
    let census = report.models.iter().find(|m| m.target == TargetSpec::census(Horizon::H2)).unwrap();
    assert!(census.rolling.mae > 1.25 * census.frozen_test_mae.unwrap());

    let mut healthy = service_with(source(), deployment(23.0, 100.0));
    replay(&mut healthy, ts("2017-01-20T00:00"), ts("2017-01-21T08:00")).unwrap();
    assert!(healthy.health(1).unwrap().alarms.is_empty());
}

#[test]
fn health_needs_reconciled_predictions() {
    let mut svc = service_with(source(), deployment(23.0, 4.0));
    assert!(svc.health(7).is_err());
    svc.tick(ts(T0)).unwrap();
    assert!(svc.health(7).is_err());
    assert!(svc.health_at(ts(T0), 0).is_err());
}

#[test]
fn psi_references_follow_the_live_window() {
    let src = source();
    let frame = build_frame(
        src.store().snapshot().records(),
        grid(),
        grid().tick_at(ts("2017-01-01T00:00")).unwrap(),
        grid().tick_at(ts("2017-01-15T00:00")).unwrap(),
        StayCap::default(),
    )
    .unwrap();
    let refs = build_references(&frame, frame.start() + 4, frame.end()).unwrap();
    assert_eq!(refs.len(), 20);
    let mut svc = Service::new(src, deployment(23.0, 100.0), refs, Thresholds::default());
    replay(&mut svc, ts("2017-01-20T00:00"), ts("2017-01-21T08:00")).unwrap();
    let report = svc.health(1).unwrap();
    assert_eq!(report.feature_psi.len(), 20);
    assert!(report.feature_psi.iter().all(|f| f.psi.is_finite() && f.psi >= 0.0));
}

#[test]
fn shift_action_log() {
    let mut svc = service_with(source(), deployment(23.0, 4.0));
    let input = |kind: &str, at: &str, client: Option<&str>| ShiftActionInput {
        shift_id: "night-0115".into(),
        timestamp: at.into(),
        action_type: kind.into(),
        free_text: None,
        client_id: client.map(String::from),
    };
    let ack = svc.record_shift_action(input("called-in-staff", "2017-01-15T19:30", Some("c1"))).unwrap();
    assert!(ack.created);
    assert_eq!(ack.action.action_type, ActionType::CalledInStaff);
    assert_eq!(ack.action.free_text, "");
    let again = svc.record_shift_action(input("called-in-staff", "2017-01-15T19:30", Some("c1"))).unwrap();
    assert!(!again.created);
    assert_eq!(again.action, ack.action);
    svc.record_shift_action(input("no-action", "2017-01-15T23:00", None)).unwrap();
    assert!(matches!(
        svc.record_shift_action(input("fired-everyone", "2017-01-15T23:00", None)),
        Err(edf_core::Error::Validation(_))
    ));
    assert!(svc.record_shift_action(input("no-action", "15/01/2017", None)).is_err());
    assert!(svc.record_shift_action(ShiftActionInput { shift_id: " ".into(), ..input("no-action", "2017-01-15T23:00", None) }).is_err());

    let all = svc.shift_actions(ts("2017-01-15T00:00"), ts("2017-01-16T00:00"));
    assert_eq!(all.len(), 2);
    assert_eq!(all.iter().map(|a| a.seq).collect::<Vec<_>>(), [1, 2]);
    assert!(svc.shift_actions(ts("2017-02-01T00:00"), ts("2017-02-02T00:00")).is_empty());
}

#[test]
fn staffing_rule() {
    assert_eq!(staffing_recommendation(0.0).unwrap(), 0);
    assert_eq!(staffing_recommendation(16.0).unwrap(), 4);
    assert_eq!(staffing_recommendation(16.1).unwrap(), 5);
    assert_eq!(staffing_recommendation(3.9).unwrap(), 1);
    assert!(staffing_recommendation(-0.1).is_err());
    assert!(staffing_recommendation(f64::NAN).is_err());
}

#[test]
fn staffing_uses_the_displayed_forecast() {
    let mut svc = service_with(source(), deployment(16.04, 4.0));
    let at = ts(T0);
    let none = svc.staffing(at).unwrap();
    assert!(none.iter().all(|e| e.nurses.is_none() && e.forecast.is_none()));
    svc.tick(at).unwrap();
    let entries = svc.staffing(at + Duration::minutes(5)).unwrap();
    assert_eq!(entries.len(), 3);
    for e in entries {
        assert_eq!(e.made_at, Some(at));
        assert_eq!(e.forecast, Some(16.0));
        assert_eq!(e.nurses, Some(4));
    }
}

#[test]
fn actuals_are_clipped_to_the_service_clock() {
    let src = source();
    let store = Arc::clone(src.store());
    let mut svc = service_with(src, deployment(23.0, 4.0));
    let now = ts(T0);
    assert!(svc.actuals(now - Duration::hours(1), now).unwrap().is_empty());
    svc.tick(now).unwrap();
    let rows = svc.actuals(now - Duration::hours(1), now + Duration::hours(1)).unwrap();
    assert_eq!(rows.len(), 5);
    assert_eq!(rows.last().unwrap().timestamp, now);
    for r in &rows {
        assert_eq!(r.census, census_at(store.snapshot().records(), r.timestamp, StayCap::default()));
    }
    assert!(svc.actuals(now, now).is_err());
    assert!(svc.actuals(now - Duration::days(400), now).is_err());
}

#[test]
fn forecasts_query_filters_by_target_and_time() {
    let mut svc = service_with(source(), deployment(23.0, 4.0));
    replay(&mut svc, ts(T0), ts(T0) + Duration::hours(1)).unwrap();
    let all = svc.forecasts(ts(T0), ts(T0) + Duration::hours(1), None);
    assert_eq!(all.len(), 48);
    let one = svc.forecasts(ts(T0), ts(T0) + Duration::hours(1), Some(TargetSpec::census(Horizon::H4)));
    assert_eq!(one.len(), 4);
    assert!(svc.forecasts(ts(T0) + Duration::hours(1), ts(T0) + Duration::hours(2), None).is_empty());
}

#[test]
fn models_view_lists_the_deployment() {
    let svc = service_with(source(), deployment(23.0, 4.0));
    let view = svc.models_view();
    assert_eq!(view.deployed.len(), 12);
    assert!(view.grid.is_empty());
    assert!(Deployment::from_models(deployment(23.0, 4.0).models()[..11].to_vec()).is_err());
}

#[test]
fn scheduler_on_a_replay_clock_matches_replay() {
    let from = ts(T0);
    let to = from + Duration::hours(3);
    let mut direct = service_with(source(), deployment(23.0, 4.0));
    replay(&mut direct, from, to).unwrap();

    let shared = RwLock::new(service_with(source(), deployment(23.0, 4.0)));
    // 15 simulated minutes per 25 ms of wall time.
    let clock = ReplayClock::new(from - Duration::minutes(1), 36_000.0).unwrap();
    let ticks = Scheduler::new(clock).run(&shared, Some(to)).unwrap();
    assert_eq!(ticks, 12);
    let svc = shared.read().unwrap();
    assert_eq!(svc.predictions().records(), direct.predictions().records());
    assert!(ReplayClock::new(from, 0.0).is_err());
}

#[test]
fn logs_survive_a_restart() {
    let dir = tempfile::tempdir().unwrap();
    let preds = dir.path().join("predictions.jsonl");
    let actions = dir.path().join("shift_actions.jsonl");
    let open = || {
        service_with(source(), deployment(23.0, 4.0))
            .with_logs(PredictionLog::open(&preds).unwrap(), ActionLog::open(&actions).unwrap())
    };
    let before = {
        let mut svc = open();
        replay(&mut svc, ts(T0), ts(T0) + Duration::hours(3)).unwrap();
        svc.record_shift_action(ShiftActionInput {
            shift_id: "day".into(),
            timestamp: T0.into(),
            action_type: "sent-staff-home".into(),
            free_text: Some("quiet".into()),
            client_id: Some("k".into()),
        })
        .unwrap();
        svc.predictions().records().to_vec()
    };
    let mut svc = open();
    assert_eq!(svc.predictions().records(), &before[..]);
    assert_eq!(svc.now(), Some(ts(T0) + Duration::minutes(165)));
    assert_eq!(svc.shift_actions(ts(T0), ts(T0) + Duration::minutes(1)).len(), 1);
    // Pending records continue to reconcile after the restart.
    let s = svc.reconcile(ts(T0) + Duration::hours(12)).unwrap();
    assert!(s.reconciled > 0);
    assert!(svc.tick(ts(T0)).is_err());
}
