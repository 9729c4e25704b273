use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, RwLock};
use std::time::Instant;

use chrono::{Duration, NaiveDateTime, Timelike};
use serde::{Deserialize, Serialize};

use super::{PredictionRecord, ReconcileSummary, Service};
use crate::error::{domain, Result};
use crate::timeseries::TICK_MINUTES;

/// Source of "now" for the scheduler.
pub trait Clock: Send + Sync {
    fn now(&self) -> NaiveDateTime;

    /// Wall-clock time to wait until the clock reads `t`.
    fn wait_for(&self, t: NaiveDateTime) -> std::time::Duration;
}

/// Local wall-clock time.
pub struct RealClock;

impl Clock for RealClock {
    fn now(&self) -> NaiveDateTime {
        chrono::Local::now().naive_local()
    }

    fn wait_for(&self, t: NaiveDateTime) -> std::time::Duration {
        (t - self.now()).to_std().unwrap_or_default()
    }
}

/// Simulated clock starting at `origin` and running `speed` times faster
/// than wall time.
pub struct ReplayClock {
    origin: NaiveDateTime,
    started: Instant,
    speed: f64,
}

impl ReplayClock {
    pub fn new(origin: NaiveDateTime, speed: f64) -> Result<Self> {
        if !(speed.is_finite() && speed > 0.0) {
            return Err(domain(format!("replay speed must be > 0, got {speed}")));
        }
        Ok(Self {
            origin,
            started: Instant::now(),
            speed,
        })
    }
}

impl Clock for ReplayClock {
    fn now(&self) -> NaiveDateTime {
        let sim = self.started.elapsed().as_secs_f64() * self.speed;
        self.origin + Duration::microseconds((sim * 1e6) as i64)
    }

    fn wait_for(&self, t: NaiveDateTime) -> std::time::Duration {
        let ahead = (t - self.now()).num_microseconds().unwrap_or(i64::MAX).max(0) as f64 / 1e6;
        std::time::Duration::from_secs_f64(ahead / self.speed)
    }
}

/// One scheduler interval: tick, then reconcile.
pub fn step(
    service: &mut Service,
    now: NaiveDateTime,
) -> Result<(Vec<PredictionRecord>, ReconcileSummary)> {
    let records = service.tick(now)?;
    let summary = service.reconcile(now)?;
    Ok((records, summary))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplaySummary {
    pub ticks: usize,
    pub predictions: usize,
    pub reconciled: usize,
    pub unreconcilable: usize,
}

/// Run every tick in `[from, to)` as fast as possible.
pub fn replay(service: &mut Service, from: NaiveDateTime, to: NaiveDateTime) -> Result<ReplaySummary> {
    let mut out = ReplaySummary::default();
    let mut now = next_boundary(from);
    while now < to {
        let (records, summary) = step(service, now)?;
        out.ticks += 1;
        out.predictions += records.len();
        out.reconciled += summary.reconciled;
        out.unreconcilable += summary.unreconcilable;
        now += Duration::minutes(TICK_MINUTES);
    }
    Ok(out)
}

/// First tick boundary at or after `t`.
pub fn next_boundary(t: NaiveDateTime) -> NaiveDateTime {
    let base = t
        .with_second(0)
        .and_then(|x| x.with_nanosecond(0))
        .expect("valid time");
    let rem = i64::from(base.minute()) % TICK_MINUTES;
    let floor = base - Duration::minutes(rem);
    if floor >= t {
        floor
    } else {
        floor + Duration::minutes(TICK_MINUTES)
    }
}

/// Drives a shared service from a clock, one interval at a time.
pub struct Scheduler {
    clock: Box<dyn Clock>,
    stop: Arc<AtomicBool>,
}

impl Scheduler {
    pub fn new(clock: impl Clock + 'static) -> Self {
        Self {
            clock: Box::new(clock),
            stop: Arc::new(AtomicBool::new(false)),
        }
    }

    pub fn stop_handle(&self) -> Arc<AtomicBool> {
        Arc::clone(&self.stop)
    }

    /// Run ticks from the first boundary at or after the clock's time until
    /// `until` (exclusive) or until stopped. Returns the number of ticks run.
    pub fn run(&self, service: &RwLock<Service>, until: Option<NaiveDateTime>) -> Result<usize> {
        let mut next = next_boundary(self.clock.now());
        let mut ticks = 0;
        loop {
            if until.is_some_and(|u| next >= u) {
                return Ok(ticks);
            }
            loop {
                if self.stop.load(Ordering::Relaxed) {
                    return Ok(ticks);
                }
                let wait = self.clock.wait_for(next);
                if wait.is_zero() {
                    break;
                }
                std::thread::sleep(wait.min(std::time::Duration::from_millis(200)));
            }
            {
                let mut svc = service.write().expect("service lock poisoned");
                if let Err(e) = step(&mut svc, next) {
                    log::error!("tick at {next} failed: {e}");
                }
            }
            ticks += 1;
            next += Duration::minutes(TICK_MINUTES);
        }
    }
}
