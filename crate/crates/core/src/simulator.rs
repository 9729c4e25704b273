//! Synthetic encounter streams.
//!
//! Arrivals follow a nonhomogeneous Poisson process with intensity
//! `base_rate * hour_mult[h] * dow_mult[d] * month_mult[m]` per hour,
//! sampled by thinning against the maximum intensity.
//!
//! The generator is `Xoshiro256PlusPlus` seeded through SplitMix64
//! (`seed_from_u64`). Uniforms are `next_u64() >> 11` scaled by `2^-53`.
//! Per candidate the draws are, in order: the exponential gap, the
//! acceptance test, and for accepted candidates the acuity group, the ESI
//! level within the group and two Box-Muller uniforms for the stay.

use std::f64::consts::PI;
use std::path::Path;

use chrono::{Datelike, Duration, NaiveDateTime, Timelike};
use rand::{RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::event_store::{AcuityGroup, EncounterRecord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimProfile {
    /// Mean arrivals per hour before the multipliers.
    pub base_rate: f64,
    pub hour_mult: [f64; 24],
    /// Monday first.
    pub dow_mult: [f64; 7],
    /// January first.
    pub month_mult: [f64; 12],
    /// Emergent, Urgent, NonUrgent.
    pub acuity_mix: [f64; 3],
    pub los_median_hours: [f64; 3],
    pub los_sigma: [f64; 3],
    pub seed: u64,
}

/// Hour-of-day shape on [0, 1]: overnight trough at 04:00, plateau 10:00-20:00.
const HOUR_SHAPE: [f64; 24] = [
    0.4, 0.3, 0.15, 0.05, 0.0, 0.05, 0.15, 0.3, 0.5, 0.75, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0,
    1.0, 1.0, 1.0, 0.85, 0.7, 0.55,
];

pub fn default_profile() -> SimProfile {
    let raw: Vec<f64> = HOUR_SHAPE.iter().map(|s| 1.0 + 2.0 * s).collect();
    let mean = raw.iter().sum::<f64>() / 24.0;
    let hour_mult = std::array::from_fn(|h| raw[h] / mean);
    let month_mult = std::array::from_fn(|m| 1.0 + 0.1 * (2.0 * PI * m as f64 / 12.0).cos());
    SimProfile {
        base_rate: 6.85,
        hour_mult,
        dow_mult: [1.15, 1.05, 1.0, 0.98, 1.0, 0.92, 0.90],
        month_mult,
        acuity_mix: [0.2394, 0.5842, 0.1764],
        los_median_hours: [4.0, 3.0, 1.5],
        los_sigma: [0.5, 0.5, 0.5],
        seed: 20140101,
    }
}

impl Default for SimProfile {
    fn default() -> Self {
        default_profile()
    }
}

impl SimProfile {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: &[f64]| -> Result<()> {
            if v.iter().all(|x| x.is_finite() && *x > 0.0) {
                Ok(())
            } else {
                Err(Error::Validation(format!("{name} must be finite and > 0")))
            }
        };
        positive("base_rate", &[self.base_rate])?;
        positive("hour_mult", &self.hour_mult)?;
        positive("dow_mult", &self.dow_mult)?;
        positive("month_mult", &self.month_mult)?;
        positive("los_median_hours", &self.los_median_hours)?;
        positive("los_sigma", &self.los_sigma)?;
        if self.acuity_mix.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::Validation("acuity_mix entries must be >= 0".into()));
        }
        let total: f64 = self.acuity_mix.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Validation(format!(
                "acuity_mix sums to {total}, expected 1"
            )));
        }
        Ok(())
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let p = path.as_ref();
        let raw = std::fs::read_to_string(p)?;
        let profile: SimProfile = serde_json::from_str(&raw)
            .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
        profile.validate()?;
        Ok(profile)
    }

    /// Arrivals per hour at `at`.
    pub fn intensity(&self, at: NaiveDateTime) -> f64 {
        self.base_rate
            * self.hour_mult[at.hour() as usize]
            * self.dow_mult[at.weekday().num_days_from_monday() as usize]
            * self.month_mult[at.month0() as usize]
    }

    pub fn max_intensity(&self) -> f64 {
        let max = |v: &[f64]| v.iter().copied().fold(f64::MIN, f64::max);
        self.base_rate * max(&self.hour_mult) * max(&self.dow_mult) * max(&self.month_mult)
    }

    /// Expected number of arrivals over `[start, end)`, integrating the
    /// piecewise-constant intensity hour by hour.
    pub fn expected_arrivals(&self, start: NaiveDateTime, end: NaiveDateTime) -> f64 {
        let mut total = 0.0;
        let mut t = start;
        while t < end {
            let next_hour = (t + Duration::hours(1))
                .with_minute(0)
                .and_then(|x| x.with_second(0))
                .expect("valid time");
            let stop = next_hour.min(end);
            total += self.intensity(t) * (stop - t).num_seconds() as f64 / 3600.0;
            t = stop;
        }
        total
    }

    /// Same profile with every intensity multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            base_rate: self.base_rate * factor,
            ..self.clone()
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }
}

/// Lazily generated encounter stream in arrival order.
pub struct SimStream {
    profile: SimProfile,
    rng: Xoshiro256PlusPlus,
    start: NaiveDateTime,
    span_hours: f64,
    lambda_max: f64,
    clock_hours: f64,
    emitted: u64,
}

/// Encounters over `[start, end)` drawn from `profile` with its own seed.
pub fn generate(profile: &SimProfile, start: NaiveDateTime, end: NaiveDateTime) -> Result<SimStream> {
    profile.validate()?;
    if end - start < Duration::hours(1) {
        return Err(domain(format!(
            "simulation span [{start}, {end}) is shorter than one hour"
        )));
    }
    Ok(SimStream {
        rng: Xoshiro256PlusPlus::seed_from_u64(profile.seed),
        lambda_max: profile.max_intensity(),
        span_hours: (end - start).num_minutes() as f64 / 60.0,
        profile: profile.clone(),
        start,
        clock_hours: 0.0,
        emitted: 0,
    })
}

/// Collect the whole stream.
pub fn generate_all(
    profile: &SimProfile,
    start: NaiveDateTime,
    end: NaiveDateTime,
) -> Result<Vec<EncounterRecord>> {
    Ok(generate(profile, start, end)?.collect())
}

impl SimStream {
    fn uniform(&mut self) -> f64 {
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    fn pick_group(&self, u: f64) -> AcuityGroup {
        let mut acc = 0.0;
        for g in AcuityGroup::ALL {
            acc += self.profile.acuity_mix[g.index()];
            if u < acc {
                return g;
            }
        }
        AcuityGroup::NonUrgent
    }

    fn encounter(&mut self, arrival: NaiveDateTime) -> EncounterRecord {
        let u_group = self.uniform();
        let group = self.pick_group(u_group);
        let levels = group.esi_levels();
        let esi = levels[((self.uniform() * levels.len() as f64) as usize).min(levels.len() - 1)];
        let (u1, u2) = (self.uniform(), self.uniform());
        let z = (-2.0 * (1.0 - u1).ln()).sqrt() * (2.0 * PI * u2).cos();
        let g = group.index();
        let los_hours = (self.profile.los_median_hours[g].ln() + self.profile.los_sigma[g] * z).exp();
        let stay_minutes = ((los_hours * 60.0).round() as i64).max(1);
        let id = format!("S{}-{:07}", self.profile.seed, self.emitted);
        self.emitted += 1;
        EncounterRecord {
            encounter_id: id,
            arrival_time: arrival,
            departure_time: Some(arrival + Duration::minutes(stay_minutes)),
            esi: Some(esi),
        }
    }
}

impl Iterator for SimStream {
    type Item = EncounterRecord;

    fn next(&mut self) -> Option<EncounterRecord> {
        loop {
            let u_gap = self.uniform();
            self.clock_hours += -(1.0 - u_gap).ln() / self.lambda_max;
            if self.clock_hours >= self.span_hours {
                self.clock_hours = self.span_hours;
                return None;
            }
            let minutes = (self.clock_hours * 60.0).floor() as i64;
            let at = self.start + Duration::minutes(minutes);
            let u_accept = self.uniform();
            if u_accept * self.lambda_max < self.profile.intensity(at) {
                return Some(self.encounter(at));
            }
        }
    }
}
