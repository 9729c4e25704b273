use chrono::{Duration, NaiveDateTime, Timelike};
use edf_core::event_store::{write_csv, AcuityGroup, StayCap};
use edf_core::simulator::{default_profile, generate, generate_all, SimProfile};
use edf_core::timefmt::parse;
use edf_core::timeseries::{build_frame, Grid, SeriesKind};

fn ts(s: &str) -> NaiveDateTime {
    parse(s).unwrap()
}

#[test]
fn four_year_volume_is_near_240k() {
    let p = default_profile();
    let (start, end) = (ts("2014-01-01T00:00"), ts("2018-01-01T00:00"));
    let expected = p.expected_arrivals(start, end);
    assert!((expected - 240_000.0).abs() / 240_000.0 < 0.01, "expected {expected}");
    let n = generate(&p, start, end).unwrap().count() as f64;
    assert!((n - 240_000.0).abs() <= 0.05 * 240_000.0, "generated {n}");
    // Poisson concentration around the analytic mean.
    assert!((n - expected).abs() < 4.0 * expected.sqrt());
}

#[test]
fn acuity_shares_match_the_mixture() {
    let p = default_profile().with_seed(7);
    let recs = generate_all(&p, ts("2015-01-01T00:00"), ts("2017-01-01T00:00")).unwrap();
    assert!(recs.len() >= 100_000);
    let mut counts = [0usize; 3];
    let mut esi_counts = [0usize; 6];
    for r in &recs {
        counts[r.acuity().unwrap().index()] += 1;
        esi_counts[r.esi.unwrap() as usize] += 1;
    }
    for g in AcuityGroup::ALL {
        let share = counts[g.index()] as f64 / recs.len() as f64;
        assert!((share - p.acuity_mix[g.index()]).abs() < 0.01, "{g}: {share}");
    }
    // ESI is uniform within a group.
    let ratio = esi_counts[1] as f64 / esi_counts[2] as f64;
    assert!((ratio - 1.0).abs() < 0.05);
}

#[test]
fn hourly_rates_converge_to_the_intensity() {
    let p = default_profile().with_seed(11);
    let (start, end) = (ts("2014-01-01T00:00"), ts("2018-01-01T00:00"));
    let recs = generate_all(&p, start, end).unwrap();
    let mut observed = [0f64; 24];
    for r in &recs {
        observed[r.arrival_time.hour() as usize] += 1.0;
    }
    let mut expected = [0f64; 24];
    let mut t = start;
    while t < end {
        expected[t.hour() as usize] += p.intensity(t);
        t += Duration::hours(1);
    }
    for h in 0..24 {
        let se = expected[h].sqrt();
        assert!(
            (observed[h] - expected[h]).abs() < 3.0 * se,
            "hour {h}: observed {} expected {:.1}",
            observed[h],
            expected[h]
        );
    }
}

#[test]
fn identical_seed_gives_identical_bytes() {
    let p = default_profile().with_seed(123);
    let write = |p: &SimProfile| {
        let recs = generate_all(p, ts("2016-02-01T00:00"), ts("2016-03-01T00:00")).unwrap();
        let mut out = Vec::new();
        write_csv(&mut out, &recs).unwrap();
        out
    };
    assert_eq!(write(&p), write(&p));
    assert_ne!(write(&p), write(&p.with_seed(124)));
}

#[test]
fn census_stays_bounded_and_partitions_sum() {
    let p = default_profile();
    let recs = generate_all(&p, ts("2014-01-01T00:00"), ts("2015-01-01T00:00")).unwrap();
    let grid = Grid::from_records(&recs).unwrap();
    let end = grid.tick_at(ts("2015-01-01T00:00")).unwrap();
    let frame = build_frame(&recs, grid, grid.tick_at(grid.epoch()).unwrap(), end, StayCap::default()).unwrap();
    let bound = p.base_rate * p.los_median_hours.iter().copied().fold(0.0, f64::max) * 3.0;
    let max = *frame.census().iter().max().unwrap();
    assert!(f64::from(max) <= bound, "max census {max} above {bound}");
    for g in AcuityGroup::ALL {
        let from_frame: u32 = frame.series(SeriesKind::Arrivals(g)).iter().sum();
        // Arrivals in (23:45 on Dec 31, 00:00 Jan 1] land on the tick past the frame.
        let direct = recs
            .iter()
            .filter(|r| r.acuity() == Some(g) && r.arrival_time <= ts("2014-12-31T23:45"))
            .count() as u32;
        assert_eq!(from_frame, direct);
    }
}

#[test]
fn profile_round_trips_through_json() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("profile.json");
    let p = default_profile();
    std::fs::write(&path, serde_json::to_string_pretty(&p).unwrap()).unwrap();
    assert_eq!(SimProfile::from_json_file(&path).unwrap(), p);
    std::fs::write(&path, r#"{"base_rate": 1.0}"#).unwrap();
    assert!(SimProfile::from_json_file(&path).is_err());
}

#[test]
fn scaled_profile_raises_volume() {
    let p = default_profile();
    let (start, end) = (ts("2017-11-01T00:00"), ts("2017-11-15T00:00"));
    let base = generate(&p, start, end).unwrap().count() as f64;
    let shifted = generate(&p.scaled(1.5), start, end).unwrap().count() as f64;
    assert!((shifted / base - 1.5).abs() < 0.1);
}
