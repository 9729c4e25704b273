use chrono::{Duration, NaiveDate, NaiveDateTime};
use edf_core::event_store::AcuityGroup;
use edf_core::features::*;
use edf_core::timefmt::parse;
use edf_core::timeseries::{Grid, SeriesFrame, SeriesKind, TickIndex};
use proptest::prelude::*;

/// Closed-form weighted least squares by Cramer's rule on the 2x2 normal
/// equations.
fn cramer_slope(lags: [f64; 4], w: [f64; 4]) -> f64 {
    let xs = [-1.0, -2.0, -3.0, -4.0];
    let (mut s, mut sx, mut sxx, mut sy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for k in 0..4 {
        s += w[k];
        sx += w[k] * xs[k];
        sxx += w[k] * xs[k] * xs[k];
        sy += w[k] * lags[k];
        sxy += w[k] * xs[k] * lags[k];
    }
    (s * sxy - sx * sy) / (s * sxx - sx * sx)
}

fn weights_strategy() -> impl Strategy<Value = LagWeights> {
    (0.01f64..5.0, 0.01f64..5.0, 0.01f64..5.0, 0.01f64..5.0)
        .prop_map(|(w15, w30, w45, w60)| LagWeights { w15, w30, w45, w60 })
}

fn timestamp_strategy() -> impl Strategy<Value = NaiveDateTime> {
    (0i64..(5 * 365 * 96)).prop_map(|k| parse("2014-01-01T00:00").unwrap() + Duration::minutes(15 * k))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn slope_is_translation_invariant(
        lags in prop::array::uniform4(0.0f64..200.0),
        c in -100.0f64..100.0,
        w in weights_strategy(),
    ) {
        let base = weighted_slope(lags, &w).unwrap();
        let shifted = weighted_slope(lags.map(|v| v + c), &w).unwrap();
        prop_assert!((base - shifted).abs() <= 1e-9 * (1.0 + base.abs()));
    }

    #[test]
    fn slope_recovers_exact_lines(
        intercept in -50.0f64..50.0,
        b in -10.0f64..10.0,
        w in weights_strategy(),
    ) {
        let lags = [1.0, 2.0, 3.0, 4.0].map(|k: f64| intercept - b * k);
        let got = weighted_slope(lags, &w).unwrap();
        prop_assert!((got - b).abs() < 1e-9);
    }

    #[test]
    fn slope_matches_cramer_oracle(
        lags in prop::array::uniform4(0.0f64..60.0),
        w in weights_strategy(),
    ) {
        let got = weighted_slope(lags, &w).unwrap();
        let want = cramer_slope(lags, w.as_array());
        prop_assert!((got - want).abs() <= 1e-9 * (1.0 + want.abs()));
    }

    #[test]
    fn slope_scales_linearly(lags in prop::array::uniform4(0.0f64..60.0), c in 0.1f64..10.0) {
        let w = LagWeights::default();
        let a = weighted_slope(lags, &w).unwrap() * c;
        let b = weighted_slope(lags.map(|v| v * c), &w).unwrap();
        prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a.abs()));
    }

    #[test]
    fn calendar_blocks_are_one_hot(at in timestamp_strategy()) {
        let c = calendar_features(at);
        prop_assert_eq!(c.month_onehot.iter().sum::<f64>(), 1.0);
        prop_assert_eq!(c.hour_onehot.iter().sum::<f64>(), 1.0);
        prop_assert_eq!(c.dow_onehot.iter().sum::<f64>(), 1.0);
        prop_assert_eq!(c.quarter_onehot.iter().sum::<f64>(), 1.0);
        for v in c.month_onehot.iter().chain(&c.hour_onehot).chain(&c.dow_onehot).chain(&c.quarter_onehot) {
            prop_assert!(*v == 0.0 || *v == 1.0);
        }
    }
}

#[test]
fn feature_vector_layout() {
    assert_eq!(FEATURE_DIM, 54);
    assert_eq!(FEATURE_NAMES.len(), 54);
    assert_eq!(FEATURE_NAMES[0], "lag_15m");
    assert_eq!(FEATURE_NAMES[SLOPE_INDEX], "slope");
    assert_eq!(FEATURE_NAMES[EVENING_INDEX], "evening");
    assert_eq!(FEATURE_NAMES[WEEKEND_INDEX], "weekend");
    assert_eq!(FEATURE_NAMES[HOUR_OFFSET + 21], "hour_21");
}

#[test]
fn evening_flag_boundaries() {
    let flag = |s: &str| calendar_features(parse(s).unwrap()).evening_flag;
    assert_eq!(flag("2016-05-04T07:45"), 1.0);
    assert_eq!(flag("2016-05-04T07:59"), 1.0);
    assert_eq!(flag("2016-05-04T08:00"), 0.0);
    assert_eq!(flag("2016-05-04T19:45"), 0.0);
    assert_eq!(flag("2016-05-04T19:59"), 0.0);
    assert_eq!(flag("2016-05-04T20:00"), 1.0);
    assert_eq!(flag("2016-05-04T00:00"), 1.0);
}

#[test]
fn saturday_evening_example() {
    let c = calendar_features(parse("2014-01-04T21:15").unwrap());
    assert_eq!(c.month_onehot[0], 1.0);
    assert_eq!(c.hour_onehot[21], 1.0);
    assert_eq!(c.dow_onehot[5], 1.0);
    assert_eq!(c.quarter_onehot[0], 1.0);
    assert_eq!((c.weekend_flag, c.evening_flag), (1.0, 1.0));
    let july = calendar_features(parse("2015-07-15T12:00").unwrap());
    assert_eq!((july.weekend_flag, july.evening_flag), (0.0, 0.0));
    assert_eq!(july.quarter_onehot[2], 1.0);
}

#[test]
fn slope_examples() {
    let w = LagWeights::default();
    assert_eq!(weighted_slope([10.0; 4], &w).unwrap(), 0.0);
    assert!((weighted_slope([13.0, 12.0, 11.0, 10.0], &w).unwrap() - 1.0).abs() < 1e-12);
    assert!(weighted_slope([f64::NAN, 1.0, 1.0, 1.0], &w).is_err());
}

fn frame_with(census_tail: [u32; 4]) -> SeriesFrame {
    let grid = Grid::new(NaiveDate::from_ymd_opt(2014, 1, 1).unwrap());
    // Ticks 0..8; lags for t = 8 read ticks 7, 6, 5, 4.
    let mut census = vec![0u32; 8];
    for (k, v) in census_tail.iter().enumerate() {
        census[7 - k] = *v;
    }
    let urgent: Vec<u32> = (0..8).collect();
    SeriesFrame::from_parts(grid, TickIndex(0), census, [vec![0; 8], urgent, vec![1; 8]]).unwrap()
}

#[test]
fn feature_row_reads_the_requested_series() {
    let f = frame_with([20, 19, 18, 17]);
    let row = feature_row(&f, TickIndex(8), SeriesKind::Census).unwrap();
    assert_eq!(row.lag_values, [20.0, 19.0, 18.0, 17.0]);
    assert!((row.slope - 1.0).abs() < 1e-12);
    let arr = feature_row(&f, TickIndex(8), SeriesKind::Arrivals(AcuityGroup::Urgent)).unwrap();
    assert_eq!(arr.lag_values, [7.0, 6.0, 5.0, 4.0]);
    let v = arr.to_array();
    assert_eq!(v.len(), 54);
    assert_eq!(v[SLOPE_INDEX], arr.slope);
    // 2014-01-01T02:00 is a Wednesday in January at hour 2.
    assert_eq!(v[MONTH_OFFSET], 1.0);
    assert_eq!(v[HOUR_OFFSET + 2], 1.0);
    assert_eq!(v[DOW_OFFSET + 2], 1.0);
    assert_eq!(v[EVENING_INDEX], 1.0);
}

#[test]
fn warmup_is_an_insufficient_history_error() {
    let f = frame_with([1, 2, 3, 4]);
    let err = feature_row(&f, TickIndex(3), SeriesKind::Census).unwrap_err();
    assert!(matches!(err, edf_core::Error::InsufficientHistory(_)));
    assert!(feature_row(&f, TickIndex(4), SeriesKind::Census).is_ok());
}

#[test]
fn feature_csv_has_named_header() {
    let f = frame_with([20, 19, 18, 17]);
    let row = feature_row(&f, TickIndex(8), SeriesKind::Census).unwrap();
    let mut out = Vec::new();
    write_feature_csv(&mut out, [(f.timestamp(TickIndex(8)), row)]).unwrap();
    let text = String::from_utf8(out).unwrap();
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(header.len(), 55);
    assert_eq!(header[0], "timestamp");
    assert!(lines.next().unwrap().starts_with("2014-01-01T02:00,20,19,18,17,"));
}
