//! Training datasets, the 12-target x 6-family model grid, the two-year
//! baseline and forecast scoring.

mod metrics;

use std::fmt;
use std::io::Write;

use chrono::{Duration, NaiveDateTime};
use ndarray::{s, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::event_store::AcuityGroup;
use crate::features::{feature_row, FeatureVector, FEATURE_DIM, WARMUP_TICKS};
use crate::gbm::{self, GbmModel, GbmSpec};
use crate::glm::{self, GlmModel, GlmSpec, Penalty};
use crate::timefmt;
use crate::timeseries::{SeriesFrame, SeriesKind, TickIndex, TICKS_PER_DAY, TICKS_PER_WEEK};

pub use metrics::{accuracy, metrics, MetricsReport, ABS_ERR_THRESHOLD, ACCURACY_THRESHOLD};

/// Baseline look-back offsets: same weekday and time, one and two years back.
pub const BASELINE_OFFSETS_WEEKS: [i64; 2] = [52, 104];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Horizon {
    #[serde(rename = "2h")]
    H2,
    #[serde(rename = "4h")]
    H4,
    #[serde(rename = "8h")]
    H8,
}

impl Horizon {
    pub const ALL: [Horizon; 3] = [Horizon::H2, Horizon::H4, Horizon::H8];

    pub fn hours(self) -> i64 {
        match self {
            Horizon::H2 => 2,
            Horizon::H4 => 4,
            Horizon::H8 => 8,
        }
    }

    pub fn ticks(self) -> i64 {
        self.hours() * 4
    }

    pub fn label(self) -> &'static str {
        match self {
            Horizon::H2 => "2h",
            Horizon::H4 => "4h",
            Horizon::H8 => "8h",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|h| h.label() == s)
    }
}

/// What is forecast and how far ahead. Serialized as e.g. `census/2h` or
/// `arrivals_urgent/8h`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct TargetSpec {
    pub kind: SeriesKind,
    pub horizon: Horizon,
}

impl TargetSpec {
    pub fn new(kind: SeriesKind, horizon: Horizon) -> Self {
        Self { kind, horizon }
    }

    pub fn census(horizon: Horizon) -> Self {
        Self::new(SeriesKind::Census, horizon)
    }

    pub fn arrivals(g: AcuityGroup, horizon: Horizon) -> Self {
        Self::new(SeriesKind::Arrivals(g), horizon)
    }

    /// The 12 targets: census first, then each acuity group, each at 2/4/8h.
    pub fn all() -> Vec<TargetSpec> {
        SeriesKind::ALL
            .into_iter()
            .flat_map(|k| Horizon::ALL.into_iter().map(move |h| TargetSpec::new(k, h)))
            .collect()
    }

    pub fn label(&self) -> String {
        format!("{}/{}", self.kind.label(), self.horizon.label())
    }

    pub fn parse(s: &str) -> Option<Self> {
        let (kind, h) = s.split_once('/')?;
        Some(Self::new(SeriesKind::parse(kind)?, Horizon::parse(h)?))
    }
}

impl fmt::Display for TargetSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

impl From<TargetSpec> for String {
    fn from(t: TargetSpec) -> String {
        t.label()
    }
}

impl TryFrom<String> for TargetSpec {
    type Error = String;
    fn try_from(s: String) -> std::result::Result<Self, String> {
        TargetSpec::parse(&s).ok_or_else(|| format!("unknown target {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Family {
    #[serde(rename = "GLM")]
    Glm,
    #[serde(rename = "GLM-Lasso")]
    GlmLasso,
    #[serde(rename = "GLM-Ridge")]
    GlmRidge,
    #[serde(rename = "GLM-ElasticNet")]
    GlmElasticNet,
    #[serde(rename = "GBM")]
    Gbm,
    Baseline,
}

impl Family {
    pub const ALL: [Family; 6] = [
        Family::Glm,
        Family::GlmLasso,
        Family::GlmRidge,
        Family::GlmElasticNet,
        Family::Gbm,
        Family::Baseline,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Family::Glm => "GLM",
            Family::GlmLasso => "GLM-Lasso",
            Family::GlmRidge => "GLM-Ridge",
            Family::GlmElasticNet => "GLM-ElasticNet",
            Family::Gbm => "GBM",
            Family::Baseline => "Baseline",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL
            .into_iter()
            .find(|f| f.label().eq_ignore_ascii_case(s))
    }

    fn penalty(self) -> Option<Penalty> {
        match self {
            Family::Glm => Some(Penalty::None),
            Family::GlmLasso => Some(Penalty::Lasso),
            Family::GlmRidge => Some(Penalty::Ridge),
            Family::GlmElasticNet => Some(Penalty::ElasticNet),
            Family::Gbm | Family::Baseline => None,
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Fitted parameters, tagged by model kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum ModelParams {
    Glm(GlmModel),
    Gbm(GbmModel),
    Baseline,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    #[serde(with = "timefmt::minute")]
    pub start: NaiveDateTime,
    #[serde(with = "timefmt::minute")]
    pub end: NaiveDateTime,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub target: TargetSpec,
    pub family: Family,
    pub params: ModelParams,
    /// Ticks whose rows were used for fitting, `[start, end)`.
    pub trained_span: Span,
    pub metrics_on_test: MetricsReport,
}

/// Value the forecast made at `t` is scored against: census at `t + h`, or
/// group arrivals summed over `(t, t + h]`.
pub fn target_value(frame: &SeriesFrame, target: TargetSpec, t: TickIndex) -> Option<f64> {
    let h = target.horizon.ticks();
    match target.kind {
        SeriesKind::Census => frame.value(SeriesKind::Census, t + h).map(f64::from),
        kind @ SeriesKind::Arrivals(_) => {
            if !frame.contains(t + 1) || !frame.contains(t + h) {
                return None;
            }
            let a = (t + 1 - frame.start()) as usize;
            let b = (t + h - frame.start()) as usize;
            Some(frame.series(kind)[a..=b].iter().map(|&v| f64::from(v)).sum())
        }
    }
}

/// Feature matrix and targets for one forecasting target, rows ordered by tick.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub target: TargetSpec,
    pub ticks: Vec<TickIndex>,
    pub x: Array2<f64>,
    pub y: Vec<f64>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.ticks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ticks.is_empty()
    }

    /// Number of rows with tick `< t`.
    pub fn rows_before(&self, t: TickIndex) -> usize {
        self.ticks.partition_point(|&k| k < t)
    }

    pub fn x_rows(&self, a: usize, b: usize) -> ArrayView2<'_, f64> {
        self.x.slice(s![a..b, ..])
    }
}

/// One row per tick with full lag history and an observable target.
pub fn build_dataset(frame: &SeriesFrame, target: TargetSpec) -> Result<Dataset> {
    let first = frame.start() + WARMUP_TICKS;
    let last = frame.end() - 1 - target.horizon.ticks();
    if last < first {
        return Err(domain(format!(
            "frame of {} ticks is too short for {target} (needs > {})",
            frame.len(),
            WARMUP_TICKS + target.horizon.ticks()
        )));
    }
    let n = (last - first + 1) as usize;
    let mut x = Array2::zeros((n, FEATURE_DIM));
    let mut y = Vec::with_capacity(n);
    let mut ticks = Vec::with_capacity(n);
    for (i, t) in (first.0..=last.0).map(TickIndex).enumerate() {
        let fv = feature_row(frame, t, target.kind)?;
        x.row_mut(i).assign(&ndarray::ArrayView1::from(&fv.to_array()));
        y.push(target_value(frame, target, t).expect("index range checked above"));
        ticks.push(t);
    }
    Ok(Dataset {
        target,
        ticks,
        x,
        y,
    })
}

/// Mean of the target value at the same tick 52 and 104 weeks earlier.
pub fn baseline_predict(frame: &SeriesFrame, t: TickIndex, target: TargetSpec) -> Result<f64> {
    let mut total = 0.0;
    for weeks in BASELINE_OFFSETS_WEEKS {
        let back = t - weeks * TICKS_PER_WEEK;
        total += target_value(frame, target, back).ok_or_else(|| {
            Error::InsufficientHistory(format!(
                "baseline for {target} at {} needs history from {}",
                frame.timestamp(t),
                frame.timestamp(back)
            ))
        })?;
    }
    Ok(total / BASELINE_OFFSETS_WEEKS.len() as f64)
}

/// Forecast from a GLM/GBM payload and a ready feature row.
pub fn score_features(model: &TrainedModel, x: &FeatureVector) -> Result<f64> {
    check_payload(model)?;
    let row = x.to_array();
    match &model.params {
        ModelParams::Glm(m) => m.predict(&row),
        ModelParams::Gbm(m) => m.predict(&row),
        ModelParams::Baseline => Err(Error::Model(
            "baseline forecasts need the series frame, not a feature row".into(),
        )),
    }
}

/// Forecast for `model.target` made at tick `t`, reading only the frame.
pub fn score(model: &TrainedModel, frame: &SeriesFrame, t: TickIndex) -> Result<f64> {
    check_payload(model)?;
    match &model.params {
        ModelParams::Baseline => baseline_predict(frame, t, model.target),
        _ => score_features(model, &feature_row(frame, t, model.target.kind)?),
    }
}

/// Census forecasts are shown to one decimal; the stored value keeps full
/// precision.
pub fn display_value(target: TargetSpec, value: f64) -> f64 {
    match target.kind {
        SeriesKind::Census => (value * 10.0).round() / 10.0,
        SeriesKind::Arrivals(_) => value,
    }
}

fn check_payload(model: &TrainedModel) -> Result<()> {
    let ok = matches!(
        (model.family, &model.params),
        (Family::Gbm, ModelParams::Gbm(_)) | (Family::Baseline, ModelParams::Baseline)
    ) || matches!(
        (model.family.penalty(), &model.params),
        (Some(p), ModelParams::Glm(g)) if g.spec.penalty == p
    );
    if ok {
        Ok(())
    } else {
        Err(Error::Model(format!(
            "{} entry for {} carries a mismatched payload",
            model.family, model.target
        )))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lambda_grid: Vec<f64>,
    pub elastic_net_l1_ratio: f64,
    /// Trailing part of the training span used to choose λ.
    pub validation_days: i64,
    pub glm_max_iter: usize,
    pub glm_tol: f64,
    pub gbm: GbmSpec,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_grid: vec![0.001, 0.01, 0.1, 1.0, 10.0],
            elastic_net_l1_ratio: 0.5,
            validation_days: 90,
            glm_max_iter: 100,
            glm_tol: 1e-8,
            gbm: GbmSpec::default(),
            seed: 7,
        }
    }
}

impl TrainConfig {
    fn glm_spec(&self, family: Family, lambda: f64) -> GlmSpec {
        let base = match family {
            Family::GlmLasso => GlmSpec::lasso(lambda),
            Family::GlmRidge => GlmSpec::ridge(lambda),
            Family::GlmElasticNet => GlmSpec::elastic_net(lambda, self.elastic_net_l1_ratio),
            _ => GlmSpec::unpenalized(),
        };
        GlmSpec {
            max_iter: self.glm_max_iter,
            tol: self.glm_tol,
            ..base
        }
    }
}

/// Fit one family on rows with tick `< split` and score it on the rest.
pub fn train_family(
    frame: &SeriesFrame,
    data: &Dataset,
    split: TickIndex,
    family: Family,
    cfg: &TrainConfig,
) -> Result<TrainedModel> {
    let n_train = data.rows_before(split);
    let n = data.len();
    if n_train == 0 {
        return Err(Error::InsufficientHistory(format!(
            "{family}: no training rows before {}",
            frame.timestamp(split)
        )));
    }
    if n_train == n {
        return Err(domain(format!("{family}: no test rows at or after the split")));
    }
    let x_train = data.x_rows(0, n_train);
    let y_train = &data.y[..n_train];
    let params = match family {
        Family::Baseline => {
            let earliest = split - BASELINE_OFFSETS_WEEKS[1] * TICKS_PER_WEEK;
            if earliest < frame.start() {
                return Err(Error::InsufficientHistory(format!(
                    "{family}: needs {} weeks of history before the split",
                    BASELINE_OFFSETS_WEEKS[1]
                )));
            }
            ModelParams::Baseline
        }
        Family::Gbm => ModelParams::Gbm(
            gbm::fit(x_train, y_train, &cfg.gbm, cfg.seed)
                .map_err(|e| Error::Model(format!("{family}: {e}")))?,
        ),
        Family::Glm => ModelParams::Glm(
            glm::fit(x_train, y_train, &cfg.glm_spec(family, 0.0))
                .map_err(|e| Error::Model(format!("{family}: {e}")))?,
        ),
        penalized => ModelParams::Glm(fit_penalized(frame, data, split, penalized, cfg)?),
    };
    let provisional = TrainedModel {
        target: data.target,
        family,
        params,
        trained_span: Span {
            start: frame.timestamp(data.ticks[0]),
            end: frame.timestamp(split),
        },
        metrics_on_test: MetricsReport {
            rmse: 0.0,
            mae: 0.0,
            pct_abs_err_le4: 0.0,
            pct_accuracy_ge70: 0.0,
            n: 0,
        },
    };
    let preds = predict_rows(&provisional, frame, data, n_train, n)?;
    let metrics_on_test = metrics(&preds, &data.y[n_train..])?;
    Ok(TrainedModel {
        metrics_on_test,
        ..provisional
    })
}

fn predict_rows(
    model: &TrainedModel,
    frame: &SeriesFrame,
    data: &Dataset,
    a: usize,
    b: usize,
) -> Result<Vec<f64>> {
    match &model.params {
        ModelParams::Glm(m) => m.predict_rows(data.x_rows(a, b)),
        ModelParams::Gbm(m) => m.predict_rows(data.x_rows(a, b)),
        ModelParams::Baseline => data.ticks[a..b]
            .iter()
            .map(|&t| baseline_predict(frame, t, data.target))
            .collect(),
    }
}

/// Choose λ by validation MAE on the trailing `validation_days` of the
/// training rows, then refit on all training rows.
fn fit_penalized(
    frame: &SeriesFrame,
    data: &Dataset,
    split: TickIndex,
    family: Family,
    cfg: &TrainConfig,
) -> Result<GlmModel> {
    let n_train = data.rows_before(split);
    let val_start = split - cfg.validation_days * TICKS_PER_DAY;
    let n_fit = data.rows_before(val_start);
    if n_fit == 0 || n_fit >= n_train {
        return Err(Error::InsufficientHistory(format!(
            "{family}: training span before {} must exceed the {}-day validation window",
            frame.timestamp(split),
            cfg.validation_days
        )));
    }
    if cfg.lambda_grid.is_empty() {
        return Err(domain(format!("{family}: empty lambda grid")));
    }
    let mut grid = cfg.lambda_grid.clone();
    grid.sort_by(|a, b| b.partial_cmp(a).expect("finite lambda"));
    let x_fit = data.x_rows(0, n_fit);
    let y_fit = &data.y[..n_fit];
    let x_val = data.x_rows(n_fit, n_train);
    let y_val = &data.y[n_fit..n_train];

    let mut warm: Option<GlmModel> = None;
    let mut best: Option<(f64, f64, GlmModel)> = None;
    for &lambda in &grid {
        let spec = cfg.glm_spec(family, lambda);
        let model = glm::fit_warm(x_fit, y_fit, &spec, warm.as_ref())
            .map_err(|e| Error::Model(format!("{family} (lambda {lambda}): {e}")))?;
        let preds = model.predict_rows(x_val)?;
        let mae = metrics(&preds, y_val)?.mae;
        log::debug!("{} {family} lambda={lambda} validation MAE {mae:.4}", data.target);
        // Strict improvement only: on ties keep the larger λ.
        if best.as_ref().is_none_or(|(_, m, _)| mae < *m) {
            best = Some((lambda, mae, model.clone()));
        }
        warm = Some(model);
    }
    let (lambda, _, seed_model) = best.expect("non-empty grid");
    glm::fit_warm(
        data.x_rows(0, n_train),
        &data.y[..n_train],
        &cfg.glm_spec(family, lambda),
        Some(&seed_model),
    )
    .map_err(|e| Error::Model(format!("{family} (lambda {lambda}): {e}")))
}

/// Every target x every family, fitted before `split` and scored after it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelGrid {
    #[serde(with = "timefmt::minute")]
    pub split: NaiveDateTime,
    pub entries: Vec<TrainedModel>,
}

impl ModelGrid {
    pub fn get(&self, target: TargetSpec, family: Family) -> Option<&TrainedModel> {
        self.entries
            .iter()
            .find(|m| m.target == target && m.family == family)
    }

    /// Lowest test MAE per target; ties go to the earlier family in
    /// [`Family::ALL`].
    pub fn best_per_target(&self) -> Vec<&TrainedModel> {
        TargetSpec::all()
            .into_iter()
            .filter_map(|t| {
                self.entries
                    .iter()
                    .filter(|m| m.target == t)
                    .min_by(|a, b| {
                        a.metrics_on_test
                            .mae
                            .total_cmp(&b.metrics_on_test.mae)
                            .then(a.family.cmp(&b.family))
                    })
            })
            .collect()
    }

    pub fn report(&self) -> Vec<EvaluationRow> {
        self.entries.iter().map(EvaluationRow::from).collect()
    }
}

/// Options for [`train_all`] beyond the per-family config.
#[derive(Debug, Clone, PartialEq)]
pub struct GridOptions {
    pub targets: Vec<TargetSpec>,
    pub families: Vec<Family>,
}

impl Default for GridOptions {
    fn default() -> Self {
        Self {
            targets: TargetSpec::all(),
            families: Family::ALL.to_vec(),
        }
    }
}

/// Train the full 12 x 6 grid.
pub fn train_all(frame: &SeriesFrame, split: NaiveDateTime, cfg: &TrainConfig) -> Result<ModelGrid> {
    train_grid(frame, split, cfg, &GridOptions::default())
}

pub fn train_grid(
    frame: &SeriesFrame,
    split: NaiveDateTime,
    cfg: &TrainConfig,
    opts: &GridOptions,
) -> Result<ModelGrid> {
    let split_tick = frame.grid().tick_at(split)?;
    if !frame.contains(split_tick) || split_tick == frame.start() {
        return Err(domain(format!("split {split} lies outside the frame")));
    }
    if opts.families.contains(&Family::Baseline) {
        let earliest = split_tick - BASELINE_OFFSETS_WEEKS[1] * TICKS_PER_WEEK;
        if earliest < frame.start() {
            return Err(Error::InsufficientHistory(format!(
                "Baseline: needs {} weeks of history before {split}, frame starts {}",
                BASELINE_OFFSETS_WEEKS[1],
                frame.timestamp(frame.start())
            )));
        }
    }
    let mut entries = Vec::with_capacity(opts.targets.len() * opts.families.len());
    for &target in &opts.targets {
        let data = build_dataset(frame, target)?;
        for &family in &opts.families {
            let started = std::time::Instant::now();
            let model = train_family(frame, &data, split_tick, family, cfg)?;
            log::info!(
                "trained {target} {family} in {:.1}s: test MAE {:.4}",
                started.elapsed().as_secs_f64(),
                model.metrics_on_test.mae
            );
            entries.push(model);
        }
    }
    Ok(ModelGrid { split, entries })
}

/// One line of the evaluation report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationRow {
    pub target: TargetSpec,
    pub family: Family,
    pub rmse: f64,
    pub mae: f64,
    pub pct_abs_err_le4: f64,
    pub pct_accuracy_ge70: f64,
    pub n: usize,
}

impl From<&TrainedModel> for EvaluationRow {
    fn from(m: &TrainedModel) -> Self {
        let r = m.metrics_on_test;
        Self {
            target: m.target,
            family: m.family,
            rmse: r.rmse,
            mae: r.mae,
            pct_abs_err_le4: r.pct_abs_err_le4,
            pct_accuracy_ge70: r.pct_accuracy_ge70,
            n: r.n,
        }
    }
}

/// Aligned plain-text rendering of an evaluation report.
pub fn render_table<W: Write>(mut out: W, rows: &[EvaluationRow]) -> std::io::Result<()> {
    writeln!(
        out,
        "{:<22} {:<15} {:>8} {:>8} {:>9} {:>9} {:>7}",
        "target", "model", "RMSE", "MAE", "|e|<=4 %", "acc>=70%", "n"
    )?;
    for r in rows {
        writeln!(
            out,
            "{:<22} {:<15} {:>8.4} {:>8.4} {:>9.2} {:>9.2} {:>7}",
            r.target.label(),
            r.family.label(),
            r.rmse,
            r.mae,
            r.pct_abs_err_le4,
            r.pct_accuracy_ge70,
            r.n
        )?;
    }
    Ok(())
}

/// Frame end must include a forecast's horizon before it can be scored.
pub fn due_time(made_at: NaiveDateTime, target: TargetSpec) -> NaiveDateTime {
    made_at + Duration::hours(target.horizon.hours())
}
