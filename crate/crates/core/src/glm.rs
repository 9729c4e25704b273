//! Poisson regression with log link and optional L1/L2/elastic-net penalty.
//!
//! The fit minimises
//!
//! ```text
//! (1/n) Σ (μᵢ − yᵢ ηᵢ) + λ [ α ‖β‖₁ + (1 − α)/2 ‖β‖₂² ]
//! ```
//!
//! where `η = b₀ + x̃β`, `x̃` are the standardized features and the intercept
//! is unpenalized. The outer loop is IRLS (working response
//! `z = η + (y − μ)/μ`, weights `μ`); each weighted least-squares subproblem
//! is solved by cyclic coordinate descent with soft-thresholding on the
//! weighted Gram matrix. A step-halving guard keeps the penalized objective
//! non-increasing across outer iterations.
//!
//! Coefficients are reported on the original feature scale.

use ndarray::{ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::features::FEATURE_ORDER_VERSION;

/// Mean used for the intercept when every target is zero.
pub const ZERO_TARGET_EPSILON: f64 = 1e-8;

const INNER_TOL: f64 = 1e-13;
const INNER_MAX_SWEEPS: usize = 20_000;
const MAX_HALVINGS: usize = 40;
const ETA_LIMIT: f64 = 700.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Penalty {
    None,
    Lasso,
    Ridge,
    ElasticNet,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GlmSpec {
    pub penalty: Penalty,
    pub lambda: f64,
    /// Share of the L1 term; only read for [`Penalty::ElasticNet`].
    pub l1_ratio: f64,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for GlmSpec {
    fn default() -> Self {
        Self {
            penalty: Penalty::None,
            lambda: 0.0,
            l1_ratio: 0.5,
            max_iter: 100,
            tol: 1e-8,
        }
    }
}

impl GlmSpec {
    pub fn unpenalized() -> Self {
        Self::default()
    }

    pub fn lasso(lambda: f64) -> Self {
        Self {
            penalty: Penalty::Lasso,
            lambda,
            l1_ratio: 1.0,
            ..Self::default()
        }
    }

    pub fn ridge(lambda: f64) -> Self {
        Self {
            penalty: Penalty::Ridge,
            lambda,
            l1_ratio: 0.0,
            ..Self::default()
        }
    }

    pub fn elastic_net(lambda: f64, l1_ratio: f64) -> Self {
        Self {
            penalty: Penalty::ElasticNet,
            lambda,
            l1_ratio,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(domain(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        if !(0.0..=1.0).contains(&self.l1_ratio) {
            return Err(domain(format!("l1_ratio must lie in [0, 1], got {}", self.l1_ratio)));
        }
        if self.max_iter == 0 {
            return Err(domain("max_iter must be positive"));
        }
        if !(self.tol.is_finite() && self.tol > 0.0) {
            return Err(domain("tol must be positive"));
        }
        Ok(())
    }

    /// `(λ, α)` actually applied: Lasso is α = 1, Ridge α = 0.
    pub fn effective_penalty(&self) -> (f64, f64) {
        match self.penalty {
            Penalty::None => (0.0, 0.0),
            Penalty::Lasso => (self.lambda, 1.0),
            Penalty::Ridge => (self.lambda, 0.0),
            Penalty::ElasticNet => (self.lambda, self.l1_ratio),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlmModel {
    pub spec: GlmSpec,
    pub intercept: f64,
    pub coefficients: Vec<f64>,
    pub feature_order_version: u32,
    pub train_deviance: f64,
    pub n_iter: usize,
    pub converged: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

impl GlmModel {
    pub fn linear_predictor(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.coefficients.len() {
            return Err(domain(format!(
                "expected {} features, got {}",
                self.coefficients.len(),
                x.len()
            )));
        }
        let eta = self.intercept + x.iter().zip(&self.coefficients).map(|(a, b)| a * b).sum::<f64>();
        if !eta.is_finite() {
            return Err(domain("non-finite linear predictor"));
        }
        Ok(eta)
    }

    /// Expected count `exp(intercept + x·coefficients)`.
    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        let mu = self.linear_predictor(x)?.exp();
        if !mu.is_finite() {
            return Err(domain("prediction overflow"));
        }
        Ok(mu)
    }

    pub fn predict_rows(&self, x: ArrayView2<f64>) -> Result<Vec<f64>> {
        x.rows()
            .into_iter()
            .map(|row| self.predict(&row.to_vec()))
            .collect()
    }
}

/// Per-iteration diagnostics of a fit.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FitTrace {
    /// Penalized objective after each outer iteration, starting with the
    /// initial point.
    pub objective: Vec<f64>,
    pub deviance: Vec<f64>,
    /// Standard deviation used to standardize each feature (0 for constant
    /// columns, which are held at zero).
    pub feature_scale: Vec<f64>,
}

impl FitTrace {
    /// Coefficients on the standardized scale, as seen by the penalty.
    pub fn standardized(&self, model: &GlmModel) -> Vec<f64> {
        model
            .coefficients
            .iter()
            .zip(&self.feature_scale)
            .map(|(c, s)| c * s)
            .collect()
    }
}

pub fn fit(x: ArrayView2<f64>, y: &[f64], spec: &GlmSpec) -> Result<GlmModel> {
    fit_traced(x, y, spec, None).map(|(m, _)| m)
}

/// Fit starting from `warm` (e.g. the neighbouring point on a λ path).
pub fn fit_warm(
    x: ArrayView2<f64>,
    y: &[f64],
    spec: &GlmSpec,
    warm: Option<&GlmModel>,
) -> Result<GlmModel> {
    fit_traced(x, y, spec, warm).map(|(m, _)| m)
}

pub fn fit_traced(
    x: ArrayView2<f64>,
    y: &[f64],
    spec: &GlmSpec,
    warm: Option<&GlmModel>,
) -> Result<(GlmModel, FitTrace)> {
    spec.validate()?;
    let (n, p) = x.dim();
    if y.len() != n {
        return Err(domain(format!("X has {n} rows but y has {}", y.len())));
    }
    if n == 0 {
        return Err(domain("no training rows"));
    }
    if y.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(domain("targets must be finite and non-negative"));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(domain("non-finite feature value"));
    }
    if spec.penalty == Penalty::None && n <= p {
        return Err(domain(format!("unpenalized fit needs n > {p}, got n = {n}")));
    }

    let design = Design::new(x);
    let mut trace = FitTrace {
        feature_scale: design.scale.clone(),
        ..FitTrace::default()
    };

    let y_mean = y.iter().sum::<f64>() / n as f64;
    if y_mean == 0.0 {
        let model = GlmModel {
            spec: *spec,
            intercept: ZERO_TARGET_EPSILON.ln(),
            coefficients: vec![0.0; p],
            feature_order_version: FEATURE_ORDER_VERSION,
            train_deviance: 2.0 * n as f64 * ZERO_TARGET_EPSILON,
            n_iter: 0,
            converged: true,
            warning: Some("all targets are zero; intercept fixed at ln(1e-8)".into()),
        };
        return Ok((model, trace));
    }

    let (lambda, alpha) = spec.effective_penalty();
    let mut state = match warm {
        Some(m) if m.coefficients.len() == p => {
            let mut beta: Vec<f64> =
                m.coefficients.iter().zip(&design.scale).map(|(c, s)| c * s).collect();
            for (b, s) in beta.iter_mut().zip(&design.scale) {
                if *s == 0.0 {
                    *b = 0.0;
                }
            }
            let b0 = m.intercept
                + m.coefficients.iter().zip(&design.mean).map(|(c, mu)| c * mu).sum::<f64>();
            design.state(b0, beta, y, lambda, alpha)
        }
        _ => design.state(y_mean.ln(), vec![0.0; p], y, lambda, alpha),
    };
    trace.objective.push(state.objective);
    trace.deviance.push(state.deviance);

    let mut converged = false;
    let mut n_iter = 0;
    while n_iter < spec.max_iter {
        n_iter += 1;
        let (b0, beta) = design.wls_step(&state, y, lambda, alpha);
        let mut candidate = design.state(b0, beta, y, lambda, alpha);
        let mut halvings = 0;
        while candidate.objective > state.objective + 1e-13 * state.objective.abs().max(1.0)
            && halvings < MAX_HALVINGS
        {
            let b0 = 0.5 * (candidate.b0 + state.b0);
            let beta = candidate
                .beta
                .iter()
                .zip(&state.beta)
                .map(|(a, b)| 0.5 * (a + b))
                .collect();
            candidate = design.state(b0, beta, y, lambda, alpha);
            halvings += 1;
        }
        if candidate.objective > state.objective {
            // No descent direction left at working precision.
            converged = true;
            break;
        }
        let rel_change = (state.deviance - candidate.deviance).abs() / (candidate.deviance.abs() + 0.1);
        state = candidate;
        trace.objective.push(state.objective);
        trace.deviance.push(state.deviance);
        if rel_change < spec.tol {
            converged = true;
            break;
        }
    }

    let (intercept, coefficients) = design.to_raw(state.b0, &state.beta);
    if !intercept.is_finite() || coefficients.iter().any(|c| !c.is_finite()) {
        return Err(Error::Model("fit produced non-finite parameters".into()));
    }
    let warning = (!converged).then(|| format!("IRLS did not converge in {n_iter} iterations"));
    if let Some(w) = &warning {
        log::warn!("{w}");
    }
    Ok((
        GlmModel {
            spec: *spec,
            intercept,
            coefficients,
            feature_order_version: FEATURE_ORDER_VERSION,
            train_deviance: state.deviance,
            n_iter,
            converged,
            warning,
        },
        trace,
    ))
}

/// Poisson deviance `2 Σ [y ln(y/μ) − (y − μ)]`.
pub fn poisson_deviance(y: ArrayView1<f64>, mu: ArrayView1<f64>) -> f64 {
    2.0 * y
        .iter()
        .zip(mu.iter())
        .map(|(&y, &m)| {
            let t = if y > 0.0 { y * (y / m).ln() } else { 0.0 };
            t - (y - m)
        })
        .sum::<f64>()
}

/// Sparse copy of the design plus standardization statistics.
struct Design {
    n: usize,
    p: usize,
    mean: Vec<f64>,
    scale: Vec<f64>,
    indptr: Vec<usize>,
    index: Vec<usize>,
    value: Vec<f64>,
}

struct IterState {
    b0: f64,
    beta: Vec<f64>,
    eta: Vec<f64>,
    mu: Vec<f64>,
    objective: f64,
    deviance: f64,
}

impl Design {
    fn new(x: ArrayView2<f64>) -> Self {
        let (n, p) = x.dim();
        let mut mean = vec![0.0; p];
        for row in x.rows() {
            for (m, v) in mean.iter_mut().zip(row.iter()) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; p];
        for row in x.rows() {
            for j in 0..p {
                let d = row[j] - mean[j];
                var[j] += d * d;
            }
        }
        let scale: Vec<f64> = var
            .iter()
            .map(|v| {
                let s = (v / n as f64).sqrt();
                if s > 1e-12 {
                    s
                } else {
                    0.0
                }
            })
            .collect();
        let mut indptr = Vec::with_capacity(n + 1);
        let mut index = Vec::new();
        let mut value = Vec::new();
        indptr.push(0);
        for row in x.rows() {
            for (j, &v) in row.iter().enumerate() {
                if v != 0.0 && scale[j] > 0.0 {
                    index.push(j);
                    value.push(v);
                }
            }
            indptr.push(index.len());
        }
        Self {
            n,
            p,
            mean,
            scale,
            indptr,
            index,
            value,
        }
    }

    fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let (a, b) = (self.indptr[i], self.indptr[i + 1]);
        (&self.index[a..b], &self.value[a..b])
    }

    fn to_raw(&self, b0: f64, beta: &[f64]) -> (f64, Vec<f64>) {
        let coef: Vec<f64> = beta
            .iter()
            .zip(&self.scale)
            .map(|(b, s)| if *s > 0.0 { b / s } else { 0.0 })
            .collect();
        let c0 = b0 - coef.iter().zip(&self.mean).map(|(c, m)| c * m).sum::<f64>();
        (c0, coef)
    }

    fn state(&self, b0: f64, beta: Vec<f64>, y: &[f64], lambda: f64, alpha: f64) -> IterState {
        let (c0, coef) = self.to_raw(b0, &beta);
        let mut eta = Vec::with_capacity(self.n);
        let mut mu = Vec::with_capacity(self.n);
        let mut loss = 0.0;
        let mut dev = 0.0;
        for (i, &yi) in y.iter().enumerate() {
            let (idx, val) = self.row(i);
            let e = (c0 + idx.iter().zip(val).map(|(&j, v)| coef[j] * v).sum::<f64>())
                .clamp(-ETA_LIMIT, ETA_LIMIT);
            let m = e.exp();
            loss += m - yi * e;
            dev += if yi > 0.0 { yi * (yi.ln() - e) } else { 0.0 } - (yi - m);
            eta.push(e);
            mu.push(m);
        }
        let l1: f64 = beta.iter().map(|b| b.abs()).sum();
        let l2: f64 = beta.iter().map(|b| b * b).sum();
        let objective = loss / self.n as f64 + lambda * (alpha * l1 + 0.5 * (1.0 - alpha) * l2);
        IterState {
            b0,
            beta,
            eta,
            mu,
            objective,
            deviance: 2.0 * dev,
        }
    }

    /// Solve the penalized weighted least-squares subproblem at `state`.
    fn wls_step(&self, state: &IterState, y: &[f64], lambda: f64, alpha: f64) -> (f64, Vec<f64>) {
        let p = self.p;
        let mut sw = 0.0;
        let mut bz = 0.0;
        let mut bx = vec![0.0; p];
        let mut cxz = vec![0.0; p];
        let mut a = vec![0.0; p * p];
        for (i, &yi) in y.iter().enumerate().take(self.n) {
            let w = state.mu[i].max(1e-300);
            let z = state.eta[i] + (yi - state.mu[i]) / w;
            sw += w;
            bz += w * z;
            let (idx, val) = self.row(i);
            for (k, (&j, &v)) in idx.iter().zip(val).enumerate() {
                let wv = w * v;
                bx[j] += wv;
                cxz[j] += wv * z;
                for (&l, &u) in idx[k..].iter().zip(&val[k..]) {
                    a[j * p + l] += wv * u;
                }
            }
        }
        let nf = self.n as f64;
        let mut gram = vec![0.0; p * p];
        let mut rhs = vec![0.0; p];
        for j in 0..p {
            let sj = self.scale[j];
            if sj == 0.0 {
                continue;
            }
            rhs[j] = (cxz[j] - bx[j] * bz / sw) / (sj * nf);
            for l in j..p {
                let sl = self.scale[l];
                if sl == 0.0 {
                    continue;
                }
                // Only the upper triangle of `a` was accumulated.
                let g = (a[j * p + l] - bx[j] * bx[l] / sw) / (sj * sl * nf);
                gram[j * p + l] = g;
                gram[l * p + j] = g;
            }
        }

        let mut beta = state.beta.clone();
        coordinate_descent(&gram, &rhs, &mut beta, &self.scale, lambda, alpha);

        let b0 = bz / sw
            - beta
                .iter()
                .enumerate()
                .filter(|(j, _)| self.scale[*j] > 0.0)
                .map(|(j, b)| b * (bx[j] / sw - self.mean[j]) / self.scale[j])
                .sum::<f64>();
        (b0, beta)
    }
}

/// Minimise `½ βᵀGβ − rᵀβ + λ[α‖β‖₁ + (1−α)/2 ‖β‖²]` in place.
fn coordinate_descent(gram: &[f64], rhs: &[f64], beta: &mut [f64], scale: &[f64], lambda: f64, alpha: f64) {
    let p = beta.len();
    let l1 = lambda * alpha;
    let l2 = lambda * (1.0 - alpha);
    // gb = Gβ
    let mut gb = vec![0.0; p];
    for j in 0..p {
        gb[j] = (0..p).map(|k| gram[j * p + k] * beta[k]).sum();
    }
    for _ in 0..INNER_MAX_SWEEPS {
        let mut max_step = 0.0f64;
        for j in 0..p {
            let gjj = gram[j * p + j];
            if scale[j] == 0.0 || gjj + l2 <= 0.0 {
                continue;
            }
            let partial = rhs[j] - gb[j] + gjj * beta[j];
            let new = soft_threshold(partial, l1) / (gjj + l2);
            let delta = new - beta[j];
            if delta != 0.0 {
                beta[j] = new;
                for k in 0..p {
                    gb[k] += gram[k * p + j] * delta;
                }
                max_step = max_step.max(delta.abs() * gjj.sqrt());
            }
        }
        if max_step < INNER_TOL {
            break;
        }
    }
}

fn soft_threshold(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}
