//! Expectation models fitted over a pre-event estimation window, and the
//! abnormal series they imply.
//!
//! The same [`ModelKind`] is applied to both channels: returns are modelled on
//! the reference asset's returns, log-volume on the reference log-volume.

use chrono::{DateTime, Duration, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::timeseries::{format_timestamp, Frequency, TimeSeries, TimeSpan};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("estimation window has {valid} valid of {expected} bars, below required coverage {required}")]
    InsufficientCoverage { valid: usize, expected: usize, required: f64 },
    #[error("need at least {needed} estimation observations, have {actual}")]
    TooFewObservations { needed: usize, actual: usize },
    #[error("reference series has zero variance over the estimation window")]
    DegenerateRegressor,
    #[error("market model needs a reference series for `{0}`")]
    MissingReference(String),
    #[error("reference series `{found}` does not match model reference `{expected}`")]
    ReferenceMismatch { expected: String, found: String },
    #[error("market model reference `{0}` must differ from the subject asset")]
    SameAsReference(String),
    #[error("series frequencies do not match")]
    FrequencyMismatch,
    #[error("invalid estimation window: {0}")]
    InvalidWindow(String),
    #[error("no {series} observation at {timestamp} inside the event span")]
    SpanNotCovered { series: String, timestamp: String },
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "reference")]
pub enum ModelKind {
    ConstantMean,
    MarketModel(String),
}

impl ModelKind {
    pub fn market(reference: impl Into<String>) -> Self {
        ModelKind::MarketModel(reference.into())
    }

    pub fn reference(&self) -> Option<&str> {
        match self {
            ModelKind::ConstantMean => None,
            ModelKind::MarketModel(r) => Some(r),
        }
    }

    /// Stable text form, also accepted by `FromStr`: `constant_mean` or `market:<asset>`.
    pub fn label(&self) -> String {
        match self {
            ModelKind::ConstantMean => "constant_mean".to_string(),
            ModelKind::MarketModel(r) => format!("market:{r}"),
        }
    }

    pub fn n_params(&self) -> usize {
        match self {
            ModelKind::ConstantMean => 1,
            ModelKind::MarketModel(_) => 2,
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.label())
    }
}

impl std::str::FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let s = s.trim();
        if s == "constant_mean" || s == "constant" {
            return Ok(ModelKind::ConstantMean);
        }
        match s.strip_prefix("market:") {
            Some(r) if !r.is_empty() => Ok(ModelKind::market(r)),
            _ => Err(format!("unknown model `{s}` (expected constant_mean or market:<asset>)")),
        }
    }
}

/// Estimation window in bar offsets relative to the event anchor, both ends inclusive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimationWindow {
    start_offset: i64,
    end_offset: i64,
    min_coverage: f64,
    #[serde(default)]
    exclusions: Vec<TimeSpan>,
}

impl EstimationWindow {
    pub fn new(start_offset: i64, end_offset: i64, min_coverage: f64) -> Result<Self> {
        if !(start_offset < end_offset && end_offset < 0) {
            return Err(ModelError::InvalidWindow(format!(
                "offsets must satisfy start < end < 0, got {start_offset}..{end_offset}"
            )));
        }
        if !(0.0..=1.0).contains(&min_coverage) {
            return Err(ModelError::InvalidWindow(format!("min_coverage {min_coverage} outside [0, 1]")));
        }
        Ok(EstimationWindow { start_offset, end_offset, min_coverage, exclusions: Vec::new() })
    }

    /// Bars -1,500 ..= -61 before kickoff: one day ending an hour ahead of the match.
    pub fn minute_default() -> Self {
        EstimationWindow { start_offset: -1500, end_offset: -61, min_coverage: 0.8, exclusions: Vec::new() }
    }

    /// 200 daily bars ending the bar before day -120.
    pub fn daily_default() -> Self {
        EstimationWindow { start_offset: -320, end_offset: -121, min_coverage: 0.8, exclusions: Vec::new() }
    }

    pub fn for_frequency(freq: Frequency) -> Self {
        match freq {
            Frequency::Minute => Self::minute_default(),
            Frequency::Day => Self::daily_default(),
        }
    }

    /// Masks spans (e.g. an earlier match of the same token) out of the fit.
    pub fn with_exclusions(mut self, spans: Vec<TimeSpan>) -> Self {
        self.exclusions = spans;
        self
    }

    pub fn with_min_coverage(mut self, min_coverage: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&min_coverage) {
            return Err(ModelError::InvalidWindow(format!("min_coverage {min_coverage} outside [0, 1]")));
        }
        self.min_coverage = min_coverage;
        Ok(self)
    }

    pub fn start_offset(&self) -> i64 {
        self.start_offset
    }

    pub fn end_offset(&self) -> i64 {
        self.end_offset
    }

    pub fn min_coverage(&self) -> f64 {
        self.min_coverage
    }

    pub fn exclusions(&self) -> &[TimeSpan] {
        &self.exclusions
    }

    pub fn len(&self) -> usize {
        (self.end_offset - self.start_offset + 1) as usize
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Grid timestamps of the window for `anchor`, minus exclusions.
    pub fn timestamps(&self, anchor: DateTime<Utc>, step: Duration) -> impl Iterator<Item = DateTime<Utc>> + '_ {
        (self.start_offset..=self.end_offset)
            .map(move |k| anchor + step * (k as i32))
            .filter(move |t| !self.exclusions.iter().any(|s| s.contains(*t)))
    }
}

/// Fitted expectation model for one (asset, event, channel).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFit {
    pub kind: ModelKind,
    pub alpha: f64,
    pub beta: f64,
    pub residual_stddev: f64,
    pub n_obs: usize,
    /// Mean of the reference over the estimation window (0 for constant mean).
    pub reference_mean: f64,
    /// Sum of squared reference deviations over the window (0 for constant mean).
    pub reference_ss: f64,
}

impl ModelFit {
    pub fn expected(&self, reference: f64) -> f64 {
        self.alpha + self.beta * reference
    }

    /// Standard deviation of the sum of `L` out-of-sample prediction errors.
    ///
    /// `sigma^2 * (L + L^2/T + (sum_t (x_t - xbar))^2 / Sxx)`; the last term is
    /// dropped for the constant-mean model.
    pub fn cumulative_forecast_stddev(&self, window_reference: &[f64]) -> f64 {
        let l = window_reference.len() as f64;
        let t = self.n_obs as f64;
        let mut var = l + l * l / t;
        if let ModelKind::MarketModel(_) = self.kind {
            if self.reference_ss > 0.0 {
                let dev: f64 = window_reference.iter().map(|x| x - self.reference_mean).sum();
                var += dev * dev / self.reference_ss;
            }
        }
        self.residual_stddev * var.sqrt()
    }
}

fn check_reference<'a>(
    dependent: &dyn TimeSeries,
    reference: Option<&'a dyn TimeSeries>,
    kind: &ModelKind,
) -> Result<Option<&'a dyn TimeSeries>> {
    match kind {
        ModelKind::ConstantMean => Ok(None),
        ModelKind::MarketModel(name) => {
            if name == dependent.asset_id() {
                return Err(ModelError::SameAsReference(name.clone()));
            }
            let r = reference.ok_or_else(|| ModelError::MissingReference(name.clone()))?;
            if r.asset_id() != name {
                return Err(ModelError::ReferenceMismatch { expected: name.clone(), found: r.asset_id().to_string() });
            }
            if r.frequency() != dependent.frequency() {
                return Err(ModelError::FrequencyMismatch);
            }
            Ok(Some(r))
        }
    }
}

/// Fits `kind` to `dependent` over `window` anchored at `anchor`.
///
/// Coverage counts grid steps whose bars (subject and, for the market model,
/// reference) were observed rather than gap-filled. All present pairs enter
/// the fit, including forward-filled ones.
pub fn fit_model(
    dependent: &dyn TimeSeries,
    reference: Option<&dyn TimeSeries>,
    window: &EstimationWindow,
    anchor: DateTime<Utc>,
    kind: &ModelKind,
) -> Result<ModelFit> {
    let reference = check_reference(dependent, reference, kind)?;
    let step = dependent.frequency().step();

    let mut ys = Vec::with_capacity(window.len());
    let mut xs = Vec::with_capacity(window.len());
    let mut expected = 0usize;
    let mut valid = 0usize;
    for t in window.timestamps(anchor, step) {
        expected += 1;
        let Some(y) = dependent.get(t) else { continue };
        match reference {
            None => {
                ys.push(y.value);
                valid += y.is_observed() as usize;
            }
            Some(r) => {
                let Some(x) = r.get(t) else { continue };
                ys.push(y.value);
                xs.push(x.value);
                valid += (y.is_observed() && x.is_observed()) as usize;
            }
        }
    }

    if expected == 0 || (valid as f64) < window.min_coverage * expected as f64 {
        return Err(ModelError::InsufficientCoverage { valid, expected, required: window.min_coverage });
    }
    let needed = kind.n_params() + 1;
    if ys.len() < needed {
        return Err(ModelError::TooFewObservations { needed, actual: ys.len() });
    }

    match reference {
        None => Ok(constant_mean_fit(&ys)),
        Some(_) => market_model_fit(&ys, &xs, kind.clone()),
    }
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn constant_mean_fit(ys: &[f64]) -> ModelFit {
    let n = ys.len();
    let alpha = mean(ys);
    let ssr: f64 = ys.iter().map(|y| (y - alpha).powi(2)).sum();
    ModelFit {
        kind: ModelKind::ConstantMean,
        alpha,
        beta: 0.0,
        residual_stddev: (ssr / (n - 1) as f64).sqrt(),
        n_obs: n,
        reference_mean: 0.0,
        reference_ss: 0.0,
    }
}

/// Simple regression with intercept on centred sums.
fn market_model_fit(ys: &[f64], xs: &[f64], kind: ModelKind) -> Result<ModelFit> {
    let n = ys.len();
    let x_mean = mean(xs);
    let y_mean = mean(ys);
    let (mut sxx, mut sxy) = (0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let dx = x - x_mean;
        sxx += dx * dx;
        sxy += dx * (y - y_mean);
    }
    let scale = xs.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let floor = n as f64 * (4.0 * f64::EPSILON * scale).powi(2);
    if sxx.is_nan() || sxx <= floor {
        return Err(ModelError::DegenerateRegressor);
    }
    let beta = sxy / sxx;
    let alpha = y_mean - beta * x_mean;
    let ssr: f64 = xs.iter().zip(ys).map(|(x, y)| (y - alpha - beta * x).powi(2)).sum();
    Ok(ModelFit {
        kind,
        alpha,
        beta,
        residual_stddev: (ssr / (n - 2) as f64).sqrt(),
        n_obs: n,
        reference_mean: x_mean,
        reference_ss: sxx,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AbnormalPoint {
    pub timestamp: DateTime<Utc>,
    pub abnormal_return: f64,
    pub abnormal_log_volume: f64,
    /// Reference values the expectation was evaluated at (0 for constant mean).
    pub reference_return: f64,
    pub reference_log_volume: f64,
}

/// Per-bar abnormal return and abnormal log-volume over one event span.
#[derive(Debug, Clone, PartialEq)]
pub struct AbnormalSeries {
    pub event_id: u32,
    pub step: Duration,
    pub points: Vec<AbnormalPoint>,
    pub fit_return: ModelFit,
    pub fit_volume: ModelFit,
}

impl AbnormalSeries {
    pub fn span(&self) -> Option<TimeSpan> {
        Some(TimeSpan::new(self.points.first()?.timestamp, self.points.last()?.timestamp + self.step))
    }

    /// Index of `ts` on the regular grid, if covered.
    pub fn index_of(&self, ts: DateTime<Utc>) -> Option<usize> {
        let first = self.points.first()?.timestamp;
        if ts < first {
            return None;
        }
        let offset = (ts - first).num_seconds();
        let step = self.step.num_seconds();
        if offset % step != 0 {
            return None;
        }
        let idx = (offset / step) as usize;
        (idx < self.points.len()).then_some(idx)
    }
}

/// One channel's inputs to [`abnormal_series`].
#[derive(Clone, Copy)]
pub struct Channel<'a> {
    pub dependent: &'a dyn TimeSeries,
    pub reference: Option<&'a dyn TimeSeries>,
    pub fit: &'a ModelFit,
}

impl Channel<'_> {
    fn evaluate(&self, t: DateTime<Utc>) -> Result<(f64, f64)> {
        let missing = |name: &str| ModelError::SpanNotCovered {
            series: name.to_string(),
            timestamp: format_timestamp(t),
        };
        let y = self.dependent.get(t).ok_or_else(|| missing(self.dependent.asset_id()))?.value;
        let x = match (&self.fit.kind, self.reference) {
            (ModelKind::ConstantMean, _) => 0.0,
            (ModelKind::MarketModel(name), None) => return Err(ModelError::MissingReference(name.clone())),
            (ModelKind::MarketModel(_), Some(r)) => r.get(t).ok_or_else(|| missing(r.asset_id()))?.value,
        };
        Ok((y - self.fit.expected(x), x))
    }
}

/// Observed minus fitted at every grid step of `span`.
pub fn abnormal_series(event_id: u32, span: TimeSpan, returns: Channel<'_>, volume: Channel<'_>) -> Result<AbnormalSeries> {
    let freq = returns.dependent.frequency();
    if volume.dependent.frequency() != freq {
        return Err(ModelError::FrequencyMismatch);
    }
    let step = freq.step();
    let mut points = Vec::with_capacity(span.bar_count(step));
    for t in span.steps(step) {
        let (ar, rr) = returns.evaluate(t)?;
        let (av, rv) = volume.evaluate(t)?;
        points.push(AbnormalPoint {
            timestamp: t,
            abnormal_return: ar,
            abnormal_log_volume: av,
            reference_return: rr,
            reference_log_volume: rv,
        });
    }
    Ok(AbnormalSeries {
        event_id,
        step,
        points,
        fit_return: returns.fit.clone(),
        fit_volume: volume.fit.clone(),
    })
}
