//! Match metadata, event-window resolution, CAR/CAV accumulation and the
//! cross-sectional study driver for both minute and daily frequencies.

use std::collections::BTreeMap;

use chrono::{DateTime, Duration, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::inference::{self, TestResult, WilcoxonOptions};
use crate::models::{self, abnormal_series, fit_model, AbnormalSeries, Channel, EstimationWindow, ModelError, ModelKind};
use crate::parallel::{map_collect, Execution};
use crate::timeseries::{
    format_timestamp, log_returns, log_volume, regularize, BarSeries, Frequency, GapPolicy, LogVolumeSeries, ReturnSeries,
    SeriesError, TimeSeries, TimeSpan,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EventError {
    #[error("event {event_id}: {message}")]
    InvalidEvent { event_id: u32, message: String },
    #[error("event {0} went beyond regulation time but has no regulation_end_utc")]
    MissingRegulationEnd(u32),
    #[error("no series for asset `{0}`")]
    UnknownAsset(String),
    #[error("window {label} is not covered by the abnormal series of event {event_id}")]
    SpanNotCovered { event_id: u32, label: String },
    #[error("no events to aggregate")]
    EmptyInput,
    #[error("events disagree on window layout")]
    WindowMismatch,
    #[error("invalid match schedule: {0}")]
    Schedule(String),
    #[error(transparent)]
    Series(#[from] SeriesError),
    #[error("event {event_id}: {source}")]
    Model { event_id: u32, source: ModelError },
}

pub type Result<T> = std::result::Result<T, EventError>;

mod utc_format {
    use chrono::{DateTime, Utc};
    use serde::{Deserialize, Deserializer, Serializer};

    use crate::timeseries::{format_timestamp, parse_timestamp};

    pub fn serialize<S: Serializer>(ts: &DateTime<Utc>, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&format_timestamp(*ts))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DateTime<Utc>, D::Error> {
        let text = String::deserialize(d)?;
        parse_timestamp(&text).map_err(serde::de::Error::custom)
    }

    pub mod option {
        use super::*;

        pub fn serialize<S: Serializer>(ts: &Option<DateTime<Utc>>, s: S) -> Result<S::Ok, S::Error> {
            match ts {
                Some(ts) => s.serialize_str(&format_timestamp(*ts)),
                None => s.serialize_none(),
            }
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<DateTime<Utc>>, D::Error> {
            Option::<String>::deserialize(d)?
                .map(|t| parse_timestamp(&t).map_err(serde::de::Error::custom))
                .transpose()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Stage {
    #[serde(rename = "group1")]
    Group1,
    #[serde(rename = "group2")]
    Group2,
    #[serde(rename = "group3")]
    Group3,
    #[serde(rename = "round_of_16")]
    RoundOf16,
    #[serde(rename = "quarter_final")]
    QuarterFinal,
    #[serde(rename = "semi_final")]
    SemiFinal,
    #[serde(rename = "final")]
    Final,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Group1,
        Stage::Group2,
        Stage::Group3,
        Stage::RoundOf16,
        Stage::QuarterFinal,
        Stage::SemiFinal,
        Stage::Final,
    ];

    pub fn is_group(self) -> bool {
        matches!(self, Stage::Group1 | Stage::Group2 | Stage::Group3)
    }

    pub fn is_knockout(self) -> bool {
        !self.is_group()
    }

    /// Round of 16 onward.
    pub fn is_high_stake(self) -> bool {
        self.is_knockout()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Group1 => "group1",
            Stage::Group2 => "group2",
            Stage::Group3 => "group3",
            Stage::RoundOf16 => "round_of_16",
            Stage::QuarterFinal => "quarter_final",
            Stage::SemiFinal => "semi_final",
            Stage::Final => "final",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Victory,
    Draw,
    Defeat,
}

impl Outcome {
    pub fn as_str(self) -> &'static str {
        match self {
            Outcome::Victory => "victory",
            Outcome::Draw => "draw",
            Outcome::Defeat => "defeat",
        }
    }
}

/// One match from the fan-token team's perspective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchEvent {
    pub event_id: u32,
    pub token_id: String,
    pub opponent: String,
    pub stage: Stage,
    #[serde(rename = "kickoff_utc", with = "utc_format")]
    pub kickoff: DateTime<Utc>,
    #[serde(rename = "first_half_end_utc", with = "utc_format")]
    pub first_half_end: DateTime<Utc>,
    #[serde(rename = "second_half_start_utc", with = "utc_format")]
    pub second_half_start: DateTime<Utc>,
    /// End of regulation time; required when the match ran past it.
    #[serde(
        rename = "regulation_end_utc",
        with = "utc_format::option",
        default,
        skip_serializing_if = "Option::is_none"
    )]
    pub regulation_end: Option<DateTime<Utc>>,
    /// λ: the instant the match actually ended, extensions and shootout included.
    #[serde(rename = "full_time_end_utc", with = "utc_format")]
    pub full_time_end: DateTime<Utc>,
    pub penalties: bool,
    pub score_for: u32,
    pub score_against: u32,
    pub outcome: Outcome,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub notes: Option<String>,
}

impl MatchEvent {
    pub fn validate(&self) -> Result<()> {
        let bad = |message: &str| EventError::InvalidEvent { event_id: self.event_id, message: message.to_string() };
        if !(self.kickoff < self.first_half_end
            && self.first_half_end < self.second_half_start
            && self.second_half_start < self.full_time_end)
        {
            return Err(bad("segment boundaries must satisfy kickoff < first_half_end < second_half_start < full_time_end"));
        }
        if let Some(reg) = self.regulation_end {
            if !(self.second_half_start < reg && reg <= self.full_time_end) {
                return Err(bad("regulation_end must lie in (second_half_start, full_time_end]"));
            }
        } else if self.penalties {
            return Err(EventError::MissingRegulationEnd(self.event_id));
        }
        let level = self.score_for == self.score_against;
        let consistent = match (self.penalties, self.outcome) {
            (true, Outcome::Draw) => false,
            (true, _) => level,
            (false, Outcome::Victory) => self.score_for > self.score_against,
            (false, Outcome::Draw) => level,
            (false, Outcome::Defeat) => self.score_for < self.score_against,
        };
        if !consistent {
            return Err(bad("outcome inconsistent with score and penalty flag"));
        }
        Ok(())
    }

    pub fn second_half_end(&self) -> DateTime<Utc> {
        self.regulation_end.map_or(self.full_time_end, |r| r.min(self.full_time_end))
    }
}

/// Parses and validates a match-schedule JSON array, sorted by event id.
pub fn parse_schedule(text: &str) -> Result<Vec<MatchEvent>> {
    let mut events: Vec<MatchEvent> = serde_json::from_str(text).map_err(|e| EventError::Schedule(e.to_string()))?;
    events.sort_by_key(|e| e.event_id);
    if let Some(w) = events.windows(2).find(|w| w[0].event_id == w[1].event_id) {
        return Err(EventError::Schedule(format!("duplicate event_id {}", w[0].event_id)));
    }
    for e in &events {
        e.validate()?;
    }
    Ok(events)
}

pub fn emit_schedule(events: &[MatchEvent]) -> String {
    let mut text = serde_json::to_string_pretty(events).expect("schedule serializes");
    text.push('\n');
    text
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowLabel {
    PreMatch,
    FirstHalf,
    HalfTime,
    SecondHalf,
    RegularMatch,
    FullMatch,
    PostMatch,
    /// Inclusive bar offsets relative to the anchor, e.g. days -120..=-1.
    Relative { first: i64, last: i64 },
}

impl WindowLabel {
    pub const MATCH: [WindowLabel; 7] = [
        WindowLabel::PreMatch,
        WindowLabel::FirstHalf,
        WindowLabel::HalfTime,
        WindowLabel::SecondHalf,
        WindowLabel::RegularMatch,
        WindowLabel::FullMatch,
        WindowLabel::PostMatch,
    ];

    pub fn key(&self) -> String {
        match self {
            WindowLabel::PreMatch => "pre_match".into(),
            WindowLabel::FirstHalf => "first_half".into(),
            WindowLabel::HalfTime => "half_time".into(),
            WindowLabel::SecondHalf => "second_half".into(),
            WindowLabel::RegularMatch => "regular_match".into(),
            WindowLabel::FullMatch => "full_match".into(),
            WindowLabel::PostMatch => "post_match".into(),
            WindowLabel::Relative { first, last } => format!("{first}..{last}"),
        }
    }

    pub fn parse(key: &str) -> Option<Self> {
        let label = match key {
            "pre_match" => WindowLabel::PreMatch,
            "first_half" => WindowLabel::FirstHalf,
            "half_time" => WindowLabel::HalfTime,
            "second_half" => WindowLabel::SecondHalf,
            "regular_match" => WindowLabel::RegularMatch,
            "full_match" => WindowLabel::FullMatch,
            "post_match" => WindowLabel::PostMatch,
            other => {
                let (a, b) = other.split_once("..")?;
                WindowLabel::Relative { first: a.parse().ok()?, last: b.parse().ok()? }
            }
        };
        Some(label)
    }
}

impl std::fmt::Display for WindowLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.key())
    }
}

/// A labelled set of half-open spans; match windows have exactly one span
/// unless half-time is carved out of the regular match.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventWindow {
    pub label: WindowLabel,
    pub spans: Vec<TimeSpan>,
}

impl EventWindow {
    pub fn single(label: WindowLabel, start: DateTime<Utc>, end: DateTime<Utc>) -> Self {
        EventWindow { label, spans: vec![TimeSpan::new(start, end)] }
    }

    pub fn start(&self) -> DateTime<Utc> {
        self.spans.iter().map(|s| s.start).min().expect("window has a span")
    }

    pub fn end(&self) -> DateTime<Utc> {
        self.spans.iter().map(|s| s.end).max().expect("window has a span")
    }

    pub fn bar_count(&self, step: Duration) -> usize {
        self.spans.iter().map(|s| s.bar_count(step)).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchWindowConfig {
    pub pre_match_bars: i64,
    pub post_match_bars: i64,
    /// Regular match runs kickoff → end of regulation including the interval;
    /// when false the half-time span is left out.
    pub regular_match_includes_half_time: bool,
}

impl Default for MatchWindowConfig {
    fn default() -> Self {
        MatchWindowConfig { pre_match_bars: 60, post_match_bars: 60, regular_match_includes_half_time: true }
    }
}

/// The seven intra-match windows in reporting order.
pub fn resolve_windows(event: &MatchEvent, config: &MatchWindowConfig, step: Duration) -> Vec<EventWindow> {
    let k = event.kickoff;
    let lambda = event.full_time_end;
    let second_half_end = event.second_half_end();
    let regular = if config.regular_match_includes_half_time {
        vec![TimeSpan::new(k, second_half_end)]
    } else {
        vec![TimeSpan::new(k, event.first_half_end), TimeSpan::new(event.second_half_start, second_half_end)]
    };
    vec![
        EventWindow::single(WindowLabel::PreMatch, k - step * config.pre_match_bars as i32, k),
        EventWindow::single(WindowLabel::FirstHalf, k, event.first_half_end),
        EventWindow::single(WindowLabel::HalfTime, event.first_half_end, event.second_half_start),
        EventWindow::single(WindowLabel::SecondHalf, event.second_half_start, second_half_end),
        EventWindow { label: WindowLabel::RegularMatch, spans: regular },
        EventWindow::single(WindowLabel::FullMatch, k, lambda),
        EventWindow::single(WindowLabel::PostMatch, lambda, lambda + step * config.post_match_bars as i32),
    ]
}

/// Inclusive offset range relative to an anchor, e.g. days 0..=26.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelativeWindow {
    pub first: i64,
    pub last: i64,
}

impl RelativeWindow {
    pub fn new(first: i64, last: i64) -> Self {
        assert!(first <= last, "relative window {first}..{last} is empty");
        RelativeWindow { first, last }
    }

    /// Windows reported around a tournament start at day 0.
    pub fn tournament_defaults() -> Vec<RelativeWindow> {
        vec![
            RelativeWindow::new(-120, -1),
            RelativeWindow::new(-60, -1),
            RelativeWindow::new(-30, -1),
            RelativeWindow::new(0, 26),
            RelativeWindow::new(27, 56),
        ]
    }

    pub fn resolve(&self, anchor: DateTime<Utc>, step: Duration) -> EventWindow {
        EventWindow::single(
            WindowLabel::Relative { first: self.first, last: self.last },
            anchor + step * self.first as i32,
            anchor + step * (self.last + 1) as i32,
        )
    }
}

impl std::str::FromStr for RelativeWindow {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let (a, b) = s.split_once("..").ok_or_else(|| format!("expected first..last, got `{s}`"))?;
        let first: i64 = a.trim().parse().map_err(|e| format!("bad window start `{a}`: {e}"))?;
        let last: i64 = b.trim().parse().map_err(|e| format!("bad window end `{b}`: {e}"))?;
        if first > last {
            return Err(format!("window {first}..{last} is empty"));
        }
        Ok(RelativeWindow { first, last })
    }
}

/// An event as the study driver sees it: an anchor for estimation and the
/// windows to accumulate over.
#[derive(Debug, Clone, PartialEq)]
pub struct StudyEvent {
    pub event_id: u32,
    pub token_id: String,
    pub anchor: DateTime<Utc>,
    pub windows: Vec<EventWindow>,
}

impl StudyEvent {
    pub fn from_match(event: &MatchEvent, config: &MatchWindowConfig, frequency: Frequency) -> Self {
        StudyEvent {
            event_id: event.event_id,
            token_id: event.token_id.clone(),
            anchor: event.kickoff,
            windows: resolve_windows(event, config, frequency.step()),
        }
    }

    pub fn relative(
        event_id: u32,
        token_id: impl Into<String>,
        anchor: DateTime<Utc>,
        windows: &[RelativeWindow],
        frequency: Frequency,
    ) -> Self {
        let step = frequency.step();
        StudyEvent {
            event_id,
            token_id: token_id.into(),
            anchor,
            windows: windows.iter().map(|w| w.resolve(anchor, step)).collect(),
        }
    }

    /// Smallest span covering every window.
    pub fn span(&self) -> TimeSpan {
        let start = self.windows.iter().map(EventWindow::start).min().expect("event has windows");
        let end = self.windows.iter().map(EventWindow::end).max().expect("event has windows");
        TimeSpan::new(start, end)
    }
}

fn window_sum(abnormal: &AbnormalSeries, window: &EventWindow, pick: impl Fn(&models::AbnormalPoint) -> f64) -> Result<f64> {
    let not_covered = || EventError::SpanNotCovered { event_id: abnormal.event_id, label: window.label.key() };
    let mut total = 0.0;
    for span in &window.spans {
        let n = span.bar_count(abnormal.step);
        if n == 0 {
            continue;
        }
        let first = abnormal.index_of(span.start).ok_or_else(not_covered)?;
        if first + n > abnormal.points.len() {
            return Err(not_covered());
        }
        total += abnormal.points[first..first + n].iter().map(&pick).sum::<f64>();
    }
    Ok(total)
}

/// Cumulative abnormal return over the window.
pub fn car(abnormal: &AbnormalSeries, window: &EventWindow) -> Result<f64> {
    window_sum(abnormal, window, |p| p.abnormal_return)
}

/// Cumulative abnormal log-volume over the window.
pub fn cav(abnormal: &AbnormalSeries, window: &EventWindow) -> Result<f64> {
    window_sum(abnormal, window, |p| p.abnormal_log_volume)
}

fn window_references(abnormal: &AbnormalSeries, window: &EventWindow, pick: impl Fn(&models::AbnormalPoint) -> f64) -> Vec<f64> {
    let mut out = Vec::new();
    for span in &window.spans {
        let n = span.bar_count(abnormal.step);
        if let Some(first) = abnormal.index_of(span.start) {
            out.extend(abnormal.points[first..(first + n).min(abnormal.points.len())].iter().map(&pick));
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CaarSummary {
    pub caar: f64,
    /// Sample standard deviation over sqrt(N); `None` for a single event.
    pub standard_error: Option<f64>,
    pub n: usize,
}

impl CaarSummary {
    pub fn is_degenerate(&self) -> bool {
        self.standard_error.is_none()
    }
}

/// Cross-event average of CARs.
pub fn caar(cars: &[f64]) -> Result<CaarSummary> {
    if cars.is_empty() {
        return Err(EventError::EmptyInput);
    }
    let n = cars.len();
    let identical = cars.iter().all(|c| *c == cars[0]);
    let standard_error = (n > 1).then(|| if identical { 0.0 } else { inference::sample_stddev(cars) / (n as f64).sqrt() });
    Ok(CaarSummary { caar: inference::mean(cars), standard_error, n })
}

/// Per-event, per-window outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventOutcomeRow {
    pub event_id: u32,
    pub token_id: String,
    pub window: WindowLabel,
    pub bars: usize,
    pub car: f64,
    pub cav: f64,
    /// CAR over its forecast-error standard deviation; `None` when that is 0.
    pub scar: Option<f64>,
    pub scav: Option<f64>,
}

/// Aggregate statistics for one channel of one window.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: f64,
    pub se: Option<f64>,
    pub t_stat: Option<f64>,
    pub t_p: Option<f64>,
    pub z_stat: Option<f64>,
    pub z_p: Option<f64>,
    pub pos_share: f64,
    pub boehmer_stat: Option<f64>,
    pub boehmer_p: Option<f64>,
    pub n: usize,
}

impl ChannelStats {
    pub fn compute(values: &[f64], standardized: &[f64], wilcoxon: WilcoxonOptions) -> Result<Self> {
        let summary = caar(values)?;
        let split = |r: Option<TestResult>| (r.map(|r| r.statistic), r.map(|r| r.p_value));
        let (t_stat, t_p) = split(inference::t_test_cross_sectional(values).ok());
        let (z_stat, z_p) = split(inference::wilcoxon_signed_rank_with(values, wilcoxon).ok());
        let (boehmer_stat, boehmer_p) = split(inference::boehmer_test(standardized).ok());
        Ok(ChannelStats {
            mean: summary.caar,
            se: summary.standard_error,
            t_stat,
            t_p,
            z_stat,
            z_p,
            pos_share: inference::positive_share(values).map_err(|_| EventError::EmptyInput)?,
            boehmer_stat,
            boehmer_p,
            n: summary.n,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyRow {
    pub window: WindowLabel,
    pub model: ModelKind,
    pub returns: ChannelStats,
    pub volume: ChannelStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExcludedEvent {
    pub event_id: u32,
    pub token_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyTable {
    pub model: ModelKind,
    pub frequency: Frequency,
    pub rows: Vec<StudyRow>,
    pub events: Vec<EventOutcomeRow>,
    pub excluded: Vec<ExcludedEvent>,
}

/// Return and log-volume series for one asset on its regular grid.
#[derive(Debug, Clone)]
pub struct AssetData {
    pub returns: ReturnSeries,
    pub log_volume: LogVolumeSeries,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub frequency: Frequency,
    pub assets: BTreeMap<String, AssetData>,
}

impl Dataset {
    /// Regularizes each series over its own observed range and derives both channels.
    pub fn from_bars(series: &[BarSeries], policy: GapPolicy, volume_shift: f64) -> Result<Self> {
        let frequency = series.first().map_or(Frequency::Minute, |s| s.frequency());
        let mut assets = BTreeMap::new();
        for s in series {
            if s.frequency() != frequency {
                return Err(EventError::Schedule(format!("asset {} has a different bar frequency", s.asset_id())));
            }
            let (Some(start), Some(end)) = (s.first_timestamp(), s.last_timestamp()) else {
                return Err(EventError::Series(SeriesError::SeriesTooShort { needed: 2, actual: 0 }));
            };
            let grid = regularize(s, start, end, policy)?;
            assets.insert(
                s.asset_id().to_string(),
                AssetData { returns: log_returns(&grid)?, log_volume: log_volume(&grid, volume_shift)? },
            );
        }
        Ok(Dataset { frequency, assets })
    }

    fn asset(&self, id: &str) -> Result<&AssetData> {
        self.assets.get(id).ok_or_else(|| EventError::UnknownAsset(id.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyConfig {
    pub estimation: EstimationWindow,
    pub wilcoxon: WilcoxonOptions,
    pub execution: Execution,
}

impl StudyConfig {
    pub fn for_frequency(frequency: Frequency) -> Self {
        StudyConfig {
            estimation: EstimationWindow::for_frequency(frequency),
            wilcoxon: WilcoxonOptions::default(),
            execution: Execution::default(),
        }
    }
}

pub fn match_study_events(matches: &[MatchEvent], config: &MatchWindowConfig, frequency: Frequency) -> Vec<StudyEvent> {
    matches.iter().map(|m| StudyEvent::from_match(m, config, frequency)).collect()
}

enum EventResult {
    Included(Vec<EventOutcomeRow>),
    Excluded(ExcludedEvent),
}

fn is_exclusion(err: &ModelError) -> bool {
    matches!(err, ModelError::InsufficientCoverage { .. } | ModelError::TooFewObservations { .. })
}

fn process_event(dataset: &Dataset, event: &StudyEvent, model: &ModelKind, config: &StudyConfig) -> Result<EventResult> {
    let subject = dataset.asset(&event.token_id)?;
    let reference = model.reference().map(|r| dataset.asset(r)).transpose()?;
    let ref_returns = reference.map(|r| &r.returns as &dyn TimeSeries);
    let ref_volume = reference.map(|r| &r.log_volume as &dyn TimeSeries);
    let wrap = |source: ModelError| EventError::Model { event_id: event.event_id, source };

    let fits = fit_model(&subject.returns, ref_returns, &config.estimation, event.anchor, model).and_then(|fr| {
        fit_model(&subject.log_volume, ref_volume, &config.estimation, event.anchor, model).map(|fv| (fr, fv))
    });
    let (fit_return, fit_volume) = match fits {
        Ok(f) => f,
        Err(e) if is_exclusion(&e) => {
            return Ok(EventResult::Excluded(ExcludedEvent {
                event_id: event.event_id,
                token_id: event.token_id.clone(),
                reason: e.to_string(),
            }))
        }
        Err(e) => return Err(wrap(e)),
    };

    let abnormal = abnormal_series(
        event.event_id,
        event.span(),
        Channel { dependent: &subject.returns, reference: ref_returns, fit: &fit_return },
        Channel { dependent: &subject.log_volume, reference: ref_volume, fit: &fit_volume },
    )
    .map_err(wrap)?;

    let step = dataset.frequency.step();
    let mut rows = Vec::with_capacity(event.windows.len());
    for window in &event.windows {
        let car_value = car(&abnormal, window)?;
        let cav_value = cav(&abnormal, window)?;
        let sd_r = fit_return.cumulative_forecast_stddev(&window_references(&abnormal, window, |p| p.reference_return));
        let sd_v = fit_volume.cumulative_forecast_stddev(&window_references(&abnormal, window, |p| p.reference_log_volume));
        rows.push(EventOutcomeRow {
            event_id: event.event_id,
            token_id: event.token_id.clone(),
            window: window.label,
            bars: window.bar_count(step),
            car: car_value,
            cav: cav_value,
            scar: (sd_r > 0.0).then(|| car_value / sd_r),
            scav: (sd_v > 0.0).then(|| cav_value / sd_v),
        });
    }
    Ok(EventResult::Included(rows))
}

/// Runs one model over all events: per-event work in parallel, aggregation
/// as an ordered fold by event id.
pub fn run_event_study(dataset: &Dataset, events: &[StudyEvent], model: &ModelKind, config: &StudyConfig) -> Result<StudyTable> {
    if events.is_empty() {
        return Err(EventError::EmptyInput);
    }
    let labels: Vec<WindowLabel> = events[0].windows.iter().map(|w| w.label).collect();
    if events.iter().any(|e| !e.windows.iter().map(|w| w.label).eq(labels.iter().copied())) {
        return Err(EventError::WindowMismatch);
    }

    let mut ordered: Vec<&StudyEvent> = events.iter().collect();
    ordered.sort_by_key(|e| e.event_id);
    let results = map_collect(config.execution, &ordered, |e| process_event(dataset, e, model, config));

    let mut per_event = Vec::new();
    let mut excluded = Vec::new();
    for result in results {
        match result? {
            EventResult::Included(rows) => per_event.push(rows),
            EventResult::Excluded(x) => excluded.push(x),
        }
    }

    let mut rows = Vec::with_capacity(labels.len());
    if !per_event.is_empty() {
        for (w, label) in labels.iter().enumerate() {
            let column = |f: fn(&EventOutcomeRow) -> f64| per_event.iter().map(|r| f(&r[w])).collect::<Vec<f64>>();
            let scars: Vec<f64> = per_event.iter().filter_map(|r| r[w].scar).collect();
            let scavs: Vec<f64> = per_event.iter().filter_map(|r| r[w].scav).collect();
            rows.push(StudyRow {
                window: *label,
                model: model.clone(),
                returns: ChannelStats::compute(&column(|r| r.car), &scars, config.wilcoxon)?,
                volume: ChannelStats::compute(&column(|r| r.cav), &scavs, config.wilcoxon)?,
            });
        }
    }

    Ok(StudyTable {
        model: model.clone(),
        frequency: dataset.frequency,
        rows,
        events: per_event.into_iter().flatten().collect(),
        excluded,
    })
}

/// Timestamp helper for diagnostics.
pub fn describe_span(span: &TimeSpan) -> String {
    format!("[{}, {})", format_timestamp(span.start), format_timestamp(span.end))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{AbnormalPoint, ModelFit};
    use chrono::TimeZone;

    fn kickoff() -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2022, 12, 18, 15, 0, 0).unwrap()
    }

    fn plain_match() -> MatchEvent {
        let k = kickoff();
        MatchEvent {
            event_id: 1,
            token_id: "ARG".into(),
            opponent: "Saudi Arabia".into(),
            stage: Stage::Group1,
            kickoff: k,
            first_half_end: k + Duration::minutes(48),
            second_half_start: k + Duration::minutes(63),
            regulation_end: None,
            full_time_end: k + Duration::minutes(112),
            penalties: false,
            score_for: 1,
            score_against: 2,
            outcome: Outcome::Defeat,
            notes: None,
        }
    }

    fn final_with_penalties() -> MatchEvent {
        let k = kickoff();
        MatchEvent {
            event_id: 21,
            opponent: "France".into(),
            stage: Stage::Final,
            regulation_end: Some(k + Duration::minutes(116)),
            full_time_end: k + Duration::minutes(175),
            penalties: true,
            score_for: 3,
            score_against: 3,
            outcome: Outcome::Victory,
            ..plain_match()
        }
    }

    fn flat_abnormal(values: &[f64], start: DateTime<Utc>) -> AbnormalSeries {
        let fit = ModelFit {
            kind: ModelKind::ConstantMean,
            alpha: 0.0,
            beta: 0.0,
            residual_stddev: 1.0,
            n_obs: 10,
            reference_mean: 0.0,
            reference_ss: 0.0,
        };
        AbnormalSeries {
            event_id: 1,
            step: Duration::minutes(1),
            points: values
                .iter()
                .enumerate()
                .map(|(i, v)| AbnormalPoint {
                    timestamp: start + Duration::minutes(i as i64),
                    abnormal_return: *v,
                    abnormal_log_volume: *v / 2.0,
                    reference_return: 0.0,
                    reference_log_volume: 0.0,
                })
                .collect(),
            fit_return: fit.clone(),
            fit_volume: fit,
        }
    }

    #[test]
    fn windows_for_plain_match() {
        let e = plain_match();
        e.validate().unwrap();
        let w = resolve_windows(&e, &MatchWindowConfig::default(), Duration::minutes(1));
        let step = Duration::minutes(1);
        assert_eq!(w.len(), 7);
        assert_eq!(w[0].bar_count(step), 60);
        assert_eq!(w[5].label, WindowLabel::FullMatch);
        assert_eq!(w[5].bar_count(step), 112);
        assert_eq!(w[6].start(), kickoff() + Duration::minutes(112));
        assert_eq!(w[6].end(), kickoff() + Duration::minutes(172));
        assert_eq!(w[4].spans, w[5].spans);
        for other in [&w[0], &w[6]] {
            assert!(!other.spans[0].overlaps(&w[5].spans[0]));
        }
    }

    #[test]
    fn windows_with_extra_time() {
        let e = final_with_penalties();
        e.validate().unwrap();
        let w = resolve_windows(&e, &MatchWindowConfig::default(), Duration::minutes(1));
        assert!(w[4].end() < e.full_time_end);
        assert_eq!(w[5].end(), e.full_time_end);
        assert_eq!(w[3].end(), w[4].end());

        let no_ht = MatchWindowConfig { regular_match_includes_half_time: false, ..Default::default() };
        let w2 = resolve_windows(&e, &no_ht, Duration::minutes(1));
        assert_eq!(w2[4].spans.len(), 2);
        assert_eq!(
            w2[4].bar_count(Duration::minutes(1)),
            w[1].bar_count(Duration::minutes(1)) + w[3].bar_count(Duration::minutes(1))
        );
    }

    #[test]
    fn event_validation() {
        let mut e = plain_match();
        e.outcome = Outcome::Victory;
        assert!(e.validate().is_err());
        let mut e = final_with_penalties();
        e.regulation_end = None;
        assert_eq!(e.validate(), Err(EventError::MissingRegulationEnd(21)));
        let mut e = final_with_penalties();
        e.outcome = Outcome::Draw;
        assert!(e.validate().is_err());
        let mut e = plain_match();
        e.second_half_start = e.first_half_end;
        assert!(e.validate().is_err());
    }

    #[test]
    fn schedule_json_round_trip() {
        let events = vec![plain_match(), final_with_penalties()];
        let text = emit_schedule(&events);
        assert!(text.contains("\"kickoff_utc\": \"2022-12-18T15:00:00Z\""));
        assert!(text.contains("\"stage\": \"group1\""));
        let back = parse_schedule(&text).unwrap();
        assert_eq!(back, events);
        let dup = emit_schedule(&[plain_match(), plain_match()]);
        assert!(matches!(parse_schedule(&dup), Err(EventError::Schedule(_))));
    }

    #[test]
    fn car_examples() {
        let start = kickoff();
        let ab = flat_abnormal(&[0.0; 10], start);
        let w = EventWindow::single(WindowLabel::FirstHalf, start, start + Duration::minutes(10));
        assert_eq!(car(&ab, &w).unwrap(), 0.0);

        let ab = flat_abnormal(&[9.0, 1.0, 2.0, 3.0, 9.0], start);
        let w = EventWindow::single(WindowLabel::FirstHalf, start + Duration::minutes(1), start + Duration::minutes(4));
        assert_eq!(car(&ab, &w).unwrap(), 6.0);

        let w1 = EventWindow::single(WindowLabel::FirstHalf, start, start + Duration::minutes(2));
        let w2 = EventWindow::single(WindowLabel::SecondHalf, start + Duration::minutes(2), start + Duration::minutes(5));
        let w = EventWindow::single(WindowLabel::FullMatch, start, start + Duration::minutes(5));
        assert_eq!(car(&ab, &w).unwrap(), car(&ab, &w1).unwrap() + car(&ab, &w2).unwrap());

        let outside = EventWindow::single(WindowLabel::PostMatch, start + Duration::minutes(3), start + Duration::minutes(7));
        assert!(matches!(car(&ab, &outside), Err(EventError::SpanNotCovered { .. })));
    }

    #[test]
    fn cav_examples() {
        let start = kickoff();
        let w = EventWindow::single(WindowLabel::PreMatch, start, start + Duration::minutes(60));
        let ab = flat_abnormal(&[0.0; 60], start);
        assert_eq!(cav(&ab, &w).unwrap(), 0.0);
        let ab = flat_abnormal(&[1.0; 60], start);
        assert_eq!(cav(&ab, &w).unwrap(), 30.0);
    }

    #[test]
    fn caar_examples() {
        let s = caar(&[2.0, 4.0]).unwrap();
        assert_eq!(s.caar, 3.0);
        assert_eq!(s.standard_error, Some(2f64.sqrt() / 2f64.sqrt()));
        let s = caar(&[1.5]).unwrap();
        assert_eq!(s.caar, 1.5);
        assert!(s.is_degenerate());
        let s = caar(&[0.7; 6]).unwrap();
        assert_eq!(s.standard_error, Some(0.0));
        assert!((s.caar - 0.7).abs() < 1e-15);
        assert_eq!(caar(&[]), Err(EventError::EmptyInput));
    }

    #[test]
    fn relative_windows() {
        let anchor = Utc.with_ymd_and_hms(2022, 11, 20, 0, 0, 0).unwrap();
        let day = Duration::days(1);
        let ws: Vec<EventWindow> = RelativeWindow::tournament_defaults().iter().map(|w| w.resolve(anchor, day)).collect();
        let lens: Vec<usize> = ws.iter().map(|w| w.bar_count(day)).collect();
        assert_eq!(lens, vec![120, 60, 30, 27, 30]);
        assert_eq!(ws[3].start(), anchor);
        assert_eq!(WindowLabel::parse("-120..-1"), Some(ws[0].label));
        assert_eq!("27..56".parse::<RelativeWindow>().unwrap(), RelativeWindow::new(27, 56));
        assert!("5..1".parse::<RelativeWindow>().is_err());
    }

    #[test]
    fn label_keys_round_trip() {
        for l in WindowLabel::MATCH {
            assert_eq!(WindowLabel::parse(&l.key()), Some(l));
        }
    }
}
