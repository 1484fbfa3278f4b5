//! Bar ingestion, grid regularization, and the return / log-volume transforms.
//!
//! Bars are labelled by the instant their interval opens, so the return stored
//! at timestamp `t` is the move from the close of bar `t - step` to the close
//! of bar `t`. Every downstream window is half-open and sums exactly the moves
//! that happened inside it.

use chrono::{DateTime, Duration, NaiveDateTime, Timelike, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const TIMESTAMP_FORMAT: &str = "%Y-%m-%dT%H:%M:%SZ";
pub const BAR_CSV_HEADER: [&str; 3] = ["timestamp", "close", "volume"];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SeriesError {
    #[error("expected header `timestamp,close,volume`, found `{0}`")]
    InvalidHeader(String),
    #[error("row {row}: {message}")]
    ParseError { row: usize, message: String },
    #[error("row {row}: duplicate timestamp {timestamp}")]
    DuplicateTimestamp { row: usize, timestamp: String },
    #[error("row {row}: timestamp {timestamp} precedes the previous row")]
    UnorderedInput { row: usize, timestamp: String },
    #[error("row {row}: close must be finite and strictly positive, got {close}")]
    InvalidPrice { row: usize, close: f64 },
    #[error("row {row}: volume must be finite and non-negative, got {volume}")]
    InvalidVolume { row: usize, volume: f64 },
    #[error("timestamp {0} is not aligned to the bar frequency")]
    Misaligned(String),
    #[error("no observation at or before grid start {0}")]
    LeadingGap(String),
    #[error("grid start {start} is after grid end {end}")]
    InvalidRange { start: String, end: String },
    #[error("series needs at least {needed} bars, has {actual}")]
    SeriesTooShort { needed: usize, actual: usize },
    #[error("volume shift constant must be strictly positive, got {0}")]
    NonPositiveShift(f64),
}

pub type Result<T> = std::result::Result<T, SeriesError>;

pub fn format_timestamp(ts: DateTime<Utc>) -> String {
    ts.format(TIMESTAMP_FORMAT).to_string()
}

pub fn parse_timestamp(text: &str) -> std::result::Result<DateTime<Utc>, String> {
    NaiveDateTime::parse_from_str(text.trim(), TIMESTAMP_FORMAT)
        .map(|naive| naive.and_utc())
        .map_err(|e| format!("bad timestamp `{text}`: {e}"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Frequency {
    Minute,
    Day,
}

impl Frequency {
    pub fn step(self) -> Duration {
        match self {
            Frequency::Minute => Duration::minutes(1),
            Frequency::Day => Duration::days(1),
        }
    }

    pub fn is_aligned(self, ts: DateTime<Utc>) -> bool {
        match self {
            Frequency::Minute => ts.second() == 0 && ts.nanosecond() == 0,
            Frequency::Day => {
                ts.hour() == 0 && ts.minute() == 0 && ts.second() == 0 && ts.nanosecond() == 0
            }
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Frequency::Minute => "minute",
            Frequency::Day => "day",
        }
    }
}

impl std::str::FromStr for Frequency {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "minute" | "1m" => Ok(Frequency::Minute),
            "day" | "daily" | "1d" => Ok(Frequency::Day),
            other => Err(format!("unknown frequency `{other}` (expected minute or day)")),
        }
    }
}

/// Half-open interval `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TimeSpan {
    pub start: DateTime<Utc>,
    pub end: DateTime<Utc>,
}

impl TimeSpan {
    pub fn new(start: DateTime<Utc>, end: DateTime<Utc>) -> Self {
        TimeSpan { start, end }
    }

    pub fn contains(&self, ts: DateTime<Utc>) -> bool {
        self.start <= ts && ts < self.end
    }

    pub fn overlaps(&self, other: &TimeSpan) -> bool {
        self.start < other.end && other.start < self.end
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    /// Grid points `start, start + step, ...` strictly before `end`.
    pub fn steps(&self, step: Duration) -> impl Iterator<Item = DateTime<Utc>> {
        let end = self.end;
        std::iter::successors(Some(self.start), move |t| Some(*t + step)).take_while(move |t| *t < end)
    }

    pub fn bar_count(&self, step: Duration) -> usize {
        if self.is_empty() {
            0
        } else {
            ((self.end - self.start).num_seconds() as usize).div_ceil(step.num_seconds() as usize)
        }
    }
}

/// Whether a bar came from the feed or was synthesized to close a gap.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FillFlag {
    Observed,
    GapFilled,
}

/// How `regularize` treats grid steps the feed did not report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GapPolicy {
    /// Carry the previous close forward with zero volume.
    #[default]
    ForwardFill,
    /// Leave the step out; the next return spans the whole gap.
    Drop,
}

impl std::str::FromStr for GapPolicy {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "ffill" | "forward_fill" | "forward-fill" => Ok(GapPolicy::ForwardFill),
            "drop" => Ok(GapPolicy::Drop),
            other => Err(format!("unknown gap policy `{other}` (expected ffill or drop)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bar {
    pub timestamp: DateTime<Utc>,
    pub close: f64,
    pub volume: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BarSeries {
    asset_id: String,
    frequency: Frequency,
    bars: Vec<Bar>,
    fill_flags: Vec<FillFlag>,
}

impl BarSeries {
    /// Builds a series from bars already known to be valid, marking all observed.
    ///
    /// Checks ordering, alignment, and the price/volume domain; does not
    /// require the grid to be gap-free.
    pub fn from_bars(asset_id: impl Into<String>, frequency: Frequency, bars: Vec<Bar>) -> Result<Self> {
        let flags = vec![FillFlag::Observed; bars.len()];
        Self::with_flags(asset_id, frequency, bars, flags)
    }

    fn with_flags(
        asset_id: impl Into<String>,
        frequency: Frequency,
        bars: Vec<Bar>,
        fill_flags: Vec<FillFlag>,
    ) -> Result<Self> {
        debug_assert_eq!(bars.len(), fill_flags.len());
        for (i, bar) in bars.iter().enumerate() {
            let row = i + 1;
            validate_bar(bar, row)?;
            if !frequency.is_aligned(bar.timestamp) {
                return Err(SeriesError::Misaligned(format_timestamp(bar.timestamp)));
            }
            if i > 0 {
                let prev = bars[i - 1].timestamp;
                if bar.timestamp == prev {
                    return Err(SeriesError::DuplicateTimestamp {
                        row,
                        timestamp: format_timestamp(bar.timestamp),
                    });
                }
                if bar.timestamp < prev {
                    return Err(SeriesError::UnorderedInput {
                        row,
                        timestamp: format_timestamp(bar.timestamp),
                    });
                }
            }
        }
        Ok(BarSeries {
            asset_id: asset_id.into(),
            frequency,
            bars,
            fill_flags,
        })
    }

    pub fn asset_id(&self) -> &str {
        &self.asset_id
    }

    pub fn frequency(&self) -> Frequency {
        self.frequency
    }

    pub fn bars(&self) -> &[Bar] {
        &self.bars
    }

    pub fn fill_flags(&self) -> &[FillFlag] {
        &self.fill_flags
    }

    pub fn len(&self) -> usize {
        self.bars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bars.is_empty()
    }

    pub fn gap_filled_count(&self) -> usize {
        self.fill_flags.iter().filter(|f| **f == FillFlag::GapFilled).count()
    }

    /// True when consecutive bars are exactly one frequency step apart.
    pub fn is_regular(&self) -> bool {
        let step = self.frequency.step();
        self.bars.windows(2).all(|w| w[1].timestamp - w[0].timestamp == step)
    }

    pub fn first_timestamp(&self) -> Option<DateTime<Utc>> {
        self.bars.first().map(|b| b.timestamp)
    }

    pub fn last_timestamp(&self) -> Option<DateTime<Utc>> {
        self.bars.last().map(|b| b.timestamp)
    }
}

fn validate_bar(bar: &Bar, row: usize) -> Result<()> {
    if !(bar.close.is_finite() && bar.close > 0.0) {
        return Err(SeriesError::InvalidPrice { row, close: bar.close });
    }
    if !(bar.volume.is_finite() && bar.volume >= 0.0) {
        return Err(SeriesError::InvalidVolume { row, volume: bar.volume });
    }
    Ok(())
}

/// Parses a strict `timestamp,close,volume` document.
///
/// Row numbers in errors count data rows from 1 (the header is row 0).
pub fn parse_bar_csv(text: &str, asset_id: &str, frequency: Frequency) -> Result<BarSeries> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(text.as_bytes());
    let mut records = reader.records();

    let header = match records.next() {
        Some(Ok(h)) => h,
        Some(Err(e)) => return Err(SeriesError::InvalidHeader(e.to_string())),
        None => return Err(SeriesError::InvalidHeader(String::new())),
    };
    if header.len() != 3 || header.iter().zip(BAR_CSV_HEADER).any(|(a, b)| a != b) {
        return Err(SeriesError::InvalidHeader(header.iter().collect::<Vec<_>>().join(",")));
    }

    let mut bars = Vec::new();
    for (i, record) in records.enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| SeriesError::ParseError { row, message: e.to_string() })?;
        if record.len() != 3 {
            return Err(SeriesError::ParseError {
                row,
                message: format!("expected 3 fields, found {}", record.len()),
            });
        }
        let timestamp = parse_timestamp(&record[0]).map_err(|message| SeriesError::ParseError { row, message })?;
        let close: f64 = parse_number(&record[1], "close", row)?;
        let volume: f64 = parse_number(&record[2], "volume", row)?;
        let bar = Bar { timestamp, close, volume };
        validate_bar(&bar, row)?;
        if !frequency.is_aligned(timestamp) {
            return Err(SeriesError::ParseError {
                row,
                message: format!("timestamp {} not aligned to {} bars", &record[0], frequency.as_str()),
            });
        }
        if let Some(prev) = bars.last().map(|b: &Bar| b.timestamp) {
            if timestamp == prev {
                return Err(SeriesError::DuplicateTimestamp { row, timestamp: record[0].to_string() });
            }
            if timestamp < prev {
                return Err(SeriesError::UnorderedInput { row, timestamp: record[0].to_string() });
            }
        }
        bars.push(bar);
    }

    let flags = vec![FillFlag::Observed; bars.len()];
    Ok(BarSeries {
        asset_id: asset_id.to_string(),
        frequency,
        bars,
        fill_flags: flags,
    })
}

fn parse_number(field: &str, name: &str, row: usize) -> Result<f64> {
    field.trim().parse::<f64>().map_err(|e| SeriesError::ParseError {
        row,
        message: format!("bad {name} `{field}`: {e}"),
    })
}

/// Writes the strict bar schema. Floats use the shortest round-trip form.
pub fn emit_bar_csv(series: &BarSeries) -> String {
    let mut out = String::with_capacity(32 * (series.len() + 1));
    out.push_str("timestamp,close,volume\n");
    for bar in &series.bars {
        out.push_str(&format_timestamp(bar.timestamp));
        out.push(',');
        out.push_str(&bar.close.to_string());
        out.push(',');
        out.push_str(&bar.volume.to_string());
        out.push('\n');
    }
    out
}

/// Projects the series onto the frequency grid `[start, end]` (inclusive).
pub fn regularize(series: &BarSeries, start: DateTime<Utc>, end: DateTime<Utc>, policy: GapPolicy) -> Result<BarSeries> {
    let freq = series.frequency;
    if start > end {
        return Err(SeriesError::InvalidRange {
            start: format_timestamp(start),
            end: format_timestamp(end),
        });
    }
    for ts in [start, end] {
        if !freq.is_aligned(ts) {
            return Err(SeriesError::Misaligned(format_timestamp(ts)));
        }
    }

    let step = freq.step();
    let bars = &series.bars;
    // Last observation at or before `start` seeds the forward fill.
    let first_idx = bars.partition_point(|b| b.timestamp <= start);
    if first_idx == 0 {
        return Err(SeriesError::LeadingGap(format_timestamp(start)));
    }
    let mut cursor = first_idx - 1;
    let mut last_close = bars[cursor].close;

    let mut out_bars = Vec::new();
    let mut out_flags = Vec::new();
    let mut t = start;
    while t <= end {
        while cursor < bars.len() && bars[cursor].timestamp < t {
            cursor += 1;
        }
        if cursor < bars.len() && bars[cursor].timestamp == t {
            let bar = bars[cursor];
            last_close = bar.close;
            out_bars.push(bar);
            out_flags.push(series.fill_flags[cursor]);
        } else if policy == GapPolicy::ForwardFill {
            out_bars.push(Bar { timestamp: t, close: last_close, volume: 0.0 });
            out_flags.push(FillFlag::GapFilled);
        }
        t += step;
    }

    Ok(BarSeries {
        asset_id: series.asset_id.clone(),
        frequency: freq,
        bars: out_bars,
        fill_flags: out_flags,
    })
}

/// One value of a derived series, carrying the fill state of its source bar.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub timestamp: DateTime<Utc>,
    pub value: f64,
    pub fill: FillFlag,
}

impl Observation {
    pub fn is_observed(&self) -> bool {
        self.fill == FillFlag::Observed
    }
}

/// Read access shared by return and log-volume series.
pub trait TimeSeries {
    fn asset_id(&self) -> &str;
    fn frequency(&self) -> Frequency;
    fn observations(&self) -> &[Observation];

    /// Binary search by timestamp.
    fn get(&self, ts: DateTime<Utc>) -> Option<&Observation> {
        let obs = self.observations();
        obs.binary_search_by(|o| o.timestamp.cmp(&ts)).ok().map(|i| &obs[i])
    }

    fn len(&self) -> usize {
        self.observations().len()
    }

    fn is_empty(&self) -> bool {
        self.observations().is_empty()
    }
}

/// Percent-log returns, `100 * ln(p_t / p_{t-1})`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReturnSeries {
    asset_id: String,
    frequency: Frequency,
    points: Vec<Observation>,
}

impl ReturnSeries {
    pub fn from_observations(asset_id: impl Into<String>, frequency: Frequency, points: Vec<Observation>) -> Self {
        ReturnSeries { asset_id: asset_id.into(), frequency, points }
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.points.iter().map(|p| p.value)
    }
}

impl TimeSeries for ReturnSeries {
    fn asset_id(&self) -> &str {
        &self.asset_id
    }
    fn frequency(&self) -> Frequency {
        self.frequency
    }
    fn observations(&self) -> &[Observation] {
        &self.points
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogVolumeSeries {
    asset_id: String,
    frequency: Frequency,
    shift: f64,
    points: Vec<Observation>,
}

impl LogVolumeSeries {
    pub fn shift_constant(&self) -> f64 {
        self.shift
    }
}

impl TimeSeries for LogVolumeSeries {
    fn asset_id(&self) -> &str {
        &self.asset_id
    }
    fn frequency(&self) -> Frequency {
        self.frequency
    }
    fn observations(&self) -> &[Observation] {
        &self.points
    }
}

pub const DEFAULT_VOLUME_SHIFT: f64 = 1.0;

pub fn log_returns(series: &BarSeries) -> Result<ReturnSeries> {
    if series.len() < 2 {
        return Err(SeriesError::SeriesTooShort { needed: 2, actual: series.len() });
    }
    let points = series
        .bars
        .windows(2)
        .zip(&series.fill_flags[1..])
        .map(|(w, &fill)| Observation {
            timestamp: w[1].timestamp,
            value: 100.0 * (w[1].close / w[0].close).ln(),
            fill,
        })
        .collect();
    Ok(ReturnSeries {
        asset_id: series.asset_id.clone(),
        frequency: series.frequency,
        points,
    })
}

pub fn log_volume(series: &BarSeries, shift: f64) -> Result<LogVolumeSeries> {
    if !(shift.is_finite() && shift > 0.0) {
        return Err(SeriesError::NonPositiveShift(shift));
    }
    let points = series
        .bars
        .iter()
        .zip(&series.fill_flags)
        .map(|(bar, &fill)| Observation {
            timestamp: bar.timestamp,
            value: (bar.volume + shift).ln(),
            fill,
        })
        .collect();
    Ok(LogVolumeSeries {
        asset_id: series.asset_id.clone(),
        frequency: series.frequency,
        shift,
        points,
    })
}
