//! Flat `key = value` run configuration. Later sources override earlier ones:
//! built-in defaults, then the config file, then command-line values.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use chrono::{DateTime, Utc};
use serde::Serialize;

use kickoff::determinants::ControlSet;
use kickoff::events::RelativeWindow;
use kickoff::models::{EstimationWindow, ModelKind};
use kickoff::timeseries::{parse_timestamp, Frequency, GapPolicy};
use kickoff::Execution;

pub const KEYS: &[&str] = &[
    "bars",
    "matches",
    "odds",
    "out",
    "frequency",
    "gap_policy",
    "volume_shift",
    "models",
    "estimation_start",
    "estimation_end",
    "min_coverage",
    "pre_match_bars",
    "post_match_bars",
    "regular_includes_half_time",
    "odds_threshold",
    "anchor",
    "tokens",
    "daily_windows",
    "daily_model",
    "determinants_model",
    "controls",
    "token_reference",
    "mm_subsamples",
    "seed",
    "plot_start",
    "plot_end",
    "execution",
];

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_config_text(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').with_context(|| format!("config line {}: expected key = value", i + 1))?;
        let key = k.trim().to_string();
        if !KEYS.contains(&key.as_str()) {
            bail!("config line {}: unknown key `{key}`", i + 1);
        }
        map.insert(key, v.trim().to_string());
    }
    Ok(map)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub bars: PathBuf,
    pub matches: PathBuf,
    pub odds: PathBuf,
    #[serde(skip)]
    pub out: PathBuf,
    pub frequency: Frequency,
    pub gap_policy: GapPolicy,
    pub volume_shift: f64,
    pub models: Vec<String>,
    /// Unset offsets fall back to the defaults of the study's frequency.
    pub estimation_start: Option<i64>,
    pub estimation_end: Option<i64>,
    pub min_coverage: Option<f64>,
    pub pre_match_bars: i64,
    pub post_match_bars: i64,
    pub regular_includes_half_time: bool,
    pub odds_threshold: f64,
    pub anchor: String,
    pub tokens: Vec<String>,
    pub daily_windows: Vec<String>,
    pub daily_model: String,
    pub determinants_model: String,
    pub controls: ControlSet,
    pub token_reference: String,
    pub mm_subsamples: usize,
    pub seed: u64,
    pub plot_start: Option<String>,
    pub plot_end: Option<String>,
    pub execution: Execution,
}

fn list(v: &str) -> Vec<String> {
    v.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect()
}

fn num<T: std::str::FromStr>(map: &BTreeMap<String, String>, key: &str, default: T) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    match map.get(key) {
        Some(v) => v.parse().map_err(|e| anyhow::anyhow!("config `{key}`: {e}")),
        None => Ok(default),
    }
}

impl RunConfig {
    pub fn from_map(map: &BTreeMap<String, String>) -> Result<Self> {
        for key in map.keys() {
            if !KEYS.contains(&key.as_str()) {
                bail!("unknown config key `{key}`");
            }
        }
        let get = |k: &str, d: &str| map.get(k).cloned().unwrap_or_else(|| d.to_string());
        let frequency: Frequency = get("frequency", "minute").parse().map_err(anyhow::Error::msg)?;
        let controls = match get("controls", "stage_and_token").as_str() {
            "stage_and_token" => ControlSet::StageAndToken,
            "stage_only" => ControlSet::StageOnly,
            other => bail!("config `controls`: expected stage_and_token or stage_only, got `{other}`"),
        };
        let execution = match get("execution", "parallel").as_str() {
            "parallel" => Execution::Parallel,
            "sequential" => Execution::Sequential,
            other => bail!("config `execution`: expected parallel or sequential, got `{other}`"),
        };
        let cfg = RunConfig {
            bars: get("bars", "bars").into(),
            matches: get("matches", "matches.json").into(),
            odds: get("odds", "odds.csv").into(),
            out: get("out", "out").into(),
            frequency,
            gap_policy: get("gap_policy", "ffill").parse().map_err(anyhow::Error::msg)?,
            volume_shift: num(map, "volume_shift", 1.0)?,
            models: list(&get("models", "constant_mean,market:BTC,market:CHZ")),
            estimation_start: map.get("estimation_start").map(|_| num(map, "estimation_start", 0)).transpose()?,
            estimation_end: map.get("estimation_end").map(|_| num(map, "estimation_end", 0)).transpose()?,
            min_coverage: map.get("min_coverage").map(|_| num(map, "min_coverage", 0.0)).transpose()?,
            pre_match_bars: num(map, "pre_match_bars", 60)?,
            post_match_bars: num(map, "post_match_bars", 60)?,
            regular_includes_half_time: num(map, "regular_includes_half_time", true)?,
            odds_threshold: num(map, "odds_threshold", kickoff::odds::DEFAULT_THRESHOLD_PP)?,
            anchor: get("anchor", "2022-11-20T00:00:00Z"),
            tokens: list(&get("tokens", "ARG,BFT,POR,SNFT")),
            daily_windows: list(&get("daily_windows", "-120..-1,-60..-1,-30..-1,0..26,27..56")),
            daily_model: get("daily_model", "market:BTC"),
            determinants_model: get("determinants_model", "constant_mean"),
            controls,
            token_reference: get("token_reference", kickoff::determinants::DEFAULT_TOKEN_REFERENCE),
            mm_subsamples: num(map, "mm_subsamples", 500)?,
            seed: num(map, "seed", 20221120)?,
            plot_start: map.get("plot_start").cloned(),
            plot_end: map.get("plot_end").cloned(),
            execution,
        };
        cfg.estimation_window(cfg.frequency)?;
        cfg.model_kinds()?;
        cfg.relative_windows()?;
        cfg.anchor_time()?;
        if cfg.volume_shift.is_nan() || cfg.volume_shift <= 0.0 {
            bail!("config `volume_shift` must be positive");
        }
        Ok(cfg)
    }

    /// Defaults, then the optional file, then `overrides`.
    pub fn load(file: Option<&Path>, overrides: &BTreeMap<String, String>) -> Result<Self> {
        let mut map = match file {
            Some(path) => parse_config_text(
                &std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?,
            )?,
            None => BTreeMap::new(),
        };
        map.extend(overrides.iter().map(|(k, v)| (k.clone(), v.clone())));
        Self::from_map(&map)
    }

    pub fn estimation_window(&self, frequency: Frequency) -> Result<EstimationWindow> {
        let d = EstimationWindow::for_frequency(frequency);
        Ok(EstimationWindow::new(
            self.estimation_start.unwrap_or(d.start_offset()),
            self.estimation_end.unwrap_or(d.end_offset()),
            self.min_coverage.unwrap_or(d.min_coverage()),
        )?)
    }

    pub fn model_kinds(&self) -> Result<Vec<ModelKind>> {
        if self.models.is_empty() {
            bail!("config `models` is empty");
        }
        self.models.iter().map(|m| m.parse::<ModelKind>().map_err(anyhow::Error::msg)).collect()
    }

    pub fn relative_windows(&self) -> Result<Vec<RelativeWindow>> {
        self.daily_windows.iter().map(|w| w.parse::<RelativeWindow>().map_err(anyhow::Error::msg)).collect()
    }

    pub fn anchor_time(&self) -> Result<DateTime<Utc>> {
        parse_timestamp(&self.anchor).map_err(|e| anyhow::anyhow!("config `anchor`: {e}"))
    }
}
