//! Seeded synthetic markets with known expectation models and injected
//! window shocks, used as end-to-end oracles.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Duration, TimeZone, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::events::{emit_schedule, resolve_windows, MatchEvent, MatchWindowConfig, Outcome, RelativeWindow, Stage, WindowLabel};
use crate::odds::{emit_odds_csv, OddsRecord, OddsTriple};
use crate::timeseries::{emit_bar_csv, Bar, BarSeries, Frequency};

pub const MARKET_ID: &str = "BTC";
pub const SECTOR_ID: &str = "CHZ";

/// Token index, stage, outcome, goals for, goals against, penalties: the
/// fixture list of the 2022 tournament from the token teams' side.
pub const MATCH_PATTERN: [(usize, Stage, Outcome, u32, u32, bool); 21] = [
    (0, Stage::Group1, Outcome::Defeat, 1, 2, false),
    (3, Stage::Group1, Outcome::Victory, 7, 0, false),
    (1, Stage::Group1, Outcome::Victory, 2, 0, false),
    (2, Stage::Group1, Outcome::Victory, 3, 2, false),
    (0, Stage::Group2, Outcome::Victory, 2, 0, false),
    (3, Stage::Group2, Outcome::Draw, 1, 1, false),
    (1, Stage::Group2, Outcome::Victory, 1, 0, false),
    (2, Stage::Group2, Outcome::Victory, 2, 0, false),
    (0, Stage::Group3, Outcome::Victory, 2, 0, false),
    (3, Stage::Group3, Outcome::Defeat, 1, 2, false),
    (1, Stage::Group3, Outcome::Defeat, 0, 1, false),
    (2, Stage::Group3, Outcome::Defeat, 1, 2, false),
    (0, Stage::RoundOf16, Outcome::Victory, 2, 1, false),
    (1, Stage::RoundOf16, Outcome::Victory, 4, 1, false),
    (3, Stage::RoundOf16, Outcome::Defeat, 0, 0, true),
    (2, Stage::RoundOf16, Outcome::Victory, 6, 1, false),
    (1, Stage::QuarterFinal, Outcome::Defeat, 1, 1, true),
    (0, Stage::QuarterFinal, Outcome::Victory, 2, 2, true),
    (2, Stage::QuarterFinal, Outcome::Defeat, 0, 1, false),
    (0, Stage::SemiFinal, Outcome::Victory, 3, 0, false),
    (0, Stage::Final, Outcome::Victory, 3, 3, true),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenSpec {
    pub id: String,
    /// Per-bar return intercept, percent-log units.
    pub alpha: f64,
    /// Loading on the market return.
    pub beta: f64,
    /// Intercept of ln(volume + 1).
    pub volume_level: f64,
    /// Loading of ln(volume + 1) on the market's ln(volume + 1).
    pub volume_beta: f64,
}

impl TokenSpec {
    pub fn new(id: &str, alpha: f64, beta: f64, volume_level: f64, volume_beta: f64) -> Self {
        TokenSpec { id: id.to_string(), alpha, beta, volume_level, volume_beta }
    }

    /// Four tokens with no market loading: every expectation model is exact.
    pub fn null_set() -> Vec<TokenSpec> {
        vec![
            TokenSpec::new("ARG", 0.001, 0.0, 6.0, 0.0),
            TokenSpec::new("BFT", -0.002, 0.0, 5.5, 0.0),
            TokenSpec::new("POR", 0.0005, 0.0, 5.0, 0.0),
            TokenSpec::new("SNFT", -0.001, 0.0, 4.5, 0.0),
        ]
    }

    /// Four tokens loading on the market, for market-model fixtures.
    pub fn loaded_set() -> Vec<TokenSpec> {
        vec![
            TokenSpec::new("ARG", 0.001, 0.8, 1.0, 0.6),
            TokenSpec::new("BFT", -0.002, 1.2, 0.5, 0.7),
            TokenSpec::new("POR", 0.0005, 0.5, 0.8, 0.5),
            TokenSpec::new("SNFT", -0.001, 1.0, 0.2, 0.4),
        ]
    }
}

/// Per-bar additive shock on the token return (or log volume) inside a window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Shock {
    pub window: WindowLabel,
    pub per_bar: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_events: usize,
    pub tokens: Vec<TokenSpec>,
    pub first_kickoff: DateTime<Utc>,
    pub spacing_days: i64,
    /// Market return standard deviation per bar.
    pub market_sd: f64,
    pub market_volume_level: f64,
    pub market_volume_sd: f64,
    /// Sector asset: return = sector_alpha + sector_beta · market return.
    pub sector_alpha: f64,
    pub sector_beta: f64,
    /// Idiosyncratic token noise.
    pub noise_sd: f64,
    pub volume_noise_sd: f64,
    pub return_shocks: Vec<Shock>,
    pub volume_shocks: Vec<Shock>,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_events: 21,
            tokens: TokenSpec::null_set(),
            first_kickoff: Utc.with_ymd_and_hms(2022, 11, 22, 10, 0, 0).unwrap(),
            spacing_days: 2,
            market_sd: 0.05,
            market_volume_level: 8.0,
            market_volume_sd: 0.3,
            sector_alpha: 0.0002,
            sector_beta: 1.5,
            noise_sd: 0.0,
            volume_noise_sd: 0.0,
            return_shocks: Vec::new(),
            volume_shocks: Vec::new(),
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub bars: Vec<BarSeries>,
    pub matches: Vec<MatchEvent>,
    pub odds: Vec<OddsRecord>,
}

const ESTIMATION_LEAD_BARS: i64 = 1600;
const TRAILING_BARS: i64 = 180;

fn schedule(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Vec<MatchEvent> {
    (0..spec.n_events)
        .map(|i| {
            let (tok, stage, outcome, score_for, score_against, penalties) = MATCH_PATTERN[i % MATCH_PATTERN.len()];
            let token = &spec.tokens[tok % spec.tokens.len()];
            let k = spec.first_kickoff + Duration::days(spec.spacing_days * i as i64);
            let first_half_end = k + Duration::minutes(45 + rng.random_range(1..=6));
            let second_half_start = first_half_end + Duration::minutes(15);
            let reg_end = second_half_start + Duration::minutes(45 + rng.random_range(3..=10));
            let (regulation_end, full_time_end) = if penalties {
                (Some(reg_end), reg_end + Duration::minutes(38 + rng.random_range(10..=18)))
            } else {
                (None, reg_end)
            };
            MatchEvent {
                event_id: i as u32 + 1,
                token_id: token.id.clone(),
                opponent: format!("Opponent {}", i + 1),
                stage,
                kickoff: k,
                first_half_end,
                second_half_start,
                regulation_end,
                full_time_end,
                penalties,
                score_for,
                score_against,
                outcome,
                notes: Some("synthetic".into()),
            }
        })
        .collect()
}

/// Decimal odds from fair probabilities plus a bookmaker margin of 4-7%.
fn odds_for(event: &MatchEvent, rng: &mut ChaCha8Rng) -> OddsTriple {
    let (w, d) = match event.outcome {
        Outcome::Draw => (rng.random_range(0.34..0.44), rng.random_range(0.28..0.34)),
        _ => {
            let w = rng.random_range(0.62..0.82);
            (w, (1.0 - w) * rng.random_range(0.55..0.7))
        }
    };
    let margin = 1.0 + rng.random_range(0.04..0.07);
    let price = |p: f64| (100.0 / (p * margin)).round() / 100.0;
    OddsTriple::new(price(w), price(d), price(1.0 - w - d)).expect("generated odds exceed 1")
}

fn to_bars(asset: &str, frequency: Frequency, start: DateTime<Utc>, returns: &[f64], log_volumes: &[f64]) -> BarSeries {
    let step = frequency.step();
    let mut price = 100.0;
    let bars = returns
        .iter()
        .zip(log_volumes)
        .enumerate()
        .map(|(i, (r, lv))| {
            if i > 0 {
                price *= (r / 100.0).exp();
            }
            Bar { timestamp: start + step * i as i32, close: price, volume: lv.exp() - 1.0 }
        })
        .collect();
    BarSeries::from_bars(asset, frequency, bars).expect("synthetic bars are valid")
}

/// Adds each shock to every bar of the token whose return timestamp falls in
/// the shocked window of one of its events.
fn add_shocks(
    target: &mut [f64],
    shocks: &[Shock],
    token: &str,
    events: &[MatchEvent],
    start: DateTime<Utc>,
    step: Duration,
) {
    for event in events.iter().filter(|e| e.token_id == token) {
        let windows = resolve_windows(event, &MatchWindowConfig::default(), step);
        for shock in shocks {
            for window in windows.iter().filter(|w| w.label == shock.window) {
                for span in &window.spans {
                    for ts in span.steps(step) {
                        let idx = ((ts - start).num_seconds() / step.num_seconds()) as usize;
                        target[idx] += shock.per_bar;
                    }
                }
            }
        }
    }
}

/// Minute-frequency market, sector and token series plus schedule and odds.
pub fn generate(spec: &SyntheticSpec) -> SyntheticDataset {
    assert!(spec.n_events > 0 && !spec.tokens.is_empty(), "synthetic spec needs events and tokens");
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let matches = schedule(spec, &mut rng);
    let odds = matches.iter().map(|e| OddsRecord { event_id: e.event_id, odds: odds_for(e, &mut rng) }).collect();

    let frequency = Frequency::Minute;
    let step = frequency.step();
    let start = spec.first_kickoff - step * ESTIMATION_LEAD_BARS as i32;
    let end = matches.iter().map(|e| e.full_time_end).max().unwrap() + step * TRAILING_BARS as i32;
    let n = ((end - start).num_seconds() / step.num_seconds()) as usize + 1;

    let market_noise = Normal::new(0.0, spec.market_sd).expect("valid sd");
    let volume_noise = Normal::new(0.0, spec.market_volume_sd).expect("valid sd");
    let market_r: Vec<f64> = (0..n).map(|_| market_noise.sample(&mut rng)).collect();
    let market_lv: Vec<f64> = (0..n).map(|_| spec.market_volume_level + volume_noise.sample(&mut rng)).collect();
    let sector_r: Vec<f64> = market_r.iter().map(|m| spec.sector_alpha + spec.sector_beta * m).collect();
    let sector_lv: Vec<f64> = market_lv.iter().map(|m| 2.0 + 0.5 * m).collect();

    let mut bars = vec![
        to_bars(MARKET_ID, frequency, start, &market_r, &market_lv),
        to_bars(SECTOR_ID, frequency, start, &sector_r, &sector_lv),
    ];
    let token_noise = Normal::new(0.0, spec.noise_sd.max(0.0)).expect("valid sd");
    let token_volume_noise = Normal::new(0.0, spec.volume_noise_sd.max(0.0)).expect("valid sd");
    for token in &spec.tokens {
        let mut r: Vec<f64> = market_r.iter().map(|m| token.alpha + token.beta * m).collect();
        let mut lv: Vec<f64> = market_lv.iter().map(|m| token.volume_level + token.volume_beta * m).collect();
        if spec.noise_sd > 0.0 {
            r.iter_mut().for_each(|v| *v += token_noise.sample(&mut rng));
        }
        if spec.volume_noise_sd > 0.0 {
            lv.iter_mut().for_each(|v| *v += token_volume_noise.sample(&mut rng));
        }
        add_shocks(&mut r, &spec.return_shocks, &token.id, &matches, start, step);
        add_shocks(&mut lv, &spec.volume_shocks, &token.id, &matches, start, step);
        bars.push(to_bars(&token.id, frequency, start, &r, &lv));
    }
    SyntheticDataset { bars, matches, odds }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DailySyntheticSpec {
    pub tokens: Vec<TokenSpec>,
    pub anchor: DateTime<Utc>,
    pub days_before: i64,
    pub days_after: i64,
    pub market_sd: f64,
    pub noise_sd: f64,
    /// Per-day shocks; overlapping windows add up.
    pub shocks: Vec<(RelativeWindow, f64)>,
    pub seed: u64,
}

impl Default for DailySyntheticSpec {
    fn default() -> Self {
        DailySyntheticSpec {
            tokens: TokenSpec::loaded_set(),
            anchor: Utc.with_ymd_and_hms(2022, 11, 20, 0, 0, 0).unwrap(),
            days_before: 340,
            days_after: 70,
            market_sd: 3.0,
            noise_sd: 0.0,
            shocks: Vec::new(),
            seed: 11,
        }
    }
}

/// Daily market and token series around a single anchor date.
pub fn generate_daily(spec: &DailySyntheticSpec) -> Vec<BarSeries> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let frequency = Frequency::Day;
    let start = spec.anchor - Duration::days(spec.days_before);
    let n = (spec.days_before + spec.days_after + 1) as usize;
    let market_noise = Normal::new(0.0, spec.market_sd).expect("valid sd");
    let market_r: Vec<f64> = (0..n).map(|_| market_noise.sample(&mut rng)).collect();
    let market_lv: Vec<f64> = (0..n).map(|_| 15.0 + 0.2 * market_noise.sample(&mut rng)).collect();
    let mut bars = vec![to_bars(MARKET_ID, frequency, start, &market_r, &market_lv)];
    let noise = Normal::new(0.0, spec.noise_sd.max(0.0)).expect("valid sd");
    for token in &spec.tokens {
        let mut r: Vec<f64> = market_r.iter().map(|m| token.alpha + token.beta * m).collect();
        let lv: Vec<f64> = market_lv.iter().map(|m| token.volume_level + token.volume_beta * m).collect();
        if spec.noise_sd > 0.0 {
            r.iter_mut().for_each(|v| *v += noise.sample(&mut rng));
        }
        for (window, per_day) in &spec.shocks {
            for day in window.first..=window.last {
                let idx = (spec.days_before + day) as usize;
                if idx < n {
                    r[idx] += per_day;
                }
            }
        }
        bars.push(to_bars(&token.id, frequency, start, &r, &lv));
    }
    bars
}

/// Writes `bars/<asset>.csv` for each series under `dir`.
pub fn write_bars(dir: &Path, bars: &[BarSeries]) -> io::Result<Vec<PathBuf>> {
    let bar_dir = dir.join("bars");
    fs::create_dir_all(&bar_dir)?;
    let mut written = Vec::new();
    for series in bars {
        let path = bar_dir.join(format!("{}.csv", series.asset_id()));
        fs::write(&path, emit_bar_csv(series))?;
        written.push(path);
    }
    Ok(written)
}

impl SyntheticDataset {
    /// Writes `bars/*.csv`, `matches.json` and `odds.csv` under `dir`.
    pub fn write_to(&self, dir: &Path) -> io::Result<Vec<PathBuf>> {
        let mut written = write_bars(dir, &self.bars)?;
        let matches = dir.join("matches.json");
        fs::write(&matches, emit_schedule(&self.matches))?;
        written.push(matches);
        let odds = dir.join("odds.csv");
        fs::write(&odds, emit_odds_csv(&self.odds))?;
        written.push(odds);
        Ok(written)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::events::parse_schedule;
    use crate::odds::{classify_expectation, devig, surprise_flag, DEFAULT_THRESHOLD_PP};

    fn small() -> SyntheticSpec {
        SyntheticSpec { n_events: 4, ..Default::default() }
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = generate(&small());
        let b = generate(&small());
        assert_eq!(a, b);
        let c = generate(&SyntheticSpec { seed: 8, ..small() });
        assert_ne!(a.bars[0], c.bars[0]);
    }

    #[test]
    fn schedule_is_valid_and_round_trips() {
        let d = generate(&SyntheticSpec::default());
        assert_eq!(d.matches.len(), 21);
        let back = parse_schedule(&emit_schedule(&d.matches)).unwrap();
        assert_eq!(back, d.matches);
        for (e, o) in d.matches.iter().zip(&d.odds) {
            let over = devig(&o.odds).unwrap().overround;
            assert!(over > 0.03 && over < 0.08, "{:?}", o.odds);
            let label = classify_expectation(&devig(&o.odds).unwrap(), DEFAULT_THRESHOLD_PP);
            if e.outcome == Outcome::Defeat {
                assert!(surprise_flag(label.label, e.outcome));
            }
        }
    }

    #[test]
    fn shocks_land_in_window() {
        let spec = SyntheticSpec {
            return_shocks: vec![Shock { window: WindowLabel::SecondHalf, per_bar: 5.0 }],
            ..small()
        };
        let base = generate(&small());
        let shocked = generate(&spec);
        let e = &shocked.matches[0];
        let token = shocked.bars.iter().find(|b| b.asset_id() == e.token_id).unwrap();
        let plain = base.bars.iter().find(|b| b.asset_id() == e.token_id).unwrap();
        let ratio = |s: &BarSeries, t: DateTime<Utc>| {
            let i = s.bars().iter().position(|b| b.timestamp == t).unwrap();
            100.0 * (s.bars()[i].close / s.bars()[i - 1].close).ln()
        };
        let inside = e.second_half_start;
        assert!((ratio(token, inside) - ratio(plain, inside) - 5.0).abs() < 1e-9);
        let before = e.second_half_start - Duration::minutes(1);
        assert!((ratio(token, before) - ratio(plain, before)).abs() < 1e-9);
    }

    #[test]
    fn daily_series_cover_range() {
        let bars = generate_daily(&DailySyntheticSpec::default());
        assert_eq!(bars.len(), 5);
        assert_eq!(bars[0].len(), 411);
        assert!(bars.iter().all(|b| b.is_regular()));
    }
}
