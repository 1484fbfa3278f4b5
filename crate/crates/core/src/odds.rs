//! Bookmaker odds: proportional margin removal, ex-ante expectation labels
//! and surprise flags.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::events::Outcome;

pub const DEFAULT_THRESHOLD_PP: f64 = 30.0;
pub const ODDS_CSV_HEADER: &str = "event_id,odds_win,odds_draw,odds_loss";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OddsError {
    #[error("decimal odds must be finite and > 1.0, got {0}")]
    InvalidOdds(f64),
    #[error("odds csv must start with `{ODDS_CSV_HEADER}`")]
    InvalidHeader,
    #[error("odds csv line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("duplicate odds for event {0}")]
    Duplicate(u32),
}

/// Decimal odds from the fan-token team's side.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OddsTriple {
    pub odds_win: f64,
    pub odds_draw: f64,
    pub odds_loss: f64,
}

impl OddsTriple {
    pub fn new(odds_win: f64, odds_draw: f64, odds_loss: f64) -> Result<Self, OddsError> {
        for o in [odds_win, odds_draw, odds_loss] {
            if !(o.is_finite() && o > 1.0) {
                return Err(OddsError::InvalidOdds(o));
            }
        }
        Ok(OddsTriple { odds_win, odds_draw, odds_loss })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbabilityTriple {
    pub p_win: f64,
    pub p_draw: f64,
    pub p_loss: f64,
    /// Sum of raw implied probabilities minus one.
    pub overround: f64,
}

/// Raw implied probabilities 1/odds, rescaled to sum to one.
pub fn devig(odds: &OddsTriple) -> Result<ProbabilityTriple, OddsError> {
    let odds = OddsTriple::new(odds.odds_win, odds.odds_draw, odds.odds_loss)?;
    Ok(normalize([1.0 / odds.odds_win, 1.0 / odds.odds_draw, 1.0 / odds.odds_loss]))
}

/// Implied probabilities as printed before margin removal.
pub fn implied(odds: &OddsTriple) -> [f64; 3] {
    [1.0 / odds.odds_win, 1.0 / odds.odds_draw, 1.0 / odds.odds_loss]
}

fn normalize(raw: [f64; 3]) -> ProbabilityTriple {
    let total: f64 = raw.iter().sum();
    let p_win = raw[0] / total;
    let p_loss = raw[2] / total;
    // draw absorbs the rounding so the triple sums to one
    let p_draw = 1.0 - p_win - p_loss;
    ProbabilityTriple { p_win, p_draw, p_loss, overround: total - 1.0 }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Expectation {
    ExpectedVictory,
    ExpectedDefeat,
    NoExpectation,
}

impl Expectation {
    pub fn as_str(self) -> &'static str {
        match self {
            Expectation::ExpectedVictory => "expected_victory",
            Expectation::ExpectedDefeat => "expected_defeat",
            Expectation::NoExpectation => "no_expectation",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExpectationLabel {
    pub label: Expectation,
    /// (p_win − p_loss) in percentage points.
    pub margin: f64,
}

pub fn classify_expectation(probs: &ProbabilityTriple, threshold_pp: f64) -> ExpectationLabel {
    let margin = (probs.p_win - probs.p_loss) * 100.0;
    let label = if margin > threshold_pp {
        Expectation::ExpectedVictory
    } else if margin < -threshold_pp {
        Expectation::ExpectedDefeat
    } else {
        Expectation::NoExpectation
    };
    ExpectationLabel { label, margin }
}

/// True when the result contradicts the favoured side. Draws never count.
pub fn surprise_flag(expectation: Expectation, actual: Outcome) -> bool {
    matches!(
        (expectation, actual),
        (Expectation::ExpectedVictory, Outcome::Defeat) | (Expectation::ExpectedDefeat, Outcome::Victory)
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OddsRecord {
    pub event_id: u32,
    pub odds: OddsTriple,
}

/// Reads the odds CSV. Lines starting with `#` carry provenance notes and are skipped.
pub fn parse_odds_csv(text: &str) -> Result<Vec<OddsRecord>, OddsError> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim_start().starts_with('#') && !l.trim().is_empty());
    match lines.next() {
        Some((_, header)) if header.trim() == ODDS_CSV_HEADER => {}
        _ => return Err(OddsError::InvalidHeader),
    }
    let mut out: Vec<OddsRecord> = Vec::new();
    for (i, line) in lines {
        let line_no = i + 1;
        let parse_err = |message: String| OddsError::Parse { line: line_no, message };
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 4 {
            return Err(parse_err(format!("expected 4 fields, found {}", fields.len())));
        }
        let event_id: u32 = fields[0].parse().map_err(|e| parse_err(format!("event_id: {e}")))?;
        let mut values = [0.0; 3];
        for (slot, text) in values.iter_mut().zip(&fields[1..]) {
            *slot = text.parse().map_err(|e| parse_err(format!("`{text}`: {e}")))?;
        }
        let odds = OddsTriple::new(values[0], values[1], values[2])?;
        if out.iter().any(|r| r.event_id == event_id) {
            return Err(OddsError::Duplicate(event_id));
        }
        out.push(OddsRecord { event_id, odds });
    }
    out.sort_by_key(|r| r.event_id);
    Ok(out)
}

pub fn emit_odds_csv(records: &[OddsRecord]) -> String {
    let mut out = format!("{ODDS_CSV_HEADER}\n");
    for r in records {
        out.push_str(&format!("{},{},{},{}\n", r.event_id, r.odds.odds_win, r.odds.odds_draw, r.odds.odds_loss));
    }
    out
}
