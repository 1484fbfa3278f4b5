//! Result files and their rendering: study tables, per-event CARs, match
//! summaries, regression tables and the cumulative-return chart.
//!
//! Every CSV here is written with shortest round-trip floats so the Markdown
//! renderers can be driven from files alone.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::determinants::RegressionCsvRow;
use crate::events::{ChannelStats, EventOutcomeRow, MatchEvent, Outcome, StudyTable, WindowLabel};
use crate::inference::stars;
use crate::odds::{classify_expectation, devig, surprise_flag, OddsRecord};
use crate::timeseries::{format_timestamp, ReturnSeries, TimeSeries};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ReportError {
    #[error("nothing to report")]
    EmptyInput,
    #[error("series are not on a common grid: {0}")]
    Misaligned(String),
    #[error("csv: {0}")]
    Csv(String),
    #[error("no odds for event {0}")]
    MissingOdds(u32),
    #[error(transparent)]
    Odds(#[from] crate::odds::OddsError),
}

pub type Result<T> = std::result::Result<T, ReportError>;

pub const STUDY_CSV_HEADER: &str = "model,window,n,car,car_se,car_t,car_t_p,car_z,car_z_p,car_pos,car_boehmer,car_boehmer_p,\
cav,cav_se,cav_t,cav_t_p,cav_z,cav_z_p,cav_pos,cav_boehmer,cav_boehmer_p";
pub const EVENT_CSV_HEADER: &str = "model,event_id,token_id,window,bars,car,cav,scar,scav";
pub const MATCH_SUMMARY_HEADER: &str =
    "event_id,kickoff_utc,token_id,opponent,stage,outcome,score,p_win,p_draw,p_loss,overround,margin_pp,expectation,surprise";

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| v.to_string())
}

fn parse_csv<T: for<'de> Deserialize<'de>>(text: &str, header: &str) -> Result<Vec<T>> {
    let mut reader = csv::ReaderBuilder::new().from_reader(text.as_bytes());
    let found = reader.headers().map_err(|e| ReportError::Csv(e.to_string()))?;
    if found.iter().collect::<Vec<_>>().join(",") != header {
        return Err(ReportError::Csv(format!("expected header `{header}`")));
    }
    reader.deserialize().map(|r| r.map_err(|e| ReportError::Csv(e.to_string()))).collect()
}

fn stats_fields(s: &ChannelStats) -> String {
    [
        s.mean.to_string(),
        opt(s.se),
        opt(s.t_stat),
        opt(s.t_p),
        opt(s.z_stat),
        opt(s.z_p),
        s.pos_share.to_string(),
        opt(s.boehmer_stat),
        opt(s.boehmer_p),
    ]
    .join(",")
}

/// Aggregate rows of one or more study tables, panel after panel.
pub fn emit_study_csv(tables: &[StudyTable]) -> String {
    let mut out = format!("{STUDY_CSV_HEADER}\n");
    for table in tables {
        for row in &table.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                table.model.label(),
                row.window.key(),
                row.returns.n,
                stats_fields(&row.returns),
                stats_fields(&row.volume)
            );
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyCsvRow {
    pub model: String,
    pub window: String,
    pub n: usize,
    pub car: f64,
    pub car_se: Option<f64>,
    pub car_t: Option<f64>,
    pub car_t_p: Option<f64>,
    pub car_z: Option<f64>,
    pub car_z_p: Option<f64>,
    pub car_pos: f64,
    pub car_boehmer: Option<f64>,
    pub car_boehmer_p: Option<f64>,
    pub cav: f64,
    pub cav_se: Option<f64>,
    pub cav_t: Option<f64>,
    pub cav_t_p: Option<f64>,
    pub cav_z: Option<f64>,
    pub cav_z_p: Option<f64>,
    pub cav_pos: f64,
    pub cav_boehmer: Option<f64>,
    pub cav_boehmer_p: Option<f64>,
}

pub fn parse_study_csv(text: &str) -> Result<Vec<StudyCsvRow>> {
    parse_csv(text, STUDY_CSV_HEADER)
}

pub fn emit_event_csv(tables: &[StudyTable]) -> String {
    let mut out = format!("{EVENT_CSV_HEADER}\n");
    for table in tables {
        for r in &table.events {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                table.model.label(),
                r.event_id,
                r.token_id,
                r.window.key(),
                r.bars,
                r.car,
                r.cav,
                opt(r.scar),
                opt(r.scav)
            );
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventCsvRow {
    pub model: String,
    pub event_id: u32,
    pub token_id: String,
    pub window: String,
    pub bars: usize,
    pub car: f64,
    pub cav: f64,
    pub scar: Option<f64>,
    pub scav: Option<f64>,
}

impl EventCsvRow {
    pub fn from_outcome(model: &str, r: &EventOutcomeRow) -> Self {
        EventCsvRow {
            model: model.to_string(),
            event_id: r.event_id,
            token_id: r.token_id.clone(),
            window: r.window.key(),
            bars: r.bars,
            car: r.car,
            cav: r.cav,
            scar: r.scar,
            scav: r.scav,
        }
    }
}

pub fn parse_event_csv(text: &str) -> Result<Vec<EventCsvRow>> {
    parse_csv(text, EVENT_CSV_HEADER)
}

/// Fixed-point with negative zero folded to zero.
fn fixed(v: f64, decimals: usize) -> String {
    let s = format!("{v:.decimals$}");
    if s.starts_with('-') && s[1..].chars().all(|c| c == '0' || c == '.') {
        s[1..].to_string()
    } else {
        s
    }
}

fn with_stars(stat: Option<f64>, p: Option<f64>) -> String {
    match stat {
        Some(s) => format!("{}{}", fixed(s, 2), p.map_or("", stars)),
        None => "n/a".into(),
    }
}

fn roman(i: usize) -> &'static str {
    ["i", "ii", "iii", "iv", "v", "vi", "vii", "viii", "ix", "x"].get(i).copied().unwrap_or("?")
}

/// Row caption for a window; match windows keep their canonical numeral.
pub fn window_title(key: &str, index: usize) -> String {
    let name = match WindowLabel::parse(key) {
        Some(WindowLabel::PreMatch) => "Pre-match".to_string(),
        Some(WindowLabel::FirstHalf) => "First half".to_string(),
        Some(WindowLabel::HalfTime) => "Half time".to_string(),
        Some(WindowLabel::SecondHalf) => "Second half".to_string(),
        Some(WindowLabel::RegularMatch) => "Regular match".to_string(),
        Some(WindowLabel::FullMatch) => "Full match (0 to λ)".to_string(),
        Some(WindowLabel::PostMatch) => "Post match (λ to λ+60)".to_string(),
        Some(WindowLabel::Relative { first, last }) => return format!("{first} to {last}"),
        None => key.to_string(),
    };
    let position = WindowLabel::parse(key).and_then(|l| WindowLabel::MATCH.iter().position(|m| *m == l)).unwrap_or(index);
    format!("({}) {}", roman(position), name)
}

/// Panel caption for a model label such as `market:BTC`.
pub fn model_title(label: &str) -> String {
    match label.split_once(':') {
        Some((_, reference)) => format!("Market model ({reference})"),
        None if label == "constant_mean" => "Constant mean return".to_string(),
        None => label.to_string(),
    }
}

fn letter(i: usize) -> char {
    (b'a' + (i % 26) as u8) as char
}

fn group_by_model(rows: &[StudyCsvRow]) -> Vec<(String, Vec<&StudyCsvRow>)> {
    let mut order: Vec<(String, Vec<&StudyCsvRow>)> = Vec::new();
    for r in rows {
        match order.iter_mut().find(|(m, _)| *m == r.model) {
            Some((_, v)) => v.push(r),
            None => order.push((r.model.clone(), vec![r])),
        }
    }
    order
}

/// Intraday study table: one panel per model, returns then volumes.
pub fn study_markdown(rows: &[StudyCsvRow]) -> Result<String> {
    if rows.is_empty() {
        return Err(ReportError::EmptyInput);
    }
    let mut out = String::new();
    out.push_str("| Period | CARs | SE | t-test | z-test | Pos. | CAVs | SE | t-test | z-test | Pos. |\n");
    out.push_str("|---|---:|---:|---:|---:|---:|---:|---:|---:|---:|---:|\n");
    for (p, (model, panel)) in group_by_model(rows).iter().enumerate() {
        let _ = writeln!(out, "| ({}) {} | | | | | | | | | | |", letter(p), model_title(model));
        for (i, r) in panel.iter().enumerate() {
            let _ = writeln!(
                out,
                "| {} | {}% | {} | {} | {} | {}% | {} | {} | {} | {} | {}% |",
                window_title(&r.window, i),
                fixed(r.car, 3),
                r.car_se.map_or("n/a".into(), |v| format!("{}%", fixed(v, 3))),
                with_stars(r.car_t, r.car_t_p),
                with_stars(r.car_z, r.car_z_p),
                fixed(r.car_pos * 100.0, 0),
                fixed(r.cav, 3),
                r.cav_se.map_or("n/a".into(), |v| fixed(v, 3)),
                with_stars(r.cav_t, r.cav_t_p),
                with_stars(r.cav_z, r.cav_z_p),
                fixed(r.cav_pos * 100.0, 0),
            );
        }
    }
    let n = rows.iter().map(|r| r.n).max().unwrap_or(0);
    let _ = write!(out, "\nN = {n}. Significance: * p < 0.10, ** p < 0.05, *** p < 0.01.\n");
    Ok(out)
}

/// Daily relative-window table: returns only.
pub fn daily_markdown(rows: &[StudyCsvRow]) -> Result<String> {
    if rows.is_empty() {
        return Err(ReportError::EmptyInput);
    }
    let mut out = String::new();
    for (model, panel) in group_by_model(rows) {
        let _ = writeln!(out, "Model: {}\n", model_title(&model));
        out.push_str("| Days relative to anchor | CARs | Std. Err. | t-test | z-test | Pos. |\n");
        out.push_str("|---|---:|---:|---:|---:|---:|\n");
        for (i, r) in panel.iter().enumerate() {
            let _ = writeln!(
                out,
                "| {} | {}% | {} | {} | {} | {}% |",
                window_title(&r.window, i),
                fixed(r.car, 2),
                r.car_se.map_or("n/a".into(), |v| format!("{}%", fixed(v, 2))),
                with_stars(r.car_t, r.car_t_p),
                with_stars(r.car_z, r.car_z_p),
                fixed(r.car_pos * 100.0, 0),
            );
        }
        let n = panel.iter().map(|r| r.n).max().unwrap_or(0);
        let _ = write!(out, "\nN = {n}. Significance: * p < 0.10, ** p < 0.05, *** p < 0.01.\n\n");
    }
    Ok(out.trim_end().to_string() + "\n")
}

/// One row of the match summary with de-vigged odds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchSummaryRow {
    pub event_id: u32,
    pub kickoff_utc: String,
    pub token_id: String,
    pub opponent: String,
    pub stage: String,
    pub outcome: String,
    pub score: String,
    pub p_win: f64,
    pub p_draw: f64,
    pub p_loss: f64,
    pub overround: f64,
    pub margin_pp: f64,
    pub expectation: String,
    pub surprise: bool,
}

pub fn score_text(event: &MatchEvent) -> String {
    let base = format!("{}:{}", event.score_for, event.score_against);
    if event.penalties {
        let side = if event.outcome == Outcome::Victory { "won" } else { "lost" };
        format!("{base} (pens {side})")
    } else {
        base
    }
}

pub fn match_summary(events: &[MatchEvent], odds: &[OddsRecord], threshold_pp: f64) -> Result<Vec<MatchSummaryRow>> {
    if events.is_empty() {
        return Err(ReportError::EmptyInput);
    }
    let by_id: BTreeMap<u32, &OddsRecord> = odds.iter().map(|o| (o.event_id, o)).collect();
    let mut rows = Vec::with_capacity(events.len());
    for e in events {
        let record = by_id.get(&e.event_id).ok_or(ReportError::MissingOdds(e.event_id))?;
        let probs = devig(&record.odds)?;
        let label = classify_expectation(&probs, threshold_pp);
        rows.push(MatchSummaryRow {
            event_id: e.event_id,
            kickoff_utc: format_timestamp(e.kickoff),
            token_id: e.token_id.clone(),
            opponent: e.opponent.clone(),
            stage: e.stage.as_str().to_string(),
            outcome: e.outcome.as_str().to_string(),
            score: score_text(e),
            p_win: probs.p_win,
            p_draw: probs.p_draw,
            p_loss: probs.p_loss,
            overround: probs.overround,
            margin_pp: label.margin,
            expectation: label.label.as_str().to_string(),
            surprise: surprise_flag(label.label, e.outcome),
        });
    }
    rows.sort_by_key(|r| r.event_id);
    Ok(rows)
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn emit_match_summary_csv(rows: &[MatchSummaryRow]) -> String {
    let mut out = format!("{MATCH_SUMMARY_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.event_id,
            r.kickoff_utc,
            csv_field(&r.token_id),
            csv_field(&r.opponent),
            r.stage,
            r.outcome,
            csv_field(&r.score),
            r.p_win,
            r.p_draw,
            r.p_loss,
            r.overround,
            r.margin_pp,
            r.expectation,
            r.surprise
        );
    }
    out
}

pub fn parse_match_summary_csv(text: &str) -> Result<Vec<MatchSummaryRow>> {
    parse_csv(text, MATCH_SUMMARY_HEADER)
}

fn stage_title(stage: &str) -> &str {
    match stage {
        "group1" => "Group stage 1",
        "group2" => "Group stage 2",
        "group3" => "Group stage 3",
        "round_of_16" => "Round of 16",
        "quarter_final" => "Quarter-final",
        "semi_final" => "Semi-final",
        "final" => "Final",
        other => other,
    }
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    c.next().map_or_else(String::new, |f| f.to_uppercase().collect::<String>() + c.as_str())
}

/// Match overview with outcomes, surprise marks and de-vigged odds.
pub fn match_summary_markdown(rows: &[MatchSummaryRow]) -> Result<String> {
    if rows.is_empty() {
        return Err(ReportError::EmptyInput);
    }
    let mut out = String::new();
    out.push_str("| ID | Date | Time | Match | Match Stage | Outcome | Score | P(win) | P(draw) | P(loss) | Overround |\n");
    out.push_str("|---:|---|---|---|---|---|---|---:|---:|---:|---:|\n");
    for r in rows {
        let (date, time) = match crate::timeseries::parse_timestamp(&r.kickoff_utc) {
            Ok(ts) => (ts.format("%b %-d, %Y").to_string(), ts.format("%H:%M").to_string()),
            Err(_) => (r.kickoff_utc.clone(), String::new()),
        };
        let _ = writeln!(
            out,
            "| {} | {} | {} | {} vs. {} | {} | {}{} | {} | {}% | {}% | {}% | {}% |",
            r.event_id,
            date,
            time,
            r.token_id,
            r.opponent,
            stage_title(&r.stage),
            capitalize(&r.outcome),
            if r.surprise { " ^S" } else { "" },
            r.score,
            fixed(r.p_win * 100.0, 1),
            fixed(r.p_draw * 100.0, 1),
            fixed(r.p_loss * 100.0, 1),
            fixed(r.overround * 100.0, 1),
        );
    }
    out.push_str("\nTimes in UTC. ^S marks outcomes contradicting the betting-odds expectation.\n");
    Ok(out)
}

const REGRESSION_TERMS: [(&str, &str); 7] = [
    ("win", "(i) Victory"),
    ("win_low", "(ii) Victory (Low-Stake)"),
    ("win_high", "(iii) Victory (High-Stake)"),
    ("loss", "(iv) Defeat"),
    ("loss_low", "(v) Defeat (Low-Stake)"),
    ("loss_high", "(vi) Defeat (High-Stake)"),
    ("loss_knockout", "(vii) Defeat & Knockout"),
];

/// Determinants table for one dependent variable, columns in file order.
pub fn regression_markdown(rows: &[RegressionCsvRow], dependent: &str, decimals: usize) -> Result<String> {
    let mut columns: Vec<(String, String)> = Vec::new();
    for r in rows.iter().filter(|r| r.spec.split(':').next() == Some(dependent)) {
        let key = (r.spec.clone(), r.estimator.clone());
        if !columns.contains(&key) {
            columns.push(key);
        }
    }
    if columns.is_empty() {
        return Err(ReportError::EmptyInput);
    }
    let find = |col: &(String, String), term: &str| {
        rows.iter().find(|r| r.spec == col.0 && r.estimator == col.1 && r.term == term)
    };
    let first = |col: &(String, String)| rows.iter().find(|r| r.spec == col.0 && r.estimator == col.1).expect("column has rows");

    let mut out = String::from("| |");
    for i in 0..columns.len() {
        let _ = write!(out, " ({}) |", letter(i));
    }
    out.push_str("\n|---|");
    out.push_str(&"---:|".repeat(columns.len()));
    out.push('\n');
    out.push_str(&format!("| Outcome |{}\n", " |".repeat(columns.len())));
    for (term, title) in REGRESSION_TERMS {
        let _ = write!(out, "| {title} |");
        for col in &columns {
            match find(col, term) {
                Some(r) => {
                    let _ = write!(
                        out,
                        " {}{} ({}) |",
                        fixed(r.coefficient, decimals),
                        r.p_value.map_or("", stars),
                        fixed(r.std_error, decimals)
                    );
                }
                None => out.push_str(" |"),
            }
        }
        out.push('\n');
    }
    out.push_str("| R² |");
    for col in &columns {
        let _ = write!(out, " {} |", fixed(first(col).r2, 4));
    }
    out.push_str("\n| Adj. R² [pseudo R²] |");
    for col in &columns {
        let r = first(col);
        let v = r.adj_or_pseudo_r2.map_or("n/a".to_string(), |v| fixed(v, 4));
        if r.estimator == "mm" {
            let _ = write!(out, " [{v}] |");
        } else {
            let _ = write!(out, " {v} |");
        }
    }
    out.push_str("\n| Controls |");
    for col in &columns {
        let controls = col.0.contains("controls");
        let _ = write!(out, " {} |", if controls { "Yes" } else { "No" });
    }
    out.push_str("\n| Method |");
    for col in &columns {
        let _ = write!(out, " {} |", col.1.to_uppercase());
    }
    out.push_str("\n| N |");
    for col in &columns {
        let _ = write!(out, " {} |", first(col).n);
    }
    out.push_str("\n\nStandard errors in parentheses. * p < 0.10, ** p < 0.05, *** p < 0.01.\n");
    Ok(out)
}

/// Per-token running sums of log returns on a shared grid.
#[derive(Debug, Clone, PartialEq)]
pub struct CumulativeReturns {
    pub timestamps: Vec<String>,
    pub tokens: Vec<String>,
    /// `values[t][k]`: cumulative return of token k at timestamp t.
    pub values: Vec<Vec<f64>>,
}

pub fn cumulative_returns(series: &[&ReturnSeries]) -> Result<CumulativeReturns> {
    let first = series.first().ok_or(ReportError::EmptyInput)?;
    if first.is_empty() {
        return Err(ReportError::EmptyInput);
    }
    let grid: Vec<_> = first.observations().iter().map(|o| o.timestamp).collect();
    for s in series {
        if s.observations().len() != grid.len() || s.observations().iter().zip(&grid).any(|(o, t)| o.timestamp != *t) {
            return Err(ReportError::Misaligned(s.asset_id().to_string()));
        }
    }
    let mut running = vec![0.0; series.len()];
    let values = (0..grid.len())
        .map(|t| {
            for (k, s) in series.iter().enumerate() {
                running[k] += s.observations()[t].value;
            }
            running.clone()
        })
        .collect();
    Ok(CumulativeReturns {
        timestamps: grid.into_iter().map(format_timestamp).collect(),
        tokens: series.iter().map(|s| s.asset_id().to_string()).collect(),
        values,
    })
}

pub fn emit_cumulative_csv(c: &CumulativeReturns) -> String {
    let mut out = format!("timestamp,{}\n", c.tokens.join(","));
    for (ts, row) in c.timestamps.iter().zip(&c.values) {
        out.push_str(ts);
        for v in row {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

/// Self-contained line chart of the cumulative series.
pub fn cumulative_svg(c: &CumulativeReturns, title: &str) -> String {
    let (w, h) = (800.0, 400.0);
    let (left, right, top, bottom) = (70.0, 120.0, 40.0, 50.0);
    let pw = w - left - right;
    let ph = h - top - bottom;
    let all = c.values.iter().flatten().copied();
    let (mut lo, mut hi) = all.fold((0.0f64, 0.0f64), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if hi - lo < 1e-12 {
        lo -= 1.0;
        hi += 1.0;
    }
    let n = c.timestamps.len().max(2) - 1;
    let x = |i: usize| left + pw * i as f64 / n as f64;
    let y = |v: f64| top + ph * (hi - v) / (hi - lo);

    let mut out = String::new();
    let _ = writeln!(out, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(out, r#"<rect x="0" y="0" width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(out, r#"<text x="{}" y="22" font-family="sans-serif" font-size="15" text-anchor="middle">{}</text>"#, w / 2.0, escape(title));
    let _ = writeln!(
        out,
        r#"<line x1="{left}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#,
        top + ph,
        left + pw,
        top + ph
    );
    let _ = writeln!(out, r#"<line x1="{left}" y1="{top}" x2="{left}" y2="{}" stroke="black"/>"#, top + ph);
    let _ = writeln!(
        out,
        r##"<line x1="{left}" y1="{:.2}" x2="{}" y2="{:.2}" stroke="#999" stroke-dasharray="4 3"/>"##,
        y(0.0),
        left + pw,
        y(0.0)
    );
    for (v, anchor) in [(hi, "end"), (lo, "end")] {
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{:.2}" font-family="sans-serif" font-size="11" text-anchor="{anchor}">{}</text>"#,
            left - 6.0,
            y(v) + 4.0,
            fixed(v, 1)
        );
    }
    if let (Some(a), Some(b)) = (c.timestamps.first(), c.timestamps.last()) {
        let _ = writeln!(out, r#"<text x="{left}" y="{}" font-family="sans-serif" font-size="11">{}</text>"#, top + ph + 18.0, &a[..10]);
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" font-family="sans-serif" font-size="11" text-anchor="end">{}</text>"#,
            left + pw,
            top + ph + 18.0,
            &b[..10]
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" font-family="sans-serif" font-size="12" text-anchor="middle">Time (UTC)</text>"#,
        left + pw / 2.0,
        h - 10.0
    );
    let _ = writeln!(
        out,
        r#"<text x="16" y="{}" font-family="sans-serif" font-size="12" text-anchor="middle" transform="rotate(-90 16 {})">Cumulative log return (%)</text>"#,
        top + ph / 2.0,
        top + ph / 2.0
    );
    for (k, token) in c.tokens.iter().enumerate() {
        let colour = PALETTE[k % PALETTE.len()];
        let points: Vec<String> = c.values.iter().enumerate().map(|(i, row)| format!("{:.2},{:.2}", x(i), y(row[k]))).collect();
        let _ = writeln!(out, r#"<polyline fill="none" stroke="{colour}" stroke-width="1.5" points="{}"/>"#, points.join(" "));
        let ly = top + 16.0 * k as f64 + 10.0;
        let _ = writeln!(out, r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{colour}" stroke-width="2"/>"#, left + pw + 10.0, left + pw + 30.0);
        let _ = writeln!(out, r#"<text x="{}" y="{}" font-family="sans-serif" font-size="12">{}</text>"#, left + pw + 36.0, ly + 4.0, escape(token));
    }
    out.push_str("</svg>\n");
    out
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
