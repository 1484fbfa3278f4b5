//! Subcommand bodies. Each one owns the output directory for its duration,
//! writes data files under `results/`, and records itself in the summary.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use chrono::{DateTime, Utc};

use kickoff::determinants::{
    emit_regression_csv, parse_regression_csv, run_determinants, DesignOptions, DeterminantInput, DeterminantsConfig,
    Dependent, MmConfig, RegressionSpec,
};
use kickoff::events::{
    match_study_events, parse_schedule, run_event_study, Dataset, MatchEvent, MatchWindowConfig, StudyConfig, StudyEvent,
    StudyTable, WindowLabel,
};
use kickoff::odds::parse_odds_csv;
use kickoff::report::{
    cumulative_returns, cumulative_svg, daily_markdown, emit_cumulative_csv, emit_event_csv, emit_match_summary_csv,
    emit_study_csv, match_summary, match_summary_markdown, parse_event_csv, parse_match_summary_csv, parse_study_csv,
    regression_markdown, study_markdown, CumulativeReturns,
};
use kickoff::synthetic::{generate, generate_daily, write_bars, DailySyntheticSpec, Shock, SyntheticSpec, TokenSpec};
use kickoff::timeseries::{
    emit_bar_csv, log_returns, parse_bar_csv, parse_timestamp, regularize, BarSeries, Frequency, ReturnSeries,
};

use crate::config::RunConfig;
use crate::output::{digest_inputs, digest_outputs, record_command, CommandRecord, OutputDir};

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

/// Every `*.csv` in `dir`, asset id taken from the file stem.
pub fn load_bars(dir: &Path, frequency: Frequency) -> Result<Vec<BarSeries>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading bar directory {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    files.sort();
    if files.is_empty() {
        bail!("no *.csv bar files in {}", dir.display());
    }
    files
        .iter()
        .map(|p| {
            let id = p.file_stem().unwrap().to_string_lossy().to_string();
            parse_bar_csv(&read(p)?, &id, frequency).with_context(|| format!("parsing {}", p.display()))
        })
        .collect()
}

fn load_schedule(cfg: &RunConfig) -> Result<Vec<MatchEvent>> {
    parse_schedule(&read(&cfg.matches)?).with_context(|| format!("parsing {}", cfg.matches.display()))
}

fn finish(out: &OutputDir, command: &str, cfg: &RunConfig, inputs: &[&Path], outputs: Vec<String>) -> Result<()> {
    let mut digests = BTreeMap::new();
    for p in inputs {
        digests.extend(digest_inputs(p)?);
    }
    let record = CommandRecord {
        inputs: digests,
        config: serde_json::to_value(cfg)?,
        outputs: digest_outputs(out, &outputs)?,
    };
    record_command(out, command, record)?;
    for o in &outputs {
        eprintln!("wrote {}", out.root().join(o).display());
    }
    Ok(())
}

pub fn ingest(cfg: &RunConfig) -> Result<()> {
    let out = OutputDir::acquire(&cfg.out)?;
    let bars = load_bars(&cfg.bars, cfg.frequency)?;
    let mut table = String::from("asset,rows,first,last,regular_rows,gap_filled\n");
    let mut outputs = Vec::new();
    fs::create_dir_all(out.root().join("bars"))?;
    for s in &bars {
        let (first, last) = (s.first_timestamp().unwrap(), s.last_timestamp().unwrap());
        let grid = regularize(s, first, last, cfg.gap_policy)?;
        let name = format!("bars/{}.csv", s.asset_id());
        fs::write(out.root().join(&name), emit_bar_csv(&grid))?;
        outputs.push(name);
        table.push_str(&format!(
            "{},{},{},{},{},{}\n",
            s.asset_id(),
            s.len(),
            kickoff::timeseries::format_timestamp(first),
            kickoff::timeseries::format_timestamp(last),
            grid.len(),
            grid.gap_filled_count()
        ));
    }
    outputs.push(out.write_result("ingest.csv", &table)?);
    finish(&out, "ingest", cfg, &[&cfg.bars], outputs)
}

fn window_config(cfg: &RunConfig) -> MatchWindowConfig {
    MatchWindowConfig {
        pre_match_bars: cfg.pre_match_bars,
        post_match_bars: cfg.post_match_bars,
        regular_match_includes_half_time: cfg.regular_includes_half_time,
    }
}

fn excluded_csv(tables: &[StudyTable]) -> String {
    let mut text = String::from("model,event_id,token_id,reason\n");
    for t in tables {
        for x in &t.excluded {
            text.push_str(&format!("{},{},{},\"{}\"\n", t.model.label(), x.event_id, x.token_id, x.reason.replace('"', "'")));
        }
    }
    text
}

pub fn event_study(cfg: &RunConfig) -> Result<()> {
    let out = OutputDir::acquire(&cfg.out)?;
    let bars = load_bars(&cfg.bars, Frequency::Minute)?;
    let dataset = Dataset::from_bars(&bars, cfg.gap_policy, cfg.volume_shift)?;
    let matches = load_schedule(cfg)?;
    let events = match_study_events(&matches, &window_config(cfg), Frequency::Minute);
    let study = StudyConfig {
        estimation: cfg.estimation_window(Frequency::Minute)?,
        execution: cfg.execution,
        ..StudyConfig::for_frequency(Frequency::Minute)
    };
    let mut tables = Vec::new();
    for model in cfg.model_kinds()? {
        let table = run_event_study(&dataset, &events, &model, &study).with_context(|| format!("model {model}"))?;
        for x in &table.excluded {
            eprintln!("model {model}: excluded event {} ({}): {}", x.event_id, x.token_id, x.reason);
        }
        tables.push(table);
    }
    let outputs = vec![
        out.write_result("study.csv", &emit_study_csv(&tables))?,
        out.write_result("event_cars.csv", &emit_event_csv(&tables))?,
        out.write_result("excluded.csv", &excluded_csv(&tables))?,
    ];
    finish(&out, "event-study", cfg, &[&cfg.bars, &cfg.matches], outputs)
}

pub fn daily_study(cfg: &RunConfig) -> Result<()> {
    let out = OutputDir::acquire(&cfg.out)?;
    let bars = load_bars(&cfg.bars, Frequency::Day)?;
    let dataset = Dataset::from_bars(&bars, cfg.gap_policy, cfg.volume_shift)?;
    let anchor = cfg.anchor_time()?;
    let windows = cfg.relative_windows()?;
    let events: Vec<StudyEvent> = cfg
        .tokens
        .iter()
        .enumerate()
        .map(|(i, t)| StudyEvent::relative(i as u32 + 1, t.clone(), anchor, &windows, Frequency::Day))
        .collect();
    let model = cfg.daily_model.parse().map_err(anyhow::Error::msg)?;
    let study = StudyConfig {
        estimation: cfg.estimation_window(Frequency::Day)?,
        execution: cfg.execution,
        ..StudyConfig::for_frequency(Frequency::Day)
    };
    let table = run_event_study(&dataset, &events, &model, &study)?;
    let tables = [table];
    let outputs = vec![
        out.write_result("daily_study.csv", &emit_study_csv(&tables))?,
        out.write_result("daily_event_cars.csv", &emit_event_csv(&tables))?,
    ];
    finish(&out, "daily-study", cfg, &[&cfg.bars], outputs)
}

pub fn classify_odds(cfg: &RunConfig) -> Result<()> {
    let out = OutputDir::acquire(&cfg.out)?;
    let matches = load_schedule(cfg)?;
    let odds = parse_odds_csv(&read(&cfg.odds)?).with_context(|| format!("parsing {}", cfg.odds.display()))?;
    let rows = match_summary(&matches, &odds, cfg.odds_threshold)?;
    let outputs = vec![out.write_result("match_summary.csv", &emit_match_summary_csv(&rows))?];
    finish(&out, "classify-odds", cfg, &[&cfg.matches, &cfg.odds], outputs)
}

pub fn determinants(cfg: &RunConfig) -> Result<()> {
    let out = OutputDir::acquire(&cfg.out)?;
    let matches = load_schedule(cfg)?;
    let cars_text = out.read_result("event_cars.csv")?.context("results/event_cars.csv not found; run event-study first")?;
    let cars = parse_event_csv(&cars_text)?;
    let full = WindowLabel::FullMatch.key();
    let inputs: Vec<DeterminantInput> = matches
        .iter()
        .filter_map(|m| {
            cars.iter()
                .find(|r| r.model == cfg.determinants_model && r.window == full && r.event_id == m.event_id)
                .map(|r| DeterminantInput { event: m.clone(), car_full_match_pct: r.car, cav_full_match: r.cav })
        })
        .collect();
    if inputs.is_empty() {
        bail!("no full-match CARs for model `{}` in results/event_cars.csv", cfg.determinants_model);
    }
    let config = DeterminantsConfig {
        design: DesignOptions { controls: cfg.controls, token_reference: cfg.token_reference.clone() },
        mm: MmConfig { n_subsamples: cfg.mm_subsamples, seed: cfg.seed, execution: cfg.execution, ..MmConfig::default() },
        execution: cfg.execution,
    };
    let mut specs = RegressionSpec::table_layout(Dependent::CarFullMatch);
    specs.extend(RegressionSpec::table_layout(Dependent::CavFullMatch));
    let columns = run_determinants(&inputs, &specs, &config)?;
    let outputs = vec![out.write_result("determinants.csv", &emit_regression_csv(&columns))?];
    let cars_path = out.results().join("event_cars.csv");
    finish(&out, "determinants", cfg, &[&cfg.matches, &cars_path], outputs)
}

fn parse_bound(text: &Option<String>) -> Result<Option<DateTime<Utc>>> {
    text.as_deref().map(|t| parse_timestamp(t).map_err(anyhow::Error::msg)).transpose()
}

const SVG_MAX_POINTS: usize = 2000;

pub fn plot(cfg: &RunConfig) -> Result<()> {
    let out = OutputDir::acquire(&cfg.out)?;
    let bars = load_bars(&cfg.bars, cfg.frequency)?;
    let selected: Vec<&BarSeries> = cfg.tokens.iter().filter_map(|t| bars.iter().find(|b| b.asset_id() == t)).collect();
    if selected.is_empty() {
        bail!("none of the tokens {:?} has a bar file", cfg.tokens);
    }
    let start = parse_bound(&cfg.plot_start)?.unwrap_or_else(|| selected.iter().map(|s| s.first_timestamp().unwrap()).max().unwrap());
    let end = parse_bound(&cfg.plot_end)?.unwrap_or_else(|| selected.iter().map(|s| s.last_timestamp().unwrap()).min().unwrap());
    let series: Vec<ReturnSeries> = selected
        .iter()
        .map(|s| Ok(log_returns(&regularize(s, start, end, cfg.gap_policy)?)?))
        .collect::<Result<_>>()?;
    let refs: Vec<&ReturnSeries> = series.iter().collect();
    let cumulative = cumulative_returns(&refs)?;
    let stride = cumulative.timestamps.len().div_ceil(SVG_MAX_POINTS).max(1);
    let mut thinned = CumulativeReturns {
        timestamps: cumulative.timestamps.iter().step_by(stride).cloned().collect(),
        tokens: cumulative.tokens.clone(),
        values: cumulative.values.iter().step_by(stride).cloned().collect(),
    };
    if (cumulative.timestamps.len() - 1) % stride != 0 {
        thinned.timestamps.push(cumulative.timestamps.last().unwrap().clone());
        thinned.values.push(cumulative.values.last().unwrap().clone());
    }
    let outputs = vec![
        out.write_result("cumulative_returns.csv", &emit_cumulative_csv(&cumulative))?,
        out.write_result("cumulative_returns.svg", &cumulative_svg(&thinned, "Cumulative token returns"))?,
    ];
    finish(&out, "plot", cfg, &[&cfg.bars], outputs)
}

#[derive(Debug, Clone, Default)]
pub struct SynthOptions {
    pub spec: Option<PathBuf>,
    pub events: Option<usize>,
    pub noise: Option<f64>,
    pub volume_noise: Option<f64>,
    pub shocks: Vec<String>,
    pub volume_shocks: Vec<String>,
    pub loaded: bool,
    pub daily: bool,
}

fn parse_shock(text: &str) -> Result<Shock> {
    let (w, v) = text.split_once('=').with_context(|| format!("shock `{text}`: expected window=value"))?;
    let window = WindowLabel::parse(w.trim()).with_context(|| format!("unknown window `{w}`"))?;
    Ok(Shock { window, per_bar: v.trim().parse().with_context(|| format!("shock value `{v}`"))? })
}

pub fn synth(cfg: &RunConfig, opts: &SynthOptions) -> Result<()> {
    let out = OutputDir::acquire(&cfg.out)?;
    let tokens = if opts.loaded { TokenSpec::loaded_set() } else { TokenSpec::null_set() };
    let written: Vec<PathBuf> = if opts.daily {
        let mut spec = DailySyntheticSpec { anchor: cfg.anchor_time()?, seed: cfg.seed, tokens, ..Default::default() };
        if let Some(n) = opts.noise {
            spec.noise_sd = n;
        }
        for s in &opts.shocks {
            let (w, v) = s.split_once('=').with_context(|| format!("shock `{s}`: expected first..last=value"))?;
            spec.shocks.push((w.parse().map_err(anyhow::Error::msg)?, v.trim().parse()?));
        }
        write_bars(out.root(), &generate_daily(&spec))?
    } else {
        let mut spec: SyntheticSpec = match &opts.spec {
            Some(p) => serde_json::from_str(&read(p)?).with_context(|| format!("parsing {}", p.display()))?,
            None => SyntheticSpec { tokens, seed: cfg.seed, ..Default::default() },
        };
        if let Some(n) = opts.events {
            spec.n_events = n;
        }
        if let Some(n) = opts.noise {
            spec.noise_sd = n;
        }
        if let Some(n) = opts.volume_noise {
            spec.volume_noise_sd = n;
        }
        for s in &opts.shocks {
            spec.return_shocks.push(parse_shock(s)?);
        }
        for s in &opts.volume_shocks {
            spec.volume_shocks.push(parse_shock(s)?);
        }
        generate(&spec).write_to(out.root())?
    };
    let outputs: Vec<String> = written
        .iter()
        .map(|p| p.strip_prefix(out.root()).unwrap_or(p).to_string_lossy().replace('\\', "/"))
        .collect();
    let inputs: Vec<&Path> = opts.spec.iter().map(PathBuf::as_path).collect();
    finish(&out, "synth", cfg, &inputs, outputs)
}

/// Renders Markdown tables from whichever result files exist.
pub fn report(cfg: &RunConfig) -> Result<()> {
    let out = OutputDir::acquire(&cfg.out)?;
    let mut sections: Vec<(String, String, String)> = Vec::new();
    if let Some(text) = out.read_result("match_summary.csv")? {
        let md = match_summary_markdown(&parse_match_summary_csv(&text)?)?;
        sections.push(("table1.md".into(), "Table 1. Matches, outcomes and de-vigged odds".into(), md));
    }
    if let Some(text) = out.read_result("study.csv")? {
        let md = study_markdown(&parse_study_csv(&text)?)?;
        sections.push(("table2.md".into(), "Table 2. Intraday CAARs and CAAVs by match window".into(), md));
    }
    if let Some(text) = out.read_result("determinants.csv")? {
        let rows = parse_regression_csv(&text)?;
        sections.push((
            "table3.md".into(),
            "Table 3. Determinants of full-match CARs (OLS and MM)".into(),
            regression_markdown(&rows, "car", 4)?,
        ));
        sections.push((
            "table4.md".into(),
            "Table 4. Determinants of full-match CAVs (OLS and MM)".into(),
            regression_markdown(&rows, "cav", 3)?,
        ));
    }
    if let Some(text) = out.read_result("daily_study.csv")? {
        let md = daily_markdown(&parse_study_csv(&text)?)?;
        sections.push(("table5.md".into(), "Table 5. Daily CARs around the tournament".into(), md));
    }
    if sections.is_empty() {
        bail!("no result files under {}; run a study command first", out.results().display());
    }
    let mut outputs = Vec::new();
    let mut combined = String::new();
    for (file, title, body) in &sections {
        outputs.push(out.write_result(file, &format!("## {title}\n\n{body}"))?);
        combined.push_str(&format!("## {title}\n\n{body}\n"));
    }
    let combined = format!("{}\n", combined.trim_end_matches('\n'));
    outputs.push(out.write_result("report.md", &combined)?);
    let inputs: Vec<PathBuf> = ["match_summary.csv", "study.csv", "determinants.csv", "daily_study.csv"]
        .iter()
        .map(|n| out.results().join(n))
        .filter(|p| p.exists())
        .collect();
    let input_refs: Vec<&Path> = inputs.iter().map(PathBuf::as_path).collect();
    finish(&out, "report", cfg, &input_refs, outputs)
}
