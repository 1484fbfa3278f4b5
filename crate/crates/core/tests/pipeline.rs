use chrono::Duration;
use kickoff::events::{
    match_study_events, run_event_study, Dataset, MatchWindowConfig, RelativeWindow, StudyConfig, StudyEvent, WindowLabel,
};
use kickoff::models::ModelKind;
use kickoff::synthetic::{generate, generate_daily, DailySyntheticSpec, Shock, SyntheticSpec, TokenSpec};
use kickoff::timeseries::{Frequency, GapPolicy, DEFAULT_VOLUME_SHIFT};
use kickoff::Execution;

fn models() -> Vec<ModelKind> {
    vec![ModelKind::ConstantMean, ModelKind::market("BTC"), ModelKind::market("CHZ")]
}

fn minute_study(spec: &SyntheticSpec, model: &ModelKind, exec: Execution) -> kickoff::events::StudyTable {
    let data = generate(spec);
    let dataset = Dataset::from_bars(&data.bars, GapPolicy::ForwardFill, DEFAULT_VOLUME_SHIFT).unwrap();
    let events = match_study_events(&data.matches, &MatchWindowConfig::default(), Frequency::Minute);
    let config = StudyConfig { execution: exec, ..StudyConfig::for_frequency(Frequency::Minute) };
    run_event_study(&dataset, &events, model, &config).unwrap()
}

#[test]
fn null_dataset_has_no_abnormal_effects() {
    let spec = SyntheticSpec::default();
    for model in models() {
        let table = minute_study(&spec, &model, Execution::Parallel);
        assert!(table.excluded.is_empty());
        assert_eq!(table.rows.len(), 7);
        for row in &table.rows {
            assert!(row.returns.mean.abs() < 1e-9, "{model} {} CAAR {}", row.window, row.returns.mean);
            assert!(row.volume.mean.abs() < 1e-9, "{model} {} CAV {}", row.window, row.volume.mean);
        }
        for e in &table.events {
            assert!(e.car.abs() < 1e-9 && e.cav.abs() < 1e-9);
        }
    }
}

#[test]
fn market_models_absorb_market_loading() {
    let spec = SyntheticSpec { tokens: TokenSpec::loaded_set(), n_events: 8, ..Default::default() };
    for model in [ModelKind::market("BTC"), ModelKind::market("CHZ")] {
        let table = minute_study(&spec, &model, Execution::Parallel);
        for e in &table.events {
            assert!(e.car.abs() < 1e-9, "{model} event {} {} {}", e.event_id, e.window, e.car);
            assert!(e.cav.abs() < 1e-9);
        }
    }
    // the constant-mean model does not see the market and leaves residue
    let cm = minute_study(&spec, &ModelKind::ConstantMean, Execution::Parallel);
    assert!(cm.events.iter().any(|e| e.car.abs() > 1e-3));
}

#[test]
fn second_half_shock_is_recovered() {
    let spec = SyntheticSpec {
        return_shocks: vec![Shock { window: WindowLabel::SecondHalf, per_bar: 5.0 }],
        ..Default::default()
    };
    let data = generate(&spec);
    for model in models() {
        let table = minute_study(&spec, &model, Execution::Parallel);
        for e in &table.events {
            let m = data.matches.iter().find(|m| m.event_id == e.event_id).unwrap();
            let second_half_bars = ((m.second_half_end() - m.second_half_start).num_minutes()) as f64;
            match e.window {
                WindowLabel::SecondHalf | WindowLabel::RegularMatch | WindowLabel::FullMatch => {
                    assert!((e.car - 5.0 * second_half_bars).abs() < 1e-9, "{model} {} {}", e.window, e.car)
                }
                _ => assert!(e.car.abs() < 1e-9, "{model} {} {}", e.window, e.car),
            }
        }
    }
}

#[test]
fn windows_are_additive_with_noise() {
    let spec = SyntheticSpec { noise_sd: 0.3, volume_noise_sd: 0.2, n_events: 6, ..Default::default() };
    let table = minute_study(&spec, &ModelKind::market("BTC"), Execution::Parallel);
    for id in table.events.iter().map(|e| e.event_id) {
        let get = |w: WindowLabel| table.events.iter().find(|e| e.event_id == id && e.window == w).unwrap();
        let parts = get(WindowLabel::FirstHalf).car + get(WindowLabel::HalfTime).car + get(WindowLabel::SecondHalf).car;
        assert!((parts - get(WindowLabel::RegularMatch).car).abs() < 1e-9);
        let vparts = get(WindowLabel::FirstHalf).cav + get(WindowLabel::HalfTime).cav + get(WindowLabel::SecondHalf).cav;
        assert!((vparts - get(WindowLabel::RegularMatch).cav).abs() < 1e-9);
    }
}

#[test]
fn parallel_and_sequential_agree_bitwise() {
    let spec = SyntheticSpec { noise_sd: 0.3, volume_noise_sd: 0.2, n_events: 6, ..Default::default() };
    let a = minute_study(&spec, &ModelKind::market("CHZ"), Execution::Parallel);
    let b = minute_study(&spec, &ModelKind::market("CHZ"), Execution::Sequential);
    assert_eq!(a, b);
}

#[test]
fn short_history_event_is_excluded() {
    let data = generate(&SyntheticSpec { n_events: 3, ..Default::default() });
    let dataset = Dataset::from_bars(&data.bars, GapPolicy::ForwardFill, DEFAULT_VOLUME_SHIFT).unwrap();
    let mut events = match_study_events(&data.matches, &MatchWindowConfig::default(), Frequency::Minute);
    // shift the first event so its estimation window predates the data
    let shift = Duration::minutes(600);
    let e = &mut events[0];
    e.anchor -= shift;
    for w in &mut e.windows {
        for s in &mut w.spans {
            s.start -= shift;
            s.end -= shift;
        }
    }
    let table = run_event_study(&dataset, &events, &ModelKind::ConstantMean, &StudyConfig::for_frequency(Frequency::Minute))
        .unwrap();
    assert_eq!(table.excluded.len(), 1);
    assert_eq!(table.excluded[0].event_id, 1);
    assert_eq!(table.rows[0].returns.n, 2);
}

#[test]
fn daily_constant_abnormal_return() {
    let a = 0.75;
    let spec = DailySyntheticSpec { shocks: vec![(RelativeWindow::new(-120, 56), a)], ..Default::default() };
    let bars = generate_daily(&spec);
    let dataset = Dataset::from_bars(&bars, GapPolicy::ForwardFill, DEFAULT_VOLUME_SHIFT).unwrap();
    let windows = RelativeWindow::tournament_defaults();
    let events: Vec<StudyEvent> = spec
        .tokens
        .iter()
        .enumerate()
        .map(|(i, t)| StudyEvent::relative(i as u32 + 1, t.id.clone(), spec.anchor, &windows, Frequency::Day))
        .collect();
    let table =
        run_event_study(&dataset, &events, &ModelKind::market("BTC"), &StudyConfig::for_frequency(Frequency::Day)).unwrap();
    assert_eq!(table.rows.len(), 5);
    for (row, w) in table.rows.iter().zip(&windows) {
        let len = (w.last - w.first + 1) as f64;
        assert!((row.returns.mean - len * a).abs() < 1e-9, "{} {}", row.window, row.returns.mean);
        assert_eq!(row.returns.n, 4);
    }
}
