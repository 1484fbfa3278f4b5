use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn kickoff(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kickoff")).current_dir(dir).args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn fixtures() -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

#[test]
fn help_and_version_succeed() {
    let dir = tempfile::tempdir().unwrap();
    assert!(kickoff(dir.path(), &["--help"]).status.success());
    let v = kickoff(dir.path(), &["--version"]);
    assert!(String::from_utf8_lossy(&v.stdout).contains(env!("CARGO_PKG_VERSION")));
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let o = kickoff(dir.path(), &["report", "--set", "colour=red"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("unknown config key `colour`"), "{}", stderr(&o));

    fs::write(dir.path().join("run.cfg"), "models = garch\n").unwrap();
    let o = kickoff(dir.path(), &["event-study", "--config", "run.cfg"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("garch"), "{}", stderr(&o));
}

#[test]
fn missing_inputs_fail_with_context() {
    let dir = tempfile::tempdir().unwrap();
    let o = kickoff(dir.path(), &["event-study", "--bars", "nowhere", "--out", "out"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("nowhere"), "{}", stderr(&o));
    // the lock is released after a failed run
    assert!(!dir.path().join("out/.kickoff.lock").exists());

    let o = kickoff(dir.path(), &["determinants", "--out", "out", "--matches", "m.json"]);
    assert!(!o.status.success());

    let o = kickoff(dir.path(), &["report", "--out", "out"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("no result files"), "{}", stderr(&o));
}

#[test]
fn locked_output_directory_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    fs::create_dir_all(dir.path().join("out")).unwrap();
    fs::write(dir.path().join("out/.kickoff.lock"), "").unwrap();
    let o = kickoff(dir.path(), &["synth", "--out", "out", "--events", "2"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("locked"), "{}", stderr(&o));
}

#[test]
fn penalty_match_without_regulation_end_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(fixtures().join("matches.json")).unwrap();
    let mut schedule: serde_json::Value = serde_json::from_str(&text).unwrap();
    let shootout = schedule.as_array_mut().unwrap().iter_mut().find(|m| m["penalties"] == true).unwrap();
    shootout.as_object_mut().unwrap().remove("regulation_end_utc");
    fs::write(dir.path().join("m.json"), serde_json::to_string(&schedule).unwrap()).unwrap();
    let odds = fixtures().join("odds.csv");
    let o = kickoff(dir.path(), &["classify-odds", "--matches", "m.json", "--odds", odds.to_str().unwrap(), "--out", "out"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("regulation"), "{}", stderr(&o));
}

#[test]
fn tournament_fixture_classifies_every_defeat_as_surprise() {
    let dir = tempfile::tempdir().unwrap();
    let f = fixtures();
    let (m, odds) = (f.join("matches.json"), f.join("odds.csv"));
    let o = kickoff(dir.path(), &["classify-odds", "--matches", m.to_str().unwrap(), "--odds", odds.to_str().unwrap(), "--out", "out"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("out/results/match_summary.csv")).unwrap();
    let mut reader = csv::Reader::from_reader(csv.as_bytes());
    let headers = reader.headers().unwrap().clone();
    let col = |name: &str| headers.iter().position(|h| h == name).unwrap();
    let rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 21);
    let first = &rows[0];
    assert_eq!(&first[col("expectation")], "expected_victory");
    assert_eq!(&first[col("surprise")], "true");
    for r in &rows {
        if &r[col("outcome")] == "defeat" {
            assert_eq!(&r[col("surprise")], "true", "{r:?}");
        }
    }
    let o = kickoff(dir.path(), &["report", "--out", "out"]);
    assert!(o.status.success());
    let table = fs::read_to_string(dir.path().join("out/results/table1.md")).unwrap();
    assert!(table.contains("| 1 | Nov 22, 2022 | 10:00 | ARG vs. Saudi Arabia | Group stage 1 | Defeat ^S | 1:2 | 85.8% | 10.4% | 3.8% | 4.1% |"), "{table}");
}

#[test]
fn summary_records_each_command_without_timestamps() {
    let dir = tempfile::tempdir().unwrap();
    assert!(kickoff(dir.path(), &["synth", "--out", "data", "--events", "2"]).status.success());
    let o = kickoff(dir.path(), &["classify-odds", "--matches", "data/matches.json", "--odds", "data/odds.csv", "--out", "data"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("data/results/summary.json")).unwrap()).unwrap();
    let commands = summary["commands"].as_object().unwrap();
    assert!(commands.contains_key("synth") && commands.contains_key("classify-odds"));
    let outputs = commands["classify-odds"]["outputs"].as_object().unwrap();
    assert_eq!(outputs["results/match_summary.csv"].as_str().unwrap().len(), 64);
    assert!(commands["classify-odds"]["inputs"].as_object().unwrap().contains_key("data/odds.csv"));
}
