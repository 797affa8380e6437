use std::fs;
use std::path::{Path, PathBuf};

use gridcc::cli::{dispatch, EXIT_INFEASIBLE, EXIT_INPUT, EXIT_OK};
use gridcc::error::Error;
use gridcc::io::{write_signal, RunConfig};
use gridcc::opf::ProductKind;
use gridcc::reference::{reference_data, write_files, SUMMER_WEEK};
use gridcc::signal::{FrequencySignal, SignalKind};

fn shipped_config() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/reference/ref.json")
}

/// Reference inputs in `dir`, trimmed to a quick deterministic run.
fn quick_config(dir: &Path, steps: usize, edit: impl FnOnce(&mut serde_json::Value)) -> PathBuf {
    let path = write_files(dir, &reference_data(), ProductKind::None, SUMMER_WEEK, SUMMER_WEEK + steps).unwrap();
    let mut v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    v["uncertainty"] = false.into();
    v["settings"]["islanding"] = false.into();
    v["options"]["check_islanding"] = false.into();
    v["horizon"]["horizon"] = 6.into();
    edit(&mut v);
    fs::write(&path, serde_json::to_string_pretty(&v).unwrap()).unwrap();
    path
}

fn run(args: &[&str]) -> i32 {
    dispatch(std::iter::once("gridcc").chain(args.iter().copied()))
}

#[test]
fn check_data_on_shipped_reference() {
    let cfg = shipped_config();
    assert_eq!(run(&["check-data", "--config", cfg.to_str().unwrap()]), EXIT_OK);
}

#[test]
fn shipped_reference_matches_generator() {
    let loaded = RunConfig::load(&shipped_config()).unwrap().load_scenario().unwrap().scenario;
    let data = reference_data();
    assert_eq!(loaded.fleet.pv.len(), 4);
    assert_eq!(loaded.fleet.bess[0].e_cap_kwh, 484.0);
    let t = SUMMER_WEEK + 12;
    for (a, b) in loaded.fleet.pv.iter().zip(&data.fleet.pv) {
        assert!((a.p_max_profile[t] - b.p_max_profile[t]).abs() <= 5e-5);
    }
    assert!((loaded.prices.c_buy[t] - data.prices.c_buy[t]).abs() <= 5e-5);
}

#[test]
fn unknown_subcommand_is_an_input_error() {
    assert_eq!(run(&["frobnicate"]), EXIT_INPUT);
    assert_eq!(run(&["run-mpc"]), EXIT_INPUT);
}

#[test]
fn missing_row_is_reported_with_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick_config(dir.path(), 1, |_| {});
    let series = dir.path().join("series.csv");
    let text = fs::read_to_string(&series).unwrap();
    let cut: Vec<&str> = text.lines().enumerate().filter(|(i, _)| *i != 101).map(|x| x.1).collect();
    fs::write(&series, cut.join("\n")).unwrap();
    match RunConfig::load(&cfg).unwrap().load_scenario() {
        Err(Error::Schema { line, msg, .. }) => {
            assert_eq!(line, 102);
            assert!(msg.contains("gap") && msg.contains("after 99"), "{msg}");
        }
        other => panic!("{:?}", other.err()),
    }
    assert_eq!(run(&["check-data", "--config", cfg.to_str().unwrap()]), EXIT_INPUT);
}

#[test]
fn missing_input_file_is_an_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick_config(dir.path(), 1, |v| v["prices"] = "nowhere.csv".into());
    assert_eq!(run(&["run-mpc", "--config", cfg.to_str().unwrap()]), EXIT_INPUT);
}

#[test]
fn run_mpc_bundle_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick_config(dir.path(), 3, |_| {});
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let code = run(&["run-mpc", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--seed", "5"]);
        assert_eq!(code, EXIT_OK);
    }
    let csv_a = fs::read(a.join("steps.csv")).unwrap();
    assert_eq!(csv_a, fs::read(b.join("steps.csv")).unwrap());
    assert_eq!(fs::read(a.join("steps.json")).unwrap(), fs::read(b.join("steps.json")).unwrap());
    assert_eq!(String::from_utf8(csv_a).unwrap().lines().count(), 4);
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["status"], "ok");
    assert_eq!(m["seeds"]["mc"], 5);
    assert_eq!(m["files"].as_array().unwrap().len(), 3);
    assert!(m["wall_clock_s"].as_f64().unwrap() > 0.0);
}

#[test]
fn config_hash_follows_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick_config(dir.path(), 1, |_| {});
    let h1 = RunConfig::load(&cfg).unwrap().hash().unwrap();
    assert_eq!(h1, RunConfig::load(&cfg).unwrap().hash().unwrap());
    let prices = dir.path().join("prices.csv");
    let mut text = fs::read_to_string(&prices).unwrap();
    text.push('\n');
    fs::write(&prices, text).unwrap();
    assert_ne!(h1, RunConfig::load(&cfg).unwrap().hash().unwrap());
}

#[test]
fn unservable_cap_exits_infeasible_with_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick_config(dir.path(), 1, |v| v["substation_cap_kva"] = 1.0.into());
    let out = dir.path().join("out");
    let code = run(&["run-mpc", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code, EXIT_INFEASIBLE);
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["status"], "infeasible");
    assert!(out.join("steps.csv").is_file());
}

#[test]
fn analyze_signal_of_constant_half_activation() {
    let dir = tempfile::tempdir().unwrap();
    let sig = dir.path().join("sig.csv");
    write_signal(&sig, &FrequencySignal::new(SignalKind::Activation, 1_467_331_200, vec![0.5; 5 * 3600])).unwrap();
    let out = dir.path().join("out");
    assert_eq!(run(&["analyze-signal", "--signal", sig.to_str().unwrap(), "--out", out.to_str().unwrap()]), EXIT_OK);
    let mut rdr = csv::Reader::from_path(out.join("worst_case.csv")).unwrap();
    let rows: Vec<(usize, f64, f64)> = rdr.deserialize().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 4);
    for (h, up, down) in rows {
        assert!((up - 0.5).abs() < 1e-9 && down.abs() < 1e-12, "hour {h}");
    }
}

#[test]
fn epsilon_override_is_validated() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick_config(dir.path(), 1, |_| {});
    assert_eq!(run(&["check-data", "--config", cfg.to_str().unwrap(), "--epsilon", "0.7"]), EXIT_INPUT);
}
