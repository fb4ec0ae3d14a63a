use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use equidecomp::dgp::{self, reference_roles, ScmConfig};
use equidecomp::estimator::{decompose_weighted, EstimatorConfig};
use equidecomp::partition::{hypertension_schema, preset, Preset};
use equidecomp::{Backend, Standardization};
use equidecomp_cli::{ingest_csv, IngestSpec, RunConfig};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_equidecomp"))
}

fn data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data")
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Golden config with the input made absolute and the output redirected.
fn golden_config(dir: &Path, edit: impl FnOnce(&mut String)) -> PathBuf {
    let mut text = std::fs::read_to_string(data_dir().join("golden.toml")).unwrap();
    let input = data_dir().join("reference_cohort.csv");
    text = text.replace("\"reference_cohort.csv\"", &format!("{:?}", input.to_str().unwrap()));
    edit(&mut text);
    let path = dir.join("run.toml");
    std::fs::write(&path, text).unwrap();
    path
}

fn report_json(stem: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(stem.with_extension("json")).unwrap()).unwrap()
}

#[test]
fn golden_reference_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = golden_config(dir.path(), |_| {});
    let o = run(&["decompose", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let report = report_json(&dir.path().join("report"));
    let golden: BTreeMap<String, f64> =
        serde_json::from_str(&std::fs::read_to_string(data_dir().join("golden_estimate.json")).unwrap()).unwrap();
    for (key, want) in &golden {
        let got = report["estimate"][key].as_f64().unwrap();
        assert!((got - want).abs() <= 1e-9, "{key}: {got} vs golden {want}");
    }
    assert_eq!(report["seed"], 11);
    assert_eq!(report["assumptions"][0]["status"], "declared");
    assert!(report["weights"]["counterfactual"]["ess"].as_f64().unwrap() > 0.0);
    assert!(report["models"].as_array().unwrap().len() >= 3);
}

/// The committed cohort is the seeded reference generator's output; running
/// the library on the in-memory table must give the same estimate as the
/// CSV path.
#[test]
fn golden_matches_in_memory_pipeline() {
    let table = dgp::generate(&ScmConfig::reference().with_seed(2024), 3000).unwrap();
    let mut csv = Vec::new();
    table.write_csv(&mut csv, None).unwrap();
    assert_eq!(csv, std::fs::read(data_dir().join("reference_cohort.csv")).unwrap());

    let partition = preset(Preset::Meaningful, &hypertension_schema());
    let config = EstimatorConfig::new(Backend::Rmpw, Standardization::Pooled);
    let direct = decompose_weighted(&table, &reference_roles(), &partition, &config).unwrap().estimate;
    let golden: BTreeMap<String, f64> =
        serde_json::from_str(&std::fs::read_to_string(data_dir().join("golden_estimate.json")).unwrap()).unwrap();
    assert!((direct.reduction - golden["reduction"]).abs() <= 1e-9);
    assert!((direct.residual - golden["residual"]).abs() <= 1e-9);
    assert!((direct.observed - golden["observed"]).abs() <= 1e-9);
}

#[test]
fn repeated_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = golden_config(dir.path(), |t| t.push_str("\n[bootstrap]\nreplicates = 25\n"));
    let mut bodies = Vec::new();
    for _ in 0..2 {
        let o = run(&["decompose", "--config", cfg.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        bodies.push((
            std::fs::read(dir.path().join("report.json")).unwrap(),
            std::fs::read(dir.path().join("report.txt")).unwrap(),
        ));
    }
    assert_eq!(bodies[0], bodies[1]);
}

#[test]
fn config_echo_replays_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = golden_config(dir.path(), |t| t.push_str("\n[bootstrap]\nreplicates = 15\n"));
    let o = run(&["decompose", "--config", cfg.to_str().unwrap(), "--seed", "5"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let first = report_json(&dir.path().join("report"));

    let echoed: RunConfig = serde_json::from_value(first["config"].clone()).unwrap();
    let replay = dir.path().join("replay.toml");
    std::fs::write(&replay, echoed.to_toml()).unwrap();
    let o = run(&["decompose", "--config", replay.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(report_json(&dir.path().join("report")), first);
}

#[test]
fn overlapping_sets_exit_2_and_name_the_variable() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = golden_config(dir.path(), |t| {
        *t = t.replace("preset = 6\n", "").replace(
            "[schema]\nage = \"demographic\"\nsex = \"demographic\"\nedu = \"socioeconomic\"\nins = \"socioeconomic\"\ndia = \"clinical\"\nl1 = \"clinical\"\n",
            "[partition]\noutcome_allowable = [\"age\", \"dia\"]\nnon_allowable = [\"dia\"]\n",
        );
    });
    let o = run(&["decompose", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("`dia`"), "{}", stderr(&o));
}

#[test]
fn malformed_config_and_cells_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = golden_config(dir.path(), |t| t.push_str("\nmystery = 1\n"));
    assert_eq!(run(&["decompose", "--config", cfg.to_str().unwrap()]).status.code(), Some(2));

    let csv = dir.path().join("bad.csv");
    std::fs::write(&csv, "race,a,m,y\nb,x,0,1\nw,x,1,zero\n").unwrap();
    let text = format!(
        "input = {:?}\noutput = \"r\"\nseed = 1\nbackend = \"rmpw\"\n[roles]\nrace = \"race\"\nmarginalized = \"b\"\nprivileged = \"w\"\ntarget = \"m\"\noutcome = \"y\"\n[partition]\noutcome_allowable = [\"a\"]\n[levels]\na = [\"x\"]\n",
        csv.to_str().unwrap()
    );
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, text).unwrap();
    let o = run(&["decompose", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("line 3") && err.contains("`y`"), "{err}");
}

/// Small categorical cohort written as CSV with a matching config.
fn toy_run(dir: &Path, rows: &[(&str, &str, &str, &str)], extra: &str) -> PathBuf {
    let csv = dir.join("toy.csv");
    let mut body = String::from("race,a,m,y\n");
    for (r, a, m, y) in rows {
        body.push_str(&format!("{r},{a},{m},{y}\n"));
    }
    std::fs::write(&csv, body).unwrap();
    let text = format!(
        "input = {:?}\noutput = \"toy\"\nseed = 1\nbackend = \"rmpw\"\n[roles]\nrace = \"race\"\nmarginalized = \"b\"\nprivileged = \"w\"\ntarget = \"m\"\noutcome = \"y\"\n[partition]\ntarget_allowable = [\"a\"]\n[levels]\na = [\"p\", \"q\"]\nm = [\"0\", \"1\"]\n{extra}",
        csv.to_str().unwrap()
    );
    let cfg = dir.join("toy.toml");
    std::fs::write(&cfg, text).unwrap();
    cfg
}

#[test]
fn support_failure_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    // Stratum a = q has no privileged rows.
    let rows = [
        ("b", "p", "0", "0"),
        ("b", "p", "1", "1"),
        ("b", "q", "0", "1"),
        ("b", "q", "1", "0"),
        ("w", "p", "0", "1"),
        ("w", "p", "1", "0"),
    ];
    let cfg = toy_run(dir.path(), &rows, "[models]\nkind = \"saturated\"\n");
    let o = run(&["decompose", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    let o = run(&["check", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    let report = report_json(&dir.path().join("toy"));
    assert!(!report["positivity"]["violations"].as_array().unwrap().is_empty());
}

#[test]
fn degenerate_model_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    // The target never varies among the privileged group.
    let rows = [
        ("b", "p", "0", "0"),
        ("b", "p", "1", "1"),
        ("b", "q", "0", "1"),
        ("b", "q", "1", "0"),
        ("w", "p", "1", "1"),
        ("w", "q", "1", "0"),
        ("w", "p", "1", "0"),
        ("w", "q", "1", "1"),
    ];
    let cfg = toy_run(dir.path(), &rows, "");
    let o = run(&["decompose", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
}

#[test]
fn clean_toy_run_exits_0() {
    let dir = tempfile::tempdir().unwrap();
    let mut rows = Vec::new();
    for r in ["b", "w"] {
        for a in ["p", "q"] {
            for m in ["0", "1"] {
                for y in ["0", "1"] {
                    rows.push((r, a, m, y));
                }
            }
        }
    }
    rows.push(("b", "p", "1", "1"));
    let cfg = toy_run(dir.path(), &rows, "[models]\nkind = \"saturated\"\n");
    let o = run(&["check", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let o = run(&["decompose", "--config", cfg.to_str().unwrap(), "--backend", "iorw"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let e = &report_json(&dir.path().join("toy"))["estimate"];
    let gap = e["reduction"].as_f64().unwrap() + e["residual"].as_f64().unwrap() - e["observed"].as_f64().unwrap();
    assert!(gap.abs() <= 1e-9);
    assert_eq!(e["backend"], "iorw");
}

#[test]
fn simulate_requires_seed() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("c.csv");
    let o = run(&["simulate", "--rows", "10", "--output", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!out.exists());
}

#[test]
fn simulated_cohort_round_trips_through_ingest() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("c.csv");
    let o = run(&["simulate", "--seed", "9", "--rows", "500", "--output", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));

    let expected = dgp::generate(&ScmConfig::reference().with_seed(9), 500).unwrap();
    let categorical = expected
        .names()
        .iter()
        .zip(expected.columns())
        .filter_map(|(n, c)| c.levels().map(|l| (n.clone(), Some(l.to_vec()))))
        .collect();
    let (table, report) = ingest_csv(&out, &IngestSpec { categorical, ..Default::default() }).unwrap();
    assert_eq!(report.rows_retained, 500);
    assert_eq!(table, expected);
}

#[test]
fn reductions_matrix_passes() {
    let o = run(&["reductions", "--joints", "12", "--seed", "3"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = String::from_utf8_lossy(&o.stdout);
    assert_eq!(out.lines().filter(|l| l.ends_with("PASS")).count(), 7, "{out}");
    assert!(out.contains("PSE-II"));
}
