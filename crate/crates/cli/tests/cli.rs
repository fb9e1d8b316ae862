use std::fs;
use std::path::Path;
use std::process::Command;

use late_balance::simlab::{generate, RoyDesign};
use late_balance::DesignLabel;
use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_late-balance"))
}

fn run(dir: &Path, args: &[&str]) -> (i32, String) {
    let out = bin().current_dir(dir).args(args).output().unwrap();
    (out.status.code().unwrap_or(-1), String::from_utf8_lossy(&out.stderr).into_owned())
}

fn json(path: impl AsRef<Path>) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn write_design(dir: &Path, name: &str, label: DesignLabel, n: usize, seed: u64) {
    let s = generate(&RoyDesign::new(label, 0.05).unwrap(), n, seed).unwrap();
    s.data.to_csv_writer(fs::File::create(dir.join(name)).unwrap()).unwrap();
}

fn result<'a>(report: &'a Value, method: &str) -> &'a Value {
    report["results"].as_array().unwrap().iter().find(|r| r["method"] == method).unwrap()
}

#[test]
fn perfect_compliers_give_unit_wald() {
    let t = tempfile::tempdir().unwrap();
    fs::write(t.path().join("pc.csv"), "y,d,z\n1,1,1\n1,1,1\n0,0,0\n0,0,0\n").unwrap();
    let (code, err) = run(t.path(), &["estimate", "--input", "pc.csv", "--methods", "Wald", "--out", "o"]);
    assert_eq!(code, 0, "{err}");
    let r = json(t.path().join("o/report.json"));
    assert_eq!(result(&r, "Wald")["estimate"]["tau_hat"], 1.0);
    assert_eq!(r["version"], late_balance::VERSION);
    assert_eq!(r["config"]["command"], "estimate");
    assert!(t.path().join("o/run_meta.json").exists());
}

#[test]
fn missing_instrument_column_is_an_input_error() {
    let t = tempfile::tempdir().unwrap();
    fs::write(t.path().join("bad.csv"), "y,d,x\n1,1,0\n0,0,1\n").unwrap();
    let (code, err) = run(t.path(), &["estimate", "--input", "bad.csv"]);
    assert_eq!(code, 2);
    assert!(err.contains("required column z not found"), "{err}");
}

#[test]
fn unknown_flag_and_bad_values_exit_2() {
    let t = tempfile::tempdir().unwrap();
    assert_eq!(run(t.path(), &["simulate", "--bogus"]).0, 2);
    assert_eq!(run(t.path(), &["simulate", "--design", "Q"]).0, 2);
    assert_eq!(run(t.path(), &["simulate", "--design", "A", "--delta", "0.7"]).0, 2);
    assert_eq!(run(t.path(), &["estimate"]).0, 2);
}

#[test]
fn all_methods_failing_exits_3() {
    let t = tempfile::tempdir().unwrap();
    write_design(t.path(), "b.csv", DesignLabel::B, 300, 1);
    // Oracle methods need simulation-only inputs.
    let (code, err) = run(t.path(), &["estimate", "--input", "b.csv", "--methods", "B(D),B(D,X)", "--out", "o"]);
    assert_eq!(code, 3, "{err}");
    let r = json(t.path().join("o/report.json"));
    assert_eq!(result(&r, "B(D,X)")["ok"], false);
}

#[test]
fn estimate_reports_every_method_with_scores_and_balance() {
    let t = tempfile::tempdir().unwrap();
    write_design(t.path(), "c.csv", DesignLabel::C, 800, 5);
    let (code, err) = run(t.path(), &["estimate", "--input", "c.csv", "--bootstrap", "50", "--seed", "3", "--out", "o"]);
    assert_eq!(code, 0, "{err}");
    let r = json(t.path().join("o/report.json"));
    for m in ["Wald", "IV", "MLE", "MLE(2)", "B(X)", "B(Dhat)", "B(Dhat_m)"] {
        let res = result(&r, m);
        assert_eq!(res["ok"], true, "{m}: {}", res["error"]);
        assert!(res["bootstrap"]["se"].as_f64().unwrap() > 0.0);
    }
    let bx = r["balance"].as_array().unwrap().iter().find(|b| b["method"] == "B(X)").unwrap();
    for row in bx["rows"].as_array().unwrap() {
        assert!(row["after"].as_f64().unwrap().abs() <= 1e-8);
    }
    let scores = fs::read_to_string(t.path().join("o/scores.csv")).unwrap();
    assert!(scores.starts_with("# late-balance "));
    assert!(scores.lines().any(|l| l.starts_with("B(X),0,")));
}

#[test]
fn simulate_anchors_iv_and_is_byte_identical() {
    let t = tempfile::tempdir().unwrap();
    let args = ["simulate", "--design", "A", "--n", "500", "--delta", "0.05", "--reps", "10", "--seed", "11", "--out", "s"];
    assert_eq!(run(t.path(), &args).0, 0);
    let first: Vec<(String, Vec<u8>)> = ["simulation.csv", "simulation.json", "failures.csv"]
        .iter()
        .map(|f| (f.to_string(), fs::read(t.path().join("s").join(f)).unwrap()))
        .collect();
    let table = String::from_utf8(first[0].1.clone()).unwrap();
    let header: Vec<&str> = table.lines().find(|l| l.starts_with("design")).unwrap().split(',').collect();
    let mse: Vec<&str> = table.lines().find(|l| l.contains(",MSE,")).unwrap().split(',').collect();
    let iv = header.iter().position(|h| *h == "IV").unwrap();
    assert_eq!(mse[iv], "1.0000");
    assert_eq!(run(t.path(), &args).0, 0);
    for (name, bytes) in first {
        assert_eq!(fs::read(t.path().join("s").join(&name)).unwrap(), bytes, "{name}");
    }
}

#[test]
fn simulate_grid_has_one_block_per_cell() {
    let t = tempfile::tempdir().unwrap();
    let (code, _) = run(
        t.path(),
        &["simulate", "--design", "A,B", "--delta", "0.05,0.02", "--n", "200", "--reps", "4", "--methods", "IV,B(X)", "--out", "g"],
    );
    assert_eq!(code, 0);
    let r = json(t.path().join("g/simulation.json"));
    assert_eq!(r["cells"].as_array().unwrap().len(), 4);
    let table = fs::read_to_string(t.path().join("g/simulation.csv")).unwrap();
    assert_eq!(table.lines().filter(|l| l.contains(",MSE,")).count(), 4);
}

#[test]
fn cv_selection_feeds_estimate() {
    let t = tempfile::tempdir().unwrap();
    write_design(t.path(), "b.csv", DesignLabel::B, 300, 9);
    let (code, err) = run(
        t.path(),
        &["cv", "--input", "b.csv", "--basis", "intercept", "--basis", "raw", "--basis", "power:30", "--out", "cv"],
    );
    assert_eq!(code, 0, "{err}");
    let r = json(t.path().join("cv/cv.json"));
    assert_eq!(r["report"]["scheme"], "leave-one-out");
    let cands = r["report"]["candidates"].as_array().unwrap();
    assert!(cands[2]["feasible"] == false || cands[2]["failed"] == true);
    assert_eq!(r["selected"]["kind"]["type"], "raw");
    let (code, err) = run(t.path(), &["estimate", "--input", "b.csv", "--methods", "B(X)", "--basis", "@cv/cv.json", "--out", "e"]);
    assert_eq!(code, 0, "{err}");
}

#[test]
fn cv_ties_go_to_the_first_candidate() {
    let t = tempfile::tempdir().unwrap();
    write_design(t.path(), "b.csv", DesignLabel::B, 120, 2);
    assert_eq!(run(t.path(), &["cv", "--input", "b.csv", "--basis", "raw", "--basis", "raw", "--out", "cv"]).0, 0);
    let r = json(t.path().join("cv/cv.json"));
    assert_eq!(r["report"]["best"], 0);
}

#[test]
fn balance_report_limits() {
    let t = tempfile::tempdir().unwrap();
    write_design(t.path(), "b.csv", DesignLabel::B, 600, 4);
    let (code, err) = run(
        t.path(),
        &["balance-report", "--input", "b.csv", "--basis", "power:3", "--penalty", "l1", "--lambda", "0,0.01,1000000", "--out", "br"],
    );
    assert_eq!(code, 0, "{err}");
    let r = json(t.path().join("br/balance_report.json"));
    let mut max_before: f64 = 0.0;
    for c in r["columns"].as_array().unwrap() {
        assert!(c["balancing"].as_f64().unwrap().abs() <= 1e-8);
        if c["column"] != "1" {
            max_before = max_before.max(c["before"].as_f64().unwrap().abs());
        }
    }
    let path = r["lambda_path"].as_array().unwrap();
    assert!(path[0]["max_abs_imbalance"].as_f64().unwrap() <= 1e-8);
    assert!((path[2]["max_abs_imbalance"].as_f64().unwrap() - max_before).abs() <= 1e-6);
    assert_eq!(path[2]["nonzero"], 0);
}

#[test]
fn config_file_is_read_and_flags_win() {
    let t = tempfile::tempdir().unwrap();
    fs::write(t.path().join("run.toml"), "design = [\"A\"]\nn = [100]\nreps = 3\nseed = 5\nmethods = [\"IV\", \"B(D)\"]\nout = \"fromfile\"\n").unwrap();
    assert_eq!(run(t.path(), &["simulate", "--config", "run.toml", "--seed", "6"]).0, 0);
    let r = json(t.path().join("fromfile/simulation.json"));
    assert_eq!(r["config"]["seed"], 6);
    assert_eq!(r["config"]["reps"], 3);
    fs::write(t.path().join("bad.toml"), "sede = 5\n").unwrap();
    assert_eq!(run(t.path(), &["simulate", "--config", "bad.toml", "--design", "A"]).0, 2);
}

#[test]
fn log_columns_transform_named_covariates() {
    let t = tempfile::tempdir().unwrap();
    let mut text = String::from("y,d,z,inc\n");
    for i in 0..40i64 {
        let z = i % 2;
        text.push_str(&format!("{},{},{z},{}\n", i % 3, (i % 5 != 0) as i64 * z, 1 + i * 7));
    }
    fs::write(t.path().join("l.csv"), &text).unwrap();
    assert_eq!(run(t.path(), &["estimate", "--input", "l.csv", "--methods", "B(X)", "--log-columns", "inc", "--out", "o"]).0, 0);
    assert_eq!(run(t.path(), &["estimate", "--input", "l.csv", "--log-columns", "nope", "--out", "o"]).0, 2);
}
