use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn nprest(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nprest")).args(args).output().unwrap()
}

fn ok(args: &[&str]) {
    let out = nprest(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn code(args: &[&str]) -> i32 {
    nprest(args).status.code().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write_config(dir: &Path, json: &str) -> String {
    let path = dir.join("config.json");
    fs::write(&path, json).unwrap();
    path.to_str().unwrap().to_string()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

const SMALL: &str = r#"{"dgp": {"n_firms": 150, "n_keep": 6, "burn_in": 40}}"#;

#[test]
fn simulate_is_deterministic_and_validates() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&[
        "--config",
        &cfg,
        "simulate",
        "--scenario",
        "lim",
        "--seed",
        "1",
        "--out",
        p(&a),
    ]);
    ok(&[
        "--config",
        &cfg,
        "simulate",
        "--scenario",
        "lim",
        "--seed",
        "1",
        "--out",
        p(&b),
    ]);
    for f in ["panel.csv", "truth.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap());
    }
    let bad = write_config(dir.path(), r#"{"dgp": {"sigma_eps": -1.0}}"#);
    assert_eq!(code(&["--config", &bad, "simulate", "--seed", "1", "--out", p(&a)]), 2);
    let unknown = write_config(dir.path(), r#"{"dgpp": {}}"#);
    assert_eq!(
        code(&["--config", &unknown, "simulate", "--seed", "1", "--out", p(&a)]),
        2
    );
    assert_eq!(
        code(&["simulate", "--scenario", "nope", "--seed", "1", "--out", p(&a)]),
        2
    );
}

#[test]
fn estimate_writes_results() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let sim = dir.path().join("sim");
    ok(&["--config", &cfg, "simulate", "--seed", "2", "--out", p(&sim)]);
    let panel = sim.join("panel.csv");
    for method in ["ols", "ols-fd", "ols-fe", "op", "lp", "acf"] {
        let out = dir.path().join(method);
        ok(&["estimate", "--method", method, "--panel", p(&panel), "--out", p(&out)]);
        let v = read_json(&out.join("results.json"));
        let bl = v["coefficients"]["beta_l"].as_f64().unwrap();
        let bk = v["coefficients"]["beta_k"].as_f64().unwrap();
        assert!((v["beta_l_plus_beta_k"].as_f64().unwrap() - (bl + bk)).abs() < 1e-12);
        assert!(v["converged"].as_bool().unwrap());
        assert_eq!(v["n_firms"].as_u64().unwrap(), 150);
    }
    let ols = read_json(&dir.path().join("ols/results.json"));
    assert!(ols["std_errors"]["beta_l"].as_f64().unwrap() > 0.0);
    assert!(ols["crs_p_value"].as_f64().is_some());
    assert_eq!(
        code(&[
            "estimate",
            "--method",
            "magic",
            "--panel",
            p(&panel),
            "--out",
            p(dir.path())
        ]),
        2
    );
    let missing = dir.path().join("missing.csv");
    assert_eq!(
        code(&[
            "estimate",
            "--method",
            "ols",
            "--panel",
            p(&missing),
            "--out",
            p(dir.path())
        ]),
        2
    );
}

#[test]
fn npr_on_noiseless_simulation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        r#"{"dgp": {"n_firms": 200, "sigma_eps": 0.0}, "npr": {"bootstrap_reps": 0}}"#,
    );
    let sim = dir.path().join("sim");
    ok(&["--config", &cfg, "simulate", "--seed", "3", "--out", p(&sim)]);
    let out = dir.path().join("est");
    ok(&[
        "--config",
        &cfg,
        "estimate",
        "--method",
        "npr",
        "--panel",
        p(&sim.join("panel.csv")),
        "--out",
        p(&out),
    ]);
    let v = read_json(&out.join("results.json"));
    assert!((v["coefficients"]["beta_l"].as_f64().unwrap() - 0.6).abs() < 1e-3);
    assert!((v["coefficients"]["beta_k"].as_f64().unwrap() - 0.4).abs() < 1e-3);
    assert_eq!(v["method"], "NPR");

    // A one-iteration cap cannot converge: exit 1 with flagged results.
    let capped = write_config(
        dir.path(),
        r#"{"npr": {"bootstrap_reps": 0, "max_backfit_iters": 1, "init_grid": [[0.05, 0.05]]}}"#,
    );
    let out = dir.path().join("capped");
    let panel = sim.join("panel.csv");
    let args = [
        "--config",
        &capped,
        "estimate",
        "--method",
        "npr",
        "--panel",
        p(&panel),
        "--out",
        p(&out),
    ];
    assert_eq!(code(&args), 1);
    assert!(!read_json(&out.join("results.json"))["converged"].as_bool().unwrap());
}

#[test]
fn montecarlo_outputs_and_thread_invariance() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let run = |threads: &str, name: &str| {
        let out = dir.path().join(name);
        ok(&[
            "--config",
            &cfg,
            "--threads",
            threads,
            "montecarlo",
            "--scenario",
            "l",
            "--runs",
            "3",
            "--seed",
            "4",
            "--estimators",
            "OLS,LP,ACF",
            "--out",
            p(&out),
        ]);
        out
    };
    let a = run("1", "a");
    let b = run("2", "b");
    for f in ["summary.csv", "runs.csv", "summary.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let summary = fs::read_to_string(a.join("summary.csv")).unwrap();
    assert!(summary.lines().any(|l| l.starts_with("ACF,")));
    assert!(summary.lines().any(|l| l.starts_with("ACF (plausible),")));
    assert_eq!(
        fs::read_to_string(a.join("runs.csv")).unwrap().lines().count(),
        1 + 3 * 3
    );
    let zero = [
        "--config",
        &cfg,
        "montecarlo",
        "--runs",
        "0",
        "--seed",
        "1",
        "--out",
        p(dir.path()),
    ];
    assert_eq!(code(&zero), 2);
}

#[test]
fn survey_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let gen = dir.path().join("gen");
    ok(&["gen-survey", "--n", "40", "--seed", "5", "--out", p(&gen)]);
    let fit = dir.path().join("fit");
    ok(&["fit-beliefs", "--survey", p(&gen.join("survey.csv")), "--out", p(&fit)]);
    let mut truth = csv::Reader::from_path(gen.join("survey_truth.csv")).unwrap();
    let mut fitted = csv::Reader::from_path(fit.join("beliefs.csv")).unwrap();
    let fitted: Vec<csv::StringRecord> = fitted.records().map(|r| r.unwrap()).collect();
    let col = |name: &str| match name {
        "turnover" => (2, 3),
        "employment" => (4, 5),
        _ => (6, 7),
    };
    let mut checked = 0;
    for rec in truth.records() {
        let rec = rec.unwrap();
        let row = fitted.iter().find(|r| r[0] == rec[0]).unwrap();
        let (mc, sc) = col(&rec[2]);
        let mu: f64 = rec[3].parse().unwrap();
        let s2: f64 = rec[4].parse().unwrap();
        assert!((row[mc].parse::<f64>().unwrap() - mu).abs() < 1e-3);
        assert!((row[sc].parse::<f64>().unwrap() - s2).abs() < 1e-3);
        checked += 1;
    }
    assert_eq!(checked, 120);
    let diag = fs::read_to_string(fit.join("diagnostics.csv")).unwrap();
    assert!(diag.contains("discarded,0"));

    // Same seed, same bytes; n = 0 gives only the header.
    let again = dir.path().join("again");
    ok(&["gen-survey", "--n", "40", "--seed", "5", "--out", p(&again)]);
    assert_eq!(
        fs::read(gen.join("survey.csv")).unwrap(),
        fs::read(again.join("survey.csv")).unwrap()
    );
    let empty = dir.path().join("empty");
    ok(&["gen-survey", "--n", "0", "--seed", "5", "--out", p(&empty)]);
    assert_eq!(fs::read_to_string(empty.join("survey.csv")).unwrap().lines().count(), 1);
    assert_eq!(
        code(&[
            "fit-beliefs",
            "--survey",
            p(&empty.join("survey.csv")),
            "--out",
            p(&fit)
        ]),
        2
    );
}

#[test]
fn out_of_window_likelihoods_are_discarded() {
    let dir = tempfile::tempdir().unwrap();
    let gen = dir.path().join("gen");
    ok(&["gen-survey", "--n", "2", "--seed", "6", "--out", p(&gen)]);
    let text = fs::read_to_string(gen.join("survey.csv")).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    // Scale the first response's likelihoods so they sum to 150.
    let header: Vec<&str> = lines[0].split(',').collect();
    let mut fields: Vec<String> = lines[1].split(',').map(String::from).collect();
    for (i, h) in header.iter().enumerate() {
        if h.len() == 2 && h.starts_with('p') {
            let v: f64 = fields[i].parse().unwrap();
            fields[i] = (v * 1.5).to_string();
        }
    }
    lines[1] = fields.join(",");
    let edited = dir.path().join("edited.csv");
    fs::write(&edited, lines.join("\n") + "\n").unwrap();
    let fit = dir.path().join("fit");
    ok(&["fit-beliefs", "--survey", p(&edited), "--out", p(&fit)]);
    let diag = fs::read_to_string(fit.join("diagnostics.csv")).unwrap();
    assert!(diag.contains("discarded,1"), "{diag}");
}

#[test]
fn tfp_command() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let sim = dir.path().join("sim");
    ok(&["--config", &cfg, "simulate", "--seed", "7", "--out", p(&sim)]);
    let est = dir.path().join("est");
    ok(&[
        "estimate",
        "--method",
        "ols",
        "--panel",
        p(&sim.join("panel.csv")),
        "--out",
        p(&est),
    ]);
    let out = dir.path().join("tfp");
    ok(&[
        "tfp",
        "--panel",
        p(&sim.join("panel.csv")),
        "--coefficients",
        p(&est.join("results.json")),
        "--out",
        p(&out),
    ]);
    let reg = read_json(&out.join("regressions.json"));
    assert!(reg["max_abs_year_mean_tfp"].as_f64().unwrap() < 1e-12);
    assert!(reg["regressions"]
        .as_array()
        .unwrap()
        .iter()
        .any(|r| r["outcome"] == "growth_1_2"));
    let missing = dir.path().join("nope.json");
    let panel = sim.join("panel.csv");
    let args = [
        "tfp",
        "--panel",
        p(&panel),
        "--coefficients",
        p(&missing),
        "--out",
        p(&out),
    ];
    assert_eq!(code(&args), 2);

    let bare = dir.path().join("bare.json");
    fs::write(&bare, r#"{"beta0": 0.0, "beta_l": 0.6, "beta_k": 0.4}"#).unwrap();
    ok(&[
        "tfp",
        "--panel",
        p(&sim.join("panel.csv")),
        "--coefficients",
        p(&bare),
        "--out",
        p(&out),
    ]);
}
