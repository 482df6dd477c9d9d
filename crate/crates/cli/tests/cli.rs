use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn iqr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_iqr"))
        .args(args)
        .output()
        .expect("run iqr")
}

fn ok(args: &[&str]) {
    let out = iqr(args);
    assert!(
        out.status.success(),
        "iqr {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// A quick continuous-mode configuration.
fn write_config(path: &Path, iterations: usize) {
    let cfg = format!(
        r#"{{"constraint": {{"mode": "continuous"}}, "mcmc": {{"chains": 1, "iterations": {iterations}, "thin": 5, "seed": 3}}}}"#
    );
    fs::write(path, cfg).unwrap();
}

#[test]
fn simulate_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["simulate", "--design", "D1", "--seed", "7", "--out-dir", p(&a)]);
    ok(&["simulate", "--design", "d1", "--seed", "7", "--out-dir", p(&b)]);
    for f in ["data.csv", "truth.csv", "simulation.json", "manifest.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let c = dir.path().join("c");
    ok(&["simulate", "--design", "D1", "--seed", "8", "--out-dir", p(&c)]);
    assert_ne!(fs::read(a.join("data.csv")).unwrap(), fs::read(c.join("data.csv")).unwrap());
}

#[test]
fn score_of_truth_is_zero() {
    let dir = tempfile::tempdir().unwrap();
    let sim = dir.path().join("sim");
    ok(&["simulate", "--design", "D3", "--seed", "2", "--n-per-site", "5", "--out-dir", p(&sim)]);
    let truth = fs::read_to_string(sim.join("truth.csv")).unwrap();
    let mut curves = String::from("p,site,tau,mean,lower,upper\n");
    for line in truth.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        curves += &format!("{},{},{},{v},{v},{v}\n", f[0], f[1], f[2], v = f[3]);
    }
    let est = dir.path().join("curves.csv");
    fs::write(&est, curves).unwrap();
    for grid in ["central", "upper-tail"] {
        let out = dir.path().join(grid);
        ok(&[
            "score",
            "--estimates",
            p(&est),
            "--truth",
            p(&sim.join("truth.csv")),
            "--grid",
            grid,
            "--out-dir",
            p(&out),
        ]);
        let csv = fs::read_to_string(out.join("coefficients.csv")).unwrap();
        let rows: Vec<&str> = csv.lines().skip(1).collect();
        assert_eq!(rows.len(), 3);
        for r in rows {
            let f: Vec<&str> = r.split(',').collect();
            assert_eq!(f[4].parse::<f64>().unwrap(), 0.0, "{r}");
            assert_eq!(f[6].parse::<f64>().unwrap(), 1.0, "{r}");
        }
    }
}

#[test]
fn simulate_fit_report_predict_score() {
    let dir = tempfile::tempdir().unwrap();
    let (sim, fit, rep, pred_in, pred_out, score) = (
        dir.path().join("sim"),
        dir.path().join("fit"),
        dir.path().join("report"),
        dir.path().join("pred_in"),
        dir.path().join("pred_out"),
        dir.path().join("score"),
    );
    ok(&["simulate", "--design", "D1", "--seed", "4", "--n-per-site", "400", "--out-dir", p(&sim)]);
    let cfg = dir.path().join("config.json");
    write_config(&cfg, 4000);
    ok(&["fit", "--data", p(&sim.join("data.csv")), "--config", p(&cfg), "--out-dir", p(&fit)]);
    for f in ["samples.csv", "samples.json", "model.json", "config.json", "manifest.json"] {
        assert!(fit.join(f).exists(), "{f}");
    }
    ok(&["report", "--fit-dir", p(&fit), "--out-dir", p(&rep)]);

    // validation rows only, for the out-of-sample score
    let data = fs::read_to_string(sim.join("data.csv")).unwrap();
    let mut lines = data.lines();
    let head = lines.next().unwrap();
    let (mut train, mut valid) = (format!("{head}\n"), format!("{head}\n"));
    for l in lines {
        if l.ends_with(",1") {
            valid += &format!("{l}\n");
        } else {
            train += &format!("{l}\n");
        }
    }
    fs::write(dir.path().join("train.csv"), train).unwrap();
    fs::write(dir.path().join("valid.csv"), valid).unwrap();
    for (d, out) in [("train.csv", &pred_in), ("valid.csv", &pred_out)] {
        ok(&[
            "predict",
            "--model",
            p(&fit.join("model.json")),
            "--samples",
            p(&fit),
            "--data",
            p(&dir.path().join(d)),
            "--out-dir",
            p(out),
        ]);
    }
    ok(&[
        "score",
        "--estimates",
        p(&rep.join("curves.csv")),
        "--truth",
        p(&sim.join("truth.csv")),
        "--predictions-in",
        p(&pred_in.join("predictions.csv")),
        "--predictions-out",
        p(&pred_out.join("predictions.csv")),
        "--design",
        "D1",
        "--out-dir",
        p(&score),
    ]);
    let report: serde_json::Value = serde_json::from_slice(&fs::read(score.join("scores.json")).unwrap()).unwrap();
    for c in report["coefficients"].as_array().unwrap() {
        let r = c["rmise_mean"].as_f64().unwrap();
        assert!(r.is_finite() && r < 0.1, "{c}");
    }
    let ls = &report["log_scores"][0];
    assert!(ls["out_of_sample_mean"].as_f64().unwrap().is_finite());
}

#[test]
fn fixture_transport_and_scaled_fit() {
    let dir = tempfile::tempdir().unwrap();
    let (fx, tr, fit) = (dir.path().join("fx"), dir.path().join("tr"), dir.path().join("fit"));
    ok(&["fixture", "--seed", "5", "--out-dir", p(&fx)]);
    ok(&[
        "transport",
        "--wind",
        p(&fx.join("wind.csv")),
        "--schedule",
        p(&fx.join("schedule.csv")),
        "--geometry",
        p(&fx.join("geometry.json")),
        "--out-dir",
        p(&tr),
    ]);
    let t = fs::read_to_string(tr.join("transport.csv")).unwrap();
    assert_eq!(t.lines().count(), 1 + 16 * 26);
    assert!(t.starts_with("site_id,s1,s2,t,x1,x2,missing_hours"));

    // the fixture's predictors are the same transports
    let data = fs::read_to_string(fx.join("data.csv")).unwrap();
    let first_data: Vec<&str> = data.lines().nth(1).unwrap().split(',').collect();
    let first_tr: Vec<&str> = t.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(first_data[4..6], first_tr[4..6]);

    ok(&[
        "fit",
        "--data",
        p(&fx.join("data.csv")),
        "--config",
        p(&fx.join("config.json")),
        "--iterations",
        "200",
        "--chains",
        "1",
        "--scale-predictors",
        "--out-dir",
        p(&fit),
    ]);
    let scaling: serde_json::Value = serde_json::from_slice(&fs::read(fit.join("scaling.json")).unwrap()).unwrap();
    assert_eq!(scaling["min"].as_array().unwrap().len(), 2);
}

#[test]
fn cross_validation_runs() {
    let dir = tempfile::tempdir().unwrap();
    let (sim, cv) = (dir.path().join("sim"), dir.path().join("cv"));
    ok(&["simulate", "--design", "D1", "--seed", "9", "--n-per-site", "120", "--out-dir", p(&sim)]);
    let cfg = dir.path().join("config.json");
    write_config(&cfg, 600);
    ok(&[
        "cv",
        "--data",
        p(&sim.join("data.csv")),
        "--config",
        p(&cfg),
        "--folds",
        "3",
        "--out-dir",
        p(&cv),
    ]);
    let csv = fs::read_to_string(cv.join("cv.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3 + 1);
}

#[test]
fn bad_input_fails_with_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    let out = iqr(&["simulate", "--design", "D9", "--out-dir", p(dir.path())]);
    assert!(!out.status.success());

    let out = iqr(&["fit", "--bogus"]);
    assert!(!out.status.success());

    let bad = dir.path().join("bad.csv");
    fs::write(&bad, "site_id,s1,s2,t,x1,y\n0,0,0,0,abc,1\n").unwrap();
    let out = iqr(&["fit", "--data", p(&bad), "--out-dir", p(&dir.path().join("f"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));

    let out = iqr(&[
        "report",
        "--fit-dir",
        p(&dir.path().join("missing")),
        "--out-dir",
        p(&dir.path().join("r")),
    ]);
    assert!(!out.status.success());
}
