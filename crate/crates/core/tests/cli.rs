use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn dynpred(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dynpred"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn simulate(dir: &Path, n: &str, seed: &str) -> Output {
    dynpred(&[
        "simulate",
        "--scenario",
        "I",
        "--n",
        n,
        "--seed",
        seed,
        "--out-dir",
        p(dir),
    ])
}

fn fit_joint(dir: &Path, out: &Path, extra: &[&str]) -> Output {
    let l = dir.join("longitudinal.csv");
    let s = dir.join("survival.csv");
    let mut args = vec![
        "fit",
        "--longitudinal",
        p(&l),
        "--survival",
        p(&s),
        "--method",
        "joint",
        "--form",
        "value",
        "--baseline",
        "weibull",
        "--knots",
        "2.1,5.5",
        "--boundary",
        "0,19",
        "--group-by",
        "trt",
        "--covariance",
        "diagonal",
        "--out",
        p(out),
    ];
    args.extend_from_slice(extra);
    dynpred(&args)
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn simulate_is_reproducible_and_validates_scenario() {
    let a = tempfile::tempdir().unwrap();
    let files = ["longitudinal.csv", "survival.csv", "truth.json"];
    assert_eq!(code(&simulate(a.path(), "60", "7")), 0);
    let first: Vec<Vec<u8>> = files
        .iter()
        .map(|f| std::fs::read(a.path().join(f)).unwrap())
        .collect();
    assert_eq!(code(&simulate(a.path(), "60", "7")), 0);
    for (f, x) in files.iter().zip(&first) {
        assert_eq!(
            x,
            &std::fs::read(a.path().join(f)).unwrap(),
            "{f} differs between runs"
        );
    }
    let truth = json(&a.path().join("truth.json"));
    assert_eq!(truth["command"], "simulate");
    assert_eq!(truth["config"]["seed"], 7);
    assert_eq!(truth["truth"]["b"].as_array().unwrap().len(), 60);

    let bad = dynpred(&[
        "simulate",
        "--scenario",
        "V",
        "--seed",
        "1",
        "--out-dir",
        p(a.path()),
    ]);
    assert_eq!(code(&bad), 2);
    let no_seed = dynpred(&["simulate", "--scenario", "I", "--out-dir", p(a.path())]);
    assert_eq!(code(&no_seed), 2);
}

#[test]
fn fit_predict_evaluate_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(&simulate(d, "150", "11")), 0);

    let jm = d.join("jm1.json");
    let out = fit_joint(d, &jm, &[]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let fit = json(&jm);
    assert_eq!(fit["converged"], true);
    assert_eq!(fit["config"]["method"], "joint");
    assert_eq!(fit["model"]["method"], "joint");

    // warm start from the emitted fit reproduces the log-likelihood
    let again = d.join("jm1b.json");
    assert_eq!(code(&fit_joint(d, &again, &["--warm-start", p(&jm)])), 0);
    let (l1, l2) = (
        fit["loglik"].as_f64().unwrap(),
        json(&again)["loglik"].as_f64().unwrap(),
    );
    assert!((l1 - l2).abs() < 1e-6, "{l1} vs {l2}");

    let l = d.join("longitudinal.csv");
    let s = d.join("survival.csv");
    let lm_args = |form: &str, out: &Path| {
        dynpred(&[
            "fit",
            "--longitudinal",
            p(&l),
            "--survival",
            p(&s),
            "--method",
            "landmark",
            "--form",
            form,
            "--landmark",
            "5",
            "--out",
            p(out),
        ])
    };
    let lm = d.join("lm1.json");
    assert_eq!(code(&lm_args("value", &lm)), 0);
    let refused = lm_args("shared_re", &d.join("nope.json"));
    assert_eq!(code(&refused), 2);
    assert!(String::from_utf8_lossy(&refused.stderr).contains("no landmark analogue"));
    assert!(!d.join("nope.json").exists());

    // predictions from the joint model
    let hist = d.join("history.csv");
    std::fs::write(
        &hist,
        "subject_id,time,value\nnew,0,1.2\nnew,1.5,1.6\nnew,3,2.0\n",
    )
    .unwrap();
    let predict = |history: &Path, t: &str, horizons: &str, out: &Path| {
        dynpred(&[
            "predict",
            "--fit",
            p(&jm),
            "--history",
            p(history),
            "--covariate",
            "trt=1",
            "--landmark",
            t,
            "--horizons",
            horizons,
            "--draws",
            "50",
            "--seed",
            "3",
            "--out",
            p(out),
        ])
    };
    let pred = d.join("pred.csv");
    let o = predict(&hist, "3", "3,5,7,9", &pred);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let body = std::fs::read_to_string(&pred).unwrap();
    let rows: Vec<Vec<f64>> = body
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|x| x.parse().unwrap()).collect())
        .collect();
    assert_eq!(body.lines().next().unwrap(), "u,pi_hat,lo,hi");
    assert_eq!(rows[0][1], 1.0);
    assert!(rows.windows(2).all(|w| w[1][1] <= w[0][1]));
    assert_eq!(json(&pred.with_extension("json"))["config"]["seed"], 3);

    // a later measurement gives an updated prediction
    let hist2 = d.join("history2.csv");
    std::fs::write(
        &hist2,
        "subject_id,time,value\nnew,0,1.2\nnew,1.5,1.6\nnew,3,2.0\nnew,4,3.5\n",
    )
    .unwrap();
    let pred2 = d.join("pred2.csv");
    assert_eq!(code(&predict(&hist2, "4", "4,5,7,9", &pred2)), 0);
    assert_ne!(std::fs::read_to_string(&pred2).unwrap(), body);

    // landmark prediction needs a measurement before the landmark
    let late = d.join("late.csv");
    std::fs::write(&late, "subject_id,time,value\nnew,5,1.0\n").unwrap();
    let o = dynpred(&[
        "predict",
        "--fit",
        p(&lm),
        "--history",
        p(&late),
        "--covariate",
        "trt=0",
        "--landmark",
        "5",
        "--horizons",
        "5,6",
        "--seed",
        "1",
        "--out",
        p(&d.join("lmpred.csv")),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    std::fs::write(&late, "subject_id,time,value\nnew,5.5,1.0\n").unwrap();
    let o = dynpred(&[
        "predict",
        "--fit",
        p(&lm),
        "--history",
        p(&late),
        "--covariate",
        "trt=0",
        "--landmark",
        "5",
        "--horizons",
        "5,6",
        "--seed",
        "1",
        "--out",
        p(&d.join("lmpred.csv")),
    ]);
    assert_ne!(code(&o), 0);

    // evaluation of two fits with R² rows and echoed settings
    let metrics = d.join("metrics.csv");
    let o = dynpred(&[
        "evaluate",
        "--longitudinal",
        p(&l),
        "--survival",
        p(&s),
        "--fit",
        p(&jm),
        "--fit",
        p(&lm),
        "--t",
        "5",
        "--u",
        "7",
        "--dt",
        "2",
        "--t-max",
        "10",
        "--draws",
        "20",
        "--seed",
        "5",
        "--out",
        p(&metrics),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let table = std::fs::read_to_string(&metrics).unwrap();
    assert!(table.contains("lm1,R2_PE"));
    assert!(table.contains("lm1,R2_IPE"));
    let meta = json(&metrics.with_extension("json"));
    assert_eq!(meta["evaluation"]["dt"], 2.0);
    assert_eq!(meta["evaluation"]["t_max"], 10.0);

    let empty_l = d.join("empty_l.csv");
    let empty_s = d.join("empty_s.csv");
    std::fs::write(&empty_l, "subject_id,time,value\n").unwrap();
    std::fs::write(&empty_s, "subject_id,event_time,status,trt\n").unwrap();
    let o = dynpred(&[
        "evaluate",
        "--longitudinal",
        p(&empty_l),
        "--survival",
        p(&empty_s),
        "--fit",
        p(&jm),
        "--seed",
        "5",
        "--out",
        p(&d.join("m2.csv")),
    ]);
    assert_eq!(code(&o), 2);
}

#[test]
fn benchmark_and_calibrate_commands() {
    let dir = tempfile::tempdir().unwrap();
    let o = dynpred(&[
        "benchmark",
        "--replicates",
        "0",
        "--seed",
        "1",
        "--out-dir",
        p(dir.path()),
    ]);
    assert_eq!(code(&o), 2);
    let run = |sub: &str| {
        let out = dir.path().join(sub);
        let o = dynpred(&[
            "benchmark",
            "--scenarios",
            "I",
            "--replicates",
            "1",
            "--K",
            "20",
            "--seed",
            "9",
            "--n",
            "200",
            "--models",
            "correct",
            "--out-dir",
            p(&out),
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        out
    };
    let a = run("a");
    let b = run("b");
    assert_eq!(
        std::fs::read(a.join("report.csv")).unwrap(),
        std::fs::read(b.join("report.csv")).unwrap()
    );
    let summary = json(&a.join("summary.json"));
    let models: Vec<&str> = summary["summary"]
        .as_array()
        .unwrap()
        .iter()
        .map(|s| s["model"].as_str().unwrap())
        .collect();
    assert_eq!(models, ["JM1", "LM1", "LM2", "LM3"]);
    assert!(summary["summary"][0]["median"].as_f64().unwrap() >= 0.0);

    let cal = dir.path().join("cal.json");
    let o = dynpred(&[
        "calibrate",
        "--scenarios",
        "I",
        "--pilot",
        "500",
        "--target",
        "0.9",
        "--out",
        p(&cal),
    ]);
    assert_eq!(code(&o), 0);
    assert_eq!(json(&cal)["calibration"][0]["attainable"], true);
}
