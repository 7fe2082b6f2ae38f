use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn curveseg(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_curveseg"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn simulate_waveforms(dir: &Path, n: &str) {
    let out = curveseg(
        dir,
        &["simulate", "waveform", "--n", n, "--seed", "7", "--out", "w.csv"],
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
}

const FIT: [&str; 8] = ["--k", "2", "--l", "1", "--p", "4", "--restarts", "2"];

fn train(dir: &Path) -> Output {
    let mut args = vec!["train", "--input", "w.csv", "--out", "m.json"];
    args.extend(FIT);
    curveseg(dir, &args)
}

#[test]
fn simulate_train_classify_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    simulate_waveforms(dir.path(), "30");
    assert!(dir.path().join("w.truth.csv").exists());
    assert!(dir.path().join("w.manifest.json").exists());

    let out = train(dir.path());
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("m.report.json")).unwrap()).unwrap();
    assert_eq!(report["classes"].as_array().unwrap().len(), 2);
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("m.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["subcommand"], "train");
    assert_eq!(manifest["seed"], 0);

    let out = curveseg(
        dir.path(),
        &["classify", "--model", "m.json", "--input", "w.csv", "--out", "p.csv"],
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let predictions = fs::read_to_string(dir.path().join("p.csv")).unwrap();
    let mut lines = predictions.lines();
    assert_eq!(lines.next(), Some("index,label,p1,p2"));
    assert_eq!(lines.count(), 60);
    assert!(String::from_utf8_lossy(&out.stdout).contains("error rate"));
}

#[test]
fn repeated_runs_write_identical_bytes() {
    let dir = tempfile::tempdir().unwrap();
    simulate_waveforms(dir.path(), "20");
    let first_curves = fs::read(dir.path().join("w.csv")).unwrap();
    assert_eq!(code(&train(dir.path())), 0);
    let first_model = fs::read(dir.path().join("m.json")).unwrap();

    simulate_waveforms(dir.path(), "20");
    assert_eq!(code(&train(dir.path())), 0);
    assert_eq!(fs::read(dir.path().join("w.csv")).unwrap(), first_curves);
    assert_eq!(fs::read(dir.path().join("m.json")).unwrap(), first_model);

    let mut args = vec!["--jobs", "1", "train", "--input", "w.csv", "--out", "m1.json"];
    args.extend(FIT);
    assert_eq!(code(&curveseg(dir.path(), &args)), 0);
    assert_eq!(fs::read(dir.path().join("m1.json")).unwrap(), first_model);
}

#[test]
fn more_clusters_than_curves_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    simulate_waveforms(dir.path(), "5");
    let out = curveseg(dir.path(), &["train", "--input", "w.csv", "--k", "1,9"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("class 2"), "{}", stderr(&out));
    assert!(!dir.path().join("model.json").exists());
}

#[test]
fn grid_mismatch_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    simulate_waveforms(dir.path(), "10");
    assert_eq!(code(&train(dir.path())), 0);
    let out = curveseg(dir.path(), &["simulate", "piecewise", "--n", "2", "--out", "pw.csv"]);
    assert_eq!(code(&out), 0);
    let out = curveseg(dir.path(), &["classify", "--model", "m.json", "--input", "pw.csv"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("points"), "{}", stderr(&out));
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&curveseg(dir.path(), &["train", "--no-such-flag"])), 1);
    assert_eq!(
        code(&curveseg(dir.path(), &["--jobs", "0", "simulate", "piecewise"])),
        1
    );
    assert_eq!(code(&curveseg(dir.path(), &["train", "--restarts", "0"])), 1);
    assert_eq!(code(&curveseg(dir.path(), &["--help"])), 0);
}

#[test]
fn missing_input_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = curveseg(dir.path(), &["train", "--input", "absent.csv"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn inspect_exports_plot_tables() {
    let dir = tempfile::tempdir().unwrap();
    simulate_waveforms(dir.path(), "10");
    assert_eq!(code(&train(dir.path())), 0);
    let out = curveseg(dir.path(), &["inspect", "--model", "m.json", "--out-dir", "plots"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(String::from_utf8_lossy(&out.stdout).contains("segmentation"));

    let means = fs::read_to_string(dir.path().join("plots/mean_curves.csv")).unwrap();
    assert_eq!(means.lines().next(), Some("class,cluster,time,mean"));
    // 2 classes x 2 clusters x 21 grid points
    assert_eq!(means.lines().count(), 1 + 2 * 2 * 21);
    let probs = fs::read_to_string(dir.path().join("plots/logistic_probabilities.csv")).unwrap();
    assert_eq!(probs.lines().count(), 1 + 2 * 2 * 21);
    assert!(probs.lines().skip(1).all(|l| l.ends_with(",1")));
}

#[test]
fn select_and_evaluate_write_their_tables() {
    let dir = tempfile::tempdir().unwrap();
    let out = curveseg(dir.path(), &["simulate", "piecewise", "--n", "4", "--out", "pw.csv"]);
    assert_eq!(code(&out), 0);

    let out = curveseg(
        dir.path(),
        &[
            "select",
            "--input",
            "pw.csv",
            "--class",
            "2",
            "--kmax",
            "1",
            "--lmax",
            "2",
            "--pmax",
            "1",
            "--restarts",
            "1",
        ],
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let table = fs::read_to_string(dir.path().join("selection.csv")).unwrap();
    assert_eq!(table.lines().next(), Some("class,K,L,p,loglik,nu,bic,converged"));
    assert_eq!(table.lines().count(), 1 + 2 * 2);
    assert!(table.lines().skip(1).all(|l| l.starts_with("2,")));

    let out = curveseg(
        dir.path(),
        &[
            "evaluate",
            "--input",
            "pw.csv",
            "--k",
            "3,1",
            "--l",
            "3",
            "--restarts",
            "1",
            "--folds",
            "2",
            "--truth",
            "pw.truth.csv",
        ],
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("evaluation.json")).unwrap()).unwrap();
    assert!(report["error_rate"].as_f64().unwrap() <= 0.5);
    assert!(report["ari"].is_number());
}

#[test]
fn waveform_study_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let out = curveseg(dir.path(), &["simulate", "waveform", "--n", "500", "--seed", "7"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let out = curveseg(
        dir.path(),
        &[
            "train",
            "--method",
            "fmda-mixrhlp",
            "--k",
            "2,1",
            "--l",
            "1",
            "--p",
            "4",
        ],
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let model: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("model.json")).unwrap()).unwrap();
    assert!(model.is_object());
}
