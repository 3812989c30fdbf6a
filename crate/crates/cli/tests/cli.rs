use std::path::Path;
use std::process::{Command, Output};

use spdrf_core::metrics::Metrics;
use spdrf_core::trainer::PaceReport;

fn spdrf(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spdrf"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("run spdrf")
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8(out.stderr.clone()).unwrap()
}

const SMALL_SYNTH: &[&str] = &["--n-samples", "150", "--n-test", "40", "--feature-dim", "3"];
const SMALL_TRAIN: &[&str] = &[
    "--tree-count",
    "2",
    "--tree-depth",
    "3",
    "--hidden-dims",
    "12",
    "--pretrain-steps",
    "30",
    "--steps-per-pace",
    "20",
    "--fractions",
    "0.5,0.75,1.0",
    "--exclude-fraction",
    "0.1",
];

fn synth(dir: &Path, seed: &str, train: &str, test: &str) -> Output {
    let mut args = vec![
        "synth",
        "--seed",
        seed,
        "--train-out",
        train,
        "--test-out",
        test,
    ];
    args.extend_from_slice(SMALL_SYNTH);
    spdrf(&args, dir)
}

#[test]
fn synth_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert!(synth(d, "4", "a.csv", "a_test.csv").status.success());
    assert!(synth(d, "4", "b.csv", "b_test.csv").status.success());
    assert!(synth(d, "5", "c.csv", "c_test.csv").status.success());
    let read = |name: &str| std::fs::read(d.join(name)).unwrap();
    assert_eq!(read("a.csv"), read("b.csv"));
    assert_eq!(read("a_test.csv"), read("b_test.csv"));
    assert_ne!(read("a.csv"), read("c.csv"));
    let text = String::from_utf8(read("a.csv")).unwrap();
    assert_eq!(text.lines().next().unwrap(), "f0,f1,f2,t,id,is_outlier");
    assert_eq!(text.lines().count(), 151);
}

#[test]
fn eval_on_training_set_matches_report() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert!(synth(d, "1", "train.csv", "test.csv").status.success());
    let mut args = vec![
        "train",
        "--seed",
        "1",
        "--train",
        "train.csv",
        "--test",
        "test.csv",
        "--checkpoint",
        "model.json",
        "--report",
        "paces.csv",
    ];
    args.extend_from_slice(SMALL_TRAIN);
    let out = spdrf(&args, d);
    assert!(out.status.success(), "{}", stderr(&out));
    let final_test = Metrics::from_json(&stdout(&out)).unwrap();

    let report =
        PaceReport::from_csv(&std::fs::read_to_string(d.join("paces.csv")).unwrap()).unwrap();
    assert_eq!(report.records.len(), 3);
    let last = report.records.last().unwrap();
    assert!((final_test.mae - last.test_mae).abs() <= 1e-9);

    let out = spdrf(
        &["eval", "--checkpoint", "model.json", "--data", "train.csv"],
        d,
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let on_train = Metrics::from_json(&stdout(&out)).unwrap();
    assert!((on_train.mae - last.train_mae).abs() <= 1e-9);

    let out = spdrf(
        &[
            "eval",
            "--checkpoint",
            "model.json",
            "--data",
            "test.csv",
            "--output",
            "m.json",
        ],
        d,
    );
    assert!(out.status.success());
    let written = std::fs::read_to_string(d.join("m.json")).unwrap();
    assert_eq!(Metrics::from_json(&written).unwrap(), final_test);
}

#[test]
fn modes_from_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(
        d.join("run.toml"),
        r#"
seed = 3

[synth]
n_samples = 120
n_test = 30
feature_dim = 2

[train]
tree_count = 2
tree_depth = 2
hidden_dims = [8]
pretrain_steps = 20
steps_per_pace = 10
schedule = { fractions = [0.5, 1.0], exclude_fraction = 0.1 }
"#,
    )
    .unwrap();
    let run = |mode: &str, report: &str| {
        let out = spdrf(
            &[
                "train",
                "--config",
                "run.toml",
                "--mode",
                mode,
                "--report",
                report,
                "--checkpoint",
                "m.json",
            ],
            d,
        );
        assert!(out.status.success(), "{}", stderr(&out));
        PaceReport::from_csv(&std::fs::read_to_string(d.join(report)).unwrap()).unwrap()
    };
    let baseline = run("drf-baseline", "baseline.csv");
    let capped = run("spdrf-capped", "capped.csv");
    let plain = run("spdrf", "plain.csv");
    assert_eq!(baseline.records.len(), 1);
    assert_eq!(baseline.records[0].selected_count, 120);
    assert_eq!(baseline.records[0].excluded_count, 0);
    assert_eq!(capped.records.len(), 2);
    assert_eq!(capped.records[1].excluded_count, 12);
    assert_eq!(plain.records[1].selected_count, 120);
    // the seed flag overrides the file and changes the run
    let out = spdrf(
        &[
            "train",
            "--config",
            "run.toml",
            "--seed",
            "4",
            "--report",
            "s4.csv",
            "--checkpoint",
            "m.json",
        ],
        d,
    );
    assert!(out.status.success());
    let reseeded =
        PaceReport::from_csv(&std::fs::read_to_string(d.join("s4.csv")).unwrap()).unwrap();
    assert_ne!(reseeded.records[1].test_mae, capped.records[1].test_mae);
}

#[test]
fn pace_report_table_is_aligned() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert!(synth(d, "2", "train.csv", "test.csv").status.success());
    let mut args = vec![
        "train",
        "--train",
        "train.csv",
        "--test",
        "test.csv",
        "--report",
        "r.csv",
    ];
    args.extend_from_slice(SMALL_TRAIN);
    assert!(spdrf(&args, d).status.success());
    let out = spdrf(&["pace-report", "r.csv"], d);
    assert!(out.status.success());
    let text = stdout(&out);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 4);
    assert!(lines[0].trim_start().starts_with("pace"));
    assert!(lines.iter().all(|l| l.len() == lines[0].len()));
}

#[test]
fn usage_errors_exit_with_status_two() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        vec![],
        vec!["fit"],
        vec!["train", "--bogus"],
        vec!["train", "--mode", "fastest"],
        vec!["train", "--seed", "minus-one"],
        vec!["eval", "--checkpoint", "m.json"],
    ] {
        let out = spdrf(&args, dir.path());
        assert_eq!(out.status.code(), Some(2), "{args:?}");
        assert!(!stderr(&out).is_empty());
    }
    assert_eq!(spdrf(&["--help"], dir.path()).status.code(), Some(0));
}

#[test]
fn runtime_errors_exit_with_status_one_and_leave_no_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = spdrf(
        &["eval", "--checkpoint", "missing.json", "--data", "none.csv"],
        d,
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("missing.json"));
    assert!(stdout(&out).is_empty());

    // a pace that admits nothing aborts the run before anything is written
    assert!(synth(d, "3", "train.csv", "test.csv").status.success());
    let mut args = vec!["train", "--train", "train.csv", "--test", "test.csv"];
    args.extend_from_slice(&SMALL_TRAIN[..10]);
    args.extend_from_slice(&["--fractions", "0.001", "--exclude-fraction", "0.999"]);
    let out = spdrf(&args, d);
    assert_eq!(out.status.code(), Some(1), "{}", stderr(&out));
    assert!(
        stderr(&out).contains("admits no samples"),
        "{}",
        stderr(&out)
    );
    assert!(!d.join("checkpoint.json").exists());
    assert!(!d.join("pace_report.csv").exists());

    let out = spdrf(&["train", "--train", "train.csv"], d);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("--test"));
}

#[test]
fn unknown_config_keys_are_reported_by_name() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("bad.toml"), "[train]\nsteps_per_epoch = 10\n").unwrap();
    let out = spdrf(&["train", "--config", "bad.toml"], d);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("steps_per_epoch"), "{}", stderr(&out));

    std::fs::write(d.join("seeded.toml"), "[train]\nseed = 10\n").unwrap();
    let out = spdrf(&["train", "--config", "seeded.toml"], d);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("train.seed"), "{}", stderr(&out));
}
