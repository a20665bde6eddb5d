use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_latseg");

/// Small enough to train in about a second per run.
const TINY: &[&str] = &[
    "--set",
    "resolution=32",
    "--set",
    "codec.kind=pixel_space",
    "--set",
    "data.train_count=8",
    "--set",
    "data.test_count=4",
    "--set",
    "train.max_steps=4",
    "--set",
    "train.warmup_steps=2",
    "--set",
    "eval.seeds=2",
    "--set",
    "denoiser.base_channels=8",
    "--set",
    "denoiser.norm_groups=4",
];

fn latseg(args: &[&str]) -> Output {
    Command::new(BIN).args(args).env("RUST_LOG", "warn").output().expect("binary runs")
}

fn tiny(cmd: &str, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![cmd, "--out", out.to_str().unwrap()];
    args.extend_from_slice(TINY);
    args.extend_from_slice(extra);
    latseg(&args)
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    let mut rows = vec![r.headers().unwrap().iter().map(String::from).collect()];
    rows.extend(r.records().map(|x| x.unwrap().iter().map(String::from).collect()));
    rows
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(latseg(&["train", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(latseg(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(latseg(&[]).status.code(), Some(2));
    assert_eq!(latseg(&["--help"]).status.code(), Some(0));
}

#[test]
fn config_errors_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "alignment.lambda = -1.0\n").unwrap();
    let o = latseg(&["train", "--dry-run", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("alignment.lambda"));

    std::fs::write(&cfg, "train.learning_rate = 1e-4\n").unwrap();
    assert_eq!(latseg(&["ablate", "--config", cfg.to_str().unwrap()]).status.code(), Some(3));
    assert_eq!(latseg(&["train", "--dry-run", "--config", "/no/such/file.cfg"]).status.code(), Some(3));
    assert_eq!(latseg(&["stability", "--dry-run", "--seeds", "0"]).status.code(), Some(3));
}

#[test]
fn runtime_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let o = latseg(&["report", "--dir", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let o = latseg(&["eval", "--bundle", "/no/such.bundle", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn dry_run_prints_plan_without_training() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("never");
    let count = |args: &[&str]| {
        let mut a = args.to_vec();
        a.extend(["--dry-run", "--out", out.to_str().unwrap()]);
        let o = latseg(&a);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        stdout(&o).lines().filter(|l| l.starts_with("  ")).count()
    };
    assert_eq!(count(&["ablate"]), 6);
    assert_eq!(count(&["sweep-lambda"]), 7);
    assert_eq!(count(&["sweep-lambda", "--seeds", "3"]), 21);
    assert_eq!(count(&["sweep-schedule"]), 5);
    assert_eq!(count(&["stability", "--replicates", "5"]), 10);
    assert_eq!(count(&["train", "--seed", "7"]), 1);
    assert!(!out.exists(), "dry run must not write outputs");
}

#[test]
fn ablate_writes_six_row_table_and_rerenders() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("ablate");
    let o = tiny("ablate", &out, &[]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in [
        "config.resolved",
        "report.json",
        "report.md",
        "tables/ablation.csv",
        "tables/runs.csv",
        "plots/losses.png",
        "plots/dice.png",
    ] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let rows = csv_rows(&out.join("tables/ablation.csv"));
    assert_eq!(rows.len(), 7);
    assert_eq!(rows[0], ["Parameterization", "Feature alignment", "Dice", "IoU"]);
    let aligned: Vec<&str> = rows[1..].iter().map(|r| r[1].as_str()).collect();
    assert_eq!(aligned, ["no", "yes", "no", "yes", "no", "yes"]);
    assert_eq!(
        std::fs::read_dir(out.join("checkpoints"))
            .unwrap()
            .filter(|e| { e.as_ref().unwrap().path().extension().is_some_and(|x| x == "bundle") })
            .count(),
        6
    );

    // Tables are a pure function of report.json.
    let before = std::fs::read(out.join("tables/ablation.csv")).unwrap();
    std::fs::remove_dir_all(out.join("tables")).unwrap();
    let o = latseg(&["report", "--dir", out.to_str().unwrap()]);
    assert!(o.status.success());
    assert_eq!(std::fs::read(out.join("tables/ablation.csv")).unwrap(), before);

    // The resolved config reproduces the same experiment.
    let again = dir.path().join("again");
    let cfg = out.join("config.resolved");
    let o = latseg(&["ablate", "--config", cfg.to_str().unwrap(), "--out", again.to_str().unwrap()]);
    assert!(o.status.success());
    assert_eq!(std::fs::read(again.join("tables/ablation.csv")).unwrap(), before);
}

#[test]
fn sweeps_and_stability_have_expected_shapes() {
    let dir = tempfile::tempdir().unwrap();
    let lam = dir.path().join("lambda");
    let o = tiny("sweep-lambda", &lam, &["--seeds", "2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = csv_rows(&lam.join("tables/lambda.csv"));
    let lambdas: Vec<&str> = rows[1..].iter().map(|r| r[0].as_str()).collect();
    assert_eq!(lambdas, ["0", "0.15", "0.25", "0.5", "0.75", "1", "1.25"]);
    let seeds = csv_rows(&lam.join("tables/lambda_seeds.csv"));
    assert_eq!(seeds.len(), 2);
    assert_eq!(seeds[0].len(), 7);
    assert!(seeds[1][1..].iter().all(|c| c.contains(" ± ")));

    let sched = dir.path().join("schedule");
    assert!(tiny("sweep-schedule", &sched, &[]).status.success());
    let rows = csv_rows(&sched.join("tables/schedule.csv"));
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0].len(), 6);

    let stab = dir.path().join("stability");
    assert!(tiny("stability", &stab, &["--seeds", "3", "--replicates", "2"]).status.success());
    let rows = csv_rows(&stab.join("tables/stability.csv"));
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[1][0], "ε-prediction");
    assert_eq!(rows[2][0], "x0-prediction");
    assert_eq!(rows[0].len(), 3);
}

#[test]
fn synth_train_infer_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("synth");
    let o = tiny("synth-data", &data, &[]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(std::fs::read_dir(data.join("data/images")).unwrap().count(), 12);

    let run = dir.path().join("train");
    let o = tiny("train", &run, &["--seed", "3"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let bundle = run.join("checkpoints/x0-seed3.bundle");
    assert!(bundle.is_file());

    let inf = dir.path().join("infer");
    let o = latseg(&[
        "infer",
        "--bundle",
        bundle.to_str().unwrap(),
        "--input",
        data.join("data").to_str().unwrap(),
        "--out",
        inf.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let sidecar: serde_json::Value = serde_json::from_slice(&std::fs::read(inf.join("infer.json")).unwrap()).unwrap();
    assert_eq!(sidecar["images"].as_array().unwrap().len(), 12);
    assert!(sidecar["images"][0]["dice"].is_number());
    assert!(sidecar["config_digest"].is_string());
    let mask = image::open(inf.join("masks/synth_00000.png")).unwrap().to_luma8();
    assert_eq!(mask.dimensions(), (32, 32));
    assert!(mask.pixels().all(|p| p.0[0] == 0 || p.0[0] == 255));

    let ev = dir.path().join("eval");
    let o = tiny("eval", &ev, &["--bundle", bundle.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = csv_rows(&ev.join("tables/eval.csv"));
    assert_eq!(rows.len(), 4);
}
