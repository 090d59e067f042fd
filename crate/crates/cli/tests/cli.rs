use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn ecm(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ecm"))
        .args(args)
        .env("ECM_OUTPUT_ROOT", root.join("runs"))
        .env("RUST_LOG", "warn")
        .current_dir(root)
        .output()
        .expect("binary runs")
}

fn ok(root: &Path, args: &[&str]) -> String {
    let out = ecm(root, args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn last_line(s: &str) -> PathBuf {
    PathBuf::from(s.lines().last().expect("output line").trim())
}

fn run_dirs(root: &Path, prefix: &str) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = fs::read_dir(root.join("runs"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap().to_string_lossy().starts_with(prefix))
        .collect();
    v.sort();
    v
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ecm(tmp.path(), &["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(ecm(tmp.path(), &["gen-data", "--pde", "darcy"]).status.code(), Some(2));
}

#[test]
fn gen_data_writes_dataset_metadata_and_run_record() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let args = ["gen-data", "--pde", "darcy", "--n", "32", "--count", "8", "--seed", "1", "--out", "d.ecmd"];
    ok(root, &args);
    assert!(root.join("d.ecmd").exists());
    let meta = fs::read_to_string(root.join("d.ecmd.meta")).unwrap();
    assert!(meta.contains("kind = darcy") && meta.contains("seed = 1"));

    let dirs = run_dirs(root, "gen-data");
    assert_eq!(dirs.len(), 1);
    let echo = fs::read_to_string(dirs[0].join("config.txt")).unwrap();
    assert!(echo.contains("data.seed = 1"));
    let stamp: serde_json::Value = serde_json::from_str(&fs::read_to_string(dirs[0].join("run.json")).unwrap()).unwrap();
    assert_eq!(stamp["seed"], 1);
    assert!(stamp["version"].as_str().unwrap().starts_with(env!("CARGO_PKG_VERSION")));
    assert!(dirs[0].join("log.txt").exists());

    let before = fs::read(root.join("d.ecmd")).unwrap();
    let again = ecm(root, &args);
    assert_eq!(again.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&again.stderr).contains("overwrite"));
    assert_eq!(fs::read(root.join("d.ecmd")).unwrap(), before);
}

#[test]
fn config_errors_name_the_key() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    fs::write(root.join("bad.cfg"), "stage2.lamda_init = 1,2,3\n").unwrap();
    let out = ecm(root, &["toy", "--config", "bad.cfg"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("stage2.lamda_init") && err.contains("module: config"), "{err}");

    let out = ecm(root, &["toy", "--set", "grid_n=many"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("grid_n"));

    let out = ecm(root, &["pretrain", "--data", "missing.ecmd"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn toy_run_reports_coverage() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let quick = [
        "--set", "toy.train_points=256",
        "--set", "toy.eval_samples=200",
        "--set", "toy_pretrain.epochs=1",
        "--set", "toy_stage1.epochs=1",
        "--set", "toy_stage2.epochs=1",
    ];
    let mut args = vec!["toy", "--shape", "circle", "--mode", "two_stage"];
    args.extend(quick);
    let out = ok(root, &args);
    assert!(out.contains("stage1") && out.contains("stage2"), "{out}");
    let dir = &run_dirs(root, "toy")[0];
    assert!(dir.join("results.csv").exists());
    assert!(dir.join("summary.txt").exists());
}

#[test]
fn micro_pipeline_runs_end_to_end_and_restarts_identically() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    ok(root, &["gen-data", "--pde", "darcy", "--n", "32", "--count", "256", "--seed", "3", "--out", "train.ecmd"]);
    ok(root, &["gen-data", "--pde", "darcy", "--n", "32", "--count", "2", "--seed", "4", "--out", "test.ecmd"]);
    let cfg = "\
# micro budget
pretrain.max_steps = 8
stage1.max_steps = 16
stage2.max_steps = 6
ablation.max_steps = 4
stage2.audit_every = 2
net.widths = 8,16,32
net.temb_dim = 16
";
    fs::write(root.join("micro.cfg"), cfg).unwrap();
    let c = ["--config", "micro.cfg"];
    let with = |args: &[&'static str]| -> Vec<&'static str> { args.iter().chain(c.iter()).copied().collect() };

    let pre = last_line(&ok(root, &with(&["pretrain", "--data", "train.ecmd"])));
    let s1 = last_line(&ok(root, &[&["train1", "--data", "train.ecmd", "--ckpt"][..], &[pre.to_str().unwrap()], &c].concat()));
    let s2 = last_line(&ok(root, &[&["train2", "--data", "train.ecmd", "--ckpt"][..], &[s1.to_str().unwrap()], &c].concat()));
    let abl = last_line(&ok(
        root,
        &[&["train2", "--ablation", "--data", "train.ecmd", "--ckpt"][..], &[s1.to_str().unwrap()], &c].concat(),
    ));
    assert!(s2.exists() && abl.exists());
    let log = fs::read_to_string(s2.parent().unwrap().join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 1 + 6);

    let s2s = s2.to_str().unwrap();
    let report = ok(root, &[&["eval", "--task", "forward", "--data", "test.ecmd", "--steps", "1,2", "--ckpt", s2s][..], &c].concat());
    assert!(report.contains("steps=1") && report.contains("steps=2"), "{report}");
    ok(root, &[&["eval", "--task", "uncond", "--steps", "2", "--ckpt", s2s][..], &c].concat());
    ok(root, &[&["sample", "--steps", "2", "--count", "3", "--seed", "5", "--ckpt", s2s][..], &c].concat());
    ok(root, &[&["solve-forward", "--coeff", "test.ecmd", "--steps", "2", "--ckpt", s2s][..], &c].concat());
    let inv = ecm(root, &[&["invert", "--solution", "test.ecmd", "--ckpt", s2s][..], &c].concat());
    assert_eq!(inv.status.code(), Some(1));

    let table = ok(root, &[&["bench", "--steps", "1,4", "--repeats", "2", "--data", "test.ecmd", "--ckpt", s2s][..], &c].concat());
    let mut lines = table.lines();
    assert_eq!(lines.next(), Some("method,steps,nfe,median_s,min_s,max_s"));
    assert!(lines.next().unwrap().starts_with("consistency,1,2,"));
    assert!(lines.next().unwrap().starts_with("consistency,4,5,"));

    let samples = run_dirs(root, "sample");
    assert!(samples[0].join("samples.ecmd").exists());
    assert!(samples[0].join("samples.ecmd.meta").exists());

    // Restart pretraining from the echoed config: identical checkpoint.
    let echoed = pre.parent().unwrap().join("config.txt");
    let again = last_line(&ok(root, &["pretrain", "--data", "train.ecmd", "--config", echoed.to_str().unwrap()]));
    assert_ne!(again, pre);
    assert_eq!(fs::read(&again).unwrap(), fs::read(&pre).unwrap());
}
