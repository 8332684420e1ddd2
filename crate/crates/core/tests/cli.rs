use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const SMALL: &str = "train_pairs = 64\ntest_pairs = 32\nepochs = 1\nseeds = 1,2\nvalidate = false\n";

fn tmass(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tmass")).args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

struct Sandbox {
    dir: TempDir,
}

impl Sandbox {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("small.txt"), SMALL).unwrap();
        Self { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn arg(&self, name: &str) -> String {
        self.path(name).to_str().unwrap().to_string()
    }

    fn run(&self, args: &[&str]) -> Output {
        let out = tmass(args);
        assert!(out.status.success(), "tmass {args:?} failed: {}", stderr(&out));
        out
    }
}

fn lines(path: &Path) -> Vec<String> {
    fs::read_to_string(path).unwrap().lines().map(String::from).collect()
}

#[test]
fn unknown_subcommand_prints_usage() {
    let out = tmass(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("Usage"));
}

#[test]
fn exit_codes() {
    let s = Sandbox::new();
    let missing = s.arg("nope.tmck");
    let out = tmass(&["eval", "--checkpoint", &missing, "--out", &s.arg("e")]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("nope.tmck"));

    let out = tmass(&["eval", "--out", &s.arg("e")]);
    assert_eq!(out.status.code(), Some(1));

    fs::write(s.path("bad.txt"), "learning_rate = 3\n").unwrap();
    let out = tmass(&["train", "--config", &s.arg("bad.txt"), "--out", &s.arg("t")]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("learning_rate"));

    let out = tmass(&["train", "--radius", "cubic", "--out", &s.arg("t")]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("radius"));

    fs::write(s.path("junk.tmck"), b"not a checkpoint").unwrap();
    let out = tmass(&["eval", "--checkpoint", &s.arg("junk.tmck"), "--out", &s.arg("e")]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("offset 0"));
}

#[test]
fn run_directories_are_never_reused() {
    let s = Sandbox::new();
    s.run(&["gen-data", "--config", &s.arg("small.txt"), "--out", &s.arg("d")]);
    let out = tmass(&["gen-data", "--config", &s.arg("small.txt"), "--out", &s.arg("d")]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("already exists"));
}

#[test]
fn dataset_files_reproduce_in_memory_generation() {
    let s = Sandbox::new();
    let cfg = s.arg("small.txt");
    s.run(&["gen-data", "--config", &cfg, "--seed", "4", "--out", &s.arg("d")]);
    for f in ["texts.tmeb", "videos.tmeb", "manifest.csv", "config.txt", "metrics.csv"] {
        assert!(s.path("d").join(f).exists(), "missing {f}");
    }
    assert_eq!(lines(&s.path("d/metrics.csv")), ["config,seed,direction,r1,r5,r10,mdr,mnr"]);
    s.run(&["train", "--config", &cfg, "--seed", "4", "--data", &s.arg("d"), "--out", &s.arg("a")]);
    s.run(&["train", "--config", &cfg, "--seed", "4", "--out", &s.arg("b")]);
    assert_eq!(fs::read(s.path("a/metrics.csv")).unwrap(), fs::read(s.path("b/metrics.csv")).unwrap());
    assert_eq!(fs::read(s.path("a/checkpoint.tmck")).unwrap(), fs::read(s.path("b/checkpoint.tmck")).unwrap());
}

#[test]
fn echoed_config_reproduces_the_run() {
    let s = Sandbox::new();
    s.run(&["train", "--config", &s.arg("small.txt"), "--mode", "ablation-ce-plus-s", "--alpha", "0.7", "--out", &s.arg("a")]);
    let echoed = s.arg("a/config.txt");
    assert!(fs::read_to_string(&echoed).unwrap().contains("mode = ablation-ce-plus-s"));
    s.run(&["train", "--config", &echoed, "--out", &s.arg("b")]);
    for f in ["config.txt", "metrics.csv", "checkpoint.tmck", "train_steps.csv", "train_epochs.csv"] {
        assert_eq!(fs::read(s.path("a").join(f)).unwrap(), fs::read(s.path("b").join(f)).unwrap(), "{f}");
    }
    let metrics = lines(&s.path("a/metrics.csv"));
    assert_eq!(metrics.len(), 3);
    assert!(metrics[1].starts_with("ablation-ce-plus-s,0,t2v,"));
    assert!(metrics[2].starts_with("ablation-ce-plus-s,0,v2t,"));
}

fn grid_configs(path: &Path) -> (Vec<String>, usize) {
    let rows = lines(path);
    assert_eq!(rows[0], "config,seed,direction,r1,r5,r10,mdr,mnr");
    let mut names: Vec<String> = Vec::new();
    for r in &rows[1..] {
        let fields: Vec<&str> = r.split(',').collect();
        assert_eq!(fields[2], "t2v");
        if fields[1] != "median" && !names.iter().any(|n| n == fields[0]) {
            names.push(fields[0].to_string());
        }
    }
    (names, rows.len() - 1)
}

#[test]
fn grids_have_one_row_per_config_and_seed_plus_medians() {
    let s = Sandbox::new();
    let cfg = s.arg("small.txt");
    s.run(&["ablate-loss", "--config", &cfg, "--out", &s.arg("loss")]);
    let (names, rows) = grid_configs(&s.path("loss/metrics.csv"));
    assert_eq!(names, ["baseline", "ce-plus-s", "s-only", "s-plus-sup"]);
    assert_eq!(rows, 4 * 2 + 4);

    s.run(&["sweep-trials", "--config", &cfg, "--out", &s.arg("trials")]);
    let (names, rows) = grid_configs(&s.path("trials/metrics.csv"));
    assert_eq!(names, ["off", "m=5", "m=10", "m=20"]);
    assert_eq!(rows, 4 * 2 + 4);

    s.run(&["sweep-alpha", "--config", &cfg, "--seed", "3", "--out", &s.arg("alpha")]);
    let (names, rows) = grid_configs(&s.path("alpha/metrics.csv"));
    assert_eq!(names, ["alpha=0.5", "alpha=0.8", "alpha=1", "alpha=1.2", "alpha=1.5"]);
    assert_eq!(rows, 5 + 5);
    assert!(lines(&s.path("alpha/metrics.csv"))[1].starts_with("alpha=0.5,3,"));
}

#[test]
fn sweep_trials_rejects_baseline() {
    let s = Sandbox::new();
    let out = tmass(&["sweep-trials", "--config", &s.arg("small.txt"), "--mode", "baseline", "--out", &s.arg("x")]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!s.path("x").exists());
}

#[test]
fn gradcheck_reports_max_relative_error() {
    let out = tmass(&["gradcheck", "--seed", "6"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.lines().any(|l| l.starts_with("max relative error: ")));

    let s = Sandbox::new();
    s.run(&["gradcheck", "--radius", "scalar", "--alpha", "0", "--out", &s.arg("g")]);
    let csv = lines(&s.path("g/gradcheck.csv"));
    assert_eq!(csv[0], "seed,radius,mode,alpha,checked,failures,max_relative_error,max_absolute_error");
    assert_eq!(csv.len(), 1 + 5);
    assert!(csv[1].starts_with("1,scalar,t-mass,0,"));
}

#[test]
fn analyze_writes_reports() {
    let s = Sandbox::new();
    s.run(&["analyze", "--config", &s.arg("small.txt"), "--out", &s.arg("an")]);
    for f in ["config.txt", "metrics.csv", "radius_report.csv", "alignment_report.csv", "observations.txt"] {
        assert!(s.path("an").join(f).exists(), "missing {f}");
    }
    assert_eq!(lines(&s.path("an/radius_report.csv")).len(), 1 + 32 * 32);
    assert_eq!(lines(&s.path("an/alignment_report.csv")).len(), 1 + 32);
    let out = tmass(&["analyze", "--config", &s.arg("small.txt"), "--mode", "baseline", "--out", &s.arg("b")]);
    assert_eq!(out.status.code(), Some(1));
}
