use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use simoe::runner::PolicyKind;
use simoe_cli::{parse_config, ExperimentManifest};

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn simoe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_simoe")).args(args).output().unwrap()
}

fn tiny(dir: &Path, extra: &str) -> PathBuf {
    let path = dir.join("run.cfg");
    let text = fs::read_to_string(configs().join("tiny.cfg")).unwrap();
    let text: String = text.lines().filter(|l| !l.starts_with("out")).map(|l| format!("{l}\n")).collect();
    fs::write(&path, format!("{text}{extra}")).unwrap();
    path
}

fn rows(csv: &str) -> Vec<Vec<String>> {
    csv.lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(|l| l.split(',').map(String::from).collect())
        .collect()
}

#[test]
fn sample_config_parses_to_the_defaults() {
    let m = parse_config(&fs::read_to_string(configs().join("sample.cfg")).unwrap()).unwrap();
    let expected = ExperimentManifest {
        seeds_explicit: true,
        out: PathBuf::from("out/sample"),
        ..ExperimentManifest::default()
    };
    assert_eq!(m, expected);
}

#[test]
fn tiny_simulate_reports_every_metric_for_every_policy() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let o = simoe(&["simulate", "--config", tiny(dir.path(), "").to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(csv.starts_with("# simoe "));
    let r = rows(&csv);
    assert_eq!(r.len(), 3 * 4);
    for p in PolicyKind::ALL {
        let metrics: Vec<&str> = r.iter().filter(|row| row[1] == p.name()).map(|row| row[4].as_str()).collect();
        assert_eq!(metrics, ["faa", "caa", "ffm", "usage_gap"]);
    }
    let runs: Vec<_> = fs::read_dir(out.join("runs")).unwrap().collect();
    assert_eq!(runs.len(), 3);
    for run in runs {
        let run = run.unwrap().path();
        assert!(fs::read(run.join("run.dump")).unwrap().starts_with(b"CLRD1"));
        let log = fs::read_to_string(run.join("gate.log")).unwrap();
        assert!(log.starts_with("task,index,score,tau,bit\n"));
    }
}

#[test]
fn same_seed_gives_byte_identical_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path(), "");
    let mut trees = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        let o = simoe(&["simulate", "--config", cfg.to_str().unwrap(), "--seed", "7", "--out", out.to_str().unwrap()]);
        assert!(o.status.success());
        let mut files: Vec<(PathBuf, Vec<u8>)> = Vec::new();
        let mut stack = vec![out.clone()];
        while let Some(p) = stack.pop() {
            for e in fs::read_dir(&p).unwrap() {
                let e = e.unwrap().path();
                if e.is_dir() {
                    stack.push(e);
                } else {
                    files.push((e.strip_prefix(&out).unwrap().to_path_buf(), fs::read(&e).unwrap()));
                }
            }
        }
        files.sort();
        trees.push(files);
    }
    assert_eq!(trees[0].len(), 1 + 3 * 2);
    assert_eq!(trees[0], trees[1]);
}

#[test]
fn data_fractions_multiply_the_rows() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let o = simoe(&[
        "simulate",
        "--config",
        tiny(dir.path(), "").to_str().unwrap(),
        "--data-fraction",
        "0.1,0.5,1.0",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r = rows(&fs::read_to_string(out.join("metrics.csv")).unwrap());
    assert_eq!(r.len(), 3 * 3 * 4);
    for f in ["0.1", "0.5", "1"] {
        assert_eq!(r.iter().filter(|row| row[2] == f).count(), 12);
    }
}

#[test]
fn auc_probe_separates_far_tasks() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let cfg = dir.path().join("far.cfg");
    fs::write(
        &cfg,
        "tasks = 3\ndim = 12\nclasses_per_task = 2\ntrain_per_class = 60\ntest_per_class = 30\n\
         mean_separation = 12\nepochs = 3\n",
    )
    .unwrap();
    let cfg = cfg.to_str().unwrap();
    let o = simoe(&["auc-probe", "--config", cfg, "--policy", "adaptive", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(out.join("auc.csv")).unwrap();
    let header = csv.lines().find(|l| !l.starts_with('#')).unwrap();
    assert_eq!(header, "run_id,policy,fraction,seed,boundary,rmd,learnable_key,task_centroids");
    let r = rows(&csv);
    assert_eq!(r.len(), 2 + 1);
    let mean = r.iter().find(|row| row[4] == "mean").unwrap();
    assert!(mean[5].parse::<f64>().unwrap() >= 0.99, "{mean:?}");
}

#[test]
fn parse_errors_exit_nonzero_with_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "tasks = 2\n\nbogus = 1\n").unwrap();
    let o = simoe(&["simulate", "--config", cfg.to_str().unwrap()]);
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.starts_with("error: "), "{err}");
    assert!(err.contains(":3: unknown key `bogus`"), "{err}");
}

#[test]
fn strict_refuses_the_default_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("s.cfg");
    fs::write(&cfg, "tasks = 1\n").unwrap();
    let o = simoe(&["simulate", "--config", cfg.to_str().unwrap(), "--strict"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("--strict needs explicit seeds"));
}
