use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dape_core::{checkpoint, DapeModel};
use dape_harness::check::CheckReport;
use dape_harness::RunConfig;

fn small() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/small.json")
}

fn dape(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dape")).env("DAPE_RUN_DIR", root).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn write_config(dir: &Path, cfg: &RunConfig) -> PathBuf {
    let p = dir.join("run.json");
    fs::write(&p, cfg.to_json()).unwrap();
    p
}

#[test]
fn usage_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(code(&dape(tmp.path(), &["frobnicate"])), 2);
    assert_eq!(code(&dape(tmp.path(), &["gen"])), 2);
    assert_eq!(code(&dape(tmp.path(), &["check", "--suite", "nope"])), 2);
    assert_eq!(code(&dape(tmp.path(), &["check", "--fault", "nope"])), 2);
    assert_eq!(code(&dape(tmp.path(), &["bench", "--config", small().to_str().unwrap(), "--densities", "0.5,1.5"])), 2);
    let bad = tmp.path().join("bad.json");
    fs::write(&bad, r#"{"model": {"d": 8, "colour": 1}}"#).unwrap();
    assert_eq!(code(&dape(tmp.path(), &["train", "--config", bad.to_str().unwrap()])), 2);
    assert_eq!(code(&dape(tmp.path(), &["--help"])), 0);
}

#[test]
fn missing_files_exit_3() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("none.json");
    assert_eq!(code(&dape(tmp.path(), &["train", "--config", missing.to_str().unwrap()])), 3);

    let mut cfg = RunConfig::load(&small()).unwrap();
    cfg.corpus.path = Some("no-such-corpus".into());
    let p = write_config(tmp.path(), &cfg);
    let o = dape(tmp.path(), &["train", "--config", p.to_str().unwrap()]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn gen_is_byte_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small();
    for out in ["a", "b"] {
        let dir = tmp.path().join(out);
        let o = dape(tmp.path(), &["gen", "--n", "10", "--seed", "3", "--density", "mixed", "--config", cfg.to_str().unwrap(), "--out", dir.to_str().unwrap()]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["manifest.json", "images.bin", "texts.bin"] {
        let a = fs::read(tmp.path().join("a").join(f)).unwrap();
        assert!(!a.is_empty());
        assert_eq!(a, fs::read(tmp.path().join("b").join(f)).unwrap(), "{f}");
    }
}

#[test]
fn zero_step_training_saves_the_initialisation() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::load(&small()).unwrap();
    cfg.train.steps = 0;
    let p = write_config(tmp.path(), &cfg);
    assert_eq!(code(&dape(tmp.path(), &["train", "--config", p.to_str().unwrap()])), 0);
    let dir = tmp.path().join(cfg.run_id());
    let init = checkpoint::to_bytes(&DapeModel::<f64>::new(cfg.model.clone()).unwrap()).unwrap();
    assert_eq!(fs::read(dir.join("model.ckpt")).unwrap(), init);
    let metrics = fs::read_to_string(dir.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 2);
}

#[test]
fn training_reruns_are_identical_and_reuse_a_saved_corpus() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert_eq!(code(&dape(&a, &["train", "--config", small().to_str().unwrap()])), 0);
    assert_eq!(code(&dape(&b, &["train", "--config", small().to_str().unwrap()])), 0);
    let id = RunConfig::load(&small()).unwrap().run_id();
    for f in ["metrics.csv", "steps.csv", "model.ckpt", "config.json"] {
        assert_eq!(fs::read(a.join(&id).join(f)).unwrap(), fs::read(b.join(&id).join(f)).unwrap(), "{f}");
    }

    // the generated corpus, pointed to explicitly, gives the same run
    let mut cfg = RunConfig::load(&small()).unwrap();
    cfg.corpus.path = Some(a.join(&id).join("corpus"));
    let p = write_config(tmp.path(), &cfg);
    let c = tmp.path().join("c");
    assert_eq!(code(&dape(&c, &["train", "--config", p.to_str().unwrap()])), 0);
    assert_eq!(fs::read(a.join(&id).join("model.ckpt")).unwrap(), fs::read(c.join(cfg.run_id()).join("model.ckpt")).unwrap());
}

#[test]
fn bench_writes_one_row_per_density_plus_natural() {
    let tmp = tempfile::tempdir().unwrap();
    let o = dape(tmp.path(), &["bench", "--config", small().to_str().unwrap(), "--densities", "0,0.5,1"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let id = RunConfig::load(&small()).unwrap().run_id();
    let csv = fs::read_to_string(tmp.path().join(id).join("bench.csv")).unwrap();
    let labels: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(labels, ["0.00", "0.50", "1.00", "natural"]);
}

#[test]
fn check_report_records_suites_and_faults() {
    let tmp = tempfile::tempdir().unwrap();
    let report = tmp.path().join("r.json");
    let o = dape(tmp.path(), &["check", "--suite", "mask", "--report", report.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let r: CheckReport = serde_json::from_slice(&fs::read(&report).unwrap()).unwrap();
    assert!(r.passed && r.fault.is_none());
    assert_eq!(r.suites.len(), 1);

    let o = dape(tmp.path(), &["check", "--suite", "cwa", "--fault", "wrong-order-topk", "--report", report.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    let r: CheckReport = serde_json::from_slice(&fs::read(&report).unwrap()).unwrap();
    assert!(!r.passed);
    assert_eq!(r.failures(), ["cwa/topk_matches_rank_oracle"]);
}
