use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cswitch::experiment::{ExperimentConfig, GridConfig};

const TINY: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/configs/tiny.toml");
const DESK: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/configs/desk.toml");

fn cswitch(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cswitch")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = cswitch(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn snapshot(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn bundled_configs_parse() {
    for cfg in [TINY, DESK] {
        let text = ok(&["show-config", "--config", cfg]);
        assert!(text.contains("[train]"));
    }
}

#[test]
fn full_pipeline_runs_and_reruns_identically() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("run");
    ok(&["run", "--config", TINY, "--dir", path(&dir), "--system", "E2ESW+3W+F3+SF"]);
    for f in ["score/dev.txt", "score/eval.jsonl", "score/summary.json", "decode/eval.nbest.tsv", "lm/lm.ckpt"] {
        assert!(dir.join(f).is_file(), "{f}");
    }
    let first = snapshot(&dir);
    ok(&["run", "--dir", path(&dir)]);
    assert_eq!(first, snapshot(&dir));
}

#[test]
fn missing_stage_is_named() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("run");
    let out = cswitch(&["train", "--config", TINY, "--dir", path(&dir)]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("run `prep` first"), "{err}");

    ok(&["gen-data", "--config", TINY, "--dir", path(&dir)]);
    let out = cswitch(&["prep", "--dir", path(&dir), "--system", "E2ESW"]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("run `train-bpe` first"));
    assert!(!out.status.success());
}

#[test]
fn bad_system_name_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let out = cswitch(&["gen-data", "--config", TINY, "--dir", path(tmp.path()), "--system", "E2E+SF+CF"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("invalid system name"));
}

fn prep_refs(root: &Path, label: &str) -> Vec<String> {
    let dir = root.join(format!("label{label}"));
    for stage in ["gen-data", "train-bpe", "prep"] {
        ok(&[stage, "--config", TINY, "--dir", path(&dir), "--label", label]);
    }
    let mut lines = Vec::new();
    for split in ["train", "dev", "eval"] {
        let text = fs::read_to_string(dir.join(format!("prep/{split}.ref.tsv"))).unwrap();
        lines.extend(text.lines().map(String::from));
    }
    lines
}

#[test]
fn label_two_differs_only_in_particles_and_noises() {
    let tmp = tempfile::tempdir().unwrap();
    let one = prep_refs(tmp.path(), "1");
    let two = prep_refs(tmp.path(), "2");
    assert_eq!(one.len(), two.len());
    let special1 = |t: &str| ["lah", "hmm", "leh", "lor", "(laughing)", "(cough)"].contains(&t);
    let special2 = |t: &str| t == "<dispar>" || t == "<nlsyms>";
    let mut changed = 0;
    for (a, b) in one.iter().zip(&two) {
        let (ida, ta) = a.split_once('\t').unwrap();
        let (idb, tb) = b.split_once('\t').unwrap();
        assert_eq!(ida, idb);
        let ka: Vec<&str> = ta.split_whitespace().collect();
        let kb: Vec<&str> = tb.split_whitespace().collect();
        assert_eq!(ka.len(), kb.len(), "{a} / {b}");
        for (x, y) in ka.iter().zip(&kb) {
            if x != y {
                assert!(special1(x) && special2(y), "{x} -> {y}");
                changed += 1;
            }
        }
    }
    assert!(changed > 0, "tiny corpus should contain at least one particle or noise");
}

#[test]
fn report_lists_every_configured_run() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("grid");
    let done = root.join("a");
    ok(&["run", "--config", TINY, "--dir", path(&done)]);
    let pending = root.join("b");
    ok(&["gen-data", "--config", TINY, "--dir", path(&pending), "--system", "E2ELD"]);
    let text = ok(&["report", path(&root)]);
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 2, "{text}");
    assert!(rows[0].starts_with("E2E\t1\t") && !rows[0].contains("MISSING"));
    assert_eq!(rows[1], "E2ELD\t1\tMISSING\tMISSING\tMISSING\tMISSING");
}

#[test]
fn grid_marks_failures_and_exits_nonzero() {
    let tmp = tempfile::tempdir().unwrap();
    let grid = GridConfig {
        base: ExperimentConfig::read(Path::new(TINY)).unwrap(),
        systems: vec!["E2E".into(), "E2ESW(500)".into()],
        labels: vec![1],
        seeds: vec![1],
    };
    let cfg = tmp.path().join("grid.toml");
    fs::write(&cfg, toml::to_string(&grid).unwrap()).unwrap();
    let root = tmp.path().join("runs");
    let out = cswitch(&["grid", "--config", path(&cfg), "--dir", path(&root)]);
    assert!(!out.status.success());
    let text = fs::read_to_string(root.join("report.txt")).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 2);
    assert!(!rows[0].contains("FAILED"));
    assert_eq!(rows[1], "E2ESW(500)\t1\tFAILED\tFAILED\tFAILED\tFAILED");
}
