use std::path::Path;
use std::process::{Command, Output};

fn cophy(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cophy")).current_dir(dir).env("COPHY_THREADS", "1").args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&cophy(dir.path(), &["frobnicate"])), 2);
    let o = cophy(dir.path(), &["--templates", "roundabout", "--out", "x.ndjson", "gen"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("roundabout"), "{}", stderr(&o));
    std::fs::write(dir.path().join("bad.toml"), "seed = \"one\"\n").unwrap();
    assert_eq!(code(&cophy(dir.path(), &["--config", "bad.toml", "--out", "x", "gen"])), 2);
    std::fs::write(dir.path().join("typo.toml"), "[il]\nepochz = 3\n").unwrap();
    assert_eq!(code(&cophy(dir.path(), &["--config", "typo.toml", "--out", "x", "gen"])), 2);
    assert_eq!(code(&cophy(dir.path(), &["--k-steps", "3", "--out", "x", "gen"])), 2);
}

#[test]
fn missing_inputs_exit_3_and_name_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let o = cophy(dir.path(), &["--config", "absent.toml", "--out", "x", "gen"]);
    assert_eq!(code(&o), 3);
    let o = cophy(dir.path(), &["--out", "r.json", "eval", "--data", "nothing.ndjson", "--expert"]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("nothing.ndjson"), "{}", stderr(&o));

    assert_eq!(code(&cophy(dir.path(), &["--count", "1", "--out", "d.ndjson", "gen"])), 0);
    let o = cophy(dir.path(), &["--out", "r.json", "eval", "--data", "d.ndjson", "--ckpt", "missing.ckpt"]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("missing.ckpt"), "{}", stderr(&o));
    std::fs::write(dir.path().join("corrupt.ckpt"), b"not a checkpoint").unwrap();
    let o = cophy(dir.path(), &["--out", "r.json", "eval", "--data", "d.ndjson", "--ckpt", "corrupt.ckpt"]);
    assert_eq!(code(&o), 3);
}

#[test]
fn generation_is_reproducible_and_experts_score_perfectly() {
    let dir = tempfile::tempdir().unwrap();
    for out in ["a.ndjson", "b.ndjson"] {
        assert_eq!(code(&cophy(dir.path(), &["--seed", "9", "--count", "2", "--out", out, "gen"])), 0);
    }
    assert_eq!(code(&cophy(dir.path(), &["--seed", "10", "--count", "2", "--out", "c.ndjson", "gen"])), 0);
    let read = |f: &str| std::fs::read(dir.path().join(f)).unwrap();
    assert_eq!(read("a.ndjson"), read("b.ndjson"));
    assert_ne!(read("a.ndjson"), read("c.ndjson"));
    assert_eq!(String::from_utf8(read("a.ndjson")).unwrap().lines().count(), 12);

    let o = cophy(dir.path(), &["--out", "expert.json", "eval", "--data", "a.ndjson", "--expert", "--csv", "expert.csv"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_slice(&read("expert.json")).unwrap();
    assert_eq!(report["schema"], "cophy-report/1");
    assert_eq!(report["summary"]["pdms"], 1.0);
    assert_eq!(report["summary"]["count"], 12);
    assert_eq!(report["config"]["seed"], 1);
    let csv = String::from_utf8(read("expert.csv")).unwrap();
    assert!(csv.starts_with("group,count,pdms"));
    assert_eq!(csv.lines().count(), 8);
}
