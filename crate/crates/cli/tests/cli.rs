use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"{
  "setup": {
    "protocol": {"n_regions": 9, "calib_duration_s": 2.0},
    "dataset": {"n_sessions": 2, "main_stride": 20, "calib_stride": 10}
  },
  "folds": 2,
  "gbrt": {"n_trees": 5},
  "noise_levels_dba": [54.5]
}"#;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_echogaze"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn echogaze")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn with<'a>(rest: &[&'a str]) -> Vec<&'a str> {
    [&["--config", "tiny.json"][..], rest].concat()
}

fn tiny_dir() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.json"), TINY).unwrap();
    dir
}

#[test]
fn filter_dump_lists_both_bands() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["--out", "f.json", "filter-dump", "--points", "16"]);
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("f.json")).unwrap()).unwrap();
    assert_eq!(v.as_array().map(Vec::len), Some(2));
}

#[test]
fn gen_protocol_is_seeded() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["--seed", "3", "--out", "a.csv", "gen-protocol"]);
    ok(dir.path(), &["--seed", "3", "--out", "b.csv", "gen-protocol"]);
    ok(dir.path(), &["--seed", "4", "--out", "c.csv", "gen-protocol"]);
    let read = |n: &str| fs::read(dir.path().join(n)).unwrap();
    assert_eq!(read("a.csv"), read("b.csv"));
    assert_ne!(read("a.csv"), read("c.csv"));
    assert!(read("a.csv").split(|&b| b == b'\n').count() > 100);
}

#[test]
fn session_to_predictions() {
    let dir = tiny_dir();
    let d = dir.path();

    ok(d, &with(&["--out", "s", "simulate", "--sessions", "2", "--wav"]));
    for f in ["audio.pcm", "labels.csv", "meta.json", "audio.wav"] {
        assert!(d.join("s/session_00").join(f).is_file(), "{f}");
    }
    ok(d, &with(&["preprocess", "--session", "s/session_00"]));
    assert!(d.join("s/session_00/profiles.eprf").is_file());

    ok(d, &with(&["--out", "m.gzmd", "train", "--sessions", "s/session_01", "--trees", "5"]));
    ok(d, &with(&["--out", "c.gzmd", "calibrate", "--model", "m.gzmd", "--session", "s/session_00"]));
    let out = ok(d, &with(&["--out", "p.csv", "infer", "--model", "c.gzmd", "--session", "s/session_00"]));
    assert!(String::from_utf8_lossy(&out.stdout).contains("MGAE"));
    let preds = fs::read_to_string(d.join("p.csv")).unwrap();
    assert!(preds.lines().count() > 10);

    ok(d, &with(&["--out", "q.gzmd", "quantize", "--sessions", "s/session_01", "--trees", "5"]));
    ok(d, &with(&["bench-quant", "--model", "q.gzmd", "--session", "s/session_00", "--report", "b.json"]));
    let bench: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("b.json")).unwrap()).unwrap();
    assert!(bench["frames"].as_u64().unwrap() > 0);
    assert!(bench["mgae_quant_deg"].as_f64().unwrap().is_finite());

    // A tampered recording fails validation.
    let pcm = d.join("s/session_01/audio.pcm");
    let mut bytes = fs::read(&pcm).unwrap();
    bytes[1000] ^= 0x40;
    fs::write(&pcm, bytes).unwrap();
    assert_eq!(code(&run(d, &with(&["preprocess", "--session", "s/session_01"]))), 2);

    // So does a model trained under a different configuration.
    ok(d, &["--seed", "9", "--out", "other", "simulate", "--sessions", "1"]);
    assert_eq!(code(&run(d, &["--seed", "9", "infer", "--model", "m.gzmd", "--session", "other/session_00"])), 2);
}

#[test]
fn exit_codes() {
    let dir = tiny_dir();
    let d = dir.path();
    assert_eq!(code(&run(d, &["no-such-command"])), 2);
    assert_eq!(code(&run(d, &["preprocess", "--session", "missing"])), 1);

    fs::write(d.join("bad.json"), r#"{"folds": 1}"#).unwrap();
    assert_eq!(code(&run(d, &["--config", "bad.json", "evaluate"])), 2);
    fs::write(d.join("broken.json"), "{").unwrap();
    assert_eq!(code(&run(d, &["--config", "broken.json", "evaluate"])), 2);
    assert_eq!(code(&run(d, &["filter-dump", "--order", "0"])), 2);
}

#[test]
fn evaluate_report_is_reproducible() {
    let dir = tiny_dir();
    let d = dir.path();
    ok(d, &["--config", "tiny.json", "--out", "r1.json", "evaluate"]);
    ok(d, &["--config", "tiny.json", "--out", "r2.json", "evaluate"]);
    let (a, b) = (fs::read(d.join("r1.json")).unwrap(), fs::read(d.join("r2.json")).unwrap());
    assert_eq!(a, b);
    let v: serde_json::Value = serde_json::from_slice(&a).unwrap();
    assert!(v["cross_session_gbrt"]["mean_mgae_deg"].as_f64().unwrap().is_finite());
}
