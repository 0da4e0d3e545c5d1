use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use num_complex::Complex64;
use rfpa::loopback::service::LoopClient;
use rfpa::signal::IqWaveform;

const STAGES: [&str; 9] = [
    "gen-dataset",
    "train-embedder",
    "calibrate",
    "attack-jam",
    "attack-poison",
    "attack-spoof-gd",
    "train-gan",
    "evaluate",
    "report",
];

fn fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/tiny.toml")
}

fn rfpa(config: &Path, out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rfpa"))
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(o: Output) -> Output {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    o
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn pipeline(out: &Path) {
    for s in STAGES {
        ok(rfpa(&fixture(), out, &[s]));
    }
}

#[test]
fn pipeline_is_byte_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    pipeline(&a);
    pipeline(&b);
    let mut names: Vec<String> = fs::read_dir(&a)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    for f in ["config.toml", "dataset.satv", "clean.satv", "embedder.satm", "gan.satm", "jam_frr.csv", "report.md"] {
        assert!(names.iter().any(|n| n == f), "{f} missing");
    }
    // The snapshot records its own directory; everything else must match.
    for n in names.iter().filter(|n| *n != "config.toml") {
        assert_eq!(fs::read(a.join(n)).unwrap(), fs::read(b.join(n)).unwrap(), "{n} differs between runs");
    }

    // Every CSV row carries the run's hash.
    let hash = fs::read_to_string(a.join("config.hash")).unwrap().trim().to_string();
    assert_eq!(fs::read_to_string(b.join("config.hash")).unwrap().trim(), hash);
    for n in names.iter().filter(|n| n.ends_with(".csv")) {
        let text = fs::read_to_string(a.join(n)).unwrap();
        for line in text.lines().skip(1) {
            assert!(line.ends_with(&hash), "{n}: {line}");
        }
    }
    let jam = fs::read_to_string(a.join("jam_frr.csv")).unwrap();
    assert_eq!(jam.lines().count(), 1 + 17);
    let manifest = fs::read_to_string(a.join("manifest.toml")).unwrap();
    assert!(manifest.contains("\"jam_frr.csv\""));
}

#[test]
fn dataset_matches_config() {
    let tmp = tempfile::tempdir().unwrap();
    ok(rfpa(&fixture(), tmp.path(), &["gen-dataset"]));
    let d = rfpa::formats::DatasetFile::load(&tmp.path().join("dataset.satv")).unwrap();
    assert_eq!(d.messages.len(), 3 * 20);
    let m: toml::Value = toml::from_str(&fs::read_to_string(tmp.path().join("manifest.toml")).unwrap()).unwrap();
    let n = |k: &str| m["splits"][k].as_array().unwrap().len();
    assert_eq!(n("train") + n("validation") + n("test"), 60);
}

#[test]
fn seed_change_is_a_hash_mismatch() {
    let tmp = tempfile::tempdir().unwrap();
    ok(rfpa(&fixture(), tmp.path(), &["gen-dataset"]));
    let o = rfpa(&fixture(), tmp.path(), &["--seed", "99", "train-embedder"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("hash mismatch"), "{}", stderr(&o));
}

#[test]
fn missing_inputs_are_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let o = rfpa(&fixture(), tmp.path(), &["train-embedder"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("missing input"), "{}", stderr(&o));
}

#[test]
fn empty_test_split_is_an_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("no_test.toml");
    let text = fs::read_to_string(fixture()).unwrap().replace(
        "messages_per_transmitter = 20\n",
        "messages_per_transmitter = 20\ntrain_fraction = 0.7\nvalidation_fraction = 0.3\n",
    );
    fs::write(&cfg, text).unwrap();
    let out = tmp.path().join("run");
    for s in ["gen-dataset", "train-embedder"] {
        ok(rfpa(&cfg, &out, &[s]));
    }
    let o = rfpa(&cfg, &out, &["evaluate"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("test split is empty"), "{}", stderr(&o));
    assert!(!out.join("eval_verification.csv").exists());
}

#[test]
fn serve_loop_echoes_identity_frames() {
    let mut child = Command::new(env!("CARGO_BIN_EXE_rfpa"))
        .args(["serve-loop", "--profile", "identity", "--channel", "wired", "--port", "0"])
        .env("RUST_LOG", "warn")
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let addr = line.trim().strip_prefix("serving on ").expect("address line").to_string();

    let samples: Vec<Complex64> = (0..512).map(|k| Complex64::from_polar(0.5, 0.1 * k as f64)).collect();
    let w = IqWaveform::new(samples, 25e6).unwrap();
    let mut client = LoopClient::connect(addr.as_str()).unwrap();
    let echoed = client.roundtrip(&w).unwrap();
    let worst = echoed
        .samples()
        .iter()
        .zip(w.samples())
        .map(|(a, b)| (a - b).norm())
        .fold(0.0, f64::max);
    child.kill().unwrap();
    let _ = child.wait();
    assert_eq!(echoed.len(), 512);
    assert!(worst < 1e-6, "{worst}");
}
