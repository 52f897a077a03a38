use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use unitforge_cli::error::exit;
use unitforge_cli::manifest::{sha256_file, RunManifest};

const BIN: &str = env!("CARGO_BIN_EXE_unitforge");

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .current_dir(dir)
        .env("UNITFORGE_LOG", "error")
        .output()
        .expect("spawn unitforge")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let o = run(dir, args);
    assert!(
        o.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

const SPEC: &str = r#"{"speech_text":64,"image_text":64,"instruct":16,"supervised":48,"preference":16}"#;

/// A small corpus and a backbone taken through stages I-III, plus a NAR
/// and an AR decoder, all built with the binary.
fn fixture() -> &'static Path {
    static DIR: OnceLock<PathBuf> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("cli-contracts");
        let _ = fs::remove_dir_all(&dir);
        fs::create_dir_all(&dir).unwrap();
        fs::write(dir.join("spec.json"), SPEC).unwrap();
        fs::write(dir.join("pre.kv"), "samples = 256\n").unwrap();
        fs::write(dir.join("short.kv"), "epochs = 1\n").unwrap();
        fs::write(dir.join("dec.kv"), "epochs = 1\nlayers = 1\nexperts = 2\n").unwrap();
        ok(&dir, &["gen-data", "--spec", "spec.json", "--out", "corpus"]);
        ok(&dir, &["train", "pretrain", "--config", "pre.kv", "--out", "pre"]);
        let stages = [
            ("align-2", "pre/backbone-pretrain.oomn", "s2"),
            ("align-1", "s2/backbone-II.oomn", "s1"),
            ("align-3", "s1/backbone-I.oomn", "s3"),
        ];
        for (stage, bb, out) in stages {
            ok(
                &dir,
                &["train", stage, "--config", "short.kv", "--backbone", bb, "--corpus", "corpus", "--out", out],
            );
        }
        for (stage, out) in [("decoder-nar", "nar"), ("decoder-ar", "ar")] {
            ok(
                &dir,
                &[
                    "train", stage, "--config", "dec.kv", "--backbone", "s3/backbone-III.oomn", "--corpus", "corpus",
                    "--out", out,
                ],
            );
        }
        dir
    })
}

fn scratch(name: &str) -> PathBuf {
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join(name);
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn csv_column(path: &Path, column: &str) -> Vec<String> {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let idx = header.iter().position(|h| *h == column).unwrap();
    lines.map(|l| l.split(',').nth(idx).unwrap().to_string()).collect()
}

#[test]
fn gen_data_is_deterministic() {
    let dir = scratch("cli-gen-data");
    fs::write(dir.join("spec.json"), SPEC).unwrap();
    ok(&dir, &["gen-data", "--spec", "spec.json", "--out", "a"]);
    ok(&dir, &["gen-data", "--spec", "spec.json", "--out", "b"]);
    let ma = RunManifest::read(&dir.join("a/manifest-gen-data.json")).unwrap();
    let mb = RunManifest::read(&dir.join("b/manifest-gen-data.json")).unwrap();
    assert_eq!(ma.run_id, mb.run_id);
    assert_eq!(ma.outputs, mb.outputs);
    for stem in ["speech_text", "image_text", "instruct", "supervised", "preference"] {
        let f = format!("{stem}.jsonl");
        assert!(ma.outputs.iter().any(|o| o.path == f), "{f} recorded");
        assert_eq!(
            sha256_file(&dir.join("a").join(&f)).unwrap(),
            sha256_file(&dir.join("b").join(&f)).unwrap()
        );
    }
    // a different seed changes the corpora
    ok(&dir, &["gen-data", "--spec", "spec.json", "--seed", "9", "--out", "c"]);
    assert_ne!(
        sha256_file(&dir.join("a/supervised.jsonl")).unwrap(),
        sha256_file(&dir.join("c/supervised.jsonl")).unwrap()
    );
}

#[test]
fn missing_spec_exits_2_naming_the_path() {
    let dir = scratch("cli-missing");
    let o = run(&dir, &["gen-data", "--spec", "no-such-spec.json", "--out", "x"]);
    assert_eq!(code(&o), exit::MISSING_INPUT);
    assert!(String::from_utf8_lossy(&o.stderr).contains("no-such-spec.json"));
}

#[test]
fn infeasible_spec_exits_3_naming_the_constraint() {
    let dir = scratch("cli-infeasible");
    fs::write(dir.join("spec.json"), r#"{"upsample": 2}"#).unwrap();
    let o = run(&dir, &["gen-data", "--spec", "spec.json", "--out", "x"]);
    assert_eq!(code(&o), exit::INVALID_SPEC);
    assert!(String::from_utf8_lossy(&o.stderr).contains("feasibility constraint"));
    fs::write(dir.join("typo.json"), r#"{"supervize": 5}"#).unwrap();
    let o = run(&dir, &["gen-data", "--spec", "typo.json", "--out", "x"]);
    assert_eq!(code(&o), exit::INVALID_SPEC);
}

#[test]
fn usage_errors_exit_2() {
    let dir = scratch("cli-usage");
    assert_eq!(code(&run(&dir, &["frobnicate"])), 2);
    assert_eq!(code(&run(&dir, &["train", "stage-9"])), 2);
}

#[test]
fn out_of_order_stage_exits_4() {
    let dir = fixture();
    let o = run(
        dir,
        &["train", "align-3", "--backbone", "pre/backbone-pretrain.oomn", "--corpus", "corpus", "--out", "bad3"],
    );
    assert_eq!(code(&o), exit::SEQUENCING, "{}", String::from_utf8_lossy(&o.stderr));
    let o = run(
        dir,
        &["train", "decoder-nar", "--backbone", "s2/backbone-II.oomn", "--corpus", "corpus", "--out", "bad4"],
    );
    assert_eq!(code(&o), exit::SEQUENCING);
}

#[test]
fn kind_mismatch_exits_5() {
    let dir = fixture();
    let bb = "s3/backbone-III.oomn";
    let o = run(
        dir,
        &["eval", "--metric", "uer", "--checkpoint", bb, "--backbone", bb, "--corpus", "corpus", "--out", "k1"],
    );
    assert_eq!(code(&o), exit::KIND_MISMATCH);
    let o = run(
        dir,
        &["train", "dpo", "--backbone", bb, "--policy", "ar/decoder-ar.oomn", "--corpus", "corpus", "--out", "k2"],
    );
    assert_eq!(code(&o), exit::KIND_MISMATCH);
    // stage I fed the image-caption corpus
    let o = run(
        dir,
        &[
            "train", "align-1", "--backbone", "pre/backbone-pretrain.oomn", "--corpus", "corpus/image_text.jsonl",
            "--out", "k3",
        ],
    );
    assert_eq!(code(&o), exit::KIND_MISMATCH);
}

#[test]
fn align_2_leaves_the_backbone_unchanged() {
    let dir = fixture();
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("s2/final-II.json")).unwrap()).unwrap();
    assert_eq!(summary["checksums_before"]["llm"], summary["checksums_after"]["llm"]);
    assert_eq!(summary["checksums_before"]["speech_proj"], summary["checksums_after"]["speech_proj"]);
    assert_ne!(summary["checksums_before"]["image_proj"], summary["checksums_after"]["image_proj"]);
    let steps = csv_column(&dir.join("s2/metrics-II.csv"), "step");
    assert_eq!(steps.len(), summary["steps"].as_u64().unwrap() as usize);
}

#[test]
fn dpo_from_fresh_policy_logs_ln2_first() {
    let dir = fixture();
    let out = dir.join("dpo");
    let _ = fs::remove_dir_all(&out);
    ok(
        dir,
        &[
            "train", "dpo", "--config", "short.kv", "--backbone", "s3/backbone-III.oomn", "--policy",
            "nar/decoder-nar.oomn", "--corpus", "corpus", "--out", "dpo",
        ],
    );
    let losses = csv_column(&out.join("dpo-metrics.csv"), "loss");
    let first: f64 = losses[0].parse().unwrap();
    assert!((first - 0.6931).abs() < 1e-4 && (first - std::f64::consts::LN_2).abs() < 1e-6, "{first}");
    ok(
        dir,
        &[
            "eval", "--metric", "emotion-acc", "--checkpoint", "dpo/dpo-policy.oomn", "--baseline",
            "nar/decoder-nar.oomn", "--backbone", "s3/backbone-III.oomn", "--corpus", "corpus", "--out", "dpo",
            "--format", "csv",
        ],
    );
    let models = csv_column(&out.join("eval-emotion-acc.by_language.csv"), "model");
    assert_eq!(models, ["decoder-nar.oomn", "dpo-policy.oomn"]);
}

#[test]
fn partition_check_sums_to_one() {
    let dir = scratch("cli-partition");
    for (t, v) in [("2", "2"), ("4", "3")] {
        ok(&dir, &["eval", "--metric", "partition-check", "--frames", t, "--vocab", v, "--out", "p"]);
        for total in csv_column(&dir.join("p/eval-partition-check.partition.csv"), "total") {
            let x: f64 = total.parse().unwrap();
            assert!((x - 1.0).abs() < 1e-6, "T={t} V={v}: {x}");
        }
    }
}

#[test]
fn bench_latency_counts_steps() {
    let dir = fixture();
    ok(
        dir,
        &[
            "bench-latency", "--ar", "ar/decoder-ar.oomn", "--nar", "nar/decoder-nar.oomn", "--backbone",
            "s3/backbone-III.oomn", "--contexts", "corpus", "--limit", "8", "--out", "bench",
        ],
    );
    let nar = csv_column(&dir.join("bench/bench-latency.contexts.csv"), "nar_steps");
    assert_eq!(nar.len(), 8);
    assert!(nar.iter().all(|s| s == "1"));
    let ar_units = csv_column(&dir.join("bench/bench-latency.contexts.csv"), "ar_units");
    let ratio = csv_column(&dir.join("bench/bench-latency.contexts.csv"), "ratio");
    for (u, r) in ar_units.iter().zip(&ratio) {
        assert!(r.parse::<f64>().unwrap() >= u.parse::<f64>().unwrap());
    }
    let m = RunManifest::read(&dir.join("bench/manifest-bench-latency.json")).unwrap();
    assert_eq!(m.volatile, ["bench-latency.wallclock.csv"]);
    assert!(m.outputs.iter().all(|o| !o.path.contains("wallclock")));
}

#[test]
fn decode_writes_one_line_per_context() {
    let dir = fixture();
    ok(
        dir,
        &[
            "decode", "--checkpoint", "nar/decoder-nar.oomn", "--backbone", "s3/backbone-III.oomn", "--contexts",
            "corpus", "--out", "decoded",
        ],
    );
    let text = fs::read_to_string(dir.join("decoded/decoded.jsonl")).unwrap();
    assert_eq!(text.lines().count(), 48);
    let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    assert_eq!(first["steps"], 1);
}

#[test]
fn replay_reproduces_training_outputs() {
    let dir = fixture();
    let _ = fs::remove_dir_all(dir.join("replay-nar"));
    let stdout = ok(dir, &["replay", "nar/manifest-train-decoder-nar.json", "--out", "replay-nar"]);
    assert!(stdout.contains("identical") && !stdout.contains("differs"), "{stdout}");
    assert_eq!(
        sha256_file(&dir.join("nar/decoder-nar.oomn")).unwrap(),
        sha256_file(&dir.join("replay-nar/decoder-nar.oomn")).unwrap()
    );
    // replaying into the recorded directory is refused
    let o = run(dir, &["replay", "nar/manifest-train-decoder-nar.json", "--out", "nar"]);
    assert_eq!(code(&o), exit::INVALID_SPEC);
}

#[test]
fn ablate_reports_every_cell() {
    let dir = fixture();
    ok(
        dir,
        &[
            "ablate", "--config", "dec.kv", "--experts", "1,2", "--tgm", "on,off", "--backbone",
            "s3/backbone-III.oomn", "--corpus", "corpus", "--workers", "2", "--out", "grid",
        ],
    );
    let seeds = csv_column(&dir.join("grid/ablate.cells.csv"), "seed");
    assert_eq!(seeds.len(), 4);
    // on/off cells of one configuration share a seed; configurations differ
    assert_eq!(seeds[0], seeds[1]);
    assert_eq!(seeds[2], seeds[3]);
    assert_ne!(seeds[0], seeds[2]);
    let pairs = csv_column(&dir.join("grid/ablate.tgm_pairs.csv"), "loss_on");
    assert_eq!(pairs.len(), 2);
    assert!(dir.join("grid/ablate-cells/cell-000.loss.csv").exists());
}
