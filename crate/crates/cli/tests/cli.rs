//! End-to-end tests of the `hierdiff` binary: pipeline wiring, exit codes,
//! and byte-level determinism of every artifact.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_hierdiff"))
}

fn tiny_config(dir: &Path) -> PathBuf {
    let path = dir.join("tiny.json");
    fs::write(
        &path,
        r#"{
  "state_space": {"levels": 2, "frames": 2, "vocab": 4, "split": 1, "emotion_downsample": 2},
  "network": {"channels": 16, "heads": 2, "low_blocks": 1, "high_blocks": 1,
              "lip_dim": 3, "id_dim": 4, "emo_classes": 2, "adapter_in": 3},
  "train": {"iters": 25, "batch_size": 8, "seed": 5},
  "synth": {"speakers": 3, "emotions": 2, "phonemes": 3, "noise_eps": 0.1, "id_dim": 4, "seed": 11}
}"#,
    )
    .unwrap();
    path
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn assert_success(out: &Output, what: &str) {
    assert!(
        out.status.success(),
        "{what} failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// gen-data → train → sample → eval runs cleanly and produces all artifacts.
#[test]
fn pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let corpus = dir.path().join("c.bin");
    let ckpt = dir.path().join("m.ckpt");
    let sampled = dir.path().join("s.bin");
    let metrics = dir.path().join("eval.csv");

    let out = run(&["gen-data", "--config", s(&cfg), "--out", s(&corpus), "-n", "64"]);
    assert_success(&out, "gen-data");
    let sidecar = dir.path().join("c.bin.jsonl");
    assert!(sidecar.is_file(), "default sidecar path");
    assert_eq!(fs::read_to_string(&sidecar).unwrap().lines().count(), 64);

    let out = run(&["train", "--config", s(&cfg), "--corpus", s(&corpus), "--out", s(&ckpt)]);
    assert_success(&out, "train");
    let csv = fs::read_to_string(dir.path().join("m.ckpt.metrics.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "iter,dse_loss,id_loss,total_loss,mask_fraction_mean,wall_ms"
    );
    assert_eq!(lines.count(), 25, "one row per iteration");

    // The gen-data sidecar doubles as a conditions file.
    let out = run(&[
        "sample", "--ckpt", s(&ckpt), "--conditions", s(&sidecar), "--out", s(&sampled),
        "--config", s(&cfg), "--steps", "6",
    ]);
    assert_success(&out, "sample");
    assert!(sampled.metadata().unwrap().len() > 0);

    let out = run(&[
        "eval", "--config", s(&cfg), "--ckpt", s(&ckpt), "--corpus", s(&corpus),
        "--out", s(&metrics), "--batch", "16", "--samples", "4", "--steps", "6",
    ]);
    assert_success(&out, "eval");
    let table = fs::read_to_string(&metrics).unwrap();
    assert!(table.starts_with("metric,value\n"));
    for key in ["heldout_dse", "dse_ratio", "argmax_accuracy_level0", "sample_tv", "lip_agreement"] {
        assert!(table.contains(key), "missing metric {key} in: {table}");
    }
}

/// Identical invocations produce byte-identical corpora, checkpoints, and
/// samples; the metrics CSV matches on everything but the timing column.
#[test]
fn artifacts_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let mut artifacts: Vec<(Vec<u8>, Vec<u8>, Vec<u8>, Vec<u8>, String)> = Vec::new();
    for run_id in 0..2 {
        let sub = dir.path().join(format!("run{run_id}"));
        fs::create_dir(&sub).unwrap();
        let corpus = sub.join("c.bin");
        let ckpt = sub.join("m.ckpt");
        let sampled = sub.join("s.bin");
        assert_success(
            &run(&["gen-data", "--config", s(&cfg), "--out", s(&corpus), "-n", "32"]),
            "gen-data",
        );
        assert_success(
            &run(&[
                "--threads", "1", "train", "--config", s(&cfg), "--corpus", s(&corpus),
                "--out", s(&ckpt), "--iters", "12",
            ]),
            "train",
        );
        assert_success(
            &run(&[
                "sample", "--ckpt", s(&ckpt), "--conditions", s(&sub.join("c.bin.jsonl")),
                "--out", s(&sampled), "--config", s(&cfg), "--steps", "5", "--seed", "9",
            ]),
            "sample",
        );
        artifacts.push((
            fs::read(&corpus).unwrap(),
            fs::read(sub.join("c.bin.jsonl")).unwrap(),
            fs::read(&ckpt).unwrap(),
            fs::read(&sampled).unwrap(),
            fs::read_to_string(sub.join("m.ckpt.metrics.csv")).unwrap(),
        ));
    }
    let (a, b) = (&artifacts[0], &artifacts[1]);
    assert_eq!(a.0, b.0, "corpus bytes differ");
    assert_eq!(a.1, b.1, "sidecar bytes differ");
    assert_eq!(a.2, b.2, "checkpoint bytes differ");
    assert_eq!(a.3, b.3, "sampled corpus bytes differ");
    let strip_wall = |text: &str| -> Vec<String> {
        text.lines().map(|l| l.rsplit_once(',').unwrap().0.to_string()).collect()
    };
    assert_eq!(strip_wall(&a.4), strip_wall(&b.4), "metrics differ beyond wall_ms");
}

/// Condition records may leave any subset of fields null or absent.
#[test]
fn sampling_accepts_partial_and_empty_conditions() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let corpus = dir.path().join("c.bin");
    let ckpt = dir.path().join("m.ckpt");
    assert_success(
        &run(&["gen-data", "--config", s(&cfg), "--out", s(&corpus), "-n", "16"]),
        "gen-data",
    );
    assert_success(
        &run(&[
            "train", "--config", s(&cfg), "--corpus", s(&corpus), "--out", s(&ckpt),
            "--iters", "5",
        ]),
        "train",
    );
    let conditions = dir.path().join("mixed.jsonl");
    fs::write(
        &conditions,
        concat!(
            "{}\n",
            "{\"emotions\": [1]}\n",
            "{\"lip\": null, \"identity\": [0.5, 0.5, 0.5, 0.5], \"emotions\": null}\n",
        ),
    )
    .unwrap();
    let sampled = dir.path().join("s.bin");
    let out = run(&[
        "sample", "--ckpt", s(&ckpt), "--conditions", s(&conditions), "--out", s(&sampled),
        "--config", s(&cfg), "--steps", "4",
    ]);
    assert_success(&out, "sample with partial conditions");
}

/// Usage faults exit 2: zero-count generation, unknown config keys,
/// missing corpus files, and corpus/config shape mismatches.
#[test]
fn usage_faults_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let corpus = dir.path().join("c.bin");

    let out = run(&["gen-data", "--config", s(&cfg), "--out", s(&corpus), "-n", "0"]);
    assert_eq!(out.status.code(), Some(2), "count of zero is a usage fault");

    let bad_cfg = dir.path().join("bad.json");
    fs::write(&bad_cfg, r#"{"train": {"iterss": 3}}"#).unwrap();
    let out = run(&["gen-data", "--config", s(&bad_cfg), "--out", s(&corpus), "-n", "4"]);
    assert_eq!(out.status.code(), Some(2), "unknown config key is a usage fault");
    assert!(String::from_utf8_lossy(&out.stderr).contains("iterss"));

    let out = run(&[
        "train", "--config", s(&cfg), "--corpus", s(&dir.path().join("absent.bin")),
        "--out", s(&dir.path().join("m.ckpt")),
    ]);
    assert_eq!(out.status.code(), Some(2), "missing corpus is a usage fault");

    // Generate under one geometry, then train under another.
    assert_success(
        &run(&["gen-data", "--config", s(&cfg), "--out", s(&corpus), "-n", "8"]),
        "gen-data",
    );
    let other = dir.path().join("other.json");
    fs::write(
        &other,
        r#"{
  "state_space": {"levels": 3, "frames": 2, "vocab": 4, "split": 1, "emotion_downsample": 2},
  "network": {"channels": 16, "heads": 2, "low_blocks": 1, "high_blocks": 1,
              "lip_dim": 3, "id_dim": 4, "emo_classes": 2, "adapter_in": 3},
  "synth": {"speakers": 3, "emotions": 2, "phonemes": 3, "noise_eps": 0.1, "id_dim": 4, "seed": 11}
}"#,
    )
    .unwrap();
    let out = run(&[
        "train", "--config", s(&other), "--corpus", s(&corpus),
        "--out", s(&dir.path().join("m.ckpt")),
    ]);
    assert_eq!(out.status.code(), Some(2), "corpus/config mismatch is a usage fault");
    assert!(String::from_utf8_lossy(&out.stderr).contains("state space"));
}

/// The full self-check battery passes on a clean build (exit 0) and catches
/// an injected schedule fault (exit 1) without disturbing unrelated checks.
#[test]
fn verify_battery_and_fault_injection() {
    let out = run(&["verify"]);
    let text = String::from_utf8_lossy(&out.stdout).to_string();
    assert!(out.status.success(), "clean battery should pass:\n{text}");
    assert!(text.lines().count() >= 10, "battery prints one line per check:\n{text}");
    assert!(text.lines().all(|l| l.starts_with("PASS ")), "all lines pass:\n{text}");

    let out = run(&["verify", "--inject-fault", "non-monotone-schedule", "--only", "schedule"]);
    assert_eq!(out.status.code(), Some(1), "injected fault must fail the battery");
    let text = String::from_utf8_lossy(&out.stdout).to_string();
    assert!(text.contains("FAIL schedule-marginals"), "fault surfaces in output:\n{text}");

    let out = run(&["verify", "--only", "no-such-check"]);
    assert_eq!(out.status.code(), Some(2), "unmatched --only is a usage fault");
}

/// --threads and HCDT_THREADS are validated; any accepted value leaves
/// results unchanged (the implementation is sequential either way).
#[test]
fn thread_flag_is_validated_and_neutral() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = run(&["--threads", "0", "verify", "--only", "prefactor"]);
    assert_eq!(out.status.code(), Some(2), "zero threads is invalid");
    let out = bin()
        .env("HCDT_THREADS", "junk")
        .args(["verify", "--only", "prefactor"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2), "non-numeric HCDT_THREADS is invalid");

    let corpus_a = dir.path().join("a.bin");
    let corpus_b = dir.path().join("b.bin");
    assert_success(
        &run(&["--threads", "1", "gen-data", "--config", s(&cfg), "--out", s(&corpus_a), "-n", "16"]),
        "gen-data threads=1",
    );
    let out = bin()
        .env("HCDT_THREADS", "4")
        .args(["gen-data", "--config", s(&cfg), "--out", s(&corpus_b), "-n", "16"])
        .output()
        .unwrap();
    assert_success(&out, "gen-data HCDT_THREADS=4");
    assert_eq!(fs::read(&corpus_a).unwrap(), fs::read(&corpus_b).unwrap());
}

/// Training ablation flags are mutually exclusive, and each writes a loadable
/// checkpoint whose scores differ from the two-tier model's.
#[test]
fn ablation_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let corpus = dir.path().join("c.bin");
    assert_success(
        &run(&["gen-data", "--config", s(&cfg), "--out", s(&corpus), "-n", "16"]),
        "gen-data",
    );
    let out = run(&[
        "train", "--config", s(&cfg), "--corpus", s(&corpus),
        "--out", s(&dir.path().join("x.ckpt")), "--iters", "3",
        "--flat-ablation", "--single-scale-adaln",
    ]);
    assert!(!out.status.success(), "conflicting ablation flags are rejected");

    for (flag, name) in [("--flat-ablation", "flat"), ("--single-scale-adaln", "ssa")] {
        let ckpt = dir.path().join(format!("{name}.ckpt"));
        let out = run(&[
            "train", "--config", s(&cfg), "--corpus", s(&corpus), "--out", s(&ckpt),
            "--iters", "3", flag,
        ]);
        assert_success(&out, flag);
        assert!(String::from_utf8_lossy(&out.stdout).len() > 0);
        // Sampling from the ablation checkpoint works.
        let sampled = dir.path().join(format!("{name}.bin"));
        let out = run(&[
            "sample", "--ckpt", s(&ckpt), "--conditions", s(&dir.path().join("c.bin.jsonl")),
            "--out", s(&sampled), "--config", s(&cfg), "--steps", "3",
        ]);
        assert_success(&out, "sample from ablation checkpoint");
    }
}
