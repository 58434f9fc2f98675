use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use motiondiff::data::io::read_sequence;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_motiondiff"));
    c.env_remove("MOTIONDIFF_RUN_DIR");
    c
}

fn run(dir: &Path, args: &[&str]) -> Output {
    let out = bin().current_dir(dir).args(args).output().unwrap();
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

/// Corpus plus one tiny model of each variant.
fn fixture() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_path_buf();
    run(
        &d,
        &[
            "gen-corpus",
            "--out",
            "corp",
            "--sequences-per-subject",
            "1",
            "--frames",
            "90",
        ],
    );
    let tiny = [
        "--iters", "4", "--batch", "2", "--widths", "16,16,32", "--steps", "6",
    ];
    let mut face = vec![
        "train",
        "--variant",
        "facial",
        "--corpus",
        "corp",
        "--out",
        "m/face.ckpt",
    ];
    face.extend(tiny);
    run(&d, &face);
    let mut head = vec![
        "train",
        "--variant",
        "head",
        "--corpus",
        "corp",
        "--window",
        "60",
        "--out",
        "m/head.ckpt",
    ];
    head.extend(tiny);
    run(&d, &head);
    (dir, d)
}

#[test]
fn usage_errors_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .current_dir(dir.path())
        .args([
            "train",
            "--variant",
            "facial",
            "--corpus",
            "missing",
            "--iters",
            "1",
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--corpus"));

    let out = bin()
        .args(["train", "--variant", "facial"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--corpus"));

    let out = bin().args(["frobnicate"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_with_code_one() {
    let (_g, d) = fixture();
    // A head sequence handed to a facial model.
    let out = bin()
        .current_dir(&d)
        .args([
            "edit",
            "--model",
            "m/face.ckpt",
            "--base",
            "corp/s0_000.head.mseq",
        ])
        .args(["--inbetween", "0.2,0.2", "--out", "x.mseq"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn train_writes_checkpoint_and_history() {
    let (_g, d) = fixture();
    assert!(d.join("m/face.ckpt").exists());
    let hist = std::fs::read_to_string(d.join("m/face.loss.txt")).unwrap();
    assert_eq!(hist.lines().filter(|l| !l.starts_with('#')).count(), 4);
}

#[test]
fn train_defaults_into_run_dir() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .current_dir(dir.path())
        .env("MOTIONDIFF_RUN_DIR", dir.path().join("run"))
        .args([
            "train",
            "--variant",
            "facial",
            "--corpus",
            "toy",
            "--seed",
            "7",
        ])
        .args([
            "--iters", "2", "--batch", "2", "--widths", "16,16,32", "--steps", "4",
        ])
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(dir.path().join("run/models/facial.ckpt").exists());
}

#[test]
fn inbetween_edit_preserves_known_frames() {
    let (_g, d) = fixture();
    run(
        &d,
        &[
            "edit",
            "--model",
            "m/head.ckpt",
            "--base",
            "corp/s0_000.head.mseq",
            "--inbetween",
            "0.2,0.2",
            "--out",
            "e/h.mseq",
        ],
    );
    let base = read_sequence(d.join("corp/s0_000.head.mseq")).unwrap();
    let edited = read_sequence(d.join("e/h.mseq")).unwrap();
    assert_eq!(edited.frames(), 90);
    for i in (0..18).chain(72..90) {
        assert_eq!(edited.frame(i), base.frame(i), "frame {i}");
    }
    assert_ne!(edited.frame(45), base.frame(45));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("e/h.report.json")).unwrap()).unwrap();
    assert_eq!(report["known_frames"], 36);
    assert!(report["boundary"]["max_boundary_step"].is_number());

    run(
        &d,
        &[
            "edit",
            "--model",
            "m/face.ckpt",
            "--base",
            "corp/s0_000.face.mseq",
            "--features",
            "corp/s0_000.feat",
            "--inbetween",
            "0.2,0.2",
            "--out",
            "e/f.mseq",
        ],
    );
    let base = read_sequence(d.join("corp/s0_000.face.mseq")).unwrap();
    let edited = read_sequence(d.join("e/f.mseq")).unwrap();
    for i in (0..18).chain(72..90) {
        assert_eq!(edited.frame(i), base.frame(i), "frame {i}");
    }
}

#[test]
fn keyframes_at_two_per_second() {
    let (_g, d) = fixture();
    // 90 frames at 30 fps: three seconds, six keyframes.
    let file: String = (0..6).map(|k| format!("{}\n", k * 15 + 3)).collect();
    std::fs::write(d.join("keys.txt"), format!("# frame per line\n{file}")).unwrap();
    run(
        &d,
        &[
            "edit",
            "--model",
            "m/head.ckpt",
            "--base",
            "corp/s0_000.head.mseq",
            "--keyframes",
            "keys.txt",
            "--out",
            "k.mseq",
        ],
    );
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("k.report.json")).unwrap()).unwrap();
    assert_eq!(
        report["keyframes"],
        serde_json::json!([3, 18, 33, 48, 63, 78])
    );
    assert_eq!(report["scale"], 0.5);

    run(
        &d,
        &[
            "edit",
            "--model",
            "m/head.ckpt",
            "--base",
            "corp/s0_000.head.mseq",
            "--keyframe-rate",
            "2",
            "--out",
            "r.mseq",
        ],
    );
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("r.report.json")).unwrap()).unwrap();
    assert_eq!(report["keyframes"].as_array().unwrap().len(), 6);
}

#[test]
fn identical_runs_write_identical_files() {
    let (_g, d) = fixture();
    for out in ["a", "b"] {
        run(
            &d,
            &[
                "sample",
                "--model",
                "m/face.ckpt",
                "--features",
                "corp/s1_000.feat",
                "--count",
                "2",
                "--seed",
                "3",
                "--out",
                out,
            ],
        );
        run(
            &d,
            &[
                "edit",
                "--model",
                "m/head.ckpt",
                "--base",
                "corp/s0_000.head.mseq",
                "--keyframe-rate",
                "1",
                "--seed",
                "4",
                "--out",
                &format!("{out}/e.mseq"),
            ],
        );
    }
    for f in [
        "sample-000.mseq",
        "sample-001.mseq",
        "e.mseq",
        "e.report.json",
    ] {
        let a = std::fs::read(d.join("a").join(f)).unwrap();
        let b = std::fs::read(d.join("b").join(f)).unwrap();
        if f.ends_with(".json") {
            let strip = |v: &[u8]| {
                let mut j: serde_json::Value = serde_json::from_slice(v).unwrap();
                j["output"] = serde_json::Value::Null;
                j
            };
            assert_eq!(strip(&a), strip(&b));
        } else {
            assert_eq!(a, b, "{f}");
        }
    }
    assert_ne!(
        std::fs::read(d.join("a/sample-000.mseq")).unwrap(),
        std::fs::read(d.join("a/sample-001.mseq")).unwrap()
    );

    let a = std::fs::read(d.join("m/face.ckpt")).unwrap();
    let mut again = vec![
        "train",
        "--variant",
        "facial",
        "--corpus",
        "corp",
        "--out",
        "m/again.ckpt",
    ];
    again.extend([
        "--iters", "4", "--batch", "2", "--widths", "16,16,32", "--steps", "6",
    ]);
    run(&d, &again);
    assert_eq!(a, std::fs::read(d.join("m/again.ckpt")).unwrap());
}

#[test]
fn eval_prints_and_writes_report() {
    let (_g, d) = fixture();
    let out = run(
        &d,
        &[
            "eval",
            "--pred",
            "corp/s0_000.head.mseq",
            "--gt",
            "corp/s0_000.head.mseq",
            "--json",
            "r.json",
        ],
    );
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("lip_sync 0"), "{text}");
    assert!(text.contains("beat_align 1"), "{text}");
    let j: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("r.json")).unwrap()).unwrap();
    assert_eq!(j["lip_sync"], 0.0);
}

#[test]
fn finetune_on_one_subject() {
    let (_g, d) = fixture();
    run(
        &d,
        &[
            "finetune",
            "--model",
            "m/face.ckpt",
            "--corpus",
            "corp",
            "--subject",
            "s2",
            "--seconds",
            "2",
            "--iters",
            "3",
            "--batch",
            "2",
            "--out",
            "m/s2.ckpt",
        ],
    );
    assert!(d.join("m/s2.ckpt").exists());
    let out = bin()
        .current_dir(&d)
        .args([
            "finetune",
            "--model",
            "m/face.ckpt",
            "--corpus",
            "corp",
            "--subject",
            "nobody",
            "--iters",
            "1",
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--subject"));
}
