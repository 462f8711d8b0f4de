//! End-to-end tests of the `cobra` binary: exit codes, determinism, trace
//! contents, and checkpoint flow.

use std::path::Path;
use std::process::{Command, Output};
use std::sync::{Mutex, MutexGuard, PoisonError};

// Every test spawns the binary, and verify/bench assert on wall-clock
// measurements; run them one at a time so subprocesses never compete.
static TIMING: Mutex<()> = Mutex::new(());

fn timing_lock() -> MutexGuard<'static, ()> {
    TIMING.lock().unwrap_or_else(PoisonError::into_inner)
}

fn cobra() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_cobra"));
    // Keep the environment from leaking a default checkpoint path in.
    c.env_remove("COBRA_SSM_HOME");
    c
}

fn write_test_ppm(path: &Path, rgb: [f64; 3]) {
    let img = cobra_core::vision::ImageInput::filled(28, rgb);
    std::fs::write(path, img.to_ppm_bytes()).unwrap();
}

fn stdout_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[test]
fn generate_is_byte_identical_across_runs() {
    let _guard = timing_lock();
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("cell.ppm");
    write_test_ppm(&img, [0.8, 0.1, 0.1]);
    let run = || {
        cobra()
            .args([
                "generate",
                "--image",
                img.to_str().unwrap(),
                "--question",
                "What color is the top left cell?",
                "--max-new",
                "8",
                "--seed",
                "3",
            ])
            .output()
            .unwrap()
    };
    let a = run();
    let b = run();
    assert!(a.status.success(), "stderr: {}", String::from_utf8_lossy(&a.stderr));
    assert_eq!(a.stdout, b.stdout);
}

#[test]
fn ocr_orderings_show_up_in_the_trace_exactly() {
    let _guard = timing_lock();
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("sign.ppm");
    write_test_ppm(&img, [0.2, 0.2, 0.8]);
    let run = |order: &str, trace: &Path| {
        let out = cobra()
            .args([
                "generate",
                "--image",
                img.to_str().unwrap(),
                "--question",
                "What does the sign say?",
                "--ocr",
                "STOP",
                "--ocr-order",
                order,
                "--max-new",
                "2",
                "--trace",
                trace.to_str().unwrap(),
            ])
            .output()
            .unwrap();
        assert!(out.status.success());
        std::fs::read_to_string(trace).unwrap()
    };
    let first = run("first", &dir.path().join("first.csv"));
    let last = run("last", &dir.path().join("last.csv"));
    assert!(
        first.contains("Reference OCR token: STOP\\nWhat does the sign say?"),
        "trace: {first}"
    );
    assert!(
        last.contains("What does the sign say?\\nReference OCR token: STOP"),
        "trace: {last}"
    );
    for t in [&first, &last] {
        assert!(t.contains("step,token,micros"), "trace header missing: {t}");
    }
}

#[test]
fn text_only_invocation_runs_the_lm_alone() {
    let _guard = timing_lock();
    let out = cobra()
        .args([
            "generate",
            "--question",
            "hello there",
            "--template",
            "base",
            "--max-new",
            "4",
        ])
        .output()
        .unwrap();
    assert!(out.status.success());
}

#[test]
fn missing_image_exits_2() {
    let _guard = timing_lock();
    let out = cobra()
        .args([
            "generate",
            "--image",
            "/definitely/not/here.ppm",
            "--question",
            "q",
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_model_exits_2() {
    let _guard = timing_lock();
    let out = cobra()
        .args([
            "generate",
            "--model",
            "/definitely/not/here.cssm",
            "--question",
            "q",
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn malformed_checkpoint_exits_3() {
    let _guard = timing_lock();
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.cssm");
    std::fs::write(&bad, b"this is not a checkpoint").unwrap();
    let out = cobra()
        .args([
            "generate",
            "--model",
            bad.to_str().unwrap(),
            "--question",
            "q",
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn unknown_template_exits_4() {
    let _guard = timing_lock();
    let out = cobra()
        .args(["generate", "--question", "q", "--template", "fancy"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn train_then_generate_with_the_checkpoint() {
    let _guard = timing_lock();
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("trained.cssm");
    let curve = dir.path().join("curve.csv");
    let out = cobra()
        .args([
            "train",
            "--samples",
            "64",
            "--out",
            ckpt.to_str().unwrap(),
            "--curve",
            curve.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "train failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(ckpt.exists());
    let curve_text = std::fs::read_to_string(&curve).unwrap();
    assert!(curve_text.starts_with("step,lr,loss\n"));
    assert!(curve_text.lines().count() > 8);

    // A trained checkpoint should answer the task it was trained on.
    let img = dir.path().join("probe.ppm");
    write_test_ppm(&img, [0.85, 0.10, 0.10]);
    let out = cobra()
        .args([
            "generate",
            "--model",
            ckpt.to_str().unwrap(),
            "--image",
            img.to_str().unwrap(),
            "--question",
            "What color is the top left cell?",
            "--max-new",
            "8",
        ])
        .output()
        .unwrap();
    assert!(out.status.success());
    let answer = stdout_of(&out);
    assert!(
        answer.contains("red"),
        "trained model should answer 'red', got {answer:?}"
    );
}

#[test]
fn env_var_points_at_the_default_checkpoint() {
    let _guard = timing_lock();
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("model.cssm");
    let out = cobra()
        .args(["train", "--samples", "8", "--out", ckpt.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(out.status.success());
    // With COBRA_SSM_HOME set, generate finds model.cssm without --model.
    let out = Command::new(env!("CARGO_BIN_EXE_cobra"))
        .env("COBRA_SSM_HOME", dir.path())
        .args(["generate", "--question", "hi", "--max-new", "2"])
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    // And an env-named but absent checkpoint is a missing-file error.
    let empty = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_cobra"))
        .env("COBRA_SSM_HOME", empty.path())
        .args(["generate", "--question", "hi"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn config_file_is_overridden_by_flags() {
    let _guard = timing_lock();
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cobra.conf");
    std::fs::write(&cfg, "template = base\nmax_new = 2\n").unwrap();
    // Config alone selects the base template; the trace shows the prompt.
    let trace = dir.path().join("t1.csv");
    let out = cobra()
        .args([
            "generate",
            "--question",
            "ping",
            "--config",
            cfg.to_str().unwrap(),
            "--trace",
            trace.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(out.status.success());
    let t = std::fs::read_to_string(&trace).unwrap();
    assert!(t.contains("In:ping"), "config template not applied: {t}");
    // A flag beats the config file.
    let trace2 = dir.path().join("t2.csv");
    let out = cobra()
        .args([
            "generate",
            "--question",
            "ping",
            "--config",
            cfg.to_str().unwrap(),
            "--template",
            "chat",
            "--trace",
            trace2.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(out.status.success());
    let t = std::fs::read_to_string(&trace2).unwrap();
    assert!(t.contains("<|user|>"), "flag did not override config: {t}");
}

#[test]
fn verify_quick_passes_and_reports_per_suite() {
    let _guard = timing_lock();
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("verify.csv");
    let out = cobra()
        .args(["verify", "--quick", "--report", report.to_str().unwrap()])
        .output()
        .unwrap();
    let text = stdout_of(&out);
    assert!(
        out.status.success(),
        "verify failed:\n{text}\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(text.contains("PASS lti-equivalence"));
    assert!(text.contains("suites passed"));
    let csv = std::fs::read_to_string(&report).unwrap();
    assert!(csv.starts_with("suite,passed,millis,detail"));
    assert!(csv.contains("lti-equivalence,true"));
}

#[test]
fn bench_quick_emits_the_table_and_csv() {
    let _guard = timing_lock();
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("bench.csv");
    let out = cobra()
        .args([
            "bench",
            "--quick",
            "--n-out",
            "16",
            "--contexts",
            "64,128",
            "--steps",
            "32",
            "--report",
            report.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "bench failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let text = stdout_of(&out);
    assert!(text.contains("Eval_avg"));
    assert!(text.contains("cobra-desk-mlp"));
    assert!(text.contains("cobra-desk-ldp"));
    assert!(text.contains("slopes"));
    let csv = std::fs::read_to_string(&report).unwrap();
    assert!(csv.contains("model,visual_tokens"));
    assert!(csv.contains("context,ssm_us_per_token"));
}
