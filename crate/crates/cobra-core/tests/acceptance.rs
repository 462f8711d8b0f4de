//! Acceptance suite: one test per criterion, each printing a pass/fail line
//! (visible with `cargo test --test acceptance -- --nocapture`). Tolerances
//! and runtime bounds are pinned here, not configurable.

use std::sync::{Mutex, MutexGuard, PoisonError};
use std::time::{Duration, Instant};

use cobra_core::bench::ScalingConfig;
use cobra_core::verify::{self, CheckResult};

// The scaling criterion times wall-clock latency; run the criteria one at a
// time so sibling tests cannot distort the measurements.
static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(PoisonError::into_inner)
}

fn report(criterion: &str, r: &CheckResult, budget: Option<Duration>, elapsed: Duration) {
    let status = if r.passed { "PASS" } else { "FAIL" };
    println!("{status} {criterion}: {}", r.detail);
    assert!(r.passed, "{criterion} failed: {}", r.detail);
    if let Some(b) = budget {
        assert!(
            elapsed < b,
            "{criterion} exceeded its runtime budget: {elapsed:?} >= {b:?}"
        );
    }
}

#[test]
fn criterion_01_lti_equivalence() {
    let _guard = serial();
    let started = Instant::now();
    let r = verify::check_lti_equivalence(1000, &[1, 64, 257], 1e-10);
    report(
        "criterion 1 (LTI equivalence, 1000 systems, <1e-10)",
        &r,
        Some(Duration::from_secs(30)),
        started.elapsed(),
    );
}

#[test]
fn criterion_02_selective_scan_equivalence() {
    let _guard = serial();
    let started = Instant::now();
    let r = verify::check_selective_equivalence(100, 1e-5);
    report(
        "criterion 2 (selective scan parallel==sequential, <1e-5, L<=4096)",
        &r,
        Some(Duration::from_secs(60)),
        started.elapsed(),
    );
}

#[test]
fn criterion_03_zoh_correctness() {
    let _guard = serial();
    let started = Instant::now();
    let r = verify::check_zoh(1e-12);
    report(
        "criterion 3 (ZOH closed forms <1e-12, O(dt^2) halving decay)",
        &r,
        None,
        started.elapsed(),
    );
}

#[test]
fn criterion_04_streaming_equivalence() {
    let _guard = serial();
    let started = Instant::now();
    let r = verify::check_streaming_equivalence(1e-6);
    report(
        "criterion 4 (streaming logits == batch logits, <1e-6, D=16/K=2/L=64)",
        &r,
        None,
        started.elapsed(),
    );
}

#[test]
fn criterion_05_gradient_check() {
    let _guard = serial();
    let started = Instant::now();
    let r = verify::check_gradients(1e-4);
    report(
        "criterion 5 (analytic vs central differences, rel 1e-4, D=4/N=4/L=8)",
        &r,
        None,
        started.elapsed(),
    );
}

#[test]
fn criterion_06_token_accounting() {
    let _guard = serial();
    let started = Instant::now();
    let r = verify::check_token_accounting();
    report(
        "criterion 6 (729 default visual tokens, 196 with the pooling projector)",
        &r,
        None,
        started.elapsed(),
    );
}

#[test]
fn criterion_07_scaling_claim() {
    let _guard = serial();
    let started = Instant::now();
    let r = verify::check_scaling(&ScalingConfig::default());
    report(
        "criterion 7 (ssm ratio <1.2 and constant state; attention ratio >4 and linear cache)",
        &r,
        Some(Duration::from_secs(300)),
        started.elapsed(),
    );
}

#[test]
fn criterion_08_throughput_methodology() {
    let _guard = serial();
    let started = Instant::now();
    let r = verify::check_throughput_identity(256);
    report(
        "criterion 8 (eval_avg = n_out / t_total exactly; table-shaped report)",
        &r,
        None,
        started.elapsed(),
    );
}

#[test]
fn criterion_09_training_recipe() {
    let _guard = serial();
    let started = Instant::now();
    let r = verify::check_training_recipe(false);
    report(
        "criterion 9a (2-epoch fine-tune halves loss; pre-align freezes backbone; schedule shape)",
        &r,
        Some(Duration::from_secs(600)),
        started.elapsed(),
    );
    let r = verify::check_uniform_baseline_improvement();
    report(
        "criterion 9b (200 steps reach half the uniform baseline ln V)",
        &r,
        Some(Duration::from_secs(600)),
        started.elapsed(),
    );
}

#[test]
fn criterion_10_prompt_fidelity() {
    let _guard = serial();
    let started = Instant::now();
    let r = verify::check_prompt_fidelity();
    report(
        "criterion 10 (templates byte-exact vs goldens; both OCR orderings exact)",
        &r,
        None,
        started.elapsed(),
    );
}
