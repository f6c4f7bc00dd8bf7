use smokedet::autodiff::Fault;
use smokedet::gradsuite::{run_suite, SuiteOptions};

#[test]
fn suite_passes_and_detects_faults() {
    let results = run_suite(&SuiteOptions::default()).unwrap();
    for r in &results {
        assert!(r.report.passed, "{}: {:?}", r.target, r.report);
        assert!(r.report.checked > 0, "{}", r.target);
    }
    for t in [
        "conv2d",
        "ccpe",
        "attention_block",
        "head",
        "total_loss",
        "iou_loss",
        "bce_with_logits",
    ] {
        assert!(results.iter().any(|r| r.target == t), "missing {t}");
    }

    let faulty = run_suite(&SuiteOptions {
        fault: Fault::ConvBackward,
        ..Default::default()
    })
    .unwrap();
    let failed: Vec<&str> = faulty.iter().filter(|r| !r.report.passed).map(|r| r.target).collect();
    assert!(failed.contains(&"conv2d") && failed.contains(&"total_loss"), "{failed:?}");
    assert!(!failed.contains(&"softmax"));
}

#[test]
fn tolerance_below_discretization_error_fails() {
    let results = run_suite(&SuiteOptions {
        tolerance: 1e-12,
        ..Default::default()
    })
    .unwrap();
    assert!(results.iter().any(|r| !r.report.passed));
}
