//! Fusion semantics against a scripted per-view optimizer.

mod common;

use advof_core::fusion::{consistency_check, fuse, fusion_check, importance_weights, FusionConfig, Outcome, ViewEvidence};
use advof_core::image::Image;
use advof_core::Error;
use common::fusion_stub::{evidence, start, Script, Stub, EPS};

#[test]
fn importance_weights_follow_score_plus_pixel_share() {
    let views = vec![
        ViewEvidence { view_id: 1, score: 0.2, pixels: 10 },
        ViewEvidence { view_id: 2, score: 0.9, pixels: 40 },
        ViewEvidence { view_id: 3, score: 0.5, pixels: 0 },
        ViewEvidence { view_id: 4, score: 0.7, pixels: 20 },
    ];
    let w = importance_weights(&views).unwrap();
    let raw = [(2, 0.9 + 1.0), (4, 0.7 + 0.5), (1, 0.2 + 0.25)];
    let total: f64 = raw.iter().map(|r| r.1).sum();
    assert_eq!(w.len(), 3);
    for (got, (id, r)) in w.iter().zip(raw) {
        assert_eq!(got.view_id, id);
        assert!((got.weight - r / total).abs() < 1e-15);
    }
    let empty = [ViewEvidence { view_id: 1, score: 1.0, pixels: 0 }];
    assert!(matches!(importance_weights(&empty), Err(Error::FusionPrecondition(_))));
}

#[test]
fn check_thresholds_are_strict() {
    let a = Image::filled(1, 1, [0.0; 3]);
    let b = Image::filled(1, 1, [0.1; 3]);
    assert!(!consistency_check(&a, &b, 0.01).unwrap());
    assert!(consistency_check(&a, &b, 0.0101).unwrap());
    assert!(fusion_check(1.0, 1.04, 0.05));
    assert!(!fusion_check(1.0, 1.05, 0.05));
}

#[test]
fn consistency_failure_halves_weight_renormalizes_and_retries() {
    let mut stub = Stub::new(vec![vec![Script::Clean], vec![Script::Inconsistent, Script::Clean]]);
    let r = fuse(&mut stub, &evidence(), start(), &FusionConfig::default()).unwrap();
    let rec = &r.report.records[1];
    assert_eq!(rec.view_id, 20);
    assert_eq!(rec.outcome, Outcome::Accepted);
    assert_eq!((rec.retries, rec.consistency_failures, rec.fusion_failures), (1, 1, 0));
    // Raw weights 1.9 and 1.0; the second is halved to 0.5 and both renormalized.
    assert!((rec.weights[0] - 1.0 / 2.9).abs() < 1e-12);
    assert!((rec.weights[1] - 0.5 / 2.4).abs() < 1e-12);
    let sum: f64 = r.report.final_weights.iter().map(|w| w.1).sum();
    assert!((sum - 1.0).abs() < 1e-12);
    assert!((r.report.final_weights[0].1 - 1.9 / 2.4).abs() < 1e-12);
    assert_eq!(rec.bounds, vec![EPS, EPS]);
    assert_eq!(r.delta.rgb(), &[[EPS; 3], [EPS; 3]]);
}

#[test]
fn fusion_failure_shrinks_bound_and_retries() {
    let mut stub = Stub::new(vec![vec![Script::Clean], vec![Script::LossShift, Script::Clean]]);
    let r = fuse(&mut stub, &evidence(), start(), &FusionConfig::default()).unwrap();
    let rec = &r.report.records[1];
    assert_eq!(rec.outcome, Outcome::Accepted);
    assert_eq!((rec.retries, rec.consistency_failures, rec.fusion_failures), (1, 0, 1));
    assert_eq!(rec.bounds, vec![EPS, EPS * 0.8]);
    assert_eq!(rec.weights[0], rec.weights[1]);
    assert_eq!(r.delta.rgb()[1], [EPS * 0.8; 3]);
}

#[test]
fn exceeding_max_retries_rejects_and_restores_snapshot() {
    let mut stub = Stub::new(vec![vec![Script::Clean], vec![Script::Inconsistent]]);
    let config = FusionConfig::default();
    let r = fuse(&mut stub, &evidence(), start(), &config).unwrap();
    let rec = &r.report.records[1];
    assert_eq!(rec.outcome, Outcome::Rejected);
    assert_eq!(rec.retries, config.max_retries);
    assert_eq!(rec.consistency_failures, config.max_retries + 1);
    assert_eq!(stub.calls[1], config.max_retries + 1);
    assert_eq!(r.state.rejected, vec![20]);
    // Snapshot taken before view 20: only view 10's update.
    let snapshot = [[EPS; 3], [0.0; 3]];
    assert_eq!(r.delta.rgb(), &snapshot);
    assert_eq!(r.state.delta.rgb(), &snapshot);
    for pair in rec.weights.windows(2) {
        assert!(pair[1] < pair[0]);
    }
}

#[test]
fn mixed_failures_share_the_retry_budget() {
    let mut stub = Stub::new(vec![
        vec![Script::Clean],
        vec![Script::Inconsistent, Script::LossShift, Script::Inconsistent, Script::Clean],
    ]);
    let r = fuse(&mut stub, &evidence(), start(), &FusionConfig::default()).unwrap();
    let rec = &r.report.records[1];
    assert_eq!(rec.outcome, Outcome::Accepted);
    assert_eq!((rec.retries, rec.consistency_failures, rec.fusion_failures), (3, 2, 1));
    assert_eq!(rec.bounds, vec![EPS, EPS, EPS * 0.8, EPS * 0.8]);
}

#[test]
fn without_fusion_uses_uniform_weights_and_skips_checks() {
    let mut stub = Stub::new(vec![vec![Script::Clean], vec![Script::Inconsistent]]);
    let r = fuse(&mut stub, &evidence(), start(), &FusionConfig::default().without_fusion()).unwrap();
    assert!(r.report.records.iter().all(|rec| rec.outcome == Outcome::Accepted && rec.retries == 0));
    assert_eq!(r.report.final_weights, vec![(10, 0.5), (20, 0.5)]);
    assert!(!r.report.checks);
}

#[test]
fn invisible_view_is_skipped_and_nothing_accepted_is_an_error() {
    let mut stub = Stub::new(vec![vec![Script::Clean], vec![Script::Clean]]);
    stub.visible[1] = false;
    let r = fuse(&mut stub, &evidence(), start(), &FusionConfig::default()).unwrap();
    assert_eq!(r.report.records[1].outcome, Outcome::Skipped);

    let mut none = Stub::new(vec![vec![Script::Clean], vec![Script::Clean]]);
    none.visible = vec![false, false];
    assert!(matches!(
        fuse(&mut none, &evidence(), start(), &FusionConfig::default()),
        Err(Error::FusionFailed(_))
    ));
}

#[test]
fn report_text_lists_every_view() {
    let mut stub = Stub::new(vec![vec![Script::Clean], vec![Script::Inconsistent]]);
    let r = fuse(&mut stub, &evidence(), start(), &FusionConfig::default()).unwrap();
    let text = r.report.to_string();
    assert!(text.starts_with("fusion-report v1\n"));
    assert!(text.contains("view 10\n  outcome accepted"));
    assert!(text.contains("view 20\n  outcome rejected"));
}
