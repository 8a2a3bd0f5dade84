use deepfuse::netspec::{builtin_spec, FusePoint, FusedNetSpec};
use deepfuse::tensor::{FusionKind, LayerKind};
use deepfuse::train::{grad_check_spec, shrunken, GradCheckConfig, GradCheckReport, TrainMode};

fn check(spec: &FusedNetSpec, mode: TrainMode) -> GradCheckReport {
    let cfg = GradCheckConfig {
        mode,
        ..GradCheckConfig::default()
    };
    let report = grad_check_spec(spec, &cfg).unwrap();
    assert!(
        report.passed,
        "{} / {mode}: max rel error {:.3e}, worst {:?}",
        spec.name, report.max_rel_error, report.worst
    );
    for k in &report.kinds {
        let skipped_share = k.skipped as f64 / (k.checked + k.skipped).max(1) as f64;
        assert!(k.checked >= 50 || k.skipped == 0, "{:?}: only {} coordinates checked", k.kind, k.checked);
        assert!(skipped_share < 0.5, "{:?}: {} of {} skipped", k.kind, k.skipped, k.checked + k.skipped);
    }
    report
}

fn small(name: &str) -> FusedNetSpec {
    shrunken(&builtin_spec(name).unwrap(), 8)
}

#[test]
fn shrunken_spec_is_small() {
    let s = small("N13N33");
    assert_eq!((s.input.height, s.input.width), (8, 8));
    assert!(s.fc_channels <= 8);
    assert!(deepfuse::netspec::validate(&s).is_empty());
}

#[test]
fn deep_fusion_gradients() {
    let r = check(&small("N13N33"), TrainMode::Deep);
    let kinds: Vec<LayerKind> = r.kinds.iter().map(|k| k.kind).collect();
    for kind in [LayerKind::Conv3x3, LayerKind::Conv1x1, LayerKind::BatchNorm, LayerKind::Linear] {
        assert!(kinds.contains(&kind), "{kind:?} not covered");
    }
    let conv = r.kinds.iter().find(|k| k.kind == LayerKind::Conv3x3).unwrap();
    assert!(conv.checked >= 200);
    assert!(r.max_rel_error < 1e-4);
}

#[test]
fn unidirectional_gradients() {
    check(&small("N13N33"), TrainMode::Unidirectional);
}

#[test]
fn shallow_and_plain_gradients() {
    check(&small("N13N33"), TrainMode::Shallow);
    check(&small("N1"), TrainMode::Plain);
}

#[test]
fn decision_gradients() {
    check(&small("N13N33"), TrainMode::DecisionJoint);
    check(&small("N13N33"), TrainMode::DecisionSeparate);
}

#[test]
fn deeply_supervised_gradients() {
    check(&small("N13N33"), TrainMode::DsnAux);
}

#[test]
fn fusion_variants_gradients() {
    check(&small("N13N33").with_fusion(FusionKind::Average), TrainMode::Deep);
    check(&small("N13N33").with_fusion(FusionKind::Max), TrainMode::Deep);
    check(&small("N13N33").with_fuse_point(FusePoint::AfterRelu), TrainMode::Deep);
    check(&small("N13N33").with_fuse_point(FusePoint::AfterRelu), TrainMode::Unidirectional);
    check(&small("N13N33N43"), TrainMode::Deep);
}

#[test]
fn concat_and_residual_gradients() {
    let concat = builtin_spec("N13N33-concat").unwrap().with_input(8, 8);
    check(&concat.scale_width(0.125).unwrap(), TrainMode::Deep);
    check(&small("resnet19"), TrainMode::Deep);
    check(&builtin_spec("tiny").unwrap(), TrainMode::Deep);
}

#[test]
fn a_wrong_gradient_fails_the_check() {
    // a relative error floor this small cannot be met by round-off alone
    let cfg = GradCheckConfig {
        tolerance: 1e-16,
        ..GradCheckConfig::default()
    };
    let report = grad_check_spec(&builtin_spec("tiny").unwrap(), &cfg).unwrap();
    assert!(!report.passed);
    assert!(!report.worst.is_empty());
    assert!(report.worst.windows(2).all(|w| w[0].rel_error >= w[1].rel_error));
}
