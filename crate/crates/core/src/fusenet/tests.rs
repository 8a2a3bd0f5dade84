use super::*;
use crate::netspec::{builtin_network, builtin_spec, BlockRange, MemberSpec};
use crate::tensor::{
    avgpool_global, batchnorm, conv2d, linear_classifier, maxpool2, relu, Mode, Shape,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small(name: &str) -> FusedNetSpec {
    builtin_spec(name)
        .unwrap()
        .with_widths(&[4, 6, 8], 6)
        .unwrap()
        .with_input(8, 8)
}

fn input(n: usize, c: usize, side: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(Shape::new(n, c, side, side), |_, _, _, _| rng.random_range(-1.0..1.0))
}

fn identity_pair(k: usize, b: usize) -> FusedNetSpec {
    let members = (0..k)
        .map(|i| MemberSpec::resolve(format!("id{i}"), None, vec![BlockRange::Identity; b]).unwrap())
        .collect();
    let mut s = FusedNetSpec::new("identity", members, 3).with_input(4, 4);
    s.fc_channels = 4;
    s
}

#[test]
fn parameter_counts_match_the_oracle() {
    let count = |name: &str, classes: usize| {
        let spec = builtin_spec(name).unwrap().with_classes(classes);
        FusedNet::<f32>::build(&spec, 0).unwrap().param_count()
    };
    // per-stage oracle: C1 = 960 + 4*9312, C2 = 23280 + 5*57840,
    // C3 = 92544 + 5*147840, FC1 with BN = 13100, Ip1 = 101 * classes
    let c1 = 960 + 4 * 9312;
    let c2 = 23_280 + 5 * 57_840;
    let c3 = 92_544 + 5 * 147_840;
    let n1 = c1 + c2 + c3 + 13_100 + 1_010;
    assert_eq!(n1, 1_196_542);
    assert_eq!(count("N1", 10), n1);
    assert_eq!(count("N1", 100), 1_205_632);
    assert_eq!(count("N13N33", 10), 1_313_326);
    assert_eq!(count("N13N33", 100), 1_322_416);
    assert_eq!(count("N2", 10), 3_355_774);
}

#[test]
fn builds_are_deterministic() {
    let spec = small("N13N33");
    let a = FusedNet::<f32>::build(&spec, 7).unwrap();
    let b = FusedNet::<f32>::build(&spec, 7).unwrap();
    let c = FusedNet::<f32>::build(&spec, 8).unwrap();
    assert_eq!(a.layers(), b.layers());
    assert_ne!(a.layers(), c.layers());
    assert_eq!(a.layer_names(), b.layer_names());
    assert_eq!(a.block_sizes(), vec![vec![5, 6, 6], vec![1, 1, 1]]);
    assert!(a.layer_id("m0/b1/C11.conv").is_some());
    assert!(a.layer_id("m1/b3/C31.bn").is_some());
    assert!(a.layer_id("head/ip1").is_some());
}

#[test]
fn identity_blocks_sum_to_powers_of_two() {
    for (k, b, scale) in [(2, 2, 4.0), (2, 3, 8.0), (3, 2, 9.0)] {
        let mut net = FusedNet::<f64>::build(&identity_pair(k, b), 1).unwrap();
        let x = input(2, 3, 4, 3);
        net.forward_deep(&x, Mode::Train).unwrap();
        let stages = net.retained_stage_outputs();
        assert_eq!(stages.len(), b);
        let expect = x.scale(scale);
        assert!(stages[b - 1].max_abs_diff(&expect).unwrap() <= 1e-12);
    }
}

#[test]
fn identity_pair_input_gradient_is_four_times_the_stage_gradient() {
    let x = input(2, 3, 4, 5);
    let mut fused = FusedNet::<f64>::build(&identity_pair(2, 2), 2).unwrap();
    // same head on x̄_2 = 4 x0 directly
    let mut alone = FusedNet::<f64>::build(&identity_pair(1, 2), 2).unwrap();
    alone.copy_params_from(&fused).unwrap();
    let sf = fused.forward_deep(&x, Mode::Train).unwrap();
    let sa = alone.forward_deep(&x.scale(4.0), Mode::Train).unwrap();
    assert_eq!(sf, sa);
    let d = input(2, 3, 1, 9).into_vec();
    let d = Tensor::from_vec(sf.shape(), d).unwrap();
    let dx_fused = fused.backward_deep(&d).unwrap();
    let dx_alone = alone.backward_deep(&d).unwrap();
    assert!(dx_fused.max_abs_diff(&dx_alone.scale(4.0)).unwrap() <= 1e-12);
}

#[test]
fn one_member_deep_equals_its_plain_chain() {
    let divided = small("N16");
    let plain = small("N1");
    let mut a = FusedNet::<f64>::build(&divided, 4).unwrap();
    let mut b = FusedNet::<f64>::build(&plain, 4).unwrap();
    assert_eq!(a.block_count(), 6);
    assert_eq!(b.block_count(), 1);
    let x = input(3, 3, 8, 1);
    let deep = a.forward(&x, Topology::Deep, Mode::Train).unwrap();
    let member = a.forward(&x, Topology::Member(0), Mode::Train).unwrap();
    let single = b.forward(&x, Topology::Deep, Mode::Train).unwrap();
    assert_eq!(deep, member);
    assert_eq!(deep, single);
}

#[test]
fn single_stage_deep_equals_shallow() {
    let spec = small("N13N33");
    let collapsed = spec.collapsed().unwrap();
    let mut a = FusedNet::<f64>::build(&spec, 6).unwrap();
    let mut b = FusedNet::<f64>::build(&collapsed, 6).unwrap();
    assert_eq!(a.layers(), b.layers());
    let x = input(2, 3, 8, 2);
    let shallow = a.forward_shallow(&x, Mode::Train).unwrap();
    let deep = b.forward_deep(&x, Mode::Train).unwrap();
    assert!(shallow.max_abs_diff(&deep).unwrap() <= 1e-12);
    let uni = b.forward_unidirectional(&x, Mode::Train).unwrap();
    assert!(uni.max_abs_diff(&deep).unwrap() <= 1e-12);
}

#[test]
fn deep_and_shallow_differ_for_several_stages() {
    let mut net = FusedNet::<f64>::build(&small("N13N33"), 6).unwrap();
    let x = input(2, 3, 8, 2);
    let deep = net.forward_deep(&x, Mode::Train).unwrap();
    let shallow = net.forward_shallow(&x, Mode::Train).unwrap();
    assert!(deep.max_abs_diff(&shallow).unwrap() > 1e-6);
}

#[test]
fn silent_inner_chain_reduces_unidirectional_to_the_outer_net() {
    let mut net = FusedNet::<f64>::build(&small("N13N33"), 3).unwrap();
    let inner: Vec<LayerId> = net.chains()[1].iter().flat_map(|b| b.layer_ids().collect::<Vec<_>>()).collect();
    for id in inner {
        let p = &mut net.layers_mut()[id];
        p.weights.iter_mut().for_each(|w| *w = 0.0);
        p.bias.iter_mut().for_each(|w| *w = 0.0);
        p.bn_gamma.iter_mut().for_each(|w| *w = 0.0);
    }
    let x = input(2, 3, 8, 4);
    let uni = net.forward_unidirectional(&x, Mode::Train).unwrap();
    let outer = net.forward(&x, Topology::Member(0), Mode::Train).unwrap();
    assert_eq!(&uni, outer.main());
}

#[test]
fn unidirectional_needs_two_members() {
    let spec = builtin_spec("N13N33N43").unwrap().with_input(8, 8);
    let mut net = FusedNet::<f64>::build(&spec, 0).unwrap();
    assert!(matches!(
        net.forward(&input(1, 3, 8, 0), Topology::Unidirectional, Mode::Train),
        Err(Error::InvalidArgument(_))
    ));
}

#[test]
fn decision_fusion_averages_member_probabilities() {
    let scores = vec![
        Tensor::from_vec(Shape::new(1, 2, 1, 1), vec![10.0f64, -10.0]).unwrap(),
        Tensor::from_vec(Shape::new(1, 2, 1, 1), vec![-10.0, 10.0]).unwrap(),
    ];
    let p = decision_probabilities(&scores).unwrap();
    assert!((p.data()[0] - 0.5).abs() < 1e-12 && (p.data()[1] - 0.5).abs() < 1e-12);
    let (loss, grads) = decision_joint_loss(&scores, &[0]).unwrap();
    let (l0, g0) = crate::tensor::softmax_xent(&scores[0], &[0]).unwrap();
    let (l1, _) = crate::tensor::softmax_xent(&scores[1], &[0]).unwrap();
    assert!((loss - (l0 + l1) / 2.0).abs() < 1e-12);
    assert!(grads[0].max_abs_diff(&g0.scale(0.5)).unwrap() < 1e-15);
    assert!(decision_probabilities::<f64>(&[]).is_err());

    let spec = small("N13N33");
    let opts = BuildOptions { member_heads: true, ..BuildOptions::default() };
    let mut net = FusedNet::<f64>::build_with(&spec, opts, 1).unwrap();
    let x = input(2, 3, 8, 8);
    let each = net.forward_decision(&x, Mode::Train).unwrap();
    assert_eq!(each.len(), 2);
    let probs = decision_probabilities(&each).unwrap();
    for row in probs.data().chunks(10) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    let mut plain = FusedNet::<f64>::build(&spec, 1).unwrap();
    assert!(plain.forward_decision(&x, Mode::Train).is_err());
}

#[test]
fn decision_members_run_independently() {
    let spec = small("N13N33");
    let opts = BuildOptions { member_heads: true, ..BuildOptions::default() };
    let mut net = FusedNet::<f64>::build_with(&spec, opts, 1).unwrap();
    let x = input(2, 3, 8, 8);
    let before = net.forward_decision(&x, Mode::Train).unwrap();
    for id in net.chains()[1].iter().flat_map(|b| b.layer_ids().collect::<Vec<_>>()).collect::<Vec<_>>() {
        net.layers_mut()[id].weights.iter_mut().for_each(|w| *w *= -1.5);
    }
    let after = net.forward_decision(&x, Mode::Train).unwrap();
    assert_eq!(before[0], after[0]);
    assert_ne!(before[1], after[1]);
}

#[test]
fn unused_auxiliary_heads_receive_no_gradient() {
    let opts = BuildOptions { aux_heads: true, ..BuildOptions::default() };
    let mut net = FusedNet::<f64>::build_with(&small("N13N33"), opts, 1).unwrap();
    assert_eq!(net.aux_heads().len(), 3);
    let x = input(2, 3, 8, 1);
    let s = net.forward_deep(&x, Mode::Train).unwrap();
    let (_, d) = crate::tensor::softmax_xent(&s, &[1, 2]).unwrap();
    net.zero_grad();
    net.backward_deep(&d).unwrap();
    for &id in net.aux_heads() {
        assert!(net.grads()[id].weights.iter().all(|&g| g == 0.0));
    }
    let out = net.forward(&x, Topology::DeeplySupervised, Mode::Train).unwrap();
    assert_eq!(out.aux.len(), 3);
    let d_aux: Vec<_> = out
        .aux
        .iter()
        .map(|a| crate::tensor::softmax_xent(a, &[1, 2]).unwrap().1)
        .collect();
    net.zero_grad();
    net.backward(&[d], &d_aux).unwrap();
    for &id in net.aux_heads() {
        assert!(net.grads()[id].weights.iter().any(|&g| g != 0.0));
    }
}

#[test]
fn both_members_learn_in_deep_mode() {
    let mut net = FusedNet::<f64>::build(&small("N13N33"), 1).unwrap();
    let x = input(4, 3, 8, 1);
    let s = net.forward_deep(&x, Mode::Train).unwrap();
    let (_, d) = crate::tensor::softmax_xent(&s, &[0, 1, 2, 3]).unwrap();
    net.zero_grad();
    net.backward_deep(&d).unwrap();
    for k in 0..2 {
        for block in &net.chains()[k] {
            for id in block.layer_ids() {
                if net.layers()[id].kind.is_conv() {
                    assert!(
                        net.grads()[id].weights.iter().any(|&g| g != 0.0),
                        "{} has a zero gradient",
                        net.layer_name(id)
                    );
                }
            }
        }
    }
}

#[test]
fn exchanging_blocks_of_a_pair_keeps_the_sum() {
    let mut net = FusedNet::<f64>::build(&small("N13N33"), 5).unwrap();
    let x = input(2, 3, 8, 6);
    let before = net.forward_deep(&x, Mode::Train).unwrap();
    net.swap_blocks(1, 0, 1).unwrap();
    assert!(!net.has_retained_state());
    assert_eq!(net.block_sizes(), vec![vec![5, 1, 6], vec![1, 6, 1]]);
    assert_eq!(net.block_param_count(1, 1), net.block_param_count(1, 1));
    let after = net.forward_deep(&x, Mode::Train).unwrap();
    assert_eq!(before, after);
    let shallow_after = net.forward_shallow(&x, Mode::Train);
    assert!(shallow_after.is_ok());
    assert!(net.swap_blocks(3, 0, 1).is_err());
    assert!(net.swap_blocks(0, 0, 2).is_err());
    assert!(net.swap_blocks(0, 1, 1).is_err());
}

#[test]
fn errors_are_reported() {
    let mut net = FusedNet::<f64>::build(&small("N13N33"), 5).unwrap();
    let d = Tensor::zeros(Shape::new(1, 10, 1, 1));
    assert!(matches!(net.backward_deep(&d), Err(Error::BackwardBeforeForward(_))));
    let err = net.forward_deep(&input(1, 3, 6, 0), Mode::Train).unwrap_err();
    assert!(err.to_string().contains("8x8"), "{err}");
    net.forward_deep(&input(1, 3, 8, 0), Mode::Train).unwrap();
    assert!(net.backward(&[d.clone(), d], &[]).is_err());
    assert!(net.forward(&input(1, 3, 8, 0), Topology::Member(2), Mode::Train).is_err());
    assert!(net.forward(&input(1, 3, 8, 0), Topology::DeeplySupervised, Mode::Train).is_err());
    let mut bad = builtin_spec("N13N33").unwrap();
    bad.members[1].network.as_mut().unwrap().num_classes = 100;
    assert!(matches!(FusedNet::<f32>::build(&bad, 0), Err(Error::Validation(_))));
}

/// Direct residual computation: x ← relu(block(x) + shortcut(x)) per stage.
fn residual_oracle(net: &mut FusedNet<f64>, x0: &Tensor<f64>) -> Tensor<f64> {
    let spec = net.spec().clone();
    let plain = &spec.members[0];
    let mut x = x0.clone();
    for (b, block) in plain.resolved.iter().enumerate() {
        if block.pool_before == Some(true) {
            x = maxpool2(&x).unwrap().0;
        }
        let mut y = x.clone();
        let convs: Vec<_> = block.layers.iter().filter(|l| l.is_conv()).collect();
        for (i, l) in convs.iter().enumerate() {
            let conv = net.layer_id(&format!("m0/b{}/{}.conv", b + 1, l.name)).unwrap();
            let bn = net.layer_id(&format!("m0/b{}/{}.bn", b + 1, l.name)).unwrap();
            y = conv2d(&y, &net.layers()[conv]).unwrap();
            y = batchnorm(&y, &mut net.layers_mut()[bn], Mode::Train).unwrap().0;
            if i + 1 < convs.len() {
                y = relu(&y);
            }
        }
        let shortcut = match net.layer_id(&format!("m1/b{}/P.conv", b + 1)) {
            Some(p) => conv2d(&x, &net.layers()[p]).unwrap(),
            None => x.clone(),
        };
        x = relu(&y.add(&shortcut).unwrap());
    }
    let h = net.head();
    let y = conv2d(&x, &net.layers()[h.fc]).unwrap();
    let y = batchnorm(&y, &mut net.layers_mut()[h.fc_bn], Mode::Train).unwrap().0;
    let y = avgpool_global(&relu(&y));
    linear_classifier(&y, &net.layers()[h.ip]).unwrap()
}

#[test]
fn resnet_equivalent_matches_a_direct_residual_net() {
    let spec = builtin_spec("resnet19").unwrap().with_widths(&[4, 6, 8], 6).unwrap().with_input(8, 8);
    assert_eq!(spec.member_count(), 2);
    let mut net = FusedNet::<f64>::build(&spec, 11).unwrap();
    let x = input(2, 3, 8, 12);
    let fused = net.forward_deep(&x, Mode::Train).unwrap();
    let direct = residual_oracle(&mut net, &x);
    assert!(fused.max_abs_diff(&direct).unwrap() <= 1e-10);
    let projections = net.layer_names().iter().filter(|n| n.ends_with("/P.conv")).count();
    assert_eq!(projections, 3);

    let from_fn = make_resnet_equivalent(
        &builtin_network("N1").unwrap(),
        &spec.members[0].blocks,
    )
    .unwrap();
    assert_eq!(from_fn.block_count(), 8);
    assert!(make_resnet_equivalent(&builtin_network("N1").unwrap(), &[]).is_err());
}

#[test]
fn max_and_average_fusion_run() {
    let x = input(2, 3, 8, 1);
    let mut sum = FusedNet::<f64>::build(&small("N13N33"), 1).unwrap();
    let base = sum.forward_deep(&x, Mode::Train).unwrap();
    for kind in [crate::tensor::FusionKind::Max, crate::tensor::FusionKind::Average] {
        let mut net = FusedNet::<f64>::build(&small("N13N33").with_fusion(kind), 1).unwrap();
        let y = net.forward_deep(&x, Mode::Train).unwrap();
        assert!(y.is_finite());
        assert!(y.max_abs_diff(&base).unwrap() > 0.0);
    }
    let concat = builtin_spec("N13N33-concat").unwrap().with_input(8, 8);
    let mut net = FusedNet::<f32>::build(&concat, 1).unwrap();
    assert!(net.forward_deep(&x.cast(), Mode::Train).unwrap().is_finite());
}
