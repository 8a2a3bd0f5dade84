use serde::Serialize;

use crate::error::{Error, Result};
use crate::fusenet::FusedNet;
use crate::netspec::{channel_plan, FusedNetSpec, LayerDesc, NetworkSpec};
use crate::tensor::{LayerKind, Scalar};

/// Trainable values of a built net: weights, biases and BN γ/β. Running
/// statistics are excluded.
pub fn count_params<T: Scalar>(net: &FusedNet<T>) -> usize {
    net.param_count()
}

fn conv_params(kind: LayerKind, cin: usize, cout: usize, batchnorm: bool) -> usize {
    let k = kind.kernel();
    cin * cout * k * k + cout + if batchnorm { 2 * cout } else { 0 }
}

fn head_params(cin: usize, fc: usize, classes: usize) -> usize {
    conv_params(LayerKind::Conv1x1, cin, fc, true) + fc * classes + classes
}

/// A base network on its own. The head (FC1 with BN, then Ip1) is included
/// when `fc_channels > 0`.
pub fn count_network_params(net: &NetworkSpec, in_channels: usize) -> usize {
    let mut c = in_channels;
    let mut total = 0;
    for (_, desc) in net.chain() {
        if desc.is_conv() {
            total += conv_params(desc.kind, c, desc.out_channels, desc.batchnorm);
            c = desc.out_channels;
        }
    }
    if net.fc_channels > 0 {
        total += head_params(c, net.fc_channels, net.num_classes);
    }
    total
}

/// Parameter breakdown of a fused spec with the shared head only.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct SpecParams {
    /// `[k][b]`
    pub blocks: Vec<Vec<usize>>,
    pub head: usize,
    pub total: usize,
}

/// Counted from the channel plan, without building the net.
pub fn count_spec_params(spec: &FusedNetSpec) -> Result<SpecParams> {
    let plan = channel_plan(spec).map_err(Error::Validation)?;
    let blocks: Vec<Vec<usize>> = spec
        .members
        .iter()
        .enumerate()
        .map(|(k, m)| {
            m.resolved
                .iter()
                .enumerate()
                .map(|(b, block)| {
                    let convs = block.layers.iter().filter(|l| l.is_conv());
                    convs
                        .zip(&plan.conv_channels[k][b])
                        .map(|(d, &(cin, cout)): (&LayerDesc, _)| conv_params(d.kind, cin, cout, d.batchnorm))
                        .sum()
                })
                .collect()
        })
        .collect();
    let head = head_params(plan.head_in(), spec.fc_channels, spec.num_classes);
    let total = blocks.iter().flatten().sum::<usize>() + head;
    Ok(SpecParams { blocks, head, total })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::exchange_blocks;
    use crate::netspec::{builtin_catalog, builtin_network, builtin_spec, StageSpec};
    use proptest::prelude::*;

    #[test]
    fn single_convolution() {
        let net = NetworkSpec {
            name: "one".into(),
            stages: vec![StageSpec::conv3(32, 1)],
            fc_channels: 0,
            num_classes: 10,
            declared_layers: None,
        };
        assert_eq!(count_network_params(&net, 3), 960);
    }

    #[test]
    fn spec_formula_matches_built_nets() {
        for name in ["N1", "N2", "N13N33", "N16N26N46", "resnet19", "tiny", "N13N33N43"] {
            for classes in [10, 100] {
                let spec = builtin_spec(name).unwrap().with_classes(classes);
                let net = FusedNet::<f32>::build(&spec, 0).unwrap();
                let counted = count_spec_params(&spec).unwrap();
                assert_eq!(counted.total, count_params(&net), "{name}/{classes}");
                assert_eq!(counted.head, net.head_param_count());
                for k in 0..spec.member_count() {
                    for b in 0..spec.block_count() {
                        assert_eq!(counted.blocks[k][b], net.block_param_count(k, b));
                    }
                }
            }
        }
    }

    #[test]
    fn base_networks_agree_with_their_single_member_specs() {
        for name in builtin_catalog().keys() {
            if let Some(net) = builtin_network(name) {
                let spec = builtin_spec(name).unwrap();
                assert_eq!(count_network_params(&net, 3), count_spec_params(&spec).unwrap().total, "{name}");
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn exchange_keeps_the_count(b in 0usize..3, seed in 0u64..1000) {
            let spec = builtin_spec("N13N33").unwrap().with_widths(&[4, 6, 8], 6).unwrap();
            let net = FusedNet::<f32>::build(&spec, seed).unwrap();
            let swapped = exchange_blocks(&net, b, 0, 1).unwrap();
            prop_assert_eq!(count_params(&swapped), count_params(&net));
        }
    }
}
