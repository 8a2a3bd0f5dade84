use std::fmt;

use serde::Serialize;

use super::{BlockRange, FusedNetSpec, FusionKind, MemberSpec};
use crate::tensor::LayerKind;

/// One problem found in a spec.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Diagnostic {
    pub location: String,
    pub message: String,
}

impl Diagnostic {
    pub fn new(location: impl Into<String>, message: impl Into<String>) -> Self {
        Diagnostic {
            location: location.into(),
            message: message.into(),
        }
    }
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.location, self.message)
    }
}

/// Channel and spatial bookkeeping of a valid spec.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChannelPlan {
    /// Whether stage b starts with the shared 2×2 pool.
    pub stage_pool: Vec<bool>,
    /// Channels entering stage b.
    pub stage_in: Vec<usize>,
    /// Fused channels leaving stage b.
    pub stage_out: Vec<usize>,
    /// `[k][b]`: output channels of member k's block b.
    pub member_out: Vec<Vec<usize>>,
    /// `[k][b]`: (in, out) channels of every convolution of the block, in order.
    pub conv_channels: Vec<Vec<Vec<(usize, usize)>>>,
    /// Spatial extent leaving stage b.
    pub stage_extent: Vec<(usize, usize)>,
}

impl ChannelPlan {
    /// Channels entering FC1.
    pub fn head_in(&self) -> usize {
        self.stage_out.last().copied().unwrap_or(0)
    }
}

/// All diagnostics for `spec`; empty means valid.
pub fn validate(spec: &FusedNetSpec) -> Vec<Diagnostic> {
    channel_plan(spec).err().unwrap_or_default()
}

fn coverage(k: usize, m: &MemberSpec, out: &mut Vec<Diagnostic>) {
    let Some(net) = &m.network else {
        if let Some(b) = m.blocks.iter().position(|b| matches!(b, BlockRange::Layers { .. })) {
            out.push(Diagnostic::new(
                format!("members[{k}].blocks[{b}]"),
                format!("member {} has a layer range but no network", m.name),
            ));
        }
        return;
    };
    let chain = net.chain();
    let spans: Vec<(usize, usize)> = m.resolved.iter().filter_map(|b| b.span).collect();
    if spans.is_empty() {
        if chain.iter().any(|(_, d)| d.is_conv()) {
            out.push(Diagnostic::new(
                format!("members[{k}].blocks"),
                format!("member {}: no block covers the network's layers", m.name),
            ));
        }
        return;
    }
    let loc = format!("members[{k}].blocks");
    let gap_is_pools = |from: usize, to: usize| {
        chain[from..to]
            .iter()
            .all(|(_, d)| d.kind == LayerKind::MaxPool2)
    };
    if !gap_is_pools(0, spans[0].0) {
        out.push(Diagnostic::new(
            loc.clone(),
            format!(
                "member {}: layers before {} are not covered by any block",
                m.name, chain[spans[0].0].1.name
            ),
        ));
    }
    for w in spans.windows(2) {
        let (prev, next) = (w[0], w[1]);
        if next.0 <= prev.1 {
            out.push(Diagnostic::new(
                loc.clone(),
                format!(
                    "member {}: blocks overlap at {}",
                    m.name, chain[next.0].1.name
                ),
            ));
        } else if !gap_is_pools(prev.1 + 1, next.0) {
            out.push(Diagnostic::new(
                loc.clone(),
                format!(
                    "member {}: layers between {} and {} are not covered by any block",
                    m.name, chain[prev.1].1.name, chain[next.0].1.name
                ),
            ));
        }
    }
    let end = spans.last().expect("nonempty").1;
    if end + 1 < chain.len() {
        out.push(Diagnostic::new(
            loc,
            format!(
                "member {}: layers after {} are not covered by any block",
                m.name, chain[end].1.name
            ),
        ));
    }
}

/// Check `spec` and work out the channel count at every layer.
pub fn channel_plan(spec: &FusedNetSpec) -> Result<ChannelPlan, Vec<Diagnostic>> {
    let mut diags = Vec::new();
    if spec.members.is_empty() {
        diags.push(Diagnostic::new("members", "at least one base network is required"));
        return Err(diags);
    }
    if spec.num_classes < 2 {
        diags.push(Diagnostic::new(
            "classes",
            format!("need at least 2 classes, got {}", spec.num_classes),
        ));
    }
    if spec.fc_channels == 0 {
        diags.push(Diagnostic::new("fc_channels", "must be positive"));
    }
    if spec.input.channels == 0 || spec.input.height == 0 || spec.input.width == 0 {
        diags.push(Diagnostic::new("input", "extents must be positive"));
    }
    for (k, m) in spec.members.iter().enumerate() {
        if let Some(net) = &m.network {
            if net.num_classes != spec.num_classes {
                diags.push(Diagnostic::new(
                    format!("members[{k}]"),
                    format!(
                        "member {} classifies into {} classes but the fused net into {}",
                        m.name, net.num_classes, spec.num_classes
                    ),
                ));
            }
            if net.stages.iter().any(|s| s.repeat == 0) {
                diags.push(Diagnostic::new(
                    format!("members[{k}].stages"),
                    "repeat counts must be positive",
                ));
            }
            if net
                .stages
                .iter()
                .any(|s| s.kind != super::StageKind::MaxPool2 && s.channels == 0)
            {
                diags.push(Diagnostic::new(
                    format!("members[{k}].stages"),
                    "channel counts must be positive",
                ));
            }
        }
        coverage(k, m, &mut diags);
    }
    let first = &spec.members[0];
    let b_count = first.block_count();
    if b_count == 0 {
        diags.push(Diagnostic::new(
            "members[0].blocks",
            format!("member {} has no blocks", first.name),
        ));
    }
    for m in &spec.members[1..] {
        if m.block_count() != b_count {
            diags.push(Diagnostic::new(
                "members",
                format!(
                    "member {} has {} blocks but member {} has {}",
                    first.name,
                    b_count,
                    m.name,
                    m.block_count()
                ),
            ));
        }
    }
    if !diags.is_empty() {
        return Err(diags);
    }

    let k_count = spec.members.len();
    let mut plan = ChannelPlan {
        stage_pool: Vec::with_capacity(b_count),
        stage_in: Vec::with_capacity(b_count),
        stage_out: Vec::with_capacity(b_count),
        member_out: vec![Vec::with_capacity(b_count); k_count],
        conv_channels: vec![Vec::with_capacity(b_count); k_count],
        stage_extent: Vec::with_capacity(b_count),
    };
    let mut channels = spec.input.channels;
    let (mut h, mut w) = (spec.input.height, spec.input.width);
    for b in 0..b_count {
        let stage = b + 1;
        let flags: Vec<(usize, bool)> = spec
            .members
            .iter()
            .enumerate()
            .filter_map(|(k, m)| m.resolved[b].pool_before.map(|p| (k, p)))
            .collect();
        let pool = flags.first().is_some_and(|f| f.1);
        if let Some(&(k, p)) = flags.iter().find(|f| f.1 != pool) {
            diags.push(Diagnostic::new(
                format!("stage {stage}"),
                format!(
                    "member {} {} the stage with a pool but member {} {}",
                    spec.members[flags[0].0].name,
                    if pool { "starts" } else { "does not start" },
                    spec.members[k].name,
                    if p { "does" } else { "does not" }
                ),
            ));
        }
        if pool {
            if h % 2 != 0 || w % 2 != 0 {
                diags.push(Diagnostic::new(
                    format!("stage {stage}"),
                    format!("cannot pool a {h}x{w} map"),
                ));
            }
            h /= 2;
            w /= 2;
        }
        plan.stage_pool.push(pool);
        plan.stage_in.push(channels);

        let mut extents = Vec::with_capacity(k_count);
        for (k, m) in spec.members.iter().enumerate() {
            let block = &m.resolved[b];
            let mut c = channels;
            let (mut bh, mut bw) = (h, w);
            let mut convs = Vec::new();
            for layer in &block.layers {
                if layer.kind == LayerKind::MaxPool2 {
                    if bh % 2 != 0 || bw % 2 != 0 {
                        diags.push(Diagnostic::new(
                            format!("member {} block {stage}", m.name),
                            format!("cannot pool a {bh}x{bw} map"),
                        ));
                    }
                    bh /= 2;
                    bw /= 2;
                    continue;
                }
                if let Some(declared) = layer.in_channels {
                    if declared != c {
                        diags.push(Diagnostic::new(
                            format!("member {} block {stage}", m.name),
                            format!(
                                "{} declares {declared} input channels but receives {c}",
                                layer.name
                            ),
                        ));
                    }
                }
                convs.push((c, layer.out_channels));
                c = layer.out_channels;
            }
            plan.member_out[k].push(c);
            plan.conv_channels[k].push(convs);
            extents.push((bh, bw));
        }
        if let Some((k, e)) = extents.iter().enumerate().find(|(_, e)| **e != extents[0]) {
            diags.push(Diagnostic::new(
                format!("stage {stage}"),
                format!(
                    "member {} produces {}x{} maps but member {} produces {}x{}",
                    spec.members[0].name, extents[0].0, extents[0].1, spec.members[k].name, e.0, e.1
                ),
            ));
        }
        (h, w) = extents[0];

        let outs: Vec<usize> = plan.member_out.iter().map(|o| o[b]).collect();
        let fused = match spec.fusion {
            FusionKind::Concat => outs.iter().sum(),
            kind => {
                if let Some(k) = outs.iter().position(|&c| c != outs[0]) {
                    diags.push(Diagnostic::new(
                        format!("stage {stage}"),
                        format!(
                            "{} fusion needs equal channels, but member {} gives {} and member {} gives {}",
                            kind.as_str(),
                            spec.members[0].name,
                            outs[0],
                            spec.members[k].name,
                            outs[k]
                        ),
                    ));
                }
                outs[0]
            }
        };
        plan.stage_out.push(fused);
        plan.stage_extent.push((h, w));
        channels = fused;
    }
    if diags.is_empty() {
        Ok(plan)
    } else {
        Err(diags)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netspec::{builtin_spec, LayerName, NetworkSpec, StageSpec};

    fn inline(name: &str, widths: &[usize]) -> MemberSpec {
        let mut stages = Vec::new();
        for (i, &c) in widths.iter().enumerate() {
            if i > 0 {
                stages.push(StageSpec::pool());
            }
            stages.push(StageSpec::conv3(c, 1));
        }
        let net = NetworkSpec {
            name: name.into(),
            stages,
            fc_channels: 100,
            num_classes: 10,
            declared_layers: None,
        };
        let blocks = (1..=widths.len() as u8)
            .map(|s| BlockRange::range(LayerName::new(s, 1), LayerName::new(s, 1)))
            .collect();
        MemberSpec::resolve(name, Some(net), blocks).unwrap()
    }

    #[test]
    fn builtin_pair_is_valid() {
        let plan = channel_plan(&builtin_spec("N13N33").unwrap()).unwrap();
        assert_eq!(plan.stage_out, [32, 80, 128]);
        assert_eq!(plan.stage_pool, [false, true, true]);
        assert_eq!(plan.stage_extent, [(32, 32), (16, 16), (8, 8)]);
        assert_eq!(plan.conv_channels[1][1], [(32, 80)]);
    }

    #[test]
    fn sum_of_unequal_widths_is_diagnosed() {
        let spec = FusedNetSpec::new("x", vec![inline("a", &[32]), inline("b", &[48])], 10);
        let d = validate(&spec);
        assert_eq!(d.len(), 1);
        assert!(d[0].message.contains("32") && d[0].message.contains("48"), "{}", d[0]);
    }

    #[test]
    fn concat_into_declared_sum_width_is_valid() {
        let mut a = inline("a", &[32, 64]);
        let mut net = a.network.clone().unwrap();
        net.stages[2].in_channels = Some(64);
        a = MemberSpec::resolve("a", Some(net.clone()), a.blocks.clone()).unwrap();
        let spec = FusedNetSpec::new("x", vec![a.clone(), a.clone()], 10).with_fusion(FusionKind::Concat);
        assert!(validate(&spec).is_empty(), "{:?}", validate(&spec));

        net.stages[2].in_channels = Some(48);
        let bad = MemberSpec::resolve("a", Some(net), a.blocks.clone()).unwrap();
        let spec = FusedNetSpec::new("x", vec![bad, a], 10).with_fusion(FusionKind::Concat);
        assert!(!validate(&spec).is_empty());
    }

    #[test]
    fn empty_members_and_block_mismatch() {
        let d = validate(&FusedNetSpec::new("x", vec![], 10));
        assert!(d[0].message.contains("at least one base network"));
        let spec = FusedNetSpec::new("x", vec![inline("a", &[8, 8]), inline("b", &[8])], 10);
        let msg = validate(&spec)[0].message.clone();
        assert!(msg.contains('a') && msg.contains('b'), "{msg}");
    }

    #[test]
    fn gaps_are_diagnosed() {
        let net = crate::netspec::builtin_network("N4").unwrap();
        let m = MemberSpec::resolve(
            "gappy",
            Some(net),
            vec![
                BlockRange::range(LayerName::new(1, 1), LayerName::new(1, 1)),
                BlockRange::range(LayerName::new(2, 1), LayerName::new(3, 2)),
            ],
        )
        .unwrap();
        let d = validate(&FusedNetSpec::new("x", vec![m], 10));
        assert!(d.iter().any(|d| d.message.contains("C11 and C21")), "{d:?}");
    }
}
