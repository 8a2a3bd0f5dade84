use std::collections::BTreeMap;

use super::{
    BlockDivision, BlockRange, FusePoint, FusedNetSpec, FusionKind, InputShape, LayerDesc,
    LayerName, MemberSpec, NetworkSpec, StageKind, StageSpec,
};
use crate::tensor::LayerKind;

/// A named catalog item.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum CatalogEntry {
    Network(NetworkSpec),
    Division(BlockDivision),
}

/// (name, repeats per scale, declared layer count)
const NETWORKS: [(&str, [usize; 3], usize); 7] = [
    ("N1", [5, 6, 6], 19),
    ("N2", [16, 16, 16], 50),
    ("N3", [1, 1, 1], 5),
    ("N4", [2, 2, 2], 8),
    ("N5", [2, 3, 3], 10),
    ("N6", [3, 3, 3], 11),
    ("N7", [4, 4, 4], 14),
];

const WIDTHS: [usize; 3] = [32, 80, 128];

type Range = (u8, u16, u16);

/// (division, network, blocks as (scale, first index, last index))
const DIVISIONS: [(&str, &str, &[Range]); 11] = [
    ("N13", "N1", &[(1, 1, 5), (2, 1, 6), (3, 1, 6)]),
    ("N33", "N3", &[(1, 1, 1), (2, 1, 1), (3, 1, 1)]),
    ("N43", "N4", &[(1, 1, 2), (2, 1, 2), (3, 1, 2)]),
    ("N63", "N6", &[(1, 1, 3), (2, 1, 3), (3, 1, 3)]),
    ("N73", "N7", &[(1, 1, 4), (2, 1, 4), (3, 1, 4)]),
    (
        "N16",
        "N1",
        &[(1, 1, 2), (1, 3, 5), (2, 1, 3), (2, 4, 6), (3, 1, 3), (3, 4, 6)],
    ),
    (
        "N26",
        "N2",
        &[(1, 1, 8), (1, 9, 16), (2, 1, 8), (2, 9, 16), (3, 1, 8), (3, 9, 16)],
    ),
    (
        "N46",
        "N4",
        &[(1, 1, 1), (1, 2, 2), (2, 1, 1), (2, 2, 2), (3, 1, 1), (3, 2, 2)],
    ),
    (
        "N18",
        "N1",
        &[
            (1, 1, 2),
            (1, 3, 5),
            (2, 1, 2),
            (2, 3, 4),
            (2, 5, 6),
            (3, 1, 2),
            (3, 3, 4),
            (3, 5, 6),
        ],
    ),
    (
        "N28",
        "N2",
        &[
            (1, 1, 8),
            (1, 9, 16),
            (2, 1, 5),
            (2, 6, 10),
            (2, 11, 16),
            (3, 1, 5),
            (3, 6, 10),
            (3, 11, 16),
        ],
    ),
    (
        "N58",
        "N5",
        &[
            (1, 1, 1),
            (1, 2, 2),
            (2, 1, 1),
            (2, 2, 2),
            (2, 3, 3),
            (3, 1, 1),
            (3, 2, 2),
            (3, 3, 3),
        ],
    ),
];

/// Ranges of the plain 19-layer network that receive a shortcut in its
/// residual counterpart.
const RESNET19_RANGES: [Range; 8] = [
    (1, 1, 3),
    (1, 4, 5),
    (2, 1, 2),
    (2, 3, 4),
    (2, 5, 6),
    (3, 1, 2),
    (3, 3, 4),
    (3, 5, 6),
];

fn network(name: &str, repeats: [usize; 3], layers: usize, classes: usize) -> NetworkSpec {
    let mut stages = Vec::new();
    for (s, (&r, &c)) in repeats.iter().zip(&WIDTHS).enumerate() {
        if s > 0 {
            stages.push(StageSpec::pool());
        }
        stages.push(StageSpec::conv3(c, r));
    }
    NetworkSpec {
        name: name.to_string(),
        stages,
        fc_channels: 100,
        num_classes: classes,
        declared_layers: Some(layers),
    }
}

fn ranges(list: &[Range]) -> Vec<BlockRange> {
    list.iter()
        .map(|&(s, a, b)| BlockRange::range(LayerName::new(s, a), LayerName::new(s, b)))
        .collect()
}

/// Base networks N1–N7 and the block divisions of them, keyed by name.
pub fn builtin_catalog() -> BTreeMap<String, CatalogEntry> {
    let mut map = BTreeMap::new();
    for (name, repeats, layers) in NETWORKS {
        map.insert(
            name.to_string(),
            CatalogEntry::Network(network(name, repeats, layers, 10)),
        );
    }
    for (name, net, blocks) in DIVISIONS {
        map.insert(
            name.to_string(),
            CatalogEntry::Division(BlockDivision {
                name: name.to_string(),
                network: net.to_string(),
                blocks: ranges(blocks),
            }),
        );
    }
    map
}

/// A catalog network, with 10 classes.
pub fn builtin_network(name: &str) -> Option<NetworkSpec> {
    NETWORKS
        .iter()
        .find(|(n, _, _)| *n == name)
        .map(|&(n, r, l)| network(n, r, l, 10))
}

pub fn builtin_division(name: &str) -> Option<BlockDivision> {
    match builtin_catalog().remove(name)? {
        CatalogEntry::Division(d) => Some(d),
        CatalogEntry::Network(_) => None,
    }
}

fn member(division: &str) -> Result<MemberSpec, String> {
    let d = builtin_division(division).ok_or_else(|| format!("unknown division {division:?}"))?;
    let net = builtin_network(&d.network).expect("catalog divisions name catalog networks");
    MemberSpec::from_division(net, &d)
}

/// Split a name such as `N13N33` into division names.
fn split_divisions(name: &str) -> Option<Vec<&str>> {
    if name.len() < 3 || !name.len().is_multiple_of(3) || !name.is_ascii() {
        return None;
    }
    let parts: Vec<&str> = (0..name.len() / 3).map(|i| &name[3 * i..3 * i + 3]).collect();
    parts
        .iter()
        .all(|p| p.starts_with('N') && p[1..].chars().all(|c| c.is_ascii_digit()))
        .then_some(parts)
}

/// Resolve a builtin fused-net name.
///
/// Accepted forms:
/// * concatenated division names, e.g. `N13N33` or `N16N46N46`;
/// * a network name such as `N1`, giving that network alone as one block;
/// * `<divisions>-concat` for concatenation fusion with the block-final
///   convolutions narrowed so the fused widths match the sum variant;
/// * `<divisions>-after-relu` for fusion after the block-final ReLU;
/// * `N1-resnet` (alias `resnet19`), the residual counterpart of N1;
/// * `tiny`, a two-member 8×8 net for fast tests.
pub fn builtin_spec(name: &str) -> Result<FusedNetSpec, String> {
    if let Some(base) = name.strip_suffix("-concat") {
        return concat_variant(&builtin_spec(base)?);
    }
    if let Some(base) = name.strip_suffix("-after-relu") {
        let mut spec = builtin_spec(base)?.with_fuse_point(FusePoint::AfterRelu);
        spec.name = name.to_string();
        return Ok(spec);
    }
    if name == "resnet19" || name == "N1-resnet" {
        let net = builtin_network("N1").expect("N1 is builtin");
        return resnet_equivalent_spec(&net, &ranges(&RESNET19_RANGES))
            .map(|mut s| {
                s.name = "resnet19".into();
                s
            });
    }
    if name == "tiny" {
        return Ok(tiny_spec());
    }
    if let Some(net) = builtin_network(name) {
        let (first, last) = net.conv_bounds().expect("catalog networks have convolutions");
        let m = MemberSpec::resolve(name, Some(net), vec![BlockRange::range(first, last)])?;
        return Ok(FusedNetSpec::new(name, vec![m], 10));
    }
    let parts = split_divisions(name).ok_or_else(|| {
        format!("unknown builtin {name:?} (expected e.g. N13N33, N1, N13N33-concat, resnet19 or tiny)")
    })?;
    let members = parts.iter().map(|p| member(p)).collect::<Result<Vec<_>, _>>()?;
    if let Some(m) = members.iter().find(|m| m.block_count() != members[0].block_count()) {
        return Err(format!(
            "division {} has {} blocks but {} has {}",
            members[0].name,
            members[0].block_count(),
            m.name,
            m.block_count()
        ));
    }
    Ok(FusedNetSpec::new(name, members, 10))
}

/// Two small members over 8×8 inputs: stages (4, 6) with repeats (2, 1) and (1, 1).
fn tiny_spec() -> FusedNetSpec {
    let net = |name: &str, r1: usize, r2: usize| NetworkSpec {
        name: name.into(),
        stages: vec![StageSpec::conv3(4, r1), StageSpec::pool(), StageSpec::conv3(6, r2)],
        fc_channels: 5,
        num_classes: 3,
        declared_layers: None,
    };
    let blocks = |a: u16| {
        vec![
            BlockRange::range(LayerName::new(1, 1), LayerName::new(1, a)),
            BlockRange::range(LayerName::new(2, 1), LayerName::new(2, 1)),
        ]
    };
    let a = MemberSpec::resolve("deep", Some(net("deep", 2, 1)), blocks(2)).expect("valid");
    let b = MemberSpec::resolve("shallow", Some(net("shallow", 1, 1)), blocks(1)).expect("valid");
    FusedNetSpec {
        name: "tiny".into(),
        members: vec![a, b],
        fusion: FusionKind::Sum,
        fuse_point: FusePoint::BeforeRelu,
        num_classes: 3,
        fc_channels: 5,
        input: InputShape {
            channels: 3,
            height: 8,
            width: 8,
        },
    }
}

/// Residual counterpart of a plain network: the plain chain divided by
/// `shortcuts`, fused with a member of identity blocks (1×1 linear
/// projections where the channel count changes).
pub fn resnet_equivalent_spec(
    plain: &NetworkSpec,
    shortcuts: &[BlockRange],
) -> Result<FusedNetSpec, String> {
    let main = MemberSpec::resolve(plain.name.clone(), Some(plain.clone()), shortcuts.to_vec())?;
    let mut channels = 3;
    let mut blocks = Vec::with_capacity(main.block_count());
    for block in &main.resolved {
        let out = block
            .layers
            .iter()
            .rev()
            .find(|l| l.is_conv())
            .map_or(channels, |l| l.out_channels);
        blocks.push(if out == channels {
            BlockRange::Identity
        } else {
            BlockRange::Projection { out_channels: out }
        });
        channels = out;
    }
    let shortcut = MemberSpec::resolve("shortcut", None, blocks)?;
    Ok(FusedNetSpec::new(
        format!("{}-resnet", plain.name),
        vec![main, shortcut],
        plain.num_classes,
    ))
}

/// Concatenation version of a sum spec: the last convolution of every block
/// gets `1/K` of its width, and the first layer after it declares the full
/// fused width as its input.
pub fn concat_variant(spec: &FusedNetSpec) -> Result<FusedNetSpec, String> {
    let k = spec.member_count();
    let mut members = Vec::with_capacity(k);
    for m in &spec.members {
        let net = m
            .network
            .as_ref()
            .ok_or_else(|| format!("member {}: concat variant needs a network", m.name))?;
        let mut layers: Vec<LayerDesc> = net.chain().into_iter().map(|(_, d)| d).collect();
        let finals: Vec<usize> = m
            .resolved
            .iter()
            .filter_map(|b| {
                let (start, end) = b.span?;
                (start..=end).rev().find(|&i| layers[i].is_conv())
            })
            .collect();
        for &i in &finals {
            let full = layers[i].out_channels;
            if !full.is_multiple_of(k) {
                return Err(format!(
                    "member {}: {} has {full} channels, not divisible by {k}",
                    m.name, layers[i].name
                ));
            }
            layers[i].out_channels = full / k;
            if let Some(next) = layers[i + 1..].iter_mut().find(|l| l.is_conv()) {
                next.in_channels = Some(full);
            }
        }
        let network = NetworkSpec {
            stages: compress(&layers),
            declared_layers: None,
            ..net.clone()
        };
        members.push(MemberSpec::resolve(m.name.clone(), Some(network), m.blocks.clone())?);
    }
    Ok(FusedNetSpec {
        name: format!("{}-concat", spec.name),
        members,
        fusion: FusionKind::Concat,
        ..spec.clone()
    })
}

/// Group consecutive identical layers back into stages.
fn compress(layers: &[LayerDesc]) -> Vec<StageSpec> {
    let mut stages: Vec<StageSpec> = Vec::new();
    for l in layers {
        let kind = match l.kind {
            LayerKind::MaxPool2 => StageKind::MaxPool2,
            LayerKind::Conv1x1 => StageKind::Conv1x1,
            _ => StageKind::Conv3x3,
        };
        let channels = if kind == StageKind::MaxPool2 { 0 } else { l.out_channels };
        match stages.last_mut() {
            Some(s)
                if s.kind == kind
                    && s.channels == channels
                    && l.in_channels.is_none()
                    && kind != StageKind::MaxPool2 =>
            {
                s.repeat += 1
            }
            _ => stages.push(StageSpec {
                kind,
                channels,
                repeat: 1,
                in_channels: l.in_channels,
            }),
        }
    }
    stages
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netspec::validate;

    #[test]
    fn layer_counts_match_the_table() {
        for (name, repeats, layers) in NETWORKS {
            let net = builtin_network(name).unwrap();
            assert_eq!(net.layer_count(), layers, "{name}");
            assert_eq!(repeats.iter().sum::<usize>() + 2, layers, "{name}");
        }
        let n2 = builtin_network("N2").unwrap();
        assert_eq!(n2.layer_count(), 50);
    }

    #[test]
    fn every_division_covers_its_network() {
        for (name, _, _) in DIVISIONS {
            let spec = builtin_spec(name).unwrap();
            assert!(validate(&spec).is_empty(), "{name}: {:?}", validate(&spec));
        }
    }

    #[test]
    fn n33_has_one_layer_per_block() {
        let d = builtin_division("N33").unwrap();
        let names: Vec<String> = d
            .blocks
            .iter()
            .map(|b| match b {
                BlockRange::Layers { first, last } => format!("{first}-{last}"),
                _ => unreachable!(),
            })
            .collect();
        assert_eq!(names, ["C11-C11", "C21-C21", "C31-C31"]);
    }

    #[test]
    fn pair_names_resolve() {
        let spec = builtin_spec("N13N33").unwrap();
        assert_eq!(spec.member_count(), 2);
        assert_eq!(spec.block_count(), 3);
        assert_eq!(spec.block_sizes(), vec![vec![5, 6, 6], vec![1, 1, 1]]);
        assert!(builtin_spec("N13N16").unwrap_err().contains("N16"));
        assert!(builtin_spec("N99").is_err());
    }

    #[test]
    fn blocks_after_pools_carry_them() {
        let spec = builtin_spec("N16").unwrap();
        let flags: Vec<Option<bool>> = spec.members[0].resolved.iter().map(|b| b.pool_before).collect();
        assert_eq!(
            flags,
            [Some(false), Some(false), Some(true), Some(false), Some(true), Some(false)]
        );
    }

    #[test]
    fn concat_variant_halves_block_outputs() {
        let spec = builtin_spec("N13N33-concat").unwrap();
        assert_eq!(spec.fusion, FusionKind::Concat);
        assert!(validate(&spec).is_empty(), "{:?}", validate(&spec));
        let last = spec.members[1].resolved[0].layers.last().unwrap();
        assert_eq!(last.out_channels, 16);
        assert_eq!(spec.members[0].block_sizes(), vec![5, 6, 6]);
    }

    #[test]
    fn resnet_counterpart_uses_projections_where_widths_change() {
        let spec = builtin_spec("resnet19").unwrap();
        let kinds: Vec<&BlockRange> = spec.members[1].blocks.iter().collect();
        assert_eq!(kinds[0], &BlockRange::Projection { out_channels: 32 });
        assert_eq!(kinds[1], &BlockRange::Identity);
        assert_eq!(kinds[2], &BlockRange::Projection { out_channels: 80 });
        assert_eq!(kinds[5], &BlockRange::Projection { out_channels: 128 });
        assert_eq!(
            kinds.iter().filter(|b| ***b == BlockRange::Identity).count(),
            5
        );
        assert!(validate(&spec).is_empty());
    }
}
