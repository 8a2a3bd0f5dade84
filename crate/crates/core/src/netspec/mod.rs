//! Declarative descriptions of base networks, their block divisions, and the
//! fused nets assembled from them.
//!
//! A base network is a linear chain of convolution stages separated by 2×2
//! max pools. Its convolutions are named `C<scale><index>` (`C11` is the first
//! convolution, `C21` the first one after the first pool). A block division
//! cuts the chain into contiguous ranges of those names; a fused net lines up
//! K members that all have the same number of blocks B.

mod catalog;
mod config;
mod validate;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use catalog::{
    builtin_catalog, builtin_division, builtin_network, builtin_spec, concat_variant,
    resnet_equivalent_spec, CatalogEntry,
};
pub use config::{load_spec, parse_spec, serialize_spec};
pub use validate::{channel_plan, validate, ChannelPlan, Diagnostic};

pub use crate::tensor::FusionKind;
use crate::tensor::LayerKind;

/// Name of a convolution within a base network, e.g. `C116`.
///
/// The scale is a single digit; everything after it is the index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LayerName {
    pub scale: u8,
    pub index: u16,
}

impl LayerName {
    pub const fn new(scale: u8, index: u16) -> Self {
        LayerName { scale, index }
    }
}

impl fmt::Display for LayerName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "C{}{}", self.scale, self.index)
    }
}

impl FromStr for LayerName {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || format!("malformed layer name {s:?} (expected C<scale><index>, e.g. C11)");
        let rest = s.strip_prefix('C').ok_or_else(bad)?;
        let mut chars = rest.chars();
        let scale = chars.next().and_then(|c| c.to_digit(10)).ok_or_else(bad)?;
        let index: u16 = chars.as_str().parse().map_err(|_| bad())?;
        if scale == 0 || index == 0 {
            return Err(bad());
        }
        Ok(LayerName::new(scale as u8, index))
    }
}

/// Layer kind of a stage entry.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum StageKind {
    Conv3x3,
    Conv1x1,
    MaxPool2,
}

impl StageKind {
    pub fn as_str(self) -> &'static str {
        match self {
            StageKind::Conv3x3 => "conv3x3",
            StageKind::Conv1x1 => "conv1x1",
            StageKind::MaxPool2 => "maxpool2",
        }
    }
}

impl FromStr for StageKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "conv3x3" | "conv3" => Ok(StageKind::Conv3x3),
            "conv1x1" | "conv1" => Ok(StageKind::Conv1x1),
            "maxpool2" | "maxpool" | "pool" => Ok(StageKind::MaxPool2),
            other => Err(format!(
                "unknown layer kind {other:?} (expected conv3x3, conv1x1 or maxpool2)"
            )),
        }
    }
}

/// `repeat` consecutive layers of one kind and width.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StageSpec {
    pub kind: StageKind,
    pub channels: usize,
    pub repeat: usize,
    /// Declared input channels of the first layer; derived when absent.
    pub in_channels: Option<usize>,
}

impl StageSpec {
    pub fn conv3(channels: usize, repeat: usize) -> Self {
        StageSpec {
            kind: StageKind::Conv3x3,
            channels,
            repeat,
            in_channels: None,
        }
    }

    pub fn pool() -> Self {
        StageSpec {
            kind: StageKind::MaxPool2,
            channels: 0,
            repeat: 1,
            in_channels: None,
        }
    }
}

/// A base network: convolution stages, then FC1 (1×1 conv), global average
/// pooling and the Ip1 linear classifier.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetworkSpec {
    pub name: String,
    pub stages: Vec<StageSpec>,
    pub fc_channels: usize,
    pub num_classes: usize,
    /// Declared layer count of catalog networks.
    pub declared_layers: Option<usize>,
}

/// One convolution or pool of a flattened base network.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerDesc {
    /// `C<scale><index>` for convolutions, `P` for projections, `pool` for pools.
    pub name: String,
    pub kind: LayerKind,
    pub in_channels: Option<usize>,
    pub out_channels: usize,
    pub batchnorm: bool,
    /// Followed by a ReLU.
    pub activation: bool,
}

impl LayerDesc {
    fn pool() -> Self {
        LayerDesc {
            name: "pool".into(),
            kind: LayerKind::MaxPool2,
            in_channels: None,
            out_channels: 0,
            batchnorm: false,
            activation: false,
        }
    }

    pub fn is_conv(&self) -> bool {
        self.kind.is_conv()
    }
}

impl NetworkSpec {
    /// Convolutions plus FC1 and Ip1.
    pub fn layer_count(&self) -> usize {
        self.conv_count() + 2
    }

    pub fn conv_count(&self) -> usize {
        self.stages
            .iter()
            .filter(|s| s.kind != StageKind::MaxPool2)
            .map(|s| s.repeat)
            .sum()
    }

    /// The chain flattened to individual layers, with each convolution's name.
    pub fn chain(&self) -> Vec<(Option<LayerName>, LayerDesc)> {
        let mut out = Vec::new();
        let mut scale = 1u8;
        let mut index = 0u16;
        for stage in &self.stages {
            for r in 0..stage.repeat {
                match stage.kind {
                    StageKind::MaxPool2 => {
                        out.push((None, LayerDesc::pool()));
                        scale += 1;
                        index = 0;
                    }
                    kind => {
                        index += 1;
                        let name = LayerName::new(scale, index);
                        out.push((
                            Some(name),
                            LayerDesc {
                                name: name.to_string(),
                                kind: if kind == StageKind::Conv3x3 {
                                    LayerKind::Conv3x3
                                } else {
                                    LayerKind::Conv1x1
                                },
                                in_channels: if r == 0 { stage.in_channels } else { None },
                                out_channels: stage.channels,
                                batchnorm: true,
                                activation: true,
                            },
                        ));
                    }
                }
            }
        }
        out
    }

    /// First and last convolution names.
    pub fn conv_bounds(&self) -> Option<(LayerName, LayerName)> {
        let names: Vec<LayerName> = self.chain().into_iter().filter_map(|(n, _)| n).collect();
        Some((*names.first()?, *names.last()?))
    }

    /// Scale count (pools + 1).
    pub fn scales(&self) -> usize {
        1 + self
            .stages
            .iter()
            .filter(|s| s.kind == StageKind::MaxPool2)
            .map(|s| s.repeat)
            .sum::<usize>()
    }

    pub fn map_channels(&mut self, f: &impl Fn(usize, usize) -> usize) {
        let mut scale = 1;
        for stage in &mut self.stages {
            if stage.kind == StageKind::MaxPool2 {
                scale += stage.repeat;
                continue;
            }
            stage.channels = f(scale, stage.channels);
            stage.in_channels = stage.in_channels.map(|c| f(scale, c));
        }
        self.fc_channels = f(0, self.fc_channels);
    }
}

/// One block of a division.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum BlockRange {
    /// Inclusive range of convolutions.
    Layers { first: LayerName, last: LayerName },
    /// Identity connection; contributes its input unchanged.
    Identity,
    /// Linear 1×1 projection (no batch norm, no ReLU).
    Projection { out_channels: usize },
}

impl BlockRange {
    pub fn range(first: LayerName, last: LayerName) -> Self {
        BlockRange::Layers { first, last }
    }
}

/// Partition of a base network into blocks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockDivision {
    pub name: String,
    pub network: String,
    pub blocks: Vec<BlockRange>,
}

impl BlockDivision {
    /// Whether block `b` begins right after a pool and so carries it.
    pub fn carries_pool(&self, network: &NetworkSpec, b: usize) -> Option<bool> {
        match self.blocks.get(b)? {
            BlockRange::Layers { first, .. } => {
                let chain = network.chain();
                let pos = chain.iter().position(|(n, _)| n.as_ref() == Some(first))?;
                Some(pos > 0 && chain[pos - 1].1.kind == LayerKind::MaxPool2)
            }
            _ => None,
        }
    }
}

/// A block with its layers spelled out.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ResolvedBlock {
    /// `Some(true)` if the block starts right after a pool of its network.
    /// Identity and projection blocks follow the other members (`None`).
    pub pool_before: Option<bool>,
    pub layers: Vec<LayerDesc>,
    /// Position of the block in its network's flattened chain.
    pub span: Option<(usize, usize)>,
}

impl ResolvedBlock {
    /// Convolution count, the block's path length.
    pub fn size(&self) -> usize {
        self.layers.iter().filter(|l| l.is_conv()).count()
    }

    pub fn is_identity(&self) -> bool {
        self.layers.is_empty()
    }
}

/// One base network of a fused net, with its blocks resolved.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MemberSpec {
    pub name: String,
    pub network: Option<NetworkSpec>,
    pub blocks: Vec<BlockRange>,
    pub resolved: Vec<ResolvedBlock>,
}

impl MemberSpec {
    /// Expand every block range into explicit layers.
    pub fn resolve(
        name: impl Into<String>,
        network: Option<NetworkSpec>,
        blocks: Vec<BlockRange>,
    ) -> Result<Self, String> {
        let name = name.into();
        let chain = network.as_ref().map(|n| n.chain()).unwrap_or_default();
        let find = |target: &LayerName| -> Result<usize, String> {
            if network.is_none() {
                return Err(format!(
                    "member {name}: block range {target} needs a network to refer to"
                ));
            }
            chain
                .iter()
                .position(|(n, _)| n.as_ref() == Some(target))
                .ok_or_else(|| format!("member {name}: network has no layer {target}"))
        };
        let mut resolved = Vec::with_capacity(blocks.len());
        for block in &blocks {
            resolved.push(match block {
                BlockRange::Layers { first, last } => {
                    let (a, b) = (find(first)?, find(last)?);
                    if b < a {
                        return Err(format!(
                            "member {name}: range {first}-{last} ends before it starts"
                        ));
                    }
                    ResolvedBlock {
                        pool_before: Some(a > 0 && chain[a - 1].1.kind == LayerKind::MaxPool2),
                        layers: chain[a..=b].iter().map(|(_, d)| d.clone()).collect(),
                        span: Some((a, b)),
                    }
                }
                BlockRange::Identity => ResolvedBlock {
                    pool_before: None,
                    layers: Vec::new(),
                    span: None,
                },
                BlockRange::Projection { out_channels } => ResolvedBlock {
                    pool_before: None,
                    layers: vec![LayerDesc {
                        name: "P".into(),
                        kind: LayerKind::Conv1x1,
                        in_channels: None,
                        out_channels: *out_channels,
                        batchnorm: false,
                        activation: false,
                    }],
                    span: None,
                },
            });
        }
        Ok(MemberSpec {
            name,
            network,
            blocks,
            resolved,
        })
    }

    /// Member from a catalog-style network and division.
    pub fn from_division(network: NetworkSpec, division: &BlockDivision) -> Result<Self, String> {
        MemberSpec::resolve(division.name.clone(), Some(network), division.blocks.clone())
    }

    pub fn block_count(&self) -> usize {
        self.resolved.len()
    }

    pub fn block_sizes(&self) -> Vec<usize> {
        self.resolved.iter().map(ResolvedBlock::size).collect()
    }
}

/// Where the final ReLU of each block sits relative to the fusion.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusePoint {
    /// Fuse the batch-normalized responses, then apply one ReLU.
    #[default]
    BeforeRelu,
    /// Apply each block's ReLU, then fuse.
    AfterRelu,
}

/// Channels and spatial extent of one input sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct InputShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Default for InputShape {
    fn default() -> Self {
        InputShape {
            channels: 3,
            height: 32,
            width: 32,
        }
    }
}

/// K members aligned into B fusion stages plus a shared classifier head.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FusedNetSpec {
    pub name: String,
    pub members: Vec<MemberSpec>,
    pub fusion: FusionKind,
    pub fuse_point: FusePoint,
    pub num_classes: usize,
    pub fc_channels: usize,
    pub input: InputShape,
}

impl FusedNetSpec {
    pub fn new(name: impl Into<String>, members: Vec<MemberSpec>, num_classes: usize) -> Self {
        FusedNetSpec {
            name: name.into(),
            members,
            fusion: FusionKind::Sum,
            fuse_point: FusePoint::BeforeRelu,
            num_classes,
            fc_channels: 100,
            input: InputShape::default(),
        }
    }

    /// B, taken from the first member.
    pub fn block_count(&self) -> usize {
        self.members.first().map_or(0, MemberSpec::block_count)
    }

    pub fn member_count(&self) -> usize {
        self.members.len()
    }

    /// `|G^k_b|` as a K×B matrix.
    pub fn block_sizes(&self) -> Vec<Vec<usize>> {
        self.members.iter().map(MemberSpec::block_sizes).collect()
    }

    /// Set the class count of the fused net and of every member network.
    pub fn with_classes(mut self, classes: usize) -> Self {
        self.num_classes = classes;
        for m in &mut self.members {
            if let Some(net) = &mut m.network {
                net.num_classes = classes;
            }
        }
        self
    }

    pub fn with_fusion(mut self, fusion: FusionKind) -> Self {
        self.fusion = fusion;
        self
    }

    pub fn with_fuse_point(mut self, fuse_point: FusePoint) -> Self {
        self.fuse_point = fuse_point;
        self
    }

    pub fn with_input(mut self, height: usize, width: usize) -> Self {
        self.input.height = height;
        self.input.width = width;
        self
    }

    /// Only member `k`, as a plain (K = 1) spec.
    pub fn single_member(&self, k: usize) -> Option<Self> {
        let member = self.members.get(k)?.clone();
        Some(FusedNetSpec {
            name: member.name.clone(),
            members: vec![member],
            ..self.clone()
        })
    }

    /// Rewrite every convolution width with `f(scale, channels)`.
    ///
    /// Scale 0 denotes FC1. Projection blocks take the scale of the first
    /// network-backed block at the same stage.
    pub fn map_channels(&self, f: impl Fn(usize, usize) -> usize) -> Result<Self, String> {
        let mut stage_scale = vec![1usize; self.block_count()];
        if let Some(m) = self.members.iter().find(|m| m.network.is_some()) {
            let net = m.network.as_ref().expect("checked");
            let chain = net.chain();
            for (b, block) in m.resolved.iter().enumerate() {
                if let Some((_, last)) = block.span {
                    if let Some(name) = chain[last].0 {
                        stage_scale[b] = name.scale as usize;
                    }
                }
            }
        }
        let mut members = Vec::with_capacity(self.members.len());
        for m in &self.members {
            let network = m.network.clone().map(|mut n| {
                n.map_channels(&f);
                n
            });
            let blocks = m
                .blocks
                .iter()
                .enumerate()
                .map(|(b, block)| match block {
                    BlockRange::Projection { out_channels } => BlockRange::Projection {
                        out_channels: f(stage_scale.get(b).copied().unwrap_or(1), *out_channels),
                    },
                    other => other.clone(),
                })
                .collect();
            members.push(MemberSpec::resolve(m.name.clone(), network, blocks)?);
        }
        Ok(FusedNetSpec {
            members,
            fc_channels: f(0, self.fc_channels),
            ..self.clone()
        })
    }

    /// Multiply every width by `factor` (rounded, at least 1).
    pub fn scale_width(&self, factor: f64) -> Result<Self, String> {
        if !(factor > 0.0 && factor.is_finite()) {
            return Err(format!("width scale must be positive, got {factor}"));
        }
        self.map_channels(|_, c| ((c as f64 * factor).round() as usize).max(1))
    }

    /// Set convolution widths per scale (`widths[0]` for C1., ...) and FC1.
    pub fn with_widths(&self, widths: &[usize], fc_channels: usize) -> Result<Self, String> {
        self.map_channels(|scale, c| match scale {
            0 => fc_channels,
            s => widths.get(s - 1).copied().unwrap_or(c),
        })
    }

    /// The same members with all their blocks merged into a single stage,
    /// i.e. shallow fusion expressed as deep fusion with B = 1.
    pub fn collapsed(&self) -> Result<Self, String> {
        let mut members = Vec::with_capacity(self.members.len());
        for m in &self.members {
            let net = m
                .network
                .clone()
                .ok_or_else(|| format!("member {}: cannot collapse without a network", m.name))?;
            let (first, last) = net
                .conv_bounds()
                .ok_or_else(|| format!("member {}: network has no convolutions", m.name))?;
            members.push(MemberSpec::resolve(
                m.name.clone(),
                Some(net),
                vec![BlockRange::range(first, last)],
            )?);
        }
        Ok(FusedNetSpec {
            name: format!("{}-B1", self.name),
            members,
            ..self.clone()
        })
    }

    /// Equality of everything that determines the built network; names are ignored.
    pub fn structurally_eq(&self, other: &FusedNetSpec) -> bool {
        self.fusion == other.fusion
            && self.fuse_point == other.fuse_point
            && self.num_classes == other.num_classes
            && self.fc_channels == other.fc_channels
            && self.input == other.input
            && self.members.len() == other.members.len()
            && self
                .members
                .iter()
                .zip(&other.members)
                .all(|(a, b)| a.resolved == b.resolved)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layer_names_round_trip_multi_digit_indices() {
        for s in ["C11", "C116", "C311", "C29"] {
            assert_eq!(s.parse::<LayerName>().unwrap().to_string(), s);
        }
        assert_eq!("C116".parse::<LayerName>().unwrap(), LayerName::new(1, 16));
        for bad in ["C1", "X11", "C01", "C", "C1x"] {
            assert!(bad.parse::<LayerName>().is_err(), "{bad}");
        }
    }

    #[test]
    fn ranges_across_pools_include_the_pool() {
        let net = builtin_network("N3").unwrap();
        let m = MemberSpec::resolve(
            "whole",
            Some(net),
            vec![BlockRange::range(LayerName::new(1, 1), LayerName::new(3, 1))],
        )
        .unwrap();
        let kinds: Vec<LayerKind> = m.resolved[0].layers.iter().map(|l| l.kind).collect();
        assert_eq!(
            kinds,
            [
                LayerKind::Conv3x3,
                LayerKind::MaxPool2,
                LayerKind::Conv3x3,
                LayerKind::MaxPool2,
                LayerKind::Conv3x3
            ]
        );
        assert_eq!(m.resolved[0].size(), 3);
    }

    #[test]
    fn unknown_layer_is_rejected() {
        let net = builtin_network("N3").unwrap();
        let err = MemberSpec::resolve(
            "m",
            Some(net),
            vec![BlockRange::range(LayerName::new(1, 1), LayerName::new(1, 4))],
        )
        .unwrap_err();
        assert!(err.contains("C14"), "{err}");
    }

    #[test]
    fn width_scaling_keeps_structure() {
        let spec = builtin_spec("N13N33").unwrap();
        let small = spec.scale_width(0.25).unwrap();
        assert_eq!(small.block_sizes(), spec.block_sizes());
        let net = small.members[0].network.as_ref().unwrap();
        let widths: Vec<usize> = net.stages.iter().map(|s| s.channels).collect();
        assert_eq!(widths, [8, 0, 20, 0, 32]);
        assert_eq!(small.fc_channels, 25);
        assert!(validate(&small).is_empty());
    }
}
