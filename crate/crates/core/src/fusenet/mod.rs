//! Executable fused networks.
//!
//! A [`FusedNet`] owns every layer of its K members in one arena; a member
//! chain is a list of B [`Block`]s, each an ordered list of arena layers.
//! Forward passes record onto a tape so that one reverse sweep yields all
//! parameter gradients. Between fusion stages the fused value is fed to every
//! member block, which makes the backward pass through a stage the sum of the
//! member blocks' vector-Jacobian products.

mod forward;
mod tape;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::netspec::{
    channel_plan, resnet_equivalent_spec, validate, BlockRange, ChannelPlan, FusedNetSpec,
    NetworkSpec,
};
use crate::tensor::{LayerGrads, LayerKind, LayerParams, Scalar, Tensor};
use crate::train::he_init;

pub use forward::{decision_joint_loss, decision_probabilities, Outputs, Topology};
use tape::Tape;

/// Index of a layer in the arena of a [`FusedNet`].
pub type LayerId = usize;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum BlockOp {
    Param(LayerId),
    Relu,
    Pool,
}

/// G^k_b: the layers one member applies at one fusion stage.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Block {
    /// Member whose division the block came from.
    pub owner: usize,
    pub stage: usize,
    /// Division name of the owner.
    pub division: String,
    ops: Vec<BlockOp>,
    /// Whether the block ends in a ReLU. The ReLU is not part of `ops`; the
    /// fusion stage places it before or after fusing.
    trailing_relu: bool,
}

impl Block {
    /// |G^k_b|: convolution count (0 for identity blocks).
    pub fn size(&self, layers: &[LayerParams<impl Scalar>]) -> usize {
        self.layer_ids()
            .filter(|&id| layers[id].kind.is_conv())
            .count()
    }

    pub fn layer_ids(&self) -> impl Iterator<Item = LayerId> + '_ {
        self.ops.iter().filter_map(|op| match op {
            BlockOp::Param(id) => Some(*id),
            _ => None,
        })
    }

    pub fn is_identity(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn ends_with_relu(&self) -> bool {
        self.trailing_relu
    }
}

/// FC1 (1×1 conv, batch norm, ReLU), global average pooling, then Ip1.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Head {
    pub fc: LayerId,
    pub fc_bn: LayerId,
    pub ip: LayerId,
}

/// Optional heads beyond the shared classifier.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct BuildOptions {
    /// One average-pool + linear classifier per fusion stage.
    pub aux_heads: bool,
    /// A private head per member, for decision fusion.
    pub member_heads: bool,
}

/// A fused net with all its parameters and the state of the last forward pass.
#[derive(Clone, Debug)]
pub struct FusedNet<T> {
    spec: FusedNetSpec,
    plan: ChannelPlan,
    options: BuildOptions,
    layers: Vec<LayerParams<T>>,
    grads: Vec<LayerGrads<T>>,
    names: Vec<String>,
    /// `chains[k][b]`: block sitting in member chain k at stage b.
    chains: Vec<Vec<Block>>,
    head: Head,
    member_heads: Vec<Head>,
    aux_heads: Vec<LayerId>,
    tape: Option<Tape<T>>,
}

struct Arena<T> {
    layers: Vec<LayerParams<T>>,
    names: Vec<String>,
}

impl<T: Scalar> Arena<T> {
    fn add(&mut self, name: String, p: LayerParams<T>) -> LayerId {
        self.layers.push(p);
        self.names.push(name);
        self.layers.len() - 1
    }

    fn head(&mut self, prefix: &str, in_channels: usize, fc: usize, classes: usize) -> Head {
        Head {
            fc: self.add(format!("{prefix}fc1.conv"), LayerParams::conv1x1(in_channels, fc)),
            fc_bn: self.add(format!("{prefix}fc1.bn"), LayerParams::batchnorm(fc)),
            ip: self.add(format!("{prefix}ip1"), LayerParams::linear(fc, classes)),
        }
    }
}

impl<T: Scalar> FusedNet<T> {
    /// Build with the shared head only, He-initialized from `seed`.
    pub fn build(spec: &FusedNetSpec, seed: u64) -> Result<Self> {
        Self::build_with(spec, BuildOptions::default(), seed)
    }

    pub fn build_with(spec: &FusedNetSpec, options: BuildOptions, seed: u64) -> Result<Self> {
        let plan = channel_plan(spec).map_err(Error::Validation)?;
        let mut arena = Arena {
            layers: Vec::new(),
            names: Vec::new(),
        };
        let mut chains = Vec::with_capacity(spec.members.len());
        for (k, member) in spec.members.iter().enumerate() {
            let mut chain = Vec::with_capacity(member.block_count());
            for (b, resolved) in member.resolved.iter().enumerate() {
                let mut convs = plan.conv_channels[k][b].iter();
                let mut ops = Vec::new();
                let mut trailing = false;
                for desc in &resolved.layers {
                    trailing = false;
                    let prefix = format!("m{k}/b{}/{}", b + 1, desc.name);
                    match desc.kind {
                        LayerKind::MaxPool2 => ops.push(BlockOp::Pool),
                        LayerKind::Conv3x3 | LayerKind::Conv1x1 => {
                            let &(cin, cout) = convs.next().expect("plan lists every convolution");
                            let p = if desc.kind == LayerKind::Conv3x3 {
                                LayerParams::conv3x3(cin, cout)
                            } else {
                                LayerParams::conv1x1(cin, cout)
                            };
                            ops.push(BlockOp::Param(arena.add(format!("{prefix}.conv"), p)));
                            if desc.batchnorm {
                                ops.push(BlockOp::Param(
                                    arena.add(format!("{prefix}.bn"), LayerParams::batchnorm(cout)),
                                ));
                            }
                            if desc.activation {
                                ops.push(BlockOp::Relu);
                                trailing = true;
                            }
                        }
                        other => {
                            return Err(Error::InvalidArgument(format!(
                                "member {k} block {b}: {other:?} cannot appear inside a block"
                            )))
                        }
                    }
                }
                if trailing {
                    ops.pop();
                }
                chain.push(Block {
                    owner: k,
                    stage: b,
                    division: member.name.clone(),
                    ops,
                    trailing_relu: trailing,
                });
            }
            chains.push(chain);
        }
        let head = arena.head("head/", plan.head_in(), spec.fc_channels, spec.num_classes);
        let member_heads = if options.member_heads {
            (0..spec.members.len())
                .map(|k| {
                    let c = *plan.member_out[k].last().expect("validated specs have blocks");
                    arena.head(&format!("m{k}/head/"), c, spec.fc_channels, spec.num_classes)
                })
                .collect()
        } else {
            Vec::new()
        };
        let aux_heads = if options.aux_heads {
            plan.stage_out
                .iter()
                .enumerate()
                .map(|(b, &c)| {
                    arena.add(format!("aux/b{}/ip", b + 1), LayerParams::linear(c, spec.num_classes))
                })
                .collect()
        } else {
            Vec::new()
        };

        let mut layers = arena.layers;
        he_init(&mut layers, seed);
        let grads = layers.iter().map(LayerGrads::zeros_like).collect();
        Ok(FusedNet {
            spec: spec.clone(),
            plan,
            options,
            layers,
            grads,
            names: arena.names,
            chains,
            head,
            member_heads,
            aux_heads,
            tape: None,
        })
    }

    pub fn spec(&self) -> &FusedNetSpec {
        &self.spec
    }

    pub fn plan(&self) -> &ChannelPlan {
        &self.plan
    }

    pub fn options(&self) -> BuildOptions {
        self.options
    }

    pub fn member_count(&self) -> usize {
        self.chains.len()
    }

    pub fn block_count(&self) -> usize {
        self.chains.first().map_or(0, Vec::len)
    }

    /// `chains()[k][b]` is the block in member chain k at stage b.
    pub fn chains(&self) -> &[Vec<Block>] {
        &self.chains
    }

    /// |G^k_b| for the current chain assignment.
    pub fn block_sizes(&self) -> Vec<Vec<usize>> {
        self.chains
            .iter()
            .map(|c| c.iter().map(|b| b.size(&self.layers)).collect())
            .collect()
    }

    pub fn head(&self) -> Head {
        self.head
    }

    pub fn member_heads(&self) -> &[Head] {
        &self.member_heads
    }

    pub fn aux_heads(&self) -> &[LayerId] {
        &self.aux_heads
    }

    pub fn layers(&self) -> &[LayerParams<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [LayerParams<T>] {
        &mut self.layers
    }

    pub fn grads(&self) -> &[LayerGrads<T>] {
        &self.grads
    }

    /// Parameters and their gradients side by side.
    pub fn layers_and_grads_mut(&mut self) -> (&mut [LayerParams<T>], &[LayerGrads<T>]) {
        (&mut self.layers, &self.grads)
    }

    pub fn layer_name(&self, id: LayerId) -> &str {
        &self.names[id]
    }

    pub fn layer_names(&self) -> &[String] {
        &self.names
    }

    pub fn layer_id(&self, name: &str) -> Option<LayerId> {
        self.names.iter().position(|n| n == name)
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(LayerGrads::fill_zero);
    }

    /// Trainable values: weights, biases, γ and β (no running statistics).
    pub fn param_count(&self) -> usize {
        self.layers.iter().map(LayerParams::trainable_count).sum()
    }

    /// Trainable values of the shared head.
    pub fn head_param_count(&self) -> usize {
        [self.head.fc, self.head.fc_bn, self.head.ip]
            .iter()
            .map(|&id| self.layers[id].trainable_count())
            .sum()
    }

    /// Trainable values of G^k_b as currently placed.
    pub fn block_param_count(&self, k: usize, b: usize) -> usize {
        self.chains[k][b]
            .layer_ids()
            .map(|id| self.layers[id].trainable_count())
            .sum()
    }

    /// Swap the stage-`b` blocks of member chains `i` and `j` (0-based).
    pub fn swap_blocks(&mut self, b: usize, i: usize, j: usize) -> Result<()> {
        let (k, stages) = (self.member_count(), self.block_count());
        if b >= stages || i >= k || j >= k {
            return Err(Error::InvalidArgument(format!(
                "exchange of stage {b} between members {i} and {j} is out of range (B = {stages}, K = {k})"
            )));
        }
        if i == j {
            return Err(Error::InvalidArgument(format!(
                "exchange needs two distinct members, got {i} twice"
            )));
        }
        let block_i = self.chains[i][b].clone();
        self.chains[i][b] = std::mem::replace(&mut self.chains[j][b], block_i);
        self.tape = None;
        Ok(())
    }

    /// Copy every parameter and running statistic from a net with the same
    /// layer layout.
    pub fn copy_params_from(&mut self, other: &FusedNet<T>) -> Result<()> {
        if self.layers.len() != other.layers.len() {
            return Err(Error::Shape(format!(
                "cannot copy {} layers into {}",
                other.layers.len(),
                self.layers.len()
            )));
        }
        for (id, (dst, src)) in self.layers.iter_mut().zip(&other.layers).enumerate() {
            let same = dst.kind == src.kind
                && dst.weights.len() == src.weights.len()
                && dst.bias.len() == src.bias.len()
                && dst.bn_gamma.len() == src.bn_gamma.len();
            if !same {
                return Err(Error::Shape(format!(
                    "layer {id} ({}) differs from {}",
                    self.names[id], other.names[id]
                )));
            }
            *dst = src.clone();
        }
        Ok(())
    }

    /// x̄_1 … x̄_B retained by the last deep forward pass.
    pub fn retained_stage_outputs(&self) -> Vec<&Tensor<T>> {
        self.tape
            .as_ref()
            .map(|t| t.stages.iter().map(|&id| t.value(id)).collect())
            .unwrap_or_default()
    }

    /// ReLU signs and pool/max winners of the last forward pass. Two passes
    /// with equal patterns lie on the same linear piece of the network.
    pub fn activation_pattern(&self) -> Option<Vec<u8>> {
        self.tape.as_ref().map(Tape::pattern)
    }

    pub fn has_retained_state(&self) -> bool {
        self.tape.is_some()
    }

    /// Release the tape of the last forward pass.
    pub fn clear_retained(&mut self) {
        self.tape = None;
    }
}

/// Residual counterpart of `plain`: the plain chain split at `shortcuts`
/// fused with identity blocks, or 1×1 linear projections where a block changes
/// the channel count.
pub fn make_resnet_equivalent(
    plain: &NetworkSpec,
    shortcuts: &[BlockRange],
) -> Result<FusedNetSpec> {
    let spec = resnet_equivalent_spec(plain, shortcuts).map_err(|message| Error::Parse {
        line: None,
        column: None,
        field: "blocks".into(),
        message,
    })?;
    let diags = validate(&spec);
    if diags.is_empty() {
        Ok(spec)
    } else {
        Err(Error::Validation(diags))
    }
}

#[cfg(test)]
mod tests;
