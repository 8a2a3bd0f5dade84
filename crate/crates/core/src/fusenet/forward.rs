use super::tape::{Tape, ValueId};
use super::{Block, BlockOp, FusedNet, Head};
use crate::error::{Error, Result};
use crate::netspec::FusePoint;
use crate::tensor::{
    elementwise_fuse, softmax, softmax_xent, FusionKind, LayerParams, Mode, Scalar, Tensor,
};

/// How the member chains are wired together for one forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Topology {
    /// Fuse at every stage; one shared head.
    Deep,
    /// Deep fusion plus one auxiliary classifier per fusion stage.
    DeeplySupervised,
    /// Run each member to completion and fuse once before the shared head.
    Shallow,
    /// Member 0 is the outer chain, member 1 the inner chain that receives
    /// the outer representation at every stage.
    Unidirectional,
    /// Every member runs alone through its own head.
    Decision,
    /// Member chain k alone through the shared head.
    Member(usize),
}

/// Scores of a forward pass: one tensor per head.
#[derive(Clone, Debug, PartialEq)]
pub struct Outputs<T> {
    /// The shared head's scores, or one per member for decision fusion.
    pub scores: Vec<Tensor<T>>,
    /// Per-stage auxiliary scores (deeply supervised passes only).
    pub aux: Vec<Tensor<T>>,
}

impl<T> Outputs<T> {
    pub fn main(&self) -> &Tensor<T> {
        &self.scores[0]
    }
}

fn in_context(e: Error, k: usize, b: usize) -> Error {
    match e {
        Error::Shape(m) => Error::Shape(format!("member {k}, stage {}: {m}", b + 1)),
        other => other,
    }
}

struct Pass<'a, T> {
    tape: Tape<T>,
    layers: &'a mut [LayerParams<T>],
    mode: Mode,
    fusion: FusionKind,
    fuse_point: FusePoint,
}

impl<T: Scalar> Pass<'_, T> {
    fn block(&mut self, block: &Block, input: ValueId, k: usize) -> Result<ValueId> {
        let mut x = input;
        for op in &block.ops {
            x = match *op {
                BlockOp::Param(id) => self.tape.param(self.layers, id, x, self.mode),
                BlockOp::Relu => Ok(self.tape.relu(x)),
                BlockOp::Pool => self.tape.pool(x),
            }
            .map_err(|e| in_context(e, k, block.stage))?;
        }
        Ok(x)
    }

    fn act(&mut self, x: ValueId, on: bool) -> ValueId {
        if on {
            self.tape.relu(x)
        } else {
            x
        }
    }

    /// Combine block outputs, placing the deferred ReLUs per the fuse point.
    fn fuse(&mut self, outs: Vec<ValueId>, relus: &[bool], b: usize) -> Result<ValueId> {
        match self.fuse_point {
            FusePoint::BeforeRelu => {
                let fused = self.tape.fuse(self.fusion, outs, b + 1)?;
                Ok(self.act(fused, relus.iter().any(|&r| r)))
            }
            FusePoint::AfterRelu => {
                let acts = outs
                    .into_iter()
                    .zip(relus)
                    .map(|(v, &r)| self.act(v, r))
                    .collect();
                self.tape.fuse(self.fusion, acts, b + 1)
            }
        }
    }

    /// One member chain from the input; the final ReLU is skipped when `defer`.
    fn chain(&mut self, chain: &[Block], pools: &[bool], k: usize, defer: bool) -> Result<ValueId> {
        let mut x = Tape::<T>::INPUT;
        for (b, block) in chain.iter().enumerate() {
            if pools[b] {
                x = self.tape.pool(x).map_err(|e| in_context(e, k, b))?;
            }
            x = self.block(block, x, k)?;
            let last = b + 1 == chain.len();
            x = self.act(x, block.trailing_relu && !(last && defer));
        }
        Ok(x)
    }

    fn head(&mut self, head: Head, input: ValueId) -> Result<ValueId> {
        let wrap = |e: Error| match e {
            Error::Shape(m) => Error::Shape(format!("classifier head: {m}")),
            other => other,
        };
        let x = self.tape.param(self.layers, head.fc, input, self.mode).map_err(wrap)?;
        let x = self.tape.param(self.layers, head.fc_bn, x, self.mode).map_err(wrap)?;
        let x = self.tape.relu(x);
        let x = self.tape.avgpool(x);
        self.tape.param(self.layers, head.ip, x, self.mode).map_err(wrap)
    }
}

impl<T: Scalar> FusedNet<T> {
    fn check_input(&self, x0: &Tensor<T>) -> Result<()> {
        let s = x0.shape();
        let i = self.spec.input;
        if (s.c, s.h, s.w) != (i.channels, i.height, i.width) {
            return Err(Error::Shape(format!(
                "input has shape {s}, the net expects Nx{}x{}x{}",
                i.channels, i.height, i.width
            )));
        }
        Ok(())
    }

    /// Run one forward pass, retaining everything the backward pass needs.
    pub fn forward(&mut self, x0: &Tensor<T>, topology: Topology, mode: Mode) -> Result<Outputs<T>> {
        self.check_input(x0)?;
        self.tape = None;
        let (k_count, b_count) = (self.member_count(), self.block_count());
        match topology {
            Topology::Unidirectional if k_count != 2 => {
                return Err(Error::InvalidArgument(format!(
                    "unidirectional fusion needs exactly 2 members, the spec has {k_count}"
                )))
            }
            Topology::Decision if self.member_heads.is_empty() => {
                return Err(Error::InvalidArgument(
                    "decision fusion needs a net built with member heads".into(),
                ))
            }
            Topology::DeeplySupervised if self.aux_heads.is_empty() => {
                return Err(Error::InvalidArgument(
                    "deep supervision needs a net built with auxiliary heads".into(),
                ))
            }
            Topology::Member(k) if k >= k_count => {
                return Err(Error::InvalidArgument(format!(
                    "member {k} out of range (K = {k_count})"
                )))
            }
            _ => {}
        }
        let chains = &self.chains;
        let pools = &self.plan.stage_pool;
        let mut pass = Pass {
            tape: Tape::new(x0),
            layers: &mut self.layers,
            mode,
            fusion: self.spec.fusion,
            fuse_point: self.spec.fuse_point,
        };
        match topology {
            Topology::Deep | Topology::DeeplySupervised => {
                let mut x = Tape::<T>::INPUT;
                for b in 0..b_count {
                    if pools[b] {
                        x = pass.tape.pool(x).map_err(|e| in_context(e, 0, b))?;
                    }
                    let mut outs = Vec::with_capacity(k_count);
                    let mut relus = Vec::with_capacity(k_count);
                    for (k, chain) in chains.iter().enumerate() {
                        outs.push(pass.block(&chain[b], x, k)?);
                        relus.push(chain[b].trailing_relu);
                    }
                    x = pass.fuse(outs, &relus, b)?;
                    pass.tape.stages.push(x);
                }
                if topology == Topology::DeeplySupervised {
                    for (b, &id) in self.aux_heads.iter().enumerate() {
                        let pooled = pass.tape.avgpool(pass.tape.stages[b]);
                        let s = pass.tape.param(pass.layers, id, pooled, mode)?;
                        pass.tape.aux.push(s);
                    }
                }
                let s = pass.head(self.head, x)?;
                pass.tape.scores.push(s);
            }
            Topology::Shallow => {
                let mut outs = Vec::with_capacity(k_count);
                let mut relus = Vec::with_capacity(k_count);
                for (k, chain) in chains.iter().enumerate() {
                    outs.push(pass.chain(chain, pools, k, true)?);
                    relus.push(chain.last().is_some_and(|b| b.trailing_relu));
                }
                let fused = pass.fuse(outs, &relus, b_count.saturating_sub(1))?;
                pass.tape.stages.push(fused);
                let s = pass.head(self.head, fused)?;
                pass.tape.scores.push(s);
            }
            Topology::Unidirectional => {
                let (outer, inner) = (&chains[0], &chains[1]);
                let (mut xo, mut xi) = (Tape::<T>::INPUT, Tape::<T>::INPUT);
                for b in 0..b_count {
                    if pools[b] {
                        let shared = xo == xi;
                        xo = pass.tape.pool(xo).map_err(|e| in_context(e, 0, b))?;
                        xi = if shared {
                            xo
                        } else {
                            pass.tape.pool(xi).map_err(|e| in_context(e, 1, b))?
                        };
                    }
                    let po = pass.block(&outer[b], xo, 0)?;
                    let pi = pass.block(&inner[b], xi, 1)?;
                    let (ro, ri) = (outer[b].trailing_relu, inner[b].trailing_relu);
                    match pass.fuse_point {
                        FusePoint::BeforeRelu => {
                            let fused = pass.tape.fuse(pass.fusion, vec![po, pi], b + 1)?;
                            xi = pass.act(fused, ro || ri);
                            xo = pass.act(po, ro);
                        }
                        FusePoint::AfterRelu => {
                            xo = pass.act(po, ro);
                            let ai = pass.act(pi, ri);
                            xi = pass.tape.fuse(pass.fusion, vec![xo, ai], b + 1)?;
                        }
                    }
                    pass.tape.stages.push(xi);
                }
                let s = pass.head(self.head, xi)?;
                pass.tape.scores.push(s);
            }
            Topology::Decision => {
                for (k, chain) in chains.iter().enumerate() {
                    let x = pass.chain(chain, pools, k, false)?;
                    let s = pass.head(self.member_heads[k], x)?;
                    pass.tape.scores.push(s);
                }
            }
            Topology::Member(k) => {
                let x = pass.chain(&chains[k], pools, k, false)?;
                let s = pass.head(self.head, x)?;
                pass.tape.scores.push(s);
            }
        }
        let tape = pass.tape;
        let out = Outputs {
            scores: tape.scores.iter().map(|&id| tape.value(id).clone()).collect(),
            aux: tape.aux.iter().map(|&id| tape.value(id).clone()).collect(),
        };
        self.tape = Some(tape);
        Ok(out)
    }

    pub fn forward_deep(&mut self, x0: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        Ok(self.forward(x0, Topology::Deep, mode)?.scores.remove(0))
    }

    pub fn forward_shallow(&mut self, x0: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        Ok(self.forward(x0, Topology::Shallow, mode)?.scores.remove(0))
    }

    pub fn forward_unidirectional(&mut self, x0: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        Ok(self.forward(x0, Topology::Unidirectional, mode)?.scores.remove(0))
    }

    /// Per-member scores of decision fusion.
    pub fn forward_decision(&mut self, x0: &Tensor<T>, mode: Mode) -> Result<Vec<Tensor<T>>> {
        Ok(self.forward(x0, Topology::Decision, mode)?.scores)
    }

    /// Back-propagate score gradients (one per head of the last forward pass,
    /// plus optional auxiliary-score gradients). Parameter gradients are added
    /// to [`FusedNet::grads`]; the input gradient is returned.
    pub fn backward(&mut self, d_scores: &[Tensor<T>], d_aux: &[Tensor<T>]) -> Result<Tensor<T>> {
        let tape = self.tape.as_ref().ok_or_else(|| {
            Error::BackwardBeforeForward("no forward pass has been recorded".into())
        })?;
        if d_scores.len() != tape.scores.len() {
            return Err(Error::InvalidArgument(format!(
                "{} score gradients for {} heads",
                d_scores.len(),
                tape.scores.len()
            )));
        }
        if !d_aux.is_empty() && d_aux.len() != tape.aux.len() {
            return Err(Error::InvalidArgument(format!(
                "{} auxiliary gradients for {} auxiliary heads",
                d_aux.len(),
                tape.aux.len()
            )));
        }
        let seeds = tape
            .scores
            .iter()
            .copied()
            .zip(d_scores.iter().cloned())
            .chain(tape.aux.iter().copied().zip(d_aux.iter().cloned()))
            .collect();
        tape.backward(&self.layers, &mut self.grads, seeds)
    }

    pub fn backward_deep(&mut self, d_scores: &Tensor<T>) -> Result<Tensor<T>> {
        self.backward(std::slice::from_ref(d_scores), &[])
    }
}

/// Mean of the members' softmax probabilities.
pub fn decision_probabilities<T: Scalar>(scores: &[Tensor<T>]) -> Result<Tensor<T>> {
    if scores.is_empty() {
        return Err(Error::InvalidArgument("decision fusion of zero score sets".into()));
    }
    let probs: Vec<Tensor<T>> = scores.iter().map(softmax).collect();
    let refs: Vec<&Tensor<T>> = probs.iter().collect();
    Ok(elementwise_fuse(FusionKind::Average, &refs, 0)?.0)
}

/// Mean of the members' cross-entropies and its gradient for each member.
pub fn decision_joint_loss<T: Scalar>(
    scores: &[Tensor<T>],
    labels: &[usize],
) -> Result<(T, Vec<Tensor<T>>)> {
    if scores.is_empty() {
        return Err(Error::InvalidArgument("decision fusion of zero score sets".into()));
    }
    let inv_k = T::one() / T::from_usize(scores.len());
    let mut total = T::zero();
    let mut grads = Vec::with_capacity(scores.len());
    for s in scores {
        let (loss, g) = softmax_xent(s, labels)?;
        total += loss;
        grads.push(g.scale(inv_k));
    }
    Ok((total * inv_k, grads))
}
