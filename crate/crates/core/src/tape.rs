//! Reverse-mode gradient tape with one node per public operation.
//!
//! Values are immutable once recorded. A forward pass appends nodes in
//! execution order, so inputs always precede their consumers and
//! [`Tape::backward`] can sweep the node list in reverse.

use std::collections::HashMap;
use std::fmt;

use crate::error::{Error, Result};
use crate::nn::activation::{activate, activate_backward, softmax_channels, softmax_channels_backward};
use crate::nn::adaptive::{adaptive_conv_apply, adaptive_conv_apply_backward, AdaptiveGeometry};
use crate::nn::conv::{conv2d, conv2d_backward, ConvSpec};
use crate::nn::deform::{deform_conv2d, deform_conv2d_backward, DeformSpec};
use crate::nn::norm::{batch_norm, batch_norm_backward, updated_running_stats, BatchNormCache, BN_EPS};
use crate::nn::pool::{adaptive_avg_pool, adaptive_avg_pool_backward, pool_channel, pool_channel_backward, PoolMode};
use crate::nn::unfold::{unfold_dilated, unfold_dilated_backward};
use crate::nn::upsample::{upsample, upsample_backward, UpsampleMode};
use crate::nn::Activation;
use crate::scalar::Scalar;
use crate::tensor::{BinaryOp, Broadcast, Dims, Tensor4};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ValueId(usize);

impl ValueId {
    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for ValueId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "v{}", self.0)
    }
}

/// Batch-norm behaviour for every node recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Mode {
    #[default]
    Train,
    Eval,
}

/// Backward rule for an operation defined outside this module.
pub trait CustomBackward<T>: Send + Sync {
    fn name(&self) -> &'static str;

    /// One gradient per input, shaped like that input.
    fn backward(&self, inputs: &[&Tensor4<T>], grad_out: &Tensor4<T>) -> Result<Vec<Tensor4<T>>>;
}

enum Op<T> {
    Binary { op: BinaryOp, bc: Broadcast },
    Scale(T),
    Concat,
    Slice { start: usize },
    Reshape,
    Sum,
    Conv { spec: ConvSpec },
    PoolChannel { mode: PoolMode, argmax: Vec<u32> },
    GlobalAvgPool,
    Upsample { mode: UpsampleMode },
    Unfold { kernel: usize, dilation: usize },
    BatchNorm { cache: BatchNormCache<T> },
    Activation { kind: Activation },
    Softmax,
    AdaptiveApply { geo: AdaptiveGeometry },
    Deform { spec: DeformSpec, cols: Tensor4<T> },
    Custom(Box<dyn CustomBackward<T>>),
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Binary { op: BinaryOp::Add, .. } => "add",
            Op::Binary { op: BinaryOp::Mul, .. } => "mul",
            Op::Scale(_) => "scale",
            Op::Concat => "concat_channels",
            Op::Slice { .. } => "slice_channels",
            Op::Reshape => "reshape",
            Op::Sum => "sum",
            Op::Conv { .. } => "conv2d",
            Op::PoolChannel { .. } => "pool_channel",
            Op::GlobalAvgPool => "adaptive_avg_pool",
            Op::Upsample { .. } => "upsample",
            Op::Unfold { .. } => "unfold_dilated",
            Op::BatchNorm { .. } => "batch_norm",
            Op::Activation { .. } => "activation",
            Op::Softmax => "softmax_channels",
            Op::AdaptiveApply { .. } => "adaptive_conv_apply",
            Op::Deform { .. } => "deform_conv2d",
            Op::Custom(c) => c.name(),
        }
    }
}

struct Node<T> {
    op: Op<T>,
    inputs: Vec<ValueId>,
    output: ValueId,
}

/// Gradients keyed by leaf.
#[derive(Clone, Debug, Default)]
pub struct Gradients<T> {
    map: HashMap<ValueId, Tensor4<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: ValueId) -> Result<&Tensor4<T>> {
        self.map.get(&id).ok_or(Error::UnknownId(id.0))
    }

    pub fn take(&mut self, id: ValueId) -> Result<Tensor4<T>> {
        self.map.remove(&id).ok_or(Error::UnknownId(id.0))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

pub struct Tape<T> {
    mode: Mode,
    values: Vec<Tensor4<T>>,
    requires_grad: Vec<bool>,
    leaves: Vec<ValueId>,
    nodes: Vec<Node<T>>,
    stat_updates: Vec<(ValueId, Tensor4<T>)>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new(Mode::Train)
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new(mode: Mode) -> Self {
        Tape {
            mode,
            values: Vec::new(),
            requires_grad: Vec::new(),
            leaves: Vec::new(),
            nodes: Vec::new(),
            stat_updates: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    fn push_value(&mut self, t: Tensor4<T>, requires_grad: bool) -> ValueId {
        let id = ValueId(self.values.len());
        self.values.push(t);
        self.requires_grad.push(requires_grad);
        id
    }

    /// A value that receives a gradient from [`Tape::backward`].
    pub fn leaf(&mut self, t: Tensor4<T>) -> ValueId {
        let id = self.push_value(t, true);
        self.leaves.push(id);
        id
    }

    /// A value treated as fixed data.
    pub fn constant(&mut self, t: Tensor4<T>) -> ValueId {
        self.push_value(t, false)
    }

    pub fn value(&self, id: ValueId) -> Result<&Tensor4<T>> {
        self.values.get(id.0).ok_or(Error::UnknownId(id.0))
    }

    pub fn dims(&self, id: ValueId) -> Result<Dims> {
        Ok(self.value(id)?.dims())
    }

    pub fn leaves(&self) -> &[ValueId] {
        &self.leaves
    }

    /// Running statistics produced by train-mode batch norms, keyed by the
    /// value holding the statistic they replace.
    pub fn stat_updates(&self) -> &[(ValueId, Tensor4<T>)] {
        &self.stat_updates
    }

    fn record(&mut self, op: Op<T>, inputs: Vec<ValueId>, out: Tensor4<T>) -> Result<ValueId> {
        out.ensure_finite(op.name())?;
        let rg = inputs.iter().any(|i| self.requires_grad[i.0]);
        let output = self.push_value(out, rg);
        self.nodes.push(Node { op, inputs, output });
        Ok(output)
    }

    fn check(&self, ids: &[ValueId]) -> Result<()> {
        match ids.iter().find(|i| i.0 >= self.values.len()) {
            Some(bad) => Err(Error::UnknownId(bad.0)),
            None => Ok(()),
        }
    }

    fn binary(&mut self, op: BinaryOp, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.check(&[a, b])?;
        let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
        let bc = Broadcast::resolve(ta.dims(), tb.dims())?;
        let out = Tensor4::elementwise(op, ta, tb)?;
        self.record(Op::Binary { op, bc }, vec![a, b], out)
    }

    /// `a + b`, with `b` optionally broadcast over channels or pixels.
    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.binary(BinaryOp::Add, a, b)
    }

    /// `a * b`, with `b` optionally broadcast over channels or pixels.
    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn scale(&mut self, x: ValueId, k: T) -> Result<ValueId> {
        self.check(&[x])?;
        let out = self.values[x.0].scale(k);
        self.record(Op::Scale(k), vec![x], out)
    }

    pub fn concat_channels(&mut self, parts: &[ValueId]) -> Result<ValueId> {
        self.check(parts)?;
        let refs: Vec<&Tensor4<T>> = parts.iter().map(|p| &self.values[p.0]).collect();
        let out = Tensor4::concat_channels(&refs)?;
        self.record(Op::Concat, parts.to_vec(), out)
    }

    pub fn slice_channels(&mut self, x: ValueId, start: usize, len: usize) -> Result<ValueId> {
        self.check(&[x])?;
        let out = self.values[x.0].slice_channels(start, len)?;
        self.record(Op::Slice { start }, vec![x], out)
    }

    pub fn reshape(&mut self, x: ValueId, dims: Dims) -> Result<ValueId> {
        self.check(&[x])?;
        let out = self.values[x.0].clone().reshape(dims)?;
        self.record(Op::Reshape, vec![x], out)
    }

    /// Sum of all elements as a `1x1x1x1` tensor.
    pub fn sum(&mut self, x: ValueId) -> Result<ValueId> {
        self.check(&[x])?;
        let out = Tensor4::scalar(self.values[x.0].sum());
        self.record(Op::Sum, vec![x], out)
    }

    pub fn conv2d(&mut self, x: ValueId, weight: ValueId, bias: Option<ValueId>, spec: &ConvSpec) -> Result<ValueId> {
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        self.check(&inputs)?;
        let out = conv2d(
            &self.values[x.0],
            &self.values[weight.0],
            bias.map(|b| &self.values[b.0]),
            spec,
        )?;
        self.record(Op::Conv { spec: *spec }, inputs, out)
    }

    pub fn pool_channel(&mut self, x: ValueId, mode: PoolMode) -> Result<ValueId> {
        self.check(&[x])?;
        let (out, argmax) = pool_channel(&self.values[x.0], mode)?;
        self.record(Op::PoolChannel { mode, argmax }, vec![x], out)
    }

    pub fn adaptive_avg_pool(&mut self, x: ValueId) -> Result<ValueId> {
        self.check(&[x])?;
        let out = adaptive_avg_pool(&self.values[x.0])?;
        self.record(Op::GlobalAvgPool, vec![x], out)
    }

    pub fn upsample(&mut self, x: ValueId, out_h: usize, out_w: usize, mode: UpsampleMode) -> Result<ValueId> {
        self.check(&[x])?;
        let out = upsample(&self.values[x.0], out_h, out_w, mode)?;
        self.record(Op::Upsample { mode }, vec![x], out)
    }

    pub fn unfold_dilated(&mut self, x: ValueId, kernel: usize, dilation: usize) -> Result<ValueId> {
        self.check(&[x])?;
        let out = unfold_dilated(&self.values[x.0], kernel, dilation)?;
        self.record(Op::Unfold { kernel, dilation }, vec![x], out)
    }

    /// Batch norm in the tape's [`Mode`]. In train mode the updated running
    /// statistics are queued in [`Tape::stat_updates`].
    pub fn batch_norm(
        &mut self,
        x: ValueId,
        gamma: ValueId,
        beta: ValueId,
        running_mean: ValueId,
        running_var: ValueId,
    ) -> Result<ValueId> {
        self.check(&[x, gamma, beta, running_mean, running_var])?;
        let train = self.mode == Mode::Train;
        let (rm, rv) = (&self.values[running_mean.0], &self.values[running_var.0]);
        let (out, cache) = batch_norm(
            &self.values[x.0],
            &self.values[gamma.0],
            &self.values[beta.0],
            rm,
            rv,
            train,
            BN_EPS,
        )?;
        if train {
            let (m, v) = updated_running_stats(rm, rv, &cache);
            self.stat_updates.push((running_mean, m));
            self.stat_updates.push((running_var, v));
        }
        self.record(Op::BatchNorm { cache }, vec![x, gamma, beta], out)
    }

    pub fn activation(&mut self, x: ValueId, kind: Activation) -> Result<ValueId> {
        self.check(&[x])?;
        let out = activate(&self.values[x.0], kind)?;
        self.record(Op::Activation { kind }, vec![x], out)
    }

    pub fn relu(&mut self, x: ValueId) -> Result<ValueId> {
        self.activation(x, Activation::Relu)
    }

    pub fn softmax_channels(&mut self, x: ValueId) -> Result<ValueId> {
        self.check(&[x])?;
        let out = softmax_channels(&self.values[x.0])?;
        self.record(Op::Softmax, vec![x], out)
    }

    pub fn adaptive_conv_apply(&mut self, x: ValueId, kernels: ValueId, geo: AdaptiveGeometry) -> Result<ValueId> {
        self.check(&[x, kernels])?;
        let out = adaptive_conv_apply(&self.values[x.0], &self.values[kernels.0], geo)?;
        self.record(Op::AdaptiveApply { geo }, vec![x, kernels], out)
    }

    pub fn deform_conv2d(
        &mut self,
        x: ValueId,
        offsets: ValueId,
        weight: ValueId,
        bias: Option<ValueId>,
        spec: &DeformSpec,
    ) -> Result<ValueId> {
        let mut inputs = vec![x, offsets, weight];
        inputs.extend(bias);
        self.check(&inputs)?;
        let (out, cols) = deform_conv2d(
            &self.values[x.0],
            &self.values[offsets.0],
            &self.values[weight.0],
            bias.map(|b| &self.values[b.0]),
            spec,
        )?;
        self.record(Op::Deform { spec: *spec, cols }, inputs, out)
    }

    /// Records an externally computed value together with its backward rule.
    pub fn custom(
        &mut self,
        inputs: &[ValueId],
        output: Tensor4<T>,
        rule: Box<dyn CustomBackward<T>>,
    ) -> Result<ValueId> {
        self.check(inputs)?;
        self.record(Op::Custom(rule), inputs.to_vec(), output)
    }

    /// Vector-Jacobian products of `output` seeded with `seed`, for every leaf.
    /// Leaves off the path to `output` get zero tensors.
    pub fn backward(&self, output: ValueId, seed: &Tensor4<T>) -> Result<Gradients<T>> {
        self.check(&[output])?;
        let od = self.values[output.0].dims();
        if seed.dims() != od {
            return Err(Error::shape(format!(
                "seed gradient {} does not match output {od}",
                seed.dims()
            )));
        }
        let mut grads: Vec<Option<Tensor4<T>>> = vec![None; self.values.len()];
        grads[output.0] = Some(seed.clone());
        for node in self.nodes[..self.nodes.partition_point(|n| n.output <= output)]
            .iter()
            .rev()
        {
            let Some(g) = grads[node.output.0].take() else {
                continue;
            };
            if !self.requires_grad[node.output.0] {
                continue;
            }
            let input_grads = self.node_backward(node, &g)?;
            for (&inp, gi) in node.inputs.iter().zip(input_grads) {
                let Some(gi) = gi else { continue };
                if !self.requires_grad[inp.0] {
                    continue;
                }
                match &mut grads[inp.0] {
                    Some(acc) => acc.add_assign(&gi),
                    slot => *slot = Some(gi),
                }
            }
        }
        let map = self
            .leaves
            .iter()
            .map(|&l| {
                let g = grads[l.0]
                    .take()
                    .unwrap_or_else(|| Tensor4::zeros(self.values[l.0].dims()));
                (l, g)
            })
            .collect();
        Ok(Gradients { map })
    }

    fn node_backward(&self, node: &Node<T>, g: &Tensor4<T>) -> Result<Vec<Option<Tensor4<T>>>> {
        let input = |k: usize| &self.values[node.inputs[k].0];
        let out = &self.values[node.output.0];
        let grads = match &node.op {
            Op::Binary { op, bc } => {
                let (a, b) = (input(0), input(1));
                match op {
                    BinaryOp::Add => vec![Some(g.clone()), Some(g.reduce_broadcast(*bc, b.dims()))],
                    BinaryOp::Mul => {
                        let da = Tensor4::elementwise(BinaryOp::Mul, g, b)?;
                        let gb = Tensor4::from_vec(
                            g.dims(),
                            g.data().iter().zip(a.data()).map(|(&gv, &av)| gv * av).collect(),
                        )?;
                        vec![Some(da), Some(gb.reduce_broadcast(*bc, b.dims()))]
                    }
                }
            }
            Op::Scale(k) => vec![Some(g.scale(*k))],
            Op::Concat => {
                let mut start = 0;
                node.inputs
                    .iter()
                    .map(|id| {
                        let c = self.values[id.0].dims().c;
                        let part = g.slice_channels(start, c);
                        start += c;
                        part.map(Some)
                    })
                    .collect::<Result<Vec<_>>>()?
            }
            Op::Slice { start } => {
                let mut full = Tensor4::zeros(input(0).dims());
                full.add_into_channels(*start, g);
                vec![Some(full)]
            }
            Op::Reshape => vec![Some(g.clone().reshape(input(0).dims())?)],
            Op::Sum => vec![Some(Tensor4::full(input(0).dims(), g.data()[0]))],
            Op::Conv { spec } => {
                let cg = conv2d_backward(input(0), input(1), spec, g)?;
                let mut v = vec![Some(cg.input), Some(cg.weight)];
                if node.inputs.len() == 3 {
                    v.push(cg.bias);
                }
                v
            }
            Op::PoolChannel { mode, argmax } => vec![Some(pool_channel_backward(input(0).dims(), *mode, argmax, g))],
            Op::GlobalAvgPool => vec![Some(adaptive_avg_pool_backward(input(0).dims(), g))],
            Op::Upsample { mode } => vec![Some(upsample_backward(input(0).dims(), *mode, g))],
            Op::Unfold { kernel, dilation } => {
                vec![Some(unfold_dilated_backward(input(0).dims(), *kernel, *dilation, g))]
            }
            Op::BatchNorm { cache } => {
                let bg = batch_norm_backward(input(1), cache, g);
                vec![Some(bg.input), Some(bg.gamma), Some(bg.beta)]
            }
            Op::Activation { kind } => vec![Some(activate_backward(input(0), out, *kind, g))],
            Op::Softmax => vec![Some(softmax_channels_backward(out, g))],
            Op::AdaptiveApply { geo } => {
                let (dx, dk) = adaptive_conv_apply_backward(input(0), input(1), *geo, g);
                vec![Some(dx), Some(dk)]
            }
            Op::Deform { spec, cols } => {
                let dg = deform_conv2d_backward(input(0), input(1), input(2), cols, spec, g)?;
                let mut v = vec![Some(dg.input), Some(dg.offsets), Some(dg.weight)];
                if node.inputs.len() == 4 {
                    v.push(Some(dg.bias));
                }
                v
            }
            Op::Custom(rule) => {
                let ins: Vec<&Tensor4<T>> = node.inputs.iter().map(|i| &self.values[i.0]).collect();
                let gs = rule.backward(&ins, g)?;
                if gs.len() != ins.len() {
                    return Err(Error::shape(format!(
                        "{} returned {} gradients for {} inputs",
                        rule.name(),
                        gs.len(),
                        ins.len()
                    )));
                }
                gs.into_iter().map(Some).collect()
            }
        };
        for (gi, id) in grads.iter().zip(&node.inputs) {
            if let Some(gi) = gi {
                if gi.dims() != self.values[id.0].dims() {
                    return Err(Error::shape(format!(
                        "{} produced gradient {} for input {}",
                        node.op.name(),
                        gi.dims(),
                        self.values[id.0].dims()
                    )));
                }
                gi.ensure_finite(node.op.name())?;
            }
        }
        Ok(grads)
    }
}
