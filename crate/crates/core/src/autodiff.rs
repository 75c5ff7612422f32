//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Graph`] is an append-only arena of nodes. Node ids are handed out in
//! construction order, which is therefore a topological order; `backward`
//! walks the arena in reverse.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{contract_err, shape_err, Result};
use crate::ops::{self, BnCache, ConvSpec, Mode};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Square(NodeId),
    Relu(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    MeanOf(Vec<NodeId>),
    Concat(NodeId, NodeId),
    Conv {
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        spec: ConvSpec,
    },
    BatchNorm {
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        cache: BnCache,
    },
    CrossChannelPool {
        input: NodeId,
        group: usize,
        weight: f64,
    },
    Dropout {
        input: NodeId,
        mask: Tensor,
    },
    GlobalAvgPool(NodeId),
    Linear {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
    },
    SoftmaxCrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
        probs: Tensor,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    requires_grad: bool,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op: Op::Leaf,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// A constant input (no gradient).
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, true)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.0].grad.as_ref()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Resets every materialized gradient to zero.
    /// Smallest `|x|` over all ReLU inputs recorded so far.
    pub fn relu_margin(&self) -> f64 {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(x) => Some(self.value(x).data().iter().fold(f64::INFINITY, |m, v| m.min(v.abs()))),
                _ => None,
            })
            .fold(f64::INFINITY, f64::min)
    }

    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            if let Some(g) = node.grad.as_mut() {
                g.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    fn push(&mut self, value: Tensor, parents: &[NodeId], op: Op) -> NodeId {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, &[a, b], Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(v, &[a, b], Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).mul(self.value(b))?;
        Ok(self.push(v, &[a, b], Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let v = self.value(a).scale(factor);
        self.push(v, &[a], Op::Scale(a, factor))
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).square();
        self.push(v, &[a], Op::Square(a))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = ops::relu(self.value(a));
        self.push(v, &[a], Op::Relu(a))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(a).sum_all());
        self.push(v, &[a], Op::Sum(a))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(a).mean_all());
        self.push(v, &[a], Op::Mean(a))
    }

    /// Elementwise mean of equally shaped nodes.
    pub fn mean_of(&mut self, items: &[NodeId]) -> Result<NodeId> {
        let (&first, rest) = items
            .split_first()
            .ok_or_else(|| contract_err!("mean_of needs at least one operand"))?;
        let mut acc = self.value(first).clone();
        for &id in rest {
            acc.accumulate(self.value(id))?;
        }
        let v = acc.scale(1.0 / items.len() as f64);
        Ok(self.push(v, items, Op::MeanOf(items.to_vec())))
    }

    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = Tensor::concat_channels(self.value(a), self.value(b))?;
        Ok(self.push(v, &[a, b], Op::Concat(a, b)))
    }

    pub fn conv3d(&mut self, input: NodeId, weight: NodeId, bias: Option<NodeId>, spec: ConvSpec) -> Result<NodeId> {
        let b = bias.map(|id| self.value(id).data().to_vec());
        let v = ops::conv3d(self.value(input), self.value(weight), b.as_deref(), &spec)?;
        let mut parents = vec![input, weight];
        parents.extend(bias);
        Ok(self.push(v, &parents, Op::Conv { input, weight, bias, spec }))
    }

    pub fn conv2d_frames(&mut self, input: NodeId, weight: NodeId, bias: Option<NodeId>, spec: ConvSpec) -> Result<NodeId> {
        if !spec.is_2d() {
            return Err(shape_err!("conv2d_frames requires temporal kernel 1"));
        }
        self.conv3d(input, weight, bias, spec)
    }

    /// Batch normalization with learnable `gamma`/`beta` nodes.
    ///
    /// In train mode the running statistics are updated in place with `momentum`.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: &mut [f64],
        running_var: &mut [f64],
        epsilon: f64,
        momentum: f64,
        mode: Mode,
    ) -> Result<NodeId> {
        let (v, cache) = ops::batch_norm_forward(
            self.value(input),
            self.value(gamma).data(),
            self.value(beta).data(),
            running_mean,
            running_var,
            epsilon,
            mode,
        )?;
        if mode == Mode::Train {
            ops::update_running_stats(running_mean, running_var, &cache, momentum);
        }
        Ok(self.push(v, &[input, gamma, beta], Op::BatchNorm { input, gamma, beta, cache }))
    }

    pub fn cross_channel_pool(&mut self, input: NodeId, group: usize, weight: f64) -> Result<NodeId> {
        let v = ops::cross_channel_pool(self.value(input), group, weight)?;
        Ok(self.push(v, &[input], Op::CrossChannelPool { input, group, weight }))
    }

    pub fn dropout<R: Rng + ?Sized>(&mut self, input: NodeId, p: f64, mode: Mode, rng: &mut R) -> Result<NodeId> {
        let (v, mask) = ops::dropout(self.value(input), p, mode, rng)?;
        Ok(self.push(v, &[input], Op::Dropout { input, mask }))
    }

    pub fn global_avg_pool(&mut self, input: NodeId) -> Result<NodeId> {
        let v = ops::global_avg_pool(self.value(input))?;
        Ok(self.push(v, &[input], Op::GlobalAvgPool(input)))
    }

    pub fn linear(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        let v = ops::fully_connected(self.value(input), self.value(weight), self.value(bias).data())?;
        Ok(self.push(v, &[input, weight, bias], Op::Linear { input, weight, bias }))
    }

    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let (loss, probs) = ops::softmax_cross_entropy(self.value(logits), labels)?;
        Ok(self.push(
            Tensor::scalar(loss),
            &[logits],
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    fn send(&mut self, id: NodeId, g: Tensor) -> Result<()> {
        let node = &mut self.nodes[id.0];
        if !node.requires_grad {
            return Ok(());
        }
        match node.grad.as_mut() {
            Some(acc) => acc.accumulate(&g),
            None => {
                if g.shape() != node.value.shape() {
                    return Err(shape_err!("gradient {:?} does not match value {:?}", g.shape(), node.value.shape()));
                }
                node.grad = Some(g);
                Ok(())
            }
        }
    }

    /// Populates `grad` for every node that requires it with d(loss)/d(node).
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(contract_err!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            ));
        }
        if !self.requires_grad(loss) {
            return Ok(());
        }
        let seed = Tensor::full(self.value(loss).shape(), 1.0)?;
        self.send(loss, seed)?;

        for i in (0..=loss.0).rev() {
            let Some(g) = self.nodes[i].grad.clone() else {
                continue;
            };
            // Move the op out temporarily so parents can be borrowed mutably.
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            let result = self.backprop_op(&op, &g);
            self.nodes[i].op = op;
            result?;
        }
        Ok(())
    }

    fn backprop_op(&mut self, op: &Op, g: &Tensor) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.send(*a, g.clone())?;
                self.send(*b, g.clone())?;
            }
            Op::Sub(a, b) => {
                self.send(*a, g.clone())?;
                self.send(*b, g.scale(-1.0))?;
            }
            Op::Mul(a, b) => {
                let ga = g.mul(self.value(*b))?;
                let gb = g.mul(self.value(*a))?;
                self.send(*a, ga)?;
                self.send(*b, gb)?;
            }
            Op::Scale(a, f) => self.send(*a, g.scale(*f))?,
            Op::Square(a) => {
                let ga = g.mul(&self.value(*a).scale(2.0))?;
                self.send(*a, ga)?;
            }
            Op::Relu(a) => {
                let ga = ops::relu_backward(self.value(*a), g)?;
                self.send(*a, ga)?;
            }
            Op::Sum(a) => {
                let ga = Tensor::full(self.value(*a).shape(), g.item())?;
                self.send(*a, ga)?;
            }
            Op::Mean(a) => {
                let n = self.value(*a).len() as f64;
                let ga = Tensor::full(self.value(*a).shape(), g.item() / n)?;
                self.send(*a, ga)?;
            }
            Op::MeanOf(items) => {
                let share = g.scale(1.0 / items.len() as f64);
                for &id in items {
                    self.send(id, share.clone())?;
                }
            }
            Op::Concat(a, b) => {
                let ca = self.value(*a).shape()[1];
                let cb = self.value(*b).shape()[1];
                self.send(*a, g.slice_channels(0, ca)?)?;
                self.send(*b, g.slice_channels(ca, ca + cb)?)?;
            }
            Op::Conv { input, weight, bias, spec } => {
                let grads = ops::conv3d_backward(self.value(*input), self.value(*weight), g, spec)?;
                self.send(*input, grads.input)?;
                self.send(*weight, grads.weight)?;
                if let Some(b) = bias {
                    let shape = self.value(*b).shape().to_vec();
                    self.send(*b, Tensor::from_vec(&shape, grads.bias)?)?;
                }
            }
            Op::BatchNorm { input, gamma, beta, cache } => {
                let gamma_v = self.value(*gamma).data().to_vec();
                let (dx, dgamma, dbeta) = ops::batch_norm_backward(g, cache, &gamma_v)?;
                let gshape = self.value(*gamma).shape().to_vec();
                let bshape = self.value(*beta).shape().to_vec();
                self.send(*input, dx)?;
                self.send(*gamma, Tensor::from_vec(&gshape, dgamma)?)?;
                self.send(*beta, Tensor::from_vec(&bshape, dbeta)?)?;
            }
            Op::CrossChannelPool { input, group, weight } => {
                let gi = ops::cross_channel_pool_backward(g, *group, *weight)?;
                self.send(*input, gi)?;
            }
            Op::Dropout { input, mask } => {
                let gi = g.mul(mask)?;
                self.send(*input, gi)?;
            }
            Op::GlobalAvgPool(input) => {
                let shape = self.value(*input).shape().to_vec();
                self.send(*input, ops::global_avg_pool_backward(&shape, g)?)?;
            }
            Op::Linear { input, weight, bias } => {
                let (dx, dw, db) = ops::fully_connected_backward(self.value(*input), self.value(*weight), g)?;
                let bshape = self.value(*bias).shape().to_vec();
                self.send(*input, dx)?;
                self.send(*weight, dw)?;
                self.send(*bias, Tensor::from_vec(&bshape, db)?)?;
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                let gl = ops::softmax_cross_entropy_backward(probs, labels, g.item())?;
                self.send(*logits, gl)?;
            }
        }
        Ok(())
    }
}

/// Outcome of comparing analytic gradients against central finite differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub op_name: String,
    /// Largest relative error among elements whose absolute error exceeds `abs_floor`.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub passed: bool,
    pub perturbation: f64,
    /// Smallest `|x|` fed to a ReLU at the base point; the check is only
    /// meaningful when this is well above the perturbation.
    pub kink_margin: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckConfig {
    pub step: f64,
    pub rel_threshold: f64,
    pub abs_floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            rel_threshold: 1e-4,
            abs_floor: 1e-8,
        }
    }
}

/// Gradient check with inputs drawn from a seeded `U(-1, 1)`.
pub fn grad_check<F>(op_name: &str, input_shapes: &[&[usize]], seed: u64, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs = input_shapes
        .iter()
        .map(|s| Tensor::uniform(s, -1.0, 1.0, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    grad_check_inputs(op_name, &inputs, seed, GradCheckConfig::default(), build)
}

/// Gradient check on caller-constructed inputs.
///
/// `build` maps input nodes to an output node of any shape; the checked scalar
/// is a fixed random projection of that output so every output element
/// contributes a distinct weight.
pub fn grad_check_inputs<F>(op_name: &str, inputs: &[Tensor], seed: u64, cfg: GradCheckConfig, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let mut projection: Option<Tensor> = None;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);

    let mut kink_margin = f64::INFINITY;
    let mut evaluate = |values: &[Tensor], want_grads: bool| -> Result<(f64, Vec<Tensor>)> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = values.iter().map(|v| g.param(v.clone())).collect();
        let out = build(&mut g, &ids)?;
        if projection.is_none() {
            projection = Some(Tensor::uniform(g.value(out).shape(), 0.5, 1.5, &mut rng)?);
        }
        let w = g.input(projection.clone().expect("projection set"));
        let prod = g.mul(out, w)?;
        let loss = g.sum(prod);
        let value = g.value(loss).item();
        let mut grads = Vec::new();
        if want_grads {
            kink_margin = g.relu_margin();
            g.backward(loss)?;
            for &id in &ids {
                grads.push(g.grad(id).cloned().unwrap_or_else(|| Tensor::zeros_like(g.value(id))));
            }
        }
        Ok((value, grads))
    };

    let (_, analytic) = evaluate(inputs, true)?;
    let h = cfg.step;
    let mut max_rel: f64 = 0.0;
    let mut max_abs: f64 = 0.0;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        for j in 0..input.len() {
            let orig = input.data()[j];
            work[k].data_mut()[j] = orig + h;
            let (fp, _) = evaluate(&work, false)?;
            work[k].data_mut()[j] = orig - h;
            let (fm, _) = evaluate(&work, false)?;
            work[k].data_mut()[j] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[k].data()[j];
            let abs = (a - numeric).abs();
            max_abs = max_abs.max(abs);
            if abs > cfg.abs_floor {
                let rel = abs / a.abs().max(numeric.abs()).max(1e-8);
                max_rel = max_rel.max(rel);
            }
        }
    }
    Ok(GradCheckReport {
        op_name: op_name.to_string(),
        max_rel_error: max_rel,
        max_abs_error: max_abs,
        passed: max_rel <= cfg.rel_threshold || max_abs <= cfg.abs_floor,
        perturbation: h,
        kink_margin,
    })
}
