//! Reverse-mode automatic differentiation over a recorded graph of rank-4
//! tensor primitives.
//!
//! A [`Graph`] is built symbolically: leaves are declared by name and shape,
//! primitives are appended with their shape rules checked immediately. Nodes
//! are stored in insertion order, which is a topological order, so the graph
//! is acyclic by construction. [`Graph::evaluate`] binds the leaves and runs
//! the forward pass, keeping every intermediate for [`Graph::backward`]. The
//! same graph can be re-evaluated with new bindings any number of times.

mod kernels;

pub mod gradcheck;
pub mod optim;

use std::collections::HashMap;
use std::fmt;

use crate::error::{Error, Result};
use crate::losses;
use crate::tensor::{Shape, Tensor};

pub type Bindings = HashMap<String, Tensor>;

/// Named parameter tensors in a stable order.
pub type ParamMap = std::collections::BTreeMap<String, Tensor>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with the batch statistics.
    Train,
    /// Normalize with running statistics bound as extra leaves.
    Eval,
}

/// The closed catalog of differentiable primitives.
#[derive(Clone, Debug, PartialEq)]
pub enum PrimitiveKind {
    Leaf {
        name: String,
        requires_grad: bool,
    },
    /// Inputs: x, weight `(cout, cin, kh, kw)`, optional bias `(1, cout, 1, 1)`.
    Conv2d {
        stride: usize,
        pad: usize,
        bias: bool,
    },
    /// Inputs: x, gamma, beta, and in eval mode running mean and running var.
    BatchNorm2d {
        eps: f32,
        mode: BnMode,
    },
    Relu,
    Sigmoid,
    Add,
    Mul,
    /// Channel-axis concatenation.
    Concat,
    MaxPool2,
    UpsampleNearest2,
    ResizeBilinear {
        height: usize,
        width: usize,
    },
    GlobalMeanPool,
    GlobalMaxPool,
    /// Mean over channels, giving one map per batch item.
    ChannelMeanPool,
    ChannelMaxPool,
    /// Inputs: x flattened per batch item, weight `(out, features, 1, 1)`, optional bias.
    FullyConnected {
        bias: bool,
    },
    Mean,
    Sum,
    Scale(f32),
    /// Mean binary cross-entropy of a probability map against a 0/1 target.
    Bce,
    Dice {
        smooth: f64,
    },
}

impl PrimitiveKind {
    pub fn name(&self) -> &'static str {
        match self {
            PrimitiveKind::Leaf { .. } => "leaf",
            PrimitiveKind::Conv2d { .. } => "conv2d",
            PrimitiveKind::BatchNorm2d { .. } => "batchnorm2d",
            PrimitiveKind::Relu => "relu",
            PrimitiveKind::Sigmoid => "sigmoid",
            PrimitiveKind::Add => "add",
            PrimitiveKind::Mul => "mul",
            PrimitiveKind::Concat => "concat",
            PrimitiveKind::MaxPool2 => "maxpool2",
            PrimitiveKind::UpsampleNearest2 => "upsample_nearest2",
            PrimitiveKind::ResizeBilinear { .. } => "resize_bilinear",
            PrimitiveKind::GlobalMeanPool => "global_mean_pool",
            PrimitiveKind::GlobalMaxPool => "global_max_pool",
            PrimitiveKind::ChannelMeanPool => "channel_mean_pool",
            PrimitiveKind::ChannelMaxPool => "channel_max_pool",
            PrimitiveKind::FullyConnected { .. } => "fully_connected",
            PrimitiveKind::Mean => "mean",
            PrimitiveKind::Sum => "sum",
            PrimitiveKind::Scale(_) => "scale",
            PrimitiveKind::Bce => "bce",
            PrimitiveKind::Dice { .. } => "dice",
        }
    }
}

#[derive(Clone, Debug)]
pub struct GraphNode {
    pub kind: PrimitiveKind,
    pub inputs: Vec<NodeId>,
    pub shape: Shape,
}

/// Deliberate backward-pass corruption, for mutation-testing the gradient checker.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BackwardFault {
    NegateConvWeightGrad,
}

#[derive(Clone, Debug, Default)]
enum Cache {
    #[default]
    None,
    Argmax(Vec<u32>),
    Stats {
        mean: Vec<f64>,
        var: Vec<f64>,
        invstd: Vec<f64>,
    },
}

#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<GraphNode>,
    leaves: HashMap<String, NodeId>,
    values: Vec<Option<Tensor>>,
    caches: Vec<Cache>,
    evaluated: Option<NodeId>,
    fault: Option<BackwardFault>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    /// Node ids in insertion (topological) order.
    pub fn node_ids(&self) -> impl Iterator<Item = NodeId> {
        (0..self.nodes.len()).map(NodeId)
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: NodeId) -> &GraphNode {
        &self.nodes[id.0]
    }

    pub fn shape(&self, id: NodeId) -> Shape {
        self.nodes[id.0].shape
    }

    pub fn leaf_id(&self, name: &str) -> Option<NodeId> {
        self.leaves.get(name).copied()
    }

    /// Declared leaves as (name, shape, requires_grad), in declaration order.
    pub fn leaves(&self) -> Vec<(String, Shape, bool)> {
        let mut out: Vec<_> = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match &n.kind {
                PrimitiveKind::Leaf {
                    name,
                    requires_grad,
                } => Some((i, name.clone(), n.shape, *requires_grad)),
                _ => None,
            })
            .collect();
        out.sort_by_key(|e| e.0);
        out.into_iter().map(|(_, n, s, r)| (n, s, r)).collect()
    }

    pub fn set_backward_fault(&mut self, fault: Option<BackwardFault>) {
        self.fault = fault;
    }

    fn push(&mut self, kind: PrimitiveKind, inputs: Vec<NodeId>, shape: Shape) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(GraphNode {
            kind,
            inputs,
            shape,
        });
        self.values.push(None);
        self.caches.push(Cache::None);
        self.evaluated = None;
        id
    }

    fn mismatch(&self, op: &'static str, lhs: Shape, rhs: Shape) -> Error {
        Error::ShapeMismatch {
            node: self.nodes.len(),
            op,
            lhs,
            rhs,
        }
    }

    /// Declares a named leaf. Re-declaring a name with the same shape returns
    /// the existing node, so parameters can be shared between subgraphs.
    pub fn leaf(&mut self, name: &str, shape: Shape, requires_grad: bool) -> Result<NodeId> {
        if !shape.is_valid() {
            return Err(Error::usage(format!(
                "leaf `{name}` has a zero axis: {shape}"
            )));
        }
        if let Some(&id) = self.leaves.get(name) {
            let existing = self.nodes[id.0].shape;
            if existing != shape {
                return Err(Error::ShapeMismatch {
                    node: id.0,
                    op: "leaf",
                    lhs: existing,
                    rhs: shape,
                });
            }
            return Ok(id);
        }
        let id = self.push(
            PrimitiveKind::Leaf {
                name: name.to_string(),
                requires_grad,
            },
            vec![],
            shape,
        );
        self.leaves.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn input(&mut self, name: &str, shape: Shape) -> Result<NodeId> {
        self.leaf(name, shape, false)
    }

    pub fn param(&mut self, name: &str, shape: Shape) -> Result<NodeId> {
        self.leaf(name, shape, true)
    }

    pub fn conv2d(
        &mut self,
        x: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let (xs, ws) = (self.shape(x), self.shape(weight));
        if ws.c() != xs.c() {
            return Err(self.mismatch("conv2d", xs, ws));
        }
        let geom = kernels::ConvGeom::new(xs, ws, stride, pad)
            .ok_or_else(|| self.mismatch("conv2d", xs, ws))?;
        let mut inputs = vec![x, weight];
        if let Some(b) = bias {
            let bs = self.shape(b);
            if bs != Shape::new(1, ws.n(), 1, 1) {
                return Err(self.mismatch("conv2d", ws, bs));
            }
            inputs.push(b);
        }
        let out = Shape::new(xs.n(), ws.n(), geom.ho, geom.wo);
        Ok(self.push(
            PrimitiveKind::Conv2d {
                stride,
                pad,
                bias: bias.is_some(),
            },
            inputs,
            out,
        ))
    }

    /// `running` is required in eval mode and must be absent in train mode.
    pub fn batchnorm2d(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running: Option<(NodeId, NodeId)>,
        eps: f32,
    ) -> Result<NodeId> {
        let xs = self.shape(x);
        let ps = Shape::new(1, xs.c(), 1, 1);
        let mut inputs = vec![x, gamma, beta];
        if let Some((m, v)) = running {
            inputs.extend([m, v]);
        }
        for &p in &inputs[1..] {
            if self.shape(p) != ps {
                return Err(self.mismatch("batchnorm2d", xs, self.shape(p)));
            }
        }
        let mode = if running.is_some() {
            BnMode::Eval
        } else {
            BnMode::Train
        };
        Ok(self.push(PrimitiveKind::BatchNorm2d { eps, mode }, inputs, xs))
    }

    fn unary(&mut self, kind: PrimitiveKind, x: NodeId) -> NodeId {
        let s = self.shape(x);
        self.push(kind, vec![x], s)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.unary(PrimitiveKind::Relu, x)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.unary(PrimitiveKind::Sigmoid, x)
    }

    fn binary(&mut self, kind: PrimitiveKind, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let op = kind.name();
        let out = kernels::broadcast_shape(sa, sb).ok_or_else(|| self.mismatch(op, sa, sb))?;
        Ok(self.push(kind, vec![a, b], out))
    }

    /// Elementwise sum; size-1 axes broadcast.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(PrimitiveKind::Add, a, b)
    }

    /// Elementwise product; size-1 axes broadcast.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(PrimitiveKind::Mul, a, b)
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::usage("concat of zero tensors"))?;
        let fs = self.shape(first);
        let mut c = 0;
        for &p in parts {
            let s = self.shape(p);
            if (s.n(), s.h(), s.w()) != (fs.n(), fs.h(), fs.w()) {
                return Err(self.mismatch("concat", fs, s));
            }
            c += s.c();
        }
        Ok(self.push(
            PrimitiveKind::Concat,
            parts.to_vec(),
            Shape::new(fs.n(), c, fs.h(), fs.w()),
        ))
    }

    pub fn maxpool2(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.shape(x);
        if s.h() < 2 || s.w() < 2 || s.h() % 2 != 0 || s.w() % 2 != 0 {
            return Err(Error::usage(format!(
                "maxpool2 needs even spatial dims, got {s}"
            )));
        }
        Ok(self.push(
            PrimitiveKind::MaxPool2,
            vec![x],
            Shape::new(s.n(), s.c(), s.h() / 2, s.w() / 2),
        ))
    }

    pub fn upsample2(&mut self, x: NodeId) -> NodeId {
        let s = self.shape(x);
        self.push(
            PrimitiveKind::UpsampleNearest2,
            vec![x],
            Shape::new(s.n(), s.c(), 2 * s.h(), 2 * s.w()),
        )
    }

    pub fn resize_bilinear(&mut self, x: NodeId, height: usize, width: usize) -> Result<NodeId> {
        if height == 0 || width == 0 {
            return Err(Error::usage("resize target must be non-empty"));
        }
        let s = self.shape(x);
        Ok(self.push(
            PrimitiveKind::ResizeBilinear { height, width },
            vec![x],
            Shape::new(s.n(), s.c(), height, width),
        ))
    }

    pub fn global_mean_pool(&mut self, x: NodeId) -> NodeId {
        let s = self.shape(x);
        self.push(
            PrimitiveKind::GlobalMeanPool,
            vec![x],
            Shape::new(s.n(), s.c(), 1, 1),
        )
    }

    pub fn global_max_pool(&mut self, x: NodeId) -> NodeId {
        let s = self.shape(x);
        self.push(
            PrimitiveKind::GlobalMaxPool,
            vec![x],
            Shape::new(s.n(), s.c(), 1, 1),
        )
    }

    pub fn channel_mean_pool(&mut self, x: NodeId) -> NodeId {
        let s = self.shape(x);
        self.push(
            PrimitiveKind::ChannelMeanPool,
            vec![x],
            Shape::new(s.n(), 1, s.h(), s.w()),
        )
    }

    pub fn channel_max_pool(&mut self, x: NodeId) -> NodeId {
        let s = self.shape(x);
        self.push(
            PrimitiveKind::ChannelMaxPool,
            vec![x],
            Shape::new(s.n(), 1, s.h(), s.w()),
        )
    }

    pub fn fully_connected(
        &mut self,
        x: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
    ) -> Result<NodeId> {
        let (xs, ws) = (self.shape(x), self.shape(weight));
        let features = xs.c() * xs.h() * xs.w();
        if ws.c() != features || ws.h() != 1 || ws.w() != 1 {
            return Err(self.mismatch("fully_connected", xs, ws));
        }
        let mut inputs = vec![x, weight];
        if let Some(b) = bias {
            if self.shape(b) != Shape::new(1, ws.n(), 1, 1) {
                return Err(self.mismatch("fully_connected", ws, self.shape(b)));
            }
            inputs.push(b);
        }
        Ok(self.push(
            PrimitiveKind::FullyConnected {
                bias: bias.is_some(),
            },
            inputs,
            Shape::new(xs.n(), ws.n(), 1, 1),
        ))
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        self.push(PrimitiveKind::Mean, vec![x], Shape::scalar())
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        self.push(PrimitiveKind::Sum, vec![x], Shape::scalar())
    }

    pub fn scale(&mut self, x: NodeId, factor: f32) -> Result<NodeId> {
        if !factor.is_finite() {
            return Err(Error::usage(format!("scale factor {factor} is not finite")));
        }
        Ok(self.unary(PrimitiveKind::Scale(factor), x))
    }

    pub fn bce(&mut self, pred: NodeId, target: NodeId) -> Result<NodeId> {
        let (ps, ts) = (self.shape(pred), self.shape(target));
        if ps != ts {
            return Err(self.mismatch("bce", ps, ts));
        }
        Ok(self.push(PrimitiveKind::Bce, vec![pred, target], Shape::scalar()))
    }

    pub fn dice(&mut self, pred: NodeId, target: NodeId, smooth: f64) -> Result<NodeId> {
        let (ps, ts) = (self.shape(pred), self.shape(target));
        if ps != ts {
            return Err(self.mismatch("dice", ps, ts));
        }
        Ok(self.push(
            PrimitiveKind::Dice { smooth },
            vec![pred, target],
            Shape::scalar(),
        ))
    }

    /// Nodes that `root` depends on, including itself.
    fn ancestors(&self, root: NodeId) -> Vec<bool> {
        let mut needed = vec![false; root.0 + 1];
        needed[root.0] = true;
        for i in (0..=root.0).rev() {
            if needed[i] {
                for inp in &self.nodes[i].inputs {
                    needed[inp.0] = true;
                }
            }
        }
        needed
    }

    /// Runs the forward pass up to `root` and returns its value.
    pub fn evaluate(&mut self, root: NodeId, bindings: &Bindings) -> Result<Tensor> {
        if root.0 >= self.nodes.len() {
            return Err(Error::usage(format!("node {root} is not in this graph")));
        }
        self.evaluated = None;
        let needed = self.ancestors(root);
        for i in 0..=root.0 {
            if !needed[i] {
                self.values[i] = None;
                continue;
            }
            let (value, cache) = self.forward_node(i, bindings)?;
            if !value.is_finite() {
                return Err(Error::NumericFault {
                    node: i,
                    op: self.nodes[i].kind.name(),
                });
            }
            self.values[i] = Some(value);
            self.caches[i] = cache;
        }
        self.evaluated = Some(root);
        Ok(self.values[root.0].clone().expect("root evaluated"))
    }

    /// Value of any node computed by the last [`Graph::evaluate`].
    pub fn value(&self, id: NodeId) -> Option<&Tensor> {
        self.values.get(id.0).and_then(|v| v.as_ref())
    }

    /// Batch mean and unbiased batch variance seen by a train-mode batchnorm
    /// node in the last forward pass.
    pub fn batch_stats(&self, id: NodeId) -> Option<(Vec<f64>, Vec<f64>)> {
        let count = {
            let s = self.shape(id);
            (s.n() * s.plane()) as f64
        };
        match (&self.nodes[id.0].kind, &self.caches[id.0]) {
            (
                PrimitiveKind::BatchNorm2d {
                    mode: BnMode::Train,
                    ..
                },
                Cache::Stats { mean, var, .. },
            ) => {
                let unbiased = if count > 1.0 {
                    var.iter().map(|v| v * count / (count - 1.0)).collect()
                } else {
                    var.clone()
                };
                Some((mean.clone(), unbiased))
            }
            _ => None,
        }
    }

    fn val(&self, id: NodeId) -> &Tensor {
        self.values[id.0]
            .as_ref()
            .expect("input evaluated before use")
    }

    fn forward_node(&self, i: usize, bindings: &Bindings) -> Result<(Tensor, Cache)> {
        let node = &self.nodes[i];
        let out_shape = node.shape;
        let ins: Vec<&Tensor> = node.inputs.iter().map(|&id| self.val(id)).collect();
        let mut cache = Cache::None;
        let data = match &node.kind {
            PrimitiveKind::Leaf { name, .. } => {
                let bound = bindings
                    .get(name)
                    .ok_or_else(|| Error::usage(format!("leaf `{name}` is unbound")))?;
                if bound.shape() != out_shape {
                    return Err(Error::ShapeMismatch {
                        node: i,
                        op: "leaf",
                        lhs: out_shape,
                        rhs: bound.shape(),
                    });
                }
                return Ok((bound.clone(), cache));
            }
            PrimitiveKind::Conv2d { stride, pad, .. } => {
                let (x, w) = (ins[0], ins[1]);
                let g = kernels::ConvGeom::new(x.shape(), w.shape(), *stride, *pad)
                    .expect("checked at build");
                kernels::conv2d_forward(
                    x.data(),
                    x.shape().n(),
                    w.data(),
                    w.shape().n(),
                    ins.get(2).map(|b| b.data()),
                    &g,
                )
            }
            PrimitiveKind::BatchNorm2d { eps, mode } => {
                let x = ins[0];
                let (mean, var) = match mode {
                    BnMode::Train => kernels::channel_stats(x.data(), x.shape()),
                    BnMode::Eval => (
                        ins[3].data().iter().map(|&v| v as f64).collect(),
                        ins[4].data().iter().map(|&v| v as f64).collect(),
                    ),
                };
                let invstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + *eps as f64).sqrt()).collect();
                let out = kernels::batchnorm_forward(
                    x.data(),
                    x.shape(),
                    ins[1].data(),
                    ins[2].data(),
                    &mean,
                    &invstd,
                );
                cache = Cache::Stats { mean, var, invstd };
                out
            }
            PrimitiveKind::Relu => ins[0].data().iter().map(|&v| v.max(0.0)).collect(),
            PrimitiveKind::Sigmoid => ins[0].data().iter().map(|&v| kernels::sigmoid(v)).collect(),
            PrimitiveKind::Add => kernels::add_forward(
                ins[0].data(),
                ins[0].shape(),
                ins[1].data(),
                ins[1].shape(),
                out_shape,
            ),
            PrimitiveKind::Mul => kernels::mul_forward(
                ins[0].data(),
                ins[0].shape(),
                ins[1].data(),
                ins[1].shape(),
                out_shape,
            ),
            PrimitiveKind::Concat => {
                let parts: Vec<(&[f32], Shape)> =
                    ins.iter().map(|t| (t.data(), t.shape())).collect();
                kernels::concat_forward(&parts, out_shape)
            }
            PrimitiveKind::MaxPool2 => {
                let (out, arg) = kernels::maxpool2_forward(ins[0].data(), ins[0].shape());
                cache = Cache::Argmax(arg);
                out
            }
            PrimitiveKind::UpsampleNearest2 => {
                kernels::upsample2_forward(ins[0].data(), ins[0].shape())
            }
            PrimitiveKind::ResizeBilinear { height, width } => {
                kernels::resize_bilinear_forward(ins[0].data(), ins[0].shape(), *height, *width)
            }
            PrimitiveKind::GlobalMeanPool => {
                kernels::global_mean_forward(ins[0].data(), ins[0].shape())
            }
            PrimitiveKind::GlobalMaxPool => {
                let (out, arg) = kernels::global_max_forward(ins[0].data(), ins[0].shape());
                cache = Cache::Argmax(arg);
                out
            }
            PrimitiveKind::ChannelMeanPool => {
                kernels::channel_mean_forward(ins[0].data(), ins[0].shape())
            }
            PrimitiveKind::ChannelMaxPool => {
                let (out, arg) = kernels::channel_max_forward(ins[0].data(), ins[0].shape());
                cache = Cache::Argmax(arg);
                out
            }
            PrimitiveKind::FullyConnected { .. } => {
                let (x, w) = (ins[0], ins[1]);
                let (n, f, o) = (x.shape().n(), w.shape().c(), w.shape().n());
                kernels::fc_forward(x.data(), n, f, w.data(), o, ins.get(2).map(|b| b.data()))
            }
            PrimitiveKind::Mean => vec![(ins[0].sum_f64() / ins[0].numel() as f64) as f32],
            PrimitiveKind::Sum => vec![ins[0].sum_f64() as f32],
            PrimitiveKind::Scale(k) => ins[0].data().iter().map(|&v| v * k).collect(),
            PrimitiveKind::Bce => vec![losses::bce_slice(ins[0].data(), ins[1].data()) as f32],
            PrimitiveKind::Dice { smooth } => {
                vec![losses::dice_slice(ins[0].data(), ins[1].data(), *smooth) as f32]
            }
        };
        Ok((Tensor::new(out_shape, data)?, cache))
    }

    /// Propagates `seed` from `root` back to every gradient-requiring leaf.
    ///
    /// Leaves that feed several nodes accumulate their gradients. Leaves that
    /// `root` does not depend on get zero gradients.
    pub fn backward(&self, root: NodeId, seed: &Tensor) -> Result<HashMap<String, Tensor>> {
        match self.evaluated {
            Some(r) if r.0 >= root.0 && self.values[root.0].is_some() => {}
            _ => {
                return Err(Error::usage(
                    "backward called before evaluate for this root",
                ))
            }
        }
        if seed.shape() != self.shape(root) {
            return Err(Error::ShapeMismatch {
                node: root.0,
                op: "backward seed",
                lhs: self.shape(root),
                rhs: seed.shape(),
            });
        }
        let needed = self.ancestors(root);
        let mut wants = vec![false; root.0 + 1];
        for i in 0..=root.0 {
            wants[i] = needed[i]
                && match &self.nodes[i].kind {
                    PrimitiveKind::Leaf { requires_grad, .. } => *requires_grad,
                    _ => self.nodes[i].inputs.iter().any(|inp| wants[inp.0]),
                };
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(seed.data().to_vec());
        for i in (0..=root.0).rev() {
            if !wants[i] {
                continue;
            }
            let Some(dout) = grads[i].take() else {
                continue;
            };
            if matches!(self.nodes[i].kind, PrimitiveKind::Leaf { .. }) {
                grads[i] = Some(dout);
                continue;
            }
            let input_wants: Vec<bool> = self.nodes[i]
                .inputs
                .iter()
                .map(|inp| wants[inp.0])
                .collect();
            let contributions = self.backward_node(i, &dout, &input_wants);
            for (inp, g) in self.nodes[i].inputs.iter().zip(contributions) {
                let Some(g) = g else { continue };
                if !wants[inp.0] {
                    continue;
                }
                match &mut grads[inp.0] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        let mut out = HashMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let PrimitiveKind::Leaf {
                name,
                requires_grad: true,
            } = &node.kind
            {
                let grad = match grads.get(i).and_then(|g| g.clone()) {
                    Some(g) => Tensor::new(node.shape, g)?,
                    None => Tensor::zeros(node.shape),
                };
                out.insert(name.clone(), grad);
            }
        }
        Ok(out)
    }

    fn backward_node(&self, i: usize, dout: &[f32], wants: &[bool]) -> Vec<Option<Vec<f32>>> {
        let node = &self.nodes[i];
        let ins: Vec<&Tensor> = node.inputs.iter().map(|&id| self.val(id)).collect();
        let out = self.values[i].as_ref().expect("node evaluated");
        let out_shape = node.shape;
        let want = |k: usize| wants.get(k).copied().unwrap_or(false);
        match &node.kind {
            PrimitiveKind::Leaf { .. } => vec![],
            PrimitiveKind::Conv2d { stride, pad, bias } => {
                let (x, w) = (ins[0], ins[1]);
                let g = kernels::ConvGeom::new(x.shape(), w.shape(), *stride, *pad)
                    .expect("checked at build");
                let mut r = kernels::conv2d_backward(
                    x.data(),
                    x.shape().n(),
                    w.data(),
                    w.shape().n(),
                    &g,
                    dout,
                    want(0),
                    want(1),
                    *bias && want(2),
                );
                if self.fault == Some(BackwardFault::NegateConvWeightGrad) {
                    if let Some(dw) = r.dw.as_mut() {
                        dw.iter_mut().for_each(|v| *v = -*v);
                    }
                }
                let mut v = vec![r.dx, r.dw];
                if *bias {
                    v.push(r.db);
                }
                v
            }
            PrimitiveKind::BatchNorm2d { mode, .. } => {
                let Cache::Stats { mean, invstd, .. } = &self.caches[i] else {
                    unreachable!("batchnorm cache")
                };
                let r = kernels::batchnorm_backward(
                    ins[0].data(),
                    ins[0].shape(),
                    ins[1].data(),
                    mean,
                    invstd,
                    dout,
                    *mode == BnMode::Train,
                );
                let mut v = vec![Some(r.dx), Some(r.dgamma), Some(r.dbeta)];
                if *mode == BnMode::Eval {
                    v.extend([None, None]);
                }
                v
            }
            PrimitiveKind::Relu => vec![Some(
                dout.iter()
                    .zip(ins[0].data())
                    .map(|(&d, &x)| if x > 0.0 { d } else { 0.0 })
                    .collect(),
            )],
            PrimitiveKind::Sigmoid => vec![Some(
                dout.iter()
                    .zip(out.data())
                    .map(|(&d, &y)| d * y * (1.0 - y))
                    .collect(),
            )],
            PrimitiveKind::Add => {
                let (da, db) =
                    kernels::add_backward(dout, ins[0].shape(), ins[1].shape(), out_shape);
                vec![Some(da), Some(db)]
            }
            PrimitiveKind::Mul => {
                let (da, db) = kernels::mul_backward(
                    dout,
                    ins[0].data(),
                    ins[0].shape(),
                    ins[1].data(),
                    ins[1].shape(),
                    out_shape,
                );
                vec![Some(da), Some(db)]
            }
            PrimitiveKind::Concat => {
                let shapes: Vec<Shape> = ins.iter().map(|t| t.shape()).collect();
                kernels::concat_backward(dout, &shapes, out_shape)
                    .into_iter()
                    .map(Some)
                    .collect()
            }
            PrimitiveKind::MaxPool2
            | PrimitiveKind::GlobalMaxPool
            | PrimitiveKind::ChannelMaxPool => {
                let Cache::Argmax(arg) = &self.caches[i] else {
                    unreachable!("argmax cache")
                };
                vec![Some(kernels::scatter_argmax(dout, arg, ins[0].numel()))]
            }
            PrimitiveKind::UpsampleNearest2 => {
                vec![Some(kernels::upsample2_backward(dout, ins[0].shape()))]
            }
            PrimitiveKind::ResizeBilinear { height, width } => {
                vec![Some(kernels::resize_bilinear_backward(
                    dout,
                    ins[0].shape(),
                    *height,
                    *width,
                ))]
            }
            PrimitiveKind::GlobalMeanPool => {
                vec![Some(kernels::global_mean_backward(dout, ins[0].shape()))]
            }
            PrimitiveKind::ChannelMeanPool => {
                vec![Some(kernels::channel_mean_backward(dout, ins[0].shape()))]
            }
            PrimitiveKind::FullyConnected { bias } => {
                let (x, w) = (ins[0], ins[1]);
                let (n, f, o) = (x.shape().n(), w.shape().c(), w.shape().n());
                let (dx, dw, db) = kernels::fc_backward(x.data(), n, f, w.data(), o, dout);
                let mut v = vec![Some(dx), Some(dw)];
                if *bias {
                    v.push(Some(db));
                }
                v
            }
            PrimitiveKind::Mean => {
                let n = ins[0].numel();
                vec![Some(vec![dout[0] / n as f32; n])]
            }
            PrimitiveKind::Sum => vec![Some(vec![dout[0]; ins[0].numel()])],
            PrimitiveKind::Scale(k) => vec![Some(dout.iter().map(|d| d * k).collect())],
            PrimitiveKind::Bce => {
                let g = losses::bce_grad(ins[0].data(), ins[1].data());
                vec![Some(g.into_iter().map(|v| v * dout[0]).collect()), None]
            }
            PrimitiveKind::Dice { smooth } => {
                let g = losses::dice_grad(ins[0].data(), ins[1].data(), *smooth);
                vec![Some(g.into_iter().map(|v| v * dout[0]).collect()), None]
            }
        }
    }
}

#[cfg(test)]
mod tests;
