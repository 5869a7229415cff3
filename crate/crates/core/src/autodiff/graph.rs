use std::collections::HashMap;
use std::fmt;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::kernels::{self, Padding};
use crate::error::{shape_err, Error, Result};
use crate::tensor::numel;

/// Index of a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// The primitive catalog.
#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    Input { name: String },
    Param { name: String },
    Add,
    Sub,
    Mul,
    MatMul,
    Conv2d { padding: Padding },
    MaxPool2x2,
    Upsample2x,
    Relu,
    Concat,
    GlobalAvgPool,
    Dropout { rate: f64 },
    Softmax,
    /// `ln(max(x, floor))`; the gradient is zero where the clamp is active.
    Log { floor: f64 },
    Reshape,
    Scale { factor: f64 },
}

impl Op {
    pub fn kind(&self) -> &'static str {
        match self {
            Op::Input { .. } => "input",
            Op::Param { .. } => "param",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::MatMul => "matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool2x2 => "max_pool2x2",
            Op::Upsample2x => "upsample_nearest2x",
            Op::Relu => "relu",
            Op::Concat => "concat",
            Op::GlobalAvgPool => "global_avg_pool",
            Op::Dropout { .. } => "dropout",
            Op::Softmax => "softmax",
            Op::Log { .. } => "log",
            Op::Reshape => "reshape",
            Op::Scale { .. } => "scale",
        }
    }
}

#[derive(Clone, Debug)]
pub struct Node {
    pub op: Op,
    pub inputs: Vec<NodeId>,
    pub shape: Vec<usize>,
    pub label: String,
}

/// How a parameter is initialized.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Init {
    /// Normal with std `sqrt(2 / fan_in)`.
    HeNormal { fan_in: usize },
    Zeros,
}

#[derive(Clone, Debug)]
pub struct ParamDecl {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
    pub node: NodeId,
}

/// A recorded computation: nodes in topological order plus declarations of
/// the inputs and parameters they read.
///
/// Graphs are built once through the methods below, each of which checks
/// shapes and appends one node, and are read-only afterwards.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    pub(crate) nodes: Vec<Node>,
    pub(crate) inputs: IndexMap<String, NodeId>,
    pub(crate) params: IndexMap<String, ParamDecl>,
}

impl fmt::Display for Graph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, n) in self.nodes.iter().enumerate() {
            let ins: Vec<String> = n.inputs.iter().map(|x| format!("%{}", x.0)).collect();
            writeln!(f, "%{i} = {}({}) : {:?}  # {}", n.op.kind(), ins.join(", "), n.shape, n.label)?;
        }
        Ok(())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn inputs(&self) -> impl Iterator<Item = (&str, NodeId)> {
        self.inputs.iter().map(|(k, &v)| (k.as_str(), v))
    }

    pub fn params(&self) -> impl Iterator<Item = &ParamDecl> {
        self.params.values()
    }

    pub fn param_decl(&self, name: &str) -> Option<&ParamDecl> {
        self.params.get(name)
    }

    pub fn find_label(&self, label: &str) -> Option<NodeId> {
        self.nodes.iter().position(|n| n.label == label).map(NodeId)
    }

    /// Nodes whose value no other node consumes.
    pub fn sinks(&self) -> Vec<NodeId> {
        let mut used = vec![false; self.nodes.len()];
        for n in &self.nodes {
            for i in &n.inputs {
                used[i.0] = true;
            }
        }
        (0..self.nodes.len()).filter(|&i| !used[i]).map(NodeId).collect()
    }

    /// Number of nodes of a given kind (e.g. `"upsample_nearest2x"`).
    pub fn count_kind(&self, kind: &str) -> usize {
        self.nodes.iter().filter(|n| n.op.kind() == kind).count()
    }

    pub fn set_label(&mut self, id: NodeId, label: impl Into<String>) {
        self.nodes[id.0].label = label.into();
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, shape: Vec<usize>) -> NodeId {
        let id = NodeId(self.nodes.len());
        let label = format!("{}#{}", op.kind(), id.0);
        self.nodes.push(Node {
            op,
            inputs,
            shape,
            label,
        });
        id
    }

    fn ctx(&self, kind: &str) -> String {
        format!("{kind}#{}", self.nodes.len())
    }

    fn relabel(&self, kind: &str, e: Error) -> Error {
        match e {
            Error::Shape { detail, .. } => shape_err(self.ctx(kind), detail),
            other => other,
        }
    }

    pub fn input(&mut self, name: &str, shape: impl Into<Vec<usize>>) -> Result<NodeId> {
        if self.inputs.contains_key(name) {
            return Err(Error::Config(format!("duplicate graph input `{name}`")));
        }
        let id = self.push(Op::Input { name: name.into() }, vec![], shape.into());
        self.set_label(id, name);
        self.inputs.insert(name.into(), id);
        Ok(id)
    }

    pub fn param(&mut self, name: &str, shape: impl Into<Vec<usize>>, init: Init) -> Result<NodeId> {
        if self.params.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter `{name}`")));
        }
        let shape = shape.into();
        let id = self.push(Op::Param { name: name.into() }, vec![], shape.clone());
        self.set_label(id, name);
        self.params.insert(
            name.into(),
            ParamDecl {
                name: name.into(),
                shape,
                init,
                node: id,
            },
        );
        Ok(id)
    }

    fn binary(&mut self, op: Op, a: NodeId, b: NodeId) -> Result<NodeId> {
        let kind = op.kind();
        let shape = kernels::binary_shape(kind, self.shape(a), self.shape(b)).map_err(|e| self.relabel(kind, e))?;
        Ok(self.push(op, vec![a, b], shape))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Op::Add, a, b)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Op::Sub, a, b)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Op::Mul, a, b)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = kernels::matmul_shape(self.shape(a), self.shape(b)).map_err(|e| self.relabel("matmul", e))?;
        Ok(self.push(Op::MatMul, vec![a, b], shape))
    }

    pub fn conv2d(&mut self, x: NodeId, kernel: NodeId, bias: NodeId, padding: Padding) -> Result<NodeId> {
        let shape = kernels::conv2d_shape(self.shape(x), self.shape(kernel), self.shape(bias), padding)
            .map_err(|e| self.relabel("conv2d", e))?;
        Ok(self.push(Op::Conv2d { padding }, vec![x, kernel, bias], shape))
    }

    pub fn max_pool2x2(&mut self, x: NodeId) -> Result<NodeId> {
        let shape = kernels::pool_shape(self.shape(x)).map_err(|e| self.relabel("max_pool2x2", e))?;
        Ok(self.push(Op::MaxPool2x2, vec![x], shape))
    }

    pub fn upsample2x(&mut self, x: NodeId) -> Result<NodeId> {
        let shape = kernels::upsample_shape(self.shape(x)).map_err(|e| self.relabel("upsample_nearest2x", e))?;
        Ok(self.push(Op::Upsample2x, vec![x], shape))
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        Ok(self.push(Op::Relu, vec![x], shape))
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let shapes: Vec<&[usize]> = parts.iter().map(|&p| self.shape(p)).collect();
        let shape = kernels::concat_shape(&shapes).map_err(|e| self.relabel("concat", e))?;
        Ok(self.push(Op::Concat, parts.to_vec(), shape))
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let shape = kernels::gap_shape(self.shape(x)).map_err(|e| self.relabel("global_avg_pool", e))?;
        Ok(self.push(Op::GlobalAvgPool, vec![x], shape))
    }

    pub fn dropout(&mut self, x: NodeId, rate: f64) -> Result<NodeId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(Op::Dropout { rate }, vec![x], shape))
    }

    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        if self.shape(x).is_empty() {
            return Err(shape_err(self.ctx("softmax"), "scalar input"));
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(Op::Softmax, vec![x], shape))
    }

    pub fn log(&mut self, x: NodeId, floor: f64) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        Ok(self.push(Op::Log { floor }, vec![x], shape))
    }

    pub fn reshape(&mut self, x: NodeId, shape: impl Into<Vec<usize>>) -> Result<NodeId> {
        let shape = shape.into();
        if numel(&shape) != numel(self.shape(x)) {
            return Err(shape_err(
                self.ctx("reshape"),
                format!("cannot reshape {:?} into {shape:?}", self.shape(x)),
            ));
        }
        Ok(self.push(Op::Reshape, vec![x], shape))
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        Ok(self.push(Op::Scale { factor }, vec![x], shape))
    }

    /// Which nodes reach `target` (inclusive); used to skip dead branches in
    /// the reverse pass.
    pub(crate) fn ancestors(&self, target: NodeId) -> Vec<bool> {
        let mut live = vec![false; self.nodes.len()];
        live[target.0] = true;
        for i in (0..=target.0).rev() {
            if live[i] {
                for inp in &self.nodes[i].inputs {
                    live[inp.0] = true;
                }
            }
        }
        live
    }

    /// Input names mapped to their declared shapes.
    pub fn input_shapes(&self) -> HashMap<String, Vec<usize>> {
        self.inputs
            .iter()
            .map(|(k, &id)| (k.clone(), self.shape(id).to_vec()))
            .collect()
    }
}
