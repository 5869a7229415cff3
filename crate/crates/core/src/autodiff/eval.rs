use std::collections::HashMap;

use indexmap::IndexMap;

use super::graph::{Graph, NodeId, Op};
use super::kernels;
use super::params::{GradientMap, ParamTable};
use crate::error::{shape_err, Error, Result};
use crate::rng::Stream;
use crate::tensor::{Scalar, Tensor};

/// Values bound to graph inputs by name.
pub type Bindings<T> = HashMap<String, Tensor<T>>;

/// Forward-pass mode. Dropout draws its masks from the stream in training
/// mode and is the identity at inference.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train(Stream),
    Infer,
}

/// The result of a forward pass: every node's value, kept for the reverse pass.
pub struct Evaluation<'a, T> {
    graph: &'a Graph,
    params: &'a ParamTable<T>,
    inputs: &'a Bindings<T>,
    values: Vec<Option<Tensor<T>>>,
    masks: Vec<Option<Vec<T>>>,
}

impl Graph {
    /// Runs the forward pass.
    pub fn eval<'a, T: Scalar>(
        &'a self,
        params: &'a ParamTable<T>,
        inputs: &'a Bindings<T>,
        mode: Mode,
    ) -> Result<Evaluation<'a, T>> {
        params.check_against(self)?;
        for (name, &id) in &self.inputs {
            let t = inputs.get(name).ok_or_else(|| Error::UnboundInput(name.clone()))?;
            if t.shape() != self.shape(id) {
                return Err(shape_err(
                    name.clone(),
                    format!("bound tensor has shape {:?}, input declares {:?}", t.shape(), self.shape(id)),
                ));
            }
        }

        let mut ev = Evaluation {
            graph: self,
            params,
            inputs,
            values: Vec::with_capacity(self.nodes.len()),
            masks: vec![None; self.nodes.len()],
        };
        for (i, node) in self.nodes.iter().enumerate() {
            let val = ev.forward_node(i, mode).map_err(|e| match e {
                Error::Shape { detail, .. } => shape_err(node.label.clone(), detail),
                other => other,
            })?;
            debug_assert!(val.as_ref().is_none_or(|v| v.shape() == node.shape.as_slice()));
            ev.values.push(val);
        }
        Ok(ev)
    }
}

impl<'a, T: Scalar> Evaluation<'a, T> {
    pub fn graph(&self) -> &Graph {
        self.graph
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        match &self.graph.nodes[id.0].op {
            Op::Input { name } => &self.inputs[name],
            Op::Param { name } => self.params.get(name).expect("checked before evaluation"),
            _ => self.values[id.0].as_ref().expect("evaluated"),
        }
    }

    /// Values of every sink node, keyed by label.
    pub fn outputs(&self) -> IndexMap<String, Tensor<T>> {
        self.graph
            .sinks()
            .into_iter()
            .map(|id| (self.graph.node(id).label.clone(), self.value(id).clone()))
            .collect()
    }

    fn forward_node(&mut self, i: usize, mode: Mode) -> Result<Option<Tensor<T>>> {
        let node = &self.graph.nodes[i];
        let arg = |k: usize| self.value(node.inputs[k]);
        let out = match &node.op {
            Op::Input { .. } | Op::Param { .. } => return Ok(None),
            Op::Add => kernels::binary(arg(0), arg(1), |a, b| a + b)?,
            Op::Sub => kernels::binary(arg(0), arg(1), |a, b| a - b)?,
            Op::Mul => kernels::binary(arg(0), arg(1), |a, b| a * b)?,
            Op::MatMul => kernels::matmul(arg(0), arg(1))?,
            Op::Conv2d { padding } => kernels::conv2d(arg(0), arg(1), arg(2), *padding)?,
            Op::MaxPool2x2 => kernels::max_pool2x2(arg(0))?,
            Op::Upsample2x => kernels::upsample_nearest2x(arg(0))?,
            Op::Relu => arg(0).map(|v| if v > T::zero() { v } else { T::zero() }),
            Op::Concat => {
                let parts: Vec<&Tensor<T>> = node.inputs.iter().map(|&id| self.value(id)).collect();
                kernels::concat(&parts)?
            }
            Op::GlobalAvgPool => kernels::global_avg_pool(arg(0))?,
            Op::Dropout { rate } => match mode {
                Mode::Infer => arg(0).clone(),
                Mode::Train(stream) => {
                    let x = arg(0);
                    let mut rng = stream.index(i as u64).rng();
                    let mask: Vec<T> = kernels::dropout_mask(x.numel(), *rate, &mut rng);
                    let data = x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
                    let out = Tensor::new(x.shape().to_vec(), data)?;
                    self.masks[i] = Some(mask);
                    out
                }
            },
            Op::Softmax => kernels::softmax(arg(0))?,
            Op::Log { floor } => {
                let f = T::lit(*floor);
                arg(0).map(|v| v.max(f).ln())
            }
            Op::Reshape => arg(0).reshape(node.shape.clone())?,
            Op::Scale { factor } => {
                let s = T::lit(*factor);
                arg(0).map(|v| v * s)
            }
        };
        Ok(Some(out))
    }

    /// Gradient of a scalar node with respect to every trainable parameter.
    /// Parameters the loss does not depend on get zero tensors.
    pub fn backward(&self, loss: NodeId) -> Result<GradientMap<T>> {
        let shape = self.graph.shape(loss);
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(shape.to_vec()));
        }
        let adj = self.backward_from(loss, Tensor::full(shape.to_vec(), T::one()))?;
        let mut grads = IndexMap::new();
        for decl in self.graph.params() {
            let trainable = self.params.param(&decl.name).is_some_and(|p| p.trainable);
            if !trainable {
                continue;
            }
            let g = adj
                .get(decl.node)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(decl.shape.clone()));
            grads.insert(decl.name.clone(), g);
        }
        Ok(GradientMap::from_map(grads))
    }

    /// Reverse pass seeded with `seed` at `target`. Returns the adjoint of
    /// every node that depends on a parameter and feeds `target`.
    pub fn backward_from(&self, target: NodeId, seed: Tensor<T>) -> Result<Adjoints<T>> {
        let graph = self.graph;
        if seed.shape() != graph.shape(target) {
            return Err(shape_err(
                graph.node(target).label.clone(),
                format!("seed shape {:?} vs node shape {:?}", seed.shape(), graph.shape(target)),
            ));
        }
        let live = graph.ancestors(target);
        // needs[i]: node i depends on some parameter, so its adjoint is useful
        let mut needs = vec![false; graph.nodes.len()];
        for (i, n) in graph.nodes.iter().enumerate() {
            needs[i] = matches!(n.op, Op::Param { .. }) || n.inputs.iter().any(|x| needs[x.0]);
        }

        let mut adj: Vec<Option<Tensor<T>>> = vec![None; graph.nodes.len()];
        adj[target.0] = Some(seed);
        for i in (0..=target.0).rev() {
            if !live[i] || !needs[i] {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            let node = &graph.nodes[i];
            let contributions = self.node_backward(i, &g, &needs)?;
            for (inp, c) in node.inputs.iter().zip(contributions) {
                let Some(c) = c else { continue };
                match &mut adj[inp.0] {
                    Some(acc) => acc.add_assign(&c)?,
                    slot @ None => *slot = Some(c),
                }
            }
            adj[i] = Some(g);
        }
        Ok(Adjoints { adj })
    }

    fn node_backward(&self, i: usize, g: &Tensor<T>, needs: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        let node = &self.graph.nodes[i];
        let want = |k: usize| needs[node.inputs[k].0];
        let arg = |k: usize| self.value(node.inputs[k]);
        let out = match &node.op {
            Op::Input { .. } | Op::Param { .. } => vec![],
            Op::Add => vec![
                want(0).then(|| kernels::unbroadcast(g, arg(0).shape())).transpose()?,
                want(1).then(|| kernels::unbroadcast(g, arg(1).shape())).transpose()?,
            ],
            Op::Sub => vec![
                want(0).then(|| kernels::unbroadcast(g, arg(0).shape())).transpose()?,
                want(1)
                    .then(|| kernels::unbroadcast(g, arg(1).shape()).map(|t| t.map(|v| -v)))
                    .transpose()?,
            ],
            Op::Mul => vec![
                want(0).then(|| kernels::binary(g, arg(1), |a, b| a * b)).transpose()?,
                want(1).then(|| kernels::binary(g, arg(0), |a, b| a * b)).transpose()?,
            ],
            Op::MatMul => {
                let (da, db) = kernels::matmul_backward(arg(0), arg(1), g)?;
                vec![want(0).then_some(da), want(1).then_some(db)]
            }
            Op::Conv2d { padding } => {
                let (dx, dk, db) = kernels::conv2d_backward(arg(0), arg(1), g, *padding, want(0))?;
                vec![dx, want(1).then_some(dk), want(2).then_some(db)]
            }
            Op::MaxPool2x2 => vec![Some(kernels::max_pool2x2_backward(arg(0), g)?)],
            Op::Upsample2x => vec![Some(kernels::upsample_nearest2x_backward(arg(0).shape(), g)?)],
            Op::Relu => vec![Some(kernels::binary(g, arg(0), |d, x| if x > T::zero() { d } else { T::zero() })?)],
            Op::Concat => {
                let shapes: Vec<Vec<usize>> = node.inputs.iter().map(|&x| self.graph.shape(x).to_vec()).collect();
                kernels::concat_backward(&shapes, g)?
                    .into_iter()
                    .enumerate()
                    .map(|(k, t)| want(k).then_some(t))
                    .collect()
            }
            Op::GlobalAvgPool => vec![Some(kernels::global_avg_pool_backward(arg(0).shape(), g)?)],
            Op::Dropout { .. } => match &self.masks[i] {
                Some(mask) => {
                    let data = g.data().iter().zip(mask).map(|(&d, &m)| d * m).collect();
                    vec![Some(Tensor::new(g.shape().to_vec(), data)?)]
                }
                None => vec![Some(g.clone())],
            },
            Op::Softmax => vec![Some(kernels::softmax_backward(self.value(NodeId(i)), g)?)],
            Op::Log { floor } => {
                let f = T::lit(*floor);
                vec![Some(kernels::binary(g, arg(0), |d, x| if x > f { d / x } else { T::zero() })?)]
            }
            Op::Reshape => vec![Some(g.reshape(arg(0).shape().to_vec())?)],
            Op::Scale { factor } => {
                let s = T::lit(*factor);
                vec![Some(g.map(|v| v * s))]
            }
        };
        Ok(out)
    }
}

/// Per-node adjoints from a reverse pass.
pub struct Adjoints<T> {
    adj: Vec<Option<Tensor<T>>>,
}

impl<T> Adjoints<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.adj.get(id.0).and_then(Option::as_ref)
    }
}
