use indexmap::IndexMap;
use rand_distr::{Distribution, StandardNormal};

use super::graph::{Graph, Init};
use crate::error::{shape_err, Error, Result};
use crate::rng::Stream;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub trainable: bool,
}

/// Named parameter values, in declaration order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamTable<T> {
    entries: IndexMap<String, Param<T>>,
}

impl<T> Default for ParamTable<T> {
    fn default() -> Self {
        ParamTable {
            entries: IndexMap::new(),
        }
    }
}

impl<T: Scalar> ParamTable<T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Fresh values for every parameter the graph declares. Each parameter
    /// draws from its own stream keyed by name, so values do not depend on
    /// declaration order.
    pub fn initialize(graph: &Graph, stream: Stream) -> Self {
        let mut table = Self::new();
        for decl in graph.params() {
            table.insert(&decl.name, init_tensor(&decl.shape, decl.init, stream.named(&decl.name)), true);
        }
        table
    }

    pub fn insert(&mut self, name: &str, value: Tensor<T>, trainable: bool) {
        self.entries.insert(name.to_string(), Param { value, trainable });
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.get(name).map(|p| &p.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries.get_mut(name).map(|p| &mut p.value)
    }

    pub fn param(&self, name: &str) -> Option<&Param<T>> {
        self.entries.get(name)
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<()> {
        let p = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.into()))?;
        p.trainable = trainable;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<T>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total element count of the trainable parameters.
    pub fn count_parameters(&self) -> usize {
        self.entries
            .values()
            .filter(|p| p.trainable)
            .map(|p| p.value.numel())
            .sum()
    }

    /// Element count of trainable parameters whose name starts with `prefix`.
    pub fn count_with_prefix(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|(k, p)| p.trainable && k.starts_with(prefix))
            .map(|(_, p)| p.value.numel())
            .sum()
    }

    /// Checks that every declared parameter is present with its declared shape.
    pub fn check_against(&self, graph: &Graph) -> Result<()> {
        for decl in graph.params() {
            let value = self.get(&decl.name).ok_or_else(|| Error::MissingParam(decl.name.clone()))?;
            if value.shape() != decl.shape.as_slice() {
                return Err(shape_err(
                    decl.name.clone(),
                    format!("parameter has shape {:?}, graph declares {:?}", value.shape(), decl.shape),
                ));
            }
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ParamTable<U> {
        ParamTable {
            entries: self
                .entries
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            value: p.value.cast(),
                            trainable: p.trainable,
                        },
                    )
                })
                .collect(),
        }
    }
}

/// Element count of every parameter a graph declares, without allocating values.
pub fn declared_parameter_count(graph: &Graph) -> usize {
    graph.params().map(|d| d.shape.iter().product::<usize>()).sum()
}

pub(crate) fn init_tensor<T: Scalar>(shape: &[usize], init: Init, stream: Stream) -> Tensor<T> {
    match init {
        Init::Zeros => Tensor::zeros(shape.to_vec()),
        Init::HeNormal { fan_in } => {
            let std = (2.0 / fan_in as f64).sqrt();
            let mut rng = stream.rng();
            let n: usize = shape.iter().product();
            let data = (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    T::lit(z * std)
                })
                .collect();
            Tensor::new(shape.to_vec(), data).expect("shape matches element count")
        }
    }
}

/// Gradient of a scalar loss with respect to each trainable parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientMap<T> {
    grads: IndexMap<String, Tensor<T>>,
}

impl<T> FromIterator<(String, Tensor<T>)> for GradientMap<T> {
    fn from_iter<I: IntoIterator<Item = (String, Tensor<T>)>>(iter: I) -> Self {
        GradientMap {
            grads: iter.into_iter().collect(),
        }
    }
}

impl<T: Scalar> GradientMap<T> {
    pub(crate) fn from_map(grads: IndexMap<String, Tensor<T>>) -> Self {
        GradientMap { grads }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.grads.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.grads.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Elementwise sum of two gradient maps over the same parameters.
    pub fn sum(&self, other: &GradientMap<T>) -> Result<GradientMap<T>> {
        let mut out = self.grads.clone();
        for (k, v) in out.iter_mut() {
            let o = other.get(k).ok_or_else(|| Error::MissingParam(k.clone()))?;
            v.add_assign(o)?;
        }
        Ok(GradientMap { grads: out })
    }
}
