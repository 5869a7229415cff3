//! Layers built on the autodiff primitives, plus the weighted categorical
//! cross-entropy loss.
//!
//! Layers that own parameters declare them on the graph under
//! `<name>.kernel` and `<name>.bias`.

mod functional;
mod loss;

pub use functional::{conv2d, global_avg_pool, max_pool2x2, relu, softmax, upsample_nearest2x};
pub use loss::{loss_mask, unweighted_cce, weighted_cce, weighted_cce_node, LossSpec, LOG_FLOOR};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Init, NodeId, Padding};
use crate::error::{shape_err, Error, Result};

/// One layer of a network definition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum LayerSpec {
    Conv2D {
        out_channels: usize,
        kernel_size: usize,
        stride: usize,
        padding: Padding,
    },
    MaxPool2x2,
    Dense {
        out_units: usize,
    },
    Dropout {
        rate: f64,
    },
    GlobalAvgPool,
    UpsampleNearest2x,
    Concat,
    Add,
    ReLU,
    Softmax,
}

impl LayerSpec {
    pub fn conv3x3(out_channels: usize) -> Self {
        LayerSpec::Conv2D {
            out_channels,
            kernel_size: 3,
            stride: 1,
            padding: Padding::Same,
        }
    }

    pub fn conv1x1(out_channels: usize) -> Self {
        LayerSpec::Conv2D {
            out_channels,
            kernel_size: 1,
            stride: 1,
            padding: Padding::Same,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            LayerSpec::Conv2D {
                kernel_size, stride, ..
            } => {
                if kernel_size != 1 && kernel_size != 3 {
                    return Err(Error::Config(format!("conv kernel size {kernel_size} not in {{1, 3}}")));
                }
                if stride != 1 {
                    return Err(Error::Config(format!("conv stride {stride} unsupported (only 1)")));
                }
                Ok(())
            }
            LayerSpec::Dropout { rate } if !(0.0..1.0).contains(&rate) => {
                Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")))
            }
            _ => Ok(()),
        }
    }

    /// Appends the layer to `graph`, declaring any parameters under `name`.
    pub fn apply(&self, graph: &mut Graph, name: &str, inputs: &[NodeId]) -> Result<NodeId> {
        self.validate()?;
        let one = |inputs: &[NodeId]| -> Result<NodeId> {
            match inputs {
                [x] => Ok(*x),
                _ => Err(shape_err(name, format!("expected one input, got {}", inputs.len()))),
            }
        };
        let id = match *self {
            LayerSpec::Conv2D {
                out_channels,
                kernel_size,
                padding,
                ..
            } => conv_layer(graph, name, one(inputs)?, out_channels, kernel_size, padding)?,
            LayerSpec::MaxPool2x2 => graph.max_pool2x2(one(inputs)?)?,
            LayerSpec::Dense { out_units } => dense_layer(graph, name, one(inputs)?, out_units)?,
            LayerSpec::Dropout { rate } => graph.dropout(one(inputs)?, rate)?,
            LayerSpec::GlobalAvgPool => graph.global_avg_pool(one(inputs)?)?,
            LayerSpec::UpsampleNearest2x => graph.upsample2x(one(inputs)?)?,
            LayerSpec::Concat => graph.concat(inputs)?,
            LayerSpec::Add => match inputs {
                [a, b] => graph.add(*a, *b)?,
                _ => return Err(shape_err(name, "add takes two inputs")),
            },
            LayerSpec::ReLU => graph.relu(one(inputs)?)?,
            LayerSpec::Softmax => graph.softmax(one(inputs)?)?,
        };
        graph.set_label(id, name);
        Ok(id)
    }

    /// Trainable parameter count for an input with `in_channels` channels
    /// (or features, for dense layers).
    pub fn parameter_count(&self, in_channels: usize) -> usize {
        match *self {
            LayerSpec::Conv2D {
                out_channels,
                kernel_size,
                ..
            } => kernel_size * kernel_size * in_channels * out_channels + out_channels,
            LayerSpec::Dense { out_units } => in_channels * out_units + out_units,
            _ => 0,
        }
    }
}

/// Conv2D with He-normal kernel and zero bias.
pub fn conv_layer(
    graph: &mut Graph,
    name: &str,
    x: NodeId,
    out_channels: usize,
    kernel_size: usize,
    padding: Padding,
) -> Result<NodeId> {
    let shape = graph.shape(x);
    if shape.len() != 4 {
        return Err(shape_err(name, format!("conv input must be NHWC, got {shape:?}")));
    }
    let cin = shape[3];
    let k = graph.param(
        &format!("{name}.kernel"),
        [kernel_size, kernel_size, cin, out_channels],
        Init::HeNormal {
            fan_in: kernel_size * kernel_size * cin,
        },
    )?;
    let b = graph.param(&format!("{name}.bias"), [out_channels], Init::Zeros)?;
    let y = graph.conv2d(x, k, b, padding)?;
    graph.set_label(y, name);
    Ok(y)
}

/// Fully connected layer on a `(batch, features)` node.
pub fn dense_layer(graph: &mut Graph, name: &str, x: NodeId, units: usize) -> Result<NodeId> {
    let shape = graph.shape(x);
    if shape.len() != 2 {
        return Err(shape_err(name, format!("dense input must be (batch, features), got {shape:?}")));
    }
    let fan_in = shape[1];
    let w = graph.param(&format!("{name}.kernel"), [fan_in, units], Init::HeNormal { fan_in })?;
    let b = graph.param(&format!("{name}.bias"), [units], Init::Zeros)?;
    let xw = graph.matmul(x, w)?;
    let y = graph.add(xw, b)?;
    graph.set_label(y, name);
    Ok(y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{declared_parameter_count, ParamTable};
    use crate::rng::Stream;

    #[test]
    fn dense_and_conv_parameter_formulas() {
        assert_eq!(LayerSpec::Dense { out_units: 3 }.parameter_count(4), 15);
        assert_eq!(LayerSpec::conv3x3(5).parameter_count(2), 95);

        let mut g = Graph::new();
        let x = g.input("x", [1, 4]).unwrap();
        LayerSpec::Dense { out_units: 3 }.apply(&mut g, "fc", &[x]).unwrap();
        assert_eq!(declared_parameter_count(&g), 15);
        assert_eq!(ParamTable::<f32>::initialize(&g, Stream::root(0)).count_parameters(), 15);

        let mut g = Graph::new();
        let x = g.input("x", [1, 6, 6, 2]).unwrap();
        LayerSpec::conv3x3(5).apply(&mut g, "conv", &[x]).unwrap();
        assert_eq!(declared_parameter_count(&g), 95);
    }

    #[test]
    fn spec_invariants_are_enforced() {
        let bad_kernel = LayerSpec::Conv2D {
            out_channels: 4,
            kernel_size: 5,
            stride: 1,
            padding: Padding::Same,
        };
        assert!(bad_kernel.validate().is_err());
        assert!(LayerSpec::Dropout { rate: 1.0 }.validate().is_err());
        assert!(LayerSpec::Dropout { rate: 0.5 }.validate().is_ok());
    }

    #[test]
    fn conv_layer_same_padding_preserves_shape() {
        let mut g = Graph::new();
        let x = g.input("x", [1, 224, 224, 3]).unwrap();
        let y = conv_layer(&mut g, "c", x, 64, 3, Padding::Same).unwrap();
        assert_eq!(g.shape(y), &[1, 224, 224, 64]);
    }

    #[test]
    fn channel_mismatch_is_an_error() {
        let mut g = Graph::new();
        let x = g.input("x", [1, 4, 4, 3]).unwrap();
        let k = g.param("k", [3, 3, 2, 4], Init::Zeros).unwrap();
        let b = g.param("b", [4], Init::Zeros).unwrap();
        let err = g.conv2d(x, k, b, Padding::Same).unwrap_err();
        assert!(err.to_string().contains("channel mismatch"), "{err}");
    }
}
