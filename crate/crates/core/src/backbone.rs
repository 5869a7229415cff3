//! VGG-style pyramidal encoders.
//!
//! Each block is `convs × (3×3 same conv + ReLU)` followed by a 2×2 max-pool,
//! and the pooled output of block `i` is the pyramid tap at scale `i`, with
//! spatial size `input / 2^i`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Bindings, Graph, Mode, NodeId, Padding, ParamTable};
use crate::error::{shape_err, Error, Result};
use crate::nn::conv_layer;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub name: String,
    /// `[height, width, channels]` of the input image.
    pub input: [usize; 3],
    /// `(conv count, channels)` per block, finest first.
    pub blocks: Vec<(usize, usize)>,
}

impl BackboneConfig {
    /// VGG16 convolutional stack at 224×224×3.
    pub fn vgg16() -> Self {
        BackboneConfig {
            name: "vgg16".into(),
            input: [224, 224, 3],
            blocks: vec![(2, 64), (2, 128), (3, 256), (3, 512), (3, 512)],
        }
    }

    /// Desk-scale encoder used by tests and synthetic experiments.
    pub fn micro() -> Self {
        BackboneConfig {
            name: "micro".into(),
            input: [64, 64, 1],
            blocks: vec![(1, 8), (1, 16), (1, 32), (1, 64)],
        }
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.blocks.len();
        if n == 0 {
            return Err(Error::Config("backbone needs at least one block".into()));
        }
        if self.blocks.iter().any(|&(convs, ch)| convs == 0 || ch == 0) {
            return Err(Error::Config(format!("backbone blocks must be positive: {:?}", self.blocks)));
        }
        let [h, w, c] = self.input;
        let div = 1usize << n;
        if c == 0 || h == 0 || w == 0 || h % div != 0 || w % div != 0 {
            return Err(Error::Config(format!(
                "input {h}×{w}×{c} is not divisible by 2^{n} = {div} for a {n}-block encoder"
            )));
        }
        Ok(())
    }

    /// Spatial side of the tap at each scale (for square inputs).
    pub fn tap_sizes(&self) -> Vec<usize> {
        (1..=self.depth()).map(|i| self.input[0] >> i).collect()
    }

    pub fn tap_channels(&self, scale: usize) -> usize {
        self.blocks[scale - 1].1
    }
}

/// A pyramid tap in a built graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Tap {
    /// Scale index, 1 = finest.
    pub scale: usize,
    pub node: NodeId,
    pub size: usize,
    pub channels: usize,
}

/// A feature map tagged with its pyramid scale.
#[derive(Clone, Debug, PartialEq)]
pub struct PyramidFeature<T> {
    pub scale: usize,
    /// `(x, x, channels)`.
    pub map: Tensor<T>,
}

impl<T: Scalar> PyramidFeature<T> {
    pub fn new(scale: usize, map: Tensor<T>) -> Result<Self> {
        match map.shape() {
            [h, w, _] if h == w => Ok(PyramidFeature { scale, map }),
            s => Err(shape_err(format!("scale {scale}"), format!("expected (x, x, c), got {s:?}"))),
        }
    }

    pub fn size(&self) -> usize {
        self.map.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.map.shape()[2]
    }
}

/// Appends the encoder to `graph` on top of `image` (NHWC) and returns one
/// tap per block, finest first.
pub fn build_backbone(graph: &mut Graph, config: &BackboneConfig, image: NodeId) -> Result<Vec<Tap>> {
    config.validate()?;
    let shape = graph.shape(image);
    if shape.len() != 4 || shape[1..] != config.input {
        return Err(shape_err(
            "encoder",
            format!("image node has shape {shape:?}, config expects (batch, {:?})", config.input),
        ));
    }
    let mut x = image;
    let mut taps = Vec::with_capacity(config.depth());
    for (b, &(convs, channels)) in config.blocks.iter().enumerate() {
        let scale = b + 1;
        for c in 0..convs {
            let name = format!("encoder.block{scale}.conv{}", c + 1);
            let y = conv_layer(graph, &name, x, channels, 3, Padding::Same)?;
            x = graph.relu(y)?;
            graph.set_label(x, format!("{name}.relu"));
        }
        x = graph.max_pool2x2(x)?;
        graph.set_label(x, format!("encoder.block{scale}"));
        taps.push(Tap {
            scale,
            node: x,
            size: graph.shape(x)[1],
            channels,
        });
    }
    Ok(taps)
}

/// A standalone encoder: graph, taps and freshly initialized parameters.
pub struct Backbone<T> {
    pub config: BackboneConfig,
    pub graph: Graph,
    pub image: NodeId,
    pub taps: Vec<Tap>,
    pub params: ParamTable<T>,
}

impl<T: Scalar> Backbone<T> {
    pub fn new(config: BackboneConfig, batch: usize, seed: u64) -> Result<Self> {
        let mut graph = Graph::new();
        let mut shape = vec![batch];
        shape.extend_from_slice(&config.input);
        let image = graph.input("image", shape)?;
        let taps = build_backbone(&mut graph, &config, image)?;
        let params = ParamTable::initialize(&graph, crate::Stream::root(seed).named("init"));
        Ok(Backbone {
            config,
            graph,
            image,
            taps,
            params,
        })
    }

    /// Encoder features of a single `(h, w, c)` image, finest scale first.
    pub fn forward_pyramid(&self, image: &Tensor<T>) -> Result<Vec<PyramidFeature<T>>> {
        let mut shape = vec![1];
        shape.extend_from_slice(image.shape());
        let mut inputs = Bindings::new();
        inputs.insert("image".to_string(), image.reshape(shape)?);
        let ev = self.graph.eval(&self.params, &inputs, Mode::Infer)?;
        self.taps
            .iter()
            .map(|tap| {
                let v = ev.value(tap.node);
                PyramidFeature::new(tap.scale, v.reshape(v.shape()[1..].to_vec())?)
            })
            .collect()
    }
}
