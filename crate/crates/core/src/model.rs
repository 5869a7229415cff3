//! The full classifier: encoder, fusion head and weighted CCE loss in one graph.

use serde::{Deserialize, Serialize};

use crate::autodiff::{declared_parameter_count, Bindings, Graph, Mode, NodeId, ParamTable};
use crate::backbone::{build_backbone, BackboneConfig, Tap};
use crate::error::{shape_err, Result};
use crate::fusion::{build_fusion, FusionConfig, FusionNodes};
use crate::nn::{loss_mask, weighted_cce_node};
use crate::rng::Stream;
use crate::tensor::{Scalar, Tensor};

pub const IMAGE_INPUT: &str = "image";
pub const MASK_INPUT: &str = "loss_mask";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub fusion: FusionConfig,
}

impl ModelConfig {
    /// FPN-VGG16 at 224×224×3.
    pub fn fpn_vgg16(top_k: usize, n_classes: usize) -> Self {
        ModelConfig {
            backbone: BackboneConfig::vgg16(),
            fusion: FusionConfig::full(top_k, n_classes),
        }
    }

    /// Micro encoder at 64×64×1 with the micro head.
    pub fn micro(top_k: usize, n_classes: usize) -> Self {
        ModelConfig {
            backbone: BackboneConfig::micro(),
            fusion: FusionConfig::micro(top_k, n_classes),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.fusion.validate(self.backbone.depth())
    }

    pub fn n_classes(&self) -> usize {
        self.fusion.n_classes
    }
}

/// Parameter counts per section.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamBreakdown {
    pub encoder: usize,
    pub fusion: usize,
    pub classifier: usize,
    pub total: usize,
}

/// A built classifier graph for a fixed batch size.
#[derive(Clone, Debug)]
pub struct FpnModel {
    pub config: ModelConfig,
    pub batch: usize,
    pub graph: Graph,
    pub image: NodeId,
    pub taps: Vec<Tap>,
    pub fusion: FusionNodes,
    pub mask: NodeId,
    pub loss: NodeId,
}

impl FpnModel {
    pub fn build(config: &ModelConfig, batch: usize) -> Result<Self> {
        config.validate()?;
        let mut graph = Graph::new();
        let mut shape = vec![batch];
        shape.extend_from_slice(&config.backbone.input);
        let image = graph.input(IMAGE_INPUT, shape)?;
        let taps = build_backbone(&mut graph, &config.backbone, image)?;
        let fusion = build_fusion(&mut graph, &config.fusion, &taps)?;
        let (mask, loss) = weighted_cce_node(&mut graph, fusion.probs, MASK_INPUT)?;
        Ok(FpnModel {
            config: config.clone(),
            batch,
            graph,
            image,
            taps,
            fusion,
            mask,
            loss,
        })
    }

    /// He-normal weights and zero biases drawn from the `init` stream of `seed`.
    pub fn init_params<T: Scalar>(&self, seed: u64) -> ParamTable<T> {
        ParamTable::initialize(&self.graph, Stream::root(seed).named("init"))
    }

    pub fn declared_parameters(&self) -> usize {
        declared_parameter_count(&self.graph)
    }

    pub fn breakdown<T: Scalar>(params: &ParamTable<T>) -> ParamBreakdown {
        ParamBreakdown {
            encoder: params.count_with_prefix("encoder."),
            fusion: params.count_with_prefix("fusion."),
            classifier: params.count_with_prefix("classifier."),
            total: params.count_parameters(),
        }
    }

    /// Binds a stacked image batch and, when labels are given, the loss mask
    /// (zeros otherwise).
    pub fn bindings<T: Scalar>(&self, images: Tensor<T>, labels: Option<&[usize]>, weights: &[f64]) -> Result<Bindings<T>> {
        let n = self.batch * self.config.n_classes();
        let mask = match labels {
            Some(l) => loss_mask(l, weights)?,
            None => Tensor::zeros([n, 1]),
        };
        if mask.shape() != [n, 1] {
            return Err(shape_err(MASK_INPUT, format!("mask {:?} for batch {}", mask.shape(), self.batch)));
        }
        let mut b = Bindings::new();
        b.insert(IMAGE_INPUT.to_string(), images);
        b.insert(MASK_INPUT.to_string(), mask);
        Ok(b)
    }

    /// Class probabilities `(batch, n_classes)` for a stacked image batch.
    pub fn predict<T: Scalar>(&self, params: &ParamTable<T>, images: Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let inputs = self.bindings(images, None, &vec![1.0; self.config.n_classes()])?;
        let ev = self.graph.eval(params, &inputs, mode)?;
        Ok(ev.value(self.fusion.probs).clone())
    }
}

/// Stacks `(h, w, c)` images (given as flat row-major data) into an NHWC batch.
pub fn stack_images<T: Scalar>(images: &[&[T]], shape: [usize; 3]) -> Result<Tensor<T>> {
    let per: usize = shape.iter().product();
    let mut data = Vec::with_capacity(per * images.len());
    for img in images {
        if img.len() != per {
            return Err(shape_err(IMAGE_INPUT, format!("image has {} values, expected {per}", img.len())));
        }
        data.extend_from_slice(img);
    }
    Tensor::new(vec![images.len(), shape[0], shape[1], shape[2]], data)
}
