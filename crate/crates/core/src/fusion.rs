//! Feature-pyramid fusion and the classifier head.
//!
//! For the `top_k` coarsest encoder taps `X^i` (scales `n-k+1 ..= n`):
//!
//! 1. lateral 1×1 projection of every tap to `lateral_channels`, no activation;
//! 2. top-down merge `Y^n = X^n`, `Y^i = X^i + up2(Y^{i+1})`;
//! 3. two 3×3 same convolutions per merged scale (each followed by ReLU);
//! 4. global average pooling per scale, concatenated in ascending scale order;
//! 5. dense(`head_units`) + ReLU, dropout, dense(`n_classes`), softmax.
//!
//! With [`MergeRule::Literal`] step 2 adds the upsampled *projection*
//! `X^{i+1}` instead of the merged `Y^{i+1}`; the two agree for `top_k ≤ 2`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, Padding};
use crate::backbone::{PyramidFeature, Tap};
use crate::error::{shape_err, Error, Result};
use crate::nn::{self, conv_layer, dense_layer};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MergeRule {
    /// Each scale receives the already merged map from the scale above.
    #[default]
    Cascade,
    /// Each scale receives the raw lateral projection from the scale above.
    Literal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Upsampling {
    #[default]
    Nearest,
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    /// Number of coarsest scales merged.
    pub top_k: usize,
    pub lateral_channels: usize,
    pub head_units: usize,
    pub dropout: f64,
    pub n_classes: usize,
    #[serde(default = "default_true")]
    pub head_relu: bool,
    #[serde(default)]
    pub merge: MergeRule,
    #[serde(default)]
    pub upsampling: Upsampling,
}

impl FusionConfig {
    /// Full-scale head: 256 lateral channels, 512 dense units, dropout 0.5.
    pub fn full(top_k: usize, n_classes: usize) -> Self {
        FusionConfig {
            top_k,
            lateral_channels: 256,
            head_units: 512,
            dropout: 0.5,
            n_classes,
            head_relu: true,
            merge: MergeRule::Cascade,
            upsampling: Upsampling::Nearest,
        }
    }

    /// Desk-scale head paired with the micro encoder.
    pub fn micro(top_k: usize, n_classes: usize) -> Self {
        FusionConfig {
            lateral_channels: 16,
            head_units: 32,
            ..Self::full(top_k, n_classes)
        }
    }

    pub fn validate(&self, depth: usize) -> Result<()> {
        if self.top_k == 0 || self.top_k > depth {
            return Err(Error::Config(format!(
                "top_k = {} must be in 1..={depth} for a {depth}-block encoder",
                self.top_k
            )));
        }
        if self.lateral_channels == 0 || self.head_units == 0 || self.n_classes < 2 {
            return Err(Error::Config(format!(
                "fusion widths must be positive and n_classes ≥ 2: {self:?}"
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    /// Merged scale indices in ascending order.
    pub fn merged_scales(&self, depth: usize) -> Vec<usize> {
        (depth + 1 - self.top_k..=depth).collect()
    }

    pub fn concat_width(&self) -> usize {
        self.top_k * self.lateral_channels
    }
}

/// Handles to the fusion nodes of a built graph. Per-scale vectors are in
/// ascending scale order.
#[derive(Clone, Debug)]
pub struct FusionNodes {
    pub laterals: Vec<(usize, NodeId)>,
    pub merged: Vec<(usize, NodeId)>,
    pub heads: Vec<(usize, NodeId)>,
    pub features: NodeId,
    pub logits: NodeId,
    pub probs: NodeId,
}

impl FusionNodes {
    pub fn head(&self, scale: usize) -> Option<NodeId> {
        self.heads.iter().find(|(s, _)| *s == scale).map(|&(_, id)| id)
    }
}

/// Appends the fusion stage and classifier on top of the encoder taps.
pub fn build_fusion(graph: &mut Graph, config: &FusionConfig, taps: &[Tap]) -> Result<FusionNodes> {
    let depth = taps.len();
    config.validate(depth)?;
    let scales = config.merged_scales(depth);
    let tap = |s: usize| taps[s - 1];
    let lc = config.lateral_channels;

    let mut laterals = Vec::with_capacity(scales.len());
    for &s in &scales {
        let id = conv_layer(graph, &format!("fusion.lateral{s}"), tap(s).node, lc, 1, Padding::Same)?;
        laterals.push((s, id));
    }

    // top-down, coarsest first
    let mut merged = vec![laterals[laterals.len() - 1]];
    for (idx, &(s, x)) in laterals.iter().enumerate().rev().skip(1) {
        let upper = match config.merge {
            MergeRule::Cascade => merged[merged.len() - 1].1,
            MergeRule::Literal => laterals[idx + 1].1,
        };
        let up = graph.upsample2x(upper)?;
        graph.set_label(up, format!("fusion.up{}", s + 1));
        let y = graph.add(x, up)?;
        graph.set_label(y, format!("fusion.merge{s}"));
        merged.push((s, y));
    }
    merged.reverse();

    let mut heads = Vec::with_capacity(scales.len());
    let mut pooled = Vec::with_capacity(scales.len());
    for &(s, y) in &merged {
        let mut h = y;
        for c in 1..=2 {
            let name = format!("fusion.head{s}.conv{c}");
            h = conv_layer(graph, &name, h, lc, 3, Padding::Same)?;
            if config.head_relu {
                h = graph.relu(h)?;
                graph.set_label(h, format!("{name}.relu"));
            }
        }
        heads.push((s, h));
        let p = graph.global_avg_pool(h)?;
        graph.set_label(p, format!("fusion.gap{s}"));
        pooled.push(p);
    }

    let features = if pooled.len() == 1 { pooled[0] } else { graph.concat(&pooled)? };
    graph.set_label(features, "fusion.concat");
    let dense = dense_layer(graph, "classifier.dense", features, config.head_units)?;
    let act = graph.relu(dense)?;
    graph.set_label(act, "classifier.dense.relu");
    let dropped = graph.dropout(act, config.dropout)?;
    graph.set_label(dropped, "classifier.dropout");
    let logits = dense_layer(graph, "classifier.out", dropped, config.n_classes)?;
    graph.set_label(logits, "logits");
    let probs = graph.softmax(logits)?;
    graph.set_label(probs, "probs");

    Ok(FusionNodes {
        laterals,
        merged,
        heads,
        features,
        logits,
        probs,
    })
}

/// Parameters added by merging one more scale whose tap has `tap_channels`
/// channels: its lateral projection, its two head convolutions, and the
/// extra input columns of the dense layer.
pub fn scale_parameter_delta(config: &FusionConfig, tap_channels: usize) -> usize {
    let l = config.lateral_channels;
    (tap_channels * l + l) + 2 * (9 * l * l + l) + l * config.head_units
}

/// 1×1 projection of a pyramid feature, without activation.
pub fn lateral_project<T: Scalar>(feature: &PyramidFeature<T>, kernel: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    if kernel.rank() != 4 || kernel.shape()[..2] != [1, 1] {
        return Err(shape_err("lateral_project", format!("expected a 1×1 kernel, got {:?}", kernel.shape())));
    }
    nn::conv2d(&feature.map, kernel, bias, Padding::Same)
}

/// Merged maps `Y^i`, coarsest first.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedPyramid<T> {
    pub levels: Vec<Tensor<T>>,
}

/// Top-down merge of lateral projections given coarsest first.
pub fn top_down_merge<T: Scalar>(projected: &[Tensor<T>], rule: MergeRule) -> Result<FusedPyramid<T>> {
    let first = projected
        .first()
        .ok_or_else(|| shape_err("top_down_merge", "no scales given"))?;
    let mut levels = vec![first.clone()];
    for (i, x) in projected.iter().enumerate().skip(1) {
        let upper = match rule {
            MergeRule::Cascade => &levels[i - 1],
            MergeRule::Literal => &projected[i - 1],
        };
        let up = nn::upsample_nearest2x(upper)?;
        if up.shape() != x.shape() {
            return Err(shape_err(
                "top_down_merge",
                format!(
                    "scale chain is not dyadic: {:?} upsamples to {:?}, next scale is {:?}",
                    upper.shape(),
                    up.shape(),
                    x.shape()
                ),
            ));
        }
        let mut y = x.clone();
        y.add_assign(&up)?;
        levels.push(y);
    }
    Ok(FusedPyramid { levels })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{build_backbone, BackboneConfig};

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), v).unwrap()
    }

    #[test]
    fn lateral_projection_shapes_and_identity() {
        let f = PyramidFeature::new(5, Tensor::<f32>::zeros([7, 7, 512])).unwrap();
        let y = lateral_project(&f, &Tensor::zeros([1, 1, 512, 256]), &Tensor::zeros([256])).unwrap();
        assert_eq!(y.shape(), &[7, 7, 256]);

        let f = PyramidFeature::new(3, Tensor::<f32>::zeros([8, 8, 32])).unwrap();
        let y = lateral_project(&f, &Tensor::zeros([1, 1, 32, 16]), &Tensor::zeros([16])).unwrap();
        assert_eq!(y.shape(), &[8, 8, 16]);

        let map = t(&[2, 2, 3], &(0..12).map(f64::from).collect::<Vec<_>>());
        let mut eye = vec![0.0; 9];
        for i in 0..3 {
            eye[i * 3 + i] = 1.0;
        }
        let y = lateral_project(
            &PyramidFeature::new(1, map.clone()).unwrap(),
            &t(&[1, 1, 3, 3], &eye),
            &Tensor::zeros([3]),
        )
        .unwrap();
        assert_eq!(y, map);
    }

    #[test]
    fn lateral_channel_mismatch() {
        let f = PyramidFeature::new(1, Tensor::<f32>::zeros([4, 4, 8])).unwrap();
        assert!(lateral_project(&f, &Tensor::zeros([1, 1, 4, 2]), &Tensor::zeros([2])).is_err());
    }

    #[test]
    fn merge_hand_example() {
        let coarse = t(&[1, 1, 1], &[2.]);
        let fine = t(&[2, 2, 1], &[1., 2., 3., 4.]);
        let fused = top_down_merge(&[coarse.clone(), fine], MergeRule::Cascade).unwrap();
        assert_eq!(fused.levels[0], coarse);
        assert_eq!(fused.levels[1].data(), &[3., 4., 5., 6.]);
    }

    #[test]
    fn merge_zero_coarse_is_identity_and_shapes_hold() {
        let fine = t(&[2, 2, 1], &[1., 2., 3., 4.]);
        let fused = top_down_merge(&[Tensor::zeros([1, 1, 1]), fine.clone()], MergeRule::Cascade).unwrap();
        assert_eq!(fused.levels[1], fine);

        let fused = top_down_merge(
            &[Tensor::<f32>::zeros([7, 7, 256]), Tensor::zeros([14, 14, 256])],
            MergeRule::Cascade,
        )
        .unwrap();
        assert_eq!(fused.levels[1].shape(), &[14, 14, 256]);
    }

    #[test]
    fn merge_rejects_non_dyadic_chain() {
        let r = top_down_merge(&[Tensor::<f32>::zeros([3, 3, 1]), Tensor::zeros([7, 7, 1])], MergeRule::Cascade);
        assert!(r.is_err());
    }

    #[test]
    fn cascade_and_literal_differ_only_beyond_two_scales() {
        let x3 = t(&[1, 1, 1], &[1.]);
        let x2 = t(&[2, 2, 1], &[1.; 4]);
        let x1 = t(&[4, 4, 1], &[0.; 16]);
        let c = top_down_merge(&[x3.clone(), x2.clone()], MergeRule::Cascade).unwrap();
        let l = top_down_merge(&[x3.clone(), x2.clone()], MergeRule::Literal).unwrap();
        assert_eq!(c, l);
        let c = top_down_merge(&[x3.clone(), x2.clone(), x1.clone()], MergeRule::Cascade).unwrap();
        let l = top_down_merge(&[x3, x2, x1], MergeRule::Literal).unwrap();
        assert_eq!(c.levels[2].data()[0], 2.0);
        assert_eq!(l.levels[2].data()[0], 1.0);
    }

    fn build(top_k: usize, backbone: &BackboneConfig, fusion: FusionConfig) -> (Graph, FusionNodes) {
        let mut g = Graph::new();
        let mut shape = vec![1];
        shape.extend_from_slice(&backbone.input);
        let img = g.input("image", shape).unwrap();
        let taps = build_backbone(&mut g, backbone, img).unwrap();
        let nodes = build_fusion(&mut g, &FusionConfig { top_k, ..fusion }, &taps).unwrap();
        (g, nodes)
    }

    #[test]
    fn concat_width_follows_top_k() {
        let bb = BackboneConfig::vgg16();
        let (g, nodes) = build(5, &bb, FusionConfig::full(5, 3));
        assert_eq!(g.shape(nodes.features), &[1, 1280]);
        let (g, nodes) = build(3, &bb, FusionConfig::full(3, 3));
        assert_eq!(g.shape(nodes.features), &[1, 768]);
        for (s, h) in &nodes.heads {
            let side = 224 >> s;
            assert_eq!(g.shape(*h), &[1, side, side, 256]);
        }
    }

    #[test]
    fn top1_has_no_upsampling() {
        let (g, nodes) = build(1, &BackboneConfig::micro(), FusionConfig::micro(1, 3));
        assert_eq!(g.count_kind("upsample_nearest2x"), 0);
        assert_eq!(nodes.heads.len(), 1);
        let (g, _) = build(3, &BackboneConfig::micro(), FusionConfig::micro(3, 3));
        assert_eq!(g.count_kind("upsample_nearest2x"), 2);
    }

    #[test]
    fn single_input_image() {
        let (g, _) = build(4, &BackboneConfig::micro(), FusionConfig::micro(4, 3));
        let image_inputs = g.inputs().filter(|(n, _)| *n == "image").count();
        assert_eq!(g.inputs().count(), 1);
        assert_eq!(image_inputs, 1);
    }

    #[test]
    fn invalid_top_k() {
        let mut g = Graph::new();
        let img = g.input("image", [1, 64, 64, 1]).unwrap();
        let taps = build_backbone(&mut g, &BackboneConfig::micro(), img).unwrap();
        assert!(build_fusion(&mut g.clone(), &FusionConfig::micro(0, 3), &taps).is_err());
        assert!(build_fusion(&mut g, &FusionConfig::micro(5, 3), &taps).is_err());
    }

    #[test]
    fn canonical_scale_order_is_stable() {
        let (g1, n1) = build(3, &BackboneConfig::micro(), FusionConfig::micro(3, 3));
        let (g2, n2) = build(3, &BackboneConfig::micro(), FusionConfig::micro(3, 3));
        let order = |g: &Graph, n: &FusionNodes| -> Vec<String> {
            g.node(n.features).inputs.iter().map(|&i| g.node(i).label.clone()).collect()
        };
        assert_eq!(order(&g1, &n1), vec!["fusion.gap2", "fusion.gap3", "fusion.gap4"]);
        assert_eq!(order(&g1, &n1), order(&g2, &n2));
    }
}
