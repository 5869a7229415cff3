//! Per-scale Grad-CAM heatmaps.
//!
//! For a feature map `A` of shape `(x, x, c)` and the pre-softmax score of a
//! target class, the channel weights are the spatial means of the score's
//! gradient with respect to `A`, and the heatmap is the rectified weighted
//! channel sum, divided by its maximum when that is positive.

use std::path::{Path, PathBuf};

use image::{ImageBuffer, Rgb};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Bindings, Graph, Mode, NodeId, ParamTable};
use crate::data::GrayImage;
use crate::error::{shape_err, Error, Result};
use crate::model::FpnModel;
use crate::tensor::{Scalar, Tensor};

/// Opacity of the color ramp in overlays.
pub const OVERLAY_ALPHA: f64 = 0.4;

/// Which feature map the heatmap explains.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CamSource {
    /// Output of the per-scale fusion head.
    #[default]
    Head,
    /// Pooled output of the encoder block.
    Encoder,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub scale: usize,
    pub class: usize,
    /// Values in `[0, 1]`.
    pub grid: GrayImage,
}

/// Grad-CAM of `activation` (shape `(1, h, w, c)`) for column `class` of
/// `scores` (shape `(1, n)`), both nodes of `graph`.
pub fn grad_cam_at<T: Scalar>(
    graph: &Graph,
    params: &ParamTable<T>,
    inputs: &Bindings<T>,
    activation: NodeId,
    scores: NodeId,
    class: usize,
) -> Result<GrayImage> {
    let s_shape = graph.shape(scores);
    if s_shape.len() != 2 || s_shape[0] != 1 || class >= s_shape[1] {
        return Err(shape_err("grad-cam", format!("scores {s_shape:?} cannot select class {class}")));
    }
    let &[1, h, w, c] = graph.shape(activation) else {
        return Err(shape_err("grad-cam", format!("activation must be (1, h, w, c), got {:?}", graph.shape(activation))));
    };
    let ev = graph.eval(params, inputs, Mode::Infer)?;
    let mut seed = Tensor::zeros(s_shape.to_vec());
    seed.data_mut()[class] = T::one();
    let adj = ev.backward_from(scores, seed)?;
    let a = ev.value(activation).data();
    let grid_len = h * w;
    let mut alpha = vec![0.0f64; c];
    if let Some(g) = adj.get(activation) {
        for (i, &v) in g.data().iter().enumerate() {
            alpha[i % c] += v.as_f64();
        }
        alpha.iter_mut().for_each(|x| *x /= grid_len as f64);
    }
    let mut heat: Vec<f64> = a
        .chunks(c)
        .map(|px| px.iter().zip(&alpha).map(|(&v, &k)| v.as_f64() * k).sum::<f64>().max(0.0))
        .collect();
    let max = heat.iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        heat.iter_mut().for_each(|v| *v /= max);
    }
    GrayImage::new(w, h, heat.into_iter().map(|v| v as f32).collect())
}

/// Grad-CAM of a single-image model at pyramid scale `scale`.
pub fn grad_cam<T: Scalar>(
    model: &FpnModel,
    params: &ParamTable<T>,
    image: &Tensor<T>,
    class: usize,
    scale: usize,
    source: CamSource,
) -> Result<Heatmap> {
    if model.batch != 1 {
        return Err(Error::Config(format!("grad-cam needs a batch-1 model, got {}", model.batch)));
    }
    let node = match source {
        CamSource::Head => model.fusion.head(scale),
        CamSource::Encoder => model
            .fusion
            .head(scale)
            .and_then(|_| model.taps.iter().find(|t| t.scale == scale).map(|t| t.node)),
    }
    .ok_or_else(|| {
        Error::Config(format!(
            "scale {scale} is not merged by this model (merged: {:?})",
            model.fusion.heads.iter().map(|h| h.0).collect::<Vec<_>>()
        ))
    })?;
    let mut shape = vec![1];
    shape.extend_from_slice(&model.config.backbone.input);
    let inputs = model.bindings(image.reshape(shape)?, None, &vec![1.0; model.config.n_classes()])?;
    let grid = grad_cam_at(&model.graph, params, &inputs, node, model.fusion.logits, class)?;
    Ok(Heatmap { scale, class, grid })
}

/// Blue at 0, red at 1.
pub fn ramp(v: f64) -> [f64; 3] {
    let v = v.clamp(0.0, 1.0);
    [v, 0.0, 1.0 - v]
}

/// The heatmap upscaled over `image` (min-max normalized for display).
pub fn overlay(heatmap: &Heatmap, image: &GrayImage) -> ImageBuffer<Rgb<u8>, Vec<u8>> {
    let up = heatmap.grid.resize(image.width, image.height);
    let lo = image.data.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = image.data.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let span = if hi > lo { f64::from(hi - lo) } else { 1.0 };
    ImageBuffer::from_fn(image.width as u32, image.height as u32, |x, y| {
        let i = y as usize * image.width + x as usize;
        let g = f64::from(image.data[i] - lo) / span;
        let c = ramp(f64::from(up.data[i]));
        let px = |k: usize| (((1.0 - OVERLAY_ALPHA) * g + OVERLAY_ALPHA * c[k]) * 255.0).round() as u8;
        Rgb([px(0), px(1), px(2)])
    })
}

/// Writes `<stem>_class<k>_scale<i>.png` (overlay) and
/// `<stem>_class<k>_scale<i>_raw.png` (native-resolution heatmap) into `dir`.
pub fn export_heatmap(heatmap: &Heatmap, image: &GrayImage, dir: &Path, stem: &str) -> Result<[PathBuf; 2]> {
    std::fs::create_dir_all(dir)?;
    let base = format!("{stem}_class{}_scale{}", heatmap.class, heatmap.scale);
    let over = dir.join(format!("{base}.png"));
    let raw = dir.join(format!("{base}_raw.png"));
    overlay(heatmap, image).save(&over)?;
    heatmap.grid.save(&raw)?;
    Ok([over, raw])
}

/// Mean heatmap value inside and outside a binary mask of any resolution.
pub fn mask_contrast(heatmap: &GrayImage, mask: &GrayImage) -> (f64, f64) {
    let up = heatmap.resize(mask.width, mask.height);
    let (mut sin, mut nin, mut sout, mut nout) = (0.0, 0usize, 0.0, 0usize);
    for (&h, &m) in up.data.iter().zip(&mask.data) {
        if m > 0.5 {
            sin += f64::from(h);
            nin += 1;
        } else {
            sout += f64::from(h);
            nout += 1;
        }
    }
    (sin / nin.max(1) as f64, sout / nout.max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Init;
    use crate::model::ModelConfig;

    #[test]
    fn toy_mean_score_gives_relu_of_activation() {
        let mut g = Graph::new();
        let a = g.param("a", [1, 3, 3, 1], Init::Zeros).unwrap();
        let score = g.global_avg_pool(a).unwrap();
        let mut p = ParamTable::<f64>::new();
        let values = [0.5, -1.0, 2.0, 0.0, 1.0, -0.5, 4.0, 0.25, 1.5];
        p.insert("a", Tensor::from_f64([1, 3, 3, 1], &values).unwrap(), true);
        let heat = grad_cam_at(&g, &p, &Bindings::new(), a, score, 0).unwrap();
        // alpha = 1/9 > 0, so the map is ReLU(A) / max(A)
        for (h, v) in heat.data.iter().zip(values) {
            assert!((f64::from(*h) - v.max(0.0) / 4.0).abs() < 1e-7);
        }
    }

    #[test]
    fn heatmap_sides_halve_per_scale_and_are_nonnegative() {
        let model = FpnModel::build(&ModelConfig::micro(4, 3), 1).unwrap();
        let params = model.init_params::<f32>(2);
        let img = Tensor::new(vec![64, 64, 1], (0..4096).map(|i| ((i * 7919) % 255) as f32 / 255.0).collect()).unwrap();
        let sides: Vec<usize> = (1..=4)
            .map(|s| {
                let h = grad_cam(&model, &params, &img, 1, s, CamSource::Head).unwrap();
                assert!(h.grid.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
                h.grid.width
            })
            .collect();
        assert_eq!(sides, vec![32, 16, 8, 4]);
        let enc = grad_cam(&model, &params, &img, 0, 2, CamSource::Encoder).unwrap();
        assert_eq!(enc.grid.width, 16);
    }

    #[test]
    fn unmerged_scale_is_an_error() {
        let model = FpnModel::build(&ModelConfig::micro(2, 3), 1).unwrap();
        let params = model.init_params::<f32>(0);
        let img = Tensor::zeros([64, 64, 1]);
        assert!(matches!(grad_cam(&model, &params, &img, 0, 1, CamSource::Head), Err(Error::Config(_))));
    }

    #[test]
    fn logit_shift_invariance() {
        // Adding a constant to every class score leaves the class gradient unchanged.
        let mut g = Graph::new();
        let a = g.param("a", [1, 2, 2, 2], Init::Zeros).unwrap();
        let pooled = g.global_avg_pool(a).unwrap();
        let w = g.param("w", [2, 3], Init::Zeros).unwrap();
        let scores = g.matmul(pooled, w).unwrap();
        let shift = g.param("shift", [3], Init::Zeros).unwrap();
        let shifted = g.add(scores, shift).unwrap();
        let mut p = ParamTable::<f64>::new();
        p.insert("a", Tensor::from_f64([1, 2, 2, 2], &[1., -2., 3., 0.5, -1., 2., 0., 1.]).unwrap(), true);
        p.insert("w", Tensor::from_f64([2, 3], &[1., -1., 0.5, 2., 0., -3.]).unwrap(), true);
        p.insert("shift", Tensor::from_f64([3], &[0.0; 3]).unwrap(), true);
        let before = grad_cam_at(&g, &p, &Bindings::new(), a, shifted, 2).unwrap();
        p.get_mut("shift").unwrap().data_mut().fill(5.0);
        assert_eq!(grad_cam_at(&g, &p, &Bindings::new(), a, shifted, 2).unwrap(), before);
    }

    #[test]
    fn export_names_sizes_and_zero_ramp() {
        let dir = tempfile::tempdir().unwrap();
        let heat = Heatmap {
            scale: 5,
            class: 2,
            grid: GrayImage::filled(7, 7, 0.0),
        };
        let img = GrayImage::new(224, 224, (0..224 * 224).map(|i| (i % 224) as f32 / 223.0).collect()).unwrap();
        let [over, raw] = export_heatmap(&heat, &img, dir.path(), "scan").unwrap();
        assert_eq!(over.file_name().unwrap(), "scan_class2_scale5.png");
        let o = image::open(&over).unwrap().into_rgb8();
        assert_eq!(o.dimensions(), (224, 224));
        // a zero heatmap is pure blue at 40% over the gray image
        let px = o.get_pixel(223, 0);
        assert_eq!(px.0, [153, 153, 255]);
        assert_eq!(o.get_pixel(0, 0).0, [0, 0, 102]);
        assert_eq!(GrayImage::load(&raw).unwrap().width, 7);
        let bytes = std::fs::read(&over).unwrap();
        export_heatmap(&heat, &img, dir.path(), "scan").unwrap();
        assert_eq!(std::fs::read(&over).unwrap(), bytes);
    }

    #[test]
    fn mask_contrast_separates_regions() {
        let mut heat = GrayImage::filled(2, 2, 0.0);
        heat.set(0, 0, 1.0);
        let mut mask = GrayImage::filled(4, 4, 0.0);
        mask.set(0, 0, 1.0);
        let (inside, outside) = mask_contrast(&heat, &mask);
        assert!(inside > outside);
    }
}
