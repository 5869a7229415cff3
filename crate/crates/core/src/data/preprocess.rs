//! Resize, then per-image standardization.

use crate::data::image::GrayImage;
use crate::tensor::Tensor;

/// Lower bound on the standard deviation used as divisor.
pub const STD_FLOOR: f64 = 1e-6;

/// `(pixel − mean) / max(std, STD_FLOOR)` with the population std.
pub fn standardize(img: &GrayImage) -> GrayImage {
    let n = img.data.len() as f64;
    let mean = img.mean();
    let var = img.data.iter().map(|&v| (f64::from(v) - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt().max(STD_FLOOR);
    GrayImage {
        width: img.width,
        height: img.height,
        data: img.data.iter().map(|&v| ((f64::from(v) - mean) / std) as f32).collect(),
    }
}

/// Resizes to `size × size` and standardizes, returning `(size, size, 1)`.
pub fn preprocess(img: &GrayImage, size: usize) -> Tensor<f32> {
    to_tensor(&standardize(&img.resize(size, size)))
}

pub fn to_tensor(img: &GrayImage) -> Tensor<f32> {
    Tensor::new(vec![img.height, img.width, 1], img.data.clone()).expect("image is non-empty")
}
