//! Random geometric and intensity augmentation.
//!
//! Rotation, shear and zoom compose into one affine warp about the image
//! center (bilinear, zero fill). Horizontal flips are exact index reversals
//! applied before the warp, and brightness is a multiplicative factor
//! applied after it.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::image::GrayImage;
use crate::error::{Error, Result};
use crate::rng::Stream;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationConfig {
    /// Degrees, sampled from `U[-r, r]`.
    pub rotation_range: f64,
    /// Degrees, sampled from `U[-s, s]`.
    pub shear_range: f64,
    /// Fraction; the factor is sampled from `U[1 - b, 1 + b]`.
    pub brightness_range: f64,
    /// Fraction; the zoom is sampled from `U[1 - z, 1 + z]`.
    pub zoom_range: f64,
    pub horizontal_flip: bool,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        AugmentationConfig {
            rotation_range: 15.0,
            shear_range: 5.0,
            brightness_range: 0.2,
            zoom_range: 0.2,
            horizontal_flip: true,
        }
    }
}

impl AugmentationConfig {
    pub fn none() -> Self {
        AugmentationConfig {
            rotation_range: 0.0,
            shear_range: 0.0,
            brightness_range: 0.0,
            zoom_range: 0.0,
            horizontal_flip: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ranges = [
            ("rotation_range", self.rotation_range),
            ("shear_range", self.shear_range),
            ("brightness_range", self.brightness_range),
            ("zoom_range", self.zoom_range),
        ];
        for (name, v) in ranges {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("augmentation {name} must be ≥ 0, got {v}")));
            }
        }
        if self.zoom_range >= 1.0 || self.brightness_range > 1.0 {
            return Err(Error::Config("zoom_range must be < 1 and brightness_range ≤ 1".into()));
        }
        Ok(())
    }

    /// Draws one set of transform parameters. Every field consumes a draw,
    /// so disabling one range does not shift the others.
    pub fn draw(&self, stream: Stream) -> AugmentDraw {
        let mut rng = stream.rng();
        let mut sym = |r: f64| r * (2.0 * rng.random::<f64>() - 1.0);
        let rotation = sym(self.rotation_range);
        let shear = sym(self.shear_range);
        let brightness = 1.0 + sym(self.brightness_range);
        let zoom = 1.0 + sym(self.zoom_range);
        let flip = rng.random::<f64>() < 0.5 && self.horizontal_flip;
        AugmentDraw {
            rotation,
            shear,
            brightness,
            zoom,
            flip,
        }
    }
}

/// Concrete transform parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentDraw {
    pub rotation: f64,
    pub shear: f64,
    pub brightness: f64,
    pub zoom: f64,
    pub flip: bool,
}

impl AugmentDraw {
    pub const IDENTITY: AugmentDraw = AugmentDraw {
        rotation: 0.0,
        shear: 0.0,
        brightness: 1.0,
        zoom: 1.0,
        flip: false,
    };

    fn is_rigid_identity(&self) -> bool {
        self.rotation == 0.0 && self.shear == 0.0 && self.zoom == 1.0
    }

    /// Forward 2×2 map `rotate · shear · zoom` in (x, y) image coordinates.
    fn matrix(&self) -> [[f64; 2]; 2] {
        let (s, c) = self.rotation.to_radians().sin_cos();
        let t = self.shear.to_radians().tan();
        let z = self.zoom;
        // [c -s; s c] · [1 t; 0 1] · zI
        [[c * z, (c * t - s) * z], [s * z, (s * t + c) * z]]
    }

    pub fn apply(&self, img: &GrayImage) -> GrayImage {
        let mut out = if self.flip { flip_horizontal(img) } else { img.clone() };
        if !self.is_rigid_identity() {
            out = warp(&out, self.matrix());
        }
        if self.brightness != 1.0 {
            let b = self.brightness as f32;
            out.data.iter_mut().for_each(|v| *v *= b);
        }
        out
    }
}

pub fn flip_horizontal(img: &GrayImage) -> GrayImage {
    let mut out = img.clone();
    for row in out.data.chunks_mut(img.width) {
        row.reverse();
    }
    out
}

fn warp(img: &GrayImage, m: [[f64; 2]; 2]) -> GrayImage {
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    let inv = [[m[1][1] / det, -m[0][1] / det], [-m[1][0] / det, m[0][0] / det]];
    let cx = (img.width as f64 - 1.0) / 2.0;
    let cy = (img.height as f64 - 1.0) / 2.0;
    let mut out = GrayImage::filled(img.width, img.height, 0.0);
    for y in 0..img.height {
        let dy = y as f64 - cy;
        for x in 0..img.width {
            let dx = x as f64 - cx;
            let sx = inv[0][0] * dx + inv[0][1] * dy + cx;
            let sy = inv[1][0] * dx + inv[1][1] * dy + cy;
            out.set(x, y, img.sample(sx, sy));
        }
    }
    out
}

/// Draws from `stream` and applies the result.
pub fn augment(img: &GrayImage, config: &AugmentationConfig, stream: Stream) -> GrayImage {
    config.draw(stream).apply(img)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(w: usize, h: usize) -> GrayImage {
        GrayImage::new(w, h, (0..w * h).map(|i| (i as f32 * 0.37).sin().abs()).collect()).unwrap()
    }

    #[test]
    fn disabled_config_is_bit_exact_identity() {
        let img = ramp(9, 7);
        for i in 0..20 {
            let out = augment(&img, &AugmentationConfig::none(), Stream::root(i));
            assert_eq!(out, img);
        }
    }

    #[test]
    fn brightness_only_scales_every_pixel() {
        let img = ramp(6, 6);
        let d = AugmentDraw {
            brightness: 1.2,
            ..AugmentDraw::IDENTITY
        };
        let out = d.apply(&img);
        for (o, i) in out.data.iter().zip(&img.data) {
            assert_eq!(*o, i * 1.2f32);
        }
    }

    #[test]
    fn flip_is_an_involution() {
        let img = ramp(5, 4);
        let d = AugmentDraw {
            flip: true,
            ..AugmentDraw::IDENTITY
        };
        assert_ne!(d.apply(&img), img);
        assert_eq!(d.apply(&d.apply(&img)), img);
        assert_eq!(d.apply(&img).get(0, 1), img.get(4, 1));
    }

    #[test]
    fn quarter_turn_about_the_center() {
        let mut img = GrayImage::filled(5, 5, 0.0);
        img.set(4, 2, 1.0);
        let d = AugmentDraw {
            rotation: 90.0,
            ..AugmentDraw::IDENTITY
        };
        let out = d.apply(&img);
        // (x, y) = (4, 2) is 2 px right of center; a +90° turn maps it 2 px down.
        assert!((out.get(2, 4) - 1.0).abs() < 1e-6);
        assert!(out.data.iter().map(|&v| f64::from(v)).sum::<f64>() - 1.0 < 1e-6);
    }

    #[test]
    fn zoom_out_zero_fills_the_border() {
        let img = GrayImage::filled(8, 8, 1.0);
        let d = AugmentDraw {
            zoom: 0.5,
            ..AugmentDraw::IDENTITY
        };
        let out = d.apply(&img);
        assert_eq!(out.get(0, 0), 0.0);
        assert_eq!(out.get(4, 4), 1.0);
    }

    #[test]
    fn negative_range_is_rejected() {
        let c = AugmentationConfig {
            shear_range: -1.0,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        assert!(AugmentationConfig::default().validate().is_ok());
    }

    proptest! {
        #[test]
        fn shape_is_preserved_and_draws_stay_in_range(seed in any::<u64>(), w in 2usize..12, h in 2usize..12) {
            let cfg = AugmentationConfig::default();
            let d = cfg.draw(Stream::root(seed));
            prop_assert!(d.rotation.abs() <= 15.0 && d.shear.abs() <= 5.0);
            prop_assert!((0.8..=1.2).contains(&d.brightness) && (0.8..=1.2).contains(&d.zoom));
            let out = d.apply(&ramp(w, h));
            prop_assert_eq!((out.width, out.height, out.data.len()), (w, h, w * h));
            prop_assert_eq!(augment(&ramp(w, h), &cfg, Stream::root(seed)), out);
        }
    }
}
