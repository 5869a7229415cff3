//! A synthetic three-class B-scan surrogate with lesion masks.
//!
//! Each image shows a noisy horizontal band on a dark background. Class 0
//! (normal) has nothing else; class 1 carries a few bright blobs spanning
//! 3–6% of the width, class 2 one blob spanning 25–40%. Every synthetic
//! patient contributes 3–8 images of a single class.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::data::image::GrayImage;
use crate::data::manifest::{write_manifest, Eye, ManifestRecord};
use crate::error::Result;
use crate::rng::Stream;

pub const CLASS_NAMES: [&str; 3] = ["normal", "small-lesion", "large-lesion"];
pub const NOISE_STD: f64 = 0.1;
pub const SMALL_SPAN: (f64, f64) = (0.03, 0.06);
pub const LARGE_SPAN: (f64, f64) = (0.25, 0.40);
pub const IMAGES_PER_PATIENT: (usize, usize) = (3, 8);

/// Intensities of the rendered scene, before noise.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthStyle {
    pub background: f64,
    pub band: f64,
    pub small_gain: f64,
    pub large_gain: f64,
    /// Inclusive range of small blobs per image.
    pub small_blobs: (usize, usize),
}

impl Default for SynthStyle {
    fn default() -> Self {
        SynthStyle {
            background: 0.1,
            band: 0.4,
            small_gain: 0.45,
            large_gain: 0.3,
            small_blobs: (2, 4),
        }
    }
}

/// One generated scan: record, 8-bit-exact image and binary lesion mask.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSample {
    pub record: ManifestRecord,
    pub image: GrayImage,
    pub mask: GrayImage,
}

/// Blob diameter in pixels for a span drawn as a fraction of the width.
pub fn blob_diameter(fraction: f64, size: usize) -> usize {
    ((fraction * size as f64).round() as usize).max(1)
}

fn patient_sizes(n: usize, stream: Stream) -> Vec<usize> {
    let mut rng = stream.rng();
    let (lo, hi) = IMAGES_PER_PATIENT;
    let mut sizes = Vec::new();
    let mut left = n;
    while left > 0 {
        let s = rng.random_range(lo..=hi).min(left);
        sizes.push(s);
        left -= s;
    }
    // a short tail is merged into its neighbour, or the pair is split evenly
    if sizes.len() > 1 && sizes[sizes.len() - 1] < lo {
        let m = sizes.pop().unwrap() + sizes.pop().unwrap();
        if m <= hi {
            sizes.push(m);
        } else {
            sizes.extend([m / 2, m - m / 2]);
        }
    }
    sizes
}

fn paint_disk(img: &mut [f64], mask: &mut GrayImage, size: usize, cx: f64, cy: f64, d: usize, gain: f64) {
    let r = d as f64 / 2.0;
    let r2 = r * r;
    let lo_y = (cy - r).floor().max(0.0) as usize;
    let hi_y = ((cy + r).ceil() as usize).min(size - 1);
    let lo_x = (cx - r).floor().max(0.0) as usize;
    let hi_x = ((cx + r).ceil() as usize).min(size - 1);
    for y in lo_y..=hi_y {
        for x in lo_x..=hi_x {
            let dx = x as f64 + 0.5 - cx;
            let dy = y as f64 + 0.5 - cy;
            if dx * dx + dy * dy <= r2 {
                img[y * size + x] += gain;
                mask.set(x, y, 1.0);
            }
        }
    }
}

/// Renders one image of `class`.
pub fn render(class: usize, size: usize, style: &SynthStyle, stream: Stream) -> (GrayImage, GrayImage) {
    let mut rng = stream.rng();
    let s = size as f64;
    let center = s * rng.random_range(0.4..0.6);
    let thickness = s * rng.random_range(0.2..0.3);
    let amplitude = s * rng.random_range(0.0..0.05);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let band_center = |x: f64| center + amplitude * (std::f64::consts::TAU * x / s + phase).sin();

    let mut px = vec![style.background; size * size];
    for y in 0..size {
        for x in 0..size {
            let c = band_center(x as f64 + 0.5);
            if ((y as f64 + 0.5) - c).abs() <= thickness / 2.0 {
                px[y * size + x] = style.band;
            }
        }
    }
    let mut mask = GrayImage::filled(size, size, 0.0);
    match class {
        1 => {
            let blobs = rng.random_range(style.small_blobs.0..=style.small_blobs.1);
            for _ in 0..blobs {
                let d = blob_diameter(rng.random_range(SMALL_SPAN.0..=SMALL_SPAN.1), size);
                let cx = rng.random_range(0.1 * s..0.9 * s);
                let cy = band_center(cx) + rng.random_range(-0.3..0.3) * thickness;
                paint_disk(&mut px, &mut mask, size, cx, cy, d, style.small_gain);
            }
        }
        2 => {
            let d = blob_diameter(rng.random_range(LARGE_SPAN.0..=LARGE_SPAN.1), size);
            let cx = rng.random_range(0.3 * s..0.7 * s);
            let cy = band_center(cx);
            paint_disk(&mut px, &mut mask, size, cx, cy, d, style.large_gain);
        }
        _ => {}
    }
    let noise = Normal::new(0.0, NOISE_STD).expect("positive std");
    let data = px
        .iter()
        .map(|&v| {
            let q = ((v + noise.sample(&mut rng)).clamp(0.0, 1.0) * 255.0).round();
            (q / 255.0) as f32
        })
        .collect();
    (GrayImage::new(size, size, data).expect("square image"), mask)
}

/// Generates `n_per_class` images per class, in memory.
pub fn synth_generate(n_per_class: usize, size: usize, seed: u64) -> Vec<SynthSample> {
    synth_generate_styled(n_per_class, size, seed, &SynthStyle::default())
}

/// [`synth_generate`] with custom scene intensities.
pub fn synth_generate_styled(n_per_class: usize, size: usize, seed: u64, style: &SynthStyle) -> Vec<SynthSample> {
    let root = Stream::root(seed).named("synth");
    let mut out = Vec::with_capacity(3 * n_per_class);
    let mut patient = 0usize;
    for (class, name) in CLASS_NAMES.iter().enumerate() {
        let class_stream = root.named(name);
        let mut i = 0usize;
        for (p, count) in patient_sizes(n_per_class, class_stream.named("patients")).into_iter().enumerate() {
            patient += 1;
            let eye_draw = class_stream.named("eye").index(p as u64).rng().random::<bool>();
            for _ in 0..count {
                let (image, mask) = render(class, size, style, class_stream.index(i as u64));
                out.push(SynthSample {
                    record: ManifestRecord {
                        path: format!("images/img_{:05}.png", out.len()),
                        patient_id: format!("P{patient:04}"),
                        eye: if eye_draw { Eye::Right } else { Eye::Left },
                        label: class,
                    },
                    image,
                    mask,
                });
                i += 1;
            }
        }
    }
    out
}

/// Writes images, `masks/` and `manifest.csv` under `dir`.
pub fn write_synth(dir: &Path, samples: &[SynthSample]) -> Result<Vec<ManifestRecord>> {
    fs::create_dir_all(dir.join("images"))?;
    fs::create_dir_all(dir.join("masks"))?;
    for s in samples {
        s.image.save(&dir.join(&s.record.path))?;
        let name = Path::new(&s.record.path).file_name().expect("file name");
        s.mask.save(&dir.join("masks").join(name))?;
    }
    let records: Vec<ManifestRecord> = samples.iter().map(|s| s.record.clone()).collect();
    write_manifest(&dir.join("manifest.csv"), &records)?;
    Ok(records)
}

/// Loads the mask stored alongside a synthetic record, if any.
pub fn load_mask(root: &Path, record: &ManifestRecord) -> Result<Option<GrayImage>> {
    let name = Path::new(&record.path).file_name().expect("file name");
    let p = root.join("masks").join(name);
    if p.exists() {
        Ok(Some(GrayImage::load(&p)?))
    } else {
        Ok(None)
    }
}
