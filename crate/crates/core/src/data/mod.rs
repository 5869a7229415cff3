//! Manifests, image loading, preprocessing, augmentation, class weights,
//! patient-level folds and the synthetic dataset.

pub mod augment;
pub mod folds;
pub mod image;
pub mod manifest;
pub mod preprocess;
pub mod synth;
pub mod weights;

use std::path::Path;

pub use augment::{augment, AugmentDraw, AugmentationConfig};
pub use folds::{patient_kfold, FoldPlan, FoldSplit};
pub use image::GrayImage;
pub use manifest::{read_manifest, validate_records, write_manifest, Eye, ManifestRecord};
pub use preprocess::{preprocess, standardize};
pub use synth::{synth_generate, write_synth, SynthSample};
pub use weights::{compute_class_weights, ClassWeights, WeightScheme};

use crate::error::{Error, Result};
use crate::rng::Stream;
use crate::tensor::Tensor;

/// Records with their images already resized to the model input size.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub records: Vec<ManifestRecord>,
    pub images: Vec<GrayImage>,
    pub size: usize,
}

impl Dataset {
    pub fn load(manifest: &Path, size: usize, n_classes: usize) -> Result<Self> {
        let records = read_manifest(manifest)?;
        validate_records(&records, n_classes)?;
        let root = manifest.parent().unwrap_or(Path::new("."));
        let images = records
            .iter()
            .map(|r| Ok(GrayImage::load(&r.resolve(root))?.resize(size, size)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset { records, images, size })
    }

    pub fn from_synth(samples: &[SynthSample], size: usize) -> Self {
        Dataset {
            records: samples.iter().map(|s| s.record.clone()).collect(),
            images: samples.iter().map(|s| s.image.resize(size, size)).collect(),
            size,
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn labels(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.records[i].label).collect()
    }

    pub fn class_counts(&self, indices: &[usize], n_classes: usize) -> Vec<usize> {
        let mut c = vec![0; n_classes];
        for &i in indices {
            c[self.records[i].label] += 1;
        }
        c
    }

    /// Augments (when given a config and a stream) and standardizes one image.
    pub fn example(&self, index: usize, augmentation: Option<(&AugmentationConfig, Stream)>) -> GrayImage {
        let img = &self.images[index];
        match augmentation {
            Some((cfg, stream)) => standardize(&augment(img, cfg, stream)),
            None => standardize(img),
        }
    }

    /// Stacks examples into an NHWC batch. With augmentation, the stream of
    /// record `i` is `stream.index(i)`.
    pub fn batch(&self, indices: &[usize], augmentation: Option<(&AugmentationConfig, Stream)>) -> Result<Tensor<f32>> {
        if indices.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        let mut data = Vec::with_capacity(indices.len() * self.size * self.size);
        for &i in indices {
            let aug = augmentation.map(|(c, s)| (c, s.index(i as u64)));
            data.extend_from_slice(&self.example(i, aug).data);
        }
        Tensor::new(vec![indices.len(), self.size, self.size, 1], data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loaded_dataset_matches_in_memory() {
        let dir = tempfile::tempdir().unwrap();
        let samples = synth_generate(4, 32, 9);
        write_synth(dir.path(), &samples).unwrap();
        let loaded = Dataset::load(&dir.path().join("manifest.csv"), 16, 3).unwrap();
        assert_eq!(loaded, Dataset::from_synth(&samples, 16));
        assert_eq!(loaded.class_counts(&(0..loaded.len()).collect::<Vec<_>>(), 3), vec![4, 4, 4]);
    }

    #[test]
    fn batch_is_nhwc_and_standardized() {
        let ds = Dataset::from_synth(&synth_generate(2, 16, 0), 16);
        let b = ds.batch(&[0, 3, 5], None).unwrap();
        assert_eq!(b.shape(), &[3, 16, 16, 1]);
        let first: f64 = b.data()[..256].iter().map(|&v| f64::from(v)).sum();
        assert!(first.abs() < 1e-3);
        let aug = AugmentationConfig::default();
        let s = Stream::root(1);
        assert_eq!(ds.batch(&[3], Some((&aug, s))).unwrap().data(), ds.batch(&[0, 3], Some((&aug, s))).unwrap().data()[256..].as_ref());
    }
}
