//! Patient-level k-fold cross-validation.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::manifest::ManifestRecord;
use crate::error::{Error, Result};
use crate::rng::Stream;

/// Fraction of each training portion's patients held out for validation.
pub const VALIDATION_FRACTION: (usize, usize) = (1, 5);

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub seed: u64,
    /// Patient id → test fold.
    pub assignment: BTreeMap<String, usize>,
}

/// Record indices of one fold's three roles.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FoldSplit {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

pub fn patient_kfold(records: &[ManifestRecord], k: usize, seed: u64) -> Result<FoldPlan> {
    if k < 2 {
        return Err(Error::Config(format!("k must be at least 2, got {k}")));
    }
    let patients: BTreeSet<&str> = records.iter().map(|r| r.patient_id.as_str()).collect();
    if patients.len() < k {
        return Err(Error::Data(format!("{} patients cannot fill {k} folds", patients.len())));
    }
    let mut order: Vec<&str> = patients.into_iter().collect();
    order.shuffle(&mut Stream::root(seed).named("folds").rng());
    let assignment = order.iter().enumerate().map(|(i, p)| (p.to_string(), i % k)).collect();
    Ok(FoldPlan { k, seed, assignment })
}

impl FoldPlan {
    pub fn fold_of(&self, patient: &str) -> Option<usize> {
        self.assignment.get(patient).copied()
    }

    /// Patients per fold.
    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in self.assignment.values() {
            sizes[f] += 1;
        }
        sizes
    }

    /// Validation patients for test fold `fold`: a seeded ceil(20%) of the
    /// remaining patients.
    pub fn validation_patients(&self, fold: usize) -> BTreeSet<String> {
        let mut train: Vec<&String> = self.assignment.iter().filter(|(_, &f)| f != fold).map(|(p, _)| p).collect();
        train.shuffle(&mut Stream::root(self.seed).named("validation").index(fold as u64).rng());
        let (num, den) = VALIDATION_FRACTION;
        let n_val = (train.len() * num).div_ceil(den);
        train.into_iter().take(n_val).cloned().collect()
    }

    pub fn split(&self, records: &[ManifestRecord], fold: usize) -> Result<FoldSplit> {
        if fold >= self.k {
            return Err(Error::Config(format!("fold {fold} out of range for k = {}", self.k)));
        }
        let val = self.validation_patients(fold);
        let mut split = FoldSplit::default();
        for (i, r) in records.iter().enumerate() {
            let f = self
                .fold_of(&r.patient_id)
                .ok_or_else(|| Error::Data(format!("patient `{}` is not in the fold plan", r.patient_id)))?;
            if f == fold {
                split.test.push(i);
            } else if val.contains(&r.patient_id) {
                split.validation.push(i);
            } else {
                split.train.push(i);
            }
        }
        if split.train.is_empty() {
            return Err(Error::Data(format!("fold {fold} has an empty training portion")));
        }
        Ok(split)
    }
}
