//! Head-swap weight transfer between models.

use serde::{Deserialize, Serialize};

use crate::autodiff::ParamTable;
use crate::error::{Error, Result};
use crate::model::{FpnModel, ModelConfig};
use crate::tensor::Scalar;

/// Prefix of the parameters re-initialized when the class count changes.
pub const HEAD_PREFIX: &str = "classifier.out.";

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransferReport {
    pub copied: Vec<String>,
    pub reinitialized: Vec<String>,
}

/// Copies every structurally identical parameter of `source` into a fresh
/// model for `target`. Only the output layer may differ, and only through
/// the class count; it is then re-initialized from `seed`.
pub fn transfer_weights<T: Scalar>(
    source_model: &ModelConfig,
    source: &ParamTable<T>,
    target: &ModelConfig,
    seed: u64,
) -> Result<(ParamTable<T>, TransferReport)> {
    let model = FpnModel::build(target, 1)?;
    let fresh: ParamTable<T> = model.init_params(seed);
    let class_change = source_model.n_classes() != target.n_classes();
    let mut out = ParamTable::new();
    let mut report = TransferReport::default();
    let mut mismatched = Vec::new();
    for (name, p) in fresh.iter() {
        match source.param(name) {
            _ if class_change && name.starts_with(HEAD_PREFIX) => {
                out.insert(name, p.value.clone(), p.trainable);
                report.reinitialized.push(name.to_string());
            }
            Some(s) if s.value.shape() == p.value.shape() => {
                out.insert(name, s.value.clone(), s.trainable);
                report.copied.push(name.to_string());
            }
            Some(s) => mismatched.push(format!("{name} {:?} → {:?}", s.value.shape(), p.value.shape())),
            None => mismatched.push(format!("{name} (missing in source)")),
        }
    }
    for name in source.names() {
        if fresh.param(name).is_none() {
            mismatched.push(format!("{name} (missing in target)"));
        }
    }
    if !mismatched.is_empty() {
        return Err(Error::Structure(mismatched));
    }
    Ok((out, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(cfg: &ModelConfig, seed: u64) -> ParamTable<f32> {
        FpnModel::build(cfg, 1).unwrap().init_params(seed)
    }

    #[test]
    fn class_change_reinitializes_only_the_output_layer() {
        let src = ModelConfig::micro(2, 4);
        let dst = ModelConfig::micro(2, 3);
        let (p, report) = transfer_weights(&src, &params(&src, 1), &dst, 2).unwrap();
        assert_eq!(report.reinitialized, vec!["classifier.out.kernel", "classifier.out.bias"]);
        assert_eq!(p.get("classifier.out.kernel").unwrap().shape(), &[32, 3]);
        assert_eq!(report.copied.len() + 2, p.len());
    }

    #[test]
    fn same_structure_copies_everything() {
        let cfg = ModelConfig::micro(3, 3);
        let src = params(&cfg, 5);
        let (p, report) = transfer_weights(&cfg, &src, &cfg, 9).unwrap();
        assert!(report.reinitialized.is_empty());
        assert_eq!(p, src);
    }

    #[test]
    fn lateral_width_change_is_rejected() {
        let src = ModelConfig::micro(2, 3);
        let mut dst = src.clone();
        dst.fusion.lateral_channels = 8;
        match transfer_weights(&src, &params(&src, 0), &dst, 0) {
            Err(Error::Structure(names)) => assert!(names.iter().any(|n| n.starts_with("fusion.lateral"))),
            other => panic!("{other:?}"),
        }
    }
}
