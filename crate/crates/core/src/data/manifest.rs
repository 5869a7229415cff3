//! The dataset manifest: one CSV row per B-scan.
//!
//! ```text
//! path,patient_id,eye,label
//! images/img_00000.png,P0001,OD,0
//! ```
//!
//! Paths are relative to the manifest's directory unless absolute.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Eye {
    #[serde(rename = "OD")]
    Right,
    #[serde(rename = "OS")]
    Left,
    #[serde(rename = "unknown")]
    Unknown,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub path: String,
    pub patient_id: String,
    pub eye: Eye,
    pub label: usize,
}

impl ManifestRecord {
    pub fn resolve(&self, root: &Path) -> PathBuf {
        let p = Path::new(&self.path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            root.join(p)
        }
    }
}

/// Checks the record invariants against a class count.
pub fn validate_records(records: &[ManifestRecord], n_classes: usize) -> Result<()> {
    for (i, r) in records.iter().enumerate() {
        if r.patient_id.trim().is_empty() {
            return Err(Error::Data(format!("manifest row {}: empty patient_id", i + 1)));
        }
        if r.label >= n_classes {
            return Err(Error::LabelOutOfRange {
                label: r.label,
                classes: n_classes,
            });
        }
    }
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let mut reader = csv::Reader::from_path(path)?;
    let header = reader.headers()?.clone();
    if header.iter().collect::<Vec<_>>() != ["path", "patient_id", "eye", "label"] {
        return Err(Error::Data(format!(
            "{}: header must be `path,patient_id,eye,label`, got `{}`",
            path.display(),
            header.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let records = reader.deserialize().collect::<Result<Vec<ManifestRecord>, _>>()?;
    if records.is_empty() {
        return Err(Error::Data(format!("{}: no records", path.display())));
    }
    Ok(records)
}

pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
