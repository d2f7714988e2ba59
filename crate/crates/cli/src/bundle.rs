//! Feature bundles: a TOML manifest plus one flat `f64` file per modality.
//!
//! ```toml
//! version = 1
//!
//! [[modalities]]
//! name = "m0"
//! d = 6
//! t = 3
//! file = "m0.f64"
//! byte_order = "little-endian"
//! element = "f64"
//! layout = "row-major d×t"
//! ```

use std::fs;
use std::path::Path;

use hoca_core::binio::{check_encoding, read_f64_le, write_f64_le, BYTE_ORDER, ELEMENT};
use hoca_core::tensor::FeatureMatrix;
use hoca_core::{HocaError, Result};
use serde::{Deserialize, Serialize};

pub const MANIFEST: &str = "bundle.toml";
pub const VERSION: u32 = 1;
pub const LAYOUT: &str = "row-major d×t";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModalityEntry {
    pub name: String,
    pub d: usize,
    pub t: usize,
    pub file: String,
    pub byte_order: String,
    pub element: String,
    pub layout: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BundleManifest {
    pub version: u32,
    pub modalities: Vec<ModalityEntry>,
}

/// Writes one matrix per modality, named `m0`, `m1`, …
pub fn write_bundle(dir: &Path, features: &[FeatureMatrix]) -> Result<BundleManifest> {
    fs::create_dir_all(dir)?;
    let mut modalities = Vec::with_capacity(features.len());
    for (i, f) in features.iter().enumerate() {
        let name = format!("m{i}");
        let file = format!("{name}.f64");
        write_f64_le(&dir.join(&file), f.values())?;
        modalities.push(ModalityEntry {
            name,
            d: f.d(),
            t: f.t(),
            file,
            byte_order: BYTE_ORDER.into(),
            element: ELEMENT.into(),
            layout: LAYOUT.into(),
        });
    }
    let manifest = BundleManifest {
        version: VERSION,
        modalities,
    };
    let text = toml::to_string(&manifest).map_err(|e| HocaError::Format(e.to_string()))?;
    fs::write(dir.join(MANIFEST), text)?;
    Ok(manifest)
}

pub fn read_bundle(dir: &Path) -> Result<(BundleManifest, Vec<FeatureMatrix>)> {
    let text = fs::read_to_string(dir.join(MANIFEST))?;
    let manifest: BundleManifest = toml::from_str(&text).map_err(|e| HocaError::Format(format!("{MANIFEST}: {e}")))?;
    if manifest.version != VERSION {
        return Err(HocaError::Format(format!("bundle version {} is not supported", manifest.version)));
    }
    if manifest.modalities.is_empty() {
        return Err(HocaError::Format("bundle lists no modalities".into()));
    }
    let mut features = Vec::with_capacity(manifest.modalities.len());
    for m in &manifest.modalities {
        check_encoding(&m.byte_order, &m.element)?;
        if m.layout != LAYOUT {
            return Err(HocaError::Format(format!("{}: layout {:?} is not {LAYOUT:?}", m.name, m.layout)));
        }
        let values = read_f64_le(&dir.join(&m.file), m.d * m.t)?;
        features.push(FeatureMatrix::new(m.d, m.t, values)?);
    }
    Ok((manifest, features))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let feats = vec![
            FeatureMatrix::new(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 0.1]).unwrap(),
            FeatureMatrix::new(1, 1, vec![-7.5]).unwrap(),
        ];
        let manifest = write_bundle(dir.path(), &feats).unwrap();
        assert_eq!(fs::metadata(dir.path().join("m0.f64")).unwrap().len(), 8 * 6);
        let (back_manifest, back) = read_bundle(dir.path()).unwrap();
        assert_eq!(back_manifest, manifest);
        assert_eq!(back, feats);
    }

    #[test]
    fn rejects_bad_manifests() {
        let dir = tempfile::tempdir().unwrap();
        let feats = vec![FeatureMatrix::new(2, 2, vec![1.0; 4]).unwrap()];
        write_bundle(dir.path(), &feats).unwrap();
        let path = dir.path().join(MANIFEST);
        let good = fs::read_to_string(&path).unwrap();

        fs::write(&path, good.replace("version = 1", "version = 2")).unwrap();
        assert!(matches!(read_bundle(dir.path()), Err(HocaError::Format(_))));
        fs::write(&path, good.replace("little-endian", "big-endian")).unwrap();
        assert!(matches!(read_bundle(dir.path()), Err(HocaError::Format(_))));
        fs::write(&path, good.replace("t = 2", "t = 3")).unwrap();
        assert!(matches!(read_bundle(dir.path()), Err(HocaError::Format(_))));
        assert!(matches!(read_bundle(&dir.path().join("absent")), Err(HocaError::Io(_))));
    }
}
