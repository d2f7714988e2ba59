//! Model checkpoints: a TOML manifest plus one flat `f64` file per parameter.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binio::{check_encoding, read_f64_le, write_f64_le, BYTE_ORDER, ELEMENT};
use crate::error::{HocaError, Result};
use crate::rng::GENERATOR_ID;
use crate::tensor::DenseTensor;

use super::model::{Captioner, DataShape, ModelConfig};

pub const MANIFEST: &str = "checkpoint.toml";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    file: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    generator: String,
    seed: u64,
    byte_order: String,
    element: String,
    model: ModelConfig,
    shape: DataShape,
    params: Vec<ParamEntry>,
}

/// Writes `model` into `dir`, creating it if needed. `seed` is the
/// initialisation seed, recorded so the parameter layout can be rebuilt.
pub fn save_checkpoint(model: &Captioner, seed: u64, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir.join("params"))?;
    let mut params = Vec::with_capacity(model.store.len());
    for (id, p) in model.store.iter() {
        let file = format!("params/{:04}.f64", id.index());
        write_f64_le(&dir.join(&file), p.value.data())?;
        params.push(ParamEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            file,
        });
    }
    let manifest = Manifest {
        version: VERSION,
        generator: GENERATOR_ID.into(),
        seed,
        byte_order: BYTE_ORDER.into(),
        element: ELEMENT.into(),
        model: model.config.clone(),
        shape: model.shape.clone(),
        params,
    };
    let text = toml::to_string(&manifest).map_err(|e| HocaError::Format(e.to_string()))?;
    fs::write(dir.join(MANIFEST), text)?;
    Ok(())
}

/// Rebuilds the model described by the manifest in `dir` and loads every
/// parameter value. Returns the model and its recorded seed.
pub fn load_checkpoint(dir: &Path) -> Result<(Captioner, u64)> {
    let text = fs::read_to_string(dir.join(MANIFEST))?;
    let manifest: Manifest = toml::from_str(&text).map_err(|e| HocaError::Format(e.to_string()))?;
    if manifest.version != VERSION {
        return Err(HocaError::Format(format!("checkpoint version {} is not supported", manifest.version)));
    }
    check_encoding(&manifest.byte_order, &manifest.element)?;
    let mut model = Captioner::new(&manifest.model, &manifest.shape, manifest.seed)?;
    if manifest.params.len() != model.store.len() {
        return Err(HocaError::Format(format!(
            "checkpoint has {} parameters, model has {}",
            manifest.params.len(),
            model.store.len()
        )));
    }
    for entry in &manifest.params {
        let len = entry.shape.iter().product();
        let values = read_f64_le(&dir.join(&entry.file), len)?;
        model.store.set_value(&entry.name, DenseTensor::new(entry.shape.clone(), values)?)?;
    }
    Ok((model, manifest.seed))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_every_bit() {
        let shape = DataShape {
            d_raw: vec![3, 2, 3],
            extents: vec![2, 2, 3],
            vocab: 6,
        };
        let config = ModelConfig {
            hidden: 4,
            encoder_hidden: 2,
            embed: 3,
            common: 3,
            fusion_attention: 2,
            ..ModelConfig::default()
        };
        let mut model = Captioner::new(&config, &shape, 9).unwrap();
        let id = model.store.id("out.b").unwrap();
        model.store.get_mut(id).value.data_mut()[2] = 0.1 + 0.2;
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&model, 9, dir.path()).unwrap();
        let (back, seed) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(seed, 9);
        assert_eq!(back.config, model.config);
        for ((_, a), (_, b)) in model.store.iter().zip(back.store.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value, b.value);
        }
        assert!(matches!(load_checkpoint(&dir.path().join("nope")), Err(HocaError::Io(_))));
    }
}
