//! Weight directories: `manifest.json` plus one flat `weights.bin`.
//!
//! The binary file holds every parameter's values as little-endian f64, in
//! manifest order, back to back.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::heatmap_model::{HeatmapModel, HeatmapModelConfig};
use super::params::ParamStore;
use super::trajectory::{TrajectoryConfig, TrajectoryModel};
use crate::error::{Error, Result};

pub const WEIGHTS_FORMAT: &str = "fovcast-weights/1";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const WEIGHTS_FILE: &str = "weights.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset in values, not bytes.
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightManifest {
    pub format: String,
    pub model_type: String,
    pub config: serde_json::Value,
    pub seed: u64,
    pub trained: bool,
    pub params: Vec<ParamEntry>,
    /// SHA-256 of `weights.bin`.
    pub sha256: String,
}

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::Format(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(
        ".{}.tmp{}",
        name.to_string_lossy(),
        std::process::id()
    ));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn weight_bytes(store: &ParamStore) -> (Vec<u8>, Vec<ParamEntry>) {
    let mut bytes = Vec::with_capacity(store.scalar_count() * 8);
    let mut entries = Vec::with_capacity(store.len());
    let mut offset = 0;
    for (name, t) in store.iter() {
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        entries.push(ParamEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset,
            len: t.len(),
        });
        offset += t.len();
    }
    (bytes, entries)
}

pub fn save_params<C: Serialize>(
    dir: &Path,
    model_type: &str,
    config: &C,
    seed: u64,
    trained: bool,
    store: &ParamStore,
) -> Result<WeightManifest> {
    fs::create_dir_all(dir)?;
    let (bytes, params) = weight_bytes(store);
    let manifest = WeightManifest {
        format: WEIGHTS_FORMAT.to_string(),
        model_type: model_type.to_string(),
        config: serde_json::to_value(config)?,
        seed,
        trained,
        params,
        sha256: hex::encode(Sha256::digest(&bytes)),
    };
    atomic_write(&dir.join(WEIGHTS_FILE), &bytes)?;
    atomic_write(
        &dir.join(MANIFEST_FILE),
        serde_json::to_string_pretty(&manifest)?.as_bytes(),
    )?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<WeightManifest> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let m: WeightManifest = serde_json::from_str(&text)?;
    if m.format != WEIGHTS_FORMAT {
        return Err(Error::Format(format!(
            "unknown weights format {:?}",
            m.format
        )));
    }
    Ok(m)
}

/// Fills `store` from `dir`; names, shapes and the checksum must all agree.
pub fn load_params(dir: &Path, manifest: &WeightManifest, store: &mut ParamStore) -> Result<()> {
    let bytes = fs::read(dir.join(WEIGHTS_FILE))?;
    if hex::encode(Sha256::digest(&bytes)) != manifest.sha256 {
        return Err(Error::Format("weights checksum mismatch".into()));
    }
    if bytes.len() % 8 != 0 {
        return Err(Error::Format(
            "weights file is not a whole number of f64".into(),
        ));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    if manifest.params.len() != store.len() {
        return Err(Error::Format(format!(
            "manifest lists {} parameters, model has {}",
            manifest.params.len(),
            store.len()
        )));
    }
    let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
    for ((entry, name), t) in manifest.params.iter().zip(&names).zip(store.values_mut()) {
        if &entry.name != name || entry.shape != t.shape() || entry.len != t.len() {
            return Err(Error::Format(format!(
                "parameter {} {:?} does not match model's {name} {:?}",
                entry.name,
                entry.shape,
                t.shape()
            )));
        }
        let src = values
            .get(entry.offset..entry.offset + entry.len)
            .ok_or_else(|| {
                Error::Format(format!("parameter {} runs past end of file", entry.name))
            })?;
        t.data_mut().copy_from_slice(src);
    }
    Ok(())
}

pub const TRAJECTORY_MODEL: &str = "trajectory";
pub const HEATMAP_MODEL: &str = "heatmap";

impl TrajectoryModel {
    pub fn save(&self, dir: &Path) -> Result<WeightManifest> {
        save_params(
            dir,
            TRAJECTORY_MODEL,
            self.config(),
            self.config().seed,
            self.is_trained(),
            self.params(),
        )
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let m = read_manifest(dir)?;
        if m.model_type != TRAJECTORY_MODEL {
            return Err(Error::Format(format!(
                "expected trajectory weights, found {}",
                m.model_type
            )));
        }
        let cfg: TrajectoryConfig = serde_json::from_value(m.config.clone())?;
        let mut model = TrajectoryModel::new(cfg)?;
        load_params(dir, &m, model.params_mut())?;
        model.set_trained(m.trained);
        Ok(model)
    }
}

impl HeatmapModel {
    pub fn save(&self, dir: &Path) -> Result<WeightManifest> {
        save_params(
            dir,
            HEATMAP_MODEL,
            self.config(),
            self.config().seed,
            self.is_trained(),
            self.params(),
        )
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let m = read_manifest(dir)?;
        if m.model_type != HEATMAP_MODEL {
            return Err(Error::Format(format!(
                "expected heatmap weights, found {}",
                m.model_type
            )));
        }
        let cfg: HeatmapModelConfig = serde_json::from_value(m.config.clone())?;
        let mut model = HeatmapModel::new(cfg)?;
        load_params(dir, &m, model.params_mut())?;
        model.set_trained(m.trained);
        Ok(model)
    }
}
