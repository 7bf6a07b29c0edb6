//! Self-describing checkpoint archives: a tar file with `manifest.json` and
//! one little-endian f32 blob per parameter under `params/`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use candle_core::DType;
use serde::{Deserialize, Serialize};

use crate::data::Normalizer;
use crate::diffusion::model::{CatsgModel, DataShape, ModelConfig};
use crate::diffusion::train::{Ablation, TrainConfig};
use crate::error::{Error, Result};

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub schema_version: u32,
    pub model: ModelConfig,
    pub data: DataShape,
    pub normalizer: Normalizer,
    pub train: TrainConfig,
    pub dataset_id: String,
    pub step: usize,
    pub params: Vec<ParamEntry>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: CatsgModel,
    pub normalizer: Normalizer,
    pub train: TrainConfig,
    pub dataset_id: String,
    pub step: usize,
}

impl Checkpoint {
    pub fn new(model: CatsgModel, normalizer: &Normalizer, train: &TrainConfig, dataset_id: &str, step: usize) -> Self {
        Self {
            model,
            normalizer: normalizer.clone(),
            train: train.clone(),
            dataset_id: dataset_id.to_string(),
            step,
        }
    }

    pub fn ablation(&self) -> Ablation {
        self.train.ablation
    }

    pub fn manifest(&self) -> CheckpointManifest {
        CheckpointManifest {
            schema_version: CHECKPOINT_SCHEMA_VERSION,
            model: self.model.config.clone(),
            data: self.model.shape.clone(),
            normalizer: self.normalizer.clone(),
            train: self.train.clone(),
            dataset_id: self.dataset_id.clone(),
            step: self.step,
            params: self
                .model
                .store
                .vars()
                .iter()
                .map(|(name, var)| ParamEntry {
                    name: name.clone(),
                    shape: var.dims().to_vec(),
                    file: format!("params/{name}.bin"),
                })
                .collect(),
        }
    }

    /// Writes the archive to a sibling temp file and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let manifest = self.manifest();
        let tmp = path.with_extension("tmp");
        {
            let file = File::create(&tmp)?;
            let mut tar = tar::Builder::new(file);
            let json = serde_json::to_vec_pretty(&manifest)?;
            append(&mut tar, "manifest.json", &json)?;
            for entry in &manifest.params {
                let var = &self.model.store.vars()[&entry.name];
                let values = var.as_tensor().to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
                let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
                append(&mut tar, &entry.file, &bytes)?;
            }
            let mut file = tar.into_inner()?;
            file.flush()?;
            file.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let mut archive = tar::Archive::new(File::open(path)?);
        let mut files = BTreeMap::new();
        for entry in archive.entries()? {
            let mut entry = entry?;
            let name = entry.path()?.to_string_lossy().into_owned();
            let mut buf = Vec::new();
            entry.read_to_end(&mut buf)?;
            files.insert(name, buf);
        }
        let manifest: CheckpointManifest = serde_json::from_slice(
            files
                .get("manifest.json")
                .ok_or_else(|| Error::Schema("checkpoint has no manifest.json".into()))?,
        )?;
        if manifest.schema_version != CHECKPOINT_SCHEMA_VERSION {
            return Err(Error::Schema(format!(
                "unsupported checkpoint schema version {}",
                manifest.schema_version
            )));
        }
        let mut model = CatsgModel::new(&manifest.model, &manifest.data, DType::F32, 0)?;
        if manifest.train.ablation == Ablation::FrozenEnv {
            model.freeze_bank();
        }
        let expected: Vec<&String> = model.store.vars().keys().collect();
        let stored: Vec<&String> = manifest.params.iter().map(|p| &p.name).collect();
        if expected != stored {
            return Err(Error::Schema("checkpoint parameters do not match the model layout".into()));
        }
        for entry in &manifest.params {
            let bytes = files
                .get(&entry.file)
                .ok_or_else(|| Error::Schema(format!("missing blob {}", entry.file)))?;
            if bytes.len() % 4 != 0 {
                return Err(Error::Schema(format!("blob {} is truncated", entry.file)));
            }
            let values: Vec<f32> = bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            model.store.assign(&entry.name, &values)?;
        }
        Ok(Checkpoint {
            model,
            normalizer: manifest.normalizer,
            train: manifest.train,
            dataset_id: manifest.dataset_id,
            step: manifest.step,
        })
    }
}

fn append<W: Write>(tar: &mut tar::Builder<W>, name: &str, bytes: &[u8]) -> Result<()> {
    let mut header = tar::Header::new_gnu();
    header.set_size(bytes.len() as u64);
    header.set_mode(0o644);
    header.set_mtime(0);
    header.set_cksum();
    tar.append_data(&mut header, name, bytes)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bundle::ChannelKind;
    use crate::diffusion::unet::UNetConfig;
    use candle_core::{Device, Tensor};

    #[test]
    fn save_load_forward_is_bit_exact() {
        let cfg = ModelConfig {
            k: 2,
            h: 4,
            top_k: 2,
            diffusion_steps: 20,
            unet: UNetConfig {
                base: 4,
                mults: vec![1, 2],
                blocks_per_level: 1,
                groups: 2,
            },
            ..ModelConfig::default()
        };
        let shape = DataShape {
            t: 8,
            d_x: 1,
            context_kinds: vec![ChannelKind::Continuous, ChannelKind::Phase],
        };
        let model = CatsgModel::new(&cfg, &shape, DType::F32, 11).unwrap();
        let norm = Normalizer {
            x_min: vec![-1.0],
            x_max: vec![1.0],
            c_min: vec![0.0, 0.0],
            c_max: vec![1.0, 1.0],
            context_kinds: shape.context_kinds.clone(),
        };
        let ckpt = Checkpoint::new(model, &norm, &TrainConfig::default(), "abc", 7);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        ckpt.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.step, 7);
        assert_eq!(back.normalizer, norm);

        let x = Tensor::randn(0f32, 1.0, (2, 8, 1), &Device::Cpu).unwrap();
        let c = Tensor::randn(0f32, 1.0, (2, 8, 2), &Device::Cpu).unwrap();
        let run = |m: &CatsgModel| {
            let ctx = m.encode_context(&c).unwrap();
            let cond = &m.env_conds(&ctx).unwrap()[1];
            let y = m.denoise(&x, &[3.0, 9.0], cond).unwrap();
            let w = m.posterior(&x, &ctx).unwrap().w;
            (
                y.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
                w.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            )
        };
        let (a, wa) = run(&ckpt.model);
        let (b, wb) = run(&back.model);
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!(wa, wb);

        // Saving the reloaded checkpoint reproduces the archive byte for byte.
        let path2 = dir.path().join("again.ckpt");
        back.save(&path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn corrupt_archive_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"not a tar").unwrap();
        assert!(Checkpoint::load(&path).is_err());
    }
}
