//! Single-file model archive: magic, version, a JSON header describing the
//! configuration and tensors, then every tensor as little-endian f64 in
//! header order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::{FinetuneModel, HeadSpec};
use crate::model::ModelConfig;
use crate::nn::{Mat, ParamSet};
use crate::pretrain::{ObjectiveSet, PretrainModel};
use crate::sigproc::container::write_atomic;
use crate::sigproc::BandDefinition;

pub const MAGIC: &[u8; 8] = b"PIMTCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CheckpointKind {
    Pretrain,
    Finetune,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub decay: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub version: u32,
    pub kind: CheckpointKind,
    pub model: ModelConfig,
    pub fs: f64,
    pub bands: Vec<BandDefinition>,
    pub objectives: Option<ObjectiveSet>,
    pub head: Option<HeadSpec>,
    pub label_scale: Option<f64>,
    /// Run seed of a fine-tuned model.
    pub seed: Option<u64>,
    pub config_hash: String,
    pub tensors: Vec<TensorInfo>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: ParamSet,
}

fn tensor_infos(params: &ParamSet) -> Vec<TensorInfo> {
    params
        .entries()
        .map(|(_, e)| TensorInfo {
            name: e.name.clone(),
            rows: e.value.nrows(),
            cols: e.value.ncols(),
            decay: e.decay,
        })
        .collect()
}

impl Checkpoint {
    pub fn from_pretrain(model: &PretrainModel, fs: f64, bands: Vec<BandDefinition>, config_hash: &str) -> Self {
        Self {
            header: CheckpointHeader {
                version: VERSION,
                kind: CheckpointKind::Pretrain,
                model: model.model.cfg.clone(),
                fs,
                bands,
                objectives: Some(model.objectives.clone()),
                head: None,
                label_scale: None,
                seed: None,
                config_hash: config_hash.to_string(),
                tensors: tensor_infos(&model.model.params),
            },
            params: model.model.params.clone(),
        }
    }

    pub fn from_finetune(
        model: &FinetuneModel,
        seed: u64,
        fs: f64,
        bands: Vec<BandDefinition>,
        config_hash: &str,
    ) -> Self {
        Self {
            header: CheckpointHeader {
                version: VERSION,
                kind: CheckpointKind::Finetune,
                model: model.model.cfg.clone(),
                fs,
                bands,
                objectives: None,
                head: Some(model.head),
                label_scale: Some(model.label_scale),
                seed: Some(seed),
                config_hash: config_hash.to_string(),
                tensors: tensor_infos(&model.model.params),
            },
            params: model.model.params.clone(),
        }
    }

    /// Fails unless the stored backbone fits `model` on `bands`. Seeds are
    /// not compared.
    pub fn check_compatible(&self, model: &ModelConfig, bands: &[BandDefinition]) -> Result<()> {
        let mut stored = self.header.model.clone();
        stored.encoder.seed = model.encoder.seed;
        if &stored != model {
            return Err(Error::Compatibility(format!(
                "checkpoint model {:?} does not match {:?}",
                self.header.model, model
            )));
        }
        if self.header.bands != bands {
            return Err(Error::Compatibility(
                "checkpoint filter bank differs from the configured one".into(),
            ));
        }
        Ok(())
    }

    /// Fails unless the checkpoint was produced under `config_hash`.
    pub fn check_hash(&self, config_hash: &str) -> Result<()> {
        if self.header.config_hash != config_hash {
            return Err(Error::Compatibility(format!(
                "checkpoint config hash {} differs from {config_hash}",
                self.header.config_hash
            )));
        }
        Ok(())
    }

    pub fn pretrain_model(&self) -> Result<PretrainModel> {
        let objectives = self
            .header
            .objectives
            .clone()
            .ok_or_else(|| Error::Compatibility("checkpoint has no pre-training decoders".into()))?;
        let mut m = PretrainModel::new(self.header.model.clone(), objectives)?;
        m.model.params.load_matching(&self.params, "")?;
        Ok(m)
    }

    pub fn finetune_model(&self) -> Result<FinetuneModel> {
        let head = self
            .header
            .head
            .ok_or_else(|| Error::Compatibility("checkpoint has no task head".into()))?;
        let mut m = FinetuneModel::new(self.header.model.clone(), head, self.header.label_scale.unwrap_or(1.0))?;
        m.model.params.load_matching(&self.params, "")?;
        Ok(m)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let mut out = Vec::with_capacity(20 + header.len() + 8 * self.params.scalar_count());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, e) in self.params.entries() {
            for v in e.value.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::NotFound(path.to_path_buf()));
        }
        let bytes = fs::read(path)?;
        let bad = |reason: &str| Error::Format {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        };
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Compatibility(format!(
                "checkpoint version {version}, expected {VERSION}"
            )));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(20..20 + header_len).ok_or_else(|| bad("truncated header"))?;
        let header: CheckpointHeader = serde_json::from_slice(body).map_err(|e| bad(&e.to_string()))?;
        let mut offset = 20 + header_len;
        let mut params = ParamSet::new();
        for t in &header.tensors {
            let n = t.rows * t.cols;
            let raw = bytes
                .get(offset..offset + 8 * n)
                .ok_or_else(|| bad("truncated tensor data"))?;
            let values: Vec<f64> = raw
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect();
            let m = Mat::from_shape_vec((t.rows, t.cols), values).map_err(|e| bad(&e.to_string()))?;
            params.add(t.name.clone(), m, t.decay);
            offset += 8 * n;
        }
        if offset != bytes.len() {
            return Err(bad("trailing bytes after tensor data"));
        }
        Ok(Self { header, params })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::tokenization::TokenIndex;

    fn model() -> PretrainModel {
        let cfg = ModelConfig {
            index: TokenIndex::new(2, 1, 2),
            patch_len: 4,
            encoder: EncoderConfig {
                n_layers: 1,
                model_dim: 8,
                state_dim: 2,
                ..EncoderConfig::default()
            },
        };
        PretrainModel::new(cfg, ObjectiveSet::all()).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pimt");
        let m = model();
        let ck = Checkpoint::from_pretrain(&m, 200.0, Vec::new(), "abc");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.header, ck.header);
        let restored = back.pretrain_model().unwrap();
        for (id, e) in m.model.params.entries() {
            assert_eq!(restored.model.params.get(id), &e.value);
        }
    }

    #[test]
    fn rejects_foreign_and_missing_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x");
        assert!(matches!(Checkpoint::load(&path), Err(Error::NotFound(_))));
        std::fs::write(&path, b"hello world, not a checkpoint").unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::Format { .. })));
    }
}
