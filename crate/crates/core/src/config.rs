//! Experiment configuration document shared by every command.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::{BandPreset, PATCH_SIZES_S};
use crate::datagen::{SplitSpec, SynthConfig};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::heads::FinetuneConfig;
use crate::model::ModelConfig;
use crate::pretrain::PretrainConfig;
use crate::sigproc::{default_filter_bank, BandDefinition, FilterBank, PreprocessConfig};
use crate::tokenization::TokenIndex;

/// Overrides the root under which per-command output directories are created.
pub const OUT_ROOT_ENV: &str = "PIMT_OUT_ROOT";
pub const DEFAULT_OUT_ROOT: &str = "runs";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SigprocSection {
    pub preprocess: PreprocessConfig,
    pub bands: Vec<BandDefinition>,
}

impl Default for SigprocSection {
    fn default() -> Self {
        Self {
            preprocess: PreprocessConfig::default(),
            bands: default_filter_bank().bands,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TokenizationSection {
    /// Patch length in samples at the target rate.
    pub patch_len: usize,
}

impl Default for TokenizationSection {
    fn default() -> Self {
        Self { patch_len: 100 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisSection {
    pub band_presets: Vec<String>,
    pub patch_sizes_s: Vec<f64>,
    pub scale_fractions: Vec<f64>,
    /// Test windows averaged into the saliency map.
    pub saliency_windows: usize,
    pub render_svg: bool,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        Self {
            band_presets: ["1-band", "2-band", "4-band", "12-band"].map(String::from).to_vec(),
            patch_sizes_s: PATCH_SIZES_S.to_vec(),
            scale_fractions: vec![0.05, 0.25, 0.5, 1.0],
            saliency_windows: 32,
            render_svg: true,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub pretrain_manifest: Option<PathBuf>,
    pub task_manifest: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Master seed. Copied into every section that carries its own seed.
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
    pub sigproc: SigprocSection,
    pub tokenization: TokenizationSection,
    pub encoder: EncoderConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub split: SplitSpec,
    pub synth: SynthConfig,
    pub analysis: AnalysisSection,
    pub data: DataSection,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::NotFound(path.to_path_buf()));
        }
        let text = fs::read_to_string(path)?;
        let mut cfg: Self = serde_json::from_str(&text)?;
        cfg.set_seed(cfg.seed);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.encoder.seed = seed;
        self.pretrain.seed = seed;
        self.finetune.seed = seed;
        self.split.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        if self.tokenization.patch_len == 0 {
            return Err(Error::Config("tokenization.patch_len must be positive".into()));
        }
        self.filter_bank()?;
        self.encoder.validate()?;
        self.pretrain.validate()?;
        self.finetune.validate()?;
        self.synth.validate()?;
        if !(self.split.test_fraction > 0.0 && self.split.test_fraction < 1.0) {
            return Err(Error::Config("split.test_fraction must lie in (0, 1)".into()));
        }
        for name in &self.analysis.band_presets {
            BandPreset::by_name(name)?;
        }
        if self.analysis.patch_sizes_s.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Config("analysis.patch_sizes_s entries must be positive".into()));
        }
        if self.analysis.scale_fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
            return Err(Error::Config(
                "analysis.scale_fractions entries must lie in (0, 1]".into(),
            ));
        }
        if self.analysis.saliency_windows == 0 {
            return Err(Error::Config("analysis.saliency_windows must be positive".into()));
        }
        Ok(())
    }

    /// The configured bank realized at the target rate.
    pub fn filter_bank(&self) -> Result<FilterBank> {
        FilterBank::new(self.sigproc.bands.clone())?.realize(self.sigproc.preprocess.target_fs)
    }

    pub fn model_config(&self, index: TokenIndex) -> ModelConfig {
        ModelConfig {
            index,
            patch_len: self.tokenization.patch_len,
            encoder: self.encoder.clone(),
        }
    }

    /// SHA-256 of the canonical JSON serialization, ignoring where outputs go.
    pub fn hash(&self) -> String {
        let mut identity = self.clone();
        identity.output_dir = None;
        let bytes = serde_json::to_vec(&identity).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }

    /// Output directory for `command`: the explicit one if set, otherwise
    /// `<root>/<command>` with the root taken from the environment.
    pub fn output_dir_for(&self, command: &str) -> PathBuf {
        if let Some(dir) = &self.output_dir {
            return dir.clone();
        }
        let root = std::env::var_os(OUT_ROOT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_ROOT));
        root.join(command)
    }

    pub fn pretrain_manifest(&self) -> Result<&Path> {
        self.data
            .pretrain_manifest
            .as_deref()
            .ok_or_else(|| Error::Config("data.pretrain_manifest is not set".into()))
    }

    pub fn task_manifest(&self) -> Result<&Path> {
        self.data
            .task_manifest
            .as_deref()
            .ok_or_else(|| Error::Config("data.task_manifest is not set".into()))
    }
}
